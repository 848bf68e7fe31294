//! Global, multiplicative-window (MW) and additive-window (AW) attention.
//!
//! * global: `S(score)·(V W^V)` with `score = (Q W^Q)(K W^K)ᵀ/√d`
//! * MW: `(S(score) ⊙ M)·(V W^V)`; the masked weights are not renormalised
//! * AW: `S((s_glb + s_loc)/√d)·(V W^V)` with `s_glb = (Q W^Q_glb)(K W^K_glb)ᵀ`
//!   and `s_loc = (Q W^Q_loc)(K W^K_loc)ᵀ ⊙ M`
//!
//! Causal and key-padding exclusions are an additive `-1e9` bias on the
//! logits, applied to the boundary pointers as well as to the scores.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::windowmask::{pointer_distribution, soft_mask_on_tape};

/// Logit offset standing in for `-∞` at excluded positions.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    EncoderSelf,
    DecoderSelf,
    Cross,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::EncoderSelf, Site::DecoderSelf, Site::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Site::EncoderSelf => "encoder_self",
            Site::DecoderSelf => "decoder_self",
            Site::Cross => "cross",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|site| site.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown site {s:?} (expected encoder_self, decoder_self or cross)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Global,
    MultiplicativeWindow,
    AdditiveWindow,
}

impl Variant {
    pub fn is_windowed(self) -> bool {
        self != Variant::Global
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Masking {
    Token,
    Segment(usize),
}

impl Masking {
    /// Block size of the cumulative sums (1 for token masking).
    pub fn block(self) -> usize {
        match self {
            Masking::Token => 1,
            Masking::Segment(b) => b,
        }
    }
}

/// Which attention variant and masking mode a site uses, and on which
/// (0-based) layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionSiteSpec {
    pub site: Site,
    pub variant: Variant,
    pub masking: Masking,
    pub layers: BTreeSet<usize>,
}

impl AttentionSiteSpec {
    /// Checks the spec against the number of layers that carry `site`.
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.site == Site::DecoderSelf && matches!(self.masking, Masking::Segment(_)) {
            return Err(Error::Config(
                "decoder self-attention cannot use segment masking: segments past the current step are unfinished"
                    .into(),
            ));
        }
        if let Masking::Segment(0) = self.masking {
            return Err(Error::Config("segment size must be at least 1".into()));
        }
        if let Some(&bad) = self.layers.iter().find(|&&l| l >= depth) {
            return Err(Error::Config(format!(
                "{} layer {} is outside a stack of depth {depth}",
                self.site,
                bad + 1
            )));
        }
        Ok(())
    }
}

/// Geometry of one attention call over a padded batch.
#[derive(Clone, Debug)]
pub struct AttentionShape {
    pub batch: usize,
    pub query_len: usize,
    pub key_len: usize,
    /// Valid key count per batch entry; keys beyond it are padding.
    pub key_lengths: Option<Vec<usize>>,
    pub causal: bool,
}

impl AttentionShape {
    pub fn single(query_len: usize, key_len: usize, causal: bool) -> Self {
        Self {
            batch: 1,
            query_len,
            key_len,
            key_lengths: None,
            causal,
        }
    }

    /// `[batch·heads, query_len, key_len]` additive bias, or `None` when
    /// nothing is excluded.
    pub fn bias(&self, tape: &mut Tape, heads: usize) -> Result<Option<Var>> {
        if self.causal && self.query_len != self.key_len {
            return Err(Error::shape(
                "causal attention",
                format!("{} queries vs {} keys", self.query_len, self.key_len),
            ));
        }
        let padded = self
            .key_lengths
            .as_ref()
            .is_some_and(|l| l.iter().any(|&n| n < self.key_len));
        if !self.causal && !padded {
            return Ok(None);
        }
        let (m, n) = (self.query_len, self.key_len);
        let mut data = vec![0.0; self.batch * heads * m * n];
        for b in 0..self.batch {
            let valid = self.key_lengths.as_ref().map_or(n, |l| l[b]);
            for h in 0..heads {
                let base = (b * heads + h) * m * n;
                for i in 0..m {
                    for j in 0..n {
                        if j >= valid || (self.causal && j > i) {
                            data[base + i * n + j] = MASKED_LOGIT;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![self.batch * heads, m, n], data)?;
        Ok(Some(tape.constant(t)))
    }
}

/// Tape handles produced by one attention evaluation.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    /// `[m, d]` (single head) or `[batch·m, d]` (multi-head) output.
    pub output: Var,
    /// Final attention weights applied to the values, `[g, m, n]`.
    pub weights: Var,
    /// `S(score)` before any window: the global-attention weights for MW and
    /// global, `S(s_glb/√d)` for AW.
    pub plain: Var,
    /// Window mask `[g, m, n]` for windowed variants.
    pub mask: Option<Var>,
}

enum Scores {
    Global { q: Var, k: Var },
    Multiplicative { q: Var, k: Var, mask: Var },
    Additive {
        q_glb: Var,
        k_glb: Var,
        q_loc: Var,
        k_loc: Var,
        mask: Var,
    },
}

/// Core attention over head-batched `[g, m, e]` projections.
fn attend(tape: &mut Tape, scores: Scores, v: Var, bias: Option<Var>, scale: f64) -> Result<(Var, Var, Var)> {
    let with_bias = |tape: &mut Tape, x: Var| match bias {
        Some(b) => tape.add(x, b),
        None => Ok(x),
    };
    let (weights, plain) = match scores {
        Scores::Global { q, k } => {
            let s = tape.matmul_nt(q, k)?;
            let s = tape.scale(s, scale)?;
            let s = with_bias(tape, s)?;
            let w = tape.softmax_rows(s)?;
            (w, w)
        }
        Scores::Multiplicative { q, k, mask } => {
            let s = tape.matmul_nt(q, k)?;
            let s = tape.scale(s, scale)?;
            let s = with_bias(tape, s)?;
            let p = tape.softmax_rows(s)?;
            (tape.mul(p, mask)?, p)
        }
        Scores::Additive {
            q_glb,
            k_glb,
            q_loc,
            k_loc,
            mask,
        } => {
            let s_glb = tape.matmul_nt(q_glb, k_glb)?;
            let s_loc = tape.matmul_nt(q_loc, k_loc)?;
            let s_loc = tape.mul(s_loc, mask)?;
            let s = tape.add(s_glb, s_loc)?;
            let s = tape.scale(s, scale)?;
            let s = with_bias(tape, s)?;
            let w = tape.softmax_rows(s)?;
            let g = tape.scale(s_glb, scale)?;
            let g = with_bias(tape, g)?;
            let p = tape.softmax_rows(g)?;
            (w, p)
        }
    };
    let out = tape.matmul(weights, v)?;
    Ok((weights, plain, out))
}

/// Projection weights of single-head global and MW attention, each `[d, d]`.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionWeights {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

/// Projection weights of single-head AW attention, each `[d, d]`.
#[derive(Clone, Copy, Debug)]
pub struct AdditiveWeights {
    pub query_global: Var,
    pub key_global: Var,
    pub query_local: Var,
    pub key_local: Var,
    pub value: Var,
}

fn check_inputs(tape: &Tape, q: Var, k: Var, v: Var) -> Result<(usize, usize, usize)> {
    let (sq, sk, sv) = (tape.shape(q), tape.shape(k), tape.shape(v));
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk != sv {
        return Err(Error::shape("attention", format!("Q {sq:?}, K {sk:?}, V {sv:?}")));
    }
    Ok((sq[0], sk[0], sq[1]))
}

fn project_single(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let p = tape.matmul(x, w)?;
    tape.split_heads(p, 1, 1)
}

fn check_mask(tape: &mut Tape, mask: Var, m: usize, n: usize) -> Result<Var> {
    if tape.shape(mask) != [m, n] {
        return Err(Error::shape(
            "attention mask",
            format!("{:?}, expected [{m}, {n}]", tape.shape(mask)),
        ));
    }
    tape.reshape(mask, &[1, m, n])
}

fn single_head(tape: &mut Tape, scores: Scores, v: Var, m: usize, n: usize, d: usize, causal: bool, mask: Option<Var>) -> Result<AttentionTrace> {
    let bias = AttentionShape::single(m, n, causal).bias(tape, 1)?;
    let (weights, plain, out) = attend(tape, scores, v, bias, 1.0 / (d as f64).sqrt())?;
    let output = tape.merge_heads(out, 1, 1)?;
    Ok(AttentionTrace {
        output,
        weights,
        plain,
        mask,
    })
}

/// Single-head global attention for `Q: [m,d]`, `K, V: [n,d]`.
pub fn global_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    w: &ProjectionWeights,
    causal: bool,
) -> Result<AttentionTrace> {
    let (m, n, d) = check_inputs(tape, q, k, v)?;
    let qh = project_single(tape, q, w.query)?;
    let kh = project_single(tape, k, w.key)?;
    let vh = project_single(tape, v, w.value)?;
    single_head(tape, Scores::Global { q: qh, k: kh }, vh, m, n, d, causal, None)
}

/// Single-head MW attention with an `[m, n]` mask.
pub fn multiplicative_window_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    w: &ProjectionWeights,
    mask: Var,
    causal: bool,
) -> Result<AttentionTrace> {
    let (m, n, d) = check_inputs(tape, q, k, v)?;
    let mask3 = check_mask(tape, mask, m, n)?;
    let qh = project_single(tape, q, w.query)?;
    let kh = project_single(tape, k, w.key)?;
    let vh = project_single(tape, v, w.value)?;
    let scores = Scores::Multiplicative {
        q: qh,
        k: kh,
        mask: mask3,
    };
    single_head(tape, scores, vh, m, n, d, causal, Some(mask))
}

/// Single-head AW attention with an `[m, n]` mask.
pub fn additive_window_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    w: &AdditiveWeights,
    mask: Var,
    causal: bool,
) -> Result<AttentionTrace> {
    let (m, n, d) = check_inputs(tape, q, k, v)?;
    let mask3 = check_mask(tape, mask, m, n)?;
    let scores = Scores::Additive {
        q_glb: project_single(tape, q, w.query_global)?,
        k_glb: project_single(tape, k, w.key_global)?,
        q_loc: project_single(tape, q, w.query_local)?,
        k_loc: project_single(tape, k, w.key_local)?,
        mask: mask3,
    };
    let vh = project_single(tape, v, w.value)?;
    single_head(tape, scores, vh, m, n, d, causal, Some(mask))
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct BoundaryIds {
    left_query: ParamId,
    left_key: ParamId,
    right_query: ParamId,
    right_key: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum ScoreIds {
    Dot { query: ParamId, key: ParamId },
    Additive {
        query_global: ParamId,
        key_global: ParamId,
        query_local: ParamId,
        key_local: ParamId,
    },
}

/// A multi-head attention block with its own parameters.
///
/// Projections are `[d, d]` and split column-wise into `heads` blocks of
/// width `d/heads`; each head computes its own boundary pointers and mask
/// from its slice of the boundary projections. Scores use `1/√(d/heads)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer {
    variant: Variant,
    masking: Masking,
    heads: usize,
    d: usize,
    scores: ScoreIds,
    value: ParamId,
    output: ParamId,
    boundary: Option<BoundaryIds>,
}

impl AttentionLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        variant: Variant,
        masking: Masking,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        let mut add = |name: &str| store.add_uniform(format!("{prefix}.{name}"), d, d, rng);
        let scores = match variant {
            Variant::AdditiveWindow => ScoreIds::Additive {
                query_global: add("wq_glb"),
                key_global: add("wk_glb"),
                query_local: add("wq_loc"),
                key_local: add("wk_loc"),
            },
            _ => ScoreIds::Dot {
                query: add("wq"),
                key: add("wk"),
            },
        };
        let value = add("wv");
        let output = add("wo");
        let boundary = variant.is_windowed().then(|| BoundaryIds {
            left_query: add("wl_q"),
            left_key: add("wl_k"),
            right_query: add("wr_q"),
            right_key: add("wr_k"),
        });
        Ok(Self {
            variant,
            masking,
            heads,
            d,
            scores,
            value,
            output,
            boundary,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn masking(&self) -> Masking {
        self.masking
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Queries `xq: [batch·m, d]` attend over `xkv: [batch·n, d]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, xq: Var, xkv: Var, shape: &AttentionShape) -> Result<AttentionTrace> {
        let (b, h) = (shape.batch, self.heads);
        let expect_q = [b * shape.query_len, self.d];
        let expect_k = [b * shape.key_len, self.d];
        if tape.shape(xq) != expect_q || tape.shape(xkv) != expect_k {
            return Err(Error::shape(
                "multi_head",
                format!(
                    "queries {:?}, keys {:?}; expected {expect_q:?}, {expect_k:?}",
                    tape.shape(xq),
                    tape.shape(xkv)
                ),
            ));
        }
        let scale = 1.0 / ((self.d / h) as f64).sqrt();
        let bias = shape.bias(tape, h)?;
        let project = |tape: &mut Tape, x: Var, w: ParamId| -> Result<Var> {
            let y = tape.matmul(x, p[w])?;
            tape.split_heads(y, b, h)
        };
        let mask = match self.boundary {
            Some(ids) => {
                let ql = project(tape, xq, ids.left_query)?;
                let kl = project(tape, xkv, ids.left_key)?;
                let left = pointer_distribution(tape, ql, kl, scale, bias)?;
                let qr = project(tape, xq, ids.right_query)?;
                let kr = project(tape, xkv, ids.right_key)?;
                let right = pointer_distribution(tape, qr, kr, scale, bias)?;
                Some(soft_mask_on_tape(tape, left, right, self.masking.block())?)
            }
            None => None,
        };
        let scores = match (self.scores, self.variant, mask) {
            (ScoreIds::Dot { query, key }, Variant::Global, _) => Scores::Global {
                q: project(tape, xq, query)?,
                k: project(tape, xkv, key)?,
            },
            (ScoreIds::Dot { query, key }, Variant::MultiplicativeWindow, Some(mask)) => Scores::Multiplicative {
                q: project(tape, xq, query)?,
                k: project(tape, xkv, key)?,
                mask,
            },
            (
                ScoreIds::Additive {
                    query_global,
                    key_global,
                    query_local,
                    key_local,
                },
                Variant::AdditiveWindow,
                Some(mask),
            ) => Scores::Additive {
                q_glb: project(tape, xq, query_global)?,
                k_glb: project(tape, xkv, key_global)?,
                q_loc: project(tape, xq, query_local)?,
                k_loc: project(tape, xkv, key_local)?,
                mask,
            },
            _ => unreachable!("parameter layout always matches the variant"),
        };
        let v = project(tape, xkv, self.value)?;
        let (weights, plain, out) = attend(tape, scores, v, bias, scale)?;
        let merged = tape.merge_heads(out, b, h)?;
        let output = tape.matmul(merged, p[self.output])?;
        Ok(AttentionTrace {
            output,
            weights,
            plain,
            mask,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn decoder_self_rejects_segments() {
        let spec = AttentionSiteSpec {
            site: Site::DecoderSelf,
            variant: Variant::MultiplicativeWindow,
            masking: Masking::Segment(2),
            layers: [0].into(),
        };
        assert!(spec.validate(2).is_err());
        let spec = AttentionSiteSpec {
            masking: Masking::Token,
            layers: [0, 3].into(),
            ..spec
        };
        assert!(spec.validate(2).is_err());
        assert!(spec.validate(4).is_ok());
    }

    #[test]
    fn indivisible_width_is_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = AttentionLayer::new(&mut store, "x", 10, 4, Variant::Global, Masking::Token, &mut rng);
        assert!(err.is_err());
    }

    #[test]
    fn single_key_returns_projected_value() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = tape.constant(Tensor::uniform(vec![1, 4], 1.0, &mut rng));
        let kv = tape.constant(Tensor::uniform(vec![1, 4], 1.0, &mut rng));
        let w = ProjectionWeights {
            query: tape.constant(Tensor::uniform(vec![4, 4], 0.5, &mut rng)),
            key: tape.constant(Tensor::uniform(vec![4, 4], 0.5, &mut rng)),
            value: tape.constant(Tensor::uniform(vec![4, 4], 0.5, &mut rng)),
        };
        let out = global_attention(&mut tape, q, kv, kv, &w, false).unwrap();
        let vw = tape.matmul(kv, w.value).unwrap();
        assert!(tape.value(out.output).max_abs_diff(tape.value(vw)) < 1e-15);
    }

    #[test]
    fn causal_shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let shape = AttentionShape::single(2, 3, true);
        assert!(shape.bias(&mut tape, 1).is_err());
    }
}
