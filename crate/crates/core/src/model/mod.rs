//! Pre-norm transformer models: sequence-to-sequence, sequence classifier and
//! causal language model, with per-site attention variants.

mod config;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{parse_window_spec, ModelConfig, ModelKind, WindowPlan, DEFAULT_SEGMENT_SIZE, WINDOW_LAYERS};

use crate::attention::{AttentionLayer, AttentionShape, AttentionTrace, Site};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

/// Right-padded token ids with per-sequence lengths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    lengths: Vec<usize>,
    width: usize,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Empty("token batch"));
        }
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if width == 0 {
            return Err(Error::Empty("token sequence"));
        }
        if let Some(i) = seqs.iter().position(Vec::is_empty) {
            return Err(Error::IndexOutOfRange {
                what: "empty sequence in batch",
                index: i,
                bound: seqs.len(),
            });
        }
        let mut ids = Vec::with_capacity(seqs.len() * width);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.resize(ids.len() + width - s.len(), PAD);
        }
        Ok(Self {
            ids,
            lengths: seqs.iter().map(Vec::len).collect(),
            width,
        })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    /// Padded sequence length.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// Row-major `[batch, width]` ids, padding included.
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn sequence(&self, b: usize) -> &[usize] {
        &self.ids[b * self.width..b * self.width + self.lengths[b]]
    }

    fn is_padded(&self) -> bool {
        self.lengths.iter().any(|&l| l < self.width)
    }

    fn key_lengths(&self) -> Option<Vec<usize>> {
        self.is_padded().then(|| self.lengths.clone())
    }
}

/// Attention evaluation recorded during a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SiteTrace {
    pub site: Site,
    pub layer: usize,
    pub trace: AttentionTrace,
}

/// Dropout state and collected traces for one forward pass.
#[derive(Debug, Default)]
pub struct ForwardCtx {
    rng: Option<ChaCha8Rng>,
    pub traces: Vec<SiteTrace>,
}

impl ForwardCtx {
    /// Evaluation: no dropout.
    pub fn eval() -> Self {
        Self::default()
    }

    /// Training: dropout (if configured) drawn from `seed`.
    pub fn train(seed: u64) -> Self {
        Self {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            traces: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::full(vec![d], 1.0)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(vec![d])),
        }
    }

    fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gain], p[self.bias])
    }
}

#[derive(Clone, Debug, PartialEq)]
struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FeedForward {
    fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: store.add_uniform(format!("{prefix}.w1"), d, hidden, rng),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(vec![hidden])),
            w2: store.add_uniform(format!("{prefix}.w2"), hidden, d, rng),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(vec![d])),
        }
    }

    fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p[self.w1])?;
        let h = tape.add(h, p[self.b1])?;
        let h = tape.relu(h)?;
        let y = tape.matmul(h, p[self.w2])?;
        tape.add(y, p[self.b2])
    }
}

#[derive(Clone, Debug, PartialEq)]
struct EncoderLayer {
    norm_attn: Norm,
    attn: AttentionLayer,
    norm_ffn: Norm,
    ffn: FeedForward,
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderLayer {
    norm_self: Norm,
    self_attn: AttentionLayer,
    cross: Option<(Norm, AttentionLayer)>,
    norm_ffn: Norm,
    ffn: FeedForward,
}

#[derive(Clone, Debug, PartialEq)]
struct Head {
    weight: ParamId,
    bias: ParamId,
}

/// Parameter counts grouped by name prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Census {
    pub total: usize,
    pub by_group: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    embed: ParamId,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Option<Norm>,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Option<Norm>,
    head: Head,
    positions: Tensor,
}

impl Model {
    /// Builds a model with parameters initialised deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d;
        let embed = store.add(
            "embed",
            Tensor::uniform(vec![config.vocab_size, d], 1.0 / (d as f64).sqrt(), &mut rng),
        );
        let attention = |store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, site: Site, layer: usize| {
            let (variant, masking) = config.resolve(site, layer);
            AttentionLayer::new(store, prefix, d, config.heads, variant, masking, rng)
        };
        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for i in 0..config.encoder_layers {
            let prefix = format!("enc.{i}");
            encoder.push(EncoderLayer {
                norm_attn: Norm::new(&mut store, &format!("{prefix}.ln_self"), d),
                attn: attention(&mut store, &mut rng, &format!("{prefix}.self"), Site::EncoderSelf, i)?,
                norm_ffn: Norm::new(&mut store, &format!("{prefix}.ln_ffn"), d),
                ffn: FeedForward::new(&mut store, &format!("{prefix}.ffn"), d, config.ffn_dim, &mut rng),
            });
        }
        let encoder_norm = (config.encoder_layers > 0).then(|| Norm::new(&mut store, "enc.norm", d));
        let mut decoder = Vec::with_capacity(config.decoder_layers);
        for i in 0..config.decoder_layers {
            let prefix = format!("dec.{i}");
            let norm_self = Norm::new(&mut store, &format!("{prefix}.ln_self"), d);
            let self_attn = attention(&mut store, &mut rng, &format!("{prefix}.self"), Site::DecoderSelf, i)?;
            let cross = if config.kind == ModelKind::Seq2Seq {
                let norm = Norm::new(&mut store, &format!("{prefix}.ln_cross"), d);
                Some((norm, attention(&mut store, &mut rng, &format!("{prefix}.cross"), Site::Cross, i)?))
            } else {
                None
            };
            decoder.push(DecoderLayer {
                norm_self,
                self_attn,
                cross,
                norm_ffn: Norm::new(&mut store, &format!("{prefix}.ln_ffn"), d),
                ffn: FeedForward::new(&mut store, &format!("{prefix}.ffn"), d, config.ffn_dim, &mut rng),
            });
        }
        let decoder_norm = (config.decoder_layers > 0).then(|| Norm::new(&mut store, "dec.norm", d));
        // Small output weights keep initial predictions close to uniform.
        let outputs = match config.kind {
            ModelKind::Classifier => config.num_classes,
            _ => config.vocab_size,
        };
        let head = Head {
            weight: store.add("out.w", Tensor::uniform(vec![d, outputs], 1.0 / d as f64, &mut rng)),
            bias: store.add("out.b", Tensor::zeros(vec![outputs])),
        };
        let positions = sinusoidal_positions(config.max_positions, d);
        Ok(Self {
            config,
            params: store,
            embed,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            head,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameter counts; groups are names up to the attention site or block
    /// (`enc.0.self`, `dec.1.ffn`, `embed`, ...).
    pub fn census(&self) -> Census {
        let mut by_group = BTreeMap::new();
        for (name, t) in self.params.iter() {
            let group = match name.rsplit_once('.') {
                Some((g, _)) => g.to_string(),
                None => name.to_string(),
            };
            *by_group.entry(group).or_insert(0) += t.len();
        }
        Census {
            total: self.params.scalar_count(),
            by_group,
        }
    }

    fn embed(&self, tape: &mut Tape, p: &Bound, tokens: &TokenBatch, ctx: &mut ForwardCtx) -> Result<Var> {
        let (w, d) = (tokens.width(), self.config.d);
        if w > self.config.max_positions {
            return Err(Error::IndexOutOfRange {
                what: "sequence length",
                index: w,
                bound: self.config.max_positions,
            });
        }
        if let Some(&bad) = tokens.ids().iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::IndexOutOfRange {
                what: "token id",
                index: bad,
                bound: self.config.vocab_size,
            });
        }
        let e = tape.embedding(p[self.embed], tokens.ids())?;
        let e = tape.scale(e, (d as f64).sqrt())?;
        let pos = &self.positions.data()[..w * d];
        let mut pe = Vec::with_capacity(tokens.batch() * w * d);
        for _ in 0..tokens.batch() {
            pe.extend_from_slice(pos);
        }
        let pe = tape.constant(Tensor::new(vec![tokens.batch() * w, d], pe)?);
        let x = tape.add(e, pe)?;
        self.dropout(tape, x, ctx)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let rate = self.config.dropout;
        let Some(rng) = ctx.rng.as_mut().filter(|_| rate > 0.0) else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - rate);
        let shape = tape.shape(x).to_vec();
        let n = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mask = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, mask)
    }

    fn residual(&self, tape: &mut Tape, x: Var, y: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let y = self.dropout(tape, y, ctx)?;
        tape.add(x, y)
    }

    /// Final-normed encoder states `[batch·width, d]`.
    fn encode(&self, tape: &mut Tape, p: &Bound, src: &TokenBatch, ctx: &mut ForwardCtx) -> Result<Var> {
        let mut x = self.embed(tape, p, src, ctx)?;
        let shape = AttentionShape {
            batch: src.batch(),
            query_len: src.width(),
            key_len: src.width(),
            key_lengths: src.key_lengths(),
            causal: false,
        };
        for (i, layer) in self.encoder.iter().enumerate() {
            let h = layer.norm_attn.apply(tape, p, x)?;
            let trace = layer.attn.forward(tape, p, h, h, &shape)?;
            ctx.traces.push(SiteTrace {
                site: Site::EncoderSelf,
                layer: i,
                trace,
            });
            x = self.residual(tape, x, trace.output, ctx)?;
            let h = layer.norm_ffn.apply(tape, p, x)?;
            let f = layer.ffn.apply(tape, p, h)?;
            x = self.residual(tape, x, f, ctx)?;
        }
        match &self.encoder_norm {
            Some(norm) => norm.apply(tape, p, x),
            None => Ok(x),
        }
    }

    /// Final-normed decoder states `[batch·width, d]`.
    fn decode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        tgt: &TokenBatch,
        memory: Option<(Var, &TokenBatch)>,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let mut x = self.embed(tape, p, tgt, ctx)?;
        let self_shape = AttentionShape {
            batch: tgt.batch(),
            query_len: tgt.width(),
            key_len: tgt.width(),
            key_lengths: None,
            causal: true,
        };
        for (i, layer) in self.decoder.iter().enumerate() {
            let h = layer.norm_self.apply(tape, p, x)?;
            let trace = layer.self_attn.forward(tape, p, h, h, &self_shape)?;
            ctx.traces.push(SiteTrace {
                site: Site::DecoderSelf,
                layer: i,
                trace,
            });
            x = self.residual(tape, x, trace.output, ctx)?;
            if let (Some((norm, cross)), Some((mem, src))) = (&layer.cross, memory) {
                let shape = AttentionShape {
                    batch: tgt.batch(),
                    query_len: tgt.width(),
                    key_len: src.width(),
                    key_lengths: src.key_lengths(),
                    causal: false,
                };
                let h = norm.apply(tape, p, x)?;
                let trace = cross.forward(tape, p, h, mem, &shape)?;
                ctx.traces.push(SiteTrace {
                    site: Site::Cross,
                    layer: i,
                    trace,
                });
                x = self.residual(tape, x, trace.output, ctx)?;
            }
            let h = layer.norm_ffn.apply(tape, p, x)?;
            let f = layer.ffn.apply(tape, p, h)?;
            x = self.residual(tape, x, f, ctx)?;
        }
        match &self.decoder_norm {
            Some(norm) => norm.apply(tape, p, x),
            None => Ok(x),
        }
    }

    fn project(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.head.weight])?;
        tape.add(y, p[self.head.bias])
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.config.kind != kind {
            return Err(Error::Config(format!(
                "{:?} model cannot run a {kind:?} forward pass",
                self.config.kind
            )));
        }
        Ok(())
    }

    /// Class logits `[batch, num_classes]` from mean-pooled encoder states.
    pub fn forward_classify(&self, tape: &mut Tape, p: &Bound, batch: &TokenBatch, ctx: &mut ForwardCtx) -> Result<Var> {
        self.expect_kind(ModelKind::Classifier)?;
        let x = self.encode(tape, p, batch, ctx)?;
        let (b, w) = (batch.batch(), batch.width());
        let mut pool = vec![0.0; b * b * w];
        for (i, &len) in batch.lengths().iter().enumerate() {
            for t in 0..len {
                pool[i * b * w + i * w + t] = 1.0 / len as f64;
            }
        }
        let pool = tape.constant(Tensor::new(vec![b, b * w], pool)?);
        let pooled = tape.matmul(pool, x)?;
        self.project(tape, p, pooled)
    }

    /// Next-token logits `[batch·width, vocab]`; row `t` predicts token `t+1`.
    pub fn forward_lm(&self, tape: &mut Tape, p: &Bound, batch: &TokenBatch, ctx: &mut ForwardCtx) -> Result<Var> {
        self.expect_kind(ModelKind::LanguageModel)?;
        if let Some(&short) = batch.lengths().iter().find(|&&l| l < 2) {
            return Err(Error::IndexOutOfRange {
                what: "language-model sequence shorter than 2",
                index: short,
                bound: 2,
            });
        }
        let x = self.decode(tape, p, batch, None, ctx)?;
        self.project(tape, p, x)
    }

    /// Teacher-forced logits `[batch·tgt_width, vocab]` for decoder inputs `tgt`.
    pub fn forward_seq2seq(
        &self,
        tape: &mut Tape,
        p: &Bound,
        src: &TokenBatch,
        tgt: &TokenBatch,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        self.expect_kind(ModelKind::Seq2Seq)?;
        if src.batch() != tgt.batch() {
            return Err(Error::shape(
                "seq2seq",
                format!("{} sources vs {} targets", src.batch(), tgt.batch()),
            ));
        }
        let mem = self.encode(tape, p, src, ctx)?;
        let x = self.decode(tape, p, tgt, Some((mem, src)), ctx)?;
        self.project(tape, p, x)
    }

    /// Greedy decoding from `BOS` for at most `max_len` steps. Outputs exclude
    /// `BOS` and stop before the first `EOS`.
    pub fn greedy_decode(&self, src: &TokenBatch, max_len: usize) -> Result<Vec<Vec<usize>>> {
        self.expect_kind(ModelKind::Seq2Seq)?;
        let max_len = max_len.min(self.config.max_positions - 1);
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let mut ctx = ForwardCtx::eval();
        let mem = self.encode(&mut tape, &p, src, &mut ctx)?;
        let b = src.batch();
        let mut seqs = vec![vec![BOS]; b];
        let mut finished = vec![false; b];
        for _ in 0..max_len {
            let mark = tape.len();
            let tgt = TokenBatch::from_sequences(&seqs)?;
            let x = self.decode(&mut tape, &p, &tgt, Some((mem, src)), &mut ctx)?;
            let logits = self.project(&mut tape, &p, x)?;
            let w = tgt.width();
            let values = tape.value(logits);
            for (i, seq) in seqs.iter_mut().enumerate() {
                let next = argmax(values.row(i * w + w - 1));
                finished[i] |= next == EOS;
                seq.push(next);
            }
            tape.truncate(mark);
            ctx.traces.clear();
            if finished.iter().all(|&f| f) {
                break;
            }
        }
        Ok(seqs
            .into_iter()
            .map(|s| s.into_iter().skip(1).take_while(|&t| t != EOS).collect())
            .collect())
    }
}

/// One head's attention at one site for a single input: the window mask
/// `M`, the unwindowed softmax `S(score)` and the weights applied to the
/// values. Each is `[m, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub mask: Tensor,
    pub scores: Tensor,
    pub weights: Tensor,
}

impl Model {
    /// Attention maps for `input` at (`site`, `layer`, `head`), all indices
    /// 0-based. `input` is the encoder input for classifiers and seq2seq
    /// models and the token sequence for language models. Seq2seq models
    /// decode greedily first and show the decoder over `BOS` plus that output.
    pub fn attention_maps(&self, input: &[usize], site: Site, layer: usize, head: usize) -> Result<AttentionMaps> {
        let depth = self.config.depth(site);
        if layer >= depth {
            return Err(Error::IndexOutOfRange {
                what: "layer",
                index: layer,
                bound: depth,
            });
        }
        if head >= self.config.heads {
            return Err(Error::IndexOutOfRange {
                what: "head",
                index: head,
                bound: self.config.heads,
            });
        }
        if !self.config.resolve(site, layer).0.is_windowed() {
            return Err(Error::Config(format!(
                "{} layer {} uses global attention, which has no window mask",
                site.name(),
                layer + 1
            )));
        }
        let src = TokenBatch::from_sequences(&[input.to_vec()])?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let mut ctx = ForwardCtx::eval();
        match self.config.kind {
            ModelKind::Classifier => {
                self.encode(&mut tape, &p, &src, &mut ctx)?;
            }
            ModelKind::LanguageModel => {
                self.decode(&mut tape, &p, &src, None, &mut ctx)?;
            }
            ModelKind::Seq2Seq => {
                let out = self.greedy_decode(&src, 2 * input.len() + 2)?;
                let mut tgt = vec![BOS];
                tgt.extend(&out[0]);
                let tgt = TokenBatch::from_sequences(&[tgt])?;
                let mem = self.encode(&mut tape, &p, &src, &mut ctx)?;
                self.decode(&mut tape, &p, &tgt, Some((mem, &src)), &mut ctx)?;
            }
        }
        let trace = ctx
            .traces
            .iter()
            .find(|t| t.site == site && t.layer == layer)
            .ok_or_else(|| Error::Config(format!("model has no {} layer {}", site.name(), layer + 1)))?
            .trace;
        let mask = trace.mask.expect("windowed layers record a mask");
        let pick = |v: Var| {
            let t = tape.value(v);
            let (m, n) = (t.shape()[1], t.shape()[2]);
            let block = t.data()[head * m * n..(head + 1) * m * n].to_vec();
            Tensor::from_parts(vec![m, n], block)
        };
        Ok(AttentionMaps {
            mask: pick(mask),
            scores: pick(trace.plain),
            weights: pick(trace.weights),
        })
    }
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(..)`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for j in 0..d {
            let freq = 10000f64.powf((j - j % 2) as f64 / d as f64);
            let angle = pos as f64 / freq;
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![len, d], data).expect("positional table is finite")
}
