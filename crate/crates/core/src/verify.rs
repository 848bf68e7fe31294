//! Gradient-check suites over primitives, attention and whole models.
//!
//! Each unit is a scalar function of random parameters, checked against
//! central differences. A fault kind can be passed through to corrupt one
//! backward rule; units that use that primitive should then fail.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{
    additive_window_attention, global_attention, multiplicative_window_attention, AdditiveWeights, AttentionLayer,
    AttentionShape, Masking, ProjectionWeights, Variant,
};
use crate::error::Result;
use crate::model::{ForwardCtx, Model, ModelConfig, ModelKind, TokenBatch};
use crate::params::{Bound, ParamStore};
use crate::tensor::{grad_check, weighted_sum, GradCheckConfig, OpKind, Sampling, ScanDir, Tape, Tensor, Var};
use crate::train::{batch_loss, seq2seq_batch, TaskBatch};
use crate::windowmask::{boundary_scores, build_structure, soft_mask_by_matmul, soft_mask_on_tape, BoundaryParams};

pub const PRIMITIVE_THRESHOLD: f64 = 1e-6;
pub const MODEL_THRESHOLD: f64 = 1e-5;

/// Share of parameter coordinates probed in the model suite.
pub const MODEL_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnitReport {
    pub unit: String,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl UnitReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.threshold
    }
}

type UnitFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Unit {
    name: String,
    params: Vec<Tensor>,
    f: UnitFn,
}

fn unit(name: impl Into<String>, params: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Unit {
    Unit {
        name: name.into(),
        params,
        f: Box::new(f),
    }
}

fn run(units: Vec<Unit>, threshold: f64, sampling: Sampling, fault: Option<OpKind>) -> Result<Vec<UnitReport>> {
    let cfg = GradCheckConfig {
        sampling,
        fault,
        ..GradCheckConfig::default()
    };
    units
        .into_iter()
        .map(|u| {
            let r = grad_check(&u.f, &u.params, &cfg)?;
            Ok(UnitReport {
                unit: u.name,
                max_rel_error: r.max_rel_error,
                threshold,
                checked: r.checked,
                skipped_kinks: r.skipped_kinks,
            })
        })
        .collect()
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

/// Values bounded away from zero so ReLU kinks stay out of reach of the
/// finite-difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_t(rng, shape);
    for x in t.data_mut() {
        *x = x.signum() * (0.1 + x.abs());
    }
    t
}

const RANKS: [&[usize]; 3] = [&[5], &[3, 4], &[2, 3, 4]];

/// Every tape primitive at ranks 1 to 3, plus the soft masks and boundary
/// scores.
fn primitive_units() -> Vec<Unit> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut units = Vec::new();
    for (ri, &shape) in RANKS.iter().enumerate() {
        let r = ri + 1;
        let last = *shape.last().unwrap();
        let p2 = |rng: &mut ChaCha8Rng, b: &[usize]| vec![rand_t(rng, shape), rand_t(rng, b)];
        units.push(unit(format!("add rank {r}"), p2(&mut rng, shape), |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, 1)
        }));
        units.push(unit(format!("add scalar-broadcast rank {r}"), p2(&mut rng, &[1]), |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, 2)
        }));
        units.push(unit(format!("sub rank {r}"), p2(&mut rng, shape), |t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y, 3)
        }));
        units.push(unit(format!("sub row-broadcast rank {r}"), p2(&mut rng, &[last]), |t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y, 4)
        }));
        units.push(unit(format!("mul rank {r}"), p2(&mut rng, shape), |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, 5)
        }));
        units.push(unit(format!("mul row-broadcast rank {r}"), p2(&mut rng, &[last]), |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, 6)
        }));
        units.push(unit(format!("scale rank {r}"), vec![rand_t(&mut rng, shape)], |t, v| {
            let y = t.scale(v[0], -1.7)?;
            weighted_sum(t, y, 7)
        }));
        units.push(unit(format!("softmax_rows rank {r}"), vec![rand_t(&mut rng, shape)], |t, v| {
            let y = t.softmax_rows(v[0])?;
            weighted_sum(t, y, 8)
        }));
        units.push(unit(format!("relu rank {r}"), vec![away_from_zero(&mut rng, shape)], |t, v| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y, 9)
        }));
        let ln = vec![rand_t(&mut rng, shape), rand_t(&mut rng, &[last]), rand_t(&mut rng, &[last])];
        units.push(unit(format!("layer_norm rank {r}"), ln, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(t, y, 10)
        }));
        units.push(unit(format!("sum rank {r}"), vec![rand_t(&mut rng, shape)], |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.sum(y)
        }));
        let flat = shape.iter().product::<usize>();
        units.push(unit(format!("reshape rank {r}"), vec![rand_t(&mut rng, shape)], move |t, v| {
            let y = t.reshape(v[0], &[flat])?;
            weighted_sum(t, y, 11)
        }));
        for (dir, name) in [(ScanDir::Prefix, "prefix"), (ScanDir::Suffix, "suffix")] {
            for block in [1, 2, 3] {
                units.push(unit(
                    format!("scan {name} block {block} rank {r}"),
                    vec![rand_t(&mut rng, shape)],
                    move |t, v| {
                        let y = t.scan(v[0], dir, block)?;
                        weighted_sum(t, y, 12)
                    },
                ));
            }
        }
        if r >= 2 {
            units.push(unit(format!("transpose rank {r}"), vec![rand_t(&mut rng, shape)], |t, v| {
                let y = t.transpose(v[0])?;
                weighted_sum(t, y, 13)
            }));
            let lead = shape[0];
            units.push(unit(format!("concat_rows rank {r}"), p2(&mut rng, shape), |t, v| {
                let y = t.concat_rows(&[v[0], v[1], v[0]])?;
                weighted_sum(t, y, 14)
            }));
            units.push(unit(format!("slice_rows rank {r}"), vec![rand_t(&mut rng, shape)], move |t, v| {
                let y = t.slice_rows(v[0], 1, lead - 1)?;
                weighted_sum(t, y, 15)
            }));
        }
    }
    units.push(unit(
        "matmul rank 2",
        vec![rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[4, 2])],
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 20)
        },
    ));
    units.push(unit(
        "matmul rank 3",
        vec![rand_t(&mut rng, &[2, 3, 4]), rand_t(&mut rng, &[2, 4, 2])],
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 21)
        },
    ));
    units.push(unit(
        "matmul transposed-rhs rank 2",
        vec![rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[5, 4])],
        |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            weighted_sum(t, y, 22)
        },
    ));
    units.push(unit(
        "matmul transposed-rhs rank 3",
        vec![rand_t(&mut rng, &[2, 3, 4]), rand_t(&mut rng, &[2, 5, 4])],
        |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            weighted_sum(t, y, 23)
        },
    ));
    units.push(unit("embedding_lookup", vec![rand_t(&mut rng, &[6, 3])], |t, v| {
        let y = t.embedding(v[0], &[4, 0, 4, 2])?;
        weighted_sum(t, y, 24)
    }));
    units.push(unit("cross_entropy", vec![rand_t(&mut rng, &[4, 5])], |t, v| {
        t.cross_entropy(v[0], &[Some(1), None, Some(4), Some(1)])
    }));
    units.push(unit("split_heads", vec![rand_t(&mut rng, &[6, 4])], |t, v| {
        let y = t.split_heads(v[0], 2, 2)?;
        weighted_sum(t, y, 25)
    }));
    units.push(unit("merge_heads", vec![rand_t(&mut rng, &[4, 3, 2])], |t, v| {
        let y = t.merge_heads(v[0], 2, 2)?;
        weighted_sum(t, y, 26)
    }));
    units.extend(mask_units(&mut rng));
    units
}

fn distributions(t: &mut Tape, logits: Var) -> Result<Var> {
    let scaled = t.scale(logits, 3.0)?;
    t.softmax_rows(scaled)
}

fn mask_units(rng: &mut ChaCha8Rng) -> Vec<Unit> {
    let mut units = Vec::new();
    for n in [1, 4, 7] {
        let p = vec![rand_t(rng, &[3, n]), rand_t(rng, &[3, n])];
        units.push(unit(format!("soft_mask n={n}"), p, |t, v| {
            let (l, r) = (distributions(t, v[0])?, distributions(t, v[1])?);
            let m = soft_mask_on_tape(t, l, r, 1)?;
            weighted_sum(t, m, 30)
        }));
        for b in [2, 3] {
            if b > n {
                continue;
            }
            let p = vec![rand_t(rng, &[3, n]), rand_t(rng, &[3, n])];
            units.push(unit(format!("segment_soft_mask n={n} b={b}"), p, move |t, v| {
                let (l, r) = (distributions(t, v[0])?, distributions(t, v[1])?);
                let m = soft_mask_on_tape(t, l, r, b)?;
                weighted_sum(t, m, 31)
            }));
        }
    }
    let structure = build_structure(5, 2).expect("valid sizes");
    for (name, matrix) in [("soft_mask by matmul", structure.upper), ("segment_soft_mask by matmul", structure.segment)] {
        let p = vec![rand_t(rng, &[3, 5]), rand_t(rng, &[3, 5])];
        units.push(unit(name, p, move |t, v| {
            let s = t.constant(matrix.clone());
            let (l, r) = (distributions(t, v[0])?, distributions(t, v[1])?);
            let m = soft_mask_by_matmul(t, l, r, s)?;
            weighted_sum(t, m, 32)
        }));
    }
    let p: Vec<Tensor> = [&[3, 4][..], &[5, 4], &[4, 4], &[4, 4], &[4, 4], &[4, 4]]
        .iter()
        .map(|s| rand_t(rng, s))
        .collect();
    units.push(unit("boundary_scores", p, |t, v| {
        let params = BoundaryParams {
            left_query: v[2],
            left_key: v[3],
            right_query: v[4],
            right_key: v[5],
        };
        let (l, r) = boundary_scores(t, v[0], v[1], &params, None)?;
        let both = t.concat_rows(&[l, r])?;
        weighted_sum(t, both, 33)
    }));
    units
}

/// `[q, k, v, wq, wk, wv, wl_q, wl_k, wr_q, wr_k, (wq_loc, wk_loc)]`.
fn attention_params(rng: &mut ChaCha8Rng, m: usize, n: usize, d: usize, extra: usize) -> Vec<Tensor> {
    let mut p = vec![rand_t(rng, &[m, d]), rand_t(rng, &[n, d]), rand_t(rng, &[n, d])];
    for _ in 0..7 + extra {
        p.push(Tensor::uniform(vec![d, d], 0.8, rng));
    }
    p
}

fn boundary_mask(t: &mut Tape, v: &[Var], block: usize, causal: bool) -> Result<Var> {
    let (m, n) = (t.shape(v[0])[0], t.shape(v[1])[0]);
    let bias = AttentionShape::single(m, n, causal).bias(t, 1)?;
    let bias = match bias {
        Some(b) => Some(t.reshape(b, &[m, n])?),
        None => None,
    };
    let params = BoundaryParams {
        left_query: v[6],
        left_key: v[7],
        right_query: v[8],
        right_key: v[9],
    };
    let (l, r) = boundary_scores(t, v[0], v[1], &params, bias)?;
    soft_mask_on_tape(t, l, r, block)
}

/// Single-head global, MW and AW attention (gradients reach the boundary
/// projections through the mask), and multi-head layers of every variant.
fn attention_units() -> Vec<Unit> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut units = Vec::new();
    for causal in [false, true] {
        let (m, n, d) = if causal { (4, 4, 4) } else { (3, 5, 4) };
        let tag = if causal { " causal" } else { "" };
        units.push(unit(
            format!("global_attention{tag}"),
            attention_params(&mut rng, m, n, d, 0),
            move |t, v| {
                let w = ProjectionWeights {
                    query: v[3],
                    key: v[4],
                    value: v[5],
                };
                let out = global_attention(t, v[0], v[1], v[2], &w, causal)?;
                weighted_sum(t, out.output, 40)
            },
        ));
        for block in [1, 2] {
            let seg = if block > 1 { " segment" } else { "" };
            units.push(unit(
                format!("multiplicative_window_attention{seg}{tag}"),
                attention_params(&mut rng, m, n, d, 0),
                move |t, v| {
                    let mask = boundary_mask(t, v, block, causal)?;
                    let w = ProjectionWeights {
                        query: v[3],
                        key: v[4],
                        value: v[5],
                    };
                    let out = multiplicative_window_attention(t, v[0], v[1], v[2], &w, mask, causal)?;
                    weighted_sum(t, out.output, 41)
                },
            ));
            units.push(unit(
                format!("additive_window_attention{seg}{tag}"),
                attention_params(&mut rng, m, n, d, 2),
                move |t, v| {
                    let mask = boundary_mask(t, v, block, causal)?;
                    let w = AdditiveWeights {
                        query_global: v[3],
                        key_global: v[4],
                        query_local: v[10],
                        key_local: v[11],
                        value: v[5],
                    };
                    let out = additive_window_attention(t, v[0], v[1], v[2], &w, mask, causal)?;
                    weighted_sum(t, out.output, 42)
                },
            ));
        }
    }
    let variants = [
        ("global", Variant::Global, Masking::Token),
        ("multiplicative_window", Variant::MultiplicativeWindow, Masking::Token),
        ("additive_window", Variant::AdditiveWindow, Masking::Token),
        ("additive_window segment", Variant::AdditiveWindow, Masking::Segment(2)),
    ];
    for (name, variant, masking) in variants {
        for causal in [false, true] {
            let mut store = ParamStore::new();
            let layer = AttentionLayer::new(&mut store, "a", 6, 2, variant, masking, &mut rng).expect("valid layer");
            let (batch, m, n) = (2, 4, if causal { 4 } else { 5 });
            let shape = AttentionShape {
                batch,
                query_len: m,
                key_len: n,
                key_lengths: (!causal).then(|| vec![n, 3]),
                causal,
            };
            if matches!(masking, Masking::Segment(_)) && causal {
                continue;
            }
            let mut params = vec![rand_t(&mut rng, &[batch * m, 6]), rand_t(&mut rng, &[batch * n, 6])];
            params.extend(store.tensors().iter().cloned());
            let tag = if causal { " causal" } else { " padded" };
            units.push(unit(format!("multi_head {name}{tag}"), params, move |t, v| {
                let bound = Bound::from_vars(v[2..].to_vec());
                let xkv = if causal { v[0] } else { v[1] };
                let out = layer.forward(t, &bound, v[0], xkv, &shape)?;
                weighted_sum(t, out.output, 43)
            }));
        }
    }
    units
}

/// The tiny configuration (d=128, 4 heads, 2 layers) of each model kind with
/// a representative window preset.
pub fn tiny_model_cases() -> Vec<(String, Model, TaskBatch)> {
    let mut cases = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let seqs: Vec<Vec<usize>> = (0..2)
        .map(|b| (0..5 - b).map(|_| rng.gen_range(3..12)).collect())
        .collect();
    let specs = [
        (ModelKind::Classifier, "Enc(AW)"),
        (ModelKind::LanguageModel, "Dec(MW)"),
        (ModelKind::Seq2Seq, "Enc(AW)-Cr(AW,Seg)-Dec(MW)"),
    ];
    for (kind, spec) in specs {
        let cfg = ModelConfig::tiny(kind, 12, 2)
            .with_window_spec(spec, 2)
            .expect("valid preset");
        let model = Model::new(cfg, 5).expect("valid model");
        let batch = match kind {
            ModelKind::Classifier => TaskBatch::Classify {
                inputs: TokenBatch::from_sequences(&seqs).expect("non-empty"),
                labels: vec![1, 0],
            },
            ModelKind::LanguageModel => {
                let inputs = TokenBatch::from_sequences(&seqs).expect("non-empty");
                let w = inputs.width();
                let mut targets = vec![None; 2 * w];
                for (b, s) in seqs.iter().enumerate() {
                    for t in 0..s.len() - 1 {
                        targets[b * w + t] = Some(s[t + 1]);
                    }
                }
                TaskBatch::LanguageModel { inputs, targets }
            }
            ModelKind::Seq2Seq => seq2seq_batch(&seqs).expect("non-empty"),
        };
        cases.push((format!("model {kind:?} {spec}"), model, batch));
    }
    cases
}

fn model_units() -> Vec<Unit> {
    tiny_model_cases()
        .into_iter()
        .map(|(name, model, batch)| {
            let params = model.params().tensors().to_vec();
            unit(name, params, move |t, v| {
                let bound = Bound::from_vars(v.to_vec());
                batch_loss(&model, t, &bound, &batch, &mut ForwardCtx::eval())
            })
        })
        .collect()
}

pub fn primitive_suite(fault: Option<OpKind>) -> Result<Vec<UnitReport>> {
    run(primitive_units(), PRIMITIVE_THRESHOLD, Sampling::All, fault)
}

pub fn attention_suite(fault: Option<OpKind>) -> Result<Vec<UnitReport>> {
    run(attention_units(), PRIMITIVE_THRESHOLD, Sampling::All, fault)
}

pub fn model_suite(fault: Option<OpKind>) -> Result<Vec<UnitReport>> {
    let sampling = Sampling::Fraction {
        fraction: MODEL_FRACTION,
        seed: 14,
    };
    run(model_units(), MODEL_THRESHOLD, sampling, fault)
}
