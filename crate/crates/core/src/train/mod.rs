//! Toy tasks, optimisation, the training loop and evaluation.

pub mod data;
pub mod optim;

use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{argmax, ForwardCtx, Model, ModelConfig, ModelKind, EOS};
use crate::tensor::{Tape, Tensor, Var};

pub use data::{batch_seed, seq2seq_batch, CharCorpus, CharLmTask, CopyTask, Split, SvaTask, SvaVocab, TaskBatch, FIRST_DATA_ID};
pub use optim::{clip_global_norm, inverse_sqrt_lr, Adam};

/// Which toy task to run and its data parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    Copy {
        vocab_size: usize,
        min_len: usize,
        max_len: usize,
    },
    ToySva {
        depth: usize,
    },
    CharLm {
        corpus: PathBuf,
        seq_len: usize,
        holdout_fraction: f64,
    },
}

impl TaskConfig {
    pub fn name(&self) -> &'static str {
        match self {
            TaskConfig::Copy { .. } => "copy",
            TaskConfig::ToySva { .. } => "toy_sva",
            TaskConfig::CharLm { .. } => "char_lm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Learning rate reached at the end of warmup.
    pub peak_lr: f64,
    pub warmup: u64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub average_last_k: usize,
    /// Steps between metric records.
    pub log_interval: u64,
    /// Held-out batches scored at each record.
    pub eval_batches: usize,
    pub clip_norm: f64,
    /// Consecutive skipped (non-finite) steps tolerated before giving up.
    pub max_skipped: u64,
    /// Stop once a metric record reaches this value (at least it for
    /// accuracies, at most it for perplexity).
    #[serde(default)]
    pub stop_at: Option<f64>,
    /// Record elapsed milliseconds in the metrics log; off, `wall_ms` is 0 so
    /// logs of equal runs compare byte for byte.
    #[serde(default = "default_true")]
    pub wall_clock: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup: 400,
            seed: 1,
            checkpoint_interval: 100,
            average_last_k: 5,
            log_interval: 100,
            eval_batches: 4,
            clip_norm: 1.0,
            max_skipped: 20,
            stop_at: None,
            wall_clock: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) || self.warmup == 0 {
            return bad("learning-rate schedule parameters must be positive");
        }
        if self.checkpoint_interval == 0 || self.log_interval == 0 {
            return bad("checkpoint and log intervals must be positive");
        }
        if self.average_last_k == 0 {
            return bad("average_last_k must be at least 1");
        }
        if !(self.clip_norm > 0.0) || self.eval_batches == 0 {
            return bad("clip_norm and eval_batches must be positive");
        }
        if self.stop_at.is_some_and(|t| !t.is_finite()) {
            return bad("stop_at must be finite");
        }
        Ok(())
    }
}

/// A task's data source.
#[derive(Clone, Debug)]
pub enum Task {
    Copy(CopyTask),
    ToySva(SvaTask),
    CharLm(CharLmTask),
}

impl Task {
    pub fn new(cfg: &TaskConfig, seed: u64) -> Result<Self> {
        Ok(match cfg {
            TaskConfig::Copy {
                vocab_size,
                min_len,
                max_len,
            } => Task::Copy(CopyTask::new(*vocab_size, *min_len, *max_len)?),
            TaskConfig::ToySva { depth } => Task::ToySva(SvaTask::new(*depth)),
            TaskConfig::CharLm {
                corpus,
                seq_len,
                holdout_fraction,
            } => {
                let text = CharCorpus::load(corpus, *holdout_fraction)?;
                if text.invalid_sequences() > 0 {
                    log::warn!(
                        "{}: replaced {} invalid UTF-8 sequences",
                        corpus.display(),
                        text.invalid_sequences()
                    );
                }
                Task::CharLm(CharLmTask::new(text, *seq_len, seed)?)
            }
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Task::Copy(_) => ModelKind::Seq2Seq,
            Task::ToySva(_) => ModelKind::Classifier,
            Task::CharLm(_) => ModelKind::LanguageModel,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Task::Copy(t) => t.vocab(),
            Task::ToySva(_) => SvaVocab::size(),
            Task::CharLm(t) => t.corpus().vocab_size(),
        }
    }

    /// The tiny architecture sized for this task, global attention everywhere.
    pub fn tiny_model(&self) -> ModelConfig {
        ModelConfig::tiny(self.kind(), self.vocab_size(), 2)
    }

    pub fn metric_name(&self) -> &'static str {
        match self {
            Task::Copy(_) => "token_accuracy",
            Task::ToySva(_) => "accuracy",
            Task::CharLm(_) => "perplexity",
        }
    }

    /// Whether `value` of this task's metric meets `target`.
    pub fn metric_reaches(&self, value: f64, target: f64) -> bool {
        match self {
            Task::CharLm(_) => value <= target,
            _ => value >= target,
        }
    }

    /// Metadata stored with checkpoints so a model can be checked against
    /// the data it is evaluated on.
    pub fn metadata(&self, cfg: &TaskConfig) -> Value {
        let mut meta = json!({ "task": cfg });
        if let Task::CharLm(t) = self {
            meta["alphabet"] = Value::String(t.corpus().alphabet_string());
        }
        meta
    }

    /// Checks a model's vocabulary and kind against this task.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        let cfg = model.config();
        if cfg.kind != self.kind() || cfg.vocab_size != self.vocab_size() {
            return Err(Error::Config(format!(
                "model ({:?}, vocabulary {}) does not fit the task ({:?}, vocabulary {})",
                cfg.kind,
                cfg.vocab_size,
                self.kind(),
                self.vocab_size()
            )));
        }
        Ok(())
    }

    /// Training batch number `index`.
    pub fn train_batch(&mut self, seed: u64, index: u64, batch: usize) -> Result<TaskBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(seed, Split::Train, index));
        match self {
            Task::Copy(t) => t.batch(&mut rng, batch),
            Task::ToySva(t) => t.batch(&mut rng, batch),
            Task::CharLm(t) => t.train_batch(batch),
        }
    }

    /// Deterministic evaluation batches from `split`.
    pub fn eval_batches(&self, seed: u64, split: Split, batches: usize, batch: usize) -> Result<Vec<TaskBatch>> {
        match self {
            Task::CharLm(t) => {
                let starts = match split {
                    Split::Eval => t.held_out_starts(batches * batch),
                    Split::Train => (0..t.windows().min(batches * batch)).map(|i| i * t.seq_len()).collect(),
                };
                if starts.is_empty() {
                    return Err(Error::Empty("evaluation split"));
                }
                starts
                    .chunks(batch)
                    .map(|s| match split {
                        Split::Eval => t.held_out_batch(s),
                        Split::Train => t.train_split_batch(s),
                    })
                    .collect()
            }
            _ => (0..batches as u64)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(seed, split, i));
                    match self {
                        Task::Copy(t) => t.batch(&mut rng, batch),
                        Task::ToySva(t) => t.batch(&mut rng, batch),
                        Task::CharLm(_) => unreachable!(),
                    }
                })
                .collect(),
        }
    }
}

/// Mean cross-entropy of `batch` under `model` on `tape`.
pub fn batch_loss(model: &Model, tape: &mut Tape, p: &crate::params::Bound, batch: &TaskBatch, ctx: &mut ForwardCtx) -> Result<Var> {
    match batch {
        TaskBatch::Seq2Seq {
            source,
            decoder_input,
            targets,
        } => {
            let logits = model.forward_seq2seq(tape, p, source, decoder_input, ctx)?;
            tape.cross_entropy(logits, targets)
        }
        TaskBatch::Classify { inputs, labels } => {
            let logits = model.forward_classify(tape, p, inputs, ctx)?;
            let targets: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
            tape.cross_entropy(logits, &targets)
        }
        TaskBatch::LanguageModel { inputs, targets } => {
            let logits = model.forward_lm(tape, p, inputs, ctx)?;
            tape.cross_entropy(logits, targets)
        }
    }
}

fn target_count(batch: &TaskBatch) -> usize {
    batch.pad_mask().iter().filter(|&&m| m).count()
}

/// Held-out metrics of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub task: String,
    pub metric_name: String,
    pub metric_value: f64,
    /// Mean teacher-forced negative log-likelihood per target.
    pub mean_nll: f64,
    pub targets: usize,
    /// Unigram perplexity on the same targets (character LM only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unigram_perplexity: Option<f64>,
}

impl Evaluation {
    /// Flat JSON object with the headline metric under its own name.
    pub fn to_json(&self) -> Value {
        let mut v = json!({
            "task": self.task,
            "metric_name": self.metric_name,
            "mean_nll": self.mean_nll,
            "targets": self.targets,
        });
        v[self.metric_name.as_str()] = json!(self.metric_value);
        if let Some(u) = self.unigram_perplexity {
            v["unigram_perplexity"] = json!(u);
        }
        v
    }
}

/// Token accuracy of greedy decoding: position `t` of `target + [EOS]` is
/// correct when the decoded sequence (with its `EOS`) has the same token
/// there.
pub fn copy_accuracy(decoded: &[Vec<usize>], targets: &[Vec<usize>]) -> (usize, usize) {
    let mut correct = 0;
    let mut total = 0;
    for (out, tgt) in decoded.iter().zip(targets) {
        let out: Vec<usize> = out.iter().copied().chain([EOS]).collect();
        for (t, &want) in tgt.iter().chain([&EOS]).enumerate() {
            total += 1;
            correct += usize::from(out.get(t) == Some(&want));
        }
    }
    (correct, total)
}

/// Scores `model` on `batches`. Copy uses greedy decoding, agreement uses
/// argmax classification, the language model uses perplexity.
pub fn evaluate(model: &Model, task: &Task, task_name: &str, batches: &[TaskBatch]) -> Result<Evaluation> {
    task.check_model(model)?;
    if batches.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut nll = 0.0;
    let mut targets = 0;
    let mut correct = 0;
    let mut scored = 0;
    let mut lm_targets = Vec::new();
    for batch in batches {
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape, false);
        let mut ctx = ForwardCtx::eval();
        let loss = batch_loss(model, &mut tape, &p, batch, &mut ctx)?;
        let n = target_count(batch);
        nll += tape.value(loss).data()[0] * n as f64;
        targets += n;
        match batch {
            TaskBatch::Seq2Seq { source, .. } => {
                let sources: Vec<Vec<usize>> = (0..source.batch()).map(|b| source.sequence(b).to_vec()).collect();
                let max_len = sources.iter().map(Vec::len).max().unwrap_or(0) + 1;
                let decoded = model.greedy_decode(source, max_len)?;
                let (c, t) = copy_accuracy(&decoded, &sources);
                correct += c;
                scored += t;
            }
            TaskBatch::Classify { inputs, labels } => {
                let mut tape = Tape::new();
                let p = model.params().bind(&mut tape, false);
                let logits = model.forward_classify(&mut tape, &p, inputs, &mut ForwardCtx::eval())?;
                let values = tape.value(logits);
                for (b, &label) in labels.iter().enumerate() {
                    correct += usize::from(argmax(values.row(b)) == label);
                }
                scored += labels.len();
            }
            TaskBatch::LanguageModel { targets: t, .. } => {
                lm_targets.extend(t.iter().flatten().copied());
            }
        }
    }
    let mean_nll = nll / targets as f64;
    let (metric_value, unigram_perplexity) = match task {
        Task::CharLm(t) => (mean_nll.exp(), Some(t.corpus().unigram_perplexity(&lm_targets))),
        _ => (correct as f64 / scored as f64, None),
    };
    Ok(Evaluation {
        task: task_name.to_string(),
        metric_name: task.metric_name().to_string(),
        metric_value,
        mean_nll,
        targets,
        unigram_perplexity,
    })
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    /// Mean training loss since the previous record.
    pub loss: f64,
    pub metric_name: String,
    pub metric_value: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<MetricRecord>,
    pub skipped_steps: u64,
    /// Last step taken; below `steps` when `stop_at` was reached.
    pub last_step: u64,
    /// Held-out evaluation of the averaged final model.
    pub final_eval: Evaluation,
    /// Written checkpoint files, oldest first (empty without an output dir).
    pub checkpoints: Vec<PathBuf>,
}

fn parameter_grads(tape: &Tape, vars: &[Var], params: &[Tensor]) -> Vec<Tensor> {
    vars.iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect()
}

/// Loss and parameter gradients of one batch.
pub fn loss_and_grads(model: &Model, batch: &TaskBatch, dropout_seed: u64) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, true);
    let mut ctx = ForwardCtx::train(dropout_seed);
    let loss = batch_loss(model, &mut tape, &p, batch, &mut ctx)?;
    tape.backward(loss)?;
    let value = tape.value(loss).data()[0];
    Ok((value, parameter_grads(&tape, p.vars(), model.params().tensors())))
}

struct Outputs {
    dir: PathBuf,
    log: BufWriter<File>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.ndjson");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log: BufWriter::new(file),
        })
    }

    fn record(&mut self, r: &MetricRecord) -> Result<()> {
        let path = self.dir.join("metrics.ndjson");
        let line = serde_json::to_string(r).expect("record serialises");
        writeln!(self.log, "{line}")
            .and_then(|_| self.log.flush())
            .map_err(|e| Error::io(&path, e))
    }
}

/// Trains `model` in place. Every `checkpoint_interval` steps (and at the
/// last step) the parameters are snapshotted; the final model is the
/// elementwise mean of the last `average_last_k` snapshots. With `out`, the
/// metrics log, the snapshots and `final.bin` are written there.
pub fn train_loop(
    model: &mut Model,
    task: &mut Task,
    task_cfg: &TaskConfig,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    task.check_model(model)?;
    let mut metadata = task.metadata(task_cfg);
    metadata["train"] = json!(cfg);
    let mut outputs = out.map(Outputs::create).transpose()?;
    let eval_set = task.eval_batches(cfg.seed, Split::Eval, cfg.eval_batches, cfg.batch_size)?;
    let mut adam = Adam::new(model.params().tensors());
    let start = Instant::now();
    let mut records = Vec::new();
    let mut recent: VecDeque<Checkpoint> = VecDeque::with_capacity(cfg.average_last_k);
    let mut files = Vec::new();
    let (mut skipped, mut consecutive) = (0u64, 0u64);
    let (mut interval_loss, mut interval_steps) = (0.0, 0u64);
    let mut last_step = 0;
    for step in 1..=cfg.steps {
        last_step = step;
        let batch = task.train_batch(cfg.seed, step, cfg.batch_size)?;
        let dropout_seed = batch_seed(cfg.seed ^ 0x5eed, Split::Train, step);
        let outcome = loss_and_grads(model, &batch, dropout_seed).and_then(|(loss, mut grads)| {
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: "loss" });
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            let lr = inverse_sqrt_lr(cfg.peak_lr, cfg.warmup, step);
            adam.step(model.params_mut().tensors_mut(), &grads, lr)?;
            Ok(loss)
        });
        match outcome {
            Ok(loss) => {
                consecutive = 0;
                interval_loss += loss;
                interval_steps += 1;
            }
            Err(Error::NonFinite { op }) => {
                skipped += 1;
                consecutive += 1;
                log::warn!("step {step}: non-finite value in {op}; update skipped ({skipped} so far)");
                if consecutive > cfg.max_skipped {
                    return Err(Error::NonFinite { op: "training" });
                }
            }
            Err(e) => return Err(e),
        }
        let mut stop = false;
        if step % cfg.log_interval == 0 || step == cfg.steps {
            let eval = evaluate(model, task, task_cfg.name(), &eval_set)?;
            let record = MetricRecord {
                step,
                loss: if interval_steps > 0 {
                    interval_loss / interval_steps as f64
                } else {
                    f64::NAN
                },
                metric_name: eval.metric_name.clone(),
                metric_value: eval.metric_value,
                wall_ms: if cfg.wall_clock {
                    start.elapsed().as_millis() as u64
                } else {
                    0
                },
            };
            log::info!(
                "step {step}: loss {:.4}, {} {:.4}",
                record.loss,
                record.metric_name,
                record.metric_value
            );
            if let Some(o) = outputs.as_mut() {
                o.record(&record)?;
            }
            stop = cfg.stop_at.is_some_and(|t| task.metric_reaches(record.metric_value, t));
            records.push(record);
            interval_loss = 0.0;
            interval_steps = 0;
        }
        if step % cfg.checkpoint_interval == 0 || step == cfg.steps || stop {
            let mut meta = metadata.clone();
            meta["step"] = json!(step);
            let ckpt = Checkpoint::from_model(model, meta);
            if let Some(o) = outputs.as_ref() {
                let path = o.dir.join(format!("ckpt-{step:06}.bin"));
                ckpt.save(&path)?;
                files.push(path);
            }
            if recent.len() == cfg.average_last_k {
                recent.pop_front();
            }
            recent.push_back(ckpt);
        }
        if stop {
            log::info!("step {step}: target reached, stopping");
            break;
        }
    }
    let recent: Vec<Checkpoint> = recent.into();
    let mut averaged = Checkpoint::average(&recent)?;
    averaged.metadata["averaged"] = json!(recent.len());
    *model = averaged.to_model()?;
    let final_eval = evaluate(model, task, task_cfg.name(), &eval_set)?;
    if let Some(o) = outputs.as_ref() {
        averaged.save(&o.dir.join("final.bin"))?;
        let path = o.dir.join("final_metrics.json");
        let text = serde_json::to_string_pretty(&final_eval.to_json()).expect("metrics serialise");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainSummary {
        records,
        skipped_steps: skipped,
        last_step,
        final_eval,
        checkpoints: files,
    })
}
