use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use diffwin::attention::Site;
use diffwin::checkpoint::Checkpoint;
use diffwin::model::Model;
use diffwin::tensor::OpKind;
use diffwin::train::{evaluate, train_loop, Split, Task, TaskConfig, TrainConfig, FIRST_DATA_ID};
use diffwin::verify::{attention_suite, model_suite, primitive_suite, UnitReport};
use diffwin::{Error, Tensor};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::Failure;

pub fn train(cfg: &RunConfig) -> Result<Value, Failure> {
    let mut task = Task::new(&cfg.task, cfg.train.seed)?;
    let model_cfg = cfg.model_config(&task)?;
    let mut model = Model::new(model_cfg, cfg.train.seed)?;
    fs::create_dir_all(&cfg.out).map_err(|e| io(&cfg.out, e))?;
    let path = cfg.out.join("config.json");
    let text = serde_json::to_string_pretty(cfg).expect("config serialises");
    fs::write(&path, text + "\n").map_err(|e| io(&path, e))?;
    log::info!(
        "training {} ({}) for up to {} steps into {}",
        cfg.preset,
        cfg.model,
        cfg.train.steps,
        cfg.out.display()
    );
    let summary = train_loop(&mut model, &mut task, &cfg.task, &cfg.train, Some(&cfg.out))?;
    Ok(json!({
        "out": cfg.out,
        "last_step": summary.last_step,
        "skipped_steps": summary.skipped_steps,
        "final": summary.final_eval.to_json(),
    }))
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub split: Split,
    pub corpus: Option<PathBuf>,
    pub batches: Option<usize>,
    pub batch_size: Option<usize>,
}

/// Loads a checkpoint; every failure here is reported as an unreadable
/// checkpoint.
fn load(path: &Path) -> Result<(Checkpoint, Model), Failure> {
    let ckpt = Checkpoint::load(path).map_err(Failure::checkpoint)?;
    let model = ckpt.to_model().map_err(Failure::checkpoint)?;
    Ok((ckpt, model))
}

fn task_from_metadata(ckpt: &Checkpoint, corpus: Option<&Path>) -> Result<(TaskConfig, TrainConfig), Failure> {
    let mut task: TaskConfig = serde_json::from_value(ckpt.metadata["task"].clone())
        .map_err(|e| Failure::checkpoint(Error::Checkpoint(format!("metadata has no usable task: {e}"))))?;
    let train = match ckpt.metadata.get("train") {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| Failure::checkpoint(Error::Checkpoint(format!("metadata train section: {e}"))))?,
        None => TrainConfig::default(),
    };
    if let Some(path) = corpus {
        match &mut task {
            TaskConfig::CharLm { corpus, .. } => *corpus = path.to_path_buf(),
            _ => return Err(Error::Config("--corpus applies only to char_lm checkpoints".into()).into()),
        }
    }
    Ok((task, train))
}

pub fn eval(args: &EvalArgs) -> Result<Value, Failure> {
    let (ckpt, model) = load(&args.checkpoint)?;
    let (task_cfg, train) = task_from_metadata(&ckpt, args.corpus.as_deref())?;
    let task = Task::new(&task_cfg, train.seed)?;
    let batches = args.batches.unwrap_or(train.eval_batches);
    let batch_size = args.batch_size.unwrap_or(train.batch_size);
    let set = task.eval_batches(train.seed, args.split, batches, batch_size)?;
    let mut out = evaluate(&model, &task, task_cfg.name(), &set)?.to_json();
    out["split"] = json!(match args.split {
        Split::Train => "train",
        Split::Eval => "eval",
    });
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Attention,
    Model,
}

pub fn gradcheck(scope: Scope, fault: Option<&str>) -> Result<Vec<UnitReport>, Failure> {
    let fault = match fault {
        Some(name) => Some(
            OpKind::from_name(name).ok_or_else(|| Error::Config(format!("unknown primitive {name:?}")))?,
        ),
        None => None,
    };
    let reports = match scope {
        Scope::Ops => primitive_suite(fault)?,
        Scope::Attention => attention_suite(fault)?,
        Scope::Model => model_suite(fault)?,
    };
    Ok(reports)
}

#[derive(Clone, Debug)]
pub struct MaskDumpArgs {
    pub checkpoint: PathBuf,
    pub tokens: Option<String>,
    pub text: Option<String>,
    pub site: Site,
    /// 1-based.
    pub layer: usize,
    /// 1-based.
    pub head: usize,
    pub out: PathBuf,
}

fn parse_tokens(s: &str) -> Result<Vec<usize>, Failure> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Config(format!("token {t:?} is not a non-negative integer")).into())
        })
        .collect()
}

fn encode_text(ckpt: &Checkpoint, text: &str) -> Result<Vec<usize>, Failure> {
    let alphabet: Vec<char> = ckpt
        .metadata
        .get("alphabet")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Config("--text needs a character-level checkpoint".into()))?
        .chars()
        .collect();
    text.chars()
        .map(|c| {
            alphabet
                .iter()
                .position(|&a| a == c)
                .map(|i| FIRST_DATA_ID + i)
                .ok_or_else(|| Error::Config(format!("character {c:?} is not in the model's alphabet")).into())
        })
        .collect()
}

/// `query_index,pos_1..pos_n` then one row per query, 17 significant digits.
pub fn matrix_csv(t: &Tensor) -> String {
    let n = t.cols();
    let mut s = String::from("query_index");
    for j in 1..=n {
        write!(s, ",pos_{j}").expect("string write");
    }
    s.push('\n');
    for i in 0..t.rows() {
        write!(s, "{}", i + 1).expect("string write");
        for x in t.row(i) {
            write!(s, ",{x:.16e}").expect("string write");
        }
        s.push('\n');
    }
    s
}

pub fn maskdump(args: &MaskDumpArgs) -> Result<Value, Failure> {
    if args.layer == 0 || args.head == 0 {
        return Err(Error::Config("layers and heads are numbered from 1".into()).into());
    }
    let (ckpt, model) = load(&args.checkpoint)?;
    let input = match (&args.tokens, &args.text) {
        (Some(t), None) => parse_tokens(t)?,
        (None, Some(t)) => encode_text(&ckpt, t)?,
        _ => return Err(Error::Config("give exactly one of --tokens and --text".into()).into()),
    };
    if input.is_empty() {
        return Err(Error::Config("input sequence is empty".into()).into());
    }
    let maps = model.attention_maps(&input, args.site, args.layer - 1, args.head - 1)?;
    fs::create_dir_all(&args.out).map_err(|e| io(&args.out, e))?;
    let stem = format!("{}_layer{}_head{}", args.site, args.layer, args.head);
    let mut files = Vec::new();
    for (panel, t) in [("mask", &maps.mask), ("scores", &maps.scores), ("weights", &maps.weights)] {
        let path = args.out.join(format!("{stem}_{panel}.csv"));
        fs::write(&path, matrix_csv(t)).map_err(|e| io(&path, e))?;
        files.push(path);
    }
    Ok(json!({
        "site": args.site.name(),
        "layer": args.layer,
        "head": args.head,
        "queries": maps.mask.rows(),
        "keys": maps.mask.cols(),
        "files": files,
    }))
}

fn io(path: &Path, e: std::io::Error) -> Failure {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}
