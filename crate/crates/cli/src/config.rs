//! Run configuration: a named preset, overlaid by a JSON file, overlaid by
//! command-line flags.

use std::path::{Path, PathBuf};

use diffwin::model::{ModelConfig, ModelKind, DEFAULT_SEGMENT_SIZE};
use diffwin::train::{Task, TaskConfig, TrainConfig};
use diffwin::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const PRESETS: [&str; 3] = ["copy-tiny", "sva-tiny", "charlm-tiny"];

/// Corpus bundled with the repository.
pub const BUNDLED_CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/data/sotu_1790_1833.txt");

/// Model dimensions; vocabulary and class count come from the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub d: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl Architecture {
    fn tiny(kind: ModelKind) -> Self {
        let c = ModelConfig::tiny(kind, 0, 0);
        Self {
            d: c.d,
            heads: c.heads,
            ffn_dim: c.ffn_dim,
            encoder_layers: c.encoder_layers,
            decoder_layers: c.decoder_layers,
            max_positions: c.max_positions,
            dropout: c.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    /// Window spec such as `"Cr(AW,Seg)-Dec(MW)"` or `"global"`.
    pub model: String,
    pub segment_size: usize,
    pub architecture: Architecture,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub out: PathBuf,
}

/// Values given on the command line; `None` leaves the lower layer in place.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub model: Option<String>,
    pub steps: Option<u64>,
    pub seed: Option<u64>,
    pub batch: Option<usize>,
    pub segment_size: Option<usize>,
    pub out: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub lr: Option<f64>,
    pub stop_at: Option<f64>,
    pub no_wall_clock: bool,
}

pub fn preset(name: &str) -> Result<RunConfig> {
    let (model, kind, task) = match name {
        "copy-tiny" => (
            "Cr(AW,Seg)-Dec(MW)",
            ModelKind::Seq2Seq,
            TaskConfig::Copy {
                vocab_size: 12,
                min_len: 4,
                max_len: 16,
            },
        ),
        "sva-tiny" => ("Enc(AW)", ModelKind::Classifier, TaskConfig::ToySva { depth: 2 }),
        "charlm-tiny" => (
            "Dec(MW)",
            ModelKind::LanguageModel,
            TaskConfig::CharLm {
                corpus: PathBuf::from(BUNDLED_CORPUS),
                seq_len: 64,
                holdout_fraction: 0.05,
            },
        ),
        _ => {
            return Err(Error::Config(format!(
                "unknown preset {name:?}; valid presets: {}",
                PRESETS.join(", ")
            )))
        }
    };
    let train = match kind {
        ModelKind::LanguageModel => TrainConfig {
            steps: 10_000,
            batch_size: 16,
            ..TrainConfig::default()
        },
        _ => TrainConfig::default(),
    };
    Ok(RunConfig {
        preset: name.to_string(),
        model: model.to_string(),
        segment_size: DEFAULT_SEGMENT_SIZE,
        architecture: Architecture::tiny(kind),
        task,
        train,
        out: PathBuf::from("runs").join(name),
    })
}

/// Parses a config file body. Only a JSON object is accepted.
pub fn parse_file(text: &str) -> Result<Value> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
    if !v.is_object() {
        return Err(Error::Config("config file must hold a JSON object".into()));
    }
    Ok(v)
}

/// Recursively overlays `top` onto `base`. A task object naming a different
/// task replaces the base task instead of merging into it.
fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                let replace = k == "task" && v.get("task").is_some() && b.get("task").and_then(|x| x.get("task")) != v.get("task");
                match b.get_mut(&k) {
                    Some(slot) if !replace => overlay(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn flag_layer(flags: &Overrides, base_task: &Value) -> Result<Value> {
    let mut top = Map::new();
    let mut train = Map::new();
    let mut task = Map::new();
    if let Some(m) = &flags.model {
        top.insert("model".into(), Value::from(m.as_str()));
    }
    if let Some(b) = flags.segment_size {
        top.insert("segment_size".into(), Value::from(b));
    }
    if let Some(o) = &flags.out {
        top.insert("out".into(), Value::from(o.to_string_lossy().as_ref()));
    }
    if let Some(s) = flags.steps {
        train.insert("steps".into(), Value::from(s));
    }
    if let Some(s) = flags.seed {
        train.insert("seed".into(), Value::from(s));
    }
    if let Some(b) = flags.batch {
        train.insert("batch_size".into(), Value::from(b));
    }
    if let Some(lr) = flags.lr {
        train.insert("peak_lr".into(), Value::from(lr));
    }
    if let Some(t) = flags.stop_at {
        train.insert("stop_at".into(), Value::from(t));
    }
    if flags.no_wall_clock {
        train.insert("wall_clock".into(), Value::from(false));
    }
    if let Some(c) = &flags.corpus {
        if base_task.get("task").and_then(Value::as_str) != Some("char_lm") {
            return Err(Error::Config("--corpus applies only to the char_lm task".into()));
        }
        task.insert("corpus".into(), Value::from(c.to_string_lossy().as_ref()));
    }
    if !train.is_empty() {
        top.insert("train".into(), Value::Object(train));
    }
    if !task.is_empty() {
        top.insert("task".into(), Value::Object(task));
    }
    Ok(Value::Object(top))
}

impl RunConfig {
    /// Preset, then `file`, then `flags`. The preset named by a flag wins
    /// over one named in the file; `copy-tiny` is the fallback.
    pub fn resolve(file: Option<&Value>, flags: &Overrides) -> Result<Self> {
        let name = match (&flags.preset, file.and_then(|f| f.get("preset"))) {
            (Some(p), _) => p.clone(),
            (None, Some(Value::String(p))) => p.clone(),
            (None, Some(_)) => return Err(Error::Config("preset must be a string".into())),
            (None, None) => "copy-tiny".to_string(),
        };
        let mut merged = serde_json::to_value(preset(&name)?).expect("config serialises");
        if let Some(f) = file {
            overlay(&mut merged, f.clone());
        }
        let flags = flag_layer(flags, &merged["task"])?;
        overlay(&mut merged, flags);
        merged["preset"] = Value::from(name);
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, flags: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::resolve(Some(&parse_file(&text)?), flags)
    }

    /// Model configuration for `task`, checked for consistency.
    pub fn model_config(&self, task: &Task) -> Result<ModelConfig> {
        let a = &self.architecture;
        let cfg = ModelConfig {
            d: a.d,
            heads: a.heads,
            ffn_dim: a.ffn_dim,
            encoder_layers: a.encoder_layers,
            decoder_layers: a.decoder_layers,
            max_positions: a.max_positions,
            dropout: a.dropout,
            ..task.tiny_model()
        };
        let cfg = cfg.with_window_spec(&self.model, self.segment_size)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
