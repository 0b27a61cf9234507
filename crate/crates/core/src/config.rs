//! The run configuration bundle shared by every subcommand.
//!
//! Keys are grouped by prefix: `teacher.*` and `student.*` (model shapes),
//! `corpus.*`, `teacher_train.*` and `student_train.*` (schedules),
//! `distill.*` (student objective) and `eval.*`. Unknown keys are rejected.

use std::path::Path;
use std::str::FromStr;

use crate::data::CorpusConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::kv;
use crate::losses::Method;
use crate::model::{LayerSpec, ModelConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigBundle {
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub corpus: CorpusConfig,
    pub teacher_train: TrainConfig,
    /// Also carries the distillation objective.
    pub student_train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ConfigBundle {
    fn default() -> Self {
        ConfigBundle {
            teacher: ModelConfig::teacher(),
            student: ModelConfig::student(),
            corpus: CorpusConfig::default(),
            teacher_train: TrainConfig::desk(),
            student_train: TrainConfig {
                epochs: 30,
                warmup_epochs: 3,
                lr0: 1e-3,
                decay_every: 7,
                batch_size: 32,
                batches_per_epoch: 10,
                val_batches: 4,
                ..TrainConfig::desk()
            },
            eval: EvalConfig::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}` as {}", std::any::type_name::<T>())))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|s| parse_value(key, s.trim())).collect()
}

fn set_model(m: &mut ModelConfig, field: &str, key: &str, v: &str) -> Result<bool> {
    match field {
        "d_model" => m.d_model = parse_value(key, v)?,
        "n_heads" => m.n_heads = parse_value(key, v)?,
        "layers_per_block" => m.layers_per_block = parse_value(key, v)?,
        "ffn_mult" => m.ffn_mult = parse_value(key, v)?,
        "d_visual_in" => m.d_visual_in = parse_value(key, v)?,
        "d_audio_in" => m.d_audio_in = parse_value(key, v)?,
        "audio_rate" => m.audio_rate = parse_value(key, v)?,
        "seed" => m.seed = parse_value(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn model_pairs(p: &str, m: &ModelConfig) -> Vec<(String, String)> {
    vec![
        (format!("{p}.d_model"), m.d_model.to_string()),
        (format!("{p}.n_heads"), m.n_heads.to_string()),
        (format!("{p}.layers_per_block"), m.layers_per_block.to_string()),
        (format!("{p}.ffn_mult"), m.ffn_mult.to_string()),
        (format!("{p}.d_visual_in"), m.d_visual_in.to_string()),
        (format!("{p}.d_audio_in"), m.d_audio_in.to_string()),
        (format!("{p}.audio_rate"), m.audio_rate.to_string()),
        (format!("{p}.seed"), m.seed.to_string()),
    ]
}

fn set_train(t: &mut TrainConfig, field: &str, key: &str, v: &str) -> Result<bool> {
    match field {
        "epochs" => t.epochs = parse_value(key, v)?,
        "warmup_epochs" => t.warmup_epochs = parse_value(key, v)?,
        "lr0" => t.lr0 = parse_value(key, v)?,
        "decay_mult" => t.decay_mult = parse_value(key, v)?,
        "decay_every" => t.decay_every = parse_value(key, v)?,
        "constant_warmup" => t.constant_warmup = parse_bool(key, v)?,
        "batch_size" => t.batch_size = parse_value(key, v)?,
        "batches_per_epoch" => t.batches_per_epoch = parse_value(key, v)?,
        "val_batches" => t.val_batches = parse_value(key, v)?,
        "exclude_near_zero" => t.exclude_near_zero = parse_bool(key, v)?,
        "clip_norm" => t.clip_norm = parse_value(key, v)?,
        "seed" => t.seed = parse_value(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn train_pairs(p: &str, t: &TrainConfig) -> Vec<(String, String)> {
    vec![
        (format!("{p}.epochs"), t.epochs.to_string()),
        (format!("{p}.warmup_epochs"), t.warmup_epochs.to_string()),
        (format!("{p}.lr0"), format!("{:?}", t.lr0)),
        (format!("{p}.decay_mult"), format!("{:?}", t.decay_mult)),
        (format!("{p}.decay_every"), t.decay_every.to_string()),
        (format!("{p}.constant_warmup"), t.constant_warmup.to_string()),
        (format!("{p}.batch_size"), t.batch_size.to_string()),
        (format!("{p}.batches_per_epoch"), t.batches_per_epoch.to_string()),
        (format!("{p}.val_batches"), t.val_batches.to_string()),
        (format!("{p}.exclude_near_zero"), t.exclude_near_zero.to_string()),
        (format!("{p}.clip_norm"), format!("{:?}", t.clip_norm)),
        (format!("{p}.seed"), t.seed.to_string()),
    ]
}

impl ConfigBundle {
    /// Applies one `key = value` override. Unknown keys are config errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        let known = match section {
            "teacher" => set_model(&mut self.teacher, field, key, value)?,
            "student" => set_model(&mut self.student, field, key, value)?,
            "teacher_train" => set_train(&mut self.teacher_train, field, key, value)?,
            "student_train" => set_train(&mut self.student_train, field, key, value)?,
            "corpus" => {
                let c = &mut self.corpus;
                match field {
                    "n_train" => c.n_train = parse_value(key, value)?,
                    "n_val" => c.n_val = parse_value(key, value)?,
                    "n_test" => c.n_test = parse_value(key, value)?,
                    "frames_per_utterance" => c.frames_per_utterance = parse_value(key, value)?,
                    "latent_dim" => c.latent_dim = parse_value(key, value)?,
                    "d_visual_in" => c.d_visual_in = parse_value(key, value)?,
                    "d_audio_in" => c.d_audio_in = parse_value(key, value)?,
                    "audio_rate" => c.audio_rate = parse_value(key, value)?,
                    "noise_sigma" => c.noise_sigma = parse_value(key, value)?,
                    "walk_momentum" => c.walk_momentum = parse_value(key, value)?,
                    "seed" => c.seed = parse_value(key, value)?,
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                true
            }
            "distill" => {
                let d = &mut self.student_train.distill;
                match field {
                    "method" => d.method = parse_value::<Method>(key, value)?,
                    "layers" => {
                        d.layer_set = LayerSpec::parse_list(value)
                            .map_err(|e| Error::Config(format!("`{key}`: {e}")))?
                    }
                    "tau" => d.tau = parse_value(key, value)?,
                    "include_cad" => d.include_cad = parse_bool(key, value)?,
                    "include_vr" => d.include_vr = parse_bool(key, value)?,
                    "reverse_kl" => d.reverse_kl = parse_bool(key, value)?,
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                true
            }
            "eval" => {
                let e = &mut self.eval;
                match field {
                    "lengths" => e.frame_lengths = parse_list(key, value)?,
                    "half_window" => e.half_window = parse_value(key, value)?,
                    "tolerance" => e.tolerance = parse_value(key, value)?,
                    "stride" => e.stride = parse_value(key, value)?,
                    "n_queries" => e.n_queries = parse_value(key, value)?,
                    "query_stride" => e.query_stride = parse_value(key, value)?,
                    "seed" => e.seed = parse_value(key, value)?,
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                true
            }
            _ => false,
        };
        if !known {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        Ok(())
    }

    /// Defaults overlaid with the entries of `text`, then validated. Errors
    /// name the offending line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut b = ConfigBundle::default();
        for e in kv::parse(text)? {
            b.set(&e.key, &e.value).map_err(|err| match err {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", e.line)),
                other => other,
            })?;
        }
        b.validate()?;
        Ok(b)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate().map_err(|e| Error::Config(format!("teacher: {e}")))?;
        self.student.validate().map_err(|e| Error::Config(format!("student: {e}")))?;
        self.corpus.validate()?;
        self.teacher_train.validate().map_err(|e| Error::Config(format!("teacher_train: {e}")))?;
        self.student_train.validate().map_err(|e| Error::Config(format!("student_train: {e}")))?;
        self.student_train.distill.validate(self.student.layers_per_block)?;
        self.eval.validate()?;
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out = model_pairs("teacher", &self.teacher);
        out.extend(model_pairs("student", &self.student));
        let c = &self.corpus;
        out.extend([
            ("corpus.n_train".to_string(), c.n_train.to_string()),
            ("corpus.n_val".into(), c.n_val.to_string()),
            ("corpus.n_test".into(), c.n_test.to_string()),
            ("corpus.frames_per_utterance".into(), c.frames_per_utterance.to_string()),
            ("corpus.latent_dim".into(), c.latent_dim.to_string()),
            ("corpus.d_visual_in".into(), c.d_visual_in.to_string()),
            ("corpus.d_audio_in".into(), c.d_audio_in.to_string()),
            ("corpus.audio_rate".into(), c.audio_rate.to_string()),
            ("corpus.noise_sigma".into(), format!("{:?}", c.noise_sigma)),
            ("corpus.walk_momentum".into(), format!("{:?}", c.walk_momentum)),
            ("corpus.seed".into(), c.seed.to_string()),
        ]);
        out.extend(train_pairs("teacher_train", &self.teacher_train));
        out.extend(train_pairs("student_train", &self.student_train));
        let d = &self.student_train.distill;
        out.extend([
            ("distill.method".to_string(), d.method.to_string()),
            ("distill.layers".into(), LayerSpec::format_list(&d.layer_set)),
            ("distill.tau".into(), format!("{:?}", d.tau)),
            ("distill.include_cad".into(), d.include_cad.to_string()),
            ("distill.include_vr".into(), d.include_vr.to_string()),
            ("distill.reverse_kl".into(), d.reverse_kl.to_string()),
        ]);
        let e = &self.eval;
        out.extend([
            (
                "eval.lengths".to_string(),
                e.frame_lengths.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("eval.half_window".into(), e.half_window.to_string()),
            ("eval.tolerance".into(), e.tolerance.to_string()),
            ("eval.stride".into(), e.stride.to_string()),
            ("eval.n_queries".into(), e.n_queries.to_string()),
            ("eval.query_stride".into(), e.query_stride.to_string()),
            ("eval.seed".into(), e.seed.to_string()),
        ]);
        out
    }

    /// The bundle in file syntax; parsing it reproduces the bundle.
    pub fn render(&self) -> String {
        kv::render(self.pairs().iter().map(|(k, v)| (k.as_str(), v.clone())))
    }
}
