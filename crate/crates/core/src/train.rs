//! Supervised teacher training and teacher-to-student distillation.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio;
use crate::checkpoint::{parameter_digest, save_checkpoint, CheckpointMeta};
use crate::data::{sample_batch, Corpus, SamplingOptions, Utterance};
use crate::error::{Error, Result};
use crate::eval::SyncScorer;
use crate::losses::{bce_loss, rkd_aux, sample_loss, DistillConfig, LossBreakdown, LossVars, Method, Regressors};
use crate::model::{ForwardOptions, ForwardSnapshot, ModelConfig, SyncModel, TraceSelection};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr0: f64,
    pub decay_mult: f64,
    pub decay_every: usize,
    /// Hold `lr0` through warmup instead of ramping.
    pub constant_warmup: bool,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    /// Validation batches per epoch for F1 model selection.
    pub val_batches: usize,
    pub exclude_near_zero: bool,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub distill: DistillConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Full-scale 80-epoch schedule: 10 warmup epochs, then ×0.8 every 20.
    pub fn full() -> Self {
        TrainConfig {
            epochs: 80,
            warmup_epochs: 10,
            lr0: 5e-5,
            decay_every: 20,
            batches_per_epoch: 50,
            val_batches: 8,
            ..TrainConfig::desk()
        }
    }

    /// Scaled-down schedule for laptop runs.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 40,
            warmup_epochs: 5,
            lr0: 5e-4,
            decay_mult: 0.8,
            decay_every: 10,
            constant_warmup: false,
            batch_size: 32,
            batches_per_epoch: 8,
            val_batches: 4,
            exclude_near_zero: false,
            clip_norm: 0.0,
            distill: DistillConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "train.warmup_epochs ({}) must be below train.epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.decay_mult > 0.0 && self.decay_mult <= 1.0) {
            return Err(Error::Config(format!("train.decay_mult must be in (0, 1], got {}", self.decay_mult)));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("train.lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config(format!("train.clip_norm must be ≥ 0, got {}", self.clip_norm)));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("train.decay_every must be positive".into()));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!("train.batch_size must be even and ≥ 2, got {}", self.batch_size)));
        }
        if self.distill.method == Method::Rkd && self.batch_size < 4 {
            return Err(Error::Config("rkd needs train.batch_size ≥ 4".into()));
        }
        if self.batches_per_epoch == 0 || self.val_batches == 0 {
            return Err(Error::Config("train.batches_per_epoch and train.val_batches must be positive".into()));
        }
        Ok(())
    }

    fn sampling(&self) -> SamplingOptions {
        SamplingOptions {
            exclude_near_zero: self.exclude_near_zero,
            ..SamplingOptions::default()
        }
    }
}

/// Learning rate for 0-based `epoch`: linear warmup from `lr0/warmup` to
/// `lr0`, then `lr0·decay_mult^floor((epoch - warmup)/decay_every)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Usage(format!("epoch {epoch} outside schedule of {} epochs", cfg.epochs)));
    }
    if epoch < cfg.warmup_epochs {
        if cfg.constant_warmup {
            return Ok(cfg.lr0);
        }
        return Ok(cfg.lr0 * (epoch + 1) as f64 / cfg.warmup_epochs as f64);
    }
    let steps = (epoch - cfg.warmup_epochs) / cfg.decay_every;
    Ok(cfg.lr0 * cfg.decay_mult.powi(steps as i32))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(shapes: &[usize]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, x) in p.values_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Per-epoch training record. Wall time is informational and excluded from
/// equality so that reruns compare equal.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub val_f1: f64,
    pub wall_seconds: f64,
}

impl PartialEq for EpochRecord {
    fn eq(&self, o: &Self) -> bool {
        self.epoch == o.epoch && self.lr == o.lr && self.train == o.train && self.val_f1 == o.val_f1
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_f1: f64,
}

/// Binary F1 from counts; 0 when there are no true positives.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// F1 over `n_batches` balanced batches, predicting in-sync iff
/// `sigmoid(logit) > 0.5`.
pub fn validate_f1(
    scorer: &dyn SyncScorer,
    split: &[Utterance],
    n_batches: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for _ in 0..n_batches {
        for p in sample_batch(split, batch_size, rng, &SamplingOptions::default())? {
            let positive = scorer.score(&p.visual, &p.audio, p.offset)? > 0.0;
            match (positive, p.label) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

/// Per-epoch callback: the record just completed and the current model.
pub type EpochHook<'h> = &'h mut dyn FnMut(&EpochRecord, &SyncModel) -> Result<()>;

/// Optional side effects of a training run.
#[derive(Default)]
pub struct TrainHooks<'h> {
    /// Written whenever validation F1 improves.
    pub checkpoint: Option<&'h Path>,
    /// Extra metadata for that checkpoint.
    pub checkpoint_extra: Vec<(String, String)>,
    pub on_epoch: Option<EpochHook<'h>>,
}

fn rng_digest(rng: &ChaCha8Rng) -> String {
    let mut bytes = rng.get_seed().to_vec();
    bytes.extend_from_slice(&rng.get_stream().to_le_bytes());
    bytes.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    binio::digest(&bytes)
}

struct Job<'t> {
    teacher: Option<&'t SyncModel>,
    regressors: Option<Regressors>,
}

fn forward_options(cfg: &DistillConfig, layers_per_block: usize) -> ForwardOptions {
    match cfg.trace_tau() {
        Some(tau) => ForwardOptions {
            tau_trace: tau,
            traces: TraceSelection::Layers(cfg.trace_layers(layers_per_block)),
        },
        None => ForwardOptions::untraced(),
    }
}

fn add_into(acc: &mut [Vec<f64>], tape: &Tape<'_>, grads: &crate::tape::Gradients, vars: &[Var]) {
    for (a, &v) in acc.iter_mut().zip(vars) {
        if let Some(g) = grads.get(v) {
            debug_assert!(tape.requires_grad(v));
            a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
        }
    }
}

/// Batch objective as minimised by the trainer, with its gradients.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub loss: f64,
    pub breakdown: LossBreakdown,
    /// One entry per student parameter, in name order.
    pub student_grads: Vec<Vec<f64>>,
    /// One entry per regressor parameter; empty without regressors.
    pub regressor_grads: Vec<Vec<f64>>,
}

/// Evaluates the training objective of `cfg.method` on one batch exactly as
/// a training step would, without updating anything.
pub fn batch_objective(
    student: &SyncModel,
    teacher: Option<&SyncModel>,
    regressors: Option<&Regressors>,
    batch: &[crate::data::AVPair],
    cfg: &DistillConfig,
) -> Result<BatchObjective> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let opts = forward_options(cfg, student.config().layers_per_block);
    let snaps: Vec<Option<ForwardSnapshot>> = match teacher {
        Some(t) if cfg.method.uses_teacher() => batch
            .iter()
            .map(|p| t.forward_snapshot(&p.visual, &p.audio, &opts).map(Some))
            .collect::<Result<_>>()?,
        _ => vec![None; batch.len()],
    };
    let job = Job {
        teacher,
        regressors: regressors.cloned(),
    };
    let (breakdown, student_grads, regressor_grads, loss) = batch_gradients(student, &job, &snaps, batch, cfg)?;
    Ok(BatchObjective {
        loss,
        breakdown,
        student_grads,
        regressor_grads,
    })
}

/// One optimisation step's forward/backward. Returns the batch-mean loss
/// breakdown and gradients for the student and regressor parameters.
fn batch_gradients(
    student: &SyncModel,
    job: &Job<'_>,
    teacher_snaps: &[Option<ForwardSnapshot>],
    batch: &[crate::data::AVPair],
    cfg: &DistillConfig,
) -> Result<(LossBreakdown, Vec<Vec<f64>>, Vec<Vec<f64>>, f64)> {
    let lpb = student.config().layers_per_block;
    let opts = forward_options(cfg, lpb);
    let mut tape = Tape::new();
    let bound = student.bind(&mut tape, true)?;
    let reg_bound = match &job.regressors {
        Some(r) => Some(r.bind(&mut tape, true)?),
        None => None,
    };
    let mut totals = Vec::with_capacity(batch.len());
    let mut parts = Vec::with_capacity(batch.len());
    let mut pooled = Vec::new();
    for (pair, snap) in batch.iter().zip(teacher_snaps) {
        let out = student.forward(&mut tape, &bound, &pair.visual, &pair.audio, &opts)?;
        let lv: LossVars = if cfg.method == Method::BceOnly {
            LossVars {
                bce: Some(bce_loss(&mut tape, out.logit, pair.label)),
                ..LossVars::default()
            }
        } else {
            sample_loss(&mut tape, cfg, lpb, &out, snap.as_ref(), pair.label, reg_bound.as_ref())?
        };
        pooled.push(out.pooled);
        totals.push(lv.total(&mut tape)?);
        parts.push(lv.breakdown(&tape));
    }
    let mut sum = totals[0];
    for &t in &totals[1..] {
        sum = tape.add(sum, t)?;
    }
    let mut loss = tape.scale(sum, 1.0 / batch.len() as f64);
    let mut breakdown = LossBreakdown::mean(&parts);
    if cfg.method == Method::Rkd {
        let t_pooled: Vec<Tensor> = teacher_snaps
            .iter()
            .map(|s| s.as_ref().map(|s| s.pooled.clone()))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Config("rkd needs teacher embeddings".into()))?;
        let aux = rkd_aux(&mut tape, &pooled, &t_pooled)?;
        breakdown.aux = tape.scalar(aux);
        breakdown.total += breakdown.aux;
        loss = tape.add(loss, aux)?;
    }
    let value = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    let mut g_model: Vec<Vec<f64>> = student.params().iter().map(|t| vec![0.0; t.len()]).collect();
    add_into(&mut g_model, &tape, &grads, bound.vars());
    let mut g_reg = Vec::new();
    if let (Some(r), Some(rb)) = (&job.regressors, &reg_bound) {
        g_reg = r.params().iter().map(|t| vec![0.0; t.len()]).collect();
        add_into(&mut g_reg, &tape, &grads, rb.vars());
    }
    Ok((breakdown, g_model, g_reg, value))
}

fn clip_global_norm(a: &mut [Vec<f64>], b: &mut [Vec<f64>], max_norm: f64) {
    let norm = a.iter().chain(b.iter()).flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        a.iter_mut().chain(b.iter_mut()).flatten().for_each(|g| *g *= s);
    }
}

fn run(
    mut student: SyncModel,
    job: Job<'_>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    hooks: TrainHooks<'_>,
) -> Result<(SyncModel, TrainHistory)> {
    cfg.validate()?;
    let lpb = student.config().layers_per_block;
    cfg.distill.validate(lpb)?;
    let TrainHooks {
        checkpoint,
        checkpoint_extra,
        mut on_epoch,
    } = hooks;
    let mut history = TrainHistory::default();
    let mut best = student.clone();
    let mut job = job;
    let mut adam = Adam::new(&student.params().iter().map(Tensor::len).collect::<Vec<_>>());
    let mut adam_reg = job
        .regressors
        .as_ref()
        .map(|r| Adam::new(&r.params().iter().map(Tensor::len).collect::<Vec<_>>()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sampling = cfg.sampling();
    let teacher_opts = forward_options(&cfg.distill, lpb);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_schedule(epoch, cfg)?;
        let mut parts = Vec::with_capacity(cfg.batches_per_epoch);
        for b in 0..cfg.batches_per_epoch {
            let batch = sample_batch(&corpus.train, cfg.batch_size, &mut rng, &sampling)?;
            let snaps: Vec<Option<ForwardSnapshot>> = match job.teacher {
                Some(t) if cfg.distill.method.uses_teacher() => batch
                    .iter()
                    .map(|p| t.forward_snapshot(&p.visual, &p.audio, &teacher_opts).map(Some))
                    .collect::<Result<_>>()?,
                _ => vec![None; batch.len()],
            };
            let (parts_b, mut g_model, mut g_reg, value) = batch_gradients(&student, &job, &snaps, &batch, &cfg.distill)?;
            let grads_finite = g_model.iter().flatten().chain(g_reg.iter().flatten()).all(|g| g.is_finite());
            if !value.is_finite() || !grads_finite {
                return Err(Error::Numerical {
                    epoch,
                    batch: b,
                    detail: format!("non-finite loss or gradient (loss = {value})"),
                });
            }
            if cfg.clip_norm > 0.0 {
                clip_global_norm(&mut g_model, &mut g_reg, cfg.clip_norm);
            }
            adam.step(student.params_mut(), &g_model, lr);
            if let (Some(r), Some(opt)) = (job.regressors.as_mut(), adam_reg.as_mut()) {
                opt.step(r.params_mut(), &g_reg, lr);
            }
            parts.push(parts_b);
        }
        let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_f1);
        let val_f1 = validate_f1(&student, &corpus.val, cfg.val_batches, cfg.batch_size, &mut val_rng)?;
        let record = EpochRecord {
            epoch,
            lr,
            train: LossBreakdown::mean(&parts),
            val_f1,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        if history.best_epoch.is_none() || val_f1 > history.best_val_f1 {
            history.best_epoch = Some(epoch);
            history.best_val_f1 = val_f1;
            best = student.clone();
            if let Some(path) = checkpoint {
                let meta = CheckpointMeta {
                    epoch,
                    val_f1,
                    rng_digest: rng_digest(&rng),
                    extra: checkpoint_extra.clone(),
                };
                save_checkpoint(&best, &meta, path)?;
            }
        }
        if let Some(hook) = on_epoch.as_mut() {
            hook(&record, &student)?;
        }
        history.records.push(record);
    }
    Ok((best, history))
}

/// Trains a fresh model with BCE. Returns the best-validation-F1 parameters.
pub fn train_teacher(corpus: &Corpus, model_config: &ModelConfig, cfg: &TrainConfig) -> Result<(SyncModel, TrainHistory)> {
    train_teacher_with(corpus, model_config, cfg, TrainHooks::default())
}

pub fn train_teacher_with(
    corpus: &Corpus,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    hooks: TrainHooks<'_>,
) -> Result<(SyncModel, TrainHistory)> {
    check_corpus(model_config, corpus)?;
    let cfg = TrainConfig {
        distill: DistillConfig::for_method(Method::BceOnly),
        ..cfg.clone()
    };
    let model = SyncModel::init(model_config)?;
    run(
        model,
        Job {
            teacher: None,
            regressors: None,
        },
        corpus,
        &cfg,
        hooks,
    )
}

fn check_corpus(m: &ModelConfig, corpus: &Corpus) -> Result<()> {
    let c = &corpus.config;
    if (m.d_visual_in, m.d_audio_in, m.audio_rate) != (c.d_visual_in, c.d_audio_in, c.audio_rate) {
        return Err(Error::Config(format!(
            "model inputs (visual {}, audio {}, rate {}) do not match corpus (visual {}, audio {}, rate {})",
            m.d_visual_in, m.d_audio_in, m.audio_rate, c.d_visual_in, c.d_audio_in, c.audio_rate
        )));
    }
    Ok(())
}

fn check_pair(teacher: &ModelConfig, student: &ModelConfig, distill: &DistillConfig) -> Result<()> {
    if (teacher.d_visual_in, teacher.d_audio_in, teacher.audio_rate)
        != (student.d_visual_in, student.d_audio_in, student.audio_rate)
    {
        return Err(Error::Config("teacher and student must share input widths and audio_rate".into()));
    }
    if teacher.layers_per_block != student.layers_per_block {
        return Err(Error::Config("teacher and student must have the same layers per block".into()));
    }
    if matches!(distill.method, Method::Mtd | Method::MiniLmStar) && teacher.n_heads != student.n_heads {
        return Err(Error::Config(format!(
            "attention mimicry needs equal head counts (teacher {}, student {})",
            teacher.n_heads, student.n_heads
        )));
    }
    Ok(())
}

/// Distils `teacher` into a student built from `student_config`. The teacher
/// is only read; its parameter digest is checked before returning.
pub fn distill_student(
    teacher: &SyncModel,
    corpus: &Corpus,
    student_config: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(SyncModel, TrainHistory)> {
    let student = SyncModel::init(student_config)?;
    distill_from(teacher, student, corpus, cfg, TrainHooks::default())
}

/// Like [`distill_student`] with an explicit initial student and hooks.
pub fn distill_from(
    teacher: &SyncModel,
    student: SyncModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
    hooks: TrainHooks<'_>,
) -> Result<(SyncModel, TrainHistory)> {
    check_corpus(student.config(), corpus)?;
    check_pair(teacher.config(), student.config(), &cfg.distill)?;
    let lpb = student.config().layers_per_block;
    let hint = cfg.distill.hint_layers(lpb);
    let regressors = if hint.is_empty() {
        None
    } else {
        Some(Regressors::init(
            &hint,
            student.config().d_model,
            teacher.config().d_model,
            cfg.seed ^ 0x7265_6772,
        )?)
    };
    let before = parameter_digest(teacher);
    let out = run(
        student,
        Job {
            teacher: Some(teacher),
            regressors,
        },
        corpus,
        cfg,
        hooks,
    )?;
    debug_assert_eq!(before, parameter_digest(teacher));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::full();
        assert!((lr_schedule(10, &cfg).unwrap() - 5e-5).abs() < 1e-18);
        assert!((lr_schedule(30, &cfg).unwrap() - 4e-5).abs() < 1e-18);
        assert!((lr_schedule(0, &cfg).unwrap() - 5e-6).abs() < 1e-18);
        assert!(matches!(lr_schedule(80, &cfg), Err(Error::Usage(_))));
    }

    #[test]
    fn f1_degenerate_cases() {
        assert_eq!(f1_from_counts(0, 0, 5), 0.0);
        assert_eq!(f1_from_counts(0, 3, 5), 0.0);
        assert!((f1_from_counts(4, 4, 0) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::from_rows(&[&[1.0, -1.0]])];
        let mut opt = Adam::new(&[2]);
        opt.step(&mut p, &[vec![0.5, -2.0]], 0.1);
        assert!((p[0].values()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].values()[1] + 0.9).abs() < 1e-6);
    }
}
