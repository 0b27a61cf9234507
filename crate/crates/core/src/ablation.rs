//! Distill-and-evaluate sweeps over one axis of the objective, and the
//! loss-tracking run that monitors several objectives while optimising one.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_batch, AVPair, Corpus, SamplingOptions};
use crate::error::{Error, Result};
use crate::eval::{multi_length_eval, EvalConfig};
use crate::losses::{cad_loss, vr_loss, DistillConfig, FitnetsMode, Method, DEFAULT_LAYER_SET};
use crate::model::{Block, ForwardOptions, ForwardSnapshot, LayerSpec, ModelConfig, SyncModel, TraceSelection};
use crate::tape::Tape;
use crate::train::{distill_from, EpochRecord, TrainConfig, TrainHooks};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    MtdTerms,
    LayerSweep,
    LayerSets,
    Temperature,
    Methods,
}

impl AblationKind {
    pub const ALL: [AblationKind; 5] = [
        AblationKind::MtdTerms,
        AblationKind::LayerSweep,
        AblationKind::LayerSets,
        AblationKind::Temperature,
        AblationKind::Methods,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationKind::MtdTerms => "mtd_terms",
            AblationKind::LayerSweep => "layer_sweep",
            AblationKind::LayerSets => "layer_sets",
            AblationKind::Temperature => "temperature",
            AblationKind::Methods => "methods",
        }
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationKind::ALL
            .into_iter()
            .find(|k| k.name() == s.replace('-', "_"))
            .ok_or_else(|| Error::Usage(format!("unknown ablation `{s}`")))
    }
}

/// The eight candidate layer sets, in order S1..S8.
pub fn candidate_layer_sets() -> Vec<(&'static str, Vec<LayerSpec>)> {
    let f3 = LayerSpec::new(Block::Fusion, 3);
    let f4 = LayerSpec::new(Block::Fusion, 4);
    let av4 = LayerSpec::new(Block::Av, 4);
    let va1 = LayerSpec::new(Block::Va, 1);
    vec![
        ("S1", vec![f3]),
        ("S2", vec![av4]),
        ("S3", vec![va1]),
        ("S4", vec![f3, av4]),
        ("S5", vec![f3, va1]),
        ("S6", vec![av4, va1]),
        ("S7", vec![f3, f4, av4]),
        ("S8", DEFAULT_LAYER_SET.to_vec()),
    ]
}

pub const TEMPERATURE_AXIS: [f64; 5] = [1.0, 5.0, 15.0, 25.0, 35.0];

/// One value on an ablation axis.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisPoint {
    pub label: String,
    pub distill: DistillConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub kind: AblationKind,
    pub points: Vec<AxisPoint>,
    pub seeds: Vec<u64>,
}

impl AblationSpec {
    /// The standard axis for `kind`, built around `base`.
    pub fn standard(kind: AblationKind, base: &DistillConfig, layers_per_block: usize, seeds: Vec<u64>) -> Self {
        let mtd = DistillConfig {
            method: Method::Mtd,
            ..base.clone()
        };
        let point = |label: String, distill: DistillConfig| AxisPoint { label, distill };
        let points = match kind {
            AblationKind::MtdTerms => vec![
                point("bce".into(), DistillConfig { method: Method::BceOnly, ..mtd.clone() }),
                point("without-vr".into(), DistillConfig { include_vr: false, ..mtd.clone() }),
                point("without-cad".into(), DistillConfig { include_cad: false, ..mtd.clone() }),
                point("full".into(), mtd.clone()),
            ],
            AblationKind::LayerSweep => Block::ALL
                .iter()
                .flat_map(|&b| (1..=layers_per_block).map(move |l| LayerSpec::new(b, l)))
                .map(|spec| point(spec.to_string(), DistillConfig { layer_set: vec![spec], ..mtd.clone() }))
                .collect(),
            AblationKind::LayerSets => candidate_layer_sets()
                .into_iter()
                .map(|(name, set)| point(name.into(), DistillConfig { layer_set: set, ..mtd.clone() }))
                .collect(),
            AblationKind::Temperature => TEMPERATURE_AXIS
                .iter()
                .map(|&tau| point(format!("{tau}"), DistillConfig { tau, ..mtd.clone() }))
                .collect(),
            AblationKind::Methods => Method::ALL
                .iter()
                .map(|&m| point(m.name().into(), DistillConfig { method: m, ..base.clone() }))
                .collect(),
        };
        AblationSpec { kind, points, seeds }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() || self.seeds.is_empty() {
            return Err(Error::Usage("ablation needs at least one axis value and one seed".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub val_f1: f64,
    /// `(frame_length, accuracy)`.
    pub accuracies: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Mean accuracy per (axis value, frame length), in axis order.
    pub fn means(&self) -> Vec<(String, Vec<(usize, f64)>)> {
        let mut out: Vec<(String, Vec<(usize, f64)>, usize)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|(v, _, _)| *v == r.value) {
                Some((_, acc, n)) => {
                    acc.iter_mut().zip(&r.accuracies).for_each(|(a, b)| a.1 += b.1);
                    *n += 1;
                }
                None => out.push((r.value.clone(), r.accuracies.clone(), 1)),
            }
        }
        out.into_iter()
            .map(|(v, acc, n)| (v, acc.into_iter().map(|(l, a)| (l, a / n as f64)).collect()))
            .collect()
    }
}

/// Shared inputs of a sweep.
pub struct SweepInputs<'a> {
    pub teacher: &'a SyncModel,
    pub corpus: &'a Corpus,
    pub student: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub eval: &'a EvalConfig,
}

/// Distils and evaluates one student per (axis value, seed). The seed sets
/// both the student initialisation and the batch sampler, so axis values
/// are compared on paired seeds.
pub fn run_ablation(spec: &AblationSpec, inputs: &SweepInputs<'_>) -> Result<AblationReport> {
    spec.validate()?;
    let mut report = AblationReport::default();
    for point in &spec.points {
        for &seed in &spec.seeds {
            let (val_f1, eval) = distill_and_eval(&point.distill, seed, inputs)?;
            report.rows.push(AblationRow {
                axis: spec.kind.name().into(),
                value: point.label.clone(),
                seed,
                val_f1,
                accuracies: eval,
            });
        }
    }
    Ok(report)
}

/// One cell of a sweep: returns best validation F1 and per-length accuracy.
pub fn distill_and_eval(distill: &DistillConfig, seed: u64, inputs: &SweepInputs<'_>) -> Result<(f64, Vec<(usize, f64)>)> {
    let student_cfg = ModelConfig {
        seed,
        ..inputs.student.clone()
    };
    let train = TrainConfig {
        distill: distill.clone(),
        seed,
        ..inputs.train.clone()
    };
    let student = SyncModel::init(&student_cfg)?;
    let (model, history) = distill_from(inputs.teacher, student, inputs.corpus, &train, TrainHooks::default())?;
    let report = multi_length_eval(&model, &inputs.corpus.test, inputs.eval)?;
    let acc = report.lengths.iter().map(|r| (r.frame_length, r.accuracy)).collect();
    Ok((history.best_val_f1, acc))
}

/// Three monitored objectives after one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingRow {
    pub epoch: usize,
    pub last_fitnets: f64,
    pub sel_fitnets: f64,
    pub mtd: f64,
}

/// Mean squared error of the best ridge-regularised affine map from student
/// to teacher representations, summed over `layers`. Representations are
/// pooled over `pairs`.
fn best_bridge_mse(student: &[ForwardSnapshot], teacher: &[ForwardSnapshot], layers: &[LayerSpec]) -> Result<f64> {
    let mut total = 0.0;
    for spec in layers {
        let get = |s: &ForwardSnapshot| {
            s.block_outputs
                .get(spec)
                .cloned()
                .ok_or_else(|| Error::Config(format!("no output recorded for layer {spec}")))
        };
        let xs = student.iter().map(get).collect::<Result<Vec<_>>>()?;
        let ys = teacher.iter().map(get).collect::<Result<Vec<_>>>()?;
        let (ds, dt) = (xs[0].cols() + 1, ys[0].cols());
        let rows: usize = xs.iter().map(|x| x.rows()).sum();
        let mut x = DMatrix::<f64>::zeros(rows, ds);
        let mut y = DMatrix::<f64>::zeros(rows, dt);
        let mut r = 0;
        for (xt, yt) in xs.iter().zip(&ys) {
            for i in 0..xt.rows() {
                for (j, v) in xt.row(i).iter().enumerate() {
                    x[(r, j)] = *v;
                }
                x[(r, ds - 1)] = 1.0;
                for (j, v) in yt.row(i).iter().enumerate() {
                    y[(r, j)] = *v;
                }
                r += 1;
            }
        }
        let xtx = x.transpose() * &x + DMatrix::<f64>::identity(ds, ds) * 1e-6;
        let chol = xtx
            .cholesky()
            .ok_or_else(|| Error::Config("hint regression is singular".into()))?;
        let w = chol.solve(&(x.transpose() * &y));
        let resid = &x * w - y;
        total += resid.norm_squared() / (rows * dt) as f64;
    }
    Ok(total)
}

/// Monitored objectives of `student` on a fixed pair set, given teacher
/// snapshots of the same pairs.
pub fn monitor_losses(
    student: &SyncModel,
    pairs: &[AVPair],
    teacher_snaps: &[ForwardSnapshot],
    distill: &DistillConfig,
) -> Result<(f64, f64, f64)> {
    let lpb = student.config().layers_per_block;
    let opts = ForwardOptions {
        tau_trace: distill.tau,
        traces: TraceSelection::Layers(distill.layer_set.clone()),
    };
    let mut snaps = Vec::with_capacity(pairs.len());
    let mut mtd = 0.0;
    for (p, t) in pairs.iter().zip(teacher_snaps) {
        let mut tape = Tape::new();
        let bound = student.bind(&mut tape, false)?;
        let out = student.forward(&mut tape, &bound, &p.visual, &p.audio, &opts)?;
        let cad = cad_loss(&mut tape, &out, t, &distill.layer_set, distill.tau, distill.reverse_kl)?;
        let vr = vr_loss(&mut tape, &out, t, &distill.layer_set, distill.tau, distill.reverse_kl)?;
        mtd += tape.scalar(cad) + tape.scalar(vr);
        snaps.push(out.snapshot(&tape));
    }
    let last = best_bridge_mse(&snaps, teacher_snaps, &FitnetsMode::Last.layers(lpb))?;
    let sel = best_bridge_mse(&snaps, teacher_snaps, &FitnetsMode::Sel.layers(lpb))?;
    Ok((last, sel, mtd / pairs.len() as f64))
}

/// Trains a student on `optimize` (plus BCE) and, after every epoch, logs
/// all three objectives on fixed validation pairs without differentiating
/// them. The MTD objective uses `train.distill`'s layer set and temperature;
/// hint objectives are measured through the best affine bridge.
pub fn loss_tracking_run(
    optimize: Method,
    inputs: &SweepInputs<'_>,
    n_monitor_pairs: usize,
) -> Result<(Vec<TrackingRow>, Vec<EpochRecord>)> {
    if !matches!(optimize, Method::LastFitnets | Method::SelFitnets | Method::Mtd) {
        return Err(Error::Usage(format!("loss tracking optimises last-fitnets, sel-fitnets or mtd, not {optimize}")));
    }
    let monitor_cfg = DistillConfig {
        method: Method::Mtd,
        ..inputs.train.distill.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(inputs.train.seed ^ 0x7261_636b);
    let pairs = sample_batch(
        &inputs.corpus.val,
        n_monitor_pairs.max(2) & !1,
        &mut rng,
        &SamplingOptions::default(),
    )?;
    let t_opts = ForwardOptions {
        tau_trace: monitor_cfg.tau,
        traces: TraceSelection::Layers(monitor_cfg.layer_set.clone()),
    };
    let teacher_snaps = pairs
        .iter()
        .map(|p| inputs.teacher.forward_snapshot(&p.visual, &p.audio, &t_opts))
        .collect::<Result<Vec<_>>>()?;
    let train = TrainConfig {
        distill: DistillConfig {
            method: optimize,
            ..inputs.train.distill.clone()
        },
        ..inputs.train.clone()
    };
    let student = SyncModel::init(inputs.student)?;
    let mut rows = Vec::new();
    let (l0, s0, m0) = monitor_losses(&student, &pairs, &teacher_snaps, &monitor_cfg)?;
    rows.push(TrackingRow {
        epoch: 0,
        last_fitnets: l0,
        sel_fitnets: s0,
        mtd: m0,
    });
    let mut hook = |rec: &EpochRecord, model: &SyncModel| -> Result<()> {
        let (l, s, m) = monitor_losses(model, &pairs, &teacher_snaps, &monitor_cfg)?;
        rows.push(TrackingRow {
            epoch: rec.epoch + 1,
            last_fitnets: l,
            sel_fitnets: s,
            mtd: m,
        });
        Ok(())
    };
    let (_, history) = distill_from(
        inputs.teacher,
        student,
        inputs.corpus,
        &train,
        TrainHooks {
            on_epoch: Some(&mut hook),
            ..TrainHooks::default()
        },
    )?;
    Ok((rows, history.records))
}
