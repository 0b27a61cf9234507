//! Training objectives: binary cross entropy, the attention-behaviour
//! distillation terms (cross-attention distribution and value relation), and
//! the baseline distillers (soft-target KD, relational KD, MiniLM-style
//! last-layer mimicry, FitNets hints).
//!
//! Student quantities live on a [`Tape`]; teacher quantities arrive as
//! detached [`ForwardSnapshot`]s, so no gradient can ever reach the teacher.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Block, ForwardOutput, ForwardSnapshot, LayerSpec};
use crate::tape::{softplus, stable_sigmoid, Tape, Var};
use crate::tensor::Tensor;

/// Layer set S8: Fusion 3rd, AV 4th, VA 1st.
pub const DEFAULT_LAYER_SET: [LayerSpec; 3] = [
    LayerSpec::new(Block::Fusion, 3),
    LayerSpec::new(Block::Av, 4),
    LayerSpec::new(Block::Va, 1),
];

pub const DEFAULT_TAU: f64 = 25.0;

/// Huber threshold for relational distillation.
pub const RKD_DELTA: f64 = 1.0;
pub const RKD_DISTANCE_WEIGHT: f64 = 1.0;
pub const RKD_ANGLE_WEIGHT: f64 = 2.0;
const RKD_SQRT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    BceOnly,
    Kd,
    Rkd,
    MiniLmStar,
    LastFitnets,
    SelFitnets,
    Mtd,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::BceOnly,
        Method::Kd,
        Method::Rkd,
        Method::MiniLmStar,
        Method::LastFitnets,
        Method::SelFitnets,
        Method::Mtd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::BceOnly => "bce",
            Method::Kd => "kd",
            Method::Rkd => "rkd",
            Method::MiniLmStar => "minilm",
            Method::LastFitnets => "last-fitnets",
            Method::SelFitnets => "sel-fitnets",
            Method::Mtd => "mtd",
        }
    }

    pub fn uses_teacher(self) -> bool {
        self != Method::BceOnly
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .or(match norm.as_str() {
                "bce-only" => Some(Method::BceOnly),
                "minilm*" | "minilm-star" => Some(Method::MiniLmStar),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("unknown distillation method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitnetsMode {
    /// Last layer of every block.
    Last,
    /// The default layer set.
    Sel,
}

impl FitnetsMode {
    pub fn layers(self, layers_per_block: usize) -> Vec<LayerSpec> {
        match self {
            FitnetsMode::Last => Block::ALL
                .iter()
                .map(|&b| LayerSpec::new(b, layers_per_block))
                .collect(),
            FitnetsMode::Sel => DEFAULT_LAYER_SET.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub method: Method,
    pub layer_set: Vec<LayerSpec>,
    pub tau: f64,
    pub include_cad: bool,
    pub include_vr: bool,
    /// Puts the teacher distribution first inside the KL.
    pub reverse_kl: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            method: Method::Mtd,
            layer_set: DEFAULT_LAYER_SET.to_vec(),
            tau: DEFAULT_TAU,
            include_cad: true,
            include_vr: true,
            reverse_kl: false,
        }
    }
}

impl DistillConfig {
    pub fn for_method(method: Method) -> Self {
        DistillConfig {
            method,
            ..DistillConfig::default()
        }
    }

    pub fn validate(&self, layers_per_block: usize) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("distill.tau must be positive, got {}", self.tau)));
        }
        if !matches!(self.method, Method::Mtd | Method::SelFitnets) {
            // The layer set is unused; it is checked when a method reads it.
            return Ok(());
        }
        if self.layer_set.is_empty() {
            return Err(Error::Config("distill.layers must not be empty".into()));
        }
        for l in &self.layer_set {
            l.validate(layers_per_block)?;
        }
        Ok(())
    }

    /// Temperature at which traces must be recorded, if the method uses any.
    pub fn trace_tau(&self) -> Option<f64> {
        match self.method {
            Method::Mtd => Some(self.tau),
            Method::MiniLmStar => Some(1.0),
            _ => None,
        }
    }

    /// Layers whose traces the method reads.
    pub fn trace_layers(&self, layers_per_block: usize) -> Vec<LayerSpec> {
        match self.method {
            Method::Mtd => self.layer_set.clone(),
            Method::MiniLmStar => vec![LayerSpec::new(Block::Fusion, layers_per_block)],
            _ => Vec::new(),
        }
    }

    /// Layers whose representations the method regresses onto.
    pub fn hint_layers(&self, layers_per_block: usize) -> Vec<LayerSpec> {
        match self.method {
            Method::LastFitnets => FitnetsMode::Last.layers(layers_per_block),
            Method::SelFitnets => self.layer_set.clone(),
            _ => Vec::new(),
        }
    }
}

/// Scalar values of one evaluated objective.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub bce: f64,
    pub cad: f64,
    pub vr: f64,
    pub aux: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            bce: sum(|b| b.bce),
            cad: sum(|b| b.cad),
            vr: sum(|b| b.vr),
            aux: sum(|b| b.aux),
            total: sum(|b| b.total),
        }
    }
}

/// Loss terms on a tape. Absent terms are exactly zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossVars {
    pub bce: Option<Var>,
    pub cad: Option<Var>,
    pub vr: Option<Var>,
    pub aux: Option<Var>,
}

impl LossVars {
    fn terms(&self) -> impl Iterator<Item = Var> {
        [self.bce, self.cad, self.vr, self.aux].into_iter().flatten()
    }

    /// Sum of the present terms; a zero constant when none are.
    pub fn total(&self, tape: &mut Tape<'_>) -> Result<Var> {
        let mut terms = self.terms();
        let Some(mut acc) = terms.next() else {
            return tape.constant(1, 1, vec![0.0]);
        };
        for t in terms {
            acc = tape.add(acc, t)?;
        }
        Ok(acc)
    }

    pub fn breakdown(&self, tape: &Tape<'_>) -> LossBreakdown {
        let v = |o: Option<Var>| o.map_or(0.0, |v| tape.scalar(v));
        let (bce, cad, vr, aux) = (v(self.bce), v(self.cad), v(self.vr), v(self.aux));
        LossBreakdown {
            bce,
            cad,
            vr,
            aux,
            total: bce + cad + vr + aux,
        }
    }
}

/// Binary cross entropy on `sigmoid(logit)` in softplus form.
pub fn bce_loss(tape: &mut Tape<'_>, logit: Var, label: bool) -> Var {
    let z = if label { tape.scale(logit, -1.0) } else { logit };
    let l = tape.softplus(z);
    tape.sum(l)
}

/// Scalar form of [`bce_loss`].
pub fn bce_value(logit: f64, label: bool) -> f64 {
    softplus(if label { -logit } else { logit })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Behavior {
    Cad,
    Vr,
}

fn behavior_loss(
    tape: &mut Tape<'_>,
    kind: Behavior,
    student: &ForwardOutput,
    teacher: &ForwardSnapshot,
    layers: &[LayerSpec],
    tau: f64,
    reverse_kl: bool,
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::Config("behaviour loss needs at least one layer".into()));
    }
    let mut total: Option<Var> = None;
    for &spec in layers {
        let s = student.layer_traces(spec);
        let t = teacher.layer_traces(spec);
        if s.is_empty() || t.is_empty() {
            return Err(Error::Config(format!("no attention trace recorded for layer {spec}")));
        }
        if s.len() != t.len() {
            return Err(Error::Config(format!(
                "layer {spec}: student has {} heads, teacher {}",
                s.len(),
                t.len()
            )));
        }
        let mut layer_sum: Option<Var> = None;
        for (st, tt) in s.iter().zip(&t) {
            if st.tau_used != tau || tt.tau_used != tau {
                return Err(Error::Config(format!(
                    "layer {spec}: traces recorded at τ={}/{} but loss uses τ={tau}",
                    st.tau_used, tt.tau_used
                )));
            }
            let (sv, tm) = match kind {
                Behavior::Cad => (st.cad, &tt.cad),
                Behavior::Vr => (st.vr, &tt.vr),
            };
            let (r, c) = tm.matrix_dims()?;
            let tv = tape.constant(r, c, tm.values().to_vec())?;
            let kl = if reverse_kl {
                tape.kl_div_rows(tv, sv)?
            } else {
                tape.kl_div_rows(sv, tv)?
            };
            layer_sum = Some(match layer_sum {
                Some(acc) => tape.add(acc, kl)?,
                None => kl,
            });
        }
        let heads = s.len() as f64;
        let layer = tape.scale(layer_sum.expect("at least one head"), tau * tau / heads);
        total = Some(match total {
            Some(acc) => tape.add(acc, layer)?,
            None => layer,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// `Σ_layers τ² · mean_heads KL(CAD_student ‖ CAD_teacher)`.
pub fn cad_loss(
    tape: &mut Tape<'_>,
    student: &ForwardOutput,
    teacher: &ForwardSnapshot,
    layers: &[LayerSpec],
    tau: f64,
    reverse_kl: bool,
) -> Result<Var> {
    behavior_loss(tape, Behavior::Cad, student, teacher, layers, tau, reverse_kl)
}

/// `Σ_layers τ² · mean_heads KL(VR_student ‖ VR_teacher)`.
pub fn vr_loss(
    tape: &mut Tape<'_>,
    student: &ForwardOutput,
    teacher: &ForwardSnapshot,
    layers: &[LayerSpec],
    tau: f64,
    reverse_kl: bool,
) -> Result<Var> {
    behavior_loss(tape, Behavior::Vr, student, teacher, layers, tau, reverse_kl)
}

/// BCE plus the enabled behaviour terms over `config.layer_set` at `config.tau`.
pub fn mtd_loss(
    tape: &mut Tape<'_>,
    student: &ForwardOutput,
    teacher: &ForwardSnapshot,
    label: bool,
    config: &DistillConfig,
) -> Result<LossVars> {
    let mut vars = LossVars {
        bce: Some(bce_loss(tape, student.logit, label)),
        ..LossVars::default()
    };
    if config.include_cad {
        vars.cad = Some(cad_loss(tape, student, teacher, &config.layer_set, config.tau, config.reverse_kl)?);
    }
    if config.include_vr {
        vars.vr = Some(vr_loss(tape, student, teacher, &config.layer_set, config.tau, config.reverse_kl)?);
    }
    Ok(vars)
}

/// MiniLM-style mimicry of the last Fusion layer at τ = 1, plus BCE. The
/// behaviour terms are reported together as `aux`.
pub fn minilm_star_loss(
    tape: &mut Tape<'_>,
    student: &ForwardOutput,
    teacher: &ForwardSnapshot,
    label: bool,
    layers_per_block: usize,
) -> Result<LossVars> {
    let last = [LayerSpec::new(Block::Fusion, layers_per_block)];
    let cad = cad_loss(tape, student, teacher, &last, 1.0, false)?;
    let vr = vr_loss(tape, student, teacher, &last, 1.0, false)?;
    Ok(LossVars {
        bce: Some(bce_loss(tape, student.logit, label)),
        aux: Some(tape.add(cad, vr)?),
        ..LossVars::default()
    })
}

/// Soft-target distillation for a single-logit head:
/// `τ² · KL(Bern(σ(t/τ)) ‖ Bern(σ(s/τ)))`, plus BCE.
pub fn kd_loss(
    tape: &mut Tape<'_>,
    student_logit: Var,
    teacher_logit: f64,
    label: bool,
    tau: f64,
) -> Result<LossVars> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("KD temperature must be positive, got {tau}")));
    }
    let soft = tape.scale(student_logit, 1.0 / tau);
    let zero = tape.constant(1, 1, vec![0.0])?;
    let two = tape.concat_cols(&[soft, zero])?;
    let student_dist = tape.softmax_rows(two, 1.0, 1.0)?;
    let p = stable_sigmoid(teacher_logit / tau);
    let teacher_dist = tape.constant(1, 2, vec![p, 1.0 - p])?;
    let kl = tape.kl_div_rows(teacher_dist, student_dist)?;
    Ok(LossVars {
        bce: Some(bce_loss(tape, student_logit, label)),
        aux: Some(tape.scale(kl, tau * tau)),
        ..LossVars::default()
    })
}

/// Index lists of all unordered pairs `i < j`.
fn pairs(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            a.push(i);
            b.push(j);
        }
    }
    (a, b)
}

/// Index lists of triplets `(i, j, k)` with vertex `j` and `i < k`, all distinct.
fn triplets(n: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (mut a, mut v, mut c) = (Vec::new(), Vec::new(), Vec::new());
    for j in 0..n {
        for i in 0..n {
            for k in i + 1..n {
                if i != j && k != j {
                    a.push(i);
                    v.push(j);
                    c.push(k);
                }
            }
        }
    }
    (a, v, c)
}

/// Teacher-side relations: mean-normalized pairwise distances and triplet
/// angle cosines, in the orders used by [`rkd_loss`].
pub fn rkd_relations(embeddings: &[Tensor]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = embeddings.len();
    if n < 3 {
        return Err(Error::Usage(format!("relational distillation needs ≥ 3 samples, got {n}")));
    }
    let rows: Vec<&[f64]> = embeddings.iter().map(Tensor::values).collect();
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<f64>>();
    let (pi, pj) = pairs(n);
    let dist: Vec<f64> = pi
        .iter()
        .zip(&pj)
        .map(|(&i, &j)| {
            let d = diff(rows[i], rows[j]);
            (d.iter().map(|x| x * x).sum::<f64>() + RKD_SQRT_EPS).sqrt()
        })
        .collect();
    let mu = dist.iter().sum::<f64>() / dist.len() as f64;
    let psi = dist.iter().map(|d| d / mu).collect();
    let unit = |mut v: Vec<f64>| {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        v
    };
    let (ti, tj, tk) = triplets(n);
    let cos = ti
        .iter()
        .zip(&tj)
        .zip(&tk)
        .map(|((&i, &j), &k)| {
            let e1 = unit(diff(rows[i], rows[j]));
            let e2 = unit(diff(rows[k], rows[j]));
            e1.iter().zip(&e2).map(|(a, b)| a * b).sum()
        })
        .collect();
    Ok((psi, cos))
}

/// Relational distillation term over a batch of pooled embeddings:
/// Huber on normalized distances plus twice Huber on angle cosines. Student
/// and teacher widths may differ.
pub fn rkd_loss(tape: &mut Tape<'_>, student_pooled: &[Var], teacher_pooled: &[Tensor]) -> Result<(Var, Var)> {
    let n = student_pooled.len();
    if n != teacher_pooled.len() {
        return Err(Error::Usage(format!(
            "relational batch sizes differ: {n} student vs {} teacher",
            teacher_pooled.len()
        )));
    }
    let (t_psi, t_cos) = rkd_relations(teacher_pooled)?;
    let e = tape.concat_rows(student_pooled)?;

    let (pi, pj) = pairs(n);
    let a = tape.select_rows(e, &pi)?;
    let b = tape.select_rows(e, &pj)?;
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    let sq = tape.row_sum(sq);
    let sq = tape.add_scalar(sq, RKD_SQRT_EPS);
    let dist = tape.sqrt(sq)?;
    let mu = tape.mean(dist);
    let psi = tape.div_scalar(dist, mu)?;
    let dist_term = tape.huber(psi, &t_psi, RKD_DELTA)?;

    let (ti, tj, tk) = triplets(n);
    let xi = tape.select_rows(e, &ti)?;
    let xj = tape.select_rows(e, &tj)?;
    let xk = tape.select_rows(e, &tk)?;
    let e1 = tape.sub(xi, xj)?;
    let e1 = tape.normalize_rows(e1);
    let e2 = tape.sub(xk, xj)?;
    let e2 = tape.normalize_rows(e2);
    let prod = tape.mul(e1, e2)?;
    let cos = tape.row_sum(prod);
    let angle_term = tape.huber(cos, &t_cos, RKD_DELTA)?;
    Ok((dist_term, angle_term))
}

/// Combined relational term `w_d · distance + w_a · angle`.
pub fn rkd_aux(tape: &mut Tape<'_>, student_pooled: &[Var], teacher_pooled: &[Tensor]) -> Result<Var> {
    let (d, a) = rkd_loss(tape, student_pooled, teacher_pooled)?;
    let d = tape.scale(d, RKD_DISTANCE_WEIGHT);
    let a = tape.scale(a, RKD_ANGLE_WEIGHT);
    tape.add(d, a)
}

/// Learned width bridges from student to teacher representations, one per
/// hinted layer.
#[derive(Debug, Clone)]
pub struct Regressors {
    layers: Vec<LayerSpec>,
    /// Interleaved weight, bias per layer.
    params: Vec<Tensor>,
}

/// [`Regressors`] registered on a tape.
#[derive(Debug, Clone)]
pub struct BoundRegressors {
    layers: Vec<LayerSpec>,
    vars: Vec<Var>,
}

impl BoundRegressors {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Regressors {
    /// Scaled-uniform weights, zero bias.
    pub fn init(layers: &[LayerSpec], d_student: usize, d_teacher: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d_student as f64).sqrt();
        let mut params = Vec::new();
        for _ in layers {
            let w = (0..d_student * d_teacher).map(|_| rng.random_range(-bound..bound)).collect();
            params.push(Tensor::new(&[d_student, d_teacher], w)?.with_grad());
            params.push(Tensor::zeros(&[d_teacher]).with_grad());
        }
        Ok(Regressors {
            layers: layers.to_vec(),
            params,
        })
    }

    /// Identity maps for equal widths.
    pub fn identity(layers: &[LayerSpec], d: usize) -> Self {
        let mut params = Vec::new();
        for _ in layers {
            let mut w = vec![0.0; d * d];
            (0..d).for_each(|i| w[i * d + i] = 1.0);
            params.push(Tensor::new(&[d, d], w).expect("square").with_grad());
            params.push(Tensor::zeros(&[d]).with_grad());
        }
        Regressors {
            layers: layers.to_vec(),
            params,
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Result<BoundRegressors> {
        let vars = self
            .params
            .iter()
            .map(|t| if trainable { tape.leaf(t) } else { tape.constant_ref(t) })
            .collect::<Result<_>>()?;
        Ok(BoundRegressors {
            layers: self.layers.clone(),
            vars,
        })
    }
}

/// Hint term: per-layer mean squared error between regressed student and
/// teacher representations, summed over `layers`.
pub fn fitnets_aux(
    tape: &mut Tape<'_>,
    student: &ForwardOutput,
    teacher: &ForwardSnapshot,
    layers: &[LayerSpec],
    regressors: &BoundRegressors,
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::Config("hint loss needs at least one layer".into()));
    }
    let mut total: Option<Var> = None;
    for &spec in layers {
        let slot = regressors
            .layers
            .iter()
            .position(|&l| l == spec)
            .ok_or_else(|| Error::Config(format!("no regressor for layer {spec}")))?;
        let s = *student
            .block_outputs
            .get(&spec)
            .ok_or_else(|| Error::Config(format!("student has no output for layer {spec}")))?;
        let t = teacher
            .block_outputs
            .get(&spec)
            .ok_or_else(|| Error::Config(format!("teacher has no output for layer {spec}")))?;
        let proj = tape.affine(s, regressors.vars[2 * slot], regressors.vars[2 * slot + 1])?;
        let (r, c) = t.matrix_dims()?;
        let tv = tape.constant(r, c, t.values().to_vec())?;
        let diff = tape.sub(proj, tv)?;
        let sq = tape.mul(diff, diff)?;
        let mse = tape.mean(sq);
        total = Some(match total {
            Some(acc) => tape.add(acc, mse)?,
            None => mse,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// FitNets objective in LAST or SEL mode, plus BCE.
pub fn fitnets_loss(
    tape: &mut Tape<'_>,
    student: &ForwardOutput,
    teacher: &ForwardSnapshot,
    label: bool,
    mode: FitnetsMode,
    layers_per_block: usize,
    regressors: &BoundRegressors,
) -> Result<LossVars> {
    let layers = mode.layers(layers_per_block);
    Ok(LossVars {
        bce: Some(bce_loss(tape, student.logit, label)),
        aux: Some(fitnets_aux(tape, student, teacher, &layers, regressors)?),
        ..LossVars::default()
    })
}

/// Per-sample objective for every method except the batch-level relational
/// term, which [`rkd_aux`] adds separately.
pub fn sample_loss(
    tape: &mut Tape<'_>,
    config: &DistillConfig,
    layers_per_block: usize,
    student: &ForwardOutput,
    teacher: Option<&ForwardSnapshot>,
    label: bool,
    regressors: Option<&BoundRegressors>,
) -> Result<LossVars> {
    let need_teacher = || teacher.ok_or_else(|| Error::Config(format!("method {} needs a teacher", config.method)));
    let need_reg = || regressors.ok_or_else(|| Error::Config(format!("method {} needs regressors", config.method)));
    match config.method {
        Method::BceOnly | Method::Rkd => Ok(LossVars {
            bce: Some(bce_loss(tape, student.logit, label)),
            ..LossVars::default()
        }),
        Method::Kd => kd_loss(tape, student.logit, need_teacher()?.logit, label, config.tau),
        Method::Mtd => mtd_loss(tape, student, need_teacher()?, label, config),
        Method::MiniLmStar => minilm_star_loss(tape, student, need_teacher()?, label, layers_per_block),
        Method::LastFitnets | Method::SelFitnets => {
            let layers = config.hint_layers(layers_per_block);
            Ok(LossVars {
                bce: Some(bce_loss(tape, student.logit, label)),
                aux: Some(fitnets_aux(tape, student, need_teacher()?, &layers, need_reg()?)?),
                ..LossVars::default()
            })
        }
    }
}
