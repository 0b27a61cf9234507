//! Audio-visual synchronizer: per-frame front-ends, three stacks of
//! cross-modal Transformer layers (AV, VA, Fusion), max-pool over time, tanh,
//! and a linear classifier producing one sync logit.
//!
//! Every cross-attention layer can record its attention behaviour
//! ([`AttentionTrace`]): the cross-attention distribution over keys and the
//! value-relation distribution among values, both re-evaluated at a trace
//! temperature. The forward signal itself always uses temperature 1.

mod config;
mod forward;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{Block, LayerSpec, ModelConfig};
pub use forward::{
    cross_attention, AttentionTrace, AttentionWeights, ForwardOptions, ForwardOutput,
    ForwardSnapshot, TraceRequest, TraceSelection, TraceSnapshot,
};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which parameters [`SyncModel::param_count`] includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScope<'s> {
    All,
    /// Everything except the audio/visual front-ends.
    BackendOnly,
    /// Parameters whose name starts with the prefix.
    Prefix(&'s str),
}

impl ParamScope<'_> {
    fn contains(&self, name: &str) -> bool {
        match self {
            ParamScope::All => true,
            ParamScope::BackendOnly => !name.starts_with("frontend."),
            ParamScope::Prefix(p) => name.starts_with(p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamKind {
    Weight { fan_in: usize },
    Bias,
    Gamma,
    Beta,
}

/// Name, shape, and initializer of every parameter implied by a config, in
/// name order.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    let d = cfg.d_model;
    let mut specs = Vec::new();
    let linear = |specs: &mut Vec<_>, name: String, i: usize, o: usize| {
        specs.push((format!("{name}.weight"), vec![i, o], ParamKind::Weight { fan_in: i }));
        specs.push((format!("{name}.bias"), vec![o], ParamKind::Bias));
    };
    let norm = |specs: &mut Vec<_>, name: String| {
        specs.push((format!("{name}.gamma"), vec![d], ParamKind::Gamma));
        specs.push((format!("{name}.beta"), vec![d], ParamKind::Beta));
    };
    for (modality, d_in) in [("visual", cfg.d_visual_in), ("audio", cfg.d_audio_in)] {
        linear(&mut specs, format!("frontend.{modality}.0"), d_in, d);
        linear(&mut specs, format!("frontend.{modality}.1"), d, d);
    }
    for block in Block::ALL {
        for l in 1..=cfg.layers_per_block {
            let p = format!("{block}.{l}");
            norm(&mut specs, format!("{p}.ln_q"));
            norm(&mut specs, format!("{p}.ln_kv"));
            norm(&mut specs, format!("{p}.ln_ffn"));
            for w in ["wq", "wk", "wv", "wo"] {
                linear(&mut specs, format!("{p}.attn.{w}"), d, d);
            }
            linear(&mut specs, format!("{p}.ffn.0"), d, cfg.ffn_mult * d);
            linear(&mut specs, format!("{p}.ffn.1"), cfg.ffn_mult * d, d);
        }
    }
    linear(&mut specs, "classifier".into(), d, 1);
    specs.sort_by(|a, b| a.0.cmp(&b.0));
    specs
}

/// Parameter count implied by a config, without allocating the model.
pub fn param_count_for_config(cfg: &ModelConfig, scope: ParamScope<'_>) -> usize {
    param_specs(cfg)
        .iter()
        .filter(|(name, _, _)| scope.contains(name))
        .map(|(_, shape, _)| shape.iter().product::<usize>())
        .sum()
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIdx {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerIdx {
    pub ln_q: NormIdx,
    pub ln_kv: NormIdx,
    pub ln_ffn: NormIdx,
    pub wq: LinearIdx,
    pub wk: LinearIdx,
    pub wv: LinearIdx,
    pub wo: LinearIdx,
    pub ffn_in: LinearIdx,
    pub ffn_out: LinearIdx,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub visual_fe: [LinearIdx; 2],
    pub audio_fe: [LinearIdx; 2],
    pub blocks: [Vec<LayerIdx>; 3],
    pub classifier: LinearIdx,
}

impl Layout {
    fn build(names: &[String], cfg: &ModelConfig) -> Layout {
        let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let lin = |p: &str| LinearIdx {
            w: index[format!("{p}.weight").as_str()],
            b: index[format!("{p}.bias").as_str()],
        };
        let norm = |p: &str| NormIdx {
            gamma: index[format!("{p}.gamma").as_str()],
            beta: index[format!("{p}.beta").as_str()],
        };
        let block = |b: Block| -> Vec<LayerIdx> {
            (1..=cfg.layers_per_block)
                .map(|l| {
                    let p = format!("{b}.{l}");
                    LayerIdx {
                        ln_q: norm(&format!("{p}.ln_q")),
                        ln_kv: norm(&format!("{p}.ln_kv")),
                        ln_ffn: norm(&format!("{p}.ln_ffn")),
                        wq: lin(&format!("{p}.attn.wq")),
                        wk: lin(&format!("{p}.attn.wk")),
                        wv: lin(&format!("{p}.attn.wv")),
                        wo: lin(&format!("{p}.attn.wo")),
                        ffn_in: lin(&format!("{p}.ffn.0")),
                        ffn_out: lin(&format!("{p}.ffn.1")),
                    }
                })
                .collect()
        };
        Layout {
            visual_fe: [lin("frontend.visual.0"), lin("frontend.visual.1")],
            audio_fe: [lin("frontend.audio.0"), lin("frontend.audio.1")],
            blocks: [block(Block::Av), block(Block::Va), block(Block::Fusion)],
            classifier: lin("classifier"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyncModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

/// Parameters of one model registered on a tape, in name order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub(crate) fn get(&self, i: usize) -> Var {
        self.vars[i]
    }
}

impl SyncModel {
    /// Scaled-uniform weights (bound `1/sqrt(fan_in)`), zero biases, unit
    /// layer-norm gains. Deterministic in `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<SyncModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, kind) in param_specs(config) {
            let n: usize = shape.iter().product();
            let values = match kind {
                ParamKind::Weight { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                ParamKind::Bias | ParamKind::Beta => vec![0.0; n],
                ParamKind::Gamma => vec![1.0; n],
            };
            names.push(name);
            params.push(Tensor::new(&shape, values)?.with_grad());
        }
        let layout = Layout::build(&names, config);
        Ok(SyncModel {
            config: config.clone(),
            names,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    /// Replaces one parameter's values; the shape must match.
    pub fn set_param(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        let t = &mut self.params[i];
        if t.len() != values.len() {
            return Err(Error::shape("set_param", t.shape(), &[values.len()]));
        }
        t.values_mut().copy_from_slice(values);
        Ok(())
    }

    /// Copies every parameter from `other`, which must share this model's
    /// configuration apart from the seed.
    pub fn copy_params_from(&mut self, other: &SyncModel) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Config("parameter sets differ".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("copy_params_from", dst.shape(), src.shape()));
            }
            dst.values_mut().copy_from_slice(src.values());
        }
        Ok(())
    }

    pub fn param_count(&self, scope: ParamScope<'_>) -> usize {
        self.names
            .iter()
            .zip(&self.params)
            .filter(|(n, _)| scope.contains(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Registers all parameters on `tape`. Frozen models contribute constants,
    /// so no gradient can reach them.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Result<BoundParams> {
        let vars = self
            .params
            .iter()
            .map(|t| if trainable { tape.leaf(t) } else { tape.constant_ref(t) })
            .collect::<Result<_>>()?;
        Ok(BoundParams { vars })
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Forward pass with all traces at `tau_trace` on a fresh frozen tape,
    /// returned as detached values.
    pub fn forward_snapshot(&self, visual: &Tensor, audio: &Tensor, opts: &ForwardOptions) -> Result<ForwardSnapshot> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let out = self.forward(&mut tape, &bound, visual, audio, opts)?;
        Ok(out.snapshot(&tape))
    }

    /// Sync logit only; skips all trace computation.
    pub fn logit(&self, visual: &Tensor, audio: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let out = self.forward(&mut tape, &bound, visual, audio, &ForwardOptions::untraced())?;
        Ok(tape.scalar(out.logit))
    }
}

/// Forward pass recording every trace at `tau_trace`.
pub fn model_forward<'a>(
    model: &'a SyncModel,
    tape: &mut Tape<'a>,
    bound: &BoundParams,
    visual: &'a Tensor,
    audio: &'a Tensor,
    tau_trace: f64,
) -> Result<ForwardOutput> {
    model.forward(tape, bound, visual, audio, &ForwardOptions::all(tau_trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let a = SyncModel::init(&ModelConfig::student()).unwrap();
        let b = SyncModel::init(&ModelConfig::student()).unwrap();
        assert_eq!(a.names(), b.names());
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x.values(), y.values());
        }
        let c = SyncModel::init(&ModelConfig {
            seed: 99,
            ..ModelConfig::student()
        })
        .unwrap();
        assert_ne!(a.param("av.1.attn.wq.weight"), c.param("av.1.attn.wq.weight"));
    }

    #[test]
    fn attention_projections_are_square() {
        let m = SyncModel::init(&ModelConfig::student()).unwrap();
        for (name, t) in m.names().iter().zip(m.params()) {
            if name.contains(".attn.") && name.ends_with(".weight") {
                assert_eq!(t.shape(), &[24, 24], "{name}");
            }
        }
    }

    #[test]
    fn names_are_unique_and_sorted() {
        let m = SyncModel::init(&ModelConfig::teacher()).unwrap();
        assert!(m.names().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn single_attention_layer_count() {
        let cfg = ModelConfig {
            d_model: 4,
            n_heads: 1,
            ..ModelConfig::student()
        };
        let m = SyncModel::init(&cfg).unwrap();
        assert_eq!(m.param_count(ParamScope::Prefix("av.1.attn.")), 4 * (16 + 4));
        assert_eq!(m.param_count(ParamScope::Prefix("no.such.prefix")), 0);
        assert_eq!(
            m.param_count(ParamScope::All),
            param_count_for_config(&cfg, ParamScope::All)
        );
    }

    #[test]
    fn full_profile_backend_ratio() {
        let t = param_count_for_config(&ModelConfig::full_teacher(), ParamScope::BackendOnly);
        let s = param_count_for_config(&ModelConfig::full_student(), ParamScope::BackendOnly);
        let ratio = s as f64 / t as f64;
        assert!((0.145..=0.20).contains(&ratio), "{ratio}");
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = ModelConfig {
            d_model: 0,
            ..ModelConfig::student()
        };
        assert!(matches!(SyncModel::init(&cfg), Err(Error::Config(_))));
    }
}
