use std::collections::BTreeMap;

use super::{BoundParams, Block, LayerIdx, LayerSpec, LinearIdx, NormIdx, SyncModel};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which layers record attention traces during a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceSelection {
    None,
    All,
    Layers(Vec<LayerSpec>),
}

impl TraceSelection {
    fn wants(&self, spec: LayerSpec) -> bool {
        match self {
            TraceSelection::None => false,
            TraceSelection::All => true,
            TraceSelection::Layers(l) => l.contains(&spec),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOptions {
    pub tau_trace: f64,
    pub traces: TraceSelection,
}

impl ForwardOptions {
    pub fn all(tau_trace: f64) -> Self {
        ForwardOptions {
            tau_trace,
            traces: TraceSelection::All,
        }
    }

    pub fn layers(tau_trace: f64, layers: &[LayerSpec]) -> Self {
        ForwardOptions {
            tau_trace,
            traces: TraceSelection::Layers(layers.to_vec()),
        }
    }

    pub fn untraced() -> Self {
        ForwardOptions {
            tau_trace: 1.0,
            traces: TraceSelection::None,
        }
    }
}

/// Attention behaviour of one head of one layer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionTrace {
    pub block: Block,
    /// 1-based.
    pub layer: usize,
    /// 1-based.
    pub head: usize,
    /// `softmax(Q Kᵀ / (τ √d_head))`, `Tq×Tk`.
    pub cad: Var,
    /// `softmax(V Vᵀ / (τ √d_head))`, `Tk×Tk`.
    pub vr: Var,
    /// The unnormalized `V Vᵀ` behind `vr`.
    pub vr_logits: Var,
    pub tau_used: f64,
}

impl AttentionTrace {
    pub fn spec(&self) -> LayerSpec {
        LayerSpec::new(self.block, self.layer)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Pre-sigmoid sync score, `1×1`.
    pub logit: Var,
    pub traces: Vec<AttentionTrace>,
    /// Output representation of every layer.
    pub block_outputs: BTreeMap<LayerSpec, Var>,
    /// Max-pooled, tanh-squashed Fusion output, `1×d_model`.
    pub pooled: Var,
}

impl ForwardOutput {
    /// Traces of one layer ordered by head.
    pub fn layer_traces(&self, spec: LayerSpec) -> Vec<&AttentionTrace> {
        self.traces.iter().filter(|t| t.spec() == spec).collect()
    }

    pub fn snapshot(&self, tape: &Tape<'_>) -> ForwardSnapshot {
        ForwardSnapshot {
            logit: tape.scalar(self.logit),
            traces: self
                .traces
                .iter()
                .map(|t| TraceSnapshot {
                    block: t.block,
                    layer: t.layer,
                    head: t.head,
                    cad: tape.to_tensor(t.cad),
                    vr: tape.to_tensor(t.vr),
                    tau_used: t.tau_used,
                })
                .collect(),
            block_outputs: self
                .block_outputs
                .iter()
                .map(|(k, v)| (*k, tape.to_tensor(*v)))
                .collect(),
            pooled: tape.to_tensor(self.pooled),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSnapshot {
    pub block: Block,
    pub layer: usize,
    pub head: usize,
    pub cad: Tensor,
    pub vr: Tensor,
    pub tau_used: f64,
}

impl TraceSnapshot {
    pub fn spec(&self) -> LayerSpec {
        LayerSpec::new(self.block, self.layer)
    }
}

/// Detached forward values; the teacher side of every distillation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardSnapshot {
    pub logit: f64,
    pub traces: Vec<TraceSnapshot>,
    pub block_outputs: BTreeMap<LayerSpec, Tensor>,
    pub pooled: Tensor,
}

impl ForwardSnapshot {
    pub fn layer_traces(&self, spec: LayerSpec) -> Vec<&TraceSnapshot> {
        self.traces.iter().filter(|t| t.spec() == spec).collect()
    }
}

/// Projection weights of one cross-attention layer, already on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Traces to record for one layer; `None` disables tracing.
#[derive(Debug, Clone, Copy)]
pub struct TraceRequest {
    pub block: Block,
    pub layer: usize,
    pub tau: f64,
}

/// Multi-head cross-attention of `query_seq` over `kv_seq` (both `·×d`).
/// Residual connections and normalization are the caller's job.
pub fn cross_attention(
    tape: &mut Tape<'_>,
    query_seq: Var,
    kv_seq: Var,
    weights: &AttentionWeights,
    n_heads: usize,
    trace: Option<TraceRequest>,
) -> Result<(Var, Vec<AttentionTrace>)> {
    let (_, dq) = tape.dims(query_seq);
    let (_, dk) = tape.dims(kv_seq);
    if dq != dk {
        return Err(Error::shape("cross_attention", &[dq], &[dk]));
    }
    if n_heads == 0 || dq % n_heads != 0 {
        return Err(Error::Config(format!("width {dq} not divisible into {n_heads} heads")));
    }
    let dh = dq / n_heads;
    let scale = (dh as f64).sqrt();
    let q = tape.affine(query_seq, weights.wq, weights.bq)?;
    let k = tape.affine(kv_seq, weights.wk, weights.bk)?;
    let v = tape.affine(kv_seq, weights.wv, weights.bv)?;
    let mut heads = Vec::with_capacity(n_heads);
    let mut traces = Vec::new();
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let attn = tape.softmax_rows(logits, 1.0, scale)?;
        heads.push(tape.matmul(attn, vh)?);
        if let Some(req) = trace {
            let cad = if req.tau == 1.0 {
                attn
            } else {
                tape.softmax_rows(logits, req.tau, scale)?
            };
            let vt = tape.transpose(vh)?;
            let vr_logits = tape.matmul(vh, vt)?;
            let vr = tape.softmax_rows(vr_logits, req.tau, scale)?;
            traces.push(AttentionTrace {
                block: req.block,
                layer: req.layer,
                head: h + 1,
                cad,
                vr,
                vr_logits,
                tau_used: req.tau,
            });
        }
    }
    let merged = if n_heads == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let out = tape.affine(merged, weights.wo, weights.bo)?;
    Ok((out, traces))
}

/// Sinusoidal encoding of arbitrary (possibly fractional) positions.
pub(crate) fn positional_encoding(positions: impl Iterator<Item = f64>, d: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for pos in positions {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos * freq;
            out.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

impl SyncModel {
    fn lin(&self, tape: &mut Tape<'_>, p: &BoundParams, x: Var, idx: LinearIdx) -> Result<Var> {
        tape.affine(x, p.get(idx.w), p.get(idx.b))
    }

    fn norm(&self, tape: &mut Tape<'_>, p: &BoundParams, x: Var, idx: NormIdx) -> Result<Var> {
        tape.layer_norm(x, p.get(idx.gamma), p.get(idx.beta))
    }

    /// Two-layer per-frame front-end, scaled by `sqrt(d)`, plus positional
    /// encoding. Positions are
    /// in audio-frame units so that visual frame `t` and audio frame
    /// `audio_rate·t` share an encoding.
    fn front_end(
        &self,
        tape: &mut Tape<'_>,
        p: &BoundParams,
        x: Var,
        layers: &[LinearIdx; 2],
        frame_step: f64,
    ) -> Result<Var> {
        let h = self.lin(tape, p, x, layers[0])?;
        let h = tape.relu(h);
        let h = self.lin(tape, p, h, layers[1])?;
        let (t, d) = tape.dims(h);
        let h = tape.scale(h, (d as f64).sqrt());
        let pe = positional_encoding((0..t).map(|i| i as f64 * frame_step), d);
        let pe = tape.constant(t, d, pe)?;
        tape.add(h, pe)
    }

    /// One pre-norm cross-attention layer with feed-forward sublayer.
    fn layer_forward(
        &self,
        tape: &mut Tape<'_>,
        p: &BoundParams,
        x: Var,
        src: Var,
        idx: &LayerIdx,
        trace: Option<TraceRequest>,
    ) -> Result<(Var, Vec<AttentionTrace>)> {
        let q_in = self.norm(tape, p, x, idx.ln_q)?;
        let kv_in = self.norm(tape, p, src, idx.ln_kv)?;
        let weights = AttentionWeights {
            wq: p.get(idx.wq.w),
            bq: p.get(idx.wq.b),
            wk: p.get(idx.wk.w),
            bk: p.get(idx.wk.b),
            wv: p.get(idx.wv.w),
            bv: p.get(idx.wv.b),
            wo: p.get(idx.wo.w),
            bo: p.get(idx.wo.b),
        };
        let (attn, traces) = cross_attention(tape, q_in, kv_in, &weights, self.config.n_heads, trace)?;
        let x = tape.add(x, attn)?;
        let h = self.norm(tape, p, x, idx.ln_ffn)?;
        let h = self.lin(tape, p, h, idx.ffn_in)?;
        let h = tape.relu(h);
        let h = self.lin(tape, p, h, idx.ffn_out)?;
        Ok((tape.add(x, h)?, traces))
    }

    fn run_block(
        &self,
        tape: &mut Tape<'_>,
        p: &BoundParams,
        block: Block,
        mut x: Var,
        src: Var,
        opts: &ForwardOptions,
        out: &mut ForwardOutput,
    ) -> Result<Var> {
        for (l, idx) in self.layout().blocks[block.index()].iter().enumerate() {
            let spec = LayerSpec::new(block, l + 1);
            let trace = opts.traces.wants(spec).then_some(TraceRequest {
                block,
                layer: l + 1,
                tau: opts.tau_trace,
            });
            let (next, traces) = self.layer_forward(tape, p, x, src, idx, trace)?;
            out.traces.extend(traces);
            out.block_outputs.insert(spec, next);
            x = next;
        }
        Ok(x)
    }

    /// Full forward pass. `visual` is `Tv×d_visual_in`; `audio` must have
    /// exactly `audio_rate·Tv` rows of width `d_audio_in`.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        bound: &BoundParams,
        visual: &'a Tensor,
        audio: &'a Tensor,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let (tv, dv) = visual.matrix_dims()?;
        let (ta, da) = audio.matrix_dims()?;
        if dv != cfg.d_visual_in {
            return Err(Error::shape("model_forward(visual width)", &[cfg.d_visual_in], &[dv]));
        }
        if da != cfg.d_audio_in {
            return Err(Error::shape("model_forward(audio width)", &[cfg.d_audio_in], &[da]));
        }
        if ta != cfg.audio_rate * tv {
            return Err(Error::shape("model_forward(audio frames)", &[cfg.audio_rate * tv], &[ta]));
        }
        if !(opts.tau_trace > 0.0) {
            return Err(Error::Usage(format!("trace temperature must be positive, got {}", opts.tau_trace)));
        }
        if let TraceSelection::Layers(layers) = &opts.traces {
            for l in layers {
                l.validate(cfg.layers_per_block)?;
            }
        }
        let layout = self.layout();
        let v_in = tape.constant_ref(visual)?;
        let a_in = tape.constant_ref(audio)?;
        let v = self.front_end(tape, bound, v_in, &layout.visual_fe, cfg.audio_rate as f64)?;
        let a = self.front_end(tape, bound, a_in, &layout.audio_fe, 1.0)?;

        let placeholder = v;
        let mut out = ForwardOutput {
            logit: placeholder,
            traces: Vec::new(),
            block_outputs: BTreeMap::new(),
            pooled: placeholder,
        };
        let av = self.run_block(tape, bound, Block::Av, a, v, opts, &mut out)?;
        let va = self.run_block(tape, bound, Block::Va, v, a, opts, &mut out)?;
        let fused = self.run_block(tape, bound, Block::Fusion, av, va, opts, &mut out)?;
        let pooled = tape.max_pool_rows(fused);
        let pooled = tape.tanh(pooled);
        out.pooled = pooled;
        out.logit = self.lin(tape, bound, pooled, layout.classifier)?;
        Ok(out)
    }
}
