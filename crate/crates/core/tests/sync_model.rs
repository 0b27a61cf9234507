//! Model forward pass against a straight-line reimplementation.

use mtd_core::model::*;
use mtd_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn tape_mat(tape: &Tape<'_>, v: mtd_core::Var) -> Mat {
    mat(&tape.to_tensor(v))
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

fn softmax(a: &Mat, div: f64) -> Mat {
    a.iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| ((x - m) / div).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        })
        .collect()
}

fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    matmul(x, w)
        .into_iter()
        .map(|r| r.iter().zip(b).map(|(a, c)| a + c).collect())
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn relu(a: &Mat) -> Mat {
    a.iter().map(|r| r.iter().map(|x| x.max(0.0)).collect()).collect()
}

fn layer_norm(a: &Mat, g: &[f64], b: &[f64]) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
            let s = (var + 1e-5).sqrt();
            r.iter().enumerate().map(|(j, x)| (x - mu) / s * g[j] + b[j]).collect()
        })
        .collect()
}

fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!((a.len(), a[0].len()), (b.len(), b[0].len()));
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Multi-head attention by the textbook formula. Returns the output plus
/// per-head attention maps and value-relation maps at `tau`.
#[allow(clippy::too_many_arguments)]
fn attention_oracle(q_seq: &Mat, kv_seq: &Mat, w: [&Mat; 4], b: [&[f64]; 4], heads: usize, tau: f64) -> (Mat, Vec<Mat>, Vec<Mat>) {
    let q = affine(q_seq, w[0], b[0]);
    let k = affine(kv_seq, w[1], b[1]);
    let v = affine(kv_seq, w[2], b[2]);
    let d = q[0].len();
    let dh = d / heads;
    let cols = |m: &Mat, h: usize| -> Mat { m.iter().map(|r| r[h * dh..(h + 1) * dh].to_vec()).collect() };
    let mut merged = vec![Vec::new(); q.len()];
    let (mut cads, mut vrs) = (Vec::new(), Vec::new());
    for h in 0..heads {
        let (qh, kh, vh) = (cols(&q, h), cols(&k, h), cols(&v, h));
        let logits = matmul(&qh, &transpose(&kh));
        let attn = softmax(&logits, (dh as f64).sqrt());
        for (row, o) in merged.iter_mut().zip(matmul(&attn, &vh)) {
            row.extend(o);
        }
        cads.push(softmax(&logits, tau * (dh as f64).sqrt()));
        vrs.push(softmax(&matmul(&vh, &transpose(&vh)), tau * (dh as f64).sqrt()));
    }
    (affine(&merged, w[3], b[3]), cads, vrs)
}

fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

#[test]
fn cross_attention_matches_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (tq, tk, d) = (2, 3, 4);
    for heads in [1, 2] {
        let qs = random_mat(tq, d, &mut rng);
        let ks = random_mat(tk, d, &mut rng);
        let ws: Vec<Mat> = (0..4).map(|_| random_mat(d, d, &mut rng)).collect();
        let bs: Vec<Vec<f64>> = (0..4).map(|_| random_mat(1, d, &mut rng).remove(0)).collect();
        let tau = 3.0;
        let mut tape = Tape::new();
        let q = tape.constant(tq, d, flat(&qs)).unwrap();
        let k = tape.constant(tk, d, flat(&ks)).unwrap();
        let wv: Vec<_> = ws.iter().map(|w| tape.constant(d, d, flat(w)).unwrap()).collect();
        let bv: Vec<_> = bs.iter().map(|b| tape.constant(1, d, b.clone()).unwrap()).collect();
        let weights = AttentionWeights {
            wq: wv[0],
            bq: bv[0],
            wk: wv[1],
            bk: bv[1],
            wv: wv[2],
            bv: bv[2],
            wo: wv[3],
            bo: bv[3],
        };
        let req = TraceRequest {
            block: Block::Fusion,
            layer: 1,
            tau,
        };
        let (out, traces) = cross_attention(&mut tape, q, k, &weights, heads, Some(req)).unwrap();
        let (o, cads, vrs) = attention_oracle(
            &qs,
            &ks,
            [&ws[0], &ws[1], &ws[2], &ws[3]],
            [&bs[0], &bs[1], &bs[2], &bs[3]],
            heads,
            tau,
        );
        assert!(max_diff(&tape_mat(&tape, out), &o) < 1e-10);
        assert_eq!(traces.len(), heads);
        for (t, (c, v)) in traces.iter().zip(cads.iter().zip(&vrs)) {
            assert!(max_diff(&tape_mat(&tape, t.cad), c) < 1e-10);
            assert!(max_diff(&tape_mat(&tape, t.vr), v) < 1e-10);
            assert_eq!(tape.dims(t.cad), (tq, tk));
            assert_eq!(tape.dims(t.vr), (tk, tk));
        }
    }
}

fn toy_config(d_model: usize, n_heads: usize) -> ModelConfig {
    ModelConfig {
        d_model,
        n_heads,
        layers_per_block: 2,
        ffn_mult: 2,
        ..ModelConfig::student()
    }
}

/// Model with every parameter randomized, so biases and gains matter.
fn randomized(cfg: &ModelConfig, seed: u64) -> SyncModel {
    let mut m = SyncModel::init(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in m.params_mut() {
        for v in p.values_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    m
}

fn inputs(cfg: &ModelConfig, tv: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = random_mat(tv, cfg.d_visual_in, &mut rng);
    let a = random_mat(tv * cfg.audio_rate, cfg.d_audio_in, &mut rng);
    (
        Tensor::new(&[tv, cfg.d_visual_in], flat(&v)).unwrap(),
        Tensor::new(&[tv * cfg.audio_rate, cfg.d_audio_in], flat(&a)).unwrap(),
    )
}

struct Oracle<'m> {
    m: &'m SyncModel,
}

impl Oracle<'_> {
    fn w(&self, name: &str) -> Mat {
        mat(self.m.param(&format!("{name}.weight")).unwrap())
    }

    fn b(&self, name: &str, suffix: &str) -> Vec<f64> {
        self.m.param(&format!("{name}.{suffix}")).unwrap().values().to_vec()
    }

    fn lin(&self, x: &Mat, name: &str) -> Mat {
        affine(x, &self.w(name), &self.b(name, "bias"))
    }

    fn ln(&self, x: &Mat, name: &str) -> Mat {
        layer_norm(x, &self.b(name, "gamma"), &self.b(name, "beta"))
    }

    fn front_end(&self, x: &Mat, modality: &str, step: f64) -> Mat {
        let h = self.lin(&relu(&self.lin(x, &format!("frontend.{modality}.0"))), &format!("frontend.{modality}.1"));
        let d = h[0].len();
        h.iter()
            .enumerate()
            .map(|(t, row)| {
                row.iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let angle = t as f64 * step / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                        x * (d as f64).sqrt() + if i % 2 == 0 { angle.sin() } else { angle.cos() }
                    })
                    .collect()
            })
            .collect()
    }

    fn block(&self, mut x: Mat, src: &Mat, block: &str, cad: &mut Vec<Mat>) -> Mat {
        let cfg = self.m.config();
        for l in 1..=cfg.layers_per_block {
            let p = format!("{block}.{l}");
            let q = self.ln(&x, &format!("{p}.ln_q"));
            let kv = self.ln(src, &format!("{p}.ln_kv"));
            let names = ["wq", "wk", "wv", "wo"].map(|w| format!("{p}.attn.{w}"));
            let ws = names.clone().map(|n| self.w(&n));
            let bs = names.map(|n| self.b(&n, "bias"));
            let (a, cads, _) = attention_oracle(
                &q,
                &kv,
                [&ws[0], &ws[1], &ws[2], &ws[3]],
                [&bs[0], &bs[1], &bs[2], &bs[3]],
                cfg.n_heads,
                1.0,
            );
            cad.extend(cads);
            x = add(&x, &a);
            let h = self.ln(&x, &format!("{p}.ln_ffn"));
            let h = self.lin(&relu(&self.lin(&h, &format!("{p}.ffn.0"))), &format!("{p}.ffn.1"));
            x = add(&x, &h);
        }
        x
    }

    fn forward(&self, visual: &Tensor, audio: &Tensor) -> (f64, Vec<Mat>) {
        let cfg = self.m.config();
        let v = self.front_end(&mat(visual), "visual", cfg.audio_rate as f64);
        let a = self.front_end(&mat(audio), "audio", 1.0);
        let mut cad = Vec::new();
        let av = self.block(a.clone(), &v, "av", &mut cad);
        let va = self.block(v, &a, "va", &mut cad);
        let fused = self.block(av, &va, "fusion", &mut cad);
        let pooled: Vec<f64> = (0..fused[0].len())
            .map(|j| fused.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max).tanh())
            .collect();
        let logit = self.lin(&vec![pooled], "classifier")[0][0];
        (logit, cad)
    }
}

#[test]
fn forward_matches_duplicate_implementation() {
    for (seed, heads) in [(1, 1), (2, 2), (3, 4)] {
        let cfg = toy_config(8, heads);
        let m = randomized(&cfg, seed);
        let (v, a) = inputs(&cfg, 5, seed);
        let (want_logit, want_cad) = Oracle { m: &m }.forward(&v, &a);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false).unwrap();
        let out = m.forward(&mut tape, &bound, &v, &a, &ForwardOptions::all(1.0)).unwrap();
        assert!((tape.scalar(out.logit) - want_logit).abs() < 1e-10);
        assert_eq!(out.traces.len(), want_cad.len());
        for (t, c) in out.traces.iter().zip(&want_cad) {
            assert!(max_diff(&tape_mat(&tape, t.cad), c) < 1e-10);
        }
        assert!((m.logit(&v, &a).unwrap() - want_logit).abs() < 1e-10);
    }
}

#[test]
fn trace_shapes_and_counts() {
    for cfg in [ModelConfig::teacher(), ModelConfig::student()] {
        let m = SyncModel::init(&cfg).unwrap();
        let (v, a) = inputs(&cfg, 5, 4);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false).unwrap();
        let out = m.forward(&mut tape, &bound, &v, &a, &ForwardOptions::all(25.0)).unwrap();
        assert_eq!(out.traces.len(), 3 * cfg.layers_per_block * cfg.n_heads);
        for t in &out.traces {
            let (cad, vr) = match t.block {
                Block::Av => ((20, 5), (5, 5)),
                Block::Va => ((5, 20), (20, 20)),
                Block::Fusion => ((20, 5), (5, 5)),
            };
            assert_eq!(tape.dims(t.cad), cad, "{:?}", t.spec());
            assert_eq!(tape.dims(t.vr), vr, "{:?}", t.spec());
            assert_eq!(t.tau_used, 25.0);
            for r in 0..cad.0 {
                let s: f64 = tape.value(t.cad)[r * cad.1..(r + 1) * cad.1].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn selected_layers_only_are_traced() {
    let cfg = ModelConfig::student();
    let m = SyncModel::init(&cfg).unwrap();
    let (v, a) = inputs(&cfg, 5, 5);
    let sel = [LayerSpec::new(Block::Fusion, 3), LayerSpec::new(Block::Va, 1)];
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, false).unwrap();
    let out = m.forward(&mut tape, &bound, &v, &a, &ForwardOptions::layers(1.0, &sel)).unwrap();
    assert_eq!(out.traces.len(), 2 * cfg.n_heads);
    assert!(out.traces.iter().all(|t| sel.contains(&t.spec())));
    let bad = [LayerSpec::new(Block::Av, 9)];
    assert!(m.forward(&mut tape, &bound, &v, &a, &ForwardOptions::layers(1.0, &bad)).is_err());
}

#[test]
fn value_relation_logits_are_symmetric() {
    let cfg = ModelConfig::student();
    let m = randomized(&cfg, 8);
    let (v, a) = inputs(&cfg, 5, 8);
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, false).unwrap();
    let out = m.forward(&mut tape, &bound, &v, &a, &ForwardOptions::all(5.0)).unwrap();
    for t in &out.traces {
        let l = tape_mat(&tape, t.vr_logits);
        assert!(max_diff(&l, &transpose(&l)) < 1e-12);
    }
}

#[test]
fn mismatched_inputs_are_shape_errors() {
    let cfg = ModelConfig::student();
    let m = SyncModel::init(&cfg).unwrap();
    let (v, _) = inputs(&cfg, 5, 1);
    let (_, a6) = inputs(&cfg, 6, 1);
    let err = m.logit(&v, &a6).unwrap_err();
    assert!(matches!(err, mtd_core::Error::Shape { .. }), "{err}");
    let wrong = Tensor::zeros(&[5, cfg.d_visual_in + 1]);
    let (_, a) = inputs(&cfg, 5, 1);
    assert!(matches!(m.logit(&wrong, &a).unwrap_err(), mtd_core::Error::Shape { .. }));
}

#[test]
fn single_attention_layer_has_80_parameters() {
    let cfg = ModelConfig {
        d_model: 4,
        n_heads: 1,
        ..ModelConfig::student()
    };
    let m = SyncModel::init(&cfg).unwrap();
    assert_eq!(m.param_count(ParamScope::Prefix("fusion.2.attn.")), 80);
}

#[test]
fn frame_order_changes_the_logit() {
    let cfg = ModelConfig::student();
    let m = randomized(&cfg, 3);
    let (v, a) = inputs(&cfg, 5, 3);
    let mut rows: Vec<&[f64]> = (0..5).map(|r| v.row(r)).collect();
    rows.reverse();
    let reversed = Tensor::from_rows(&rows);
    assert!((m.logit(&v, &a).unwrap() - m.logit(&reversed, &a).unwrap()).abs() > 1e-6);
}
