//! Deterministic synthetic audio-visual corpus.
//!
//! A latent trajectory `z_t` (a tanh-squashed AR(1) walk) drives both
//! modalities through fixed random mixing matrices: visual frame `t` is
//! `A·z_t + η`, audio frame `u` is `B·z(u / audio_rate) + η'` with the latent
//! linearly interpolated between visual frames. Synchronisation is therefore
//! recoverable, while neighbouring offsets stay similar.
//!
//! All stored values are rounded to `f32` at generation time so that files
//! round-trip bit-exactly.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::kv;
use crate::tensor::Tensor;

pub const CORPUS_MAGIC: &[u8; 8] = b"AVSYNC01";
pub const CORPUS_VERSION: u32 = 1;

/// Visual frames per model input.
pub const VISUAL_WINDOW: usize = 5;
/// Largest misalignment, in visual frames, used for negatives and retrieval.
pub const MAX_OFFSET: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub frames_per_utterance: usize,
    pub latent_dim: usize,
    pub d_visual_in: usize,
    pub d_audio_in: usize,
    pub audio_rate: usize,
    pub noise_sigma: f64,
    /// AR(1) coefficient of the pre-squash latent walk.
    pub walk_momentum: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_train: 200,
            n_val: 50,
            n_test: 50,
            frames_per_utterance: 64,
            latent_dim: 8,
            d_visual_in: 16,
            d_audio_in: 12,
            audio_rate: 4,
            noise_sigma: 0.1,
            walk_momentum: 0.9,
            seed: 1234,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let min_frames = 2 * MAX_OFFSET + VISUAL_WINDOW + 1;
        if self.frames_per_utterance < min_frames {
            return Err(Error::Config(format!(
                "corpus.frames_per_utterance must be ≥ {min_frames}, got {}",
                self.frames_per_utterance
            )));
        }
        for (name, v) in [
            ("latent_dim", self.latent_dim),
            ("d_visual_in", self.d_visual_in),
            ("d_audio_in", self.d_audio_in),
            ("audio_rate", self.audio_rate),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("corpus.{name} must be positive")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("corpus.noise_sigma must be ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.walk_momentum) {
            return Err(Error::Config("corpus.walk_momentum must be in [0, 1)".into()));
        }
        Ok(())
    }

    fn header_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("corpus.n_train", self.n_train.to_string()),
            ("corpus.n_val", self.n_val.to_string()),
            ("corpus.n_test", self.n_test.to_string()),
            ("corpus.frames_per_utterance", self.frames_per_utterance.to_string()),
            ("corpus.latent_dim", self.latent_dim.to_string()),
            ("corpus.d_visual_in", self.d_visual_in.to_string()),
            ("corpus.d_audio_in", self.d_audio_in.to_string()),
            ("corpus.audio_rate", self.audio_rate.to_string()),
            ("corpus.noise_sigma", format!("{:?}", self.noise_sigma)),
            ("corpus.walk_momentum", format!("{:?}", self.walk_momentum)),
            ("corpus.seed", self.seed.to_string()),
        ]
    }

    fn from_header(m: &kv::Map) -> Result<Self> {
        Ok(CorpusConfig {
            n_train: m.get("corpus.n_train")?,
            n_val: m.get("corpus.n_val")?,
            n_test: m.get("corpus.n_test")?,
            frames_per_utterance: m.get("corpus.frames_per_utterance")?,
            latent_dim: m.get("corpus.latent_dim")?,
            d_visual_in: m.get("corpus.d_visual_in")?,
            d_audio_in: m.get("corpus.d_audio_in")?,
            audio_rate: m.get("corpus.audio_rate")?,
            noise_sigma: m.get("corpus.noise_sigma")?,
            walk_momentum: m.get("corpus.walk_momentum")?,
            seed: m.get("corpus.seed")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T×d_visual_in`.
    pub visual: Tensor,
    /// `(audio_rate·T)×d_audio_in`.
    pub audio: Tensor,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.visual.rows()
    }

    fn audio_rate(&self) -> usize {
        self.audio.rows() / self.visual.rows()
    }

    /// Visual window at `start` paired with the audio window displaced by
    /// `offset` visual frames.
    pub fn pair(&self, start: usize, offset: i32, window: usize) -> Result<AVPair> {
        let audio_start = start as i64 + offset as i64;
        if audio_start < 0 || start + window > self.frames() || audio_start as usize + window > self.frames() {
            return Err(Error::Usage(format!(
                "window at {start} with offset {offset} does not fit utterance {} of {} frames",
                self.id,
                self.frames()
            )));
        }
        let rate = self.audio_rate();
        Ok(AVPair {
            visual: self.visual.slice_rows(start, window)?,
            audio: self.audio.slice_rows(audio_start as usize * rate, window * rate)?,
            offset,
            label: offset == 0,
            start,
        })
    }
}

/// A visual window, a candidate audio window, and their misalignment.
#[derive(Debug, Clone, PartialEq)]
pub struct AVPair {
    pub visual: Tensor,
    pub audio: Tensor,
    /// Visual frames by which the audio window is displaced.
    pub offset: i32,
    /// In sync iff `offset == 0`.
    pub label: bool,
    pub start: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    /// `d_visual_in×latent_dim`.
    pub visual_mixing: Tensor,
    /// `d_audio_in×latent_dim`.
    pub audio_mixing: Tensor,
    pub train: Vec<Utterance>,
    pub val: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Result<Tensor> {
    let mut v: Vec<f64> = (0..rows * cols)
        .map(|_| std * normal(rng))
        .collect();
    binio::round_to_f32(&mut v);
    Tensor::new(&[rows, cols], v)
}

fn mix_frame(mixing: &Tensor, z: &[f64], noise: f64, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    let l = z.len();
    for r in 0..mixing.rows() {
        let row = &mixing.values()[r * l..(r + 1) * l];
        let clean: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
        let eta: f64 = if noise > 0.0 {
            noise * normal(rng)
        } else {
            0.0
        };
        out.push(clean + eta);
    }
}

fn generate_utterance(cfg: &CorpusConfig, id: String, a: &Tensor, b: &Tensor, rng: &mut ChaCha8Rng) -> Result<Utterance> {
    let t_len = cfg.frames_per_utterance;
    let l = cfg.latent_dim;
    let rho = cfg.walk_momentum;
    let innov = (1.0 - rho * rho).sqrt() * 1.5;
    // One extra latent so the last visual frame's audio tail can interpolate.
    let mut h: Vec<f64> = (0..l).map(|_| 1.5 * normal(rng)).collect();
    let mut latents = Vec::with_capacity((t_len + 1) * l);
    for _ in 0..=t_len {
        latents.extend(h.iter().map(|x| x.tanh()));
        for x in h.iter_mut() {
            *x = rho * *x + innov * normal(rng);
        }
    }
    let mut visual = Vec::with_capacity(t_len * cfg.d_visual_in);
    for t in 0..t_len {
        mix_frame(a, &latents[t * l..(t + 1) * l], cfg.noise_sigma, rng, &mut visual);
    }
    let rate = cfg.audio_rate;
    let mut audio = Vec::with_capacity(t_len * rate * cfg.d_audio_in);
    let mut z = vec![0.0; l];
    for u in 0..t_len * rate {
        let (i, f) = (u / rate, (u % rate) as f64 / rate as f64);
        for k in 0..l {
            z[k] = (1.0 - f) * latents[i * l + k] + f * latents[(i + 1) * l + k];
        }
        mix_frame(b, &z, cfg.noise_sigma, rng, &mut audio);
    }
    binio::round_to_f32(&mut visual);
    binio::round_to_f32(&mut audio);
    Ok(Utterance {
        id,
        visual: Tensor::new(&[t_len, cfg.d_visual_in], visual)?,
        audio: Tensor::new(&[t_len * rate, cfg.d_audio_in], audio)?,
    })
}

/// Generates all three splits. Each split draws from its own ChaCha stream,
/// so split contents do not depend on the sizes of the other splits.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mix_std = 1.0 / (config.latent_dim as f64).sqrt();
    let a = gaussian_matrix(&mut rng, config.d_visual_in, config.latent_dim, mix_std)?;
    let b = gaussian_matrix(&mut rng, config.d_audio_in, config.latent_dim, mix_std)?;
    let mut splits = Vec::new();
    for (stream, (split, n)) in [
        (Split::Train, config.n_train),
        (Split::Val, config.n_val),
        (Split::Test, config.n_test),
    ]
    .into_iter()
    .enumerate()
    {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stream as u64 + 1);
        let utts = (0..n)
            .map(|i| generate_utterance(config, format!("{}-{i:05}", split.name()), &a, &b, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        splits.push(utts);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Corpus {
        config: config.clone(),
        visual_mixing: a,
        audio_mixing: b,
        train,
        val,
        test,
    })
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = self.config.header_pairs();
        header.insert(0, ("format.version", CORPUS_VERSION.to_string()));
        for s in Split::ALL {
            let key = match s {
                Split::Train => "splits.train",
                Split::Val => "splits.val",
                Split::Test => "splits.test",
            };
            header.push((key, self.split(s).len().to_string()));
        }
        let mut w = Writer::new();
        w.bytes(CORPUS_MAGIC);
        w.prefixed(kv::render(header.iter().map(|(k, v)| (*k, v.clone()))).as_bytes());
        w.array(&self.visual_mixing);
        w.array(&self.audio_mixing);
        for s in Split::ALL {
            for u in self.split(s) {
                w.prefixed(u.id.as_bytes());
                w.array(&u.visual);
                w.array(&u.audio);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Corpus> {
        let mut r = Reader::new(bytes);
        binio::check_magic(&mut r, CORPUS_MAGIC)?;
        let header_at = r.offset();
        let header = kv::Map::parse(r.utf8("header")?).map_err(|e| Error::Format {
            offset: header_at,
            detail: e.to_string(),
        })?;
        let to_format = |e: Error| Error::Format {
            offset: header_at,
            detail: e.to_string(),
        };
        let version: u32 = header.get("format.version").map_err(to_format)?;
        if version != CORPUS_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version.to_string(),
                expected: CORPUS_VERSION.to_string(),
            });
        }
        let config = CorpusConfig::from_header(&header).map_err(to_format)?;
        let visual_mixing = r.array("visual mixing")?;
        let audio_mixing = r.array("audio mixing")?;
        let mut splits = Vec::new();
        for key in ["splits.train", "splits.val", "splits.test"] {
            let n: usize = header.get(key).map_err(to_format)?;
            let mut utts = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let at = r.offset();
                let id = r.utf8("utterance id")?.to_string();
                let visual = r.array("visual")?;
                let audio = r.array("audio")?;
                let (tv, ta) = (visual.rows(), audio.rows());
                if tv == 0 || ta != tv * config.audio_rate {
                    return Err(Error::Format {
                        offset: at,
                        detail: format!("utterance {id}: {ta} audio frames for {tv} visual frames"),
                    });
                }
                utts.push(Utterance { id, visual, audio });
            }
            splits.push(utts);
        }
        if !r.at_end() {
            return Err(r.err("trailing bytes after last utterance"));
        }
        let test = splits.pop().expect("three splits");
        let val = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        Ok(Corpus {
            config,
            visual_mixing,
            audio_mixing,
            train,
            val,
            test,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Corpus> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Corpus::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized corpus.
    pub fn digest(&self) -> String {
        binio::digest(&self.to_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingOptions {
    pub window: usize,
    pub max_offset: usize,
    /// Also exclude offsets ±1 from negatives.
    pub exclude_near_zero: bool,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        SamplingOptions {
            window: VISUAL_WINDOW,
            max_offset: MAX_OFFSET,
            exclude_near_zero: false,
        }
    }
}

impl SamplingOptions {
    fn negative_offsets(&self) -> Vec<i32> {
        let m = self.max_offset as i32;
        let min_abs = if self.exclude_near_zero { 2 } else { 1 };
        (-m..=m).filter(|o| o.abs() >= min_abs).collect()
    }
}

const MAX_RESAMPLES: usize = 1000;

fn sample_pair(split: &[Utterance], offset: i32, rng: &mut impl Rng, opts: &SamplingOptions) -> Result<AVPair> {
    let w = opts.window;
    for _ in 0..MAX_RESAMPLES {
        let utt = &split[rng.random_range(0..split.len())];
        let t = utt.frames();
        let lo = (-offset).max(0) as usize;
        let reach = w + offset.max(0) as usize;
        if t < reach || t - reach < lo {
            // Too short for this offset: draw another utterance.
            continue;
        }
        let start = rng.random_range(lo..=t - reach);
        return utt.pair(start, offset, w);
    }
    Err(Error::Usage(format!(
        "no utterance can host a {w}-frame window at offset {offset}"
    )))
}

/// Equal numbers of in-sync (even slots) and misaligned (odd slots) pairs.
/// Negative offsets are uniform over `[-max_offset, max_offset] \ {0}`.
pub fn sample_batch(
    split: &[Utterance],
    batch_size: usize,
    rng: &mut impl Rng,
    opts: &SamplingOptions,
) -> Result<Vec<AVPair>> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::Usage(format!("batch size must be even and positive, got {batch_size}")));
    }
    if split.is_empty() {
        return Err(Error::Usage("cannot sample from an empty split".into()));
    }
    let negatives = opts.negative_offsets();
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size / 2 {
        out.push(sample_pair(split, 0, rng, opts)?);
        let off = *negatives.choose(rng).expect("non-empty offset set");
        out.push(sample_pair(split, off, rng, opts)?);
    }
    Ok(out)
}

/// Recovers latents from features by least squares against the corpus mixing
/// matrices and matches windows by latent distance. Establishes that the
/// synchronisation task is solvable from the data alone.
#[derive(Debug, Clone)]
pub struct LatentOracle {
    visual_pinv: DMatrix<f64>,
    audio_pinv: DMatrix<f64>,
    audio_rate: usize,
}

impl LatentOracle {
    pub fn new(corpus: &Corpus) -> Result<Self> {
        let pinv = |m: &Tensor| -> Result<DMatrix<f64>> {
            let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.values());
            dm.pseudo_inverse(1e-12)
                .map_err(|e| Error::Config(format!("mixing matrix not invertible: {e}")))
        };
        Ok(LatentOracle {
            visual_pinv: pinv(&corpus.visual_mixing)?,
            audio_pinv: pinv(&corpus.audio_mixing)?,
            audio_rate: corpus.config.audio_rate,
        })
    }

    /// Latent recovered from one feature frame.
    pub fn recover(&self, frame: &[f64], visual: bool) -> Vec<f64> {
        let p = if visual { &self.visual_pinv } else { &self.audio_pinv };
        let x = nalgebra::DVector::from_column_slice(frame);
        (p * x).iter().copied().collect()
    }

    /// Squared latent distance between each visual frame and the audio frame
    /// at the same time, summed over the window.
    pub fn distance(&self, visual: &Tensor, audio: &Tensor) -> f64 {
        (0..visual.rows())
            .map(|t| {
                let zv = self.recover(visual.row(t), true);
                let za = self.recover(audio.row(t * self.audio_rate), false);
                zv.iter().zip(&za).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .sum()
    }

    /// Fraction of random queries whose nearest candidate among offsets
    /// `-max..=max` is exactly offset 0.
    pub fn identification_rate(&self, split: &[Utterance], n_queries: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = MAX_OFFSET as i32;
        let mut hits = 0;
        for _ in 0..n_queries {
            let utt = &split[rng.random_range(0..split.len())];
            let t = utt.frames();
            let start = rng.random_range(MAX_OFFSET..=t - VISUAL_WINDOW - MAX_OFFSET);
            let mut best = (f64::INFINITY, 0);
            for off in -m..=m {
                let p = utt.pair(start, off, VISUAL_WINDOW)?;
                let d = self.distance(&p.visual, &p.audio);
                if d < best.0 {
                    best = (d, off);
                }
            }
            if best.1 == 0 {
                hits += 1;
            }
        }
        Ok(hits as f64 / n_queries.max(1) as f64)
    }
}
