//! The `mtd` command line.
//!
//! Relative paths resolve against the run directory (`--run-dir`, else the
//! `MTD_RUN_DIR` environment variable, else the working directory). Every
//! subcommand writes `manifest-<command>.txt` there. Diagnostics go to
//! stderr; stdout is only used by `--print-defaults`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::ablation::{loss_tracking_run, run_ablation, AblationKind, AblationSpec, SweepInputs};
use crate::binio;
use crate::checkpoint::{checkpoint_bytes, load_checkpoint, CheckpointMeta};
use crate::config::ConfigBundle;
use crate::data::{generate_corpus, Corpus};
use crate::error::{Error, Result};
use crate::eval::multi_length_eval;
use crate::losses::Method;
use crate::model::{ModelConfig, SyncModel};
use crate::report::{self, RunManifest, SizeSummary};
use crate::train::{distill_from, train_teacher_with, TrainHooks};

pub const RUN_DIR_ENV: &str = "MTD_RUN_DIR";

#[derive(Debug, Parser)]
#[command(name = "mtd", version, about = "Audio-visual sync models: data, training, distillation, evaluation")]
struct Cli {
    /// Config file of `dotted.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable), e.g. `--set distill.tau=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory for relative paths and manifests.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Print every config key with its default and exit.
    #[arg(long)]
    print_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a teacher with BCE.
    TrainTeacher {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Distil a student from a teacher checkpoint.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
        /// Comma-separated layers, e.g. `fusion3,av4,va1`.
        #[arg(long)]
        layers: Option<String>,
        #[arg(long)]
        tau: Option<String>,
        #[arg(long)]
        seed: Option<String>,
    },
    /// Retrieval accuracy of a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated frame lengths.
        #[arg(long)]
        lengths: Option<String>,
        #[arg(long)]
        seed: Option<String>,
    },
    /// Distil and evaluate across one ablation axis.
    Ablate {
        /// mtd_terms, layer_sweep, layer_sets, temperature or methods.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0")]
        seeds: String,
    },
    /// Optimise one objective and log all three per epoch.
    LossTrack {
        /// last-fitnets, sel-fitnets or mtd.
        #[arg(long)]
        optimize: String,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Validation pairs used for monitoring.
        #[arg(long, default_value_t = 64)]
        pairs: usize,
    },
    /// Merge ablation CSVs and write a summary.
    Report {
        /// Ablation CSV files to merge (may be empty).
        #[arg(long, num_args = 0..)]
        results: Vec<PathBuf>,
        /// Summary output.
        #[arg(long)]
        out: PathBuf,
        /// Merged CSV output.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        student: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainTeacher { .. } => "train-teacher",
            Command::Distill { .. } => "distill",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
            Command::LossTrack { .. } => "loss-track",
            Command::Report { .. } => "report",
        }
    }
}

struct Ctx {
    run_dir: PathBuf,
    bundle: ConfigBundle,
    manifest: RunManifest,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.run_dir.join(p)
        }
    }

    fn read(&self, p: &Path) -> Result<Vec<u8>> {
        let full = self.path(p);
        std::fs::read(&full).map_err(|e| Error::io(full, e))
    }

    fn load_corpus(&mut self, p: &Path) -> Result<Corpus> {
        let bytes = self.read(p)?;
        let corpus = Corpus::from_bytes(&bytes)?;
        self.manifest.corpus_digest = Some(binio::digest(&bytes));
        Ok(corpus)
    }

    fn load_model(&mut self, role: &str, p: &Path) -> Result<(SyncModel, CheckpointMeta)> {
        let full = self.path(p);
        let bytes = self.read(p)?;
        let out = load_checkpoint(&full)?;
        self.manifest.checkpoint_digests.push((role.into(), binio::digest(&bytes)));
        Ok(out)
    }

    fn write(&mut self, p: &Path, bytes: &[u8]) -> Result<()> {
        let full = self.path(p);
        self.manifest.write_artifact(&full, bytes)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.bundle.set(key, value)?;
        self.manifest.overrides.push((key.into(), value.into()));
        Ok(())
    }
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code: 0 success, 1 usage/config, 2 data/format, 3 numerical.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("mtd: {e}");
            e.exit_code()
        }
    }
}

fn parse_overrides(bundle: &mut ConfigBundle, sets: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        let (k, v) = (k.trim(), v.trim());
        bundle.set(k, v)?;
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn execute(cli: Cli) -> Result<()> {
    if cli.print_defaults {
        print!("{}", ConfigBundle::default().render());
        return Ok(());
    }
    let command = cli
        .command
        .ok_or_else(|| Error::Usage("no subcommand given; see `mtd --help`".into()))?;
    let started = Instant::now();
    let run_dir = cli
        .run_dir
        .or_else(|| std::env::var_os(RUN_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let config_text = match &cli.config {
        Some(p) => {
            let full = if p.is_absolute() { p.clone() } else { run_dir.join(p) };
            std::fs::read_to_string(&full).map_err(|e| Error::io(full, e))?
        }
        None => String::new(),
    };
    let mut bundle = ConfigBundle::parse(&config_text)?;
    let overrides = parse_overrides(&mut bundle, &cli.set)?;
    let mut ctx = Ctx {
        run_dir,
        bundle,
        manifest: RunManifest {
            command: command.name().into(),
            config_digest: binio::digest(config_text.as_bytes()),
            overrides,
            ..RunManifest::default()
        },
    };
    let name = command.name();
    dispatch(&mut ctx, command)?;
    ctx.manifest.wall_seconds = started.elapsed().as_secs_f64();
    let manifest_path = ctx.path(Path::new(&format!("manifest-{name}.txt")));
    let text = ctx.manifest.render();
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(manifest_path, e))
}

fn model_meta(ctx: &Ctx, extra: &[(&str, String)]) -> Vec<(String, String)> {
    let mut v: Vec<(String, String)> = extra.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    if let Some(d) = &ctx.manifest.corpus_digest {
        v.push(("corpus.digest".into(), d.clone()));
    }
    v
}

fn dispatch(ctx: &mut Ctx, command: Command) -> Result<()> {
    match command {
        Command::GenData { out } => {
            ctx.bundle.validate()?;
            ctx.manifest.seed = ctx.bundle.corpus.seed;
            let corpus = generate_corpus(&ctx.bundle.corpus)?;
            let bytes = corpus.to_bytes();
            ctx.write(&out, &bytes)
        }
        Command::TrainTeacher { corpus, out, history } => {
            let corpus = ctx.load_corpus(&corpus)?;
            ctx.bundle.validate()?;
            let train = ctx.bundle.teacher_train.clone();
            ctx.manifest.seed = train.seed;
            let extra = model_meta(ctx, &[("role", "teacher".into())]);
            let model_cfg = ctx.bundle.teacher.clone();
            let initial = SyncModel::init(&model_cfg)?;
            train_and_write(ctx, &out, history.as_deref(), extra, &initial, |hooks| {
                train_teacher_with(&corpus, &model_cfg, &train, hooks)
            })
        }
        Command::Distill {
            teacher,
            corpus,
            out,
            history,
            method,
            layers,
            tau,
            seed,
        } => {
            for (key, v) in [
                ("distill.method", method),
                ("distill.layers", layers),
                ("distill.tau", tau),
                ("student_train.seed", seed),
            ] {
                if let Some(v) = v {
                    ctx.set(key, &v)?;
                }
            }
            ctx.bundle.validate()?;
            let corpus = ctx.load_corpus(&corpus)?;
            let (teacher, _) = ctx.load_model("teacher", &teacher)?;
            let train = ctx.bundle.student_train.clone();
            ctx.manifest.seed = train.seed;
            let d = &train.distill;
            let extra = model_meta(
                ctx,
                &[
                    ("role", "student".into()),
                    ("distill.method", d.method.to_string()),
                    ("distill.layers", crate::model::LayerSpec::format_list(&d.layer_set)),
                    ("distill.tau", format!("{:?}", d.tau)),
                ],
            );
            let student = SyncModel::init(&ctx.bundle.student)?;
            let initial = student.clone();
            train_and_write(ctx, &out, history.as_deref(), extra, &initial, |hooks| {
                distill_from(&teacher, student, &corpus, &train, hooks)
            })
        }
        Command::Evaluate {
            ckpt,
            corpus,
            out,
            lengths,
            seed,
        } => {
            if let Some(v) = lengths {
                ctx.set("eval.lengths", &v)?;
            }
            if let Some(v) = seed {
                ctx.set("eval.seed", &v)?;
            }
            ctx.bundle.validate()?;
            let corpus = ctx.load_corpus(&corpus)?;
            let (model, _) = ctx.load_model("evaluated", &ckpt)?;
            ctx.manifest.seed = ctx.bundle.eval.seed;
            let report = multi_length_eval(&model, &corpus.test, &ctx.bundle.eval)?;
            ctx.write(&out, report::eval_csv(&report).as_bytes())
        }
        Command::Ablate {
            kind,
            teacher,
            corpus,
            out,
            seeds,
        } => {
            let kind: AblationKind = kind.parse()?;
            let seeds = parse_seeds(&seeds)?;
            ctx.bundle.validate()?;
            let corpus = ctx.load_corpus(&corpus)?;
            let (teacher, _) = ctx.load_model("teacher", &teacher)?;
            let b = &ctx.bundle;
            let spec = AblationSpec::standard(kind, &b.student_train.distill, b.student.layers_per_block, seeds);
            let inputs = SweepInputs {
                teacher: &teacher,
                corpus: &corpus,
                student: &b.student,
                train: &b.student_train,
                eval: &b.eval,
            };
            let result = run_ablation(&spec, &inputs)?;
            ctx.manifest.seed = spec.seeds[0];
            ctx.write(&out, report::ablation_csv(&result).as_bytes())
        }
        Command::LossTrack {
            optimize,
            teacher,
            corpus,
            out,
            pairs,
        } => {
            let optimize: Method = optimize.parse()?;
            ctx.bundle.validate()?;
            let corpus = ctx.load_corpus(&corpus)?;
            let (teacher, _) = ctx.load_model("teacher", &teacher)?;
            let b = &ctx.bundle;
            let inputs = SweepInputs {
                teacher: &teacher,
                corpus: &corpus,
                student: &b.student,
                train: &b.student_train,
                eval: &b.eval,
            };
            let (rows, _) = loss_tracking_run(optimize, &inputs, pairs)?;
            ctx.manifest.seed = b.student_train.seed;
            ctx.write(&out, report::tracking_csv(&rows).as_bytes())
        }
        Command::Report {
            results,
            out,
            csv,
            teacher,
            student,
        } => {
            ctx.bundle.validate()?;
            let mut parts = Vec::new();
            for p in &results {
                let bytes = ctx.read(p)?;
                let text = String::from_utf8(bytes).map_err(|_| Error::Format {
                    offset: 0,
                    detail: format!("{} is not UTF-8", p.display()),
                })?;
                parts.push(text);
            }
            let merged = report::merge_ablation_csv(&parts)?;
            let (t_cfg, s_cfg) = (
                match &teacher {
                    Some(p) => ctx.load_model("teacher", p)?.0.config().clone(),
                    None => ctx.bundle.teacher.clone(),
                },
                match &student {
                    Some(p) => ctx.load_model("student", p)?.0.config().clone(),
                    None => ctx.bundle.student.clone(),
                },
            );
            let summary = summary_text(ctx, &t_cfg, &s_cfg, &merged);
            if let Some(c) = csv {
                ctx.write(&c, merged.as_bytes())?;
            }
            ctx.write(&out, summary.as_bytes())
        }
    }
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Usage(format!("--seeds: `{x}` is not an unsigned integer")))
        })
        .collect()
}

/// Trains with checkpointing on every validation-F1 improvement into `out`.
/// With zero epochs nothing improves, so the initial model is written.
fn train_and_write(
    ctx: &mut Ctx,
    out: &Path,
    history: Option<&Path>,
    extra: Vec<(String, String)>,
    initial: &SyncModel,
    train: impl FnOnce(TrainHooks<'_>) -> Result<(SyncModel, crate::train::TrainHistory)>,
) -> Result<()> {
    let full = ctx.path(out);
    if let Some(dir) = full.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let hooks = TrainHooks {
        checkpoint: Some(&full),
        checkpoint_extra: extra.clone(),
        on_epoch: None,
    };
    let (_, hist) = train(hooks)?;
    if hist.best_epoch.is_none() {
        let meta = CheckpointMeta {
            epoch: 0,
            val_f1: 0.0,
            rng_digest: String::new(),
            extra,
        };
        ctx.write(out, &checkpoint_bytes(initial, &meta)?)?;
    } else {
        let bytes = ctx.read(out)?;
        ctx.manifest.artifacts.push((full, binio::digest(&bytes)));
    }
    if let Some(h) = history {
        ctx.write(h, report::history_csv(&hist).as_bytes())?;
    }
    Ok(())
}

fn summary_text(ctx: &Ctx, teacher: &ModelConfig, student: &ModelConfig, merged: &str) -> String {
    let mut pairs = ctx.bundle.pairs();
    pairs.extend(SizeSummary::of(teacher, student).pairs("size"));
    pairs.extend(SizeSummary::of(&ModelConfig::full_teacher(), &ModelConfig::full_student()).pairs("size_full_profile"));
    for (axis, value, len, acc) in report::ablation_means(merged) {
        pairs.push((format!("mean.{axis}.{value}.len{len}"), format!("{acc:.4}")));
    }
    pairs.extend(ctx.manifest.pairs().into_iter().filter(|(k, _)| k != "run.wall_seconds"));
    crate::kv::render(pairs.iter().map(|(k, v)| (k.as_str(), v.clone())))
}
