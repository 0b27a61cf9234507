//! CSV and summary emitters, and the per-run manifest.
//!
//! Numbers are printed with four decimals. CSV column sets are fixed:
//!
//! | file | columns |
//! |------|---------|
//! | evaluation | `frame_length,accuracy,queries` |
//! | ablation | `axis,value,seed,frame_length,val_f1,accuracy` |
//! | history | `epoch,lr,bce,cad,vr,aux,total,val_f1` |
//! | tracking | `epoch,last_fitnets,sel_fitnets,mtd` |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::ablation::{AblationReport, AblationRow, TrackingRow};
use crate::binio;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::model::{param_count_for_config, ModelConfig, ParamScope};
use crate::train::TrainHistory;

pub const EVAL_HEADER: &str = "frame_length,accuracy,queries";
pub const ABLATION_HEADER: &str = "axis,value,seed,frame_length,val_f1,accuracy";
pub const HISTORY_HEADER: &str = "epoch,lr,bce,cad,vr,aux,total,val_f1";
pub const TRACKING_HEADER: &str = "epoch,last_fitnets,sel_fitnets,mtd";

pub fn eval_csv(report: &EvalReport) -> String {
    let mut s = format!("{EVAL_HEADER}\n");
    for r in &report.lengths {
        let _ = writeln!(s, "{},{:.4},{}", r.frame_length, r.accuracy, r.queries);
    }
    s
}

fn ablation_line(s: &mut String, r: &AblationRow) {
    for (len, acc) in &r.accuracies {
        let _ = writeln!(s, "{},{},{},{},{:.4},{:.4}", r.axis, r.value, r.seed, len, r.val_f1, acc);
    }
}

pub fn ablation_csv(report: &AblationReport) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    report.rows.iter().for_each(|r| ablation_line(&mut s, r));
    s
}

pub fn history_csv(h: &TrainHistory) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in &h.records {
        let t = &r.train;
        let _ = writeln!(
            s,
            "{},{:.4e},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.epoch, r.lr, t.bce, t.cad, t.vr, t.aux, t.total, r.val_f1
        );
    }
    s
}

pub fn tracking_csv(rows: &[TrackingRow]) -> String {
    let mut s = format!("{TRACKING_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.4},{:.4},{:.4}", r.epoch, r.last_fitnets, r.sel_fitnets, r.mtd);
    }
    s
}

/// Merges ablation CSV bodies: rows are sorted by (axis, value, seed,
/// frame_length) so that merge order does not matter. Duplicate headers are
/// dropped; any other header is a format error.
pub fn merge_ablation_csv(parts: &[String]) -> Result<String> {
    let mut rows: Vec<(String, String, u64, usize, String)> = Vec::new();
    for part in parts {
        let mut lines = part.lines();
        match lines.next() {
            None => continue,
            Some(h) if h.trim() == ABLATION_HEADER => {}
            Some(h) => {
                return Err(Error::Format {
                    offset: 0,
                    detail: format!("unexpected CSV header `{h}`"),
                })
            }
        }
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format {
                offset: 0,
                detail: format!("CSV line {}: `{line}`", i + 2),
            };
            if cols.len() != 6 {
                return Err(bad());
            }
            let seed = cols[2].parse().map_err(|_| bad())?;
            let len = cols[3].parse().map_err(|_| bad())?;
            rows.push((cols[0].into(), cols[1].into(), seed, len, line.to_string()));
        }
    }
    rows.sort_by(|a, b| (&a.0, &a.1, a.2, a.3).cmp(&(&b.0, &b.1, b.2, b.3)));
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&r.4);
        s.push('\n');
    }
    Ok(s)
}

/// Mean accuracy per (axis, value, frame_length) from merged ablation CSV.
pub fn ablation_means(csv: &str) -> Vec<(String, String, usize, f64)> {
    let mut acc: Vec<(String, String, usize, f64, usize)> = Vec::new();
    for line in csv.lines().skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        let (Some(len), Some(a)) = (c.get(3).and_then(|v| v.parse().ok()), c.get(5).and_then(|v| v.parse::<f64>().ok()))
        else {
            continue;
        };
        match acc.iter_mut().find(|e| e.0 == c[0] && e.1 == c[1] && e.2 == len) {
            Some(e) => {
                e.3 += a;
                e.4 += 1;
            }
            None => acc.push((c[0].into(), c[1].into(), len, a, 1)),
        }
    }
    acc.into_iter().map(|(x, v, l, s, n)| (x, v, l, s / n as f64)).collect()
}

/// Parameter counts of a teacher/student pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeSummary {
    pub teacher_all: usize,
    pub student_all: usize,
    pub teacher_backend: usize,
    pub student_backend: usize,
}

impl SizeSummary {
    pub fn of(teacher: &ModelConfig, student: &ModelConfig) -> Self {
        SizeSummary {
            teacher_all: param_count_for_config(teacher, ParamScope::All),
            student_all: param_count_for_config(student, ParamScope::All),
            teacher_backend: param_count_for_config(teacher, ParamScope::BackendOnly),
            student_backend: param_count_for_config(student, ParamScope::BackendOnly),
        }
    }

    pub fn backend_ratio(&self) -> f64 {
        self.student_backend as f64 / self.teacher_backend as f64
    }

    /// Percentage of all parameters removed by the student.
    pub fn reduction_percent(&self) -> f64 {
        100.0 * (1.0 - self.student_all as f64 / self.teacher_all as f64)
    }

    pub fn pairs(&self, prefix: &str) -> Vec<(String, String)> {
        vec![
            (format!("{prefix}.teacher_params"), self.teacher_all.to_string()),
            (format!("{prefix}.student_params"), self.student_all.to_string()),
            (format!("{prefix}.teacher_backend_params"), self.teacher_backend.to_string()),
            (format!("{prefix}.student_backend_params"), self.student_backend.to_string()),
            (format!("{prefix}.backend_ratio"), format!("{:.4}", self.backend_ratio())),
            (format!("{prefix}.reduction_percent"), format!("{:.4}", self.reduction_percent())),
        ]
    }
}

/// Record of one CLI invocation. Everything except `wall_seconds` is a
/// function of the inputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub corpus_digest: Option<String>,
    /// `(role, digest)`.
    pub checkpoint_digests: Vec<(String, String)>,
    pub seed: u64,
    /// Flag overrides applied on top of the config file, as `key = value`.
    pub overrides: Vec<(String, String)>,
    /// `(path, digest)` of every file written.
    pub artifacts: Vec<(PathBuf, String)>,
    pub wall_seconds: f64,
}

impl RunManifest {
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("run.command".to_string(), self.command.clone()),
            ("run.config_digest".into(), self.config_digest.clone()),
            ("run.seed".into(), self.seed.to_string()),
        ];
        if let Some(d) = &self.corpus_digest {
            out.push(("run.corpus_digest".into(), d.clone()));
        }
        for (role, d) in &self.checkpoint_digests {
            out.push((format!("checkpoint.{role}"), d.clone()));
        }
        for (k, v) in &self.overrides {
            out.push((format!("override.{k}"), v.clone()));
        }
        for (i, (p, d)) in self.artifacts.iter().enumerate() {
            out.push((format!("artifact.{i}.path"), p.display().to_string()));
            out.push((format!("artifact.{i}.digest"), d.clone()));
        }
        out.push(("run.wall_seconds".into(), format!("{:.4}", self.wall_seconds)));
        out
    }

    pub fn render(&self) -> String {
        crate::kv::render(self.pairs().iter().map(|(k, v)| (k.as_str(), v.clone())))
    }

    /// Writes `bytes` to `path` and lists it.
    pub fn write_artifact(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        self.artifacts.push((path.to_path_buf(), binio::digest(bytes)));
        Ok(())
    }
}
