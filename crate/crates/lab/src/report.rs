//! Report files: one JSON document per experiment plus a flat per-input CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use reprobe_core::experiment::{AppliedIntervention, ExperimentReport, ExperimentSpec};
use reprobe_core::stats::{self, RankTest};
use serde::{Deserialize, Serialize};

use crate::config::{DriftMode, DriftSection};
use crate::error::{LabError, Result};
use crate::fsutil;

pub const DRIFT_SCHEMA_VERSION: u32 = 1;

/// Paired per-input control drift. In `penalty` mode `a` is drift with the
/// penalty and `b` without; in `random` mode `a` is the targeted
/// intervention and `b` the matched random step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub schema_version: u32,
    pub mode: DriftMode,
    pub spec: DriftSection,
    pub seed: u64,
    pub input_ids: Vec<usize>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub mean_a: f64,
    pub mean_b: f64,
    /// Inputs where the target-side stopping rule was met, `[a, b]`
    /// (penalty mode only).
    pub reached: Option<[usize; 2]>,
    pub test: RankTest,
    pub significant: bool,
    pub provenance: BTreeMap<String, String>,
}

/// Output of `cmd_intervene`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionArtifact {
    pub schema_version: u32,
    pub spec: ExperimentSpec,
    pub records: Vec<AppliedIntervention>,
    pub target_pass_rate: f64,
    pub control_pass_rate: f64,
    pub provenance: BTreeMap<String, String>,
}

impl InterventionArtifact {
    pub fn new(spec: ExperimentSpec, records: Vec<AppliedIntervention>) -> Self {
        let n = records.len().max(1) as f64;
        let rate = |f: &dyn Fn(&AppliedIntervention) -> bool| records.iter().filter(|r| f(r)).count() as f64 / n;
        Self {
            schema_version: 1,
            target_pass_rate: rate(&|r| r.target_condition.recompute()),
            control_pass_rate: rate(&|r| r.control_condition.recompute()),
            spec,
            records,
            provenance: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyReport {
    Experiment(Box<ExperimentReport>),
    Drift(DriftReport),
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("report serialises");
    v.push(b'\n');
    v
}

pub fn read_any(path: &Path) -> Result<AnyReport> {
    let bytes = fsutil::read(path)?;
    let bad = |e: serde_json::Error| LabError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(bad)?;
    if value.get("criterion").is_some() {
        Ok(AnyReport::Experiment(Box::new(serde_json::from_value(value).map_err(bad)?)))
    } else if value.get("mode").is_some() {
        Ok(AnyReport::Drift(serde_json::from_value(value).map_err(bad)?))
    } else {
        Err(LabError::Format {
            path: path.to_path_buf(),
            message: "neither an experiment nor a drift report".into(),
        })
    }
}

/// `<out>` with its extension replaced by `csv`.
pub fn csv_path(out: &Path) -> PathBuf {
    out.with_extension("csv")
}

pub fn experiment_csv(report: &ExperimentReport) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    w.write_record([
        "input_id",
        "verified",
        "goodness_before",
        "goodness_after",
        "goodness_baseline",
        "delta",
        "baseline_delta",
        "accuracy_before",
        "accuracy_after",
        "displacement",
        "target_ok",
        "control_ok",
        "control_max_kl",
    ])
    .expect("in-memory csv");
    for r in &report.records {
        w.write_record([
            r.input_id.to_string(),
            r.verified().to_string(),
            r.goodness_before.to_string(),
            r.goodness_after.to_string(),
            r.goodness_baseline.to_string(),
            r.delta().to_string(),
            r.baseline_delta().to_string(),
            r.accuracy_before.to_string(),
            r.accuracy_after.to_string(),
            r.displacement.to_string(),
            r.target_condition.recompute().to_string(),
            r.control_condition.recompute().to_string(),
            r.control_condition.max_kl.to_string(),
        ])
        .expect("in-memory csv");
    }
    if let Some(loc) = &report.locator {
        w.write_record(["layer", "success", "best_loss", "n_successful", "lens_accuracy"])
            .expect("in-memory csv");
        for (l, acc) in loc.sweep.layers.iter().zip(&loc.lens_accuracy) {
            w.write_record([
                l.layer.to_string(),
                l.success.to_string(),
                l.best_loss.to_string(),
                l.n_successful.to_string(),
                acc.map_or(String::new(), |a| a.to_string()),
            ])
            .expect("in-memory csv");
        }
    }
    w.into_inner().expect("in-memory csv")
}

pub fn drift_csv(report: &DriftReport) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let (a, b) = match report.mode {
        DriftMode::Penalty => ("drift_with_penalty", "drift_without_penalty"),
        DriftMode::Random => ("drift_targeted", "drift_random"),
    };
    w.write_record(["input_id", a, b]).expect("in-memory csv");
    for ((id, x), y) in report.input_ids.iter().zip(&report.a).zip(&report.b) {
        w.write_record([id.to_string(), x.to_string(), y.to_string()]).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

pub fn csv_of(report: &AnyReport) -> Vec<u8> {
    match report {
        AnyReport::Experiment(r) => experiment_csv(r),
        AnyReport::Drift(r) => drift_csv(r),
    }
}

fn row(out: &mut String, key: &str, value: impl std::fmt::Display) {
    let _ = writeln!(out, "{key:<28} {value}");
}

pub fn render_table(report: &AnyReport) -> String {
    let mut out = String::new();
    match report {
        AnyReport::Experiment(r) => {
            row(&mut out, "criterion", format!("{:?}", r.criterion).to_lowercase());
            row(&mut out, "target", &r.spec.target);
            row(&mut out, "controls", r.spec.controls.join(", "));
            row(&mut out, "layer", r.spec.layer);
            row(&mut out, "constraints", r.spec.constraints.family.describe());
            row(&mut out, "verdict", verdict_name(r));
            if let Some(i) = &r.information {
                row(&mut out, "tau (nats)", format!("{:.4}", i.evidence.tau));
                row(&mut out, "H(Z) (nats)", format!("{:.4}", i.evidence.h_z));
                row(&mut out, "best probe loss", format!("{:.4}", i.evidence.best_loss));
                row(&mut out, "successful probes", format!("{}/{}", i.evidence.n_successful, i.evidence.losses.len()));
                row(&mut out, "MI lower bound (nats)", format!("{:.4}", i.evidence.mi_lower_bound));
                if let Some(s) = &i.selectivity {
                    row(&mut out, "control-task loss", format!("{:.4}", s.control_loss));
                    row(&mut out, "selectivity", format!("{:.4}", s.selectivity));
                }
            }
            if let Some(l) = &r.locator {
                row(
                    &mut out,
                    "band",
                    l.sweep.band.map_or("none".into(), |(a, b)| format!("{a}..={b}")),
                );
                for (layer, acc) in l.sweep.layers.iter().zip(&l.lens_accuracy) {
                    row(
                        &mut out,
                        &format!("layer {}", layer.layer),
                        format!(
                            "success={} best_loss={:.4} lens_acc={}",
                            layer.success,
                            layer.best_loss,
                            acc.map_or("-".into(), |a| format!("{a:.3}"))
                        ),
                    );
                }
            }
            if matches!(
                r.criterion,
                reprobe_core::experiment::Criterion::Use | reprobe_core::experiment::Criterion::Misrepresentation
            ) {
                let s = &r.summary;
                row(&mut out, "inputs selected", s.n_selected);
                row(&mut out, "inputs verified", s.n_verified);
                row(&mut out, "target pass rate", format!("{:.3}", s.target_pass_rate));
                row(&mut out, "control pass rate", format!("{:.3}", s.control_pass_rate));
                row(&mut out, "mean goodness delta", format!("{:.5}", s.mean_delta));
                row(&mut out, "baseline delta", format!("{:.5}", s.baseline_mean_delta));
                row(&mut out, "task mean delta", format!("{:.5}", s.task_mean_delta));
                row(&mut out, "improved fraction", format!("{:.3}", s.improved_fraction));
                row(&mut out, "baseline improved fraction", format!("{:.3}", s.baseline_improved_fraction));
                if let Some(t) = s.rank_test {
                    row(&mut out, "rank test p", format!("{:.3e}", t.p_value));
                }
            }
            for d in &r.diagnostics {
                row(&mut out, "diagnostic", d);
            }
        }
        AnyReport::Drift(r) => {
            row(&mut out, "mode", format!("{:?}", r.mode).to_lowercase());
            row(&mut out, "target", &r.spec.target);
            row(&mut out, "control", &r.spec.control);
            row(&mut out, "inputs", r.a.len());
            let (a, b) = match r.mode {
                DriftMode::Penalty => ("mean drift with penalty", "mean drift without"),
                DriftMode::Random => ("mean drift targeted", "mean drift random"),
            };
            row(&mut out, a, format!("{:.5}", r.mean_a));
            row(&mut out, b, format!("{:.5}", r.mean_b));
            if let Some([x, y]) = r.reached {
                row(&mut out, "stopping rule met", format!("{x} / {y}"));
            }
            row(&mut out, "rank test p", format!("{:.3e}", r.test.p_value));
            row(&mut out, "significant", r.significant);
        }
    }
    out
}

fn verdict_name(r: &ExperimentReport) -> &'static str {
    use reprobe_core::experiment::Verdict;
    match r.verdict {
        Verdict::Positive => "positive",
        Verdict::Negative => "negative",
        Verdict::ConditionsUnsatisfied => "conditions-unsatisfied",
    }
}

pub fn drift_report(
    spec: &DriftSection,
    seed: u64,
    input_ids: Vec<usize>,
    a: Vec<f64>,
    b: Vec<f64>,
    reached: Option<[usize; 2]>,
    test: RankTest,
) -> DriftReport {
    DriftReport {
        schema_version: DRIFT_SCHEMA_VERSION,
        mode: spec.mode,
        spec: spec.clone(),
        seed,
        input_ids,
        mean_a: stats::mean(&a),
        mean_b: stats::mean(&b),
        a,
        b,
        reached,
        significant: test.p_value < reprobe_core::experiment::SIGNIFICANCE,
        test,
        provenance: BTreeMap::new(),
    }
}
