//! End-to-end Information, Use, Misrepresentation and locator experiments
//! with verdicts recomputable from their per-input records.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::intervene::{
    self, ConditionReport, ControlTerm, GradientConfig, Intervention, Tolerances,
};
use crate::model::{self, Activation, System};
use crate::numeric::ProbDist;
use crate::probe::{
    self, InformationEvidence, LayerSweep, ProbeConstraints, ProbeFamily, ProxyFamily, Selectivity,
    DEFAULT_FAMILY_SIZE, N_MIN,
};
use crate::rng;
use crate::stats::{self, Alternative, RankTest};
use crate::task::{Goodness, SplitName, TaskDataset, CONTROL_SUFFIX};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_N_MIN_INPUTS: usize = 20;
pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Criterion {
    Information,
    Use,
    Misrepresentation,
    Locator,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields))]
pub enum Recipe {
    Identity,
    Gradient {
        #[cfg_attr(feature = "serde", serde(default))]
        config: GradientConfig,
        /// Weight of every control-family penalty.
        #[cfg_attr(feature = "serde", serde(default = "one"))]
        lambda_control: f64,
    },
    Inlp {
        #[cfg_attr(feature = "serde", serde(default))]
        max_iters: Option<usize>,
        #[cfg_attr(feature = "serde", serde(default = "chance_margin"))]
        chance_margin: f64,
    },
}

#[cfg(feature = "serde")]
fn one() -> f64 {
    1.0
}

#[cfg(feature = "serde")]
fn chance_margin() -> f64 {
    intervene::DEFAULT_CHANCE_MARGIN
}

impl Default for Recipe {
    fn default() -> Self {
        Recipe::Gradient {
            config: GradientConfig::default(),
            lambda_control: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SelectionRule {
    All,
    /// Inputs whose output argmax misses the gold argmax.
    Errors,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Selection {
    /// `None` selects from every input.
    #[cfg_attr(feature = "serde", serde(default))]
    pub split: Option<SplitName>,
    pub rule: SelectionRule,
    #[cfg_attr(feature = "serde", serde(default))]
    pub max_inputs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ModifyTarget {
    /// `p_Z(s)`.
    TrueLabel,
    /// `p_Z(s)` with its labels cyclically shifted by one.
    Shifted,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ExperimentSpec {
    pub criterion: Criterion,
    pub layer: usize,
    pub target: String,
    #[cfg_attr(feature = "serde", serde(default))]
    pub controls: Vec<String>,
    pub constraints: ProbeConstraints,
    #[cfg_attr(feature = "serde", serde(default))]
    pub tau: Option<f64>,
    pub family_size: usize,
    #[cfg_attr(feature = "serde", serde(default))]
    pub recipe: Recipe,
    #[cfg_attr(feature = "serde", serde(default))]
    pub tolerances: Tolerances,
    pub selection: Selection,
    pub n_min_inputs: usize,
    pub baseline_draws: usize,
    pub modify_target: ModifyTarget,
    pub goodness: Goodness,
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn new(criterion: Criterion, layer: usize, target: &str) -> Self {
        let rule = match criterion {
            Criterion::Misrepresentation => SelectionRule::Errors,
            _ => SelectionRule::All,
        };
        Self {
            criterion,
            layer,
            target: target.into(),
            controls: Vec::new(),
            constraints: ProbeConstraints::new(ProbeFamily::LowRankLinear { rank: 1 }),
            tau: None,
            family_size: DEFAULT_FAMILY_SIZE,
            recipe: Recipe::default(),
            tolerances: Tolerances::default(),
            selection: Selection {
                split: Some(SplitName::ProbeTest),
                rule,
                max_inputs: None,
            },
            n_min_inputs: DEFAULT_N_MIN_INPUTS,
            baseline_draws: 1,
            modify_target: ModifyTarget::TrueLabel,
            goodness: Goodness::NegCrossEntropy,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.controls.iter().any(|c| c == &self.target) {
            return Err(Error::InvalidConfig(format!(
                "control property {} is the target property",
                self.target
            )));
        }
        if self.family_size < N_MIN {
            return Err(Error::InvalidConfig(format!("family_size must be at least {N_MIN}")));
        }
        if self.baseline_draws == 0 {
            return Err(Error::InvalidConfig("baseline_draws must be positive".into()));
        }
        if self.n_min_inputs == 0 {
            return Err(Error::InvalidConfig("n_min_inputs must be positive".into()));
        }
        let t = &self.tolerances;
        if !(t.margin >= 0.0 && t.eps_ctrl >= 0.0) {
            return Err(Error::InvalidConfig("tolerances must be nonnegative".into()));
        }
        if matches!(self.criterion, Criterion::Use | Criterion::Misrepresentation) && self.controls.is_empty() {
            return Err(Error::InvalidConfig("use and misrepresentation experiments need control properties".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Verdict {
    Positive,
    Negative,
    ConditionsUnsatisfied,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InputRecord {
    pub input_id: usize,
    pub goodness_before: f64,
    pub goodness_after: f64,
    /// Mean over the matched random draws.
    pub goodness_baseline: f64,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub displacement: f64,
    /// `ablate` (use) or `modify` (misrepresentation).
    pub target_condition: ConditionReport,
    pub control_condition: ConditionReport,
}

impl InputRecord {
    pub fn verified(&self) -> bool {
        self.target_condition.recompute() && self.control_condition.recompute()
    }

    pub fn delta(&self) -> f64 {
        self.goodness_after - self.goodness_before
    }

    pub fn baseline_delta(&self) -> f64 {
        self.goodness_baseline - self.goodness_before
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Summary {
    pub n_selected: usize,
    pub n_verified: usize,
    pub target_pass_rate: f64,
    pub control_pass_rate: f64,
    /// Mean goodness delta over verified inputs.
    pub mean_delta: f64,
    pub baseline_mean_delta: f64,
    /// Mean goodness delta over every selected input, verified or not.
    pub task_mean_delta: f64,
    pub improved_fraction: f64,
    pub baseline_improved_fraction: f64,
    pub rank_test: Option<RankTest>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LocatorResult {
    pub sweep: LayerSweep,
    /// Lens accuracy per layer; `None` where the width differs from the
    /// head's input width.
    pub lens_accuracy: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InformationResult {
    pub evidence: InformationEvidence,
    pub constraints: String,
    /// Position of the constraint class on the complexity ladder.
    pub ladder_rung: Option<usize>,
    pub selectivity: Option<Selectivity>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub criterion: Criterion,
    pub spec: ExperimentSpec,
    pub verdict: Verdict,
    pub summary: Summary,
    pub records: Vec<InputRecord>,
    pub information: Option<InformationResult>,
    pub locator: Option<LocatorResult>,
    pub diagnostics: Vec<String>,
    /// Filled in by the caller: config and artifact hashes, tool version.
    pub provenance: BTreeMap<String, String>,
}

fn summarise(spec: &ExperimentSpec, records: &[InputRecord], task_deltas: &[f64]) -> Summary {
    let verified: Vec<&InputRecord> = records.iter().filter(|r| r.verified()).collect();
    let n = records.len().max(1) as f64;
    let deltas: Vec<f64> = verified.iter().map(|r| r.delta()).collect();
    let base: Vec<f64> = verified.iter().map(|r| r.baseline_delta()).collect();
    let paired: Vec<f64> = deltas.iter().zip(&base).map(|(d, b)| d - b).collect();
    let frac = |xs: &[f64]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().filter(|&&d| d > 0.0).count() as f64 / xs.len() as f64
        }
    };
    let alt = match spec.criterion {
        Criterion::Misrepresentation => Alternative::Greater,
        _ => Alternative::Less,
    };
    Summary {
        n_selected: records.len(),
        n_verified: verified.len(),
        target_pass_rate: records.iter().filter(|r| r.target_condition.recompute()).count() as f64 / n,
        control_pass_rate: records.iter().filter(|r| r.control_condition.recompute()).count() as f64 / n,
        mean_delta: stats::mean(&deltas),
        baseline_mean_delta: stats::mean(&base),
        task_mean_delta: stats::mean(task_deltas),
        improved_fraction: frac(&deltas),
        baseline_improved_fraction: frac(&base),
        rank_test: (!verified.is_empty()).then(|| stats::signed_rank_test(&paired, alt)),
    }
}

fn intervention_verdict(spec: &ExperimentSpec, s: &Summary) -> Verdict {
    if s.n_verified < spec.n_min_inputs {
        return Verdict::ConditionsUnsatisfied;
    }
    let p = s.rank_test.map_or(1.0, |t| t.p_value);
    let positive = match spec.criterion {
        Criterion::Use => s.mean_delta < 0.0 && s.mean_delta.abs() > s.baseline_mean_delta.abs() && p < SIGNIFICANCE,
        _ => s.improved_fraction > s.baseline_improved_fraction && p < SIGNIFICANCE,
    };
    if positive {
        Verdict::Positive
    } else {
        Verdict::Negative
    }
}

impl ExperimentReport {
    /// Verdict implied by the stored records, evidence and spec.
    pub fn recompute_verdict(&self) -> Verdict {
        match self.criterion {
            Criterion::Information => match &self.information {
                Some(i) if i.evidence.losses.iter().any(|l| l.1 <= i.evidence.tau) => Verdict::Positive,
                _ => Verdict::Negative,
            },
            Criterion::Locator => match &self.locator {
                Some(l) if l.sweep.band.is_some() => Verdict::Positive,
                _ => Verdict::Negative,
            },
            _ => {
                if self.records.is_empty() && self.verdict == Verdict::ConditionsUnsatisfied {
                    return Verdict::ConditionsUnsatisfied;
                }
                intervention_verdict(&self.spec, &self.summary)
            }
        }
    }

    fn empty(spec: &ExperimentSpec, verdict: Verdict) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            criterion: spec.criterion,
            spec: spec.clone(),
            verdict,
            summary: Summary::default(),
            records: Vec::new(),
            information: None,
            locator: None,
            diagnostics: Vec::new(),
            provenance: BTreeMap::new(),
        }
    }
}

/// Inputs picked by the selection rule, in index order.
pub fn select_inputs(spec: &ExperimentSpec, dataset: &TaskDataset, system: &System) -> Result<Vec<usize>> {
    let pool: Vec<usize> = match spec.selection.split {
        Some(s) => dataset.split(s).to_vec(),
        None => (0..dataset.len()).collect(),
    };
    let mut out = Vec::new();
    for i in pool {
        let keep = match spec.selection.rule {
            SelectionRule::All => true,
            SelectionRule::Errors => {
                system.forward(&dataset.inputs[i])?.argmax() != dataset.gold_outputs[i].argmax()
            }
        };
        if keep {
            out.push(i);
        }
        if spec.selection.max_inputs.is_some_and(|m| out.len() >= m) {
            break;
        }
    }
    Ok(out)
}

/// Proxy families for the target and every control property at the
/// experiment layer.
pub fn build_families(
    spec: &ExperimentSpec,
    dataset: &TaskDataset,
    system: &System,
) -> Result<(ProxyFamily, Vec<ProxyFamily>)> {
    let acts = probe::layer_activations(system, dataset, spec.layer)?;
    let build = |property: &str, stream: u64| {
        let (train, test) = probe::probe_splits(&acts, dataset, property)?;
        probe::sample_proxy_family_from(
            &train,
            &test,
            property,
            spec.layer,
            &spec.constraints,
            spec.family_size,
            spec.tau,
            rng::derive_seed(spec.seed, stream),
        )
    };
    let target = build(&spec.target, 0)?;
    let controls = spec
        .controls
        .iter()
        .enumerate()
        .map(|(i, c)| build(c, 1 + i as u64))
        .collect::<Result<Vec<_>>>()?;
    Ok((target, controls))
}

/// Information criterion: at least one successful probe under the experiment's
/// constraints.
pub fn run_information_experiment(
    spec: &ExperimentSpec,
    dataset: &TaskDataset,
    system: &System,
) -> Result<ExperimentReport> {
    spec.validate()?;
    let acts = probe::layer_activations(system, dataset, spec.layer)?;
    let (train, test) = probe::probe_splits(&acts, dataset, &spec.target)?;
    let evidence = probe::information_check_from(
        &train,
        &test,
        &spec.constraints,
        spec.family_size,
        spec.tau,
        spec.seed,
    )?;
    let control = format!("{}{CONTROL_SUFFIX}", spec.target);
    let selectivity = if dataset.property(&control).is_ok() {
        Some(probe::control_task_selectivity(
            &acts,
            dataset,
            &spec.target,
            &spec.constraints,
            spec.tau,
            spec.seed,
            false,
        )?)
    } else {
        None
    };
    let ladder = probe::complexity_ladder(train.xs[0].len(), train.ys[0].len());
    let ladder_rung = ladder.iter().position(|c| c.family == spec.constraints.family);
    let verdict = if evidence.verdict {
        Verdict::Positive
    } else {
        Verdict::Negative
    };
    let mut report = ExperimentReport::empty(spec, verdict);
    report.information = Some(InformationResult {
        evidence,
        constraints: spec.constraints.family.describe(),
        ladder_rung,
        selectivity,
    });
    Ok(report)
}

/// Layer sweep plus the lens readout accuracy at each layer.
pub fn run_locator_experiment(
    spec: &ExperimentSpec,
    dataset: &TaskDataset,
    system: &System,
) -> Result<ExperimentReport> {
    spec.validate()?;
    let sweep = probe::layer_sweep(
        system,
        dataset,
        &spec.target,
        &spec.constraints,
        spec.tau,
        spec.family_size,
        spec.seed,
    )?;
    let inputs = select_inputs(spec, dataset, system)?;
    let head_width = *system.config().hidden.last().unwrap();
    let mut lens_accuracy = Vec::new();
    for layer in 1..=system.n_layers() {
        if system.config().layer_dim(layer) != head_width || inputs.is_empty() {
            lens_accuracy.push(None);
            continue;
        }
        let mut hits = 0usize;
        for &i in &inputs {
            let act = system.encode_activation(dataset, i, layer)?;
            if system.lens_readout(&act)?.argmax() == dataset.gold_outputs[i].argmax() {
                hits += 1;
            }
        }
        lens_accuracy.push(Some(hits as f64 / inputs.len() as f64));
    }
    let verdict = if sweep.band.is_some() {
        Verdict::Positive
    } else {
        Verdict::Negative
    };
    let mut report = ExperimentReport::empty(spec, verdict);
    if sweep.degenerate_tau {
        report.diagnostics.push("τ at or above H(Z): every layer succeeds trivially".into());
    }
    report.locator = Some(LocatorResult { sweep, lens_accuracy });
    Ok(report)
}

/// Label distribution `modify` aims for on input `i`.
pub fn modify_target(spec: &ExperimentSpec, dataset: &TaskDataset, i: usize) -> Result<ProbDist> {
    let p = dataset.property(&spec.target)?.dists[i].clone();
    Ok(match spec.modify_target {
        ModifyTarget::TrueLabel => p,
        ModifyTarget::Shifted => {
            let m = p.masses();
            let k = m.len();
            ProbDist::new((0..k).map(|j| m[(j + k - 1) % k]).collect())?
        }
    })
}

fn build_intervention(
    spec: &ExperimentSpec,
    h: &[f64],
    q: &ProbDist,
    target: &ProxyFamily,
    controls: &[ProxyFamily],
    inlp: Option<&Intervention>,
) -> Result<Intervention> {
    match &spec.recipe {
        Recipe::Identity => Ok(Intervention::identity(h.len(), spec.layer)),
        Recipe::Inlp { .. } => Ok(inlp.expect("inlp projector built").clone()),
        Recipe::Gradient { config, lambda_control } => {
            let terms: Vec<ControlTerm<'_>> = controls
                .iter()
                .map(|f| ControlTerm {
                    members: &f.members,
                    lambda: *lambda_control,
                })
                .collect();
            Ok(intervene::gradient_intervention(h, q, &target.members, &terms, config, spec.layer, &spec.target)?
                .intervention)
        }
    }
}

fn shared_inlp(spec: &ExperimentSpec, dataset: &TaskDataset, system: &System) -> Result<Option<Intervention>> {
    let Recipe::Inlp {
        max_iters,
        chance_margin,
    } = &spec.recipe
    else {
        return Ok(None);
    };
    let acts = probe::layer_activations(system, dataset, spec.layer)?;
    let (train, test) = probe::probe_splits(&acts, dataset, &spec.target)?;
    Ok(Some(
        intervene::inlp(
            &train,
            &test,
            &spec.target,
            spec.layer,
            *max_iters,
            *chance_margin,
            &spec.constraints.hyper,
            spec.seed,
        )?
        .intervention,
    ))
}

fn target_dist(spec: &ExperimentSpec, dataset: &TaskDataset, target: &ProxyFamily, i: usize) -> Result<ProbDist> {
    match spec.criterion {
        Criterion::Use => Ok(ProbDist::uniform(target.members[0].arch.n_labels)),
        _ => modify_target(spec, dataset, i),
    }
}

/// An intervention built for one input with its condition evidence.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AppliedIntervention {
    pub input_id: usize,
    pub intervention: Intervention,
    pub displacement: f64,
    pub target_condition: ConditionReport,
    pub control_condition: ConditionReport,
}

/// Builds the recipe's intervention for every selected input and checks
/// `ablate` (use) or `modify` (misrepresentation) together with `control`,
/// without running the decoder.
pub fn construct_interventions(
    spec: &ExperimentSpec,
    dataset: &TaskDataset,
    system: &System,
    target: &ProxyFamily,
    controls: &[ProxyFamily],
) -> Result<Vec<AppliedIntervention>> {
    spec.validate()?;
    if !matches!(spec.criterion, Criterion::Use | Criterion::Misrepresentation) {
        return Err(Error::InvalidConfig("not an intervention criterion".into()));
    }
    let inlp = shared_inlp(spec, dataset, system)?;
    let control_refs: Vec<&ProxyFamily> = controls.iter().collect();
    let mut out = Vec::new();
    for i in select_inputs(spec, dataset, system)? {
        let h = system.encode(&dataset.inputs[i], spec.layer)?.into_inner();
        let q = target_dist(spec, dataset, target, i)?;
        let a = build_intervention(spec, &h, &q, target, controls, inlp.as_ref())?;
        let ah = a.apply(i, &h)?;
        let target_condition = match spec.criterion {
            Criterion::Use => intervene::ablate_report(&h, &ah, target, spec.tolerances)?,
            _ => intervene::modify_report(&h, &ah, target, &q, spec.tolerances)?,
        };
        out.push(AppliedIntervention {
            input_id: i,
            displacement: a.displacement(i, &h)?,
            control_condition: intervene::control_report(&h, &ah, &control_refs, spec.tolerances)?,
            target_condition,
            intervention: a,
        });
    }
    Ok(out)
}

/// Use and Misrepresentation criteria with given families.
pub fn run_intervention_experiment_with(
    spec: &ExperimentSpec,
    dataset: &TaskDataset,
    system: &System,
    target: &ProxyFamily,
    controls: &[ProxyFamily],
) -> Result<ExperimentReport> {
    spec.validate()?;
    if !matches!(spec.criterion, Criterion::Use | Criterion::Misrepresentation) {
        return Err(Error::InvalidConfig("not an intervention criterion".into()));
    }
    let inputs = select_inputs(spec, dataset, system)?;
    let inlp = shared_inlp(spec, dataset, system)?;
    let control_refs: Vec<&ProxyFamily> = controls.iter().collect();
    let mut records = Vec::new();
    let mut task_deltas = Vec::new();
    for &i in &inputs {
        let input = &dataset.inputs[i];
        let gold = &dataset.gold_outputs[i];
        let h = system.encode(input, spec.layer)?.into_inner();
        let q = target_dist(spec, dataset, target, i)?;
        let a = build_intervention(spec, &h, &q, target, controls, inlp.as_ref())?;
        let ah = a.apply(i, &h)?;
        let target_condition = match spec.criterion {
            Criterion::Use => intervene::ablate_report(&h, &ah, target, spec.tolerances)?,
            _ => intervene::modify_report(&h, &ah, target, &q, spec.tolerances)?,
        };
        let control_condition = intervene::control_report(&h, &ah, &control_refs, spec.tolerances)?;
        let before = system.decode_vector(spec.layer, &h)?;
        let after = system.forward_with_intervention(i, input, &a, spec.layer)?;
        let displacement = a.displacement(i, &h)?;
        let mut baseline = 0.0;
        for draw in 0..spec.baseline_draws {
            let seed = rng::derive_seed(spec.seed, ((i as u64) << 16) | draw as u64);
            let r = intervene::matched_random_step(&a, i, &h, seed)?;
            let out = system.forward_with_intervention(i, input, &r, spec.layer)?;
            baseline += model::goodness(&out, gold, spec.goodness)?;
        }
        let record = InputRecord {
            input_id: i,
            goodness_before: model::goodness(&before, gold, spec.goodness)?,
            goodness_after: model::goodness(&after, gold, spec.goodness)?,
            goodness_baseline: baseline / spec.baseline_draws as f64,
            accuracy_before: model::goodness(&before, gold, Goodness::Accuracy)?,
            accuracy_after: model::goodness(&after, gold, Goodness::Accuracy)?,
            displacement,
            target_condition,
            control_condition,
        };
        task_deltas.push(record.delta());
        records.push(record);
    }
    let summary = summarise(spec, &records, &task_deltas);
    let verdict = intervention_verdict(spec, &summary);
    let mut report = ExperimentReport::empty(spec, verdict);
    if verdict == Verdict::ConditionsUnsatisfied {
        report.diagnostics.push(format!(
            "{} of {} selected inputs passed both condition checks; {} needed (target pass rate {:.3}, control pass rate {:.3})",
            summary.n_verified,
            summary.n_selected,
            spec.n_min_inputs,
            summary.target_pass_rate,
            summary.control_pass_rate
        ));
    }
    report.summary = summary;
    report.records = records;
    Ok(report)
}

fn run_with_families(spec: &ExperimentSpec, dataset: &TaskDataset, system: &System) -> Result<ExperimentReport> {
    match build_families(spec, dataset, system) {
        Ok((target, controls)) => run_intervention_experiment_with(spec, dataset, system, &target, &controls),
        Err(e @ Error::FamilyUnsatisfiable { .. }) => {
            spec.validate()?;
            let mut report = ExperimentReport::empty(spec, Verdict::ConditionsUnsatisfied);
            report.diagnostics.push(format!("{e}"));
            Ok(report)
        }
        Err(e) => Err(e),
    }
}

/// Use criterion: an `ablate` + `control` intervention degrades output
/// goodness beyond a budget-matched random step.
pub fn run_use_experiment(spec: &ExperimentSpec, dataset: &TaskDataset, system: &System) -> Result<ExperimentReport> {
    if spec.criterion != Criterion::Use {
        return Err(Error::InvalidConfig("spec criterion is not use".into()));
    }
    run_with_families(spec, dataset, system)
}

/// Misrepresentation criterion: a `correct` intervention improves output
/// goodness on system errors.
pub fn run_misrepresentation_experiment(
    spec: &ExperimentSpec,
    dataset: &TaskDataset,
    system: &System,
) -> Result<ExperimentReport> {
    if spec.criterion != Criterion::Misrepresentation {
        return Err(Error::InvalidConfig("spec criterion is not misrepresentation".into()));
    }
    run_with_families(spec, dataset, system)
}

pub fn run_experiment(spec: &ExperimentSpec, dataset: &TaskDataset, system: &System) -> Result<ExperimentReport> {
    match spec.criterion {
        Criterion::Information => run_information_experiment(spec, dataset, system),
        Criterion::Use => run_use_experiment(spec, dataset, system),
        Criterion::Misrepresentation => run_misrepresentation_experiment(spec, dataset, system),
        Criterion::Locator => run_locator_experiment(spec, dataset, system),
    }
}

/// Per-input control-family drift of a targeted gradient intervention and
/// of a budget-matched random step.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DriftComparison {
    pub targeted: Vec<f64>,
    pub random: Vec<f64>,
    pub test: RankTest,
}

/// Ablates `target` on each activation with `lambda_control` on the
/// control family and compares control drift with a matched random step.
pub fn targeted_vs_random_drift(
    hs: &[Vec<f64>],
    target: &ProxyFamily,
    control: &ProxyFamily,
    config: &GradientConfig,
    lambda_control: f64,
    alternative: Alternative,
    seed: u64,
) -> Result<DriftComparison> {
    let mut targeted = Vec::new();
    let mut random = Vec::new();
    let q = ProbDist::uniform(target.members[0].arch.n_labels);
    let terms = [ControlTerm {
        members: &control.members,
        lambda: lambda_control,
    }];
    let terms: &[ControlTerm<'_>] = if lambda_control == 0.0 { &[] } else { &terms };
    for (i, h) in hs.iter().enumerate() {
        let out = intervene::gradient_intervention(h, &q, &target.members, terms, config, target.layer, &target.property)?;
        targeted.push(intervene::family_drift(&control.members, h, &out.final_h)?);
        let r = intervene::matched_random_step(&out.intervention, i, h, rng::derive_seed(seed, i as u64))?;
        random.push(intervene::family_drift(&control.members, h, &r.apply(i, h)?)?);
    }
    let diffs: Vec<f64> = targeted.iter().zip(&random).map(|(a, b)| a - b).collect();
    Ok(DriftComparison {
        test: stats::signed_rank_test(&diffs, alternative),
        targeted,
        random,
    })
}

/// Paired control drift with and without the control penalty.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PenaltyComparison {
    pub drift_without: Vec<f64>,
    pub drift_with: Vec<f64>,
    pub reached_without: usize,
    pub reached_with: usize,
    pub test: RankTest,
}

/// Runs the same target-side stopping rule with `λ_Y = 0` and `λ_Y =
/// lambda` and tests whether the penalty lowers control drift.
pub fn compare_control_penalty(
    hs: &[Vec<f64>],
    target: &ProxyFamily,
    control: &ProxyFamily,
    config: &GradientConfig,
    lambda: f64,
) -> Result<PenaltyComparison> {
    let q = ProbDist::uniform(target.members[0].arch.n_labels);
    let term = [ControlTerm {
        members: &control.members,
        lambda,
    }];
    let mut drift_without = Vec::new();
    let mut drift_with = Vec::new();
    let mut reached = [0usize; 2];
    for h in hs {
        for (k, terms) in [&[][..], &term[..]].into_iter().enumerate() {
            let out = intervene::gradient_intervention(h, &q, &target.members, terms, config, target.layer, &target.property)?;
            if matches!(
                out.stop,
                intervene::StopReason::TargetKl | intervene::StopReason::EntropyFloor
            ) {
                reached[k] += 1;
            }
            let d = intervene::family_drift(&control.members, h, &out.final_h)?;
            if k == 0 {
                drift_without.push(d);
            } else {
                drift_with.push(d);
            }
        }
    }
    let diffs: Vec<f64> = drift_with.iter().zip(&drift_without).map(|(a, b)| a - b).collect();
    Ok(PenaltyComparison {
        test: stats::signed_rank_test(&diffs, Alternative::Less),
        drift_without,
        drift_with,
        reached_without: reached[0],
        reached_with: reached[1],
    })
}

/// Activations for `indices` at the family's layer.
pub fn activations_for(system: &System, dataset: &TaskDataset, layer: usize, indices: &[usize]) -> Result<Vec<Activation>> {
    indices.iter().map(|&i| system.encode_activation(dataset, i, layer)).collect()
}
