//! Interventions `a: R^d → R^d` on activations and the `ablate`, `control`
//! and `modify` condition checks against proxy families.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::model::{ActivationMap, System};
use crate::numeric::{complement_projector, entropy_slice, kl_slice, orthonormal_basis, ProbDist, RealMatrix};
use crate::probe::{self, Probe, ProbeArch, ProbeData, ProbeFamily, ProbeHyper, ProxyFamily};
use crate::rng;
use crate::task::TaskDataset;

pub const DEFAULT_MARGIN: f64 = 1e-6;
pub const DEFAULT_EPS_CTRL: f64 = 0.05;
pub const DEFAULT_CHANCE_MARGIN: f64 = 0.02;
pub const MIN_DRIFT_TRIALS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Tolerances {
    /// Slack for the strict inequalities of `ablate` and `modify`, nats.
    pub margin: f64,
    /// Largest KL drift `control` admits, nats.
    pub eps_ctrl: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            eps_ctrl: DEFAULT_EPS_CTRL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum InterventionKind {
    InputSwap,
    InlpProjection,
    Gradient,
    RandomStep,
    RandomSubspace,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "form", rename_all = "snake_case"))]
pub enum InterventionMap {
    /// `h ↦ h + δ`.
    Translation { delta: Vec<f64> },
    /// `h ↦ P h`.
    Projection { matrix: RealMatrix },
    /// `h(s) ↦ value`, defined only for input `source_input`.
    Replace { source_input: usize, value: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InlpIteration {
    pub iteration: usize,
    /// Eval accuracy of the probe trained on the current projection.
    pub accuracy: f64,
    pub chance: f64,
    /// Dimension projected out after this iteration.
    pub removed_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum StopReason {
    TargetKl,
    EntropyFloor,
    MaxSteps,
    NoDescent,
    ZeroStep,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GradientStep {
    pub step: usize,
    pub loss: f64,
    pub alpha: f64,
    /// Mean `KL(q ‖ g(h))` over the main members.
    pub target_kl: f64,
    /// Per control term, mean `KL(g_Y(h⁰) ‖ g_Y(h))`.
    pub control_kls: Vec<f64>,
    pub displacement: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "log", rename_all = "snake_case"))]
pub enum ConstructionLog {
    None,
    Inlp {
        iterations: Vec<InlpIteration>,
        converged: bool,
    },
    Gradient {
        steps: Vec<GradientStep>,
        stop: StopReason,
    },
    Random {
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Intervention {
    pub kind: InterventionKind,
    pub layer: usize,
    pub target_property: Option<String>,
    pub target_dist: Option<ProbDist>,
    pub map: InterventionMap,
    pub log: ConstructionLog,
}

impl Intervention {
    pub fn dim(&self) -> usize {
        match &self.map {
            InterventionMap::Translation { delta } => delta.len(),
            InterventionMap::Projection { matrix } => matrix.cols(),
            InterventionMap::Replace { value, .. } => value.len(),
        }
    }

    pub fn apply(&self, input_id: usize, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "intervention input",
                expected: self.dim(),
                got: h.len(),
            });
        }
        Ok(match &self.map {
            InterventionMap::Translation { delta } => h.iter().zip(delta).map(|(a, b)| a + b).collect(),
            InterventionMap::Projection { matrix } => matrix.mul_vec(h),
            InterventionMap::Replace { source_input, value } => {
                if *source_input != input_id {
                    return Err(Error::WrongInput {
                        expected: *source_input,
                        got: input_id,
                    });
                }
                value.clone()
            }
        })
    }

    /// `‖a(h) − h‖`, the budget spent on `h`.
    pub fn displacement(&self, input_id: usize, h: &[f64]) -> Result<f64> {
        Ok(math::distance(&self.apply(input_id, h)?, h))
    }

    pub fn identity(dim: usize, layer: usize) -> Self {
        Self {
            kind: InterventionKind::RandomStep,
            layer,
            target_property: None,
            target_dist: None,
            map: InterventionMap::Translation { delta: vec![0.0; dim] },
            log: ConstructionLog::None,
        }
    }
}

impl ActivationMap for Intervention {
    fn apply_to(&self, input_id: usize, h: &[f64]) -> Result<Vec<f64>> {
        self.apply(input_id, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Condition {
    Ablate,
    Control,
    Modify,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProbeEntry {
    pub property: String,
    pub probe_seed: u64,
    pub h_before: f64,
    pub h_after: f64,
    /// `control`: `KL(g(h) ‖ g(a(h)))`; `modify`: `KL(q ‖ g(h))`.
    pub kl_before: Option<f64>,
    /// `modify`: `KL(q ‖ g(a(h)))`.
    pub kl_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConditionReport {
    pub condition: Condition,
    pub entries: Vec<ProbeEntry>,
    pub tolerances: Tolerances,
    pub passed: bool,
    pub max_kl: f64,
    pub mean_kl: f64,
}

impl ConditionReport {
    fn entry_ok(&self, e: &ProbeEntry) -> bool {
        let t = &self.tolerances;
        match self.condition {
            Condition::Ablate => e.h_after > e.h_before + t.margin,
            Condition::Control => e.kl_before.is_some_and(|k| k <= t.eps_ctrl),
            Condition::Modify => match (e.kl_before, e.kl_after) {
                (Some(b), Some(a)) => a < b - t.margin,
                _ => false,
            },
        }
    }

    /// The verdict implied by the entries and tolerances.
    pub fn recompute(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| self.entry_ok(e))
    }

    fn finish(condition: Condition, entries: Vec<ProbeEntry>, tolerances: Tolerances) -> Self {
        let kls: Vec<f64> = entries
            .iter()
            .filter_map(|e| match condition {
                Condition::Modify => e.kl_after,
                _ => e.kl_before,
            })
            .collect();
        let max_kl = kls.iter().copied().fold(0.0, f64::max);
        let mean_kl = crate::stats::mean(&kls);
        let mut r = Self {
            condition,
            entries,
            tolerances,
            passed: false,
            max_kl,
            mean_kl,
        };
        r.passed = r.recompute();
        r
    }
}

fn predictions(p: &Probe, h: &[f64]) -> Result<Vec<f64>> {
    Ok(p.predict(h)?.masses().to_vec())
}

/// `ablate`: every member's prediction entropy rises by more than the margin.
pub fn ablate_report(h: &[f64], ah: &[f64], family: &ProxyFamily, tol: Tolerances) -> Result<ConditionReport> {
    if family.members.is_empty() {
        return Err(Error::Precondition("ablate check needs a non-empty family".into()));
    }
    let mut entries = Vec::new();
    for m in &family.members {
        entries.push(ProbeEntry {
            property: family.property.clone(),
            probe_seed: m.seed,
            h_before: entropy_slice(&predictions(m, h)?),
            h_after: entropy_slice(&predictions(m, ah)?),
            kl_before: None,
            kl_after: None,
        });
    }
    Ok(ConditionReport::finish(Condition::Ablate, entries, tol))
}

/// `control`: every member of every control family keeps
/// `KL(g(h) ‖ g(a(h))) ≤ ε_ctrl`.
pub fn control_report(h: &[f64], ah: &[f64], families: &[&ProxyFamily], tol: Tolerances) -> Result<ConditionReport> {
    if families.is_empty() || families.iter().any(|f| f.members.is_empty()) {
        return Err(Error::Precondition("control check needs non-empty control families".into()));
    }
    let mut entries = Vec::new();
    for f in families {
        for m in &f.members {
            let before = predictions(m, h)?;
            let after = predictions(m, ah)?;
            entries.push(ProbeEntry {
                property: f.property.clone(),
                probe_seed: m.seed,
                h_before: entropy_slice(&before),
                h_after: entropy_slice(&after),
                kl_before: Some(kl_slice(&before, &after)),
                kl_after: None,
            });
        }
    }
    Ok(ConditionReport::finish(Condition::Control, entries, tol))
}

/// `modify`: every member moves strictly closer to `q` in `KL(q ‖ ·)`.
pub fn modify_report(
    h: &[f64],
    ah: &[f64],
    family: &ProxyFamily,
    q: &ProbDist,
    tol: Tolerances,
) -> Result<ConditionReport> {
    if family.members.is_empty() {
        return Err(Error::Precondition("modify check needs a non-empty family".into()));
    }
    let mut entries = Vec::new();
    for m in &family.members {
        if q.len() != m.arch.n_labels {
            return Err(Error::LabelMismatch {
                left: q.len(),
                right: m.arch.n_labels,
            });
        }
        let before = predictions(m, h)?;
        let after = predictions(m, ah)?;
        entries.push(ProbeEntry {
            property: family.property.clone(),
            probe_seed: m.seed,
            h_before: entropy_slice(&before),
            h_after: entropy_slice(&after),
            kl_before: Some(kl_slice(q.masses(), &before)),
            kl_after: Some(kl_slice(q.masses(), &after)),
        });
    }
    Ok(ConditionReport::finish(Condition::Modify, entries, tol))
}

pub fn check_ablate(
    a: &Intervention,
    input_id: usize,
    h: &[f64],
    family: &ProxyFamily,
    tol: Tolerances,
) -> Result<ConditionReport> {
    ablate_report(h, &a.apply(input_id, h)?, family, tol)
}

pub fn check_control(
    a: &Intervention,
    input_id: usize,
    h: &[f64],
    families: &[&ProxyFamily],
    tol: Tolerances,
) -> Result<ConditionReport> {
    control_report(h, &a.apply(input_id, h)?, families, tol)
}

pub fn check_modify(
    a: &Intervention,
    input_id: usize,
    h: &[f64],
    family: &ProxyFamily,
    q: &ProbDist,
    tol: Tolerances,
) -> Result<ConditionReport> {
    modify_report(h, &a.apply(input_id, h)?, family, q, tol)
}

/// `a: h(s) ↦ h(s′)`, usable on input `s` only.
pub fn input_swap_intervention(
    system: &System,
    dataset: &TaskDataset,
    s: usize,
    s_prime: usize,
    layer: usize,
) -> Result<Intervention> {
    if s >= dataset.len() || s_prime >= dataset.len() {
        return Err(Error::InvalidConfig(format!("input index out of range ({s}, {s_prime})")));
    }
    let value = system.encode(&dataset.inputs[s_prime], layer)?.into_inner();
    Ok(Intervention {
        kind: InterventionKind::InputSwap,
        layer,
        target_property: None,
        target_dist: None,
        map: InterventionMap::Replace { source_input: s, value },
        log: ConstructionLog::None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InlpOutcome {
    pub intervention: Intervention,
    pub iterations: Vec<InlpIteration>,
    pub converged: bool,
    /// The bias-free probes whose kernels were composed.
    pub probes: Vec<Probe>,
}

/// Majority-label frequency.
fn chance_accuracy(data: &ProbeData) -> f64 {
    let n_labels = data.ys.first().map_or(0, |y| y.len());
    let mut counts = vec![0usize; n_labels];
    for y in &data.ys {
        counts[y.argmax()] += 1;
    }
    counts.into_iter().max().unwrap_or(0) as f64 / data.len().max(1) as f64
}

fn project_all(p: &RealMatrix, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    xs.iter().map(|x| p.mul_vec(x)).collect()
}

/// Iterative nullspace projection: trains a bias-free linear probe on the
/// projected activations, removes its row space, and stops once a fresh
/// probe is within `chance_margin` of chance on `eval`. `max_iters`
/// defaults to the activation dimension.
pub fn inlp(
    train: &ProbeData,
    eval: &ProbeData,
    property: &str,
    layer: usize,
    max_iters: Option<usize>,
    chance_margin: f64,
    hyper: &ProbeHyper,
    seed: u64,
) -> Result<InlpOutcome> {
    if train.is_empty() || eval.is_empty() {
        return Err(Error::EmptySplit);
    }
    let d = train.xs[0].len();
    let arch = ProbeArch {
        family: ProbeFamily::Linear,
        input_dim: d,
        n_labels: train.ys[0].len(),
        bias: false,
        input_dropout: 0.0,
    };
    let chance = chance_accuracy(eval);
    let mut projector = RealMatrix::identity(d);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut removed = 0;
    let mut iterations = Vec::new();
    let mut probes = Vec::new();
    let mut converged = false;
    for it in 1..=max_iters.unwrap_or(d) {
        let ptrain = ProbeData {
            xs: project_all(&projector, &train.xs),
            ys: train.ys.clone(),
        };
        let peval = ProbeData {
            xs: project_all(&projector, &eval.xs),
            ys: eval.ys.clone(),
        };
        let p = probe::train_probe(&ptrain, &arch, hyper, rng::derive_seed(seed, it as u64))?;
        let accuracy = probe::probe_accuracy(&p, &peval)?;
        if accuracy <= chance + chance_margin {
            iterations.push(InlpIteration {
                iteration: it,
                accuracy,
                chance,
                removed_dim: removed,
            });
            converged = true;
            break;
        }
        let w = p.weight_matrix().expect("linear probe");
        rows.extend((0..w.rows()).map(|r| w.row(r).to_vec()));
        let basis = orthonormal_basis(&rows, d);
        removed = basis.len();
        projector = complement_projector(&basis, d);
        iterations.push(InlpIteration {
            iteration: it,
            accuracy,
            chance,
            removed_dim: removed,
        });
        probes.push(p);
        if removed >= d {
            break;
        }
    }
    if !converged {
        log::warn!("inlp on {property}: no convergence after {} iterations", iterations.len());
    }
    Ok(InlpOutcome {
        intervention: Intervention {
            kind: InterventionKind::InlpProjection,
            layer,
            target_property: Some(property.into()),
            target_dist: None,
            map: InterventionMap::Projection { matrix: projector },
            log: ConstructionLog::Inlp {
                iterations: iterations.clone(),
                converged,
            },
        },
        iterations,
        converged,
        probes,
    })
}

/// A penalty keeping one control family's predictions at their values on
/// `h⁰`.
#[derive(Debug, Clone, Copy)]
pub struct ControlTerm<'a> {
    pub members: &'a [Probe],
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct GradientConfig {
    pub alpha: f64,
    pub max_steps: usize,
    /// Stop once every main member has `KL(q ‖ g(h)) ≤ target_kl`.
    #[cfg_attr(feature = "serde", serde(default))]
    pub target_kl: Option<f64>,
    /// Stop once every main member's prediction entropy reaches this.
    #[cfg_attr(feature = "serde", serde(default))]
    pub entropy_floor: Option<f64>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub lambda_disp: f64,
}

impl Default for GradientConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            max_steps: 1000,
            target_kl: Some(0.01),
            entropy_floor: None,
            lambda_disp: 0.0,
        }
    }
}

/// Composite loss and its gradient in `h`:
/// `mean_g CE(q, g(h)) + Σ_Y λ_Y · mean_g CE(g(h⁰), g(h)) + λ_disp‖h − h⁰‖²`.
pub fn composite_loss(
    h: &[f64],
    h0: &[f64],
    q: &[f64],
    main: &[Probe],
    controls: &[(ControlTerm<'_>, Vec<Vec<f64>>)],
    lambda_disp: f64,
) -> (f64, Vec<f64>) {
    let d = h.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; d];
    let mut add = |members: &[Probe], targets: &mut dyn FnMut(usize) -> Vec<f64>, weight: f64| {
        let w = weight / members.len() as f64;
        for (i, m) in members.iter().enumerate() {
            let (l, g) = m.input_gradient(h, &targets(i));
            loss += w * l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += w * b;
            }
        }
    };
    add(main, &mut |_| q.to_vec(), 1.0);
    for (term, refs) in controls {
        if term.lambda != 0.0 {
            add(term.members, &mut |i| refs[i].clone(), term.lambda);
        }
    }
    if lambda_disp != 0.0 {
        for i in 0..d {
            let diff = h[i] - h0[i];
            loss += lambda_disp * diff * diff;
            grad[i] += 2.0 * lambda_disp * diff;
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientOutcome {
    pub intervention: Intervention,
    pub final_h: Vec<f64>,
    pub steps: Vec<GradientStep>,
    pub stop: StopReason,
}

fn mean_kl_to(members: &[Probe], refs: impl Fn(usize) -> Vec<f64>, h: &[f64], reverse: bool) -> f64 {
    let total: f64 = members
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let p = m.predict(h).expect("finite activation");
            if reverse {
                kl_slice(p.masses(), &refs(i))
            } else {
                kl_slice(&refs(i), p.masses())
            }
        })
        .sum();
    total / members.len().max(1) as f64
}

/// Gradient descent on the composite loss from `h⁰`. A step that raises
/// the loss is retried with α halved, up to 10 times; an accepted step
/// grows α by 1.5, up to 64 times the configured value. The result is
/// stored as the translation `h^K − h⁰`.
pub fn gradient_intervention(
    h0: &[f64],
    q: &ProbDist,
    main: &[Probe],
    controls: &[ControlTerm<'_>],
    cfg: &GradientConfig,
    layer: usize,
    target_property: &str,
) -> Result<GradientOutcome> {
    if main.is_empty() {
        return Err(Error::Precondition("gradient intervention needs at least one main probe".into()));
    }
    if !cfg.alpha.is_finite() || cfg.alpha < 0.0 {
        return Err(Error::InvalidConfig(format!("alpha {} must be finite and ≥ 0", cfg.alpha)));
    }
    for m in main {
        if m.arch.n_labels != q.len() {
            return Err(Error::LabelMismatch {
                left: q.len(),
                right: m.arch.n_labels,
            });
        }
    }
    let control_refs: Vec<(ControlTerm<'_>, Vec<Vec<f64>>)> = controls
        .iter()
        .map(|t| {
            let refs = t.members.iter().map(|m| predictions(m, h0)).collect::<Result<Vec<_>>>()?;
            Ok((*t, refs))
        })
        .collect::<Result<_>>()?;
    let qm = q.masses();
    let record = |step: usize, h: &[f64], loss: f64, alpha: f64| GradientStep {
        step,
        loss,
        alpha,
        target_kl: mean_kl_to(main, |_| qm.to_vec(), h, false),
        control_kls: control_refs
            .iter()
            .map(|(t, refs)| mean_kl_to(t.members, |i| refs[i].clone(), h, false))
            .collect(),
        displacement: math::distance(h, h0),
    };
    let stop_now = |h: &[f64]| -> Option<StopReason> {
        if let Some(t) = cfg.target_kl {
            if main.iter().all(|m| kl_slice(qm, m.predict(h).expect("finite").masses()) <= t) {
                return Some(StopReason::TargetKl);
            }
        }
        if let Some(f) = cfg.entropy_floor {
            if main.iter().all(|m| entropy_slice(m.predict(h).expect("finite").masses()) >= f) {
                return Some(StopReason::EntropyFloor);
            }
        }
        None
    };
    let mut h = h0.to_vec();
    let mut alpha = cfg.alpha;
    let (mut loss, mut grad) = composite_loss(&h, h0, qm, main, &control_refs, cfg.lambda_disp);
    let mut steps = vec![record(0, &h, loss, alpha)];
    let mut stop = StopReason::MaxSteps;
    if alpha == 0.0 {
        stop = StopReason::ZeroStep;
    } else if let Some(s) = stop_now(&h) {
        stop = s;
    } else {
        'outer: for step in 1..=cfg.max_steps {
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch: step, loss });
            }
            let mut tries = 0;
            loop {
                let cand: Vec<f64> = h.iter().zip(&grad).map(|(x, g)| x - alpha * g).collect();
                let (cl, cg) = composite_loss(&cand, h0, qm, main, &control_refs, cfg.lambda_disp);
                if cl.is_finite() && cl <= loss {
                    h = cand;
                    loss = cl;
                    grad = cg;
                    alpha = (alpha * 1.5).min(cfg.alpha * 64.0);
                    break;
                }
                tries += 1;
                if tries > 10 {
                    stop = StopReason::NoDescent;
                    break 'outer;
                }
                alpha *= 0.5;
            }
            steps.push(record(step, &h, loss, alpha));
            if let Some(s) = stop_now(&h) {
                stop = s;
                break;
            }
        }
    }
    let delta: Vec<f64> = h.iter().zip(h0).map(|(a, b)| a - b).collect();
    Ok(GradientOutcome {
        intervention: Intervention {
            kind: InterventionKind::Gradient,
            layer,
            target_property: Some(target_property.into()),
            target_dist: Some(q.clone()),
            map: InterventionMap::Translation { delta },
            log: ConstructionLog::Gradient {
                steps: steps.clone(),
                stop,
            },
        },
        final_h: h,
        steps,
        stop,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum RandomKind {
    /// Translation by a uniformly random direction of norm `norm`.
    Step { norm: f64 },
    /// Projection onto the orthocomplement of a random `dim`-subspace.
    Subspace { dim: usize },
}

pub fn random_baseline(kind: RandomKind, d: usize, layer: usize, seed: u64) -> Result<Intervention> {
    let mut r = rng::seeded(seed);
    let (ikind, map) = match kind {
        RandomKind::Step { norm } => {
            if !norm.is_finite() || norm < 0.0 {
                return Err(Error::InvalidConfig(format!("random step norm {norm}")));
            }
            let delta = rng::unit_direction(&mut r, d).into_iter().map(|v| v * norm).collect();
            (InterventionKind::RandomStep, InterventionMap::Translation { delta })
        }
        RandomKind::Subspace { dim } => {
            if dim == 0 || dim >= d {
                return Err(Error::InvalidConfig(format!("random subspace dim {dim} not in 1..{d}")));
            }
            let vecs: Vec<Vec<f64>> = (0..dim).map(|_| rng::gaussian_vec(&mut r, d, 1.0)).collect();
            let basis = orthonormal_basis(&vecs, d);
            (
                InterventionKind::RandomSubspace,
                InterventionMap::Projection {
                    matrix: complement_projector(&basis, d),
                },
            )
        }
    };
    Ok(Intervention {
        kind: ikind,
        layer,
        target_property: None,
        target_dist: None,
        map,
        log: ConstructionLog::Random { seed },
    })
}

/// Random step with the displacement `reference` spends on `h`.
pub fn matched_random_step(reference: &Intervention, input_id: usize, h: &[f64], seed: u64) -> Result<Intervention> {
    let norm = reference.displacement(input_id, h)?;
    random_baseline(RandomKind::Step { norm }, h.len(), reference.layer, seed)
}

/// Random subspace removal of the same dimension an INLP run removed.
pub fn matched_random_subspace(reference: &InlpOutcome, seed: u64) -> Result<Intervention> {
    let dim = reference.iterations.last().map_or(0, |i| i.removed_dim);
    random_baseline(RandomKind::Subspace { dim }, reference.intervention.dim(), reference.intervention.layer, seed)
}

/// Mean over members of `KL(g(h) ‖ g(h′))`.
pub fn family_drift(members: &[Probe], h: &[f64], moved: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for m in members {
        total += kl_slice(&predictions(m, h)?, &predictions(m, moved)?);
    }
    Ok(total / members.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DriftStats {
    pub property: String,
    pub budget: f64,
    /// One mean-over-members drift per activation and trial.
    pub drifts: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub q95: f64,
}

/// Distribution of family drift under random steps of norm `budget`.
pub fn measure_drift_under_random(
    hs: &[Vec<f64>],
    families: &[&ProxyFamily],
    n_trials: usize,
    budget: f64,
    seed: u64,
) -> Result<Vec<DriftStats>> {
    if n_trials < MIN_DRIFT_TRIALS {
        return Err(Error::InvalidConfig(format!(
            "need at least {MIN_DRIFT_TRIALS} trials, got {n_trials}"
        )));
    }
    if hs.is_empty() {
        return Err(Error::EmptySplit);
    }
    let d = hs[0].len();
    let mut out = Vec::new();
    for f in families {
        let mut drifts = Vec::with_capacity(hs.len() * n_trials);
        for (i, h) in hs.iter().enumerate() {
            for t in 0..n_trials {
                let s = rng::derive_seed(seed, (i * n_trials + t) as u64);
                let a = random_baseline(RandomKind::Step { norm: budget }, d, 0, s)?;
                drifts.push(family_drift(&f.members, h, &a.apply(0, h)?)?);
            }
        }
        out.push(DriftStats {
            property: f.property.clone(),
            budget,
            mean: crate::stats::mean(&drifts),
            median: crate::stats::median(&drifts),
            q95: crate::stats::quantile(&drifts, 0.95),
            drifts,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_gradient, relative_error, RealVector};
    use crate::probe::{ProbeConstraints, N_MIN};

    fn linear_probe(w: Vec<f64>, d: usize, seed: u64) -> Probe {
        let arch = ProbeArch {
            family: ProbeFamily::Linear,
            input_dim: d,
            n_labels: w.len() / d,
            bias: false,
            input_dropout: 0.0,
        };
        let mut p = Probe::from_parameters(arch, w, seed).unwrap();
        p.test_loss = Some(0.0);
        p
    }

    fn family(property: &str, members: Vec<Probe>) -> ProxyFamily {
        ProxyFamily {
            property: property.into(),
            layer: 1,
            constraints: ProbeConstraints::new(ProbeFamily::Linear),
            tau: 1.0,
            h_z: 2f64.ln(),
            members,
            attempts: vec![],
        }
    }

    fn z_family() -> ProxyFamily {
        family(
            "z",
            (0..N_MIN as u64)
                .map(|s| linear_probe(vec![-1.0 - 0.1 * s as f64, 0.2, 1.0 + 0.1 * s as f64, -0.2], 2, s))
                .collect(),
        )
    }

    fn y_family() -> ProxyFamily {
        family("y", (0..N_MIN as u64).map(|s| linear_probe(vec![0.0, -1.0, 0.0, 1.0], 2, s)).collect())
    }

    fn translation(delta: Vec<f64>) -> Intervention {
        Intervention {
            kind: InterventionKind::Gradient,
            layer: 1,
            target_property: None,
            target_dist: None,
            map: InterventionMap::Translation { delta },
            log: ConstructionLog::None,
        }
    }

    #[test]
    fn identity_fails_ablate_and_modify_passes_control() {
        let id = Intervention::identity(2, 1);
        let h = [1.0, 0.5];
        let tol = Tolerances::default();
        assert!(!check_ablate(&id, 0, &h, &z_family(), tol).unwrap().passed);
        let c = check_control(&id, 0, &h, &[&y_family()], tol).unwrap();
        assert!(c.passed);
        assert!(c.entries.iter().all(|e| e.kl_before == Some(0.0)));
        let q = ProbDist::degenerate(2, 0);
        assert!(!check_modify(&id, 0, &h, &z_family(), &q, tol).unwrap().passed);
    }

    #[test]
    fn mapping_to_uniform_point_ablates() {
        // Members all predict uniform at the origin.
        let h = [1.0, 0.0];
        let a = translation(vec![-1.0, 0.0]);
        let r = check_ablate(&a, 0, &h, &z_family(), Tolerances::default()).unwrap();
        assert!(r.passed);
        assert_eq!(r.recompute(), r.passed);
    }

    #[test]
    fn large_random_step_breaks_control() {
        let h = [0.3, 0.2];
        let a = random_baseline(RandomKind::Step { norm: 10.0 }, 2, 1, 3).unwrap();
        let y = y_family();
        let z = z_family();
        let r = check_control(&a, 0, &h, &[&y, &z], Tolerances::default()).unwrap();
        assert!(!r.passed);
        assert!(r.max_kl >= r.mean_kl);
    }

    #[test]
    fn modify_at_target_cannot_improve() {
        let f = family("z", vec![linear_probe(vec![0.0; 4], 2, 0); N_MIN]);
        let q = ProbDist::uniform(2);
        let a = translation(vec![0.5, 0.5]);
        assert!(!check_modify(&a, 0, &[0.3, 0.1], &f, &q, Tolerances::default()).unwrap().passed);
    }

    #[test]
    fn single_gradient_step_modifies() {
        let p = linear_probe(vec![-1.0, 0.2, 1.0, -0.2], 2, 0);
        let h = [0.4, -0.3];
        let q = ProbDist::degenerate(2, 0);
        let (_, g) = p.input_gradient(&h, q.masses());
        let a = translation(g.iter().map(|v| -0.05 * v).collect());
        let f = family("z", vec![p]);
        assert!(check_modify(&a, 0, &h, &f, &q, Tolerances::default()).unwrap().passed);
    }

    #[test]
    fn zero_alpha_leaves_h() {
        let f = z_family();
        let cfg = GradientConfig {
            alpha: 0.0,
            ..GradientConfig::default()
        };
        let out = gradient_intervention(&[1.0, 2.0], &ProbDist::uniform(2), &f.members, &[], &cfg, 1, "z").unwrap();
        assert_eq!(out.final_h, vec![1.0, 2.0]);
        assert_eq!(out.stop, StopReason::ZeroStep);
        assert_eq!(out.steps.len(), 1);
    }

    #[test]
    fn uniform_target_raises_entropy_to_near_max() {
        let p = linear_probe(vec![-1.5, 0.5, 1.5, -0.5], 2, 0);
        let h0 = [2.0, 1.0];
        let cfg = GradientConfig {
            alpha: 0.5,
            max_steps: 500,
            target_kl: None,
            entropy_floor: Some(2f64.ln() - 0.01),
            lambda_disp: 0.0,
        };
        let out = gradient_intervention(&h0, &ProbDist::uniform(2), std::slice::from_ref(&p), &[], &cfg, 1, "z").unwrap();
        assert_eq!(out.stop, StopReason::EntropyFloor);
        // For two labels KL(U ‖ g) and H(g) are both monotone in the logit gap.
        let kls: Vec<f64> = out.steps.iter().map(|s| s.target_kl).collect();
        assert!(kls.windows(2).all(|w| w[1] < w[0]));
        assert!(entropy_slice(p.predict(&out.final_h).unwrap().masses()) >= 2f64.ln() - 0.01);
        let losses: Vec<f64> = out.steps.iter().map(|s| s.loss).collect();
        assert!(losses.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let mut r = rng::seeded(2);
        for _ in 0..20 {
            let mk = |r: &mut rng::LabRng, s| linear_probe(rng::gaussian_vec(r, 8, 1.0), 4, s);
            let main: Vec<Probe> = (0..3).map(|s| mk(&mut r, s)).collect();
            let ctrl: Vec<Probe> = (0..2).map(|s| mk(&mut r, s)).collect();
            let h0 = rng::gaussian_vec(&mut r, 4, 1.0);
            let h = rng::gaussian_vec(&mut r, 4, 1.0);
            let refs: Vec<Vec<f64>> = ctrl.iter().map(|m| predictions(m, &h0).unwrap()).collect();
            let controls = vec![(
                ControlTerm {
                    members: &ctrl,
                    lambda: 0.7,
                },
                refs,
            )];
            let q = [0.3, 0.7];
            let (_, g) = composite_loss(&h, &h0, &q, &main, &controls, 0.2);
            let f = |x: &[f64]| composite_loss(x, &h0, &q, &main, &controls, 0.2).0;
            let num = finite_diff_gradient(f, &RealVector::new(h).unwrap(), 1e-5).unwrap();
            assert!(relative_error(&g, num.as_slice()) <= 1e-4);
        }
    }

    #[test]
    fn random_baselines() {
        let id = random_baseline(RandomKind::Step { norm: 0.0 }, 4, 1, 1).unwrap();
        assert_eq!(id.apply(0, &[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        let a = random_baseline(RandomKind::Step { norm: 2.5 }, 4, 1, 1).unwrap();
        assert!((a.displacement(0, &[0.0; 4]).unwrap() - 2.5).abs() < 1e-12);
        let s = random_baseline(RandomKind::Subspace { dim: 3 }, 7, 1, 9).unwrap();
        let InterventionMap::Projection { matrix } = &s.map else {
            panic!()
        };
        assert!(matrix.asymmetry() <= 1e-8 && matrix.idempotence_error() <= 1e-8);
        let trace: f64 = (0..7).map(|i| matrix.get(i, i)).sum();
        assert!((trace - 4.0).abs() < 1e-9);
        assert!(random_baseline(RandomKind::Subspace { dim: 7 }, 7, 1, 9).is_err());
        assert!(random_baseline(RandomKind::Subspace { dim: 0 }, 7, 1, 9).is_err());
    }

    #[test]
    fn drift_needs_trials_and_is_zero_without_budget() {
        let y = y_family();
        let hs = vec![vec![0.1, 0.2], vec![-0.4, 0.3]];
        assert!(measure_drift_under_random(&hs, &[&y], 10, 1.0, 1).is_err());
        let s = measure_drift_under_random(&hs, &[&y], 30, 0.0, 1).unwrap();
        assert!(s[0].drifts.iter().all(|&d| d == 0.0));
        assert_eq!(s[0].drifts.len(), 60);
    }

    #[test]
    fn swap_is_input_specific() {
        let a = Intervention {
            kind: InterventionKind::InputSwap,
            layer: 1,
            target_property: None,
            target_dist: None,
            map: InterventionMap::Replace {
                source_input: 3,
                value: vec![1.0, 2.0],
            },
            log: ConstructionLog::None,
        };
        assert_eq!(a.apply(3, &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(a.apply(4, &[0.0, 0.0]), Err(Error::WrongInput { .. })));
    }

    /// Z at ±3 along a fixed direction, unit noise in its orthogonal
    /// complement.
    fn encoded(n: usize, seed: u64) -> ProbeData {
        let u = rng::unit_direction(&mut rng::seeded(0), 8);
        let mut r = rng::seeded(seed + 100);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let z = i % 2;
            let s = (2.0 * z as f64 - 1.0) * 3.0;
            let mut noise = rng::gaussian_vec(&mut r, 8, 1.0);
            let along = math::dot(&noise, &u);
            for (e, ui) in noise.iter_mut().zip(&u) {
                *e -= along * ui;
            }
            xs.push(noise.iter().zip(&u).map(|(e, ui)| e + s * ui).collect());
            ys.push(ProbDist::degenerate(2, z));
        }
        ProbeData { xs, ys }
    }

    #[test]
    fn inlp_removes_linear_code() {
        let train = encoded(400, 1);
        let eval = encoded(2000, 2);
        let out = inlp(&train, &eval, "z", 1, None, DEFAULT_CHANCE_MARGIN, &ProbeHyper::default(), 5).unwrap();
        assert!(out.converged);
        assert!(out.iterations.len() <= 3);
        let removed = out.iterations.last().unwrap().removed_dim;
        assert!(removed <= out.probes.len());
        let InterventionMap::Projection { matrix } = &out.intervention.map else {
            panic!()
        };
        assert!(matrix.asymmetry() <= 1e-8 && matrix.idempotence_error() <= 1e-8);
        for p in &out.probes {
            for x in eval.xs.iter().take(100) {
                let px = matrix.mul_vec(x);
                let w = p.weight_matrix().unwrap().mul_vec(&px);
                assert!(math::norm(&w) <= 1e-8 * math::norm(x).max(1.0));
                assert!(p.predict(&px).unwrap().total_variation(&ProbDist::uniform(2)) <= 1e-6);
            }
        }
    }
}
