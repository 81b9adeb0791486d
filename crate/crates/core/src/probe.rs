//! Probes `g_Z: h ↦ 𝒫(Z)`, their training, success audit, proxy families,
//! control-task selectivity and layer sweeps.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::model::System;
use crate::numeric::{cross_entropy_slice, entropy_slice, softmax_slice, ProbDist, RealMatrix};
use crate::optim::Adam;
use crate::rng;
use crate::task::{SplitName, TaskDataset, CONTROL_SUFFIX};

/// Smallest number of successful probes that makes a proxy family.
pub const N_MIN: usize = 5;
pub const DEFAULT_FAMILY_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields))]
pub enum ProbeFamily {
    Linear,
    LowRankLinear { rank: usize },
    Mlp { hidden: usize },
}

impl ProbeFamily {
    pub fn describe(&self) -> String {
        match self {
            ProbeFamily::Linear => "linear".into(),
            ProbeFamily::LowRankLinear { rank } => format!("low-rank-linear({rank})"),
            ProbeFamily::Mlp { hidden } => format!("mlp({hidden})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ProbeHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 60,
            batch_size: 32,
            weight_decay: 1e-3,
        }
    }
}

/// Architecture class and complexity bound for the probes of a family.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ProbeConstraints {
    pub family: ProbeFamily,
    #[cfg_attr(feature = "serde", serde(default = "default_true"))]
    pub bias: bool,
    #[cfg_attr(feature = "serde", serde(default))]
    pub input_dropout: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub hyper: ProbeHyper,
}

#[cfg(feature = "serde")]
fn default_true() -> bool {
    true
}

impl ProbeConstraints {
    pub fn new(family: ProbeFamily) -> Self {
        Self {
            family,
            bias: true,
            input_dropout: 0.0,
            hyper: ProbeHyper::default(),
        }
    }

    pub fn arch(&self, input_dim: usize, n_labels: usize) -> Result<ProbeArch> {
        let arch = ProbeArch {
            family: self.family,
            input_dim,
            n_labels,
            bias: self.bias,
            input_dropout: self.input_dropout,
        };
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ProbeArch {
    pub family: ProbeFamily,
    pub input_dim: usize,
    pub n_labels: usize,
    pub bias: bool,
    pub input_dropout: f64,
}

impl ProbeArch {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.n_labels < 2 {
            return Err(Error::InvalidConfig("probe needs input_dim ≥ 1 and at least two labels".into()));
        }
        if !(0.0..1.0).contains(&self.input_dropout) {
            return Err(Error::InvalidConfig(format!(
                "input_dropout {} outside [0, 1)",
                self.input_dropout
            )));
        }
        match self.family {
            ProbeFamily::LowRankLinear { rank } => {
                if rank == 0 || rank > self.input_dim.min(self.n_labels) {
                    return Err(Error::InvalidConfig(format!(
                        "rank {rank} must be in 1..={}",
                        self.input_dim.min(self.n_labels)
                    )));
                }
            }
            ProbeFamily::Mlp { hidden: 0 } => {
                return Err(Error::InvalidConfig("mlp probe hidden size must be positive".into()));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        let (d, z) = (self.input_dim, self.n_labels);
        let b = if self.bias { z } else { 0 };
        match self.family {
            ProbeFamily::Linear => z * d + b,
            ProbeFamily::LowRankLinear { rank } => rank * d + z * rank + b,
            ProbeFamily::Mlp { hidden } => hidden * d + hidden + z * hidden + b,
        }
    }
}

/// Activations and label distributions for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeData {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<ProbDist>,
}

impl ProbeData {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Entropy of the mean label distribution.
    pub fn label_entropy(&self) -> Result<f64> {
        Ok(crate::numeric::entropy(&ProbDist::mean(&self.ys)?))
    }

    /// Builds the data for `indices` from activations indexed by input id.
    pub fn from_activations(
        activations: &[Vec<f64>],
        dataset: &TaskDataset,
        property: &str,
        indices: &[usize],
    ) -> Result<Self> {
        Ok(Self {
            xs: indices.iter().map(|&i| activations[i].clone()).collect(),
            ys: dataset.labels(property, indices)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Probe {
    pub arch: ProbeArch,
    pub parameters: Vec<f64>,
    pub seed: u64,
    pub train_loss: Option<f64>,
    pub test_loss: Option<f64>,
}

struct Pass {
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

impl Probe {
    pub fn from_parameters(arch: ProbeArch, parameters: Vec<f64>, seed: u64) -> Result<Self> {
        arch.validate()?;
        if parameters.len() != arch.n_params() {
            return Err(Error::DimensionMismatch {
                context: "probe parameters",
                expected: arch.n_params(),
                got: parameters.len(),
            });
        }
        if parameters.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("probe parameters"));
        }
        Ok(Self {
            arch,
            parameters,
            seed,
            train_loss: None,
            test_loss: None,
        })
    }

    fn init(arch: ProbeArch, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let (d, z) = (arch.input_dim, arch.n_labels);
        let mut params = Vec::with_capacity(arch.n_params());
        let block = |params: &mut Vec<f64>, n: usize, fan_in: usize, r: &mut rng::LabRng| {
            params.extend(rng::gaussian_vec(r, n, 0.1 / math::sqrt(fan_in as f64)));
        };
        match arch.family {
            ProbeFamily::Linear => block(&mut params, z * d, d, &mut r),
            ProbeFamily::LowRankLinear { rank } => {
                block(&mut params, rank * d, d, &mut r);
                block(&mut params, z * rank, rank, &mut r);
            }
            ProbeFamily::Mlp { hidden } => {
                block(&mut params, hidden * d, d, &mut r);
                params.extend(vec![0.0; hidden]);
                block(&mut params, z * hidden, hidden, &mut r);
            }
        }
        if arch.bias {
            params.extend(vec![0.0; z]);
        }
        Self {
            arch,
            parameters: params,
            seed,
            train_loss: None,
            test_loss: None,
        }
    }

    /// Slices `(first, hidden_bias, readout, out_bias)` of the parameter
    /// vector; unused parts are empty.
    fn parts(&self) -> (usize, usize, usize, usize) {
        let (d, z) = (self.arch.input_dim, self.arch.n_labels);
        match self.arch.family {
            ProbeFamily::Linear => (z * d, 0, 0, 0),
            ProbeFamily::LowRankLinear { rank } => (rank * d, 0, z * rank, 0),
            ProbeFamily::Mlp { hidden } => (hidden * d, hidden, z * hidden, 0),
        }
    }

    fn pass(&self, x: &[f64]) -> Pass {
        let z = self.arch.n_labels;
        let (n1, nb, n2, _) = self.parts();
        let p = &self.parameters;
        let w1 = &p[..n1];
        let bias = if self.arch.bias { &p[n1 + nb + n2..] } else { &[][..] };
        let rows = |w: &[f64], v: &[f64]| -> Vec<f64> {
            w.chunks(v.len()).map(|row| math::dot(row, v)).collect()
        };
        let (hidden, mut logits) = match self.arch.family {
            ProbeFamily::Linear => (Vec::new(), rows(w1, x)),
            ProbeFamily::LowRankLinear { .. } => {
                let u = rows(w1, x);
                let l = rows(&p[n1..n1 + n2], &u);
                (u, l)
            }
            ProbeFamily::Mlp { .. } => {
                let a: Vec<f64> = rows(w1, x)
                    .iter()
                    .zip(&p[n1..n1 + nb])
                    .map(|(v, b)| math::tanh(v + b))
                    .collect();
                let l = rows(&p[n1 + nb..n1 + nb + n2], &a);
                (a, l)
            }
        };
        for (l, b) in logits.iter_mut().zip(bias) {
            *l += b;
        }
        debug_assert_eq!(logits.len(), z);
        Pass {
            hidden,
            probs: softmax_slice(&logits),
        }
    }

    pub fn predict(&self, h: &[f64]) -> Result<ProbDist> {
        if h.len() != self.arch.input_dim {
            return Err(Error::DimensionMismatch {
                context: "probe input",
                expected: self.arch.input_dim,
                got: h.len(),
            });
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("probe input"));
        }
        ProbDist::new(self.pass(h).probs)
    }

    /// Adds `∂ CE(q, g(x)) / ∂θ` into `grad` and returns the loss.
    fn param_grad(&self, x: &[f64], q: &[f64], grad: &mut [f64]) -> f64 {
        let pass = self.pass(x);
        let loss = cross_entropy_slice(q, &pass.probs);
        let delta: Vec<f64> = pass.probs.iter().zip(q).map(|(p, y)| p - y).collect();
        let (n1, nb, n2, _) = self.parts();
        if self.arch.bias {
            for (g, d) in grad[n1 + nb + n2..].iter_mut().zip(&delta) {
                *g += d;
            }
        }
        let outer = |g: &mut [f64], a: &[f64], b: &[f64]| {
            for (r, ar) in a.iter().enumerate() {
                for (c, bc) in b.iter().enumerate() {
                    g[r * b.len() + c] += ar * bc;
                }
            }
        };
        let p = &self.parameters;
        match self.arch.family {
            ProbeFamily::Linear => outer(&mut grad[..n1], &delta, x),
            ProbeFamily::LowRankLinear { rank } => {
                let b = &p[n1..n1 + n2];
                outer(&mut grad[n1..n1 + n2], &delta, &pass.hidden);
                let du: Vec<f64> = (0..rank)
                    .map(|k| delta.iter().enumerate().map(|(z, d)| d * b[z * rank + k]).sum())
                    .collect();
                outer(&mut grad[..n1], &du, x);
            }
            ProbeFamily::Mlp { hidden } => {
                let w2 = &p[n1 + nb..n1 + nb + n2];
                outer(&mut grad[n1 + nb..n1 + nb + n2], &delta, &pass.hidden);
                let da: Vec<f64> = (0..hidden)
                    .map(|k| {
                        let back: f64 = delta.iter().enumerate().map(|(z, d)| d * w2[z * hidden + k]).sum();
                        back * (1.0 - pass.hidden[k] * pass.hidden[k])
                    })
                    .collect();
                for (g, d) in grad[n1..n1 + nb].iter_mut().zip(&da) {
                    *g += d;
                }
                outer(&mut grad[..n1], &da, x);
            }
        }
        loss
    }

    /// `CE(q, g(h))` and its gradient with respect to `h`.
    pub fn input_gradient(&self, h: &[f64], q: &[f64]) -> (f64, Vec<f64>) {
        let pass = self.pass(h);
        let loss = cross_entropy_slice(q, &pass.probs);
        let delta: Vec<f64> = pass.probs.iter().zip(q).map(|(p, y)| p - y).collect();
        let d = self.arch.input_dim;
        let (n1, nb, n2, _) = self.parts();
        let p = &self.parameters;
        let back = |w: &[f64], g: &[f64], cols: usize| -> Vec<f64> {
            let mut out = vec![0.0; cols];
            for (r, gr) in g.iter().enumerate() {
                for (o, wv) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                    *o += gr * wv;
                }
            }
            out
        };
        let grad = match self.arch.family {
            ProbeFamily::Linear => back(&p[..n1], &delta, d),
            ProbeFamily::LowRankLinear { rank } => {
                let du = back(&p[n1..n1 + n2], &delta, rank);
                back(&p[..n1], &du, d)
            }
            ProbeFamily::Mlp { hidden } => {
                let da: Vec<f64> = back(&p[n1 + nb..n1 + nb + n2], &delta, hidden)
                    .iter()
                    .zip(&pass.hidden)
                    .map(|(g, a)| g * (1.0 - a * a))
                    .collect();
                back(&p[..n1], &da, d)
            }
        };
        (loss, grad)
    }

    /// Effective logit matrix `W` (|Z| × d) of a linear or low-rank probe.
    pub fn weight_matrix(&self) -> Option<RealMatrix> {
        let (d, z) = (self.arch.input_dim, self.arch.n_labels);
        let (n1, _, n2, _) = self.parts();
        let p = &self.parameters;
        let data = match self.arch.family {
            ProbeFamily::Linear => p[..n1].to_vec(),
            ProbeFamily::LowRankLinear { rank } => {
                let a = &p[..n1];
                let b = &p[n1..n1 + n2];
                let mut w = vec![0.0; z * d];
                for r in 0..z {
                    for k in 0..rank {
                        for c in 0..d {
                            w[r * d + c] += b[r * rank + k] * a[k * d + c];
                        }
                    }
                }
                w
            }
            ProbeFamily::Mlp { .. } => return None,
        };
        RealMatrix::new(z, d, data).ok()
    }

    /// Subtracts the mean readout row. Softmax is invariant to this, and
    /// it bounds the rank of the linear part by `|Z| − 1`.
    fn centre_readout(&mut self) {
        let z = self.arch.n_labels;
        let (n1, nb, n2, _) = self.parts();
        let range = match self.arch.family {
            ProbeFamily::Linear => 0..n1,
            _ => n1 + nb..n1 + nb + n2,
        };
        let block = &mut self.parameters[range];
        let cols = block.len() / z;
        for c in 0..cols {
            let m: f64 = (0..z).map(|r| block[r * cols + c]).sum::<f64>() / z as f64;
            for r in 0..z {
                block[r * cols + c] -= m;
            }
        }
        if self.arch.bias {
            let b = &mut self.parameters[n1 + nb + n2..];
            let m: f64 = b.iter().sum::<f64>() / z as f64;
            for v in b {
                *v -= m;
            }
        }
    }

    /// Loss and parameter gradient over a batch, for gradient checks.
    pub fn batch_loss_gradient(&self, data: &ProbeData, indices: &[usize]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.parameters.len()];
        let mut loss = 0.0;
        for &i in indices {
            loss += self.param_grad(&data.xs[i], data.ys[i].masses(), &mut grad);
        }
        let n = indices.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }
}

fn check_data(arch: &ProbeArch, data: &ProbeData) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptySplit);
    }
    if data.xs.len() != data.ys.len() {
        return Err(Error::DimensionMismatch {
            context: "probe labels",
            expected: data.xs.len(),
            got: data.ys.len(),
        });
    }
    for (x, y) in data.xs.iter().zip(&data.ys) {
        if x.len() != arch.input_dim {
            return Err(Error::DimensionMismatch {
                context: "probe input",
                expected: arch.input_dim,
                got: x.len(),
            });
        }
        if y.len() != arch.n_labels {
            return Err(Error::LabelMismatch {
                left: y.len(),
                right: arch.n_labels,
            });
        }
    }
    Ok(())
}

/// Trains a probe by minimising mean cross-entropy with Adam and L2 weight
/// decay. Input dropout draws a fresh inverted mask per example and step.
pub fn train_probe(train: &ProbeData, arch: &ProbeArch, hyper: &ProbeHyper, seed: u64) -> Result<Probe> {
    arch.validate()?;
    check_data(arch, train)?;
    if hyper.batch_size == 0 || !(hyper.lr > 0.0) || hyper.weight_decay < 0.0 {
        return Err(Error::InvalidConfig("probe hyperparameters out of range".into()));
    }
    let mut probe = Probe::init(arch.clone(), seed);
    let mut r = rng::seeded(rng::derive_seed(seed, 0x5eed));
    let mut opt = Adam::new(probe.parameters.len(), hyper.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let keep = 1.0 - arch.input_dropout;
    for epoch in 1..=hyper.epochs {
        rng::shuffle(&mut r, &mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let mut grad = vec![0.0; probe.parameters.len()];
            let mut loss = 0.0;
            for &i in batch {
                let x: Vec<f64> = if arch.input_dropout > 0.0 {
                    train.xs[i]
                        .iter()
                        .map(|v| if rng::unit(&mut r) < keep { v / keep } else { 0.0 })
                        .collect()
                } else {
                    train.xs[i].clone()
                };
                loss += probe.param_grad(&x, train.ys[i].masses(), &mut grad);
            }
            let n = batch.len() as f64;
            for (g, p) in grad.iter_mut().zip(&probe.parameters) {
                *g = *g / n + hyper.weight_decay * p;
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, loss });
            }
            opt.step(&mut probe.parameters, &grad);
            epoch_loss += loss;
        }
        if !epoch_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: epoch_loss,
            });
        }
    }
    probe.centre_readout();
    probe.train_loss = Some(probe_loss(&probe, train)?);
    Ok(probe)
}

/// Trains on `train` and records the mean loss on `test`.
pub fn fit_probe(
    train: &ProbeData,
    test: &ProbeData,
    arch: &ProbeArch,
    hyper: &ProbeHyper,
    seed: u64,
) -> Result<Probe> {
    let mut probe = train_probe(train, arch, hyper, seed)?;
    probe.test_loss = Some(probe_loss(&probe, test)?);
    Ok(probe)
}

/// Mean cross-entropy of the probe's predictions to the labels.
pub fn probe_loss(probe: &Probe, data: &ProbeData) -> Result<f64> {
    check_data(&probe.arch, data)?;
    let total: f64 = data
        .xs
        .iter()
        .zip(&data.ys)
        .map(|(x, y)| cross_entropy_slice(y.masses(), &probe.pass(x).probs))
        .sum();
    Ok(total / data.len() as f64)
}

/// Fraction of inputs whose argmax prediction matches the label argmax.
pub fn probe_accuracy(probe: &Probe, data: &ProbeData) -> Result<f64> {
    check_data(&probe.arch, data)?;
    let hits = data
        .xs
        .iter()
        .zip(&data.ys)
        .filter(|(x, y)| {
            let p = ProbDist::new(probe.pass(x).probs).expect("softmax output");
            p.argmax() == y.argmax()
        })
        .count();
    Ok(hits as f64 / data.len() as f64)
}

pub fn is_successful(probe: &Probe, tau: f64) -> bool {
    probe.test_loss.is_some_and(|l| l <= tau)
}

pub fn mi_lower_bound(h_z: f64, avg_loss: f64) -> f64 {
    (h_z - avg_loss).max(0.0)
}

/// Information `h` carries about the probe's property: `−H(g(h))`.
pub fn info_relative_to_probe(probe: &Probe, h: &[f64]) -> Result<f64> {
    let p = probe.predict(h)?;
    Ok(-entropy_slice(p.masses()))
}

/// Default threshold: half the property entropy on `probe_train`.
pub fn default_tau(h_z: f64) -> f64 {
    0.5 * h_z
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProxyFamily {
    pub property: String,
    pub layer: usize,
    pub constraints: ProbeConstraints,
    pub tau: f64,
    /// Property entropy on `probe_train`, nats.
    pub h_z: f64,
    pub members: Vec<Probe>,
    /// Every seed tried with its test loss.
    pub attempts: Vec<(u64, f64)>,
}

impl ProxyFamily {
    /// Recomputes each member's loss on `test` and checks it matches the
    /// stored value and the threshold.
    pub fn audit(&self, test: &ProbeData) -> Result<()> {
        if self.members.len() < N_MIN {
            return Err(Error::Precondition(format!(
                "family has {} members, needs {N_MIN}",
                self.members.len()
            )));
        }
        for m in &self.members {
            let loss = probe_loss(m, test)?;
            if loss > self.tau || m.test_loss.is_none_or(|stored| (loss - stored).abs() > 1e-9) {
                return Err(Error::Precondition(format!(
                    "member seed {} has loss {loss} (stored {:?}, τ {})",
                    m.seed, m.test_loss, self.tau
                )));
            }
        }
        Ok(())
    }
}

/// Activations at `layer` for every dataset input.
pub fn layer_activations(system: &System, dataset: &TaskDataset, layer: usize) -> Result<Vec<Vec<f64>>> {
    dataset
        .inputs
        .iter()
        .map(|s| system.encode(s, layer).map(|v| v.into_inner()))
        .collect()
}

/// Train/test probe data for `property` on the probe splits.
pub fn probe_splits(
    activations: &[Vec<f64>],
    dataset: &TaskDataset,
    property: &str,
) -> Result<(ProbeData, ProbeData)> {
    Ok((
        ProbeData::from_activations(activations, dataset, property, dataset.split(SplitName::ProbeTrain))?,
        ProbeData::from_activations(activations, dataset, property, dataset.split(SplitName::ProbeTest))?,
    ))
}

fn train_members(
    train: &ProbeData,
    test: &ProbeData,
    constraints: &ProbeConstraints,
    n: usize,
    seed: u64,
) -> Result<Vec<Probe>> {
    let arch = constraints.arch(train.xs.first().map_or(0, |x| x.len()), train.ys.first().map_or(0, |y| y.len()))?;
    (0..n as u64)
        .map(|i| fit_probe(train, test, &arch, &constraints.hyper, rng::derive_seed(seed, i)))
        .collect()
}

/// Trains `n` probes with derived seeds on precomputed data and keeps the
/// successful ones. Fails with the per-seed losses if fewer than `N_MIN`
/// succeed.
pub fn sample_proxy_family_from(
    train: &ProbeData,
    test: &ProbeData,
    property: &str,
    layer: usize,
    constraints: &ProbeConstraints,
    n: usize,
    tau: Option<f64>,
    seed: u64,
) -> Result<ProxyFamily> {
    if n < N_MIN {
        return Err(Error::InvalidConfig(format!("family size {n} below {N_MIN}")));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptySplit);
    }
    let h_z = train.label_entropy()?;
    let tau = tau.unwrap_or_else(|| default_tau(h_z));
    let probes = train_members(train, test, constraints, n, seed)?;
    let attempts: Vec<(u64, f64)> = probes.iter().map(|p| (p.seed, p.test_loss.unwrap_or(f64::INFINITY))).collect();
    let members: Vec<Probe> = probes.into_iter().filter(|p| is_successful(p, tau)).collect();
    if members.len() < N_MIN {
        return Err(Error::FamilyUnsatisfiable {
            property: property.into(),
            attempted: n,
            successful: members.len(),
            needed: N_MIN,
            losses: attempts,
        });
    }
    Ok(ProxyFamily {
        property: property.into(),
        layer,
        constraints: constraints.clone(),
        tau,
        h_z,
        members,
        attempts,
    })
}

pub fn sample_proxy_family(
    dataset: &TaskDataset,
    system: &System,
    layer: usize,
    property: &str,
    constraints: &ProbeConstraints,
    n: usize,
    tau: Option<f64>,
    seed: u64,
) -> Result<ProxyFamily> {
    let acts = layer_activations(system, dataset, layer)?;
    let (train, test) = probe_splits(&acts, dataset, property)?;
    sample_proxy_family_from(&train, &test, property, layer, constraints, n, tau, seed)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Selectivity {
    pub real_loss: f64,
    pub control_loss: f64,
    /// `control_loss − real_loss`, nats.
    pub selectivity: f64,
    pub tau: f64,
    /// The control probe was evaluated on its own training inputs.
    pub leaked: bool,
    /// Control probe unsuccessful at τ, on a clean evaluation split.
    pub admitted: bool,
}

/// Compares a probe on the real property with one on its control task.
/// With `leak` the control probe is scored on its training inputs, which
/// exposes memorisation and is never admitted.
pub fn control_task_selectivity(
    activations: &[Vec<f64>],
    dataset: &TaskDataset,
    property: &str,
    constraints: &ProbeConstraints,
    tau: Option<f64>,
    seed: u64,
    leak: bool,
) -> Result<Selectivity> {
    let control = format!("{property}{CONTROL_SUFFIX}");
    dataset.property(&control)?;
    let (train, test) = probe_splits(activations, dataset, property)?;
    let (ctrain, ctest) = probe_splits(activations, dataset, &control)?;
    let arch = constraints.arch(train.xs[0].len(), train.ys[0].len())?;
    let h_z = train.label_entropy()?;
    let tau = tau.unwrap_or_else(|| default_tau(h_z));
    let real = fit_probe(&train, &test, &arch, &constraints.hyper, seed)?;
    let ctrl_eval = if leak { &ctrain } else { &ctest };
    let ctrl = fit_probe(&ctrain, ctrl_eval, &arch, &constraints.hyper, seed)?;
    let real_loss = real.test_loss.unwrap_or(f64::INFINITY);
    let control_loss = ctrl.test_loss.unwrap_or(f64::INFINITY);
    Ok(Selectivity {
        real_loss,
        control_loss,
        selectivity: control_loss - real_loss,
        tau,
        leaked: leak,
        admitted: !leak && control_loss > tau,
    })
}

/// Constraint ladder from least to most complex, skipping ranks that are
/// invalid for the given dimensions.
pub fn complexity_ladder(input_dim: usize, n_labels: usize) -> Vec<ProbeConstraints> {
    let mut ladder: Vec<ProbeConstraints> = [1, 2, 4]
        .into_iter()
        .filter(|&r| r <= input_dim.min(n_labels))
        .map(|rank| ProbeConstraints::new(ProbeFamily::LowRankLinear { rank }))
        .collect();
    ladder.push(ProbeConstraints::new(ProbeFamily::Linear));
    ladder.push(ProbeConstraints::new(ProbeFamily::Mlp { hidden: 16 }));
    ladder
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InformationEvidence {
    pub verdict: bool,
    pub tau: f64,
    pub h_z: f64,
    pub losses: Vec<(u64, f64)>,
    pub best_loss: f64,
    pub n_successful: usize,
    pub mi_lower_bound: f64,
}

/// True iff at least one of `n` probes succeeds at τ.
pub fn information_check_from(
    train: &ProbeData,
    test: &ProbeData,
    constraints: &ProbeConstraints,
    n: usize,
    tau: Option<f64>,
    seed: u64,
) -> Result<InformationEvidence> {
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one probe".into()));
    }
    let h_z = train.label_entropy()?;
    let tau = tau.unwrap_or_else(|| default_tau(h_z));
    let probes = train_members(train, test, constraints, n, seed)?;
    let losses: Vec<(u64, f64)> = probes.iter().map(|p| (p.seed, p.test_loss.unwrap_or(f64::INFINITY))).collect();
    let best_loss = losses.iter().map(|l| l.1).fold(f64::INFINITY, f64::min);
    let n_successful = probes.iter().filter(|p| is_successful(p, tau)).count();
    Ok(InformationEvidence {
        verdict: n_successful > 0,
        tau,
        h_z,
        losses,
        best_loss,
        n_successful,
        mi_lower_bound: mi_lower_bound(h_z, best_loss),
    })
}

pub fn information_check(
    dataset: &TaskDataset,
    system: &System,
    layer: usize,
    property: &str,
    constraints: &ProbeConstraints,
    tau: Option<f64>,
    n: usize,
    seed: u64,
) -> Result<InformationEvidence> {
    let acts = layer_activations(system, dataset, layer)?;
    let (train, test) = probe_splits(&acts, dataset, property)?;
    information_check_from(&train, &test, constraints, n, tau, seed)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerResult {
    pub layer: usize,
    pub success: bool,
    pub best_loss: f64,
    pub n_successful: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerSweep {
    pub property: String,
    pub tau: f64,
    pub h_z: f64,
    pub layers: Vec<LayerResult>,
    /// Longest run of consecutive successful layers (first on ties).
    pub band: Option<(usize, usize)>,
    /// τ at or above the no-information floor H(Z).
    pub degenerate_tau: bool,
}

/// Longest run of consecutive `true` entries as 1-based inclusive bounds.
pub fn contiguous_band(success: &[bool]) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    let mut start = None;
    for (i, &s) in success.iter().chain(core::iter::once(&false)).enumerate() {
        match (s, start) {
            (true, None) => start = Some(i),
            (false, Some(b)) => {
                let len = i - b;
                if best.is_none_or(|(lo, hi)| len > hi + 1 - lo) {
                    best = Some((b + 1, i));
                }
                start = None;
            }
            _ => {}
        }
    }
    best
}

/// One family attempt per layer; a layer succeeds iff the family is
/// satisfiable there.
pub fn layer_sweep(
    system: &System,
    dataset: &TaskDataset,
    property: &str,
    constraints: &ProbeConstraints,
    tau: Option<f64>,
    n: usize,
    seed: u64,
) -> Result<LayerSweep> {
    let mut layers = Vec::new();
    let mut h_z = 0.0;
    let mut used_tau = 0.0;
    for layer in 1..=system.n_layers() {
        let acts = layer_activations(system, dataset, layer)?;
        let (train, test) = probe_splits(&acts, dataset, property)?;
        h_z = train.label_entropy()?;
        used_tau = tau.unwrap_or_else(|| default_tau(h_z));
        let probes = train_members(&train, &test, constraints, n, rng::derive_seed(seed, layer as u64))?;
        let n_successful = probes.iter().filter(|p| is_successful(p, used_tau)).count();
        let best_loss = probes.iter().filter_map(|p| p.test_loss).fold(f64::INFINITY, f64::min);
        layers.push(LayerResult {
            layer,
            success: n_successful >= N_MIN,
            best_loss,
            n_successful,
        });
    }
    let degenerate_tau = used_tau >= h_z - 1e-9;
    if degenerate_tau {
        log::warn!("τ = {used_tau:.4} is at or above H({property}) = {h_z:.4}; every layer succeeds trivially");
    }
    let success: Vec<bool> = layers.iter().map(|l| l.success).collect();
    Ok(LayerSweep {
        property: property.into(),
        tau: used_tau,
        h_z,
        band: contiguous_band(&success),
        layers,
        degenerate_tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{entropy, finite_diff_gradient, relative_error, RealVector};
    use crate::rng::LabRng;

    fn separable(n: usize, d: usize, seed: u64) -> ProbeData {
        let mut r = rng::seeded(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let z = i % 2;
            let mut x = rng::gaussian_vec(&mut r, d, 0.3);
            x[0] += if z == 1 { 2.0 } else { -2.0 };
            xs.push(x);
            ys.push(ProbDist::degenerate(2, z));
        }
        ProbeData { xs, ys }
    }

    fn random_labels(n: usize, d: usize, r: &mut LabRng) -> ProbeData {
        ProbeData {
            xs: (0..n).map(|_| rng::gaussian_vec(r, d, 1.0)).collect(),
            ys: (0..n).map(|i| ProbDist::degenerate(2, i % 2)).collect(),
        }
    }

    fn arch(family: ProbeFamily, d: usize) -> ProbeArch {
        ProbeConstraints::new(family).arch(d, 2).unwrap()
    }

    #[test]
    fn separable_labels_are_learned() {
        let train = separable(200, 4, 1);
        let test = separable(200, 4, 2);
        let p = fit_probe(&train, &test, &arch(ProbeFamily::Linear, 4), &ProbeHyper::default(), 3).unwrap();
        assert!(p.test_loss.unwrap() <= 0.05, "{:?}", p.test_loss);
    }

    #[test]
    fn independent_labels_stay_at_floor() {
        let mut r = rng::seeded(5);
        let train = random_labels(300, 4, &mut r);
        let test = random_labels(300, 4, &mut r);
        let p = fit_probe(&train, &test, &arch(ProbeFamily::Linear, 4), &ProbeHyper::default(), 3).unwrap();
        assert!(p.test_loss.unwrap() >= 2f64.ln() - 0.05);
    }

    #[test]
    fn dropout_probe_survives_losing_either_copy() {
        // Two copies of the signal plus noise.
        let make = |seed| {
            let mut d = separable(300, 4, seed);
            for x in &mut d.xs {
                x[1] = x[0];
            }
            d
        };
        let (train, test) = (make(1), make(2));
        let tau = 0.5 * 2f64.ln();
        let mut a = arch(ProbeFamily::Linear, 4);
        a.input_dropout = 0.5;
        let p = fit_probe(&train, &test, &a, &ProbeHyper::default(), 9).unwrap();
        for drop in 0..2 {
            let mut t = test.clone();
            t.xs.iter_mut().for_each(|x| x[drop] = 0.0);
            assert!(probe_loss(&p, &t).unwrap() <= tau);
        }
    }

    #[test]
    fn training_is_seed_deterministic() {
        let d = separable(100, 3, 1);
        let mut a = arch(ProbeFamily::Mlp { hidden: 4 }, 3);
        a.input_dropout = 0.2;
        let h = ProbeHyper::default();
        assert_eq!(train_probe(&d, &a, &h, 7).unwrap(), train_probe(&d, &a, &h, 7).unwrap());
        assert_ne!(train_probe(&d, &a, &h, 7).unwrap(), train_probe(&d, &a, &h, 8).unwrap());
    }

    #[test]
    fn loss_matches_manual_average_and_empty_split_rejected() {
        let d = separable(20, 3, 4);
        let p = train_probe(&d, &arch(ProbeFamily::Linear, 3), &ProbeHyper::default(), 1).unwrap();
        let manual: f64 = d
            .xs
            .iter()
            .zip(&d.ys)
            .map(|(x, y)| {
                let q = p.predict(x).unwrap();
                -(0..2).map(|k| y.masses()[k] * q.masses()[k].max(1e-12).ln()).sum::<f64>()
            })
            .sum::<f64>()
            / 20.0;
        assert!((probe_loss(&p, &d).unwrap() - manual).abs() < 1e-12);
        let empty = ProbeData { xs: vec![], ys: vec![] };
        assert!(matches!(probe_loss(&p, &empty), Err(Error::EmptySplit)));
    }

    #[test]
    fn uniform_probe_loss_is_log_labels() {
        let a = ProbeArch {
            family: ProbeFamily::Linear,
            input_dim: 2,
            n_labels: 3,
            bias: false,
            input_dropout: 0.0,
        };
        let mut p = Probe::from_parameters(a, vec![0.0; 6], 0).unwrap();
        let data = ProbeData {
            xs: vec![vec![1.0, 2.0], vec![-1.0, 0.5]],
            ys: vec![ProbDist::degenerate(3, 0), ProbDist::degenerate(3, 2)],
        };
        assert!((probe_loss(&p, &data).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!((info_relative_to_probe(&p, &[3.0, 1.0]).unwrap() + 3f64.ln()).abs() < 1e-12);
        p.test_loss = Some(0.0);
        assert!(is_successful(&p, 1e-9));
    }

    #[test]
    fn degenerate_probe_carries_full_information() {
        let a = ProbeArch {
            family: ProbeFamily::Linear,
            input_dim: 1,
            n_labels: 2,
            bias: false,
            input_dropout: 0.0,
        };
        let p = Probe::from_parameters(a, vec![-1000.0, 1000.0], 0).unwrap();
        assert_eq!(info_relative_to_probe(&p, &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn mi_bound_arithmetic() {
        assert_eq!(mi_lower_bound(2f64.ln(), 2f64.ln()), 0.0);
        assert!((mi_lower_bound(2f64.ln(), 0.2) - 0.493147).abs() < 1e-6);
        assert_eq!(mi_lower_bound(0.1, 0.5), 0.0);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut r = rng::seeded(11);
        let data = ProbeData {
            xs: (0..6).map(|_| rng::gaussian_vec(&mut r, 5, 1.0)).collect(),
            ys: (0..6)
                .map(|_| ProbDist::from_weights(&[rng::unit(&mut r) + 0.1, rng::unit(&mut r) + 0.1, 0.3]).unwrap())
                .collect(),
        };
        let idx: Vec<usize> = (0..6).collect();
        for family in [
            ProbeFamily::Linear,
            ProbeFamily::LowRankLinear { rank: 2 },
            ProbeFamily::Mlp { hidden: 4 },
        ] {
            let a = ProbeConstraints::new(family).arch(5, 3).unwrap();
            let mut p = Probe::init(a, 3);
            p.parameters = rng::gaussian_vec(&mut r, p.parameters.len(), 0.7);
            let (_, analytic) = p.batch_loss_gradient(&data, &idx);
            let f = |theta: &[f64]| {
                let mut q = p.clone();
                q.parameters = theta.to_vec();
                q.batch_loss_gradient(&data, &idx).0
            };
            let numeric = finite_diff_gradient(f, &RealVector::new(p.parameters.clone()).unwrap(), 1e-5).unwrap();
            assert!(relative_error(&analytic, numeric.as_slice()) <= 1e-4, "{family:?}");

            let h = rng::gaussian_vec(&mut r, 5, 1.0);
            let q = [0.2, 0.5, 0.3];
            let (_, gin) = p.input_gradient(&h, &q);
            let fh = |x: &[f64]| cross_entropy_slice(&q, &p.pass(x).probs);
            let num = finite_diff_gradient(fh, &RealVector::new(h).unwrap(), 1e-5).unwrap();
            assert!(relative_error(&gin, num.as_slice()) <= 1e-4, "{family:?}");
        }
    }

    #[test]
    fn centring_keeps_predictions_and_rank() {
        let d = separable(50, 3, 2);
        let p = train_probe(&d, &arch(ProbeFamily::Linear, 3), &ProbeHyper::default(), 2).unwrap();
        let w = p.weight_matrix().unwrap();
        for c in 0..3 {
            assert!((w.get(0, c) + w.get(1, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn family_of_shuffled_labels_is_unsatisfiable() {
        let mut r = rng::seeded(1);
        let train = random_labels(200, 4, &mut r);
        let test = random_labels(200, 4, &mut r);
        let c = ProbeConstraints::new(ProbeFamily::Linear);
        match sample_proxy_family_from(&train, &test, "z", 1, &c, 8, None, 3) {
            Err(Error::FamilyUnsatisfiable { successful, losses, .. }) => {
                assert_eq!(successful, 0);
                assert_eq!(losses.len(), 8);
            }
            other => panic!("{other:?}"),
        }
        let ev = information_check_from(&train, &test, &c, 4, None, 3).unwrap();
        assert!(!ev.verdict);
    }

    #[test]
    fn family_of_encoded_property_is_full_and_audits() {
        let train = separable(200, 4, 1);
        let test = separable(200, 4, 2);
        let c = ProbeConstraints::new(ProbeFamily::LowRankLinear { rank: 1 });
        let fam = sample_proxy_family_from(&train, &test, "z", 1, &c, 8, None, 3).unwrap();
        assert_eq!(fam.members.len(), 8);
        fam.audit(&test).unwrap();
        assert!(sample_proxy_family_from(&train, &test, "z", 1, &c, 4, None, 3).is_err());
    }

    #[test]
    fn information_verdict_monotone_in_tau() {
        let mut r = rng::seeded(3);
        let train = random_labels(100, 2, &mut r);
        let test = random_labels(100, 2, &mut r);
        let c = ProbeConstraints::new(ProbeFamily::Linear);
        let mut prev = false;
        for tau in [0.1, 0.5, 0.69, 0.8, 2.0] {
            let v = information_check_from(&train, &test, &c, 3, Some(tau), 1).unwrap().verdict;
            assert!(v || !prev);
            prev = v;
        }
        assert!(prev);
    }

    #[test]
    fn band_is_longest_run() {
        assert_eq!(contiguous_band(&[false, true, true, false, true]), Some((2, 3)));
        assert_eq!(contiguous_band(&[false, false]), None);
        assert_eq!(contiguous_band(&[true, true, true]), Some((1, 3)));
    }

    #[test]
    fn ladder_skips_invalid_ranks() {
        let l = complexity_ladder(16, 2);
        assert_eq!(l.len(), 4);
        assert_eq!(l[0].family, ProbeFamily::LowRankLinear { rank: 1 });
        assert_eq!(l[3].family, ProbeFamily::Mlp { hidden: 16 });
        assert!(ProbeConstraints::new(ProbeFamily::LowRankLinear { rank: 3 }).arch(16, 2).is_err());
    }

    #[test]
    fn label_entropy_is_mean_entropy() {
        let d = ProbeData {
            xs: vec![vec![0.0]; 4],
            ys: vec![
                ProbDist::degenerate(2, 0),
                ProbDist::degenerate(2, 0),
                ProbDist::degenerate(2, 0),
                ProbDist::degenerate(2, 1),
            ],
        };
        let expected = entropy(&ProbDist::new(vec![0.75, 0.25]).unwrap());
        assert!((d.label_entropy().unwrap() - expected).abs() < 1e-12);
    }
}
