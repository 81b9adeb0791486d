//! Systems and datasets shared by the bundled configs and the test suites.

use std::path::PathBuf;

use reprobe_core::model::{Arch, System, SystemConfig, TrainScope};
use reprobe_core::probe::ProbeData;
use reprobe_core::rng;
use reprobe_core::task::{Goodness, Property, PropertySpec, Splits, TaskDataset, TaskInput, TaskKind};
use reprobe_core::{math, ProbDist};

use crate::config::{self, GenConfig, TrainConfig};
use crate::error::Result;

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs")
}

pub fn gen_config(name: &str) -> Result<GenConfig> {
    Ok(config::load::<GenConfig>(&configs_dir().join(name))?.value)
}

pub fn train_config(name: &str) -> Result<TrainConfig> {
    Ok(config::load::<TrainConfig>(&configs_dir().join(name))?.value)
}

/// Trains the system a train config describes, including any corruption
/// fine-tune.
pub fn train(cfg: &TrainConfig, dataset: &TaskDataset) -> Result<System> {
    let mut sys = reprobe_core::model::train_system(dataset, cfg.system_config(dataset), &cfg.hyper())?;
    if let (Some(c), Some(h)) = (&cfg.corruption, cfg.corruption_hyper()) {
        let (shifted, _) = dataset.with_shifted_outputs(c.position, &c.tokens);
        sys.train_stage(&shifted, &h, TrainScope::Encoder)?;
    }
    Ok(sys)
}

/// Agreement dataset from `gen` and the system from `train`.
pub fn agreement(gen: &str, train_cfg: &str) -> Result<(TaskDataset, System)> {
    let d = gen_config(gen)?.build()?;
    let sys = train(&train_config(train_cfg)?, &d)?;
    Ok((d, sys))
}

/// The agreement architecture, initialised from `seed` and never trained.
pub fn untrained(dataset: &TaskDataset, seed: u64) -> Result<System> {
    let mut config = train_config("train_agreement.toml")?.system_config(dataset);
    config.seed = seed;
    Ok(System::new(config)?)
}

pub const XOR: &str = "xor";

/// A handcrafted three-layer MLP over inputs `[a, b, n, n′]`, where `a`,
/// `b` are binary tokens and `n`, `n′` noise tokens. Layer 1 is
/// `tanh(0.1·x)` and keeps `a`, `b` on separate axes, so `a XOR b` is not
/// linearly decodable there; layer 2 computes XOR on two units; layer 3
/// copies layer 2.
pub fn xor_locator(n_inputs: usize, seed: u64) -> Result<(TaskDataset, System)> {
    const D: usize = 8;
    const VOCAB: usize = 10;
    let mut r = rng::seeded(seed);
    let mut inputs = Vec::with_capacity(n_inputs);
    let mut xor = Vec::with_capacity(n_inputs);
    for _ in 0..n_inputs {
        let a = rng::below(&mut r, 2) as u32;
        let b = rng::below(&mut r, 2) as u32;
        let n1 = 4 + rng::below(&mut r, 6) as u32;
        let n2 = 4 + rng::below(&mut r, 6) as u32;
        inputs.push(TaskInput {
            tokens: vec![a, 2 + b, n1, n2],
        });
        xor.push(ProbDist::degenerate(2, (a != b) as usize));
    }
    let unsplit = TaskDataset::from_parts(
        TaskKind::Custom {
            description: "handcrafted xor locator".into(),
        },
        seed,
        VOCAB,
        4,
        vec!["same".into(), "different".into()],
        Goodness::NegCrossEntropy,
        inputs,
        xor.clone(),
        vec![Property {
            spec: PropertySpec::new(XOR, &["same", "different"])?,
            dists: xor,
        }],
        Splits {
            sys_train: (0..n_inputs).collect(),
            ..Splits::default()
        },
    )?;
    let dataset = unsplit.split_with([0.2, 0.1, 0.4, 0.3], rng::derive_seed(seed, 1))?;

    let mut sys = System::new(SystemConfig {
        arch: Arch::Mlp,
        vocab_size: VOCAB,
        max_len: 4,
        embed_dim: D,
        hidden: vec![D; 3],
        cut_layer: 2,
        output_labels: dataset.output_labels.clone(),
        seed,
        nuisance: None,
    })?;
    {
        let (tok, pos) = sys.embedding_parameters_mut();
        tok.fill(0.0);
        pos.fill(0.0);
        let at = |p: usize, t: usize, i: usize| (p * VOCAB + t) * D + i;
        pos[at(0, 0, 0)] = -1.0;
        pos[at(0, 1, 0)] = 1.0;
        pos[at(1, 2, 1)] = -1.0;
        pos[at(1, 3, 1)] = 1.0;
        for t in 4..VOCAB {
            for (p, axes) in [(2, 2..5), (3, 5..8)] {
                for i in axes {
                    pos[at(p, t, i)] = rng::gaussian(&mut r);
                }
            }
        }
    }
    let set = |sys: &mut System, layer: usize, f: &dyn Fn(usize, usize) -> f64, bias: &dyn Fn(usize) -> f64| {
        let (w, b) = sys.layer_parameters_mut(layer);
        for row in 0..D {
            for col in 0..D {
                w[row * D + col] = f(row, col);
            }
            b[row] = bias(row);
        }
    };
    set(&mut sys, 1, &|r, c| if r == c { 0.1 } else { 0.0 }, &|_| 0.0);
    // Units 0 and 1 threshold y0 + y1 at ∓θ; their difference is high only
    // when a ≠ b.
    let (k, theta) = (30.0, 0.1);
    set(
        &mut sys,
        2,
        &|r, c| match (r, c) {
            (0 | 1, 0 | 1) => k,
            (r, c) if r == c => 1.0,
            _ => 0.0,
        },
        &|r| match r {
            0 => -k * theta,
            1 => k * theta,
            _ => 0.0,
        },
    );
    set(&mut sys, 3, &|r, c| if r == c { 1.0 } else { 0.0 }, &|_| 0.0);
    {
        let (w, b) = sys.head_parameters_mut();
        w.fill(0.0);
        b.fill(0.0);
        // "different" logit − "same" logit ∝ u1 − u0 − 1.
        w[D] = -4.0;
        w[D + 1] = 4.0;
        b[0] = 2.0;
        b[1] = -2.0;
    }
    Ok((dataset, sys))
}

/// Activation values of the discrete channel.
pub const CHANNEL_VALUES: [f64; 4] = [-1.5, -0.5, 0.5, 1.5];
/// Per activation value, counts of `z = 0` and `z = 1` (1000 each value;
/// `z = 1` frequency ≈ σ(1.2·v)).
pub const CHANNEL_COUNTS: [[usize; 2]; 4] = [[858, 142], [646, 354], [354, 646], [142, 858]];

/// Every (activation, label) pair of the channel, in a fixed order.
pub fn discrete_channel() -> ProbeData {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (v, counts) in CHANNEL_VALUES.iter().zip(CHANNEL_COUNTS) {
        for (z, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                xs.push(vec![*v]);
                ys.push(ProbDist::degenerate(2, z));
            }
        }
    }
    ProbeData { xs, ys }
}

/// Binary Z at ±3 along a fixed unit direction of R^8, with unit Gaussian
/// noise confined to the orthogonal complement.
pub fn inlp_data(n: usize, seed: u64) -> ProbeData {
    let u = inlp_direction();
    let mut r = rng::seeded(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let z = i % 2;
        let s = if z == 1 { 3.0 } else { -3.0 };
        let mut x = rng::gaussian_vec(&mut r, 8, 1.0);
        let along = math::dot(&x, &u);
        for (xi, ui) in x.iter_mut().zip(&u) {
            *xi += (s - along) * ui;
        }
        xs.push(x);
        ys.push(ProbDist::degenerate(2, z));
    }
    ProbeData { xs, ys }
}

pub fn inlp_direction() -> Vec<f64> {
    rng::unit_direction(&mut rng::seeded(0x1A1F), 8)
}
