use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use reprobe_core::experiment::{self, ExperimentReport};
use reprobe_core::model::{self, TrainScope};
use reprobe_core::probe::{self, ProxyFamily};
use reprobe_core::stats::Alternative;
use reprobe_core::task::TaskDataset;

use crate::checkpoint;
use crate::config::{self, CriteriaConfig, DriftMode, GenConfig, InterveneConfig, Loaded, ProbeConfig, TrainConfig};
use crate::dataset;
use crate::error::{LabError, Result};
use crate::fsutil;
use crate::manifest::{self, RunManifest};
use crate::report::{self, AnyReport, InterventionArtifact};

#[derive(Debug, Parser)]
#[command(name = "reprobe", version, about = "Probe, intervene on and test representations in small trained systems")]
pub struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset file.
    Gen(StageArgs),
    /// Train a system checkpoint on a dataset.
    Train(TrainArgs),
    /// Sample a proxy family at one layer.
    Probe(ProbeArgs),
    /// Build interventions from families and check their conditions.
    Intervene(InterveneArgs),
    /// Run an Information, Use, Misrepresentation, locator or drift experiment.
    Criteria(CriteriaArgs),
    /// Render a report as a table or CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct StageArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Replaces the config's top-level seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub stage: StageArgs,
    #[arg(long)]
    pub dataset: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub stage: StageArgs,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub system: PathBuf,
}

#[derive(Debug, Args)]
pub struct InterveneArgs {
    #[command(flatten)]
    pub stage: StageArgs,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub system: PathBuf,
    /// Target-property family checkpoint.
    #[arg(long)]
    pub family: PathBuf,
    /// Control-property family checkpoints, one per control property.
    #[arg(long = "control")]
    pub controls: Vec<PathBuf>,
}

pub type CriteriaArgs = ProbeArgs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Csv,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Experiment or drift report JSON.
    pub report: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
    /// Write to a file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Intervene(a) => cmd_intervene(a),
        Command::Criteria(a) => cmd_criteria(a),
        Command::Report(a) => cmd_report(a),
    }
}

trait Seeded {
    fn seed_mut(&mut self) -> &mut u64;
}

macro_rules! seeded {
    ($($t:ty),*) => {$(
        impl Seeded for $t {
            fn seed_mut(&mut self) -> &mut u64 {
                &mut self.seed
            }
        }
    )*};
}

seeded!(GenConfig, TrainConfig, ProbeConfig, InterveneConfig, CriteriaConfig);

fn load_stage<T: serde::de::DeserializeOwned + Seeded>(a: &StageArgs) -> Result<Loaded<T>> {
    let mut loaded: Loaded<T> = config::load(&a.config)?;
    if let Some(s) = a.seed {
        *loaded.value.seed_mut() = s;
    }
    Ok(loaded)
}

/// Guards outputs, records inputs and writes the manifest before any
/// result.
fn begin<T>(command: &str, a: &StageArgs, loaded: &Loaded<T>, seed: u64, inputs: &[&Path], outputs: &[&Path]) -> Result<RunManifest> {
    for o in outputs {
        fsutil::guard_output(o, a.force)?;
    }
    let mut m = RunManifest::new(command).with_config(loaded);
    m.seeds.insert("seed".into(), seed);
    for i in inputs {
        m.input(i)?;
    }
    m.outputs = outputs.iter().map(|p| p.to_path_buf()).collect();
    m.write(&manifest::manifest_path(&a.out))?;
    Ok(m)
}

fn finish(mut m: RunManifest, a: &StageArgs) -> Result<()> {
    m.finished_unix = Some(manifest::now_unix());
    m.write(&manifest::manifest_path(&a.out))
}

fn provenance<T>(loaded: &Loaded<T>, seed: u64, inputs: &[(&str, &Path)]) -> Result<BTreeMap<String, String>> {
    let mut p = BTreeMap::new();
    p.insert("config_sha256".into(), loaded.resolved_sha256.clone());
    p.insert("seed".into(), seed.to_string());
    p.insert("tool_version".into(), manifest::TOOL_VERSION.into());
    p.insert("input_distribution".into(), "uniform empirical over dataset inputs".into());
    for (k, path) in inputs {
        p.insert(format!("{k}_sha256"), fsutil::sha256_file(path)?);
    }
    Ok(p)
}

pub fn cmd_gen(a: &StageArgs) -> Result<()> {
    let loaded: Loaded<GenConfig> = load_stage(a)?;
    let seed = loaded.value.seed;
    let m = begin("gen", a, &loaded, seed, &[], &[&a.out])?;
    let d = loaded.value.build()?;
    dataset::save(&d, &a.out)?;
    log::info!("wrote {} inputs to {}", d.len(), a.out.display());
    finish(m, a)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let loaded: Loaded<TrainConfig> = load_stage(&a.stage)?;
    let cfg = &loaded.value;
    let d = dataset::load(&a.dataset)?;
    let m = begin("train", &a.stage, &loaded, cfg.seed, &[&a.dataset], &[&a.stage.out])?;
    let mut sys = model::train_system(&d, cfg.system_config(&d), &cfg.hyper())?;
    if let (Some(c), Some(h)) = (&cfg.corruption, cfg.corruption_hyper()) {
        let (shifted, affected) = d.with_shifted_outputs(c.position, &c.tokens);
        log::info!("corruption fine-tune on {} shifted inputs", affected.len());
        sys.train_stage(&shifted, &h, TrainScope::Encoder)?;
    }
    let test = d.split(reprobe_core::task::SplitName::SysTest);
    log::info!("sys_test accuracy {:.4}", sys.accuracy(&d, test));
    checkpoint::save_system(&sys, &a.stage.out)?;
    finish(m, &a.stage)
}

pub fn cmd_probe(a: &ProbeArgs) -> Result<()> {
    let loaded: Loaded<ProbeConfig> = load_stage(&a.stage)?;
    let cfg = &loaded.value;
    let d = dataset::load(&a.dataset)?;
    let sys = checkpoint::load_system(&a.system)?;
    let m = begin("probe", &a.stage, &loaded, cfg.seed, &[&a.dataset, &a.system], &[&a.stage.out])?;
    let fam = probe::sample_proxy_family(
        &d,
        &sys,
        cfg.layer,
        &cfg.property,
        &cfg.constraints,
        cfg.family_size,
        cfg.tau,
        cfg.seed,
    )?;
    log::info!("{} of {} probes successful at τ = {:.4}", fam.members.len(), cfg.family_size, fam.tau);
    checkpoint::save_family(&fam, &a.stage.out)?;
    finish(m, &a.stage)
}

fn check_family(f: &ProxyFamily, property: &str, layer: usize, path: &Path) -> Result<()> {
    if f.property != property || f.layer != layer {
        return Err(LabError::Invalid(format!(
            "{}: family is for `{}` at layer {}, config expects `{property}` at layer {layer}",
            path.display(),
            f.property,
            f.layer
        )));
    }
    Ok(())
}

fn audit(f: &ProxyFamily, d: &TaskDataset, sys: &model::System) -> Result<()> {
    let acts = probe::layer_activations(sys, d, f.layer)?;
    let (_, test) = probe::probe_splits(&acts, d, &f.property)?;
    f.audit(&test)?;
    Ok(())
}

pub fn cmd_intervene(a: &InterveneArgs) -> Result<()> {
    let loaded: Loaded<InterveneConfig> = load_stage(&a.stage)?;
    let cfg = &loaded.value;
    let spec = cfg.experiment.spec(cfg.seed)?;
    if a.controls.len() != spec.controls.len() {
        return Err(LabError::Invalid(format!(
            "config declares {} control properties, {} --control families given",
            spec.controls.len(),
            a.controls.len()
        )));
    }
    let d = dataset::load(&a.dataset)?;
    let sys = checkpoint::load_system(&a.system)?;
    let target = checkpoint::load_family(&a.family)?;
    check_family(&target, &spec.target, spec.layer, &a.family)?;
    let mut controls = Vec::new();
    for (p, name) in a.controls.iter().zip(&spec.controls) {
        let f = checkpoint::load_family(p)?;
        check_family(&f, name, spec.layer, p)?;
        controls.push(f);
    }
    for f in std::iter::once(&target).chain(&controls) {
        audit(f, &d, &sys)?;
    }
    let mut inputs: Vec<&Path> = vec![&a.dataset, &a.system, &a.family];
    inputs.extend(a.controls.iter().map(|p| p.as_path()));
    let m = begin("intervene", &a.stage, &loaded, cfg.seed, &inputs, &[&a.stage.out])?;
    let records = experiment::construct_interventions(&spec, &d, &sys, &target, &controls)?;
    let mut art = InterventionArtifact::new(spec, records);
    art.provenance = provenance(
        &loaded,
        cfg.seed,
        &[("dataset", &a.dataset), ("system", &a.system), ("family", &a.family)],
    )?;
    fsutil::write_atomic(&a.stage.out, &report::to_json(&art))?;
    finish(m, &a.stage)
}

pub fn run_criteria(cfg: &CriteriaConfig, d: &TaskDataset, sys: &model::System) -> Result<AnyReport> {
    cfg.validate()?;
    if let Some(e) = &cfg.experiment {
        let spec = e.spec(cfg.seed)?;
        let r: ExperimentReport = experiment::run_experiment(&spec, d, sys)?;
        return Ok(AnyReport::Experiment(Box::new(r)));
    }
    let s = cfg.drift.as_ref().expect("validated");
    let acts = probe::layer_activations(sys, d, s.layer)?;
    let family = |property: &str, stream: u64| -> Result<ProxyFamily> {
        let (train, test) = probe::probe_splits(&acts, d, property)?;
        Ok(probe::sample_proxy_family_from(
            &train,
            &test,
            property,
            s.layer,
            &s.constraints,
            s.family_size,
            s.tau,
            reprobe_core::rng::derive_seed(cfg.seed, stream),
        )?)
    };
    let target = family(&s.target, 0)?;
    let control = family(&s.control, 1)?;
    let ids: Vec<usize> = d.split(s.split).iter().copied().take(s.n_inputs).collect();
    let hs: Vec<Vec<f64>> = ids.iter().map(|&i| acts[i].clone()).collect();
    let r = match s.mode {
        DriftMode::Penalty => {
            let c = experiment::compare_control_penalty(&hs, &target, &control, &s.gradient, s.lambda)?;
            report::drift_report(s, cfg.seed, ids, c.drift_with, c.drift_without, Some([c.reached_with, c.reached_without]), c.test)
        }
        DriftMode::Random => {
            let c = experiment::targeted_vs_random_drift(
                &hs,
                &target,
                &control,
                &s.gradient,
                s.lambda,
                Alternative::TwoSided,
                reprobe_core::rng::derive_seed(cfg.seed, 2),
            )?;
            report::drift_report(s, cfg.seed, ids, c.targeted, c.random, None, c.test)
        }
    };
    Ok(AnyReport::Drift(r))
}

pub fn cmd_criteria(a: &CriteriaArgs) -> Result<()> {
    let loaded: Loaded<CriteriaConfig> = load_stage(&a.stage)?;
    let cfg = &loaded.value;
    cfg.validate()?;
    let d = dataset::load(&a.dataset)?;
    let sys = checkpoint::load_system(&a.system)?;
    let csv = report::csv_path(&a.stage.out);
    let m = begin("criteria", &a.stage, &loaded, cfg.seed, &[&a.dataset, &a.system], &[&a.stage.out, &csv])?;
    let prov = provenance(&loaded, cfg.seed, &[("dataset", &a.dataset), ("system", &a.system)])?;
    let mut r = run_criteria(cfg, &d, &sys)?;
    match &mut r {
        AnyReport::Experiment(e) => {
            e.provenance = prov;
            fsutil::write_atomic(&a.stage.out, &report::to_json(e))?;
        }
        AnyReport::Drift(e) => {
            e.provenance = prov;
            fsutil::write_atomic(&a.stage.out, &report::to_json(e))?;
        }
    }
    fsutil::write_atomic(&csv, &report::csv_of(&r))?;
    log::info!("{}", report::render_table(&r));
    finish(m, &a.stage)
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let r = report::read_any(&a.report)?;
    let bytes = match a.format {
        Format::Table => report::render_table(&r).into_bytes(),
        Format::Csv => report::csv_of(&r),
    };
    match &a.out {
        Some(p) => {
            fsutil::guard_output(p, a.force)?;
            fsutil::write_atomic(p, &bytes)
        }
        None => std::io::stdout()
            .write_all(&bytes)
            .map_err(|e| LabError::io("<stdout>", e)),
    }
}
