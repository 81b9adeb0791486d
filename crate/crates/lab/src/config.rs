//! Stage configs in TOML.
//!
//! A config may name another config with `base = "path"` (relative to the
//! naming file); tables merge recursively and the naming file wins. Unknown
//! keys are rejected after merging.

use std::path::{Path, PathBuf};

use reprobe_core::experiment::{Criterion, ExperimentSpec, ModifyTarget, Recipe, Selection};
use reprobe_core::intervene::{GradientConfig, Tolerances};
use reprobe_core::model::{Arch, NuisanceChannel, SystemConfig, TrainHyper};
use reprobe_core::probe::{ProbeConstraints, DEFAULT_FAMILY_SIZE};
use reprobe_core::rng::derive_seed;
use reprobe_core::task::{AgreementConfig, Goodness, SplitName, TaggingConfig, TaskDataset};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::fsutil;

const MAX_BASE_DEPTH: usize = 16;

/// A parsed config with the hashes recorded in run manifests.
#[derive(Debug, Clone)]
pub struct Loaded<T> {
    pub value: T,
    pub path: PathBuf,
    /// SHA-256 of the file as written.
    pub file_sha256: String,
    /// SHA-256 of the merged table after resolving `base`.
    pub resolved_sha256: String,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn resolve(path: &Path, depth: usize) -> Result<toml::Table> {
    if depth > MAX_BASE_DEPTH {
        return Err(LabError::Config {
            path: path.to_path_buf(),
            message: "base chain too deep (cycle?)".into(),
        });
    }
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| LabError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    match table.remove("base") {
        None => Ok(table),
        Some(toml::Value::String(b)) => {
            let base_path = path.parent().unwrap_or(Path::new(".")).join(b);
            let mut base = resolve(&base_path, depth + 1)?;
            merge(&mut base, table);
            Ok(base)
        }
        Some(_) => Err(LabError::Config {
            path: path.to_path_buf(),
            message: "`base` must be a path string".into(),
        }),
    }
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<Loaded<T>> {
    let file_sha256 = fsutil::sha256_file(path)?;
    let table = resolve(path, 0)?;
    let resolved = toml::to_string(&table).expect("table serialises");
    let value = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| LabError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(Loaded {
        value,
        path: path.to_path_buf(),
        file_sha256,
        resolved_sha256: fsutil::sha256_hex(resolved.as_bytes()),
    })
}

pub fn parse<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| LabError::Config {
        path: PathBuf::from("<inline>"),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSection {
    Agreement(AgreementConfig),
    Tagging(TaggingConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub fractions: [f64; 4],
}

/// `cmd_gen`: generator seed is `seed`, split seed `derive(seed, 1)`,
/// control task `k` seed `derive(seed, 2 + k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub task: TaskSection,
    pub split: SplitSection,
    #[serde(default)]
    pub control_tasks: Vec<String>,
}

impl GenConfig {
    pub fn build(&self) -> Result<TaskDataset> {
        let d = match &self.task {
            TaskSection::Agreement(c) => reprobe_core::task::generate_agreement_task(c, self.seed)?,
            TaskSection::Tagging(c) => reprobe_core::task::generate_tagging_task(c, self.seed)?,
        };
        let mut d = d.split_with(self.split.fractions, derive_seed(self.seed, 1))?;
        for (k, p) in self.control_tasks.iter().enumerate() {
            d = d.attach_control_task(p, derive_seed(self.seed, 2 + k as u64))?;
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub arch: Arch,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub cut_layer: usize,
    #[serde(default)]
    pub nuisance: Option<NuisanceChannel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

/// Encoder-only fine-tune on gold outputs shifted by one label wherever
/// one of `tokens` sits at `position`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSection {
    pub position: usize,
    pub tokens: Vec<u32>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

/// `cmd_train`: initialisation seed is `seed`, SGD shuffling
/// `derive(seed, 1)`, corruption shuffling `derive(seed, 2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub system: SystemSection,
    pub hyper: HyperSection,
    #[serde(default)]
    pub corruption: Option<CorruptionSection>,
}

impl TrainConfig {
    pub fn system_config(&self, dataset: &TaskDataset) -> SystemConfig {
        SystemConfig {
            arch: self.system.arch,
            vocab_size: dataset.vocab_size,
            max_len: dataset.max_len,
            embed_dim: self.system.embed_dim,
            hidden: self.system.hidden.clone(),
            cut_layer: self.system.cut_layer,
            output_labels: dataset.output_labels.clone(),
            seed: self.seed,
            nuisance: self.system.nuisance.clone(),
        }
    }

    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            lr: self.hyper.lr,
            epochs: self.hyper.epochs,
            batch_size: self.hyper.batch_size,
            seed: derive_seed(self.seed, 1),
        }
    }

    pub fn corruption_hyper(&self) -> Option<TrainHyper> {
        self.corruption.as_ref().map(|c| TrainHyper {
            lr: c.lr,
            epochs: c.epochs,
            batch_size: c.batch_size,
            seed: derive_seed(self.seed, 2),
        })
    }
}

/// `cmd_probe`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub seed: u64,
    pub layer: usize,
    pub property: String,
    pub constraints: ProbeConstraints,
    #[serde(default = "default_family_size")]
    pub family_size: usize,
    #[serde(default)]
    pub tau: Option<f64>,
}

fn default_family_size() -> usize {
    DEFAULT_FAMILY_SIZE
}

/// Experiment settings; anything omitted takes the library default for
/// the criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub criterion: Criterion,
    pub layer: usize,
    pub target: String,
    #[serde(default)]
    pub controls: Vec<String>,
    pub constraints: Option<ProbeConstraints>,
    pub tau: Option<f64>,
    pub family_size: Option<usize>,
    pub recipe: Option<Recipe>,
    pub tolerances: Option<Tolerances>,
    pub selection: Option<Selection>,
    pub n_min_inputs: Option<usize>,
    pub baseline_draws: Option<usize>,
    pub modify_target: Option<ModifyTarget>,
    pub goodness: Option<Goodness>,
}

impl ExperimentSection {
    pub fn spec(&self, seed: u64) -> Result<ExperimentSpec> {
        let mut s = ExperimentSpec::new(self.criterion, self.layer, &self.target);
        s.controls = self.controls.clone();
        s.seed = seed;
        s.tau = self.tau;
        if let Some(c) = &self.constraints {
            s.constraints = c.clone();
        }
        if let Some(v) = self.family_size {
            s.family_size = v;
        }
        if let Some(v) = &self.recipe {
            s.recipe = v.clone();
        }
        if let Some(v) = self.tolerances {
            s.tolerances = v;
        }
        if let Some(v) = &self.selection {
            s.selection = v.clone();
        }
        if let Some(v) = self.n_min_inputs {
            s.n_min_inputs = v;
        }
        if let Some(v) = self.baseline_draws {
            s.baseline_draws = v;
        }
        if let Some(v) = self.modify_target {
            s.modify_target = v;
        }
        if let Some(v) = self.goodness {
            s.goodness = v;
        }
        s.validate()?;
        Ok(s)
    }
}

/// Paired drift measurements on the control family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMode {
    /// Same stopping rule with and without the control penalty.
    Penalty,
    /// Targeted intervention against a budget-matched random step.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSection {
    pub mode: DriftMode,
    pub layer: usize,
    pub target: String,
    pub control: String,
    pub constraints: ProbeConstraints,
    #[serde(default = "default_family_size")]
    pub family_size: usize,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub gradient: GradientConfig,
    pub lambda: f64,
    pub split: SplitName,
    pub n_inputs: usize,
}

/// `cmd_criteria`: exactly one of `experiment` and `drift`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriteriaConfig {
    pub seed: u64,
    #[serde(default)]
    pub experiment: Option<ExperimentSection>,
    #[serde(default)]
    pub drift: Option<DriftSection>,
}

impl CriteriaConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.experiment, &self.drift) {
            (Some(e), None) => e.spec(self.seed).map(|_| ()),
            (None, Some(d)) if d.target == d.control => Err(LabError::Invalid(format!(
                "control property {} is the target property",
                d.target
            ))),
            (None, Some(_)) => Ok(()),
            _ => Err(LabError::Invalid("criteria config needs exactly one of [experiment] and [drift]".into())),
        }
    }
}

/// `cmd_intervene`: the experiment section picks the condition (`use` →
/// ablate, `misrepresentation` → modify), recipe and selection; families
/// come from checkpoint files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterveneConfig {
    pub seed: u64,
    pub experiment: ExperimentSection,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "seed = 1\nbogus = 2\n[task]\nkind = \"agreement\"\nn_inputs = 100\nvocab_size = 20\nmax_len = 5\nn_distractors = 1\ncorrelation = 0.0\n[split]\nfractions = [0.5,0.1,0.2,0.2]\n";
        assert!(parse::<GenConfig>(text).is_err());
        let ok = text.replace("bogus = 2\n", "");
        parse::<GenConfig>(&ok).unwrap();
        let nested = ok.replace("correlation = 0.0", "correlation = 0.0\nwidth = 3");
        assert!(parse::<GenConfig>(&nested).is_err());
    }

    #[test]
    fn control_equal_to_target_is_rejected() {
        let c: CriteriaConfig = parse(
            "seed = 0\n[experiment]\ncriterion = \"use\"\nlayer = 2\ntarget = \"subject_number\"\ncontrols = [\"subject_number\"]\n",
        )
        .unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn base_composition_merges_tables() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("base.toml"),
            "seed = 1\n[system]\narch = \"mlp\"\nembed_dim = 8\nhidden = [8, 8]\ncut_layer = 1\n[hyper]\nlr = 0.1\nepochs = 3\nbatch_size = 4\n",
        )
        .unwrap();
        std::fs::write(dir.path().join("child.toml"), "base = \"base.toml\"\nseed = 9\n[hyper]\nepochs = 7\n").unwrap();
        let c: Loaded<TrainConfig> = load(&dir.path().join("child.toml")).unwrap();
        assert_eq!(c.value.seed, 9);
        assert_eq!(c.value.hyper.epochs, 7);
        assert_eq!(c.value.hyper.lr, 0.1);
        assert_eq!(c.value.system.hidden, vec![8, 8]);
    }

    #[test]
    fn base_cycle_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.toml"), "base = \"b.toml\"\n").unwrap();
        std::fs::write(dir.path().join("b.toml"), "base = \"a.toml\"\n").unwrap();
        assert!(matches!(
            load::<GenConfig>(&dir.path().join("a.toml")),
            Err(LabError::Config { .. })
        ));
    }

    #[test]
    fn omitted_experiment_fields_take_defaults() {
        let c: CriteriaConfig = parse(
            "seed = 3\n[experiment]\ncriterion = \"misrepresentation\"\nlayer = 2\ntarget = \"subject_number\"\ncontrols = [\"adjective_class\"]\n",
        )
        .unwrap();
        let spec = c.experiment.unwrap().spec(3).unwrap();
        let mut expect = ExperimentSpec::new(Criterion::Misrepresentation, 2, "subject_number");
        expect.controls = vec!["adjective_class".into()];
        expect.seed = 3;
        assert_eq!(spec, expect);
    }
}
