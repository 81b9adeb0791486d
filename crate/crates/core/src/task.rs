//! Synthetic tasks with ground-truth property labels.
//!
//! Two generators are provided: subject/verb number agreement with
//! attractor nouns and a controllable correlation between subject and
//! attractor number, and a tagging task whose latent tag fixes both the
//! token template and the gold output. Control tasks re-label a property
//! through a random bijection per input type (exact token sequence).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numeric::{entropy, ProbDist};
use crate::rng::{self, LabRng};
use crate::stats;

pub const SUBJECT_NUMBER: &str = "subject_number";
pub const DISTRACTOR_NUMBER: &str = "distractor_number";
pub const ADJECTIVE_CLASS: &str = "adjective_class";
pub const TAG: &str = "tag";
pub const LENGTH_CLASS: &str = "length_class";

/// Suffix appended to a property name by [`TaskDataset::attach_control_task`].
pub const CONTROL_SUFFIX: &str = "_control";

/// Agreement vocabulary layout.
pub mod agreement_vocab {
    pub const DET: u32 = 0;
    pub const PREP: u32 = 1;
    /// Adjectives 2,3 are class 0 ("size"), 4,5 class 1 ("colour").
    pub const ADJ_START: u32 = 2;
    pub const N_ADJ: u32 = 4;
    pub const NOUN_START: u32 = ADJ_START + N_ADJ;
    /// Token position of the adjective.
    pub const ADJ_POSITION: usize = 1;
    /// Token position of the subject noun.
    pub const SUBJECT_POSITION: usize = 2;

    pub fn noun(lemma: u32, plural: bool) -> u32 {
        NOUN_START + 2 * lemma + plural as u32
    }

    pub fn lemmas(vocab_size: usize) -> u32 {
        (vocab_size as u32).saturating_sub(NOUN_START) / 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PropertySpec {
    pub name: String,
    pub labels: Vec<String>,
}

impl PropertySpec {
    pub fn new(name: &str, labels: &[&str]) -> Result<Self> {
        let spec = Self {
            name: name.to_string(),
            labels: labels.iter().map(|l| l.to_string()).collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::InvalidConfig("empty property name".into()));
        }
        if self.labels.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "property `{}` needs at least two labels",
                self.name
            )));
        }
        for (i, l) in self.labels.iter().enumerate() {
            if self.labels[..i].contains(l) {
                return Err(Error::InvalidConfig(format!(
                    "property `{}` repeats label `{l}`",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TaskInput {
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Goodness {
    NegCrossEntropy,
    Accuracy,
}

/// Per-input label distributions `p_Z(s)` for one property.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Property {
    pub spec: PropertySpec,
    pub dists: Vec<ProbDist>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SplitName {
    SysTrain,
    SysTest,
    ProbeTrain,
    ProbeTest,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Splits {
    pub sys_train: Vec<usize>,
    pub sys_test: Vec<usize>,
    pub probe_train: Vec<usize>,
    pub probe_test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::SysTrain => &self.sys_train,
            SplitName::SysTest => &self.sys_test,
            SplitName::ProbeTrain => &self.probe_train,
            SplitName::ProbeTest => &self.probe_test,
        }
    }

    fn all(&self) -> [&[usize]; 4] {
        [
            &self.sys_train,
            &self.sys_test,
            &self.probe_train,
            &self.probe_test,
        ]
    }
}

/// Bijection applied to every input with the given token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TypeBijection {
    pub tokens: Vec<u32>,
    /// `permutation[label] = π(label)`.
    pub permutation: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ControlTaskMap {
    pub source: String,
    pub property: String,
    pub seed: u64,
    pub bijections: Vec<TypeBijection>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct AgreementConfig {
    pub n_inputs: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub n_distractors: usize,
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TaggingConfig {
    pub n_inputs: usize,
    pub n_tags: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum TaskKind {
    Agreement(AgreementConfig),
    Tagging(TaggingConfig),
    Custom { description: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task: TaskKind,
    pub seed: u64,
    pub vocab_size: usize,
    pub max_len: usize,
    pub output_labels: Vec<String>,
    pub goodness: Goodness,
    pub inputs: Vec<TaskInput>,
    pub gold_outputs: Vec<ProbDist>,
    pub properties: Vec<Property>,
    pub splits: Splits,
    pub control_maps: Vec<ControlTaskMap>,
}

impl TaskDataset {
    /// Assembles and validates a dataset from its parts.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        task: TaskKind,
        seed: u64,
        vocab_size: usize,
        max_len: usize,
        output_labels: Vec<String>,
        goodness: Goodness,
        inputs: Vec<TaskInput>,
        gold_outputs: Vec<ProbDist>,
        properties: Vec<Property>,
        splits: Splits,
    ) -> Result<Self> {
        let d = Self {
            task,
            seed,
            vocab_size,
            max_len,
            output_labels,
            goodness,
            inputs,
            gold_outputs,
            properties,
            splits,
            control_maps: Vec::new(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.inputs.len();
        if self.output_labels.len() < 2 {
            return Err(Error::InvalidConfig("need at least two output labels".into()));
        }
        for (i, input) in self.inputs.iter().enumerate() {
            if input.tokens.is_empty() || input.tokens.len() > self.max_len {
                return Err(Error::InvalidConfig(format!(
                    "input {i} has length {} outside 1..={}",
                    input.tokens.len(),
                    self.max_len
                )));
            }
            if let Some(t) = input.tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
                return Err(Error::InvalidConfig(format!(
                    "input {i} token {t} outside vocabulary of {}",
                    self.vocab_size
                )));
            }
        }
        if self.gold_outputs.len() != n {
            return Err(Error::DimensionMismatch {
                context: "gold outputs",
                expected: n,
                got: self.gold_outputs.len(),
            });
        }
        if let Some(g) = self.gold_outputs.iter().find(|g| g.len() != self.output_labels.len()) {
            return Err(Error::LabelMismatch {
                left: g.len(),
                right: self.output_labels.len(),
            });
        }
        for (i, p) in self.properties.iter().enumerate() {
            p.spec.validate()?;
            if self.properties[..i].iter().any(|q| q.spec.name == p.spec.name) {
                return Err(Error::InvalidConfig(format!(
                    "property `{}` declared twice",
                    p.spec.name
                )));
            }
            if p.dists.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "property distributions",
                    expected: n,
                    got: p.dists.len(),
                });
            }
            if let Some(d) = p.dists.iter().find(|d| d.len() != p.spec.n_labels()) {
                return Err(Error::LabelMismatch {
                    left: d.len(),
                    right: p.spec.n_labels(),
                });
            }
        }
        let mut seen = vec![false; n];
        for part in self.splits.all() {
            for &i in part {
                if i >= n {
                    return Err(Error::InvalidConfig(format!("split index {i} out of range")));
                }
                if seen[i] {
                    return Err(Error::InvalidConfig(format!("index {i} appears in two splits")));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }

    pub fn property(&self, name: &str) -> Result<&Property> {
        self.properties
            .iter()
            .find(|p| p.spec.name == name)
            .ok_or_else(|| Error::UnknownProperty(name.to_string()))
    }

    pub fn split(&self, name: SplitName) -> &[usize] {
        self.splits.get(name)
    }

    /// Label distributions of `property` over the given indices.
    pub fn labels(&self, property: &str, indices: &[usize]) -> Result<Vec<ProbDist>> {
        let p = self.property(property)?;
        Ok(indices.iter().map(|&i| p.dists[i].clone()).collect())
    }

    /// Entropy of the mean label distribution over `indices`, i.e. H(Z) under
    /// the uniform empirical distribution of inputs.
    pub fn property_entropy(&self, property: &str, indices: &[usize]) -> Result<f64> {
        let labels = self.labels(property, indices)?;
        Ok(entropy(&ProbDist::mean(&labels)?))
    }

    /// Assigns the four splits by shuffling all indices with `seed`.
    /// Fractions are (sys_train, sys_test, probe_train, probe_test).
    pub fn split_with(&self, fractions: [f64; 4], seed: u64) -> Result<TaskDataset> {
        if fractions.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "split fractions must be positive: {fractions:?}"
            )));
        }
        let total: f64 = fractions.iter().sum();
        if total > 1.0 + 1e-12 {
            return Err(Error::InvalidConfig(format!("split fractions sum to {total}")));
        }
        let n = self.len();
        let mut r = rng::seeded(seed);
        let order = rng::permutation(&mut r, n);
        let sizes: Vec<usize> = fractions
            .iter()
            .map(|f| crate::math::floor(f * n as f64 + 1e-9) as usize)
            .collect();
        let mut start = 0;
        let mut parts: Vec<Vec<usize>> = Vec::new();
        for s in sizes {
            let mut part = order[start..start + s].to_vec();
            part.sort_unstable();
            parts.push(part);
            start += s;
        }
        let mut out = self.clone();
        out.splits = Splits {
            probe_test: parts.pop().unwrap(),
            probe_train: parts.pop().unwrap(),
            sys_test: parts.pop().unwrap(),
            sys_train: parts.pop().unwrap(),
        };
        out.validate()?;
        Ok(out)
    }

    /// Adds `<property>_control`, whose distribution on each input is the
    /// true one permuted by a random bijection shared by all inputs with the
    /// same token sequence.
    pub fn attach_control_task(&self, property: &str, seed: u64) -> Result<TaskDataset> {
        let source = self.property(property)?;
        let name = format!("{property}{CONTROL_SUFFIX}");
        if self.property(&name).is_ok() {
            return Err(Error::InvalidConfig(format!("property `{name}` already exists")));
        }
        let k = source.spec.n_labels();
        let mut r = rng::seeded(seed);
        let mut by_type: BTreeMap<Vec<u32>, Vec<usize>> = BTreeMap::new();
        let mut order: Vec<Vec<u32>> = Vec::new();
        for input in &self.inputs {
            if !by_type.contains_key(&input.tokens) {
                by_type.insert(input.tokens.clone(), rng::permutation(&mut r, k));
                order.push(input.tokens.clone());
            }
        }
        let dists = self
            .inputs
            .iter()
            .zip(&source.dists)
            .map(|(input, p)| permute(p, &by_type[&input.tokens]))
            .collect();
        let mut out = self.clone();
        out.properties.push(Property {
            spec: PropertySpec {
                name: name.clone(),
                labels: source.spec.labels.clone(),
            },
            dists,
        });
        out.control_maps.push(ControlTaskMap {
            source: property.to_string(),
            property: name,
            seed,
            bijections: order
                .into_iter()
                .map(|tokens| {
                    let permutation = by_type[&tokens].clone();
                    TypeBijection { tokens, permutation }
                })
                .collect(),
        });
        Ok(out)
    }

    /// Copy whose gold output is cyclically shifted by one label on every
    /// input carrying one of `tokens` at `position`. Returns the affected
    /// indices. Used to fine-tune a deliberately corrupted encoder.
    pub fn with_shifted_outputs(&self, position: usize, tokens: &[u32]) -> (TaskDataset, Vec<usize>) {
        let mut out = self.clone();
        let k = self.output_labels.len();
        let mut affected = Vec::new();
        for (i, input) in self.inputs.iter().enumerate() {
            if input.tokens.get(position).is_some_and(|t| tokens.contains(t)) {
                let g = &self.gold_outputs[i];
                let shifted: Vec<f64> = (0..k).map(|l| g.masses()[(l + k - 1) % k]).collect();
                out.gold_outputs[i] = ProbDist::new(shifted).expect("permuted distribution");
                affected.push(i);
            }
        }
        (out, affected)
    }
}

fn permute(p: &ProbDist, perm: &[usize]) -> ProbDist {
    let mut m = vec![0.0; p.len()];
    for (label, &mass) in p.masses().iter().enumerate() {
        m[perm[label]] = mass;
    }
    ProbDist::new(m).expect("permuted distribution")
}

/// Balanced binary labels (floor half zeros) in random order.
fn balanced(r: &mut LabRng, n: usize, classes: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).map(|i| i % classes).collect();
    rng::shuffle(r, &mut v);
    v
}

/// Pearson correlation between the plural indicators of subject and
/// distractor, over inputs that have a distractor.
pub fn agreement_correlation(dataset: &TaskDataset) -> Result<f64> {
    let z1 = dataset.property(SUBJECT_NUMBER)?;
    let z2 = dataset.property(DISTRACTOR_NUMBER)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (a, b) in z1.dists.iter().zip(&z2.dists) {
        let b = b.argmax();
        if b == 2 {
            continue;
        }
        xs.push((a.argmax() == 1) as u8 as f64);
        ys.push((b == 1) as u8 as f64);
    }
    Ok(stats::pearson(&xs, &ys))
}

/// Subject/verb agreement with attractor nouns.
///
/// Each input is `the ADJ NOUN (with the NOUN)*`; the gold output is the verb
/// form agreeing with the subject. Properties: `subject_number` {sg, pl},
/// `distractor_number` {sg, pl, none} (number of the attractor nearest the
/// verb) and `adjective_class` {size, colour}, which the output never
/// depends on. Among inputs with an attractor a fraction `correlation` copy
/// the subject number; the rest are stratified so that the realised Pearson
/// correlation matches the request up to rounding.
pub fn generate_agreement_task(config: &AgreementConfig, seed: u64) -> Result<TaskDataset> {
    use agreement_vocab as v;
    if config.n_inputs < 100 {
        return Err(Error::InvalidConfig(format!(
            "n_inputs must be at least 100, got {}",
            config.n_inputs
        )));
    }
    if !(0.0..=1.0).contains(&config.correlation) {
        return Err(Error::InvalidConfig(format!(
            "correlation {} outside [0, 1]",
            config.correlation
        )));
    }
    let lemmas = v::lemmas(config.vocab_size);
    if lemmas < 2 {
        return Err(Error::InvalidConfig(format!(
            "vocab_size {} leaves fewer than two noun lemmas",
            config.vocab_size
        )));
    }
    let needed = 3 + 3 * config.n_distractors;
    if config.max_len < needed {
        return Err(Error::InvalidConfig(format!(
            "max_len {} below the {needed} tokens needed for {} distractors",
            config.max_len, config.n_distractors
        )));
    }
    let n = config.n_inputs;
    let mut r = rng::seeded(seed);
    let n_distr = balanced(&mut r, n, config.n_distractors + 1);
    let with: Vec<usize> = (0..n).filter(|&i| n_distr[i] > 0).collect();
    let without: Vec<usize> = (0..n).filter(|&i| n_distr[i] == 0).collect();
    if with.is_empty() && config.correlation > 0.0 {
        return Err(Error::Unattainable(
            "correlation requested but no input carries a distractor".into(),
        ));
    }

    let mut subject = vec![0usize; n];
    let mut distractor = vec![2usize; n];
    for group in [&with, &without] {
        for (&i, z) in group.iter().zip(balanced(&mut r, group.len(), 2)) {
            subject[i] = z;
        }
    }
    let m = with.len();
    let copies = crate::math::round(config.correlation * m as f64) as usize;
    let mut sg: Vec<usize> = with.iter().copied().filter(|&i| subject[i] == 0).collect();
    let mut pl: Vec<usize> = with.iter().copied().filter(|&i| subject[i] == 1).collect();
    rng::shuffle(&mut r, &mut sg);
    rng::shuffle(&mut r, &mut pl);
    let copy_sg = (copies / 2).min(sg.len());
    let copy_pl = (copies - copy_sg).min(pl.len());
    for (group, c) in [(&sg, copy_sg), (&pl, copy_pl)] {
        for &i in &group[..c] {
            distractor[i] = subject[i];
        }
        let rest = &group[c..];
        for (&i, z) in rest.iter().zip(balanced(&mut r, rest.len(), 2)) {
            distractor[i] = z;
        }
    }
    let adjective_class = balanced(&mut r, n, 2);

    let mut inputs = Vec::with_capacity(n);
    for i in 0..n {
        let adj = v::ADJ_START + 2 * adjective_class[i] as u32 + rng::below(&mut r, 2) as u32;
        let subj = v::noun(rng::below(&mut r, lemmas as usize) as u32, subject[i] == 1);
        let mut tokens = vec![v::DET, adj, subj];
        for j in 0..n_distr[i] {
            let plural = if j + 1 == n_distr[i] {
                distractor[i] == 1
            } else {
                rng::below(&mut r, 2) == 1
            };
            tokens.extend([
                v::PREP,
                v::DET,
                v::noun(rng::below(&mut r, lemmas as usize) as u32, plural),
            ]);
        }
        inputs.push(TaskInput { tokens });
    }

    let degenerate = |labels: &[usize], k: usize| -> Vec<ProbDist> {
        labels.iter().map(|&l| ProbDist::degenerate(k, l)).collect()
    };
    let dataset = TaskDataset::from_parts(
        TaskKind::Agreement(config.clone()),
        seed,
        config.vocab_size,
        config.max_len,
        vec!["verb_sg".into(), "verb_pl".into()],
        Goodness::NegCrossEntropy,
        inputs,
        degenerate(&subject, 2),
        vec![
            Property {
                spec: PropertySpec::new(SUBJECT_NUMBER, &["sg", "pl"])?,
                dists: degenerate(&subject, 2),
            },
            Property {
                spec: PropertySpec::new(DISTRACTOR_NUMBER, &["sg", "pl", "none"])?,
                dists: degenerate(&distractor, 3),
            },
            Property {
                spec: PropertySpec::new(ADJECTIVE_CLASS, &["size", "colour"])?,
                dists: degenerate(&adjective_class, 2),
            },
        ],
        Splits::default(),
    )?;
    if m > 0 {
        let corr = agreement_correlation(&dataset)?;
        if (corr - config.correlation).abs() > 0.05 {
            return Err(Error::Unattainable(format!(
                "realised subject/distractor correlation {corr:.4} is more than 0.05 from the requested {} with {m} distractor-bearing inputs",
                config.correlation
            )));
        }
    }
    Ok(dataset)
}

/// Tagging task: a latent tag (stratified over inputs) picks a marker token
/// placed somewhere in a filler template, and the gold output is the tag.
/// Auxiliary property `length_class` is short/long template length.
pub fn generate_tagging_task(config: &TaggingConfig, seed: u64) -> Result<TaskDataset> {
    const MARKERS_PER_TAG: usize = 2;
    if config.n_inputs < 100 {
        return Err(Error::InvalidConfig(format!(
            "n_inputs must be at least 100, got {}",
            config.n_inputs
        )));
    }
    if config.n_tags < 3 {
        return Err(Error::InvalidConfig("tagging needs at least three tags".into()));
    }
    let n_markers = config.n_tags * MARKERS_PER_TAG;
    if config.vocab_size < n_markers + 2 {
        return Err(Error::InvalidConfig(format!(
            "vocab_size {} too small for {n_markers} markers and two fillers",
            config.vocab_size
        )));
    }
    if config.max_len < 5 {
        return Err(Error::InvalidConfig("tagging needs max_len >= 5".into()));
    }
    let n = config.n_inputs;
    let n_fillers = config.vocab_size - n_markers;
    let mid = (3 + config.max_len) / 2;
    let mut r = rng::seeded(seed);
    let tags = balanced(&mut r, n, config.n_tags);
    let long = balanced(&mut r, n, 2);
    let mut inputs = Vec::with_capacity(n);
    for i in 0..n {
        let len = if long[i] == 1 {
            mid + 1 + rng::below(&mut r, config.max_len - mid)
        } else {
            3 + rng::below(&mut r, mid - 2)
        };
        let mut tokens: Vec<u32> = (0..len)
            .map(|_| (n_markers + rng::below(&mut r, n_fillers)) as u32)
            .collect();
        let pos = rng::below(&mut r, len);
        tokens[pos] = (tags[i] * MARKERS_PER_TAG + rng::below(&mut r, MARKERS_PER_TAG)) as u32;
        inputs.push(TaskInput { tokens });
    }
    let tag_names: Vec<String> = (0..config.n_tags).map(|t| format!("tag{t}")).collect();
    let tag_refs: Vec<&str> = tag_names.iter().map(String::as_str).collect();
    let tag_dists: Vec<ProbDist> = tags
        .iter()
        .map(|&t| ProbDist::degenerate(config.n_tags, t))
        .collect();
    TaskDataset::from_parts(
        TaskKind::Tagging(config.clone()),
        seed,
        config.vocab_size,
        config.max_len,
        tag_names.clone(),
        Goodness::NegCrossEntropy,
        inputs,
        tag_dists.clone(),
        vec![
            Property {
                spec: PropertySpec::new(TAG, &tag_refs)?,
                dists: tag_dists,
            },
            Property {
                spec: PropertySpec::new(LENGTH_CLASS, &["short", "long"])?,
                dists: long.iter().map(|&l| ProbDist::degenerate(2, l)).collect(),
            },
        ],
        Splits::default(),
    )
}
