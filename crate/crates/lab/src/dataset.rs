//! Line-delimited dataset files.
//!
//! The first line is a header carrying the task config, seed, label sets,
//! splits and control-task bijections; every further line is one input.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use reprobe_core::task::{ControlTaskMap, Goodness, Property, PropertySpec, Splits, TaskDataset, TaskInput, TaskKind};
use reprobe_core::ProbDist;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const FORMAT: &str = "reprobe-dataset";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    task: TaskKind,
    seed: u64,
    vocab_size: usize,
    max_len: usize,
    output_labels: Vec<String>,
    goodness: Goodness,
    properties: Vec<PropertySpec>,
    splits: Splits,
    control_maps: Vec<ControlTaskMap>,
    n_inputs: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: usize,
    tokens: Vec<u32>,
    gold_output: Vec<f64>,
    properties: BTreeMap<String, Vec<f64>>,
}

pub fn to_bytes(dataset: &TaskDataset) -> Vec<u8> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        task: dataset.task.clone(),
        seed: dataset.seed,
        vocab_size: dataset.vocab_size,
        max_len: dataset.max_len,
        output_labels: dataset.output_labels.clone(),
        goodness: dataset.goodness,
        properties: dataset.properties.iter().map(|p| p.spec.clone()).collect(),
        splits: dataset.splits.clone(),
        control_maps: dataset.control_maps.clone(),
        n_inputs: dataset.len(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serialises");
    out.push(b'\n');
    for (i, input) in dataset.inputs.iter().enumerate() {
        let record = Record {
            id: i,
            tokens: input.tokens.clone(),
            gold_output: dataset.gold_outputs[i].masses().to_vec(),
            properties: dataset
                .properties
                .iter()
                .map(|p| (p.spec.name.clone(), p.dists[i].masses().to_vec()))
                .collect(),
        };
        serde_json::to_writer(&mut out, &record).expect("record serialises");
        out.push(b'\n');
    }
    out
}

pub fn from_reader(reader: impl BufRead, path: &Path) -> Result<TaskDataset> {
    let malformed = |line: usize, message: String| LabError::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = reader.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| malformed(1, "empty file".into()))?;
    let first = first.map_err(|e| LabError::io(path, e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| malformed(1, format!("header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(malformed(
            1,
            format!("expected {FORMAT} v{VERSION}, found {} v{}", header.format, header.version),
        ));
    }
    let mut inputs = Vec::with_capacity(header.n_inputs);
    let mut gold = Vec::with_capacity(header.n_inputs);
    let mut dists: Vec<Vec<ProbDist>> = vec![Vec::with_capacity(header.n_inputs); header.properties.len()];
    for (k, line) in lines {
        let lineno = k + 1;
        let line = line.map_err(|e| LabError::io(path, e))?;
        let r: Record = serde_json::from_str(&line).map_err(|e| malformed(lineno, e.to_string()))?;
        if r.id != inputs.len() {
            return Err(malformed(lineno, format!("expected id {}, found {}", inputs.len(), r.id)));
        }
        gold.push(ProbDist::new(r.gold_output).map_err(|e| malformed(lineno, format!("gold_output: {e}")))?);
        if r.properties.len() != header.properties.len() {
            return Err(malformed(lineno, "property set differs from header".into()));
        }
        for (spec, out) in header.properties.iter().zip(dists.iter_mut()) {
            let masses = r
                .properties
                .get(&spec.name)
                .ok_or_else(|| malformed(lineno, format!("missing property `{}`", spec.name)))?;
            out.push(ProbDist::new(masses.clone()).map_err(|e| malformed(lineno, format!("{}: {e}", spec.name)))?);
        }
        inputs.push(TaskInput { tokens: r.tokens });
    }
    if inputs.len() != header.n_inputs {
        return Err(malformed(
            inputs.len() + 2,
            format!("header declares {} inputs, file has {}", header.n_inputs, inputs.len()),
        ));
    }
    let properties = header
        .properties
        .into_iter()
        .zip(dists)
        .map(|(spec, dists)| Property { spec, dists })
        .collect();
    let mut dataset = TaskDataset::from_parts(
        header.task,
        header.seed,
        header.vocab_size,
        header.max_len,
        header.output_labels,
        header.goodness,
        inputs,
        gold,
        properties,
        header.splits,
    )
    .map_err(|e| LabError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    dataset.control_maps = header.control_maps;
    Ok(dataset)
}

pub fn load(path: &Path) -> Result<TaskDataset> {
    let file = std::fs::File::open(path).map_err(|e| LabError::io(path, e))?;
    from_reader(BufReader::new(file), path)
}

pub fn save(dataset: &TaskDataset, path: &Path) -> Result<()> {
    crate::fsutil::write_atomic(path, &to_bytes(dataset))
}

/// Writes to any sink, for piping.
pub fn write_to(dataset: &TaskDataset, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(&to_bytes(dataset))
}

#[cfg(test)]
mod tests {
    use super::*;
    use reprobe_core::task::{generate_agreement_task, AgreementConfig};

    fn small() -> TaskDataset {
        let cfg = AgreementConfig {
            n_inputs: 200,
            vocab_size: 30,
            max_len: 6,
            n_distractors: 1,
            correlation: 0.5,
        };
        generate_agreement_task(&cfg, 3)
            .unwrap()
            .split_with([0.5, 0.1, 0.25, 0.15], 1)
            .unwrap()
            .attach_control_task("subject_number", 4)
            .unwrap()
    }

    #[test]
    fn round_trip_is_identity_and_byte_exact() {
        let d = small();
        let bytes = to_bytes(&d);
        let back = from_reader(&bytes[..], Path::new("mem")).unwrap();
        assert_eq!(back, d);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn malformed_line_reports_position() {
        let d = small();
        let text = String::from_utf8(to_bytes(&d)).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[5] = "{\"id\": 4, \"tokens\": oops}";
        let broken = lines.join("\n");
        match from_reader(broken.as_bytes(), Path::new("d.jsonl")) {
            Err(LabError::Malformed { line, .. }) => assert_eq!(line, 6),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let d = small();
        let text = String::from_utf8(to_bytes(&d)).unwrap();
        let cut: Vec<&str> = text.lines().take(50).collect();
        assert!(matches!(
            from_reader(cut.join("\n").as_bytes(), Path::new("d")),
            Err(LabError::Malformed { .. })
        ));
    }

    #[test]
    fn invalid_masses_are_rejected() {
        let d = small();
        let text = String::from_utf8(to_bytes(&d)).unwrap();
        let bad = text.replacen("\"gold_output\":[1.0,0.0]", "\"gold_output\":[0.7,0.7]", 1);
        assert_ne!(bad, text);
        assert!(matches!(
            from_reader(bad.as_bytes(), Path::new("d")),
            Err(LabError::Malformed { .. })
        ));
    }
}
