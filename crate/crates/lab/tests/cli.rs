use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use reprobe::fixtures::configs_dir;
use reprobe::report::{self, AnyReport};
use reprobe_core::experiment::Verdict;

fn cfg(name: &str) -> String {
    configs_dir().join(name).display().to_string()
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reprobe"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn reprobe")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "reprobe {args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);
    assert_eq!(code(&run(dir.path(), &["--version"])), 0);
    assert_eq!(code(&run(dir.path(), &["frobnicate"])), 1);
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let base = std::fs::read_to_string(configs_dir().join("gen_agreement.toml")).unwrap();
    let bad = write(dir.path(), "bad.toml", &format!("{base}\ncolour = \"blue\"\n"));
    let out = run(dir.path(), &["gen", "--config", bad.to_str().unwrap(), "--out", "d.jsonl"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
    assert!(!dir.path().join("d.jsonl").exists());
}

#[test]
fn unknown_key_inside_the_task_section_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(
        dir.path(),
        "bad.toml",
        "seed = 1\n[task]\nkind = \"agreement\"\nn_inputs = 200\nvocab_size = 46\nmax_len = 6\nn_distractors = 1\ncorrelation = 0.5\nsize = 3\n[split]\nfractions = [0.5, 0.1, 0.25, 0.15]\n",
    );
    let out = run(dir.path(), &["gen", "--config", bad.to_str().unwrap(), "--out", "d.jsonl"]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_inputs_exit_one_with_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &["train", "--config", &cfg("train_agreement.toml"), "--dataset", "nowhere.jsonl", "--out", "s.ckpt"],
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.jsonl"));
    let out = run(dir.path(), &["gen", "--config", "absent.toml", "--out", "d.jsonl"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.toml"));
}

#[test]
fn control_equal_to_target_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(
        dir.path(),
        "c.toml",
        "seed = 1\n[experiment]\ncriterion = \"use\"\nlayer = 2\ntarget = \"subject_number\"\ncontrols = [\"subject_number\"]\n",
    );
    let out = run(
        dir.path(),
        &["criteria", "--config", bad.to_str().unwrap(), "--dataset", "d", "--system", "s", "--out", "r.json"],
    );
    assert_eq!(code(&out), 1);
}

#[test]
fn outputs_are_not_overwritten_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = cfg("gen_agreement.toml");
    ok(d, &["gen", "--config", &gen, "--out", "d.jsonl"]);
    let first = std::fs::read(d.join("d.jsonl")).unwrap();
    let out = run(d, &["gen", "--config", &gen, "--out", "d.jsonl", "--seed", "9"]);
    assert_eq!(code(&out), 1);
    assert_eq!(std::fs::read(d.join("d.jsonl")).unwrap(), first);

    ok(d, &["gen", "--config", &gen, "--out", "d.jsonl", "--seed", "9", "--force"]);
    assert_ne!(std::fs::read(d.join("d.jsonl")).unwrap(), first);
    ok(d, &["gen", "--config", &gen, "--out", "d.jsonl", "--force"]);
    assert_eq!(std::fs::read(d.join("d.jsonl")).unwrap(), first);

    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("d.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seeds"]["seed"], 1);
    assert!(m["finished_unix"].is_u64());
}

fn experiment(path: &Path) -> reprobe_core::experiment::ExperimentReport {
    match report::read_any(path).unwrap() {
        AnyReport::Experiment(r) => *r,
        AnyReport::Drift(_) => panic!("{} is a drift report", path.display()),
    }
}

/// Every bundled config, end to end.
#[test]
fn bundled_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = ["--dataset", "data.jsonl"];
    let sys = ["--system", "sys.ckpt"];
    let bad = ["--system", "corrupted.ckpt"];
    ok(d, &["gen", "--config", &cfg("gen_agreement.toml"), "--out", "data.jsonl"]);
    ok(d, &[&["train", "--config", &cfg("train_agreement.toml"), "--out", "sys.ckpt"][..], &data].concat());
    ok(d, &[&["train", "--config", &cfg("train_corrupted.toml"), "--out", "corrupted.ckpt"][..], &data].concat());
    for (c, out) in [
        ("probe_subject.toml", "subject.fam"),
        ("probe_distractor.toml", "distractor.fam"),
        ("probe_adjective.toml", "adjective.fam"),
    ] {
        ok(d, &[&["probe", "--config", &cfg(c), "--out", out][..], &data, &sys].concat());
    }
    let fams = ["--family", "subject.fam", "--control", "distractor.fam", "--control", "adjective.fam"];
    ok(
        d,
        &[&["intervene", "--config", &cfg("intervene_ablate.toml"), "--out", "ablate.json"][..], &data, &sys, &fams].concat(),
    );
    let art: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("ablate.json")).unwrap()).unwrap();
    assert!(art["target_pass_rate"].as_f64().unwrap() > 0.9);
    assert!(!art["records"].as_array().unwrap().is_empty());

    // Families trained for another property are refused.
    let swapped = ["--family", "distractor.fam", "--control", "subject.fam", "--control", "adjective.fam"];
    let out = run(
        d,
        &[&["intervene", "--config", &cfg("intervene_ablate.toml"), "--out", "x.json"][..], &data, &sys, &swapped].concat(),
    );
    assert_eq!(code(&out), 1);

    let criteria = |c: &str, out: &str, system: &[&str]| {
        ok(d, &[&["criteria", "--config", &cfg(c), "--out", out][..], &data, system].concat());
        assert!(d.join(out).with_extension("csv").exists());
    };
    criteria("information_subject.toml", "info.json", &sys);
    criteria("information_control_task.toml", "info_control.json", &sys);
    criteria("use_subject.toml", "use.json", &sys);
    criteria("use_nuisance.toml", "use_nuisance.json", &sys);
    criteria("misrep_corrupted.toml", "misrep.json", &bad);
    criteria("misrep_shifted.toml", "misrep_shifted.json", &bad);
    criteria("drift_penalty.toml", "drift_penalty.json", &sys);
    criteria("locator_subject.toml", "locator.json", &sys);

    assert_eq!(experiment(&d.join("info.json")).verdict, Verdict::Positive);
    assert_eq!(experiment(&d.join("info_control.json")).verdict, Verdict::Negative);
    assert_eq!(experiment(&d.join("use.json")).verdict, Verdict::Positive);
    assert_eq!(experiment(&d.join("use_nuisance.json")).verdict, Verdict::Negative);
    assert_eq!(experiment(&d.join("misrep.json")).verdict, Verdict::Positive);
    assert_ne!(experiment(&d.join("misrep_shifted.json")).verdict, Verdict::Positive);
    let loc = experiment(&d.join("locator.json"));
    assert!(loc.locator.unwrap().sweep.band.is_some());
    let drift = |name: &str| match report::read_any(&d.join(name)).unwrap() {
        AnyReport::Drift(r) => r,
        AnyReport::Experiment(_) => panic!("{name} is not a drift report"),
    };
    let penalty = drift("drift_penalty.json");
    assert_eq!(penalty.a.len(), 100);
    assert!(penalty.significant && penalty.mean_a < penalty.mean_b);

    // With ρ = 1 a subject-number ablation moves distractor probes more
    // than a random step of the same length.
    let coupled = ["--dataset", "rho1.jsonl"];
    ok(d, &["gen", "--config", &cfg("gen_agreement_rho1.toml"), "--out", "rho1.jsonl"]);
    ok(d, &[&["train", "--config", &cfg("train_agreement.toml"), "--out", "rho1.ckpt"][..], &coupled].concat());
    ok(
        d,
        &[
            &["criteria", "--config", &cfg("drift_random.toml"), "--out", "drift_random.json"][..],
            &coupled,
            &["--system", "rho1.ckpt"],
        ]
        .concat(),
    );
    let random = drift("drift_random.json");
    assert!(random.significant && random.mean_a > random.mean_b);

    let table = ok(d, &["report", "use.json"]);
    for key in ["verdict", "positive", "mean goodness delta", "baseline delta", "target pass rate", "control pass rate"] {
        assert!(table.contains(key), "table lacks `{key}`:\n{table}");
    }
    let csv = ok(d, &["report", "use.json", "--format", "csv"]);
    assert_eq!(csv.as_bytes(), std::fs::read(d.join("use.csv")).unwrap());
    let drift = ok(d, &["report", "drift_penalty.json"]);
    assert!(drift.contains("mean drift with penalty"));

    ok(d, &["report", "use.json", "--out", "use.txt"]);
    assert_eq!(code(&run(d, &["report", "use.json", "--out", "use.txt"])), 1);
    ok(d, &["report", "use.json", "--out", "use.txt", "--force"]);
    assert_eq!(code(&run(d, &["report", "ablate.json"])), 1);

    // A rerun reproduces every report byte for byte.
    let before = std::fs::read(d.join("use.json")).unwrap();
    ok(d, &[&["criteria", "--config", &cfg("use_subject.toml"), "--out", "use.json", "--force"][..], &data, &sys].concat());
    assert_eq!(std::fs::read(d.join("use.json")).unwrap(), before);
}
