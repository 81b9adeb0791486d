use proptest::prelude::*;
use reprobe_core::intervene::{self, Intervention, InterventionKind, InterventionMap, ConstructionLog, Tolerances};
use reprobe_core::model::{self, Arch, SystemConfig, TrainHyper};
use reprobe_core::numeric::{self, RealMatrix, RealVector};
use reprobe_core::probe::{self, Probe, ProbeConstraints, ProbeData, ProbeFamily, ProxyFamily};
use reprobe_core::stats::{self, Alternative};
use reprobe_core::task::{self, AgreementConfig};
use reprobe_core::{rng, ProbDist};

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| prop::collection::vec(prop::collection::vec(-3.0..3.0f64, c), r))
}

fn weights(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01..1.0f64, n)
}

fn linear_family(seed: u64, d: usize, n_labels: usize, size: usize) -> ProxyFamily {
    let mut r = rng::seeded(seed);
    let arch = ProbeConstraints::new(ProbeFamily::Linear).arch(d, n_labels).unwrap();
    let members = (0..size)
        .map(|s| Probe::from_parameters(arch.clone(), rng::gaussian_vec(&mut r, arch.n_params(), 1.0), s as u64).unwrap())
        .collect();
    ProxyFamily {
        property: "z".into(),
        layer: 1,
        constraints: ProbeConstraints::new(ProbeFamily::Linear),
        tau: 0.3,
        h_z: 2f64.ln(),
        members,
        attempts: Vec::new(),
    }
}

proptest! {
    #[test]
    fn nullspace_projector_is_symmetric_idempotent_and_kills_rows(rows in matrix(4, 7)) {
        let w = RealMatrix::from_rows(&rows).unwrap();
        let p = numeric::nullspace_projector(&w).unwrap();
        prop_assert!(p.matrix.asymmetry() <= 1e-8);
        prop_assert!(p.matrix.idempotence_error() <= 1e-8);
        let scale = rows.iter().flatten().fold(1.0f64, |m, x| m.max(x.abs()));
        for row in &rows {
            let killed = p.apply(row);
            prop_assert!(killed.iter().all(|x| x.abs() <= 1e-8 * scale * 10.0), "{killed:?}");
        }
    }

    #[test]
    fn complement_of_basis_is_a_projector(rows in matrix(5, 6)) {
        let d = rows[0].len();
        let basis = numeric::orthonormal_basis(&rows, d);
        prop_assert!(basis.len() <= d.min(rows.len()));
        let c = numeric::complement_projector(&basis, d);
        prop_assert!(c.asymmetry() <= 1e-8);
        prop_assert!(c.idempotence_error() <= 1e-8);
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-700.0..700.0f64, 1..8)) {
        let p = numeric::softmax(&RealVector::new(logits).unwrap()).unwrap();
        let total: f64 = p.masses().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
        prop_assert!(p.masses().iter().all(|m| *m >= 0.0));
        let h = numeric::entropy(&p);
        prop_assert!(h >= -1e-12 && h <= (p.len() as f64).ln() + 1e-9);
    }

    #[test]
    fn kl_and_cross_entropy_are_consistent(a in weights(4), b in weights(4)) {
        let p = ProbDist::from_weights(&a).unwrap();
        let q = ProbDist::from_weights(&b).unwrap();
        let kl = numeric::kl_divergence(&p, &q).unwrap();
        let ce = numeric::cross_entropy(&p, &q).unwrap();
        prop_assert!(kl >= -1e-12);
        prop_assert!((ce - numeric::entropy(&p) - kl).abs() <= 1e-9);
        prop_assert!(numeric::kl_divergence(&p, &p).unwrap().abs() <= 1e-12);
        let tv = p.total_variation(&q);
        prop_assert!((0.0..=1.0).contains(&tv));
    }

    /// Any predictor's cross-entropy is at least `H(Z | X)`, so the bound
    /// never exceeds the empirical mutual information.
    #[test]
    fn mi_bound_never_exceeds_mi(
        counts in prop::collection::vec((1usize..40, 1usize..40), 2..6),
        params in prop::collection::vec(-4.0..4.0f64, 4),
    ) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (v, (n0, n1)) in counts.iter().enumerate() {
            for (z, n) in [(0, *n0), (1, *n1)] {
                for _ in 0..n {
                    xs.push(vec![v as f64]);
                    ys.push(ProbDist::degenerate(2, z));
                }
            }
        }
        let data = ProbeData { xs, ys };
        let n = data.len() as f64;
        let n1: usize = counts.iter().map(|c| c.1).sum();
        let pz = [1.0 - n1 as f64 / n, n1 as f64 / n];
        let mut mi = 0.0;
        for (a, b) in &counts {
            let px = (a + b) as f64 / n;
            for (z, c) in [(0, *a), (1, *b)] {
                let pxz = c as f64 / n;
                mi += pxz * (pxz / (px * pz[z])).ln();
            }
        }
        let arch = ProbeConstraints::new(ProbeFamily::Linear).arch(1, 2).unwrap();
        let p = Probe::from_parameters(arch, params, 0).unwrap();
        let bound = probe::mi_lower_bound(data.label_entropy().unwrap(), probe::probe_loss(&p, &data).unwrap());
        prop_assert!(bound <= mi + 1e-9, "bound {bound} > MI {mi}");
    }

    #[test]
    fn success_is_monotone_in_tau(loss in 0.0..3.0f64, t1 in 0.0..3.0f64, t2 in 0.0..3.0f64) {
        let arch = ProbeConstraints::new(ProbeFamily::Linear).arch(2, 2).unwrap();
        let mut p = Probe::from_parameters(arch, vec![0.0; 6], 0).unwrap();
        p.test_loss = Some(loss);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(!probe::is_successful(&p, lo) || probe::is_successful(&p, hi));
    }

    #[test]
    fn condition_reports_recompute_their_verdicts(
        seed in any::<u64>(),
        h in prop::collection::vec(-2.0..2.0f64, 3),
        step in prop::collection::vec(-1.0..1.0f64, 3),
        q in weights(2),
    ) {
        let target = linear_family(seed, 3, 2, 4);
        let control = linear_family(seed ^ 1, 3, 3, 3);
        let ah: Vec<f64> = h.iter().zip(&step).map(|(a, b)| a + b).collect();
        let tol = Tolerances::default();
        let q = ProbDist::from_weights(&q).unwrap();
        for r in [
            intervene::ablate_report(&h, &ah, &target, tol).unwrap(),
            intervene::control_report(&h, &ah, &[&control], tol).unwrap(),
            intervene::modify_report(&h, &ah, &target, &q, tol).unwrap(),
        ] {
            prop_assert_eq!(r.passed, r.recompute());
        }
        let same = intervene::control_report(&h, &h, &[&control], tol).unwrap();
        prop_assert!(same.passed);
        let flat = intervene::ablate_report(&h, &h, &target, tol).unwrap();
        prop_assert!(!flat.passed);
    }

    #[test]
    fn translations_move_by_delta(h in prop::collection::vec(-5.0..5.0f64, 4), delta in prop::collection::vec(-5.0..5.0f64, 4)) {
        let a = Intervention {
            kind: InterventionKind::Gradient,
            layer: 1,
            target_property: None,
            target_dist: None,
            map: InterventionMap::Translation { delta: delta.clone() },
            log: ConstructionLog::None,
        };
        let moved = a.apply(0, &h).unwrap();
        for i in 0..4 {
            prop_assert!((moved[i] - h[i] - delta[i]).abs() <= 1e-12);
        }
        let norm = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((a.displacement(0, &h).unwrap() - norm).abs() <= 1e-9);
    }

    #[test]
    fn rank_test_p_values_are_probabilities(diffs in prop::collection::vec(-3.0..3.0f64, 0..40)) {
        for alt in [Alternative::Less, Alternative::Greater, Alternative::TwoSided] {
            let t = stats::signed_rank_test(&diffs, alt);
            prop_assert!((0.0..=1.0).contains(&t.p_value));
        }
        let (less, greater) = (
            stats::signed_rank_test(&diffs, Alternative::Less).p_value,
            stats::signed_rank_test(&diffs, Alternative::Greater).p_value,
        );
        prop_assert!(less + greater >= 1.0 - 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generation_and_training_are_deterministic(seed in any::<u64>()) {
        let cfg = AgreementConfig { n_inputs: 120, vocab_size: 14, max_len: 6, n_distractors: 1, correlation: 0.5 };
        let a = task::generate_agreement_task(&cfg, seed).unwrap().split_with([0.5, 0.2, 0.2, 0.1], seed).unwrap();
        let b = task::generate_agreement_task(&cfg, seed).unwrap().split_with([0.5, 0.2, 0.2, 0.1], seed).unwrap();
        prop_assert_eq!(&a, &b);
        let config = SystemConfig {
            arch: Arch::Mlp,
            vocab_size: 14,
            max_len: 6,
            embed_dim: 4,
            hidden: vec![4; 3],
            cut_layer: 2,
            output_labels: a.output_labels.clone(),
            seed,
            nuisance: None,
        };
        let hyper = TrainHyper { lr: 0.1, epochs: 2, batch_size: 8, seed };
        let s1 = model::train_system(&a, config.clone(), &hyper).unwrap();
        let s2 = model::train_system(&a, config, &hyper).unwrap();
        prop_assert_eq!(s1.parameters(), s2.parameters());
    }
}
