use cprl::attacks::{
    attack_sweep, fgsm, pgd, pgd_with_start, reflection_targets, score_reflection, AttackFamily,
    AttackSpec, LinearScorer, Scorer,
};
use cprl::cprl::{CprlConfig, SBranch};
use cprl::metrics::MetricTriple;
use cprl::model::{Model, ModelConfig, ModelKind};
use cprl_autodiff::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        input_channels: 1,
        image_size: 8,
        widths: [3, 4],
        cprl: CprlConfig {
            channels: 4,
            bias: 0.4,
            temperature: 0.1,
            s_branch: SBranch::AsPrinted,
        },
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..=hi)).collect(),
    )
    .unwrap()
}

fn linf(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn sq_loss(h: &[f64], t: &[f64]) -> f64 {
    h.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.len() as f64
}

#[test]
fn zero_gradient_leaves_input() {
    let s = LinearScorer {
        weight: Tensor::zeros(&[1, 2, 2]),
        bias: 0.3,
    };
    let x = Tensor::new(vec![1, 1, 2, 2], vec![0.1, 0.5, 0.9, 0.0]).unwrap();
    assert_eq!(fgsm(&s, &x, &[0.7], 0.1).unwrap().x_adv, x);
    assert_eq!(pgd(&s, &x, &[0.7], 0.1, 0.05, 4).unwrap().x_adv, x);
    // h = y exactly: the squared-error gradient vanishes as well.
    let s = LinearScorer {
        weight: Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
        bias: 0.0,
    };
    assert_eq!(fgsm(&s, &x, &[0.1], 0.1).unwrap().x_adv, x);
}

#[test]
fn linear_fgsm_matches_analytic_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let w = uniform(&mut rng, &[1, 3, 3], -1.0, 1.0);
        let s = LinearScorer {
            weight: w.clone(),
            bias: rng.random_range(-1.0..1.0),
        };
        let x = uniform(&mut rng, &[1, 1, 3, 3], 0.1, 0.9);
        let y = rng.random_range(-1.0..1.0);
        let eps = rng.random_range(0.001..0.05);
        let h = s.predict(&x).unwrap()[0];
        let r = fgsm(&s, &x, &[y], eps).unwrap();
        let dir = (h - y).signum();
        for i in 0..9 {
            let expected = x.data()[i] + eps * dir * w.data()[i].signum();
            // Equal up to the ulp adjustment that keeps |x_adv − x| ≤ ε.
            assert!(
                (r.x_adv.data()[i] - expected).abs() <= f64::EPSILON,
                "{} vs {expected}",
                r.x_adv.data()[i]
            );
        }
        // |h' − y| = |h − y| + ε‖w‖₁.
        let l1: f64 = w.data().iter().map(|v| v.abs()).sum();
        let analytic = ((h - y).abs() + eps * l1).powi(2);
        assert!((r.loss - analytic).abs() < 1e-12);
        assert!(r.loss > (h - y) * (h - y));
    }
}

#[test]
fn reflection_targets_follow_sign() {
    assert_eq!(reflection_targets(&[0.9]), vec![1.0]);
    assert_eq!(reflection_targets(&[0.5]), vec![0.0]);
    assert_eq!(reflection_targets(&[0.2, 0.8]), vec![-1.0, 1.0]);
}

#[test]
fn reflection_is_fgsm_against_reflected_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = Model::new(tiny(ModelKind::Cprl), 2).unwrap();
    let x = uniform(&mut rng, &[2, 1, 8, 8], 0.0, 1.0);
    let y = [0.2, 0.8];
    let a = score_reflection(&m, &x, &y, 0.02).unwrap();
    let b = fgsm(&m, &x, &[-1.0, 1.0], 0.02).unwrap();
    assert_eq!(a, b);
    // Ascent away from the reflected targets moves a low label's score up
    // and a high label's score down.
    let s = LinearScorer {
        weight: uniform(&mut rng, &[1, 8, 8], -0.02, 0.02),
        bias: 0.0,
    };
    let x = uniform(&mut rng, &[2, 1, 8, 8], 0.2, 0.8);
    let r = score_reflection(&s, &x, &y, 0.02).unwrap();
    assert!(r.scores_before.iter().all(|h| h.abs() < 1.0));
    assert!(r.scores_after[0] > r.scores_before[0]);
    assert!(r.scores_after[1] < r.scores_before[1]);
}

#[test]
fn single_step_pgd_is_fgsm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..5 {
        let m = Model::new(tiny(ModelKind::Cprl), seed).unwrap();
        let x = uniform(&mut rng, &[3, 1, 8, 8], 0.0, 1.0);
        let y = [0.1, 0.5, 0.9];
        for eps in [0.0, 1.0 / 255.0, 0.03] {
            let a = fgsm(&m, &x, &y, eps).unwrap();
            let b = pgd(&m, &x, &y, eps, eps, 1).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn pgd_on_quadratic_toy_never_loses_ground() {
    // One pixel, h(x) = 2x − 0.5, so the objective (h − y)² is a convex
    // quadratic in x with its minimum inside the ball.
    let s = LinearScorer {
        weight: Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap(),
        bias: -0.5,
    };
    for (x0, y) in [
        (0.3, 0.1),
        (0.5, 0.5),
        (0.4, 0.35),
        (0.02, 0.9),
        (0.97, -0.2),
    ] {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![x0]).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for t in 1..=12 {
            let r = pgd(&s, &x, &[y], 0.05, 0.0125, t).unwrap();
            let h = 2.0 * r.x_adv.data()[0] - 0.5;
            assert_eq!(r.loss, (h - y) * (h - y));
            assert!(
                r.loss >= prev,
                "x0 {x0} y {y} step {t}: {} < {prev}",
                r.loss
            );
            prev = r.loss;
        }
    }
}

#[test]
fn attacks_are_deterministic_and_random_start_is_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = Model::new(tiny(ModelKind::Baseline), 4).unwrap();
    let x = uniform(&mut rng, &[2, 1, 8, 8], 0.0, 1.0);
    let y = [0.3, 0.6];
    for family in [
        AttackFamily::Fgsm,
        AttackFamily::Pgd,
        AttackFamily::ScoreReflection,
    ] {
        let spec = AttackSpec {
            family,
            epsilon: 0.02,
            ..AttackSpec::default()
        };
        assert_eq!(spec.run(&m, &x, &y).unwrap(), spec.run(&m, &x, &y).unwrap());
    }
    let a = pgd_with_start(&m, &x, &y, 0.02, 0.005, 3, Some(9)).unwrap();
    assert_eq!(
        a,
        pgd_with_start(&m, &x, &y, 0.02, 0.005, 3, Some(9)).unwrap()
    );
    assert!(linf(&a.x_adv, &x) <= 0.02);
}

#[test]
fn rejects_bad_arguments() {
    let m = Model::new(tiny(ModelKind::Baseline), 0).unwrap();
    let x = Tensor::zeros(&[2, 1, 8, 8]);
    assert!(fgsm(&m, &x, &[0.5], 0.01).is_err());
    assert!(fgsm(&m, &x, &[0.5, 0.5], -0.01).is_err());
    assert!(pgd(&m, &x, &[0.5, 0.5], 0.01, 0.01, 0).is_err());
    assert!(pgd(&m, &x, &[0.5, 0.5], 0.01, 0.0, 3).is_err());
    assert!(attack_sweep(&m, &x, &[0.5, 0.5], &AttackSpec::default(), &[]).is_err());
    assert!(attack_sweep(&m, &x, &[0.5, 0.5], &AttackSpec::default(), &[0.02, 0.01]).is_err());
}

fn sweep_fixture() -> (Model, Tensor, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = Model::new(tiny(ModelKind::Cprl), 5).unwrap();
    let x = uniform(&mut rng, &[6, 1, 8, 8], 0.0, 1.0);
    let y = vec![0.1, 0.3, 0.45, 0.6, 0.8, 0.95];
    (m, x, y)
}

#[test]
fn sweep_zero_budget_is_clean() {
    let (m, x, y) = sweep_fixture();
    let clean = MetricTriple::compute(&m.predict(&x).unwrap(), &y).unwrap();
    for family in [
        AttackFamily::Fgsm,
        AttackFamily::Pgd,
        AttackFamily::ScoreReflection,
    ] {
        let spec = AttackSpec {
            family,
            ..AttackSpec::default()
        };
        let rows = attack_sweep(&m, &x, &y, &spec, &[0.0, 0.0, 0.01, 0.01]).unwrap();
        assert_eq!(rows[0].metrics, clean);
        assert_eq!(rows[0], rows[1]);
        assert_eq!(rows[2], rows[3]);
    }
}

#[test]
fn two_point_sweep_matches_independent_runs() {
    let (m, x, y) = sweep_fixture();
    let spec = AttackSpec {
        family: AttackFamily::Pgd,
        ..AttackSpec::default()
    };
    let grid = [0.0, 1.0 / 255.0];
    let rows = attack_sweep(&m, &x, &y, &spec, &grid).unwrap();
    assert_eq!(rows.len(), 2);
    for (row, eps) in rows.iter().zip(grid) {
        let r = pgd(&m, &x, &y, eps, eps / 4.0, 10).unwrap();
        assert_eq!(row.epsilon, eps);
        assert_eq!(
            row.metrics,
            MetricTriple::compute(&m.predict(&r.x_adv).unwrap(), &y).unwrap()
        );
        assert_eq!(r.loss, sq_loss(&r.scores_after, &y));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_attack_respects_the_budget(
        seed in any::<u64>(),
        eps in 0.0f64..0.1,
        steps in 1usize..5,
        ratio in 0.1f64..1.0,
        family_index in 0usize..3,
        use_model in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let family = [AttackFamily::Fgsm, AttackFamily::Pgd, AttackFamily::ScoreReflection][family_index];
        let spec = AttackSpec { family, epsilon: eps, step_ratio: ratio, steps, random_start: seed % 2 == 0, start_seed: seed };
        let x = uniform(&mut rng, &[2, 1, 8, 8], 0.0, 1.0);
        let y: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..1.0)).collect();
        let r = if use_model {
            spec.run(&Model::new(tiny(ModelKind::Cprl), seed).unwrap(), &x, &y).unwrap()
        } else {
            let s = LinearScorer { weight: uniform(&mut rng, &[1, 8, 8], -1.0, 1.0), bias: 0.0 };
            spec.run(&s, &x, &y).unwrap()
        };
        prop_assert!(linf(&r.x_adv, &x) <= eps);
        prop_assert!(r.x_adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
