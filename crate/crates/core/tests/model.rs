use cprl::attacks::Scorer;
use cprl::cprl::{channel_mask, CprlConfig, InterventionPhase, SBranch};
use cprl::model::{Model, ModelConfig, ModelKind, ParamGroup};
use cprl::CprlError;
use cprl_autodiff::{Graph, Tensor};
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
            temperature: 1.0,
            s_branch: SBranch::AsPrinted,
        },
    }
}

fn input(n: usize) -> Tensor {
    Tensor::new(
        vec![n, 1, 8, 8],
        (0..n * 64)
            .map(|i| ((i * 37 + 11) % 101) as f64 / 100.0)
            .collect(),
    )
    .unwrap()
}

fn random_input(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::new(
        vec![n, 1, 8, 8],
        (0..n * 64).map(|_| rng.random_range(0.0..=1.0)).collect(),
    )
    .unwrap()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn head_score(model: &Model, z: &[f64]) -> f64 {
    let w = model.param("head.weight").unwrap().data();
    let b = model.param("head.bias").unwrap().data()[0];
    logistic(w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + b)
}

fn affine(w: &Tensor, b: &Tensor, f: &[f64]) -> Vec<f64> {
    let k = f.len();
    (0..k)
        .map(|i| (0..k).map(|j| w.data()[i * k + j] * f[j]).sum::<f64>() + b.data()[i])
        .collect()
}

fn eye(k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[k, k]);
    for i in 0..k {
        t.data_mut()[i * k + i] = 1.0;
    }
    t
}

#[test]
fn zero_head_scores_one_half() {
    for kind in [ModelKind::Baseline, ModelKind::Cprl] {
        let mut m = Model::new(tiny(kind), 3).unwrap();
        m.set_param("head.weight", Tensor::zeros(&[1, 4])).unwrap();
        let s = m.predict(&Tensor::zeros(&[2, 1, 8, 8])).unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
    }
}

#[test]
fn forced_unit_mask_matches_baseline() {
    let base = Model::new(tiny(ModelKind::Baseline), 5).unwrap();
    let mut cprl = Model::new(tiny(ModelKind::Cprl), 5).unwrap();
    for (name, t) in base.params() {
        cprl.set_param(name, t.clone()).unwrap();
    }
    cprl.force_mask(Some(1.0));
    let x = input(3);
    assert_eq!(base.predict(&x).unwrap(), cprl.predict(&x).unwrap());
    assert_eq!(base.predictor_param_count(), cprl.predictor_param_count());
}

#[test]
fn golden_scores() {
    let x = input(2);
    let cases = [
        (ModelKind::Baseline, [0.5016919785974868, 0.501201493548724]),
        (ModelKind::Cprl, [0.501409981671667, 0.5010013386515036]),
    ];
    for (kind, golden) in cases {
        let s = Model::new(tiny(kind), 7).unwrap().predict(&x).unwrap();
        for (a, b) in s.iter().zip(golden) {
            assert!((a - b).abs() < 1e-12, "{kind:?}: {s:?}");
        }
    }
}

#[test]
fn identity_phi_keeps_unmasked_features() {
    let mut m = Model::new(tiny(ModelKind::Cprl), 11).unwrap();
    m.set_param("phi.weight", eye(4)).unwrap();
    let x = input(3);
    let f = m.features(&x).unwrap();
    let (_, yc) = m.predict_intervened(&x, InterventionPhase::Sf).unwrap();
    for r in 0..3 {
        let expected = head_score(&m, &f.data()[r * 4..(r + 1) * 4]);
        assert!((yc[r] - expected).abs() < 1e-14);
    }
    // With the mask at one the gated features are f itself, so y_c = y.
    m.force_mask(Some(1.0));
    let (y, yc) = m.predict_intervened(&x, InterventionPhase::Sf).unwrap();
    assert_eq!(y, yc);
}

#[test]
fn zero_xi_scores_masked_features() {
    let mut m = Model::new(tiny(ModelKind::Cprl), 12).unwrap();
    m.set_param("xi.weight", Tensor::zeros(&[4, 4])).unwrap();
    let (y, ys) = m
        .predict_intervened(&input(3), InterventionPhase::Nc)
        .unwrap();
    assert_eq!(y, ys);
}

#[test]
fn intervened_scores_match_manual_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for branch in [SBranch::AsPrinted, SBranch::Complement] {
        let mut cfg = tiny(ModelKind::Cprl);
        cfg.cprl.s_branch = branch;
        cfg.cprl.temperature = 0.05;
        let mut m = Model::new(cfg, 13).unwrap();
        for name in ["phi.bias", "xi.bias"] {
            m.set_param(
                name,
                Tensor::vector((0..4).map(|_| rng.random_range(-0.5..0.5)).collect()),
            )
            .unwrap();
        }
        let x = random_input(&mut rng, 4);
        let f = m.features(&x).unwrap();
        let (y, yc) = m.predict_intervened(&x, InterventionPhase::Sf).unwrap();
        let (_, ys) = m.predict_intervened(&x, InterventionPhase::Nc).unwrap();
        let (pw, pb) = (m.param("phi.weight").unwrap(), m.param("phi.bias").unwrap());
        let (xw, xb) = (m.param("xi.weight").unwrap(), m.param("xi.bias").unwrap());
        for r in 0..4 {
            let fr = &f.data()[r * 4..(r + 1) * 4];
            let mask = channel_mask(fr, &cfg.cprl);
            let gated: Vec<f64> = fr.iter().zip(&mask).map(|(a, b)| a * b).collect();
            let moved_c = affine(pw, pb, fr);
            let moved_s = affine(xw, xb, fr);
            let c: Vec<f64> = (0..4)
                .map(|i| moved_c[i] * (1.0 - mask[i]) + fr[i] * mask[i])
                .collect();
            let s: Vec<f64> = (0..4)
                .map(|i| {
                    let kept = match branch {
                        SBranch::AsPrinted => fr[i] * mask[i],
                        SBranch::Complement => fr[i] * (1.0 - mask[i]),
                    };
                    moved_s[i] * mask[i] + kept
                })
                .collect();
            assert!((y[r] - head_score(&m, &gated)).abs() < 1e-12);
            assert!((yc[r] - head_score(&m, &c)).abs() < 1e-12);
            assert!((ys[r] - head_score(&m, &s)).abs() < 1e-12);
        }
    }
}

#[test]
fn scores_are_open_unit_and_input_gradients_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for seed in 0..10 {
        for kind in [ModelKind::Baseline, ModelKind::Cprl] {
            let m = Model::new(tiny(kind), seed).unwrap();
            let mut x = random_input(&mut rng, 3);
            if seed == 0 {
                x = Tensor::zeros(&[3, 1, 8, 8]);
            } else if seed == 1 {
                x = Tensor::full(&[3, 1, 8, 8], 1.0);
            }
            let mut g = Graph::new();
            let xv = g.param(x);
            let s = m.score(&mut g, xv).unwrap();
            assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
            let total = g.sum(s).unwrap();
            g.backward(total).unwrap();
            assert!(g.grad_or_zeros(xv).all_finite());
        }
    }
}

#[test]
fn heads_start_spectrally_normalized() {
    let m = Model::new(ModelConfig::default(), 0).unwrap();
    for name in ["phi.weight", "xi.weight"] {
        let s = cprl_autodiff::largest_singular_value(m.param(name).unwrap(), 500).unwrap();
        assert!((s - 1.0).abs() < 1e-6, "{name}: {s}");
    }
    assert!(m.power_state(ParamGroup::Phi).is_some());
    assert!(Model::new(tiny(ModelKind::Baseline), 0)
        .unwrap()
        .power_state(ParamGroup::Xi)
        .is_none());
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = Model::new(tiny(ModelKind::Cprl), 21).unwrap();
    m.save(&path).unwrap();
    let back = Model::load(&path, tiny(ModelKind::Cprl)).unwrap();
    assert_eq!(back.to_records(), m.to_records());
    assert_eq!(
        back.predict(&input(2)).unwrap(),
        m.predict(&input(2)).unwrap()
    );

    let err = Model::load(&path, tiny(ModelKind::Baseline)).unwrap_err();
    assert!(matches!(err, CprlError::Checkpoint { .. }), "{err}");
    let mut wider = tiny(ModelKind::Cprl);
    wider.widths = [4, 4];
    assert_eq!(Model::load(&path, wider).unwrap_err().exit_code(), 3);
    assert_eq!(
        Model::load(&dir.path().join("absent"), tiny(ModelKind::Cprl))
            .unwrap_err()
            .exit_code(),
        3
    );
}

#[test]
fn rejects_wrong_input_shape() {
    let m = Model::new(tiny(ModelKind::Cprl), 0).unwrap();
    assert!(m.predict(&Tensor::zeros(&[1, 1, 16, 16])).is_err());
    assert!(m.predict(&Tensor::zeros(&[1, 3, 8, 8])).is_err());
    let mut bad = tiny(ModelKind::Cprl);
    bad.image_size = 10;
    assert!(Model::new(bad, 0).is_err());
}
