use mbsched::buffer::{ModelBuffer, ReplayBuffer};
use mbsched::envs::{EnvSpec, Policy, Source, Transition};
use mbsched::nn::dense::{Activation, DenseNet, Layer};
use mbsched::par::Exec;
use mbsched::world_model::{
    generate_rollouts, model_error_histogram, model_nll, train_ensemble, EnsembleConfig, EnsembleModel, Member,
    ModelTrainConfig,
};
use mbsched::{Result, SeededRng};
use ndarray::{array, Array2, ArrayView2};
use rand::Rng;

struct UniformPolicy(usize);

impl Policy for UniformPolicy {
    fn act_batch(&self, states: ArrayView2<f64>, rng: &mut SeededRng) -> Result<Array2<f64>> {
        Ok(Array2::from_shape_fn((states.nrows(), self.0), |_| rng.gen_range(-1.0..=1.0)))
    }
}

fn linear_system(n: usize, rng: &mut SeededRng) -> Vec<Transition> {
    let a = [[0.9, 0.1], [-0.1, 0.95]];
    let b = [0.05, 0.1];
    let c = [0.01, -0.02];
    (0..n)
        .map(|_| {
            let s = vec![rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
            let u = vec![rng.gen_range(-1.0..=1.0)];
            let s2 = (0..2).map(|i| a[i][0] * s[0] + a[i][1] * s[1] + b[i] * u[0] + c[i]).collect();
            Transition {
                r: 0.1 * s[0] - 0.05 * u[0],
                s,
                a: u,
                s2,
                done: false,
                source: Source::Real,
                behavior_log_prob: None,
            }
        })
        .collect()
}

fn tiny_member(rng: &mut SeededRng) -> Member {
    let net = DenseNet::new(&[3, 4, 4], Activation::Tanh, Activation::Identity, rng);
    Member::from_parts(net, vec![0.3, 0.6], vec![-2.0, -1.5])
}

fn constant_member(raw_logvar: f64) -> Member {
    let net = DenseNet::from_layers(vec![Layer {
        weight: Array2::zeros((2, 1)),
        bias: array![0.0, raw_logvar],
        activation: Activation::Identity,
    }])
    .unwrap();
    Member::from_parts(net, vec![50.0], vec![-50.0])
}

#[test]
fn doubling_variance_adds_ln2() {
    let x = array![[0.4], [-1.0]];
    let y = Array2::zeros((2, 1));
    let l0 = model_nll(&constant_member(0.0), x.view(), y.view()).unwrap();
    let l1 = model_nll(&constant_member(std::f64::consts::LN_2), x.view(), y.view()).unwrap();
    assert!(l0.abs() < 1e-12);
    assert!((l1 - l0 - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn nll_matches_independent_gaussian_nll() {
    let mut rng = SeededRng::new(21);
    let m = tiny_member(&mut rng);
    let x = Array2::from_shape_fn((7, 3), |_| rng.gen_range(-1.0..1.0));
    let y = Array2::from_shape_fn((7, 2), |_| rng.gen_range(-1.0..1.0));
    let out = m.net.forward(x.view()).unwrap();
    let sp = |v: f64| (1.0 + v.exp()).ln();
    let mut total = 0.0;
    for i in 0..7 {
        for j in 0..2 {
            let hi = m.max_logvar[j];
            let lo = m.min_logvar[j];
            let lv = lo + sp(hi - sp(hi - out[[i, 2 + j]]) - lo);
            let var = lv.exp();
            // Full Gaussian NLL minus its constant, times two.
            let full = 0.5 * (2.0 * std::f64::consts::PI * var).ln() + 0.5 * (out[[i, j]] - y[[i, j]]).powi(2) / var;
            total += 2.0 * full - (2.0 * std::f64::consts::PI).ln();
        }
    }
    let got = model_nll(&m, x.view(), y.view()).unwrap();
    assert!((got - total / 7.0).abs() < 1e-10, "{got} vs {}", total / 7.0);
}

#[test]
fn nll_gradient_matches_finite_differences() {
    let mut rng = SeededRng::new(4);
    let m = tiny_member(&mut rng);
    let x = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
    let y = Array2::from_shape_fn((5, 2), |_| rng.gen_range(-1.0..1.0));
    let reg = 0.01;
    let (_, g) = m.loss_grad(x.view(), y.view(), reg).unwrap();
    let g = g.flat();
    let p0 = m.params_flat();
    let h = 1e-6;
    for i in 0..p0.len() {
        let mut mp = m.clone();
        let mut p = p0.clone();
        p[i] += h;
        mp.set_params_flat(&p).unwrap();
        let lp = mp.loss_grad(x.view(), y.view(), reg).unwrap().0;
        p[i] -= 2.0 * h;
        mp.set_params_flat(&p).unwrap();
        let lm = mp.loss_grad(x.view(), y.view(), reg).unwrap().0;
        let fd = (lp - lm) / (2.0 * h);
        let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
        assert!(rel <= 1e-4 || (fd - g[i]).abs() < 1e-9, "param {i}: fd {fd} analytic {}", g[i]);
    }
}

fn synthetic_model(seed: u64, members: usize) -> (EnsembleModel, Vec<Transition>, SeededRng) {
    let spec = EnvSpec::idle(2, 1);
    let mut rng = SeededRng::new(seed);
    let data = linear_system(5000, &mut rng);
    let cfg = EnsembleConfig {
        members,
        elites: members.min(2),
        ..EnsembleConfig::default()
    };
    let model = EnsembleModel::new(&spec, cfg, &mut rng).unwrap();
    (model, data, rng)
}

#[test]
fn learns_linear_system() {
    let (mut model, data, mut rng) = synthetic_model(7, 5);
    let cfg = ModelTrainConfig {
        max_epochs: 40,
        ..ModelTrainConfig::default()
    };
    let report = train_ensemble(&mut model, &data, &cfg, &mut rng, Exec::Parallel).unwrap();
    assert_eq!(report.elites.len(), 2);
    let test = linear_system(1000, &mut rng);
    let s = Array2::from_shape_fn((1000, 2), |(i, j)| test[i].s[j]);
    let a = Array2::from_shape_fn((1000, 1), |(i, _)| test[i].a[0]);
    let (pred, _) = model.predict_mean(s.view(), a.view()).unwrap();
    let err: f64 = (0..1000)
        .map(|i| ((pred[[i, 0]] - test[i].s2[0]).powi(2) + (pred[[i, 1]] - test[i].s2[1]).powi(2)).sqrt())
        .sum::<f64>()
        / 1000.0;
    assert!(err < 0.01, "mean one-step error {err}");

    let hist = model_error_histogram(&model, &test, 20).unwrap();
    assert!((hist.freqs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let mode = hist.mode();
    assert!(mode < 5, "mode bin {mode}: {:?}", hist.freqs);
    for i in mode..19 {
        assert!(hist.freqs[i + 1] <= hist.freqs[i] + 0.03, "{:?}", hist.freqs);
    }
}

#[test]
fn nll_decreases_over_first_epoch() {
    let (mut model, data, mut rng) = synthetic_model(8, 3);
    let cfg = ModelTrainConfig {
        max_epochs: 1,
        ..ModelTrainConfig::default()
    };
    // Fit the normaliser first so before/after compare on the same inputs.
    let warm = ModelTrainConfig { lr: 0.0, ..cfg.clone() };
    train_ensemble(&mut model, &data, &warm, &mut rng, Exec::Sequential).unwrap();
    let (x, y) = model.arrays(&data).unwrap();
    let avg = |m: &EnsembleModel| {
        m.members.iter().map(|mm| model_nll(mm, x.view(), y.view()).unwrap()).sum::<f64>() / m.members.len() as f64
    };
    let before = avg(&model);
    train_ensemble(&mut model, &data, &cfg, &mut rng, Exec::Sequential).unwrap();
    let after = avg(&model);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn early_stopping_restores_best_epoch() {
    let (mut model, data, mut rng) = synthetic_model(9, 2);
    let cfg = ModelTrainConfig {
        max_epochs: 12,
        patience: 2,
        lr: 3e-3,
        ..ModelTrainConfig::default()
    };
    let report = train_ensemble(&mut model, &data, &cfg, &mut rng, Exec::Sequential).unwrap();
    let hold: Vec<Transition> = report.holdout_indices.iter().map(|&i| data[i].clone()).collect();
    let (xh, yh) = model.arrays(&hold).unwrap();
    for (m, curve) in report.curves.iter().enumerate() {
        let now = model.members[m].mse(xh.view(), yh.view()).unwrap();
        let min = curve.iter().copied().fold(f64::INFINITY, f64::min);
        assert!((now - min).abs() <= 1e-12 * min.max(1.0), "member {m}: {now} vs {min}");
        assert_eq!(report.holdout_losses[m], min);
    }
}

#[test]
fn zero_lr_stops_after_one_plus_patience() {
    let (mut model, data, mut rng) = synthetic_model(10, 3);
    let cfg = ModelTrainConfig {
        patience: 1,
        lr: 0.0,
        max_epochs: 50,
        ..ModelTrainConfig::default()
    };
    let report = train_ensemble(&mut model, &data[..500], &cfg, &mut rng, Exec::Sequential).unwrap();
    assert_eq!(report.epochs, vec![2, 2, 2]);
}

#[test]
fn single_member_is_its_own_elite() {
    let (mut model, data, mut rng) = synthetic_model(11, 1);
    let cfg = ModelTrainConfig {
        max_epochs: 1,
        ..ModelTrainConfig::default()
    };
    train_ensemble(&mut model, &data[..200], &cfg, &mut rng, Exec::Sequential).unwrap();
    assert_eq!(model.elites, vec![0]);
}

#[test]
fn parallel_and_sequential_training_agree() {
    let cfg = ModelTrainConfig {
        max_epochs: 2,
        ..ModelTrainConfig::default()
    };
    let (mut a, data, mut ra) = synthetic_model(12, 3);
    let (mut b, _, mut rb) = synthetic_model(12, 3);
    train_ensemble(&mut a, &data[..400], &cfg, &mut ra, Exec::Parallel).unwrap();
    train_ensemble(&mut b, &data[..400], &cfg, &mut rb, Exec::Sequential).unwrap();
    for (x, y) in a.members.iter().zip(&b.members) {
        assert_eq!(x.params_flat(), y.params_flat());
    }
}

/// Exact model of `idle(1, 1)` away from the clamp: Δs = 0.05·a, r = 0,
/// all log-variances pinned at the floor.
fn exact_idle_model() -> EnsembleModel {
    let spec = EnvSpec::idle(1, 1);
    let net = DenseNet::from_layers(vec![Layer {
        weight: array![[0.0, 0.05], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]],
        bias: array![0.0, 0.0, -1e3, -1e3],
        activation: Activation::Identity,
    }])
    .unwrap();
    let member = Member::from_parts(net, vec![0.5; 2], vec![-40.0; 2]);
    EnsembleModel::from_members(&spec, vec![member], vec![0]).unwrap()
}

#[test]
fn floor_variance_prediction_is_mean() {
    let model = exact_idle_model();
    let mut rng = SeededRng::new(1);
    let (s2, r, done) = model.predict(&[0.2], &[0.6], &mut rng).unwrap();
    assert!((s2[0] - 0.23).abs() < 1e-7);
    assert!(r.abs() < 1e-7);
    assert!(!done);
}

#[test]
fn prediction_is_seed_deterministic() {
    let (mut model, data, mut rng) = synthetic_model(13, 2);
    let cfg = ModelTrainConfig {
        max_epochs: 1,
        ..ModelTrainConfig::default()
    };
    train_ensemble(&mut model, &data[..300], &cfg, &mut rng, Exec::Sequential).unwrap();
    let p1 = model.predict(&[0.1, 0.2], &[0.3], &mut SeededRng::new(5)).unwrap();
    let p2 = model.predict(&[0.1, 0.2], &[0.3], &mut SeededRng::new(5)).unwrap();
    assert_eq!(p1, p2);
}

#[test]
fn perfect_model_error_histogram_is_all_bin_zero() {
    let model = exact_idle_model();
    let spec = EnvSpec::idle(1, 1);
    let mut rng = SeededRng::new(2);
    let test: Vec<Transition> = (0..100)
        .map(|_| {
            let s = vec![rng.gen_range(-0.5..0.5)];
            let a = vec![rng.gen_range(-1.0..1.0)];
            let o = spec.step(&s, &a).unwrap();
            Transition {
                s,
                a,
                r: o.reward,
                s2: o.next,
                done: o.terminal,
                source: Source::Real,
                behavior_log_prob: None,
            }
        })
        .collect();
    let h = model_error_histogram(&model, &test, 10).unwrap();
    assert_eq!(h.freqs[0], 1.0);
}

fn env_buffer(spec: &EnvSpec, n: usize, rng: &mut SeededRng) -> ReplayBuffer {
    let mut d = ReplayBuffer::new(n);
    for _ in 0..n {
        let s = spec.reset(rng);
        let a = vec![0.0; spec.action_dim];
        let o = spec.step(&s, &a).unwrap();
        d.push(Transition {
            s,
            a,
            r: o.reward,
            s2: o.next,
            done: o.terminal,
            source: Source::Real,
            behavior_log_prob: None,
        });
    }
    d
}

#[test]
fn rollout_counts_and_chains() {
    let model = exact_idle_model();
    let spec = EnvSpec::idle(1, 1);
    let mut rng = SeededRng::new(3);
    let d_env = env_buffer(&spec, 30, &mut rng);

    let mut buf = ModelBuffer::new(1000);
    let rep = generate_rollouts(&model, &UniformPolicy(1), &d_env, 1, 10, &mut rng, &mut buf).unwrap();
    assert_eq!(rep.added, 10);

    let mut buf = ModelBuffer::new(1000);
    let rep = generate_rollouts(&model, &UniformPolicy(1), &d_env, 5, 10, &mut rng, &mut buf).unwrap();
    assert_eq!(rep.added, 50);
    assert_eq!(buf.len(), 50);
    let ts = buf.inner().chronological();
    assert!(ts.iter().all(|t| t.source == Source::Imaginary));
    for b in 0..10 {
        assert_eq!(ts[b].s, d_env.as_slice()[rep.start_indices[b]].s);
        for step in 1..5 {
            assert_eq!(ts[step * 10 + b].s, ts[(step - 1) * 10 + b].s2);
        }
        assert!(rep.branch_lengths[b] <= 5);
    }
}

#[test]
fn terminal_start_contributes_nothing() {
    let spec = EnvSpec::by_name("point_mass_2d").unwrap();
    let mut rng = SeededRng::new(4);
    let mut model = EnsembleModel::new(&spec, EnsembleConfig::default(), &mut rng).unwrap();
    let data = env_buffer(&spec, 50, &mut rng);
    train_ensemble(
        &mut model,
        data.as_slice(),
        &ModelTrainConfig {
            max_epochs: 1,
            ..ModelTrainConfig::default()
        },
        &mut rng,
        Exec::Sequential,
    )
    .unwrap();
    let mut d_env = ReplayBuffer::new(1);
    d_env.push(Transition {
        s: vec![0.5, 0.5, 0.0, 0.0],
        a: vec![0.0, 0.0],
        r: 0.0,
        s2: vec![0.5, 0.5, 0.0, 0.0],
        done: true,
        source: Source::Real,
        behavior_log_prob: None,
    });
    let mut buf = ModelBuffer::new(100);
    let rep = generate_rollouts(&model, &UniformPolicy(2), &d_env, 3, 4, &mut rng, &mut buf).unwrap();
    assert_eq!(rep.added, 0);
    assert!(buf.is_empty());
}

#[test]
fn untrained_rollout_is_error() {
    let spec = EnvSpec::idle(1, 1);
    let mut rng = SeededRng::new(5);
    let model = EnsembleModel::new(&spec, EnsembleConfig::default(), &mut rng).unwrap();
    let d_env = env_buffer(&spec, 3, &mut rng);
    let mut buf = ModelBuffer::new(10);
    assert!(generate_rollouts(&model, &UniformPolicy(1), &d_env, 1, 1, &mut rng, &mut buf).is_err());
}
