use std::collections::BTreeMap;

use super::*;
use crate::discworld::{DatasetConfig, NoiseRegime, SceneSpec};
use crate::filters::{FilterKind, ParticleBelief};
use crate::gaussian::Belief;

fn v<'t>(t: &'t Tape, x: &[f64]) -> Var<'t> {
    t.constant(Tensor::vector(x))
}

fn gaussian<'t>(t: &'t Tape, mean: &[f64], var: f64) -> FilterBelief<'t> {
    FilterBelief::Gaussian(Belief {
        mean: v(t, mean),
        cov: t.constant(Tensor::eye(mean.len()).scale(var)),
    })
}

fn tiny_config(seed: u64) -> DatasetConfig {
    DatasetConfig {
        train: 4,
        val: 2,
        test: 2,
        steps: 6,
        scene: SceneSpec::new(16, 1),
        regime: NoiseRegime::Constant { sigma_p: 3.0, sigma_v: 2.0 },
        seed,
    }
}

fn noise_only_models() -> (Models, ParamStore) {
    let noise = NoiseChoice {
        hetero_q: false,
        hetero_r: true,
        full_cov: false,
    };
    let (models, mut store) = Models::build(&noise_only_config(16, noise), 3).unwrap();
    store.set_trainable("sensor.", false);
    (models, store)
}

#[test]
fn mse_by_hand() {
    let t = Tape::new();
    let m = [v(&t, &[1.0, 2.0])];
    assert_eq!(loss_mse(&m, &[v(&t, &[1.0, 2.0])]).unwrap().item(), 0.0);
    assert_eq!(loss_mse(&m, &[v(&t, &[2.0, 2.0])]).unwrap().item(), 1.0);
    // Squared residual norms 1 and 9 over two steps.
    let means = [v(&t, &[0.0, 0.0]), v(&t, &[0.0, 0.0])];
    let labels = [v(&t, &[1.0, 0.0]), v(&t, &[0.0, 3.0])];
    assert_eq!(loss_mse(&means, &labels).unwrap().item(), 5.0);
    assert!(loss_mse(&means, &labels[..1]).is_err());
    assert!(loss_mse(&[], &[]).is_err());
}

#[test]
fn nll_and_mix_by_hand() {
    let t = Tape::new();
    let c = FilterConfig::new(FilterKind::Ekf);
    let bel = [gaussian(&t, &[1.0, 2.0], 1.0)];
    let exact = [v(&t, &[1.0, 2.0])];
    assert!(loss_nll(&bel, &exact, &c).unwrap().item().abs() < 1e-15);
    // ½·(2·ln 4 + 2²/4) for Σ = 4I and residual (2, 0).
    let off = [v(&t, &[3.0, 2.0])];
    let wide = [gaussian(&t, &[1.0, 2.0], 4.0)];
    let nll = loss_nll(&wide, &off, &c).unwrap().item();
    assert!((nll - 0.5 * (2.0 * 4f64.ln() + 1.0)).abs() < 1e-12);
    let mix = sequence_loss(LossKind::Mix, &wide, &off, &c).unwrap().item();
    assert!((mix - 0.5 * (4.0 + nll)).abs() < 1e-12);
    assert_eq!(sequence_loss(LossKind::Mse, &wide, &off, &c).unwrap().item(), 4.0);
}

#[test]
fn single_particle_mixture_is_a_unit_gaussian() {
    let t = Tape::new();
    let mut c = FilterChoice::PfM.filter_config();
    c.gmm_sigma = 1.0;
    let bel = FilterBelief::Particles(ParticleBelief {
        particles: t.constant(Tensor::from_rows(&[vec![1.0, 2.0, 0.0, 0.0]]).unwrap()),
        log_weights: v(&t, &[0.0]),
    });
    let x = v(&t, &[2.0, 0.0, 0.0, 1.0]);
    let nll = belief_nll(&bel, &x, &c).unwrap().item();
    assert!((nll - 0.5 * 6.0).abs() < 1e-12, "{nll}");
}

#[test]
fn perturbation() {
    let x0 = Tensor::vector(&[1.0, -2.0, 0.5, 0.0]);
    let zero = perturb_initial_state(&x0, &Tensor::zeros(&[4, 4]), &mut seeded_rng(&[1])).unwrap();
    assert_eq!(zero.mean, x0);

    let sigma = Tensor::eye(4).scale(25.0);
    let a = perturb_initial_state(&x0, &sigma, &mut seeded_rng(&[7])).unwrap();
    let b = perturb_initial_state(&x0, &sigma, &mut seeded_rng(&[7])).unwrap();
    let c = perturb_initial_state(&x0, &sigma, &mut seeded_rng(&[8])).unwrap();
    assert_eq!(a.mean, b.mean);
    assert_ne!(a.mean, c.mean);
    assert_eq!(a.cov, sigma);
    assert!(perturb_initial_state(&x0, &Tensor::eye(3), &mut seeded_rng(&[1])).is_err());

    // Sample variance of 4·10⁴ offsets against 25 with a 5σ bound.
    let mut rng = seeded_rng(&[9]);
    let n = 10_000;
    let mut sq = 0.0;
    for _ in 0..n {
        let d = perturb_initial_state(&x0, &sigma, &mut rng).unwrap().mean.zip_map(&x0, |a, b| a - b);
        sq += d.data().iter().map(|x| x * x).sum::<f64>();
    }
    let var = sq / (4 * n) as f64;
    assert!((var - 25.0).abs() < 5.0 * 25.0 * (2.0 / (4 * n) as f64).sqrt(), "{var}");
}

#[test]
fn seeded_rng_depends_on_every_part() {
    use rand::RngCore;
    let draw = |p: &[u64]| seeded_rng(p).next_u64();
    assert_eq!(draw(&[1, 2, 3]), draw(&[1, 2, 3]));
    assert_ne!(draw(&[1, 2, 3]), draw(&[1, 2, 4]));
    assert_ne!(draw(&[1, 2, 3]), draw(&[2, 1, 3]));
    assert_ne!(draw(&[0]), draw(&[0, 0]));
}

#[test]
fn chunks_cover_every_step_once() {
    let data = tiny_config(1).generate_split("train", 3).unwrap();
    for k in [1, 4, 6, 10] {
        let c = chunks(&data, k);
        for seq in 0..3 {
            let mine: Vec<_> = c.iter().filter(|x| x.0 == seq).collect();
            let mut next = 0;
            for &&(_, start, len) in &mine {
                assert_eq!(start, next);
                assert!(len >= 1 && len <= k);
                next += len;
            }
            assert_eq!(next, 6);
        }
    }
    assert_eq!(batch_for_seq_len(10), 32);
    assert_eq!(batch_for_seq_len(1), 320);
    assert_eq!(batch_for_seq_len(50), 6);
}

#[test]
fn pearson_matches_brute_force() {
    let xs = [1.0, 2.0, 4.0, 7.0, 11.0];
    let ys = [2.0, 1.0, 5.0, 6.0, 12.0];
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>().sqrt();
    let sy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>().sqrt();
    assert!((pearson(&xs, &ys).unwrap() - cov / (sx * sy)).abs() < 1e-12);
    assert!((pearson(&xs, &xs.map(|x| -3.0 * x + 1.0)).unwrap() + 1.0).abs() < 1e-12);
    assert_eq!(pearson(&xs, &[3.0; 5]), None);
    assert_eq!(pearson(&xs[..1], &ys[..1]), None);
    assert_eq!(pearson(&xs, &ys[..4]), None);
}

fn metrics(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

#[test]
fn comparison_table() {
    assert!(compare(&[]).is_err());

    let one = compare(&[("ekf".into(), metrics(&[("rmse", 3.0)]))]).unwrap();
    assert_eq!(one.rows[0].mean["rmse"], 3.0);
    assert!(one.rows[0].stderr.is_empty());
    assert_eq!(one.to_csv(), "label,runs,rmse,rmse_stderr\nekf,1,3,\n");

    let t = compare(&[
        ("ekf".into(), metrics(&[("rmse", 2.0), ("nll", 1.0)])),
        ("pf".into(), metrics(&[("rmse", 5.0)])),
        ("ekf".into(), metrics(&[("rmse", 4.0)])),
    ])
    .unwrap();
    assert_eq!(t.metrics, vec!["nll", "rmse"]);
    assert_eq!(t.rows.len(), 2);
    let ekf = &t.rows[0];
    assert_eq!((ekf.label.as_str(), ekf.runs), ("ekf", 2));
    assert_eq!(ekf.mean["rmse"], 3.0);
    // Sample sd √2 over √2 runs.
    assert!((ekf.stderr["rmse"] - 1.0).abs() < 1e-12);
    assert_eq!(ekf.mean["nll"], 1.0);
    assert!(!ekf.stderr.contains_key("nll"));
    assert!(t.to_csv().ends_with("pf,1,,,5,\n"));
}

#[test]
fn filter_choices_round_trip() {
    for c in FilterChoice::ALL {
        assert_eq!(FilterChoice::parse(c.name()), Some(c));
        let f = c.filter_config();
        assert_eq!(c.is_particle(), f.kind == FilterKind::Pf);
        f.validate(4).unwrap();
    }
    assert_eq!(FilterChoice::parse("kf"), None);
    assert_eq!(FilterChoice::PfG.filter_config().pf_belief, crate::filters::PfBelief::Gaussian);
}

#[test]
fn evaluation_is_deterministic_and_complete() {
    let cfg = tiny_config(2);
    let test = cfg.generate_split("test", 2).unwrap();
    let (models, store) = noise_only_models();
    let data = Prepared::new(&models, &store, &test).unwrap();
    assert!(data.is_encoded());
    let filter = FilterChoice::Ekf.filter_config();
    let a = evaluate(&models, &store, &data, &filter, &EvalConfig::default()).unwrap();
    let b = evaluate(&models, &store, &data, &filter, &EvalConfig::default()).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.trace_csv(), b.trace_csv());
    assert_eq!((a.sequences, a.steps, a.inits), (2, 6, 3));
    assert_eq!(a.trace.len(), 6);
    assert!((a.nll_2pi - a.nll - 2.0 * crate::gaussian::LOG_2PI).abs() < 1e-12);
    // The encoded and image paths agree.
    let raw = evaluate(&models, &store, &Prepared::images(&test), &filter, &EvalConfig::default()).unwrap();
    assert!((raw.rmse - a.rmse).abs() < 1e-9 && (raw.nll - a.nll).abs() < 1e-9);
}

#[test]
fn gaussian_step_metrics_at_the_mean() {
    let bel = crate::gaussian::GaussianBelief::new(Tensor::vector(&[1.0, 1.0]), Tensor::eye(2)).unwrap();
    assert_eq!(gaussian_step_metrics(&bel, &Tensor::vector(&[1.0, 1.0])).unwrap(), (0.0, 0.0));
}

#[test]
fn training_is_reproducible_and_keeps_the_best_snapshot() {
    let cfg = tiny_config(3);
    let (train_set, val_set) = (cfg.generate_split("train", 4).unwrap(), cfg.generate_split("val", 2).unwrap());
    let (models, store) = noise_only_models();
    let tr = Prepared::new(&models, &store, &train_set).unwrap();
    let va = Prepared::new(&models, &store, &val_set).unwrap();
    let filter = FilterChoice::Ekf.filter_config();
    let tc = TrainConfig {
        seq_len: 3,
        epochs: 3,
        lr: 1e-2,
        batch_size: Some(2),
        seed: 4,
        ..Default::default()
    };
    let a = train(&models, store.clone(), &tr, &va, &filter, &tc).unwrap();
    let b = train(&models, store.clone(), &tr, &va, &filter, &tc).unwrap();
    assert_eq!(log_csv(&a.log), log_csv(&b.log));
    assert_eq!(a.store.values(), b.store.values());
    assert_eq!(a.log.len(), 4);
    assert_eq!(a.log[3].step, 12);
    let min = a.log.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(a.best_val, min);
    assert_eq!(a.log[a.best_epoch].val_loss, min);
    // Frozen sensor parameters do not move.
    for (spec, (x, y)) in store.specs().iter().zip(store.values().iter().zip(a.store.values())) {
        if spec.name.starts_with("sensor.") {
            assert_eq!(x, y, "{}", spec.name);
        }
    }
    let other = TrainConfig { seed: 5, ..tc };
    let c = train(&models, store, &tr, &va, &filter, &other).unwrap();
    assert_ne!(log_csv(&a.log), log_csv(&c.log));
}

#[test]
fn non_finite_losses_abort_training() {
    let cfg = tiny_config(4);
    let mut train_set = cfg.generate_split("train", 4).unwrap();
    for s in &mut train_set.sequences {
        for x in &mut s.states {
            x[0] = f64::NAN;
        }
    }
    let val_set = cfg.generate_split("val", 1).unwrap();
    let (models, store) = noise_only_models();
    let tr = Prepared::new(&models, &store, &train_set).unwrap();
    let va = Prepared::new(&models, &store, &val_set).unwrap();
    let tc = TrainConfig {
        seq_len: 6,
        epochs: 1,
        batch_size: Some(1),
        ..Default::default()
    };
    match train(&models, store, &tr, &va, &FilterChoice::Ekf.filter_config(), &tc) {
        Err(Error::Divergence(msg)) => assert!(msg.contains("three consecutive"), "{msg}"),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
    }
}

#[test]
fn training_rejects_bad_configs() {
    let cfg = tiny_config(5);
    let set = cfg.generate_split("train", 1).unwrap();
    let (models, store) = noise_only_models();
    let p = Prepared::new(&models, &store, &set).unwrap();
    let f = FilterChoice::Ekf.filter_config();
    for bad in [
        TrainConfig { seq_len: 0, ..Default::default() },
        TrainConfig { lr: 0.0, ..Default::default() },
        TrainConfig { batch_size: Some(0), ..Default::default() },
        TrainConfig { clip_norm: Some(-1.0), ..Default::default() },
    ] {
        assert!(matches!(train(&models, store.clone(), &p, &p, &f, &bad), Err(Error::Config(_))));
    }
    let mut frozen = store.clone();
    frozen.set_trainable("", false);
    assert!(matches!(train(&models, frozen, &p, &p, &f, &TrainConfig::default()), Err(Error::Config(_))));
}

#[test]
fn gradient_clipping() {
    let mut g = vec![Some(Tensor::vector(&[3.0, 4.0])), None];
    assert_eq!(clip_gradients(&mut g, None), 5.0);
    assert_eq!(clip_gradients(&mut g, Some(10.0)), 5.0);
    assert_eq!(g[0].as_ref().unwrap().data(), &[3.0, 4.0]);
    assert_eq!(clip_gradients(&mut g, Some(1.0)), 5.0);
    assert!((crate::nn::grad_norm(&g) - 1.0).abs() < 1e-12);
}

#[test]
fn pretraining_moves_only_the_sensor() {
    let cfg = tiny_config(6);
    let (train_set, val_set) = (cfg.generate_split("train", 2).unwrap(), cfg.generate_split("val", 1).unwrap());
    let (models, store) = Models::build(&noise_only_config(16, NoiseChoice { hetero_q: false, hetero_r: true, full_cov: false }), 1).unwrap();
    let pc = PretrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 2,
        ..Default::default()
    };
    assert_eq!(pc.loss, LossKind::Mix);
    let out = pretrain_sensor(&models, store.clone(), &train_set, &val_set, &pc).unwrap();
    let again = pretrain_sensor(&models, store.clone(), &train_set, &val_set, &pc).unwrap();
    assert_eq!(log_csv(&out.log), log_csv(&again.log));
    assert_eq!(out.log.len(), 3);
    let mut moved = false;
    for (spec, (x, y)) in store.specs().iter().zip(store.values().iter().zip(out.store.values())) {
        if spec.name.starts_with("sensor.") || spec.name.starts_with("r.") {
            moved |= x != y;
        } else {
            assert_eq!(x, y, "{}", spec.name);
        }
    }
    assert_eq!(moved, out.best_epoch > 0);
}

#[test]
fn checkpoints_rebuild_their_models() {
    let dir = tempfile::tempdir().unwrap();
    let (models, store) = noise_only_models();
    save_models(dir.path(), &models, &store, 3, 7, serde_json::json!({ "note": 1 })).unwrap();
    let (m2, s2, manifest) = load_models(dir.path()).unwrap();
    assert_eq!(m2.config, models.config);
    assert_eq!((manifest.seed, manifest.step, manifest.model["note"].as_i64()), (3, 7, Some(1)));
    for (a, b) in store.values().iter().zip(s2.values()) {
        assert_eq!(a.map(|x| x as f32 as f64), *b);
    }
    assert_eq!(store.specs(), s2.specs());
    assert!(matches!(load_models(&dir.path().join("missing")), Err(Error::Data(_))));

    let mut other = models.config.clone();
    other.obs_noise.mode = CovMode::Full;
    let (m3, s3) = Models::build(&other, 3).unwrap();
    let wrong = tempfile::tempdir().unwrap();
    save_models(wrong.path(), &m3, &s3, 3, 0, serde_json::Value::Null).unwrap();
    // Swap in the original config so the stored parameters no longer fit.
    let path = wrong.path().join("manifest.json");
    let mut json: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    json["model"]["config"] = serde_json::to_value(&models.config).unwrap();
    std::fs::write(&path, serde_json::to_vec(&json).unwrap()).unwrap();
    assert!(matches!(load_models(wrong.path()), Err(Error::Data(_))));
}
