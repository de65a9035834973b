use super::*;
use crate::datagen::{make_dataset, SynthSpec, TemplateKind};
use crate::mesh::TriMesh;
use rand::Rng;

fn tiny_arch() -> ModelConfig {
    ModelConfig {
        latent_dim: 4,
        siren_hidden: 8,
        siren_hidden_layers: 3,
        hyper_hidden: 8,
        omega0: 30.0,
        hyper_out_scale: 1e-2,
    }
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        arch: tiny_arch(),
        n_samples: 60,
        batch_size: 4,
        lr: 1e-3,
        max_epochs: 30,
        val_every: 10,
        val_fit_steps: 20,
        ..Default::default()
    }
}

fn small_data(examples: usize) -> (TriMesh, Vec<TriMesh>) {
    let ds = make_dataset(&SynthSpec {
        template: TemplateKind::Icosphere { subdiv: 1 },
        examples,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    (ds.template, ds.examples)
}

#[test]
fn sample_set_starts_with_vertices() {
    let (tpl, data) = small_data(1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ex = build_sample_set(0, &data[0], &tpl, 100, &mut rng).unwrap();
    assert_eq!(ex.len(), 100);
    for v in 0..tpl.vertex_count() {
        for c in 0..3 {
            assert!((ex.points.positions[[v, c]] - tpl.vertices()[v][c]).abs() < 1e-12);
            assert!((ex.targets[[v, c]] - data[0].vertices()[v][c]).abs() < 1e-12);
        }
    }
    assert!(build_sample_set(0, &data[0], &tpl, tpl.vertex_count() - 1, &mut rng).is_err());
}

#[test]
fn sample_set_rejects_foreign_connectivity() {
    let (tpl, _) = small_data(1);
    let other = tpl.subdivide();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(matches!(
        build_sample_set(0, &other, &tpl, 200, &mut rng),
        Err(TrainError::Mesh(MeshError::ConnectivityMismatch))
    ));
}

#[test]
fn shared_sample_sets_are_deterministic() {
    let (tpl, data) = small_data(3);
    let cfg = tiny_train_config();
    let a = sample_sets(&tpl, &data, &cfg).unwrap();
    let b = sample_sets(&tpl, &data, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0].points, a[2].points);
    let verts = sample_sets(&tpl, &data, &TrainConfig { hybrid_sampling: false, ..cfg }).unwrap();
    assert_eq!(verts[0].len(), tpl.vertex_count());
}

#[test]
fn loss_vanishes_on_exact_fit() {
    let (tpl, _) = small_data(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = HyperNet::new(tiny_arch(), &mut rng);
    net.params_mut().iter_mut().for_each(|p| *p = 0.0);
    let ex = build_sample_set(0, &tpl, &tpl, 50, &mut rng).unwrap();
    let z = Array2::zeros((1, 4));
    let res = batch_loss(&net, z.view(), &[&ex], LossWeights::default(), true).unwrap();
    assert!(res.loss.abs() < 1e-20);
    assert!(res.latent_grads.iter().all(|g| g.abs() < 1e-12));
}

#[test]
fn loss_matches_direct_formula() {
    let (tpl, data) = small_data(2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = HyperNet::new(tiny_arch(), &mut rng);
    let exs: Vec<_> = (0..2).map(|i| build_sample_set(i, &data[i], &tpl, 50, &mut rng).unwrap()).collect();
    let zs = Array2::from_shape_fn((2, 4), |_| rng.random_range(-0.1..0.1));
    let w = LossWeights { lambda_mse: 2.0, lambda_reg: 5.0 };
    let res = batch_loss(&net, zs.view(), &[&exs[0], &exs[1]], w, false).unwrap();
    let mut expect = 0.0;
    for (k, ex) in exs.iter().enumerate() {
        let out = net.eval(zs.row(k).insert_axis(Axis(0)), &[&ex.points]).unwrap().remove(0);
        let d = &out - &ex.targets;
        let data = d.iter().map(|v| v * v).sum::<f64>() * 2.0 / 50.0;
        let reg = zs.row(k).iter().map(|v| v * v).sum::<f64>() * 5.0 / 4.0;
        expect += (data + reg) / 2.0;
    }
    assert!((res.loss - expect).abs() < 1e-12 * expect.max(1.0));
}

#[test]
fn batch_loss_gradients_match_finite_differences() {
    let (tpl, data) = small_data(2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = HyperNet::new(tiny_arch(), &mut rng);
    let exs: Vec<_> = (0..2).map(|i| build_sample_set(i, &data[i], &tpl, 45, &mut rng).unwrap()).collect();
    let batch = [&exs[0], &exs[1]];
    let zs = Array2::from_shape_fn((2, 4), |_| rng.random_range(-0.5..0.5));
    let w = LossWeights { lambda_mse: 3.0, lambda_reg: 2.0 };
    let res = batch_loss(&net, zs.view(), &batch, w, true).unwrap();
    let h = 1e-5;
    let f = |n: &HyperNet, z: &Array2<f64>| batch_loss(n, z.view(), &batch, w, false).unwrap().loss;
    let stencil = |plus2: f64, plus1: f64, minus1: f64, minus2: f64| (-plus2 + 8.0 * plus1 - 8.0 * minus1 + minus2) / (12.0 * h);
    for k in 0..2 {
        for j in 0..4 {
            let at = |d: f64| {
                let mut z = zs.clone();
                z[[k, j]] += d;
                f(&net, &z)
            };
            let num = stencil(at(2.0 * h), at(h), at(-h), at(-2.0 * h));
            let ana = res.latent_grads[[k, j]];
            assert!((num - ana).abs() <= 1e-5 * num.abs().max(1e-2), "z[{k},{j}]: {ana} vs {num}");
        }
    }
    let scale = res.param_grads.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    for _ in 0..40 {
        let i = rng.random_range(0..net.param_count());
        let at = |d: f64| {
            let mut n = net.clone();
            n.params_mut()[i] += d;
            f(&n, &zs)
        };
        let num = stencil(at(2.0 * h), at(h), at(-h), at(-2.0 * h));
        let ana = res.param_grads[i];
        assert!((num - ana).abs() <= 1e-4 * num.abs().max(1e-3 * scale), "param {i}: {ana} vs {num}");
    }
}

#[test]
fn non_finite_target_reports_example() {
    let (tpl, data) = small_data(2);
    let cfg = tiny_train_config();
    let mut exs = sample_sets(&tpl, &data, &cfg).unwrap();
    exs[1].targets[[3, 0]] = f64::NAN;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = HyperNet::new(tiny_arch(), &mut rng);
    let out = train_decoder(net, &tpl, &exs, &[], &cfg, &mut |_| {}).unwrap();
    assert!(matches!(out.stop, StopReason::NonFinite { epoch: 1, example: 1 }));
    assert!(out.aborted());
}

#[test]
fn divergence_returns_last_good_state() {
    let (tpl, data) = small_data(2);
    let cfg = tiny_train_config();
    let mut exs = sample_sets(&tpl, &data, &cfg).unwrap();
    exs[0].targets.mapv_inplace(|v| v * 1e7);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let net = HyperNet::new(tiny_arch(), &mut rng);
    let initial = net.params().to_vec();
    let out = train_decoder(net, &tpl, &exs, &[], &cfg, &mut |_| {}).unwrap();
    assert!(matches!(out.stop, StopReason::Diverged { epoch: 1, .. }));
    assert_eq!(out.model.decoder.params(), &initial[..]);
    assert!(out.log.records.is_empty());
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let (tpl, data) = small_data(4);
    let cfg = tiny_train_config();
    let mut seen = 0;
    let a = train(&tpl, &data, &data[..1], &cfg, &mut |_| seen += 1).unwrap();
    assert_eq!(seen, cfg.max_epochs);
    assert_eq!(a.stop, StopReason::Completed);
    let first = a.log.records[0].train_loss;
    let last = a.log.final_loss().unwrap();
    assert!(last < first, "{first} -> {last}");
    let vals: Vec<_> = a.log.records.iter().filter_map(|r| r.val_error.map(|v| (r.epoch, v))).collect();
    assert_eq!(vals.iter().map(|v| v.0).collect::<Vec<_>>(), vec![10, 20, 30]);

    let b = train(&tpl, &data, &data[..1], &cfg, &mut |_| {}).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model.decoder.params(), b.model.decoder.params());
    assert_eq!(a.model.latents, b.model.latents);
}

#[test]
fn single_example_never_early_stops() {
    let (tpl, data) = small_data(1);
    let cfg = TrainConfig { max_epochs: 12, val_every: 1, early_stop_patience: 1, ..tiny_train_config() };
    let out = train(&tpl, &data, &data, &cfg, &mut |_| {}).unwrap();
    assert_eq!(out.stop, StopReason::Completed);
    assert_eq!(out.log.records.len(), 12);
}

#[test]
fn fit_latent_keeps_decoder_and_improves() {
    let (tpl, data) = small_data(2);
    let cfg = tiny_train_config();
    let out = train(&tpl, &data, &[], &cfg, &mut |_| {}).unwrap();
    let before = out.model.decoder.params().to_vec();
    let fit = FitConfig { steps: 50, adam: AdamConfig { lr: 1e-2, ..Default::default() }, ..Default::default() };
    let r = fit_latent(&out.model, &data[1], &fit).unwrap();
    assert_eq!(out.model.decoder.params(), &before[..]);
    let ex = TrainExample::vertices_only(0, &data[1], &tpl).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(fit.seed);
    rng.set_stream(5);
    let normal = Normal::new(0.0, fit.latent_init_std).unwrap();
    let z0 = Array2::from_shape_fn((1, 4), |_| normal.sample(&mut rng));
    let l0 = batch_loss(&out.model.decoder, z0.view(), &[&ex], fit.weights, false).unwrap().loss;
    assert!(r.loss <= l0);
    let again = batch_loss(&out.model.decoder, r.z.view().insert_axis(Axis(0)), &[&ex], fit.weights, false).unwrap();
    assert!((again.loss - r.loss).abs() < 1e-12 * r.loss.max(1.0));
}

#[test]
fn fit_budget_exhaustion_is_flagged() {
    let (tpl, data) = small_data(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = HyperNet::new(tiny_arch(), &mut rng);
    let model = AutoDecoder::new(net, tpl, Array2::zeros((1, 4))).unwrap();
    let fit = FitConfig { steps: 3, adam: AdamConfig { lr: 1e-2, ..Default::default() }, ..Default::default() };
    let r = fit_latent(&model, &data[0], &fit).unwrap();
    assert!(!r.converged);
    assert_eq!(r.steps, 3);
}

#[test]
fn csv_leaves_missing_validation_empty() {
    let log = TrainLog {
        records: vec![
            EpochRecord { epoch: 1, train_loss: 2.5, val_error: None },
            EpochRecord { epoch: 2, train_loss: 1.25, val_error: Some(0.5) },
        ],
    };
    assert_eq!(log.to_csv(), "epoch,train_loss,val_error\n1,2.5,\n2,1.25,0.5\n");
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { lr: -1.0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
    let json = r#"{"lr": 0.01}"#;
    let cfg: TrainConfig = serde_json::from_str(json).unwrap();
    assert_eq!(cfg.lr, 0.01);
    assert_eq!(cfg.batch_size, 128);
}

#[test]
fn metrics() {
    let a = Array2::from_shape_vec((2, 3), vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    let b = Array2::from_shape_vec((2, 3), vec![3.0, 4.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    assert!((mean_l2(&a, &b) - 2.5).abs() < 1e-12);
    assert!((rmse(&a, &b) - (12.5f64).sqrt()).abs() < 1e-12);
}

#[test]
fn returns_lowest_loss_state_without_validation() {
    let (tpl, data) = small_data(3);
    let cfg = TrainConfig { max_epochs: 40, lr: 5e-2, ..tiny_train_config() };
    let kept = train(&tpl, &data, &[], &cfg, &mut |_| {}).unwrap();
    let recs = &kept.log.records;
    let (argmin, _) = recs
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, r)| if r.train_loss < acc.1 { (i, r.train_loss) } else { acc });
    assert_eq!(kept.best_epoch, recs[argmin].epoch - 1);

    // Re-running with the cap at the best epoch must reproduce the returned state.
    if kept.best_epoch > 0 {
        let cut = TrainConfig { max_epochs: kept.best_epoch, keep_best_train_state: false, ..cfg.clone() };
        let last = train(&tpl, &data, &[], &cut, &mut |_| {}).unwrap();
        assert_eq!(last.model.decoder.params(), kept.model.decoder.params());
        assert_eq!(last.model.latents, kept.model.latents);
    }

    let plain = train(&tpl, &data, &[], &TrainConfig { keep_best_train_state: false, ..cfg }, &mut |_| {}).unwrap();
    assert_eq!(plain.best_epoch, 40);
    assert_eq!(plain.log, kept.log);
}
