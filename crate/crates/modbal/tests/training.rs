//! Training loop contracts: the disabled-AWC path is bitwise identical
//! to a plain joint-training loop, runs reproduce exactly, AWC touches
//! only encoder gradients, and NaN losses abort with op attribution.

use modbal::balance::{self, AwcConfig, ParamSnapshot};
use modbal::checkpoint;
use modbal::config::ExperimentConfig;
use modbal::data::{self, DataConfig, Nonlinearity};
use modbal::error::Error;
use modbal::models::{
    CoalitionMask, ModalityId, MultiModalModel, ParamGroup, PerModality, ALL_MODALITIES,
};
use modbal::tensor::{self, Tape, Tensor};
use modbal::trainer::{
    adam_step, derive_seed, evaluate, mpjpe_loss, train, training_loss, OptimState, SeedStream,
};

fn tiny_experiment(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data = DataConfig {
        n_samples: 150,
        joints: 2,
        latent_dim: 6,
        input_dims: PerModality([8, 8, 6, 6]),
        snr: PerModality([8.0, 6.0, 1.0, 0.5]),
        nonlinearity: Nonlinearity::None,
        seed: 42,
    };
    cfg.model.hidden = vec![8];
    cfg.model.unified_dim = 4;
    cfg.balance.fim_sample_size = 16;
    cfg.run.epochs = 3;
    cfg.run.seed = seed;
    cfg.run.batch_size = 16;
    cfg
}

#[test]
fn disabled_window_is_bitwise_identical_to_plain_loop() {
    let mut cfg = tiny_experiment(9);
    cfg.balance.window_epochs = 0;
    let out = train(&cfg).unwrap();

    // independent plain loop: generate, init, shuffle, forward, MPJPE,
    // backward, Adam; no balance machinery at all
    let (train_ds, _) = data::generate(&cfg.data).unwrap();
    let mut model = MultiModalModel::new(
        cfg.model_config(),
        derive_seed(cfg.run.seed, SeedStream::ModelInit, 0),
    );
    let mut optim = OptimState::new(cfg.optim);
    let specs = model.params().specs();
    for epoch in 0..cfg.run.epochs {
        let batches = data::batches(
            &train_ds,
            cfg.run.batch_size,
            derive_seed(cfg.run.seed, SeedStream::EpochShuffle, epoch as u64),
        )
        .unwrap();
        for batch in &batches {
            let tape = Tape::new();
            let pred = model.forward(Some(&tape), &batch.inputs, CoalitionMask::FULL).unwrap();
            let loss = training_loss(
                Some(&tape),
                model.config().output_scale,
                &pred.values,
                &batch.targets,
            )
            .unwrap();
            let grads = tape.backward(&loss, &specs).unwrap();
            adam_step(model.params_mut(), &grads, &mut optim, epoch).unwrap();
        }
    }

    for id in model.params().ids() {
        let a = model.params().value(id);
        let b = out.model.params().value(id);
        assert!(
            a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
            "param {} diverged from the plain loop",
            model.params().path(id)
        );
    }
}

#[test]
fn same_seed_reproduces_report_bitwise() {
    let cfg = tiny_experiment(4);
    let a = train(&cfg).unwrap();
    let b = train(&cfg).unwrap();
    let ja = serde_json::to_string(&a.report).unwrap();
    let jb = serde_json::to_string(&b.report).unwrap();
    assert_eq!(ja, jb);
    let sa = serde_json::to_string(&a.scores).unwrap();
    let sb = serde_json::to_string(&b.scores).unwrap();
    assert_eq!(sa, sb);
}

#[test]
fn empty_window_ignores_alpha_values() {
    let mut cfg = tiny_experiment(5);
    cfg.balance.window_epochs = 0;
    cfg.balance.alpha_superior = 20_000.0;
    cfg.balance.alpha_inferior = 10_000.0;
    let a = train(&cfg).unwrap();
    cfg.balance.alpha_superior = 0.0;
    cfg.balance.alpha_inferior = 0.0;
    let b = train(&cfg).unwrap();
    assert_eq!(
        serde_json::to_string(&a.report).unwrap(),
        serde_json::to_string(&b.report).unwrap()
    );
}

#[test]
fn awc_adds_nothing_to_shared_parameter_gradients() {
    let cfg = tiny_experiment(6);
    let (train_ds, _) = data::generate(&cfg.data).unwrap();
    let model = MultiModalModel::new(cfg.model_config(), 77);
    let batch = train_ds.gather(&(0..12).collect::<Vec<_>>());
    let specs = model.params().specs();

    // snapshot from a perturbed copy so the AWC term is non-zero
    let mut perturbed = model.clone();
    for m in ALL_MODALITIES {
        for id in perturbed.modality_parameters(ParamGroup::Modality(m)) {
            let t = perturbed.params().value(id);
            let shape = t.shape().to_vec();
            let data: Vec<f64> = t.data().iter().map(|v| v + 0.05).collect();
            perturbed.params_mut().set_value(id, Tensor::new(shape, data)).unwrap();
        }
    }
    let snapshot = ParamSnapshot::capture(&perturbed, 0);
    let fim = balance::compute_fim(&model, &batch.row(0), CoalitionMask::FULL, 0, |t, p, g| {
        mpjpe_loss(Some(t), p, g)
    })
    .unwrap();
    let partition = balance::partition_modalities(&PerModality([0.9, 0.8, 0.1, 0.05]));
    let awc_cfg = AwcConfig::default();

    let grads_of = |with_awc: bool| {
        let tape = Tape::new();
        let pred = model.forward(Some(&tape), &batch.inputs, CoalitionMask::FULL).unwrap();
        let task = mpjpe_loss(Some(&tape), &pred.values, &batch.targets).unwrap();
        let total = if with_awc {
            let reg = balance::awc_loss(&model, &snapshot, &fim, &partition, &awc_cfg, &tape).unwrap();
            assert!(reg.item() > 0.0, "AWC term should be active");
            tensor::add(Some(&tape), &task, &reg).unwrap()
        } else {
            task
        };
        tape.backward(&total, &specs).unwrap()
    };

    let without = grads_of(false);
    let with = grads_of(true);
    for id in model.modality_parameters(ParamGroup::Shared) {
        let a = without.get(id).unwrap();
        let b = with.get(id).unwrap();
        assert!(
            a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
            "shared param {} gradient changed under AWC",
            model.params().path(id)
        );
    }
    // and at least one encoder gradient must actually change
    let mut any_changed = false;
    for m in ALL_MODALITIES {
        for id in model.modality_parameters(ParamGroup::Modality(m)) {
            let a = without.get(id).unwrap();
            let b = with.get(id).unwrap();
            if a.data().iter().zip(b.data()).any(|(x, y)| x != y) {
                any_changed = true;
            }
        }
    }
    assert!(any_changed);
}

#[test]
fn total_loss_at_snapshot_equals_task_loss() {
    let cfg = tiny_experiment(7);
    let (train_ds, _) = data::generate(&cfg.data).unwrap();
    let model = MultiModalModel::new(cfg.model_config(), 78);
    let batch = train_ds.gather(&(0..12).collect::<Vec<_>>());
    let snapshot = ParamSnapshot::capture(&model, 0);
    let fim = balance::compute_fim(&model, &batch.row(0), CoalitionMask::FULL, 0, |t, p, g| {
        mpjpe_loss(Some(t), p, g)
    })
    .unwrap();
    let partition = balance::partition_modalities(&PerModality([0.9, 0.8, 0.1, 0.05]));

    let tape = Tape::new();
    let pred = model.forward(Some(&tape), &batch.inputs, CoalitionMask::FULL).unwrap();
    let task = mpjpe_loss(Some(&tape), &pred.values, &batch.targets).unwrap();
    let reg = balance::awc_loss(&model, &snapshot, &fim, &partition, &AwcConfig::default(), &tape).unwrap();
    let total = tensor::add(Some(&tape), &task, &reg).unwrap();
    assert_eq!(total.item(), task.item());
}

#[test]
fn compute_fim_leaves_parameters_untouched() {
    let cfg = tiny_experiment(8);
    let (train_ds, _) = data::generate(&cfg.data).unwrap();
    let model = MultiModalModel::new(cfg.model_config(), 79);
    let before: Vec<u64> = model
        .params()
        .ids()
        .flat_map(|id| model.params().value(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect();
    let batch = train_ds.gather(&(0..8).collect::<Vec<_>>());
    balance::compute_fim(&model, &batch, CoalitionMask::FULL, 0, |t, p, g| {
        mpjpe_loss(Some(t), p, g)
    })
    .unwrap();
    let after: Vec<u64> = model
        .params()
        .ids()
        .flat_map(|id| model.params().value(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn nan_loss_aborts_with_op_attribution() {
    let mut cfg = tiny_experiment(10);
    cfg.balance.window_epochs = 0;
    cfg.optim.lr = 1e308; // first update overflows the parameters
    match train(&cfg) {
        Err(Error::NanLoss { epoch, op, .. }) => {
            assert_eq!(epoch, 0);
            assert!(!op.is_empty(), "diagnostic should name the op");
        }
        Err(other) => panic!("expected NaN abort, got {other}"),
        Ok(_) => panic!("expected NaN abort, run succeeded"),
    }
}

#[test]
fn zeroed_inputs_drive_shapley_mean_to_zero() {
    // With snr effectively zero for W, its encoder sees pure noise; by
    // the end of a short run the per-epoch Shapley mean of W should sit
    // near zero and well below R's.
    let mut cfg = tiny_experiment(11);
    cfg.data.snr[ModalityId::W] = 1e-9;
    cfg.data.n_samples = 300;
    cfg.run.epochs = 5;
    cfg.balance.window_epochs = 0;
    let out = train(&cfg).unwrap();
    let last = out.report.rows.last().unwrap();
    let w = last.shapley_mean[ModalityId::W].abs();
    let r = last.shapley_mean[ModalityId::R];
    assert!(w < 0.25 * r, "phi_W {w} should be small next to phi_R {r}");
}

#[test]
fn evaluation_is_deterministic_and_checkpoint_stable() {
    let cfg = tiny_experiment(12);
    let out = train(&cfg).unwrap();
    let (_, test_ds) = data::generate(&cfg.data).unwrap();
    let m1 = evaluate(&out.model, &test_ds, CoalitionMask::FULL).unwrap();
    let m2 = evaluate(&out.model, &test_ds, CoalitionMask::FULL).unwrap();
    assert_eq!(m1, m2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.modbal");
    checkpoint::save(&out.model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    let m3 = evaluate(&back, &test_ds, CoalitionMask::FULL).unwrap();
    assert_eq!(m1, m3);
}

#[test]
fn constant_mean_predictor_matches_direct_mpjpe() {
    let cfg = tiny_experiment(13);
    let (_, test_ds) = data::generate(&cfg.data).unwrap();
    let j3 = cfg.data.joints * 3;
    let n = test_ds.len();
    let mut mean = vec![0.0; j3];
    for s in 0..n {
        for c in 0..j3 {
            mean[c] += test_ds.targets[s * j3 + c];
        }
    }
    for v in mean.iter_mut() {
        *v /= n as f64;
    }

    // zero the whole model, then plant the mean pose in the head bias
    // (divided by the fixed output scale the head applies)
    let mut model = MultiModalModel::new(cfg.model_config(), 3);
    for (id, shape) in model.params().specs() {
        model.params_mut().set_value(id, Tensor::zeros(&shape)).unwrap();
    }
    let (_, hb) = model.head_params();
    let scaled: Vec<f64> = mean.iter().map(|v| v / cfg.model_config().output_scale).collect();
    model.params_mut().set_value(hb, Tensor::new(vec![j3], scaled)).unwrap();

    let metrics = evaluate(&model, &test_ds, CoalitionMask::FULL).unwrap();
    let mut direct = 0.0;
    for s in 0..n {
        let mut per_joint = 0.0;
        for j in 0..cfg.data.joints {
            let mut e2 = 0.0;
            for k in 0..3 {
                let d = test_ds.targets[s * j3 + j * 3 + k] - mean[j * 3 + k];
                e2 += d * d;
            }
            per_joint += e2.sqrt();
        }
        direct += per_joint / cfg.data.joints as f64;
    }
    direct /= n as f64;
    assert!((metrics.mpjpe - direct).abs() < 1e-9);
}
