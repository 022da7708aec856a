use std::collections::BTreeMap;

use fedseg::data::{generate_dataset, prepare_all, GenConfig, Prepared};
use fedseg::federation::{
    configure_experiment, fedavg, run_cl, run_experiment, run_fl, run_ll, ClientData,
    Configuration, ExperimentConfig, ModelKey, Paradigm, ParadigmKind, RoundPlan, TrainConfig,
    Variant,
};
use fedseg::metrics::evaluate;
use fedseg::model::{AttentionUNet, PlainConfig, PlainConvNet, Segmenter, UNetConfig};
use fedseg::tensor::{OptimizerKind, Shape, StateDict, Tensor};
use fedseg::Error;
use proptest::prelude::*;

fn prepared(n: usize, seed: u64, h: usize, w: usize) -> Vec<Prepared<f64>> {
    let samples = generate_dataset(n, seed, &GenConfig::default()).unwrap();
    prepare_all(&samples, h, w).unwrap()
}

fn client(id: usize, train: Vec<Prepared<f64>>, val: Vec<Prepared<f64>>) -> ClientData<f64> {
    ClientData {
        client: Some(id),
        train,
        val,
    }
}

fn max_abs_diff<T: fedseg::Scalar, M: Segmenter<T>>(a: &M, b: &M) -> f64 {
    a.params()
        .flat_values()
        .iter()
        .zip(b.params().flat_values())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

fn sgd(lr: f64) -> TrainConfig {
    let mut cfg = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        ..TrainConfig::default()
    };
    cfg.adamw.lr = lr;
    cfg
}

fn single_step() -> RoundPlan {
    RoundPlan {
        total_epochs: 1,
        rounds: 1,
        epochs_per_round: 1,
        batch_size: 1000,
    }
}

#[test]
fn fedavg_of_one_full_batch_step_equals_centralized_sgd() {
    let data = prepared(9, 1, 8, 16);
    let init = PlainConvNet::<f64>::new(PlainConfig::default(), 4).unwrap();
    let a = client(0, data[..4].to_vec(), vec![]);
    let b = client(1, data[4..].to_vec(), vec![]);
    let cfg = sgd(0.5);
    let fl = run_fl(&init, &[a.clone(), b.clone()], &single_step(), &cfg, 0).unwrap();
    let pooled = ClientData {
        client: None,
        train: data.clone(),
        val: vec![],
    };
    let (cl, _) = run_cl(&init, &pooled, &single_step(), &cfg, 0).unwrap();
    let moved = max_abs_diff(&init, &cl);
    assert!(moved > 1e-4, "the step must change parameters ({moved})");
    let diff = max_abs_diff(&fl.global, &cl);
    assert!(diff <= 1e-10, "FL and CL differ by {diff}");
}

fn small_unet() -> AttentionUNet<f64> {
    AttentionUNet::new(UNetConfig::default(), 2).unwrap()
}

#[test]
fn one_client_fl_is_bit_identical_to_ll() {
    let data = prepared(10, 2, 16, 32);
    let c = client(0, data[..8].to_vec(), data[8..].to_vec());
    let plan = RoundPlan {
        total_epochs: 4,
        rounds: 2,
        epochs_per_round: 2,
        batch_size: 3,
    };
    let persistent = TrainConfig {
        reset_optimizer: false,
        ..TrainConfig::default()
    };
    for cfg in [sgd(0.05), persistent] {
        let init = small_unet();
        let fl = run_fl(&init, std::slice::from_ref(&c), &plan, &cfg, 9).unwrap();
        let (ll, ll_logs) = run_ll(&init, &c, &plan, &cfg, 9).unwrap();
        assert_eq!(fl.global.params().state_dict(), ll.params().state_dict());
        let strip = |l: &fedseg::federation::EpochLog| {
            (l.epoch, l.train_loss.to_bits(), l.val_loss.to_bits())
        };
        assert_eq!(
            fl.logs.iter().map(strip).collect::<Vec<_>>(),
            ll_logs.iter().map(strip).collect::<Vec<_>>()
        );
    }
}

#[test]
fn centralized_training_on_one_client_equals_local() {
    let data = prepared(8, 3, 16, 32);
    let c = client(2, data[..6].to_vec(), data[6..].to_vec());
    let pooled = ClientData {
        client: None,
        ..c.clone()
    };
    let plan = RoundPlan {
        total_epochs: 2,
        rounds: 1,
        epochs_per_round: 2,
        batch_size: 4,
    };
    let init = small_unet();
    let (a, _) = run_ll(&init, &c, &plan, &TrainConfig::default(), 1).unwrap();
    let (b, _) = run_cl(&init, &pooled, &plan, &TrainConfig::default(), 1).unwrap();
    assert_eq!(a.params().fingerprint(), b.params().fingerprint());
}

#[test]
fn tiny_overfit_reaches_high_dice() {
    let data = prepared(4, 5, 16, 32);
    let c = client(0, data.clone(), vec![]);
    let plan = RoundPlan {
        total_epochs: 80,
        rounds: 1,
        epochs_per_round: 80,
        batch_size: 4,
    };
    let mut cfg = TrainConfig::default();
    cfg.adamw.lr = 1e-2;
    let (model, logs) = run_ll(&small_unet(), &c, &plan, &cfg, 0).unwrap();
    assert!(logs.last().unwrap().train_loss < logs[0].train_loss);
    let eval = evaluate(&model, &data, 0.5).unwrap();
    let mean = eval.records.iter().map(|r| r.dice).sum::<f64>() / eval.records.len() as f64;
    assert!(mean >= 0.95, "training-set Dice {mean}");
}

#[test]
fn fl_logs_every_client_epoch_and_round() {
    let data = prepared(12, 6, 16, 32);
    let clients: Vec<ClientData<f64>> = (0..3)
        .map(|i| {
            client(
                i,
                data[4 * i..4 * i + 3].to_vec(),
                data[4 * i + 3..4 * i + 4].to_vec(),
            )
        })
        .collect();
    let plan = RoundPlan {
        total_epochs: 4,
        rounds: 2,
        epochs_per_round: 2,
        batch_size: 2,
    };
    let out = run_fl(&small_unet(), &clients, &plan, &TrainConfig::default(), 3).unwrap();
    assert_eq!(out.logs.len(), 12);
    assert_eq!(out.round_fingerprints.len(), 2);
    for c in 0..3 {
        let epochs: Vec<(usize, usize)> = out
            .logs
            .iter()
            .filter(|l| l.client == Some(c))
            .map(|l| (l.epoch, l.round))
            .collect();
        assert_eq!(epochs, vec![(0, 0), (1, 0), (2, 1), (3, 1)]);
    }
    let parallel = TrainConfig {
        parallel_clients: true,
        ..TrainConfig::default()
    };
    let again = run_fl(&small_unet(), &clients, &plan, &parallel, 3).unwrap();
    assert_eq!(again.round_fingerprints, out.round_fingerprints);
}

#[test]
fn empty_training_data_is_a_client_failure() {
    let c = client(3, vec![], vec![]);
    let err = run_ll(
        &small_unet(),
        &c,
        &RoundPlan::default(),
        &TrainConfig::default(),
        0,
    )
    .unwrap_err();
    assert!(matches!(err, Error::ClientFailure { client: 3, .. }));
    assert!(matches!(
        run_fl::<f64, AttentionUNet<f64>>(
            &small_unet(),
            &[],
            &RoundPlan::default(),
            &TrainConfig::default(),
            0
        ),
        Err(Error::Config(_))
    ));
}

fn state(values: &[f64]) -> StateDict<f64> {
    let mut s = StateDict::new();
    s.insert(
        "w".into(),
        Tensor::from_vec(Shape::new(1, 1, 1, values.len()), values.to_vec()).unwrap(),
    );
    s
}

#[test]
fn fedavg_of_identical_states_is_exact() {
    let s = state(&[0.1, -3.7, 1e-9, 12345.678]);
    let out = fedavg(&[s.clone(), s.clone(), s.clone()], &[331.0, 10.0, 7.0]).unwrap();
    assert_eq!(out, s);
}

#[test]
fn equal_client_sizes_give_the_plain_mean() {
    let states: Vec<StateDict<f64>> = (0..5).map(|i| state(&[i as f64, 2.0 * i as f64])).collect();
    let out = fedavg(&states, &[331.0; 5]).unwrap();
    let v = out["w"].data();
    assert!((v[0] - 2.0).abs() < 1e-12 && (v[1] - 4.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn fedavg_is_convex_and_scale_free(
        rows in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 3), 1..6),
        raw in proptest::collection::vec(0.1f64..100.0, 6),
        scale in 0.01f64..1000.0,
    ) {
        let weights = &raw[..rows.len()];
        let states: Vec<StateDict<f64>> = rows.iter().map(|r| state(r)).collect();
        let out = fedavg(&states, weights).unwrap();
        let scaled: Vec<f64> = weights.iter().map(|w| w * scale).collect();
        let out2 = fedavg(&states, &scaled).unwrap();
        let total: f64 = weights.iter().sum();
        for j in 0..3 {
            let v = out["w"].data()[j];
            let lo = rows.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo && v <= hi);
            let expected: f64 = rows.iter().zip(weights).map(|(r, w)| r[j] * w / total).sum();
            prop_assert!((v - expected).abs() < 1e-9);
            prop_assert!((v - out2["w"].data()[j]).abs() < 1e-9);
        }
    }
}

#[test]
fn job_plan_for_all_configurations() {
    let all = [ParadigmKind::Cl, ParadigmKind::Fl, ParadigmKind::Ll];
    let baseline = configure_experiment(&[Configuration::Baseline], &all, 5, 0).unwrap();
    assert_eq!(baseline.len(), 7);

    let jobs = configure_experiment(&Configuration::ALL, &all, 5, 0).unwrap();
    assert_eq!(jobs.len(), 15);
    let keys: Vec<ModelKey> = jobs.iter().flat_map(|j| j.keys.clone()).collect();
    assert_eq!(keys.len(), 27);
    let find = |c, p| {
        jobs.iter()
            .find(|j| j.keys.contains(&ModelKey::new(c, p)))
            .unwrap()
    };
    let shared = find(Configuration::LabelManip, Paradigm::Local(3));
    assert_eq!(shared.variant, Variant::Clean);
    assert_eq!(
        shared.canonical(),
        ModelKey::new(Configuration::Baseline, Paradigm::Local(3))
    );
    assert_eq!(
        find(Configuration::LabelManip, Paradigm::Local(0)).variant,
        Variant::Label
    );
    assert_eq!(
        find(Configuration::ImageManip, Paradigm::Federated).variant,
        Variant::Image
    );
    let excl = find(Configuration::Exclusion, Paradigm::Federated);
    assert_eq!(excl.clients, vec![1, 2, 3, 4]);
    assert_eq!(
        find(Configuration::Exclusion, Paradigm::Centralized).clients,
        vec![1, 2, 3, 4]
    );
    assert!(!keys.contains(&ModelKey::new(Configuration::Exclusion, Paradigm::Local(0))));
    assert!(matches!(
        configure_experiment(&[Configuration::Baseline], &all, 5, 5),
        Err(Error::Config(_))
    ));
}

fn tiny_experiment(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed,
        n_clients: 3,
        configurations: vec![
            Configuration::Baseline,
            Configuration::LabelManip,
            Configuration::Exclusion,
        ],
        ..ExperimentConfig::default()
    };
    cfg.data.n = 24;
    cfg.data.height = 16;
    cfg.data.width = 32;
    cfg.rounds = RoundPlan {
        total_epochs: 2,
        rounds: 2,
        epochs_per_round: 1,
        batch_size: 4,
    };
    cfg
}

#[test]
fn experiment_runs_are_reproducible() {
    let cfg = tiny_experiment(4);
    let a = run_experiment::<f64>(&cfg).unwrap();
    let b = run_experiment::<f64>(&cfg).unwrap();
    let tables = a.tables();
    assert_eq!(tables, b.tables());
    let expected: usize = 5 + 5 + 4;
    assert_eq!(tables.len(), expected);
    for (x, y) in a.trained.iter().zip(&b.trained) {
        assert_eq!(x.model.params().state_dict(), y.model.params().state_dict());
    }
    assert_eq!(a.splits.test.len(), 2);
    let records: BTreeMap<_, _> = tables.iter().map(|(k, v)| (*k, v.len())).collect();
    assert!(records.values().all(|&n| n == 2));
    // the faulty client's labels differ in the label run only
    let corrupted = &a.corrupted[&Variant::Label];
    assert_eq!(corrupted.len(), a.splits.clients[0].all().len());
    assert!(corrupted
        .iter()
        .any(|s| s.union_mask != a.samples[s.id as usize].union_mask));
    assert_ne!(
        run_experiment::<f64>(&tiny_experiment(5)).unwrap().tables(),
        tables
    );
}

#[test]
fn experiment_config_validation() {
    let mut cfg = tiny_experiment(0);
    cfg.faulty_client = 3;
    assert!(matches!(run_experiment::<f64>(&cfg), Err(Error::Config(_))));
    let mut cfg = tiny_experiment(0);
    cfg.data.width = 30;
    assert!(run_experiment::<f64>(&cfg).is_err());
    let mut cfg = tiny_experiment(0);
    cfg.rounds.total_epochs = 3;
    assert!(matches!(run_experiment::<f64>(&cfg), Err(Error::Config(_))));
}
