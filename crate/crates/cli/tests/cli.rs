use std::fs;
use std::path::Path;

use fedseg::anomaly::DetectorConfig;
use fedseg::data::{export_dataset, generate_dataset, prepare_all, DatasetManifest, GenConfig};
use fedseg::federation::{
    run_ll, ClientData, Configuration, ExperimentConfig, RoundPlan, TrainConfig,
};
use fedseg::model::{AttentionUNet, UNetConfig};
use fedseg_cli::config::render_config;
use fedseg_cli::run::{INCOMPLETE, METRICS, SIGNIFICANCE};
use fedseg_cli::tables::read_metrics;
use fedseg_cli::{
    cmd_compare, cmd_detect, cmd_eval, cmd_run, parse_config, save_checkpoint, CliError,
    RunManifest,
};

fn tiny(configurations: Vec<Configuration>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 3,
        n_clients: 3,
        configurations,
        ..ExperimentConfig::default()
    };
    cfg.data.n = 24;
    cfg.data.height = 16;
    cfg.data.width = 32;
    cfg.rounds = RoundPlan {
        total_epochs: 4,
        rounds: 2,
        epochs_per_round: 2,
        batch_size: 4,
    };
    cfg
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    fs::read(dir.join(rel)).unwrap()
}

#[test]
fn baseline_run_writes_seven_models_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(vec![Configuration::Baseline]);
    cfg.n_clients = 5;
    cfg.data.n = 40;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ma = cmd_run(&cfg, &a).unwrap();
    let mb = cmd_run(&cfg, &b).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(ma.models.len(), 7);
    let mut ckpts: Vec<&str> = ma.models.iter().map(|m| m.checkpoint.as_str()).collect();
    ckpts.dedup();
    assert_eq!(ckpts.len(), 7);
    for p in ma.referenced_paths() {
        assert!(a.join(p).exists(), "{p}");
        assert_eq!(read(&a, p), read(&b, p), "{p} differs between reruns");
    }
    assert_eq!(read(&a, "manifest.json"), read(&b, "manifest.json"));
    assert!(!a.join(INCOMPLETE).exists());
    assert!(!a.join(".lock").exists());
    assert_eq!(RunManifest::load(&a).unwrap(), ma);
    assert_eq!(ma.significance.as_deref(), Some(SIGNIFICANCE));
}

#[test]
fn all_configurations_share_local_models() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(Configuration::ALL.to_vec());
    let m = cmd_run(&cfg, tmp.path()).unwrap();
    let keys: Vec<&str> = m.models.iter().map(|e| e.key.as_str()).collect();
    assert_eq!(keys.len(), 5 + 5 + 5 + 4);
    let excl: Vec<&str> = keys
        .iter()
        .copied()
        .filter(|k| k.starts_with("exclusion"))
        .collect();
    assert_eq!(
        excl,
        vec![
            "exclusion_CL",
            "exclusion_FL",
            "exclusion_LL1",
            "exclusion_LL2"
        ]
    );
    let entry = |k: &str| m.models.iter().find(|e| e.key == k).unwrap();
    assert_eq!(
        entry("label_manip_LL1").checkpoint,
        entry("baseline_LL1").checkpoint
    );
    assert_ne!(
        entry("label_manip_LL0").checkpoint,
        entry("baseline_LL0").checkpoint
    );

    // corruption touches only the faulty client's samples
    let corrupted: serde_json::Value =
        serde_json::from_slice(&read(tmp.path(), &m.corrupted["label"])).unwrap();
    let dataset: DatasetManifest =
        serde_json::from_slice(&read(tmp.path(), &m.dataset_manifest)).unwrap();
    for e in corrupted["entries"].as_array().unwrap() {
        let id = e["id"].as_u64().unwrap();
        assert_eq!(dataset.assignment[&id], 0);
    }

    let tables = read_metrics(&tmp.path().join(METRICS)).unwrap();
    assert_eq!(tables.len(), 19);
    let sig = fedseg_cli::tables::read_significance(&tmp.path().join(SIGNIFICANCE)).unwrap();
    assert_eq!(sig.len(), 18 * 5);
    assert!(sig
        .iter()
        .all(|r| (r.alpha_corrected - 0.05 / 18.0).abs() < 1e-15));

    let reports = cmd_detect(tmp.path(), &DetectorConfig::default()).unwrap();
    // the exclusion cohort has two clients, too few to score
    assert_eq!(reports.len(), 3);
    assert!(!reports.contains_key("exclusion"));
    assert_eq!(reports["label_manip"].participants, vec![0, 1, 2]);
    assert!(tmp.path().join("anomaly.json").exists());
}

#[test]
fn comparing_a_run_with_itself_gives_unit_p_values() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("r");
    cmd_run(&tiny(vec![Configuration::Baseline]), &run).unwrap();
    let out = tmp.path().join("cmp.csv");
    let rows = cmd_compare(&[run.clone(), run.clone()], &out).unwrap();
    let across: Vec<_> = rows.iter().filter(|r| r.family == "across-runs").collect();
    assert!(!across.is_empty());
    assert!(across.iter().all(|r| r.p_value == 1.0 && !r.significant));
    assert!(rows.iter().any(|r| r.family == "within-configuration"));
    assert!(out.exists());
    let missing = cmd_compare(&[tmp.path().join("nope")], &out).unwrap_err();
    assert!(missing.to_string().contains("nope"));
}

#[test]
fn existing_lock_blocks_a_second_run() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join(".lock"), "").unwrap();
    let err = cmd_run(&tiny(vec![Configuration::Baseline]), tmp.path()).unwrap_err();
    assert!(matches!(err, CliError::Locked(_)));
}

#[test]
fn failed_run_leaves_an_incomplete_marker() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(vec![Configuration::Baseline]);
    // NaN learning rate makes the first step non-finite
    cfg.training.adamw.lr = f64::NAN;
    let err = cmd_run(&cfg, tmp.path()).unwrap_err();
    assert!(
        matches!(err, CliError::Stage { stage: "train", .. }),
        "{err}"
    );
    let marker = fs::read_to_string(tmp.path().join(INCOMPLETE)).unwrap();
    assert!(marker.starts_with("train:"));
    assert!(!tmp.path().join("manifest.json").exists());
}

#[test]
fn config_files_reject_unknown_keys() {
    let p = Path::new("exp.toml");
    let cfg = parse_config("seed = 4\n[data]\nn = 50\n", p).unwrap();
    assert_eq!((cfg.seed, cfg.data.n, cfg.n_clients), (4, 50, 5));
    assert!(matches!(
        parse_config("sed = 4\n", p),
        Err(CliError::Config { .. })
    ));
    assert!(matches!(
        parse_config("[data]\nwidht = 64\n", p),
        Err(CliError::Config { .. })
    ));
    assert!(matches!(
        parse_config("[data]\nwidth = 62\n", p),
        Err(CliError::Config { .. })
    ));
    assert!(matches!(
        parse_config("configurations = [\"other\"]\n", p),
        Err(CliError::Config { .. })
    ));
    let full = tiny(Configuration::ALL.to_vec());
    assert_eq!(parse_config(&render_config(&full), p).unwrap(), full);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        fedseg_cli::load_config(&path).unwrap();
        n += 1;
    }
    assert!(n >= 1);
}

#[test]
fn eval_of_a_memorising_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = GenConfig::default();
    let samples = generate_dataset(4, 8, &gen).unwrap();
    let cfg = tiny(vec![Configuration::Baseline]);
    let data = ClientData {
        client: Some(0),
        train: prepare_all(&samples, cfg.data.height, cfg.data.width).unwrap(),
        val: vec![],
    };
    let plan = RoundPlan {
        total_epochs: 80,
        rounds: 1,
        epochs_per_round: 80,
        batch_size: 4,
    };
    let mut train = TrainConfig::default();
    train.adamw.lr = 1e-2;
    let init = AttentionUNet::<f64>::new(UNetConfig::default(), 0).unwrap();
    let (model, _) = run_ll(&init, &data, &plan, &train, 0).unwrap();
    let ckpt = tmp.path().join("m.fseg");
    save_checkpoint(&model, &ckpt).unwrap();
    let manifest = DatasetManifest {
        seed: 8,
        generator: gen,
        entries: vec![],
        test: vec![],
        assignment: Default::default(),
        clients: vec![],
    };
    export_dataset(&tmp.path().join("data"), &samples, manifest).unwrap();
    let out = tmp.path().join("eval.csv");
    let records = cmd_eval(&ckpt, &tmp.path().join("data"), &cfg, Some(&out)).unwrap();
    assert_eq!(records.len(), 4);
    let median = fedseg::metrics::median(&records, fedseg::metrics::Metric::Dice);
    assert!(median > 0.95, "median dice {median}");
    assert!(out.exists());
}
