use std::collections::BTreeMap;
use std::path::Path;

use mmcontrast_cli::commands::{self, EmbeddingSpace, EvalSplit, Overrides};
use mmcontrast_cli::io::{sha256_hex, write_atomic, RUN_MANIFEST};
use mmcontrast_cli::{CliError, ExperimentConfig};
use mmcontrast_core::model::{EncoderKind, Modality};
use mmcontrast_core::training::RecipeName;
use serde_json::Value;
use tempfile::TempDir;

fn small_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.output_dir = out.to_path_buf();
    let spec = cfg.dataset.synthetic.as_mut().unwrap();
    spec.size = 120;
    spec.height = 16;
    spec.width = 16;
    cfg.model.projection_dim = 16;
    let t = &mut cfg.training.train;
    t.epochs = 1;
    t.pretrain_epochs = 1;
    t.probe_epochs = 1;
    t.batch_size = 16;
    t.label_fraction = 0.3;
    cfg.training.runs = 2;
    cfg
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&read(path)).unwrap()
}

fn has_key(v: &Value, key: &str) -> bool {
    match v {
        Value::Object(m) => m.contains_key(key) || m.values().any(|x| has_key(x, key)),
        Value::Array(a) => a.iter().any(|x| has_key(x, key)),
        _ => false,
    }
}

/// Every manifest entry exists on disk with the recorded hash.
fn check_manifest(dir: &Path) -> BTreeMap<String, Value> {
    let m = json(dir.join(RUN_MANIFEST));
    let entries: BTreeMap<String, Value> = m["artifacts"].as_object().unwrap().clone().into_iter().collect();
    for (rel, e) in &entries {
        let bytes = std::fs::read(dir.join(rel)).unwrap();
        assert_eq!(e["sha256"].as_str().unwrap(), sha256_hex(&bytes), "{rel}");
        assert_eq!(e["bytes"].as_u64().unwrap(), bytes.len() as u64);
    }
    entries
}

#[test]
fn echoed_config_round_trips() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.model.s2_encoder = EncoderKind::Resnet34;
    cfg.metrics.threshold = 0.4;
    cfg.training.train.eval_threshold = 0.4;
    let text = cfg.to_toml().unwrap();
    let back = ExperimentConfig::parse(&text, None).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.train_config().eval_threshold, 0.4);
}

#[test]
fn invalid_configs_are_rejected_with_a_reason() {
    let bad = |text: &str| match ExperimentConfig::parse(text, None).and_then(|c| c.validate().map(|_| c)) {
        Err(CliError::Config(msg)) => msg,
        Err(e) => e.to_string(),
        Ok(_) => panic!("accepted: {text}"),
    };
    assert!(bad("[model]\nwidth = 3\n").contains("width"));
    assert!(bad("[training]\nbogus = 1\n").contains("bogus"));
    assert!(bad("[training]\neval_threshold = 0.3\n").contains("[metrics]"));
    assert!(bad("[metrics]\nthreshold = 1.5\n").contains("threshold"));
    assert!(bad("[training]\nruns = 0\n").contains("runs"));
    assert!(bad("[dataset]\n").contains("exactly one"));
    assert!(bad("[dataset]\nmanifest = \"/no/such/manifest.jsonl\"\nvocabulary = \"/no/such/v.txt\"\n")
        .contains("does not exist"));
    assert!(bad("[training]\nbatch_size = 2\n").contains("batch_size"));
}

#[test]
fn relative_manifest_paths_resolve_against_the_config() {
    let cfg = ExperimentConfig::parse("[dataset]\nmanifest = \"d/m.jsonl\"\nvocabulary = \"d/v.txt\"\n", Some(Path::new("/base")))
        .unwrap();
    assert_eq!(cfg.dataset.manifest.as_deref(), Some(Path::new("/base/d/m.jsonl")));
    assert_eq!(cfg.dataset.vocabulary.as_deref(), Some(Path::new("/base/d/v.txt")));
}

#[test]
fn overrides_take_precedence() {
    let mut cfg = ExperimentConfig::default();
    Overrides {
        seed: Some(7),
        output: Some("elsewhere".into()),
        recipe: Some(RecipeName::IaiSimclr),
        label_fraction: Some(0.2),
        runs: Some(3),
    }
    .apply(&mut cfg)
    .unwrap();
    assert_eq!(cfg.training.train.seed, 7);
    assert_eq!(cfg.output_dir, Path::new("elsewhere"));
    assert_eq!(cfg.training.train.recipe.name(), RecipeName::IaiSimclr);
    assert_eq!(cfg.training.train.label_fraction, 0.2);
    assert_eq!(cfg.training.runs, 3);
    let custom = Overrides {
        recipe: Some(RecipeName::Custom),
        ..Overrides::default()
    };
    assert!(custom.apply(&mut cfg).is_err());
}

#[test]
fn default_synth_writes_a_loadable_deterministic_dataset() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let mut cfg = ExperimentConfig {
        output_dir: a.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    let summary = commands::synth(&cfg, None).unwrap();
    assert_eq!(summary.size, 2000);
    assert_eq!(summary.num_labels, 8);
    assert!((summary.mean_class_similarity - summary.class_similarity_target).abs() <= 0.1);
    let manifest = read(a.path().join(commands::MANIFEST_FILE));
    assert_eq!(manifest.lines().count(), 2000);
    let entries = check_manifest(a.path());
    assert_eq!(entries.keys().filter(|k| k.starts_with("patches/")).count(), 4000);

    cfg.output_dir = b.path().to_path_buf();
    commands::synth(&cfg, None).unwrap();
    assert_eq!(manifest, read(b.path().join(commands::MANIFEST_FILE)));

    // The written files load back as the same dataset.
    let generated = cfg.load_dataset().unwrap();
    let mut reload = cfg.clone();
    reload.dataset.synthetic = None;
    reload.dataset.manifest = Some(a.path().join(commands::MANIFEST_FILE));
    reload.dataset.vocabulary = Some(a.path().join(commands::VOCABULARY_FILE));
    reload.validate().unwrap();
    let loaded = reload.load_dataset().unwrap();
    assert_eq!(loaded.len(), generated.len());
    for (x, y) in loaded.samples.iter().zip(&generated.samples).step_by(97) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.labels, y.labels);
        assert_eq!(x.geokey, y.geokey);
        assert_eq!(x.s1.get().unwrap(), y.s1.get().unwrap());
        assert_eq!(x.s2.get().unwrap(), y.s2.get().unwrap());
    }
}

#[test]
fn synth_seed_changes_the_data() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let mut cfg = small_config(a.path());
    commands::synth(&cfg, Some(1)).unwrap();
    cfg.output_dir = b.path().to_path_buf();
    commands::synth(&cfg, Some(2)).unwrap();
    assert_ne!(
        read(a.path().join(commands::MANIFEST_FILE)),
        read(b.path().join(commands::MANIFEST_FILE))
    );
}

#[test]
fn train_writes_runs_then_aggregate() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let out = commands::train(&cfg).unwrap();
    assert_eq!(out.runs.len(), 2);
    let entries = check_manifest(dir.path());
    for i in 0..2 {
        for rel in [format!("runs/run{i}.json"), format!("curves/run{i}.csv"), format!("checkpoints/run{i}.ckpt")] {
            assert!(entries.contains_key(&rel), "{rel}");
        }
        let run = json(dir.path().join(format!("runs/run{i}.json")));
        assert_eq!(run["checkpoint"], format!("checkpoints/run{i}.ckpt"));
    }
    assert!(entries.contains_key(commands::AGGREGATE_FILE));
    assert!(entries.contains_key(commands::CONFIG_ECHO));
    let agg = json(dir.path().join(commands::AGGREGATE_FILE));
    assert_eq!(agg, out.aggregate_json);
    assert_eq!(agg["n_runs"], 2);
    assert_eq!(agg["recipe"], "mosaic1");
    assert!(agg["scalars"]["micro_f1"]["std"].is_number());
    assert!(!has_key(&agg, "wall_clock_secs"));
    let echoed = ExperimentConfig::load(&dir.path().join(commands::CONFIG_ECHO)).unwrap();
    assert_eq!(echoed, cfg);
}

#[test]
fn single_run_aggregate_has_no_spread() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.training.runs = 1;
    cfg.training.train.recipe = mmcontrast_core::training::LossRecipe::intra_simclr();
    commands::train(&cfg).unwrap();
    let agg = json(dir.path().join(commands::AGGREGATE_FILE));
    assert_eq!(agg["n_runs"], 1);
    assert!(agg["scalars"]["micro_f1"]["mean"].is_number());
    assert!(!has_key(&agg, "std"));
}

#[test]
fn training_is_reproducible_across_output_dirs() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let mut cfg = small_config(a.path());
    commands::train(&cfg).unwrap();
    cfg.output_dir = b.path().to_path_buf();
    commands::train(&cfg).unwrap();
    for rel in [commands::AGGREGATE_FILE, "checkpoints/run1.ckpt"] {
        assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
    }
}

#[test]
fn eval_contracts() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    commands::train(&cfg).unwrap();
    let ckpt = dir.path().join("checkpoints/run0.ckpt");
    let first = commands::eval(&cfg, &ckpt, EvalSplit::HeldOut, None).unwrap();
    let again = commands::eval(&cfg, &ckpt, EvalSplit::HeldOut, None).unwrap();
    assert_eq!(first, again);
    let run = json(dir.path().join("runs/run0.json"));
    assert_eq!(run["report"]["micro_f1"].as_f64().unwrap(), first.micro_f1);

    let csv = read(dir.path().join("eval_per_class.csv"));
    assert_eq!(csv.lines().count(), 1 + 8);
    assert_eq!(json(dir.path().join("eval.json"))["n_labels"], 8);

    let all = commands::eval(&cfg, &ckpt, EvalSplit::All, Some(0.0)).unwrap();
    assert_eq!(all.n_samples, 120);
    assert_eq!(all.micro_r, 1.0);
    assert!(commands::eval(&cfg, &ckpt, EvalSplit::All, Some(-0.1)).is_err());

    let mut other = cfg.clone();
    other.model.projection_dim = 8;
    match commands::eval(&other, &ckpt, EvalSplit::HeldOut, None) {
        Err(CliError::Model(e)) => assert!(e.to_string().contains("incompatible"), "{e}"),
        r => panic!("expected an incompatibility error, got {:?}", r.map(|r| r.micro_f1)),
    }
}

#[test]
fn ablation_table_layout() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let table = commands::ablate_modality(&cfg, None).unwrap();
    assert_eq!(table.rows.iter().filter(|r| !r.extension).count(), 4);
    let names: Vec<&str> = table.rows.iter().map(|r| r.regime.as_str()).collect();
    assert_eq!(
        names,
        [commands::ONLY_S1, commands::ONLY_S2, commands::S1_AVG_S2, commands::S2_AVG_S1, commands::FULL]
    );
    assert!(table.row(commands::FULL).unwrap().extension);
    let csv = read(dir.path().join("ablation.csv"));
    for line in csv.lines() {
        assert_eq!(line.split(',').count(), 1 + 6);
    }
    // Reusing the trained model reproduces the table.
    let again = commands::ablate_modality(&cfg, Some(&dir.path().join("ablation_model.ckpt"))).unwrap();
    assert_eq!(again, table);
    check_manifest(dir.path());
}

#[test]
fn embedding_export_layout() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.dataset.synthetic.as_mut().unwrap().size = 200;
    cfg.training.runs = 1;
    commands::train(&cfg).unwrap();
    let ckpt = dir.path().join("checkpoints/run0.ckpt");
    let data = cfg.load_dataset().unwrap();
    let mc = cfg.model_for(&data).unwrap();

    let paths = commands::export_embeddings(&cfg, &ckpt, EmbeddingSpace::H, true).unwrap();
    let text = read(&paths[0]);
    assert_eq!(text.lines().count(), 201);
    let width = mc.encoder(Modality::S1).out_dim + mc.encoder(Modality::S2).out_dim;
    for line in text.lines() {
        assert_eq!(line.split('\t').count(), 2 + width);
    }
    let row = text.lines().nth(1).unwrap();
    let bits = row.split('\t').nth(1).unwrap();
    assert_eq!(bits.len(), 8);
    assert!(bits.chars().all(|c| c == '0' || c == '1'));

    let pca = read(&paths[1]);
    assert_eq!(pca.lines().next().unwrap(), "id\tlabels\tpc1\tpc2");
    assert_eq!(pca.lines().count(), 201);
    assert!(pca.lines().skip(1).all(|l| l.split('\t').count() == 4));
    let again = commands::export_embeddings(&cfg, &ckpt, EmbeddingSpace::H, true).unwrap();
    assert_eq!(read(&again[1]), pca);

    let z = commands::export_embeddings(&cfg, &ckpt, EmbeddingSpace::Z, false).unwrap();
    assert_eq!(z.len(), 1);
    let header = read(&z[0]).lines().next().unwrap().to_string();
    assert_eq!(header.split('\t').count(), 2 + 2 * 16);
}

#[test]
fn class_similarity_contracts() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.dataset.synthetic.as_mut().unwrap().near_duplicates = vec![[2, 5]];
    let (m, summary) = commands::class_similarity(&cfg, 300, 4).unwrap();
    let l = m.classes.len();
    for a in 0..l {
        assert_eq!(m.values[[a, a]], 1.0);
        for b in 0..l {
            assert_eq!(m.values[[a, b]], m.values[[b, a]]);
        }
    }
    let (a, b, _) = m.most_similar_pair().unwrap();
    assert_eq!((a, b), (2, 5));
    assert_eq!(summary.most_similar.as_ref().unwrap().0, m.classes[2]);
    let (again, _) = commands::class_similarity(&cfg, 300, 4).unwrap();
    assert_eq!(again, m);
    assert_eq!(read(dir.path().join("class_similarity.csv")).lines().count(), 1 + l);
    assert!(commands::class_similarity(&cfg, 0, 4).is_err());
}

#[test]
fn manifest_accumulates_across_commands() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    commands::class_similarity(&cfg, 50, 0).unwrap();
    commands::synth(&cfg, None).unwrap();
    let entries = check_manifest(dir.path());
    assert!(entries.contains_key("class_similarity.csv"));
    assert!(entries.contains_key(commands::MANIFEST_FILE));
}

#[test]
fn atomic_write_replaces_whole_files() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("nested/out.txt");
    write_atomic(&path, b"a much longer first version").unwrap();
    write_atomic(&path, b"short").unwrap();
    assert_eq!(read(&path), "short");
    let leftovers = std::fs::read_dir(dir.path().join("nested")).unwrap().count();
    assert_eq!(leftovers, 1);
}
