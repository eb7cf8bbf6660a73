use std::collections::{BTreeSet, HashSet};

use mmcontrast_core::data::{generate_synthetic, Dataset, SyntheticSpec};
use mmcontrast_core::metrics::MetricReport;
use mmcontrast_core::model::{DualEncoderModel, EncoderKind, ModelConfig, Modality};
use mmcontrast_core::training::{
    aggregate_reports, build_step, encode_dataset, prepare_run, run_once, run_protocol, train_joint, train_sequential,
    Adam, Batch, BatchNeeds, LossRecipe, MeanStd, Monitor, NoMonitor, Phase, TrainConfig, TrainError, TrainMode,
};

fn dataset(size: usize) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        size,
        height: 16,
        width: 16,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn model_config() -> ModelConfig {
    ModelConfig::new(EncoderKind::SmallConv, 2, 4, 8)
}

fn quick(recipe: LossRecipe) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        pretrain_epochs: 2,
        probe_epochs: 2,
        batch_size: 16,
        ..TrainConfig::for_recipe(recipe)
    }
}

fn all_needs() -> BatchNeeds {
    BatchNeeds {
        clean: true,
        s1_views: true,
        s2_views: true,
        labels: true,
    }
}

fn batch(data: &Dataset, n: usize, needs: BatchNeeds, cfg: &TrainConfig) -> Batch {
    let idx: Vec<usize> = (0..n).collect();
    Batch::assemble(data, &idx, needs, &cfg.augmentation, 5).unwrap()
}

#[test]
fn mosaic1_step_reports_exactly_its_terms() {
    let data = dataset(40);
    let cfg = quick(LossRecipe::mosaic1());
    let model = DualEncoderModel::<f32>::new(model_config(), 0).unwrap();
    let out = build_step(&cfg.recipe, &cfg.temperatures, &batch(&data, 4, all_needs(), &cfg), &model).unwrap();
    let keys: BTreeSet<&str> = out.loss.terms.keys().map(String::as_str).collect();
    assert_eq!(keys, BTreeSet::from(["intra_s1", "intra_s2", "msc_fused", "bce"]));
}

#[test]
fn self_supervised_steps_never_read_labels() {
    let data = dataset(40);
    for recipe in [LossRecipe::intra_simclr(), LossRecipe::iai_simclr()] {
        let cfg = quick(recipe);
        let model = DualEncoderModel::<f32>::new(model_config(), 0).unwrap();
        let b = batch(&data, 8, all_needs(), &cfg);
        build_step(&cfg.recipe, &cfg.temperatures, &b, &model).unwrap();
        assert_eq!(b.label_reads(), 0);
    }
}

#[derive(Default)]
struct Reads {
    pretrain: usize,
    probe: usize,
    ids: Vec<(Phase, String)>,
}

impl Monitor for Reads {
    fn on_batch(&mut self, phase: Phase, batch: &Batch) {
        match phase {
            Phase::Pretrain => self.pretrain += batch.label_reads(),
            _ => self.probe += batch.label_reads(),
        }
        self.ids.extend(batch.ids.iter().map(|id| (phase, id.clone())));
    }
}

#[test]
fn sequential_training_reads_labels_only_in_the_probe() {
    let data = dataset(120);
    let cfg = quick(LossRecipe::iai_simclr());
    let run = prepare_run(&data, &cfg, 0).unwrap();
    let mut reads = Reads::default();
    train_sequential(&model_config(), &cfg, &run.pool, &run.labeled, &run.held_out, &mut reads).unwrap();
    assert_eq!(reads.pretrain, 0);
    assert!(reads.probe > 0);
}

#[test]
fn label_consuming_recipe_rejects_unlabeled_batch() {
    let data = dataset(40);
    let cfg = quick(LossRecipe::mosaic1());
    let model = DualEncoderModel::<f32>::new(model_config(), 0).unwrap();
    let needs = BatchNeeds {
        labels: false,
        ..all_needs()
    };
    let err = build_step(&cfg.recipe, &cfg.temperatures, &batch(&data, 8, needs, &cfg), &model);
    assert!(matches!(err, Err(TrainError::MissingLabels)));
}

#[test]
fn one_adam_step_lowers_the_batch_loss() {
    let data = dataset(40);
    for recipe in [LossRecipe::mosaic1(), LossRecipe::mosaic2(), LossRecipe::iai_simclr()] {
        let cfg = quick(recipe);
        let mut model = DualEncoderModel::<f32>::new(model_config(), 3).unwrap();
        let b = batch(&data, 16, all_needs(), &cfg);
        let before = build_step(&cfg.recipe, &cfg.temperatures, &b, &model).unwrap();
        let mut adam = Adam::new(model.params(), 1e-3, |_| true);
        adam.step(model.params_mut(), &before.grads);
        let after = build_step(&cfg.recipe, &cfg.temperatures, &b, &model).unwrap();
        assert!(
            after.loss.total < before.loss.total,
            "{}: {} -> {}",
            cfg.recipe.name(),
            before.loss.total,
            after.loss.total
        );
    }
}

fn encoder_params(model: &DualEncoderModel<f32>) -> Vec<(String, Vec<f32>)> {
    model
        .params()
        .iter()
        .filter(|(_, name, _)| !name.starts_with("classifier."))
        .map(|(_, name, t)| (name.to_string(), t.iter().copied().collect()))
        .collect()
}

#[test]
fn linear_probe_leaves_encoders_bit_identical() {
    let data = dataset(120);
    let run = prepare_run(&data, &quick(LossRecipe::intra_simclr()), 0).unwrap();
    let train = |probe_epochs| {
        let cfg = TrainConfig {
            probe_epochs,
            ..quick(LossRecipe::intra_simclr())
        };
        train_sequential(&model_config(), &cfg, &run.pool, &run.labeled, &run.held_out, &mut NoMonitor)
            .unwrap()
            .model
    };
    let (pretrained, probed) = (train(0), train(5));
    assert_eq!(encoder_params(&pretrained), encoder_params(&probed));
    assert_ne!(pretrained.params(), probed.params());
}

#[test]
fn zero_pretraining_is_a_random_feature_probe() {
    let data = dataset(120);
    let cfg = TrainConfig {
        pretrain_epochs: 0,
        seed: 4,
        ..quick(LossRecipe::intra_simclr())
    };
    let run = prepare_run(&data, &cfg, 4).unwrap();
    let trained =
        train_sequential(&model_config(), &cfg, &run.pool, &run.labeled, &run.held_out, &mut NoMonitor).unwrap();
    let fresh = DualEncoderModel::<f32>::new(model_config(), 4).unwrap();
    assert_eq!(encoder_params(&trained.model), encoder_params(&fresh));
    assert!(trained.result.curve.iter().all(|p| p.term == "probe_bce" || p.term == "total"));
}

#[test]
fn joint_training_sees_only_the_stratified_subset() {
    let data = dataset(400);
    let cfg = TrainConfig {
        epochs: 3,
        ..quick(LossRecipe::mosaic1())
    };
    let run = prepare_run(&data, &cfg, 2).unwrap();
    let subset: HashSet<String> = run.labeled.samples.iter().map(|s| s.id.clone()).collect();
    let mut seen = Reads::default();
    train_joint(&model_config(), &cfg, &run.labeled, &run.held_out, &mut seen).unwrap();
    assert!(!seen.ids.is_empty());
    assert!(seen.ids.iter().all(|(phase, id)| *phase == Phase::Joint && subset.contains(id)));
    assert!(seen.probe > 0);
    assert_eq!(subset.len(), (0.1 * run.pool.len() as f64).round() as usize);
}

#[test]
fn joint_curves_are_finite_and_complete() {
    let data = dataset(200);
    let cfg = TrainConfig {
        eval_cadence: 1,
        ..quick(LossRecipe::mosaic2())
    };
    let trained = run_once(&model_config(), &cfg, &data, 1).unwrap();
    let r = &trained.result;
    assert!(r.curve.iter().all(|p| p.value.is_finite()));
    let steps: BTreeSet<usize> = r.curve.iter().map(|p| p.step).collect();
    for s in &steps {
        assert_eq!(r.curve.iter().filter(|p| p.step == *s).count(), 5);
    }
    assert_eq!(r.evaluations.len(), cfg.epochs);
    assert_eq!(r.mode, TrainMode::Joint);
    assert_eq!(r.report.n_samples, 40);
}

#[test]
fn trainers_reject_the_wrong_mode() {
    let data = dataset(40);
    let mc = model_config();
    let joint = quick(LossRecipe::mosaic1());
    let seq = quick(LossRecipe::intra_simclr());
    assert!(matches!(
        train_sequential(&mc, &joint, &data, &data, &data, &mut NoMonitor),
        Err(TrainError::Mode(TrainMode::Joint, _))
    ));
    assert!(matches!(
        train_joint(&mc, &seq, &data, &data, &mut NoMonitor),
        Err(TrainError::Mode(TrainMode::Sequential, _))
    ));
}

#[test]
fn invalid_configs_are_rejected() {
    let mc = model_config();
    for cfg in [
        TrainConfig {
            batch_size: 3,
            ..TrainConfig::default()
        },
        TrainConfig {
            label_fraction: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            label_fraction: 1.5,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(cfg.validate(&mc), Err(TrainError::Config(_))));
    }
}

#[test]
fn identical_seeds_give_zero_spread() {
    let data = dataset(160);
    let cfg = quick(LossRecipe::mosaic1());
    let a = run_once(&model_config(), &cfg, &data, 9).unwrap().result.report;
    let b = run_once(&model_config(), &cfg, &data, 9).unwrap().result.report;
    let agg = aggregate_reports(&[a, b]);
    assert!(agg.scalars.values().all(|m| m.std == 0.0));
    assert!(agg.per_class.iter().all(|c| c.f1.std == 0.0 && c.brier.std == 0.0));
}

fn report_with_micro_f1(v: f64) -> MetricReport {
    MetricReport {
        macro_p: v,
        macro_r: v,
        macro_f1: v,
        micro_p: v,
        micro_r: v,
        micro_f1: v,
        hamming_total: 1.0 - v,
        brier_total: 1.0 - v,
        n_samples: 10,
        n_labels: 0,
        per_class: Vec::new(),
    }
}

#[test]
fn aggregation_uses_sample_standard_deviation() {
    let reports: Vec<_> = [0.6, 0.7, 0.65, 0.65].map(report_with_micro_f1).into();
    let m = aggregate_reports(&reports).scalar("micro_f1").unwrap();
    assert!((m.mean - 0.65).abs() < 1e-12);
    let expected = (0.005f64 / 3.0).sqrt();
    assert!((m.std - expected).abs() < 1e-12);
    assert!((m.std - 0.0408).abs() < 5e-5);
    assert_eq!(MeanStd::of(&[0.3]).std, 0.0);
}

#[test]
fn protocol_labels_runs_with_seed_and_subset() {
    let data = dataset(200);
    let cfg = TrainConfig {
        seed: 11,
        ..quick(LossRecipe::intra_simclr())
    };
    let (protocol, models) = run_protocol(&model_config(), &cfg, &data, 2).unwrap();
    assert_eq!(protocol.seeds, vec![11, 12]);
    assert_eq!(models.len(), 2);
    for (run, hash) in protocol.runs.iter().zip(&protocol.subset_hashes) {
        assert_eq!(&run.subset_hash, hash);
    }
    assert_eq!(protocol.runs[0].seed, 11);
    assert_ne!(protocol.subset_hashes[0], protocol.subset_hashes[1]);
    assert_eq!(protocol.aggregate.n_runs, 2);
    assert!(run_protocol(&model_config(), &cfg, &data, 1).is_err());
}

fn projections(model: &DualEncoderModel<f32>, data: &Dataset, m: Modality) -> ndarray::Array2<f32> {
    model.project(m, &encode_dataset(model, data, m).unwrap()).unwrap()
}

/// Mean cosine of co-registered pairs minus that of mismatched pairs.
fn alignment_gap(model: &DualEncoderModel<f32>, data: &Dataset) -> f64 {
    let z1 = projections(model, data, Modality::S1);
    let z2 = projections(model, data, Modality::S2);
    let n = z1.nrows();
    let (mut matched, mut mismatched) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let c = f64::from(z1.row(i).dot(&z2.row(j)));
            if i == j {
                matched += c;
            } else {
                mismatched += c;
            }
        }
    }
    matched / n as f64 - mismatched / (n * (n - 1)) as f64
}

#[test]
fn inter_modal_pretraining_aligns_co_registered_pairs() {
    let data = dataset(300);
    let cfg = TrainConfig {
        pretrain_epochs: 20,
        probe_epochs: 0,
        batch_size: 32,
        ..TrainConfig::for_recipe(LossRecipe::iai_simclr())
    };
    let run = prepare_run(&data, &cfg, 0).unwrap();
    let trained =
        train_sequential(&model_config(), &cfg, &run.pool, &run.labeled, &run.held_out, &mut NoMonitor).unwrap();
    let untrained = DualEncoderModel::<f32>::new(model_config(), 0).unwrap();
    let gap = alignment_gap(&trained.model, &run.held_out);
    assert!(gap > 0.0, "alignment gap {gap}");
    assert!(gap > alignment_gap(&untrained, &run.held_out));
}
