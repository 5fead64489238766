use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backbone::{ModelConfig, ParamGroup};
use crate::data::{build_split, load_dataset, DataConfig};
use crate::gradcheck::{compare, numerical_gradient};
use crate::pks::WeightMode;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 4,
        patch_size: 2,
        in_channels: 1,
        embed_dim: 8,
        num_heads: 2,
        num_encoder_blocks: 1,
        num_decoder_blocks: 1,
        mlp_ratio: 2,
        num_classes_initial: 4,
    }
}

fn random_image(rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn((4, 4, 1), || rng.random_range(-1.0..1.0))
}

/// A second-task setting: classes 0 and 1 are finalized, 2 and 3 are live.
struct Fixture {
    model: IncrementalModel,
    old: IncrementalModel,
    store: PrototypeStore,
    classes: ClassMap,
    images: Vec<Array3<f64>>,
    labels: Vec<usize>,
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = tiny_config();
    let old = IncrementalModel::new(&config, &mut rng).unwrap();
    let mut model = old.clone();
    for (_, mut t) in model.named_tensors_mut() {
        t.mapv_inplace(|v| v + rng.random_range(-0.05..0.05));
    }
    for (_, mut t) in model.head.named_tensors_mut() {
        t.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    let mut store = PrototypeStore::new(8);
    for c in 0..2 {
        let center = Array1::from_shape_simple_fn(8, || rng.random_range(-1.0..1.0));
        store.insert_finalized(c, 1, center, 5).unwrap();
    }
    store.begin_task(2, &[2, 3]).unwrap();
    for c in 2..4 {
        let e = Array1::from_shape_simple_fn(8, || rng.random_range(-1.0..1.0));
        store.update_center(c, [e.view()]).unwrap();
    }
    let images = (0..4).map(|_| random_image(&mut rng)).collect();
    Fixture {
        model,
        old,
        store,
        classes: ClassMap::new(0..4),
        images,
        labels: vec![2, 3, 3, 2],
    }
}

fn settings(lambda_pks: f64, lambda_pr: f64, pks: bool, pr: bool) -> ObjectiveSettings {
    ObjectiveSettings {
        weights: LossWeights::new(lambda_pks, lambda_pr).unwrap(),
        pks_enabled: pks,
        pks_mode: WeightMode::InverseDistance,
        pks_epsilon: 1e-8,
        pr_enabled: pr,
        restore_count_per_sample: 1,
    }
}

/// Analytic gradient of `select(breakdown)` against central differences.
fn check_term(
    settings: ObjectiveSettings,
    baseline: Option<ObjectiveSettings>,
    select: fn(&LossBreakdown) -> f64,
) {
    let f = fixture(11);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let plan = StepPlan::draw(&settings, 4, true, &f.store, &mut rng).unwrap();
    assert!(!plan.pairs.is_empty() && !plan.restorations.is_empty());
    let ctx = ObjectiveContext {
        settings: &settings,
        store: &f.store,
        classes: &f.classes,
    };
    let forward = BatchForward::run(&f.model, Some(&f.old), &f.images, true).unwrap();
    let eval = ctx
        .evaluate(&f.model, &forward, &f.labels, &plan, None)
        .unwrap();
    let mut analytic = eval.gradient.unwrap();
    if let Some(base) = baseline {
        let bctx = ObjectiveContext {
            settings: &base,
            ..ctx
        };
        let b = bctx
            .evaluate(&f.model, &forward, &f.labels, &plan, None)
            .unwrap();
        analytic.add_scaled(&b.gradient.unwrap(), -1.0);
    }
    let frozen = eval.patch_weights.clone();
    let numeric = numerical_gradient(&f.model, 1e-5, |m| {
        let b = ctx
            .loss(m, Some(&f.old), &f.images, &f.labels, &plan, Some(&frozen))
            .unwrap();
        select(&b)
    });
    let errors = compare(&analytic, &numeric);
    assert!(errors.len() > 30);
    for (name, err) in errors {
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn cil_gradient_matches_finite_differences() {
    check_term(settings(0.0, 0.0, false, true), None, |b| b.cil);
}

#[test]
fn pks_gradient_matches_finite_differences() {
    check_term(
        settings(1.0, 0.0, true, true),
        Some(settings(0.0, 0.0, true, true)),
        |b| b.pks,
    );
}

#[test]
fn pr_gradient_matches_finite_differences() {
    check_term(
        settings(0.0, 1.0, true, true),
        Some(settings(0.0, 0.0, true, true)),
        |b| b.pr,
    );
}

#[test]
fn total_gradient_matches_finite_differences() {
    check_term(settings(10.0, 10.0, true, true), None, |b| b.total);
}

#[test]
fn hand_set_terms_combine_linearly() {
    let b = LossWeights::new(10.0, 10.0)
        .unwrap()
        .combine(2.0, 0.3, 0.1)
        .unwrap();
    assert!((b.total - 6.0).abs() < 1e-12);
    assert_eq!((b.cil, b.pks, b.pr), (2.0, 0.3, 0.1));
    assert!(LossWeights::new(-1.0, 0.0).is_err());
}

#[test]
fn non_finite_term_is_named() {
    let err = LossWeights::default()
        .combine(1.0, f64::NAN, 0.0)
        .unwrap_err();
    assert!(
        matches!(err, Error::NumericalFailure(ref m) if m.contains("pks")),
        "{err:?}"
    );
}

#[test]
fn zero_weights_leave_only_cil() {
    let f = fixture(3);
    let s = settings(0.0, 0.0, true, true);
    let plan = StepPlan::draw(&s, 4, true, &f.store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ctx = ObjectiveContext {
        settings: &s,
        store: &f.store,
        classes: &f.classes,
    };
    let b = ctx
        .loss(&f.model, Some(&f.old), &f.images, &f.labels, &plan, None)
        .unwrap();
    assert!(b.pks > 0.0 && b.pr > 0.0);
    assert_eq!(b.total, b.cil);
}

#[test]
fn doubling_lambda_pks_doubles_only_its_contribution() {
    let f = fixture(4);
    let s1 = settings(3.0, 2.0, true, true);
    let s2 = settings(6.0, 2.0, true, true);
    let plan = StepPlan::draw(&s1, 4, true, &f.store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let eval = |s: &ObjectiveSettings| {
        ObjectiveContext {
            settings: s,
            store: &f.store,
            classes: &f.classes,
        }
        .loss(&f.model, Some(&f.old), &f.images, &f.labels, &plan, None)
        .unwrap()
    };
    let (a, b) = (eval(&s1), eval(&s2));
    assert_eq!((a.cil, a.pks, a.pr), (b.cil, b.pks, b.pr));
    let contribution = |x: &LossBreakdown, l: f64| x.total - x.cil - 2.0 * x.pr - 0.0 * l;
    assert!((contribution(&b, 6.0) - 2.0 * contribution(&a, 3.0)).abs() < 1e-12);
}

#[test]
fn no_old_model_gates_pks_and_pr() {
    let f = fixture(5);
    let s = settings(10.0, 10.0, true, true);
    let mut store = PrototypeStore::new(8);
    store.begin_task(1, &[2, 3]).unwrap();
    for c in [2, 3] {
        store
            .update_center(c, [Array1::<f64>::ones(8).view()])
            .unwrap();
    }
    let plan = StepPlan::draw(&s, 4, false, &store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(plan, StepPlan::default());
    let ctx = ObjectiveContext {
        settings: &s,
        store: &store,
        classes: &f.classes,
    };
    let b = ctx
        .loss(&f.model, None, &f.images, &f.labels, &plan, None)
        .unwrap();
    assert_eq!((b.pks, b.pr), (0.0, 0.0));
    assert_eq!(b.total, b.cil);
}

fn toy_experiment(epochs: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.model = ModelConfig {
        image_size: 8,
        patch_size: 4,
        in_channels: 3,
        embed_dim: 16,
        num_heads: 2,
        num_encoder_blocks: 1,
        num_decoder_blocks: 1,
        mlp_ratio: 2,
        num_classes_initial: 0,
    };
    c.data = DataConfig {
        num_classes: 4,
        train_per_class: 12,
        test_per_class: 4,
        base_classes: 2,
        classes_per_task: 2,
        num_incremental_tasks: 1,
        ..DataConfig::default()
    };
    c.trainer.epochs = epochs;
    c.trainer.batch_size = 8;
    c.trainer.log_steps = true;
    c
}

fn toy_data(c: &ExperimentConfig) -> (TaskSpec, Dataset, Dataset) {
    let split = load_dataset(&c.data, c.model.image_size, c.model.in_channels).unwrap();
    let d = &c.data;
    let spec = build_split(
        &split.train.labels,
        d.base_classes,
        d.classes_per_task,
        d.num_incremental_tasks,
        d.class_order_seed,
    )
    .unwrap();
    (spec, split.train, split.test)
}

#[test]
fn first_task_steps_log_zero_pks_and_pr() {
    let c = toy_experiment(2);
    let (spec, train, test) = toy_data(&c);
    let mut state = TrainState::new(&c).unwrap();
    let report = state.train_task(&spec, 1, &train, Some(&test), &c).unwrap();
    assert!(!report.steps.is_empty());
    for s in &report.steps {
        assert_eq!((s.loss_pks, s.loss_pr), (0.0, 0.0));
        assert_eq!(s.loss_total, s.loss_cil);
    }
    assert_eq!(report.epochs.len(), 2);
    assert!(report.epochs.iter().all(|e| e.eval_acc.is_some()));
    let report = state.train_task(&spec, 2, &train, Some(&test), &c).unwrap();
    // The first step of a task sees identical live and frozen models.
    assert_eq!(report.steps[0].loss_pks, 0.0);
    assert!(report.steps[1..].iter().all(|s| s.loss_pks > 0.0));
    assert!(report.steps.iter().all(|s| s.loss_pr > 0.0));
}

#[test]
fn zero_learning_rate_keeps_parameters_and_averages_the_batch() {
    let mut c = toy_experiment(1);
    c.trainer.learning_rate = 0.0;
    c.trainer.min_learning_rate = 0.0;
    c.trainer.batch_size = 64;
    c.data.augment = false;
    let (spec, train, _) = toy_data(&c);
    let mut state = TrainState::new(&c).unwrap();
    let mut reference = state.clone();
    reference.begin_task(1, spec.classes(1), &c).unwrap();
    state.train_task(&spec, 1, &train, None, &c).unwrap();
    assert_eq!(state.model, reference.model);
    for &class in spec.classes(1) {
        let idx = train.indices_of(&[class]);
        let mut mean = Array1::<f64>::zeros(16);
        for &i in &idx {
            mean += &state
                .model
                .backbone
                .forward(train.image(i).view())
                .unwrap()
                .cls_token;
        }
        mean /= idx.len() as f64;
        let center = state.store.center(class).unwrap();
        assert!((center - &mean).iter().all(|d| d.abs() < 1e-12));
        assert!(state.store.get(class).unwrap().finalized);
    }
}

#[test]
fn same_seed_gives_bit_identical_state() {
    let c = toy_experiment(1);
    let (spec, train, _) = toy_data(&c);
    let run = || {
        let mut state = TrainState::new(&c).unwrap();
        for t in 1..=2 {
            state.train_task(&spec, t, &train, None, &c).unwrap();
        }
        state
    };
    let (a, b) = (run(), run());
    assert_eq!(a.model, b.model);
    let centers = |s: &TrainState| s.store.iter().map(|p| p.center.clone()).collect::<Vec<_>>();
    assert_eq!(centers(&a), centers(&b));
}

#[test]
fn first_task_loss_trends_down() {
    let mut c = toy_experiment(5);
    c.trainer.eval_each_epoch = false;
    let (spec, train, _) = toy_data(&c);
    let mut state = TrainState::new(&c).unwrap();
    let report = state.train_task(&spec, 1, &train, None, &c).unwrap();
    let losses: Vec<f64> = report.epochs.iter().map(|e| e.loss_total).collect();
    let violations = losses.windows(2).filter(|w| w[1] >= w[0]).count();
    assert!(violations <= 1, "{losses:?}");
    assert!(losses[4] < losses[0]);
}

#[test]
fn snapshot_is_a_frozen_copy() {
    let c = toy_experiment(1);
    let (spec, train, _) = toy_data(&c);
    let mut state = TrainState::new(&c).unwrap();
    state.train_task(&spec, 1, &train, None, &c).unwrap();
    let probe = train.image(0);
    let live_before = state.model.backbone.forward(probe.view()).unwrap();
    let snapshot = state.snapshot_old_model();
    assert_eq!(snapshot.tokens(probe.view()).unwrap(), live_before);
    state.train_task(&spec, 2, &train, None, &c).unwrap();
    assert_ne!(
        state.model.backbone.forward(probe.view()).unwrap(),
        live_before
    );
    assert_eq!(snapshot.tokens(probe.view()).unwrap(), live_before);
    let inner = state.snapshot.as_ref().unwrap();
    assert_eq!(inner.tokens(probe.view()).unwrap(), live_before);
}

#[test]
fn repeated_classes_are_a_protocol_violation() {
    let c = toy_experiment(1);
    let (spec, train, _) = toy_data(&c);
    let mut state = TrainState::new(&c).unwrap();
    state.train_task(&spec, 1, &train, None, &c).unwrap();
    let err = state.begin_task(2, spec.classes(1), &c).unwrap_err();
    assert!(matches!(err, Error::ProtocolViolation(_)));
    let err = state.train_task(&spec, 1, &train, None, &c).unwrap_err();
    assert!(matches!(err, Error::ProtocolViolation(_)));
}

#[test]
fn total_loss_on_first_task_is_cil() {
    let c = toy_experiment(1);
    let (spec, train, _) = toy_data(&c);
    let mut state = TrainState::new(&c).unwrap();
    state.begin_task(1, spec.classes(1), &c).unwrap();
    let idx = train.indices_of(spec.classes(1));
    let batch = Batch::gather(&train, &idx[..6]);
    let settings = ObjectiveSettings::from_config(&c).unwrap();
    let b = state
        .total_loss(&batch, &settings, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    assert_eq!(b.total, b.cil);
    assert!((b.cil - 2f64.ln()).abs() < 1e-12);
}
