use hif_core::harness::eval::evaluate_task;
use hif_core::harness::train::moving_average;
use hif_core::harness::{
    evaluate_expert, generate_episode, make_sample, train, train_from, EvalConfig, TaskKind, TrainConfig,
};
use hif_core::model::{EmbeddingMode, HifModel, ModelConfig};
use hif_core::motion::SearchParams;
use hif_core::params::AdamConfig;
use hif_core::policy::StreamingPolicy;
use hif_core::tensor::Tensor;
use hif_core::Error;

fn small(mode: EmbeddingMode) -> ModelConfig {
    ModelConfig {
        width: 64,
        height: 64,
        mode,
        ..ModelConfig::tiny()
    }
}

fn config(mode: EmbeddingMode, steps: usize) -> TrainConfig {
    TrainConfig {
        model: small(mode),
        steps,
        batch_size: 4,
        episodes_per_task: 32,
        optimizer: AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn losses(c: &TrainConfig, threads: usize) -> Vec<u64> {
    train(c, threads, |_| {})
        .unwrap()
        .log
        .iter()
        .flat_map(|r| [r.l_all.to_bits(), r.l_a.to_bits(), r.l_mv.to_bits()])
        .collect()
}

#[test]
fn same_seed_reproduces_every_loss() {
    let c = config(EmbeddingMode::ExpertConditioned, 100);
    let a = losses(&c, 1);
    assert_eq!(a.len(), 300);
    assert_eq!(a, losses(&c, 1));
    assert_eq!(a, losses(&c, 3));
    let other = TrainConfig { seed: 1, ..c };
    assert_ne!(a, losses(&other, 1));
}

fn improves(mode: EmbeddingMode) {
    let c = config(mode, 200);
    let mut seen = 0;
    let out = train(&c, 1, |r| {
        seen += 1;
        assert_eq!(r.step, seen);
        assert!(r.l_all.is_finite());
    })
    .unwrap();
    let l: Vec<f64> = out.log.iter().map(|r| r.l_all).collect();
    let avg = moving_average(&l, 20);
    assert!(avg[199] < 0.8 * avg[19], "{mode}: {} -> {}", avg[19], avg[199]);
    for r in &out.log {
        // batch means of f32 per-sample losses
        assert!((r.l_all - (r.l_a + c.lambda * r.l_mv)).abs() < 1e-6 * r.l_all.max(1.0));
    }
}

#[test]
fn expert_conditioned_loss_decreases() {
    improves(EmbeddingMode::ExpertConditioned);
}

#[test]
fn vlm_injected_loss_decreases() {
    improves(EmbeddingMode::VlmInjected);
}

#[test]
fn frame_stack_loss_decreases() {
    improves(EmbeddingMode::FrameStackBaseline);
}

#[test]
fn zero_steps_returns_the_initial_model() {
    let c = config(EmbeddingMode::None, 0);
    let out = train(&c, 1, |_| {}).unwrap();
    assert!(out.log.is_empty());
    let fresh = HifModel::<f32>::new(c.model.clone(), c.seed).unwrap();
    for ((n1, t1), (n2, t2)) in out.model.store.iter().zip(fresh.store.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(t1, t2);
    }
}

#[test]
fn non_finite_loss_aborts() {
    let c = config(EmbeddingMode::ExpertConditioned, 5);
    let mut model = HifModel::<f32>::new(c.model.clone(), 0).unwrap();
    let id = model.store.ids().next().unwrap();
    let dims = model.store.get(id).dims().to_vec();
    model.store.set(id, Tensor::full(dims, f32::NAN).unwrap()).unwrap();
    match train_from(&c, model, 1, |_| {}) {
        Err(Error::NonFiniteLoss { step }) => assert_eq!(step, 1),
        other => panic!("expected a numeric abort, got {:?}", other.map(|o| o.log.len())),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = config(EmbeddingMode::ExpertConditioned, 1);
    c.batch_size = 0;
    assert!(train(&c, 1, |_| {}).is_err());
    let mut c = config(EmbeddingMode::ExpertConditioned, 1);
    c.lambda = f64::NAN;
    assert!(train(&c, 1, |_| {}).is_err());
    let mut c = config(EmbeddingMode::ExpertConditioned, 1);
    c.tasks.clear();
    assert!(train(&c, 1, |_| {}).is_err());
}

#[test]
fn history_blind_policy_sits_at_chance() {
    let eval = EvalConfig {
        trials: 400,
        ..EvalConfig::default()
    };
    for seed in 0..2 {
        let model = HifModel::<f32>::new(small(EmbeddingMode::None), seed).unwrap();
        let r = evaluate_task(&model, TaskKind::DirectionMemory, &eval).unwrap();
        assert_eq!(r.trials, 400);
        assert!((r.success_rate - 0.5).abs() <= 0.05, "{}", r.success_rate);
    }
}

#[test]
fn scripted_expert_solves_every_task() {
    let eval = EvalConfig {
        trials: 40,
        ..EvalConfig::default()
    };
    for task in TaskKind::ALL {
        let r = evaluate_expert(task, &eval, &SearchParams::diamond(8)).unwrap();
        assert_eq!(r.success_rate, 1.0, "{task}");
    }
}

#[test]
fn streaming_features_match_training_samples() {
    for mode in [EmbeddingMode::ExpertConditioned, EmbeddingMode::FrameStackBaseline] {
        let config = small(mode);
        let model = HifModel::<f64>::new(config.clone(), 0).unwrap();
        let params = SearchParams::diamond(config.search_range);
        let ep = generate_episode(TaskKind::DirectionMemory, 21, &params).unwrap();
        let mut policy = StreamingPolicy::new(model, ep.instruction(), params).unwrap();
        for t in 0..=ep.decision_step + 3 {
            policy.observe(ep.frames[t].clone()).unwrap();
            let live = policy.observation().unwrap();
            let offline = make_sample(&ep, t, &config).obs;
            assert_eq!(live.frames.len(), offline.frames.len());
            for (a, b) in live.frames.iter().zip(&offline.frames) {
                assert_eq!(a.pixels(), b.pixels(), "{mode} t={t}");
            }
            match (&live.mv, &offline.mv) {
                (Some(a), Some(b)) => assert_eq!(a, b, "{mode} t={t}"),
                (None, None) => {}
                _ => panic!("{mode}: motion presence differs at t={t}"),
            }
        }
    }
}
