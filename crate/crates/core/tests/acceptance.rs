//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line straight to stdout (bypassing the test harness capture) and then
//! asserts. Tests hold a shared lock so timing measurements do not compete
//! for the CPU.

use std::io::Write;
use std::sync::Mutex;
use std::time::Instant;

use hif_core::checkpoint;
use hif_core::gradsuite::{self, Module};
use hif_core::harness::eval::evaluate_task;
use hif_core::harness::{
    make_sample, generate_episode, sweep_hindsight, sweep_position, synergy, train, EvalConfig, TaskKind,
    TrainConfig,
};
use hif_core::model::{compose_loss, EmbeddingMode, HifModel, ModelConfig, Rope};
use hif_core::motion::{estimate_motion_field, synth, SearchParams};
use hif_core::params::Init;
use hif_core::tensor::gradcheck::GradCheckConfig;
use hif_core::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn report(n: u32, ok: bool, detail: String) {
    let line = format!("\ncriterion {n}: {} - {detail}\n", if ok { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn lock() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

#[test]
fn criterion_1_motion_oracle_equivalence() {
    let _g = lock();
    let mut rng = ChaCha8Rng::seed_from_u64(0xc1);
    let (mut blocks, mut equal) = (0usize, 0usize);
    for trial in 0..100u64 {
        let shift = (rng.random_range(-8..=8), rng.random_range(-8..=8));
        let (prev, cur) = synth::translated_pair(64, 64, shift, rng.random::<u64>() ^ trial);
        let ex = estimate_motion_field(&prev, &cur, &SearchParams::exhaustive(8)).unwrap();
        let di = estimate_motion_field(&prev, &cur, &SearchParams::diamond(8)).unwrap();
        blocks += ex.vectors().len();
        equal += ex
            .vectors()
            .iter()
            .zip(di.vectors())
            .filter(|(a, b)| a == b)
            .count();
        assert_eq!(ex.costs(), di.costs());
    }

    let (prev, cur) = synth::translated_pair(64, 64, (5, -7), 99);
    let mut times: Vec<f64> = (0..9)
        .map(|_| {
            let t = Instant::now();
            estimate_motion_field(&prev, &cur, &SearchParams::exhaustive(8)).unwrap();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let ms = times[times.len() / 2];

    let ok = equal == blocks && ms < 50.0;
    report(1, ok, format!("{equal}/{blocks} macroblocks equal, exhaustive 64x64 pair {ms:.2} ms (< 50 ms)"));
    assert_eq!(equal, blocks);
    assert!(ms < 50.0, "exhaustive extraction took {ms:.2} ms");
}

#[test]
fn criterion_2_gradient_suite() {
    let _g = lock();
    let start = Instant::now();
    let results = gradsuite::run(&Module::ALL, GradCheckConfig::default(), |_| {}).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let ok = failed.is_empty() && secs < 300.0;
    report(
        2,
        ok,
        format!(
            "{}/{} cases within 1e-5 (worst {worst:.2e}), {secs:.1} s",
            results.len() - failed.len(),
            results.len()
        ),
    );
    assert!(failed.is_empty(), "failed cases: {failed:?}");
    assert!(secs < 300.0);
    for m in Module::ALL {
        assert!(results.iter().any(|r| r.module == m), "no cases for {}", m.name());
    }
    assert!(results.iter().any(|r| r.module == Module::Model && r.name.contains("end_to_end")));
}

#[test]
fn criterion_3_adaln_identity() {
    let _g = lock();
    let model = HifModel::<f32>::new(ModelConfig::default(), 3).unwrap();
    let c = &model.config;
    let mut init = Init::new(0xada);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let m0: Tensor<f32> = init.normal(&[c.k_f, c.d], 1.0);
        let a0: Tensor<f32> = init.normal(&[c.k_a, c.d], 1.0);
        let mut g = Graph::new();
        let (mut m, mut a) = (g.input(m0.clone()), Some(g.input(a0.clone())));
        let (mut rm, mut ra) = (m, a);
        let h_c = g.constant(Tensor::zeros([1, c.d_expert]).unwrap());
        let rope = c.rope.then(Rope::default);
        for block in &model.net.expert.blocks {
            (m, a) = block.forward(&mut g, &model.store, m, a, h_c, rope).unwrap();
            (rm, ra) = block.forward_unconditioned(&mut g, &model.store, rm, ra, rope).unwrap();
        }
        let dm = g.value(m).max_abs_diff(g.value(rm)).unwrap();
        let da = g.value(a.unwrap()).max_abs_diff(g.value(ra.unwrap())).unwrap();
        worst = worst.max(dm).max(da);
    }
    let ok = worst <= 1e-6;
    report(3, ok, format!("50 inputs, max |AdaLN - LN reference| = {worst:.3e} (<= 1e-6, f32)"));
    assert!(ok, "max deviation {worst:e}");
}

#[test]
fn criterion_4_loss_composition() {
    let _g = lock();
    let base = compose_loss(1.0f64, 2.0, 0.01);
    let mut exact = base == 1.02;

    let model = HifModel::<f64>::new(
        ModelConfig {
            width: 64,
            height: 64,
            ..ModelConfig::tiny()
        },
        4,
    ).unwrap();
    let params = SearchParams::diamond(model.config.search_range);
    let mut checked = 0;
    for seed in 0..5 {
        let ep = generate_episode(TaskKind::DirectionMemory, seed, &params).unwrap();
        let s = make_sample(&ep, ep.decision_step, &model.config);
        for lambda in [0.1, 0.05, 0.01, 0.001, 0.0] {
            let mut g = Graph::new();
            let v = model.loss(&mut g, &s.obs, &s.targets, lambda).unwrap();
            let l_a = g.value(v.l_a.unwrap()).data()[0];
            let l_mv = g.value(v.l_mv).data()[0];
            exact &= g.value(v.l_all).data()[0] == compose_loss(l_a, l_mv, lambda);
            checked += 1;
        }
    }
    report(4, exact, format!("compose(1.0, 2.0, 0.01) = {base}; {checked} model losses bit-exact"));
    assert_eq!(base, 1.02);
    assert!(exact);
}

#[test]
fn criterion_5_hindsight_necessity() {
    let _g = lock();
    let start = Instant::now();
    let steps = 300;
    let eval = EvalConfig {
        trials: 400,
        ..EvalConfig::default()
    };
    let run = |mode: EmbeddingMode| {
        let config = TrainConfig {
            model: ModelConfig {
                mode,
                ..ModelConfig::default()
            },
            steps,
            ..TrainConfig::default()
        };
        let out = train(&config, 1, |_| {}).unwrap();
        evaluate_task(&out.model, TaskKind::DirectionMemory, &eval).unwrap().success_rate
    };
    let hif = run(EmbeddingMode::ExpertConditioned);
    let none = run(EmbeddingMode::None);
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let ok = none <= 0.60 && hif >= 0.90 && minutes < 30.0;
    report(
        5,
        ok,
        format!("direction_memory, 400 trials, {steps} steps: hif(h=8) {hif:.3} (>= 0.90), none {none:.3} (<= 0.60), {minutes:.1} min"),
    );
    assert!(none <= 0.60, "history-blind model scored {none}");
    assert!(hif >= 0.90, "hindsight model scored {hif}");
    assert!(minutes < 30.0);
}

#[test]
fn criterion_6_optional_motion_decoding() {
    let _g = lock();
    let mut identical = 0;
    for seed in 0..20u64 {
        let config = ModelConfig {
            h: [1, 2, 4, 8][seed as usize % 4],
            ..ModelConfig::default()
        };
        let fresh = HifModel::<f32>::new(config, 1000 + seed).unwrap();
        let bytes = checkpoint::to_bytes(&fresh, seed, 0.01).unwrap();
        let model = checkpoint::from_bytes::<f32>(&bytes).unwrap().model;
        let params = SearchParams::diamond(model.config.search_range);
        let ep = generate_episode(TaskKind::ALL[seed as usize % 3], seed, &params).unwrap();
        let obs = make_sample(&ep, ep.decision_step, &model.config).obs.cast::<f32>();

        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &obs).unwrap();
        let a = model.decode_actions(&mut g, &fwd).unwrap();
        let without = g.value(a).clone();

        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &obs).unwrap();
        let _motion = model.decode_motion(&mut g, &fwd).unwrap();
        let a = model.decode_actions(&mut g, &fwd).unwrap();
        let with = g.value(a).clone();

        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if bits(&without) == bits(&with) && bits(&with) == bits(&model.act(&obs).unwrap()) {
            identical += 1;
        }
    }
    report(6, identical == 20, format!("{identical}/20 checkpoints give bit-identical action chunks"));
    assert_eq!(identical, 20);
}

#[test]
fn criterion_7_efficiency_scaling() {
    let _g = lock();
    let base = TrainConfig {
        steps: 0,
        ..TrainConfig::default()
    };
    let eval = EvalConfig {
        trials: 2,
        latency_iters: 31,
        ..EvalConfig::default()
    };
    let hs = [1, 2, 4, 8, 16];
    let sweep = sweep_hindsight(&base, &eval, &hs, 1).unwrap();
    let grid_tokens = 16;
    let queries = base.model.k_f + base.model.k_a;
    let mut counts_ok = sweep.rows.len() == hs.len();
    for (row, &h) in sweep.rows.iter().zip(&hs) {
        counts_ok &= row.h == h;
        counts_ok &= row.backbone_tokens == 1 + grid_tokens + queries;
        counts_ok &= row.frame_stack_tokens == 1 + (h + 1) * grid_tokens + queries;
        counts_ok &= row.hindsight_tokens == 1 + h.div_ceil(2) * (grid_tokens / 4);
    }
    let (hif, stack) = (sweep.latency_ratio, sweep.frame_stack_latency_ratio);
    let ok = counts_ok && hif < 2.0 && stack > 3.0;
    report(
        7,
        ok,
        format!(
            "tokens exact: {counts_ok}; latency(h=16)/latency(h=1): hif {hif:.2} (< 2.0), frame stack {stack:.2} (> 3.0)"
        ),
    );
    assert!(counts_ok, "{:#?}", sweep.rows);
    assert!(hif < 2.0, "hif latency ratio {hif}");
    assert!(stack > 3.0, "frame-stack latency ratio {stack}");
}

#[test]
fn criterion_8_embedding_position_report() {
    let _g = lock();
    let base = TrainConfig {
        steps: 60,
        ..TrainConfig::default()
    };
    let eval = EvalConfig {
        trials: 100,
        ..EvalConfig::default()
    };
    let report8 = sweep_position(&base, &eval, 1).unwrap();
    let json = serde_json::to_string(&hif_core::harness::SweepReport::Position(report8.clone())).unwrap();
    let modes: Vec<_> = report8.rows.iter().map(|r| r.mode).collect();
    let ok = modes == [EmbeddingMode::ExpertConditioned, EmbeddingMode::VlmInjected]
        && report8.rows.iter().all(|r| (0.0..=1.0).contains(&r.success_rate));
    let rates: Vec<String> = report8
        .rows
        .iter()
        .map(|r| format!("{} {:.3}", r.mode, r.success_rate))
        .collect();
    report(8, ok, format!("report generated ({} bytes): {}", json.len(), rates.join(", ")));
    assert!(ok);
}

#[test]
fn criterion_9_synergy_report() {
    let _g = lock();
    let base = TrainConfig {
        steps: 40,
        ..TrainConfig::default()
    };
    let r = synergy(&base, 1).unwrap();
    let json = serde_json::to_string(&hif_core::harness::SweepReport::Synergy(r.clone())).unwrap();
    let ok = r.joint.len() == 40
        && r.motion_only.len() == 40
        && r.joint.iter().chain(&r.motion_only).all(|p| p.l_mv.is_finite())
        && json.contains("motion_only");
    report(
        9,
        ok,
        format!(
            "curves of {} points; final L_MV joint {:.4}, motion-only {:.4}",
            r.joint.len(),
            r.joint_final_l_mv,
            r.motion_only_final_l_mv
        ),
    );
    assert!(ok);
}
