//! Finite-difference suites behind `hif gradcheck`, tagged by module.
//!
//! Every case reduces its output to a scalar through a fixed random
//! weighting, so each output element contributes a distinct gradient.
//! Module parameters are perturbed away from their initial values first;
//! identity-initialized maps would otherwise hide half the paths.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    AdaLn, Backbone, BackboneDims, ExpertDims, HifModel, HindsightEncoder, JointExpert, ModelConfig,
    Observation, Targets,
};
use crate::motion::{synth, Frame};
use crate::params::{Init, ParamStore};
use crate::tensor::gradcheck::{grad_check, grad_check_params, GradCheckConfig, GradCheckReport};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Module {
    Tensor,
    Hindsight,
    Backbone,
    Expert,
    Model,
}

impl Module {
    pub const ALL: [Module; 5] = [
        Module::Tensor,
        Module::Hindsight,
        Module::Backbone,
        Module::Expert,
        Module::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Module::Tensor => "tensor",
            Module::Hindsight => "hindsight",
            Module::Backbone => "backbone",
            Module::Expert => "expert",
            Module::Model => "model",
        }
    }
}

/// `all` or one module name.
pub fn parse_scope(s: &str) -> Result<Vec<Module>> {
    if s == "all" {
        return Ok(Module::ALL.to_vec());
    }
    Module::ALL
        .into_iter()
        .find(|m| m.name() == s)
        .map(|m| vec![m])
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown gradcheck scope {s:?}; expected all, tensor, hindsight, backbone, expert or model"
            ))
        })
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub module: Module,
    pub name: String,
    pub passed: bool,
    pub max_rel_error: f64,
    pub elements: usize,
    pub millis: f64,
    /// Parameter or input holding the largest error.
    pub worst: Option<String>,
}

struct Case {
    module: Module,
    name: &'static str,
    run: Box<dyn Fn(GradCheckConfig) -> Result<GradCheckReport>>,
}

fn rand_tensor(init: &mut Init, dims: &[usize], std: f64) -> Tensor<f64> {
    init.normal(dims, std)
}

/// Values bounded away from zero, for kinked ops.
fn away_from_zero(init: &mut Init, dims: &[usize]) -> Tensor<f64> {
    let mut t = init.normal::<f64>(dims, 1.0);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + 0.2);
    }
    t
}

/// `sum(x * w)` for a fixed random `w` of the same shape.
fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let dims = g.dims(x).to_vec();
    let w = Init::new(seed ^ 0x5a5a).normal::<f64>(&dims, 1.0);
    let w = g.constant(w);
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

fn perturb(store: &mut ParamStore<f64>, seed: u64, std: f64) -> Result<()> {
    let mut init = Init::new(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let mut t = store.get(id).clone();
        let noise = init.normal::<f64>(t.dims(), std);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
        store.set(id, t)?;
    }
    Ok(())
}

fn input_case(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        module: Module::Tensor,
        name,
        run: Box::new(move |cfg| {
            grad_check(
                |g, v| {
                    let y = f(g, v)?;
                    if g.dims(y).iter().product::<usize>() == 1 {
                        Ok(y)
                    } else {
                        weighted_sum(g, y, 11)
                    }
                },
                &inputs,
                cfg,
            )
        }),
    }
}

fn tensor_cases() -> Vec<Case> {
    let mut i = Init::new(101);
    let a = rand_tensor(&mut i, &[3, 4], 1.0);
    let b = rand_tensor(&mut i, &[3, 4], 1.0);
    let bias = rand_tensor(&mut i, &[4], 1.0);
    let m = rand_tensor(&mut i, &[4, 5], 1.0);
    let seq = rand_tensor(&mut i, &[5, 8], 1.0);
    let seq_k = rand_tensor(&mut i, &[5, 8], 1.0);
    let seq_v = rand_tensor(&mut i, &[5, 8], 1.0);
    let vol = rand_tensor(&mut i, &[4, 4, 4, 2], 1.0);
    let kernel = rand_tensor(&mut i, &[2, 2, 2, 2, 3], 0.5);
    let kinked = away_from_zero(&mut i, &[3, 4]);
    let table = rand_tensor(&mut i, &[4, 3], 1.0);
    let mut mask = vec![true; 25];
    for r in 0..5 {
        for c in r + 1..5 {
            mask[r * 5 + c] = false;
        }
    }
    // Keep every |pred - target| away from the kink at zero.
    let l1_target = {
        let mut t = a.clone();
        t.data_mut().iter_mut().zip(kinked.data()).for_each(|(x, k)| *x -= k);
        t
    };
    vec![
        input_case("add", vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1])),
        input_case("sub", vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1])),
        input_case("mul", vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1])),
        input_case("add_bias", vec![a.clone(), bias.clone()], |g, v| g.add_bias(v[0], v[1])),
        input_case("mul_bias", vec![a.clone(), bias.clone()], |g, v| g.mul_bias(v[0], v[1])),
        input_case("scale", vec![a.clone()], |g, v| Ok(g.scale(v[0], -1.7))),
        input_case("matmul", vec![a.clone(), m.clone()], |g, v| g.matmul(v[0], v[1])),
        input_case("transpose", vec![a.clone()], |g, v| g.transpose(v[0])),
        input_case("reshape", vec![a.clone()], |g, v| g.reshape(v[0], vec![2, 6])),
        input_case("gelu", vec![a.clone()], |g, v| Ok(g.gelu(v[0]))),
        input_case("abs", vec![kinked.clone()], |g, v| Ok(g.abs(v[0]))),
        input_case("normalize", vec![a.clone()], |g, v| g.normalize(v[0])),
        input_case("attention", vec![seq.clone(), seq_k.clone(), seq_v.clone()], |g, v| {
            g.attention(v[0], v[1], v[2], 2, None)
        }),
        input_case(
            "attention_masked",
            vec![seq.clone(), seq_k.clone(), seq_v.clone()],
            move |g, v| g.attention(v[0], v[1], v[2], 2, Some(&mask)),
        ),
        input_case("rope", vec![seq.clone()], |g, v| g.rope(v[0], 2, &[0, 1, 2, 3, 4], 10000.0)),
        input_case("conv3d", vec![vol, kernel], |g, v| g.conv3d(v[0], v[1], [2, 2, 2])),
        input_case("concat_rows", vec![a.clone(), b.clone()], |g, v| g.concat_rows(&[v[0], v[1]])),
        input_case("slice_rows", vec![a.clone()], |g, v| g.slice_rows(v[0], 1, 2)),
        input_case("gather_rows", vec![table], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3])),
        input_case("sum", vec![a.clone()], |g, v| Ok(g.sum(v[0]))),
        input_case("mean", vec![a.clone()], |g, v| Ok(g.mean(v[0]))),
        input_case("l1_loss", vec![a, l1_target], |g, v| g.l1_loss(v[0], v[1])),
    ]
}

const D: usize = 8;
const D_EXPERT: usize = 6;
const HEADS: usize = 2;
const HIDDEN: usize = 16;

fn params_case(
    module: Module,
    name: &'static str,
    store: ParamStore<f64>,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Vec<Var>> + 'static,
) -> Case {
    Case {
        module,
        name,
        run: Box::new(move |cfg| {
            grad_check_params(
                |g, s| {
                    let mut total = None;
                    for (k, y) in f(g, s)?.into_iter().enumerate() {
                        let w = weighted_sum(g, y, 23 + k as u64)?;
                        total = Some(match total {
                            Some(t) => g.add(t, w)?,
                            None => w,
                        });
                    }
                    total.ok_or_else(|| Error::Config("case produced no outputs".into()))
                },
                &store,
                cfg,
            )
        }),
    }
}

fn hindsight_cases() -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for (name, h) in [("encoder_even_h", 2usize), ("encoder_odd_h", 3)] {
        let mut store = ParamStore::new();
        let mut init = Init::new(7);
        let enc = HindsightEncoder::new(&mut store, &mut init, h, (2, 2), D, D_EXPERT, HEADS, 1, HIDDEN)?;
        let mv = store.add("probe.mv", init.normal(&[h, 2, 2, 2], 0.5))?;
        perturb(&mut store, 8, 0.1)?;
        cases.push(params_case(Module::Hindsight, name, store, move |g, s| {
            let x = g.param(s, mv);
            let (tokens, h_c) = enc.forward(g, s, x)?;
            Ok(vec![tokens, h_c])
        }));
    }
    Ok(cases)
}

fn probe_frame(size: usize, seed: u64) -> Frame {
    synth::textured_frame(size, size, seed)
}

fn backbone_cases() -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for (name, frames, history) in [("backbone", 1usize, false), ("backbone_history", 1, true), ("backbone_stack", 2, false)] {
        let mut store = ParamStore::new();
        let mut init = Init::new(31);
        let bb = Backbone::new(
            &mut store,
            &mut init,
            BackboneDims {
                d: D,
                heads: HEADS,
                layers: 1,
                hidden: HIDDEN,
                vocab: 3,
                grid: (2, 2),
                channels: 1,
                k_f: 2,
                k_a: 2,
                frames,
                history_width: history.then_some(D),
            },
        )?;
        let hist = store.add("probe.history", init.normal(&[3, D], 1.0))?;
        perturb(&mut store, 32, 0.05)?;
        let obs: Vec<Frame> = (0..frames).map(|i| probe_frame(32, 40 + i as u64)).collect();
        cases.push(params_case(Module::Backbone, name, store, move |g, s| {
            let refs: Vec<&Frame> = obs.iter().collect();
            let history = if history { Some((g.param(s, hist), true)) } else { None };
            let l = bb.forward(g, s, &refs, 1, history)?;
            Ok(vec![l.m_f, l.a_f.unwrap()])
        }));
    }
    Ok(cases)
}

fn expert_cases() -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    // AdaLN with its inputs as parameters, so z and h_c are checked too.
    {
        let mut store = ParamStore::new();
        let mut init = Init::new(51);
        let ada = AdaLn::new(&mut store, "adaln", D_EXPERT, D)?;
        let z = store.add("probe.z", init.normal(&[3, D], 1.0))?;
        let h_c = store.add("probe.h_c", init.normal(&[1, D_EXPERT], 1.0))?;
        perturb(&mut store, 52, 0.3)?;
        cases.push(params_case(Module::Expert, "adaln", store, move |g, s| {
            let z = g.param(s, z);
            let h = g.param(s, h_c);
            Ok(vec![ada.forward(g, s, z, h)?])
        }));
    }
    for (name, action, rope) in [("joint_expert", true, true), ("joint_expert_no_rope", true, false), ("motion_only_expert", false, true)] {
        let mut store = ParamStore::new();
        let mut init = Init::new(61);
        let ex = JointExpert::new(
            &mut store,
            &mut init,
            ExpertDims {
                d: D,
                d_expert: D_EXPERT,
                heads: HEADS,
                layers: 2,
                hidden: HIDDEN,
                action_stream: action,
                rope,
            },
        )?;
        let m = store.add("probe.m_f", init.normal(&[2, D], 1.0))?;
        let a = store.add("probe.a_f", init.normal(&[2, D], 1.0))?;
        let h_c = store.add("probe.h_c", init.normal(&[1, D_EXPERT], 1.0))?;
        perturb(&mut store, 62, 0.1)?;
        cases.push(params_case(Module::Expert, name, store, move |g, s| {
            let mv = g.param(s, m);
            let av = action.then(|| g.param(s, a));
            let h = g.param(s, h_c);
            let (mt, at) = ex.forward(g, s, mv, av, h)?;
            Ok(std::iter::once(mt).chain(at).collect())
        }));
    }
    Ok(cases)
}

/// Tiny model whose full objective is checked end to end.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        d: D,
        d_expert: D_EXPERT,
        heads: HEADS,
        ffn_mult: 2,
        h: 3,
        n: 2,
        k_f: 2,
        k_a: 2,
        ..ModelConfig::tiny()
    }
}

fn model_cases() -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for (name, mode) in [
        ("end_to_end", crate::model::EmbeddingMode::ExpertConditioned),
        ("end_to_end_vlm_injected", crate::model::EmbeddingMode::VlmInjected),
    ] {
        let config = ModelConfig {
            mode,
            ..toy_model_config()
        };
        let mut model = HifModel::<f64>::new(config.clone(), 71)?;
        perturb(&mut model.store, 72, 0.05)?;
        let mut init = Init::new(73);
        let (r, c) = config.grid();
        let obs = Observation {
            task_id: 2,
            frames: vec![probe_frame(config.width, 74)],
            mv: Some(init.normal(&[config.h, r, c, 2], 0.5)),
        };
        let targets = Targets {
            actions: init.normal(&[config.n, config.action_dim], 1.0),
            motion: init.normal(&[config.n, config.motion_width()], 1.0),
        };
        let net = model.clone();
        cases.push(Case {
            module: Module::Model,
            name,
            run: Box::new(move |cfg| {
                grad_check_params(
                    |g, s| {
                        let m = HifModel {
                            config: net.config.clone(),
                            net: net.net.clone(),
                            store: s.clone(),
                        };
                        Ok(m.loss(g, &obs, &targets, 0.01)?.l_all)
                    },
                    &model.store,
                    cfg,
                )
            }),
        });
    }
    Ok(cases)
}

fn cases(module: Module) -> Result<Vec<Case>> {
    match module {
        Module::Tensor => Ok(tensor_cases()),
        Module::Hindsight => hindsight_cases(),
        Module::Backbone => backbone_cases(),
        Module::Expert => expert_cases(),
        Module::Model => model_cases(),
    }
}

/// Runs every case in `modules`; `on_case` sees each result as it lands.
pub fn run(modules: &[Module], config: GradCheckConfig, mut on_case: impl FnMut(&CaseResult)) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for &m in modules {
        for case in cases(m)? {
            let start = Instant::now();
            let report = (case.run)(config)?;
            let r = CaseResult {
                module: case.module,
                name: case.name.to_string(),
                passed: report.passed(),
                max_rel_error: report.max_rel_error(),
                elements: report.elements(),
                millis: start.elapsed().as_secs_f64() * 1e3,
                worst: report.worst().map(|w| w.name.clone()),
            };
            on_case(&r);
            out.push(r);
        }
    }
    Ok(out)
}
