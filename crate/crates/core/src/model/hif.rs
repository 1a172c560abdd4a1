//! The assembled policy: hindsight encoder, backbone, joint expert, heads,
//! and the training objective.

use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneDims, LatentPair};
use super::expert::{ExpertDims, Heads, JointExpert};
use super::hindsight::{self, HindsightEncoder};
use crate::error::{Error, Result};
use crate::motion::{Frame, MACROBLOCK};
use crate::params::{Init, ParamStore};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Where the hindsight representation enters the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// `h_c` modulates every expert block through AdaLN.
    #[default]
    ExpertConditioned,
    /// Hindsight tokens are appended to the backbone input instead.
    VlmInjected,
    /// No history at all.
    None,
    /// Raw past frames are patch-embedded into the backbone sequence.
    FrameStackBaseline,
}

impl EmbeddingMode {
    pub const ALL: [EmbeddingMode; 4] = [
        EmbeddingMode::ExpertConditioned,
        EmbeddingMode::VlmInjected,
        EmbeddingMode::None,
        EmbeddingMode::FrameStackBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EmbeddingMode::ExpertConditioned => "expert_conditioned",
            EmbeddingMode::VlmInjected => "vlm_injected",
            EmbeddingMode::None => "none",
            EmbeddingMode::FrameStackBaseline => "frame_stack_baseline",
        }
    }

    pub fn uses_motion(self) -> bool {
        matches!(self, EmbeddingMode::ExpertConditioned | EmbeddingMode::VlmInjected)
    }
}

impl std::str::FromStr for EmbeddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EmbeddingMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

impl std::fmt::Display for EmbeddingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which streams are trained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `L_A + lambda * L_MV`.
    #[default]
    Joint,
    /// Foresight motion only; the action stream is removed from the model.
    MotionOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub d: usize,
    pub d_expert: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub hindsight_layers: usize,
    pub backbone_layers: usize,
    pub expert_layers: usize,
    /// Hindsight length.
    pub h: usize,
    /// Action chunk length.
    pub n: usize,
    pub k_f: usize,
    pub k_a: usize,
    pub action_dim: usize,
    pub vocab: usize,
    pub search_range: i32,
    pub mode: EmbeddingMode,
    pub objective: Objective,
    pub rope: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 64,
            height: 64,
            channels: 1,
            d: 64,
            d_expert: 64,
            heads: 4,
            ffn_mult: 4,
            hindsight_layers: 4,
            backbone_layers: 4,
            expert_layers: 6,
            h: 8,
            n: 8,
            k_f: 8,
            k_a: 8,
            action_dim: 4,
            vocab: 3,
            search_range: 8,
            mode: EmbeddingMode::ExpertConditioned,
            objective: Objective::Joint,
            rope: true,
        }
    }
}

impl ModelConfig {
    /// Small dimensions for gradient checks and fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            width: 32,
            height: 32,
            d: 8,
            d_expert: 8,
            heads: 2,
            ffn_mult: 2,
            hindsight_layers: 1,
            backbone_layers: 1,
            expert_layers: 1,
            h: 2,
            n: 2,
            k_f: 2,
            k_a: 2,
            ..ModelConfig::default()
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / MACROBLOCK, self.width / MACROBLOCK)
    }

    pub fn motion_width(&self) -> usize {
        let (r, c) = self.grid();
        r * c * 2
    }

    fn encoder_active(&self) -> bool {
        self.mode.uses_motion() && self.h > 0
    }

    /// Observations fed to the backbone per step.
    pub fn backbone_frames(&self) -> usize {
        match self.mode {
            EmbeddingMode::FrameStackBaseline => self.h + 1,
            _ => 1,
        }
    }

    pub fn hindsight_tokens(&self) -> usize {
        hindsight::token_count(self.h, self.grid())
    }

    /// Sequence length the backbone transformer sees.
    pub fn backbone_tokens(&self) -> usize {
        let (r, c) = self.grid();
        let queries = self.k_f
            + match self.objective {
                Objective::Joint => self.k_a,
                Objective::MotionOnly => 0,
            };
        let injected = if self.mode == EmbeddingMode::VlmInjected && self.h > 0 {
            self.hindsight_tokens()
        } else {
            0
        };
        1 + self.backbone_frames() * r * c + injected + queries
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0
            || self.height == 0
            || !self.width.is_multiple_of(MACROBLOCK)
            || !self.height.is_multiple_of(MACROBLOCK)
        {
            return bad(format!(
                "frame {}x{} must be a positive multiple of {MACROBLOCK}",
                self.width, self.height
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        let (r, c) = self.grid();
        if self.encoder_active() && (r % 2 != 0 || c % 2 != 0) {
            return bad(format!("macroblock grid {r}x{c} must be even for hindsight blocking"));
        }
        if self.d < 2 || self.heads == 0 || !self.d.is_multiple_of(self.heads) || !(self.d / self.heads).is_multiple_of(2) {
            return bad(format!(
                "width {} must split into {} heads of even size",
                self.d, self.heads
            ));
        }
        if self.n == 0 {
            return bad("chunk length n must be at least 1".into());
        }
        if self.k_f != self.n || (self.objective == Objective::Joint && self.k_a != self.n) {
            return bad(format!(
                "per-step decoding needs k_f = k_a = n; got k_f={}, k_a={}, n={}",
                self.k_f, self.k_a, self.n
            ));
        }
        if self.vocab == 0 || self.action_dim == 0 || self.d_expert == 0 || self.ffn_mult == 0 {
            return bad("vocab, action_dim, d_expert and ffn_mult must be positive".into());
        }
        if self.search_range < 1 {
            return bad(format!("search_range must be positive, got {}", self.search_range));
        }
        Ok(())
    }
}

/// Everything the policy sees at one decision step.
#[derive(Clone, Debug)]
pub struct Observation<T> {
    pub task_id: usize,
    /// Oldest first, current observation last. One frame except in
    /// frame-stacking mode, where it holds `h + 1` frames.
    pub frames: Vec<Frame>,
    /// Normalized `h x G_H x G_W x 2` hindsight tensor (modes that use it).
    pub mv: Option<Tensor<T>>,
}

impl<T: Float> Observation<T> {
    pub fn keyframe(&self) -> &Frame {
        self.frames.last().expect("observation has at least one frame")
    }

    pub fn cast<U: Float>(&self) -> Observation<U> {
        Observation {
            task_id: self.task_id,
            frames: self.frames.clone(),
            mv: self.mv.as_ref().map(Tensor::cast),
        }
    }
}

/// Supervision targets for one sample.
#[derive(Clone, Debug)]
pub struct Targets<T> {
    /// `n x action_dim`.
    pub actions: Tensor<T>,
    /// `n x (G_H * G_W * 2)`.
    pub motion: Tensor<T>,
}

impl<T: Float> Targets<T> {
    pub fn cast<U: Float>(&self) -> Targets<U> {
        Targets {
            actions: self.actions.cast(),
            motion: self.motion.cast(),
        }
    }
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub h_c: Var,
    pub latents: LatentPair,
    pub m_tilde: Var,
    pub a_tilde: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_all: Var,
    pub l_a: Option<Var>,
    pub l_mv: Var,
}

/// Scalar losses of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub l_all: f64,
    pub l_a: f64,
    pub l_mv: f64,
}

/// `L_all = L_A + lambda * L_MV`, evaluated in this exact order everywhere.
pub fn compose_loss<T: Float>(l_a: T, l_mv: T, lambda: T) -> T {
    l_a + lambda * l_mv
}

/// Parameter layout; the weights themselves live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub hindsight: Option<HindsightEncoder>,
    pub backbone: Backbone,
    pub expert: JointExpert,
    pub heads: Heads,
}

#[derive(Clone, Debug)]
pub struct HifModel<T: Float> {
    pub config: ModelConfig,
    pub net: Network,
    pub store: ParamStore<T>,
}

impl<T: Float> HifModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let c = &config;
        let hidden = c.d * c.ffn_mult;
        let joint = c.objective == Objective::Joint;
        let hindsight = if c.encoder_active() {
            Some(HindsightEncoder::new(
                &mut store,
                &mut init,
                c.h,
                c.grid(),
                c.d,
                c.d_expert,
                c.heads,
                c.hindsight_layers,
                hidden,
            )?)
        } else {
            None
        };
        let backbone = Backbone::new(
            &mut store,
            &mut init,
            BackboneDims {
                d: c.d,
                heads: c.heads,
                layers: c.backbone_layers,
                hidden,
                vocab: c.vocab,
                grid: c.grid(),
                channels: c.channels,
                k_f: c.k_f,
                k_a: if joint { c.k_a } else { 0 },
                frames: c.backbone_frames(),
                history_width: (c.mode == EmbeddingMode::VlmInjected && c.h > 0).then_some(c.d),
            },
        )?;
        let expert = JointExpert::new(
            &mut store,
            &mut init,
            ExpertDims {
                d: c.d,
                d_expert: c.d_expert,
                heads: c.heads,
                layers: c.expert_layers,
                hidden,
                action_stream: joint,
                rope: c.rope,
            },
        )?;
        let heads = Heads::new(&mut store, &mut init, c.d, joint.then_some(c.action_dim), c.grid())?;
        Ok(HifModel {
            config,
            net: Network {
                hindsight,
                backbone,
                expert,
                heads,
            },
            store,
        })
    }

    /// Same layout and values in another precision.
    pub fn cast<U: Float>(&self) -> HifModel<U> {
        HifModel {
            config: self.config.clone(),
            net: self.net.clone(),
            store: self.store.cast(),
        }
    }

    fn check_observation(&self, obs: &Observation<T>) -> Result<()> {
        let c = &self.config;
        if obs.frames.len() != c.backbone_frames() {
            return Err(Error::Config(format!(
                "mode {} expects {} frames per observation, got {}",
                c.mode,
                c.backbone_frames(),
                obs.frames.len()
            )));
        }
        Ok(())
    }

    /// Hindsight tokens and `h_c` (zero when the mode does not condition
    /// the expert).
    fn encode_history(&self, g: &mut Graph<T>, obs: &Observation<T>) -> Result<(Option<Var>, Var)> {
        let zero = |g: &mut Graph<T>| -> Result<Var> { Ok(g.constant(Tensor::zeros([1, self.config.d_expert])?)) };
        let Some(enc) = &self.net.hindsight else {
            return Ok((None, zero(g)?));
        };
        let mv = obs
            .mv
            .clone()
            .ok_or_else(|| Error::Config(format!("mode {} needs a motion tensor", self.config.mode)))?;
        let mv = g.input(mv);
        let (tokens, h_c) = enc.forward(g, &self.store, mv)?;
        match self.config.mode {
            EmbeddingMode::ExpertConditioned => Ok((Some(tokens), h_c)),
            _ => Ok((Some(tokens), zero(g)?)),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, obs: &Observation<T>) -> Result<Forward> {
        self.check_observation(obs)?;
        let (tokens, h_c) = self.encode_history(g, obs)?;
        let history = match self.config.mode {
            EmbeddingMode::VlmInjected => tokens.map(|t| (t, true)),
            _ => None,
        };
        let frames: Vec<&Frame> = obs.frames.iter().collect();
        let latents = self
            .net
            .backbone
            .forward(g, &self.store, &frames, obs.task_id, history)?;
        let (m_tilde, a_tilde) = self
            .net
            .expert
            .forward(g, &self.store, latents.m_f, latents.a_f, h_c)?;
        Ok(Forward {
            h_c,
            latents,
            m_tilde,
            a_tilde,
        })
    }

    pub fn decode_actions(&self, g: &mut Graph<T>, fwd: &Forward) -> Result<Var> {
        let a = fwd
            .a_tilde
            .ok_or_else(|| Error::Config("motion-only model has no action stream".into()))?;
        self.net.heads.decode_actions(g, &self.store, a)
    }

    pub fn decode_motion(&self, g: &mut Graph<T>, fwd: &Forward) -> Result<Var> {
        self.net.heads.decode_motion(g, &self.store, fwd.m_tilde)
    }

    /// Builds the objective for one sample on `g`.
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        obs: &Observation<T>,
        targets: &Targets<T>,
        lambda: f64,
    ) -> Result<LossVars> {
        let fwd = self.forward(g, obs)?;
        let motion = self.decode_motion(g, &fwd)?;
        let mt = g.constant(targets.motion.clone());
        let l_mv = g.l1_loss(motion, mt)?;
        match self.config.objective {
            Objective::Joint => {
                let actions = self.decode_actions(g, &fwd)?;
                let at = g.constant(targets.actions.clone());
                let l_a = g.l1_loss(actions, at)?;
                let weighted = g.scale(l_mv, lambda);
                let l_all = g.add(l_a, weighted)?;
                Ok(LossVars {
                    l_all,
                    l_a: Some(l_a),
                    l_mv,
                })
            }
            Objective::MotionOnly => Ok(LossVars {
                l_all: l_mv,
                l_a: None,
                l_mv,
            }),
        }
    }

    /// Forward pass only; returns the `n x action_dim` chunk.
    pub fn act(&self, obs: &Observation<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, obs)?;
        let a = self.decode_actions(&mut g, &fwd)?;
        Ok(g.value(a).clone())
    }

    /// Predicted action and motion chunks.
    pub fn predict(&self, obs: &Observation<T>) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, obs)?;
        let m = self.decode_motion(&mut g, &fwd)?;
        let a = match fwd.a_tilde {
            Some(_) => {
                let a = self.decode_actions(&mut g, &fwd)?;
                Some(g.value(a).clone())
            }
            None => None,
        };
        Ok((a, g.value(m).clone()))
    }
}

impl Losses {
    pub fn read<T: Float>(g: &Graph<T>, v: &LossVars) -> Self {
        let get = |x: Var| g.value(x).data()[0].as_f64();
        Losses {
            l_all: get(v.l_all),
            l_a: v.l_a.map(get).unwrap_or(0.0),
            l_mv: get(v.l_mv),
        }
    }
}
