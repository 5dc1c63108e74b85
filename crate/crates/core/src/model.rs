//! Model configuration, parameter layout and per-scene inputs.

use serde::{Deserialize, Serialize};

use crate::align::TextEmbedder;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::cumsum_pairs;
use crate::params::{Checkpoint, ParamBuilder, ParamStore};
use crate::stack::{locality_bias, pos_codes};
use crate::world::{
    cell_centers, language_samples, patch_centers, pool_matrix, qa_samples, render_bev, vocab_size,
    Category, LanguageSample, QASample, Scene, WorldConfig, BEV_CHANNELS, PATCH,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub world: WorldConfig,
    pub n_agents: usize,
    /// Driving-stack token width.
    pub d_q: usize,
    /// Language width.
    pub d_l: usize,
    /// Hidden width of every two-layer feed-forward block.
    pub hidden: usize,
    /// Fourier frequencies per axis in the positional code.
    pub pe_freqs: usize,
    /// Weight of the fixed positional term in the perception attention scores.
    pub locality: f64,
    /// Meters per unit of trajectory-head output.
    pub offset_scale: f64,
    pub vocab: usize,
    pub max_seq: usize,
    pub dec_layers: usize,
    pub bank_tokens: usize,
    pub bank_dim: usize,
    pub text_dim: usize,
    pub align: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            n_agents: 4,
            d_q: 32,
            d_l: 32,
            hidden: 32,
            pe_freqs: 5,
            locality: 3.0,
            offset_scale: 2.0,
            vocab: vocab_size(),
            max_seq: 32,
            dec_layers: 2,
            bank_tokens: 8,
            bank_dim: 16,
            text_dim: 32,
            align: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn pe_dim(&self) -> usize {
        4 * self.pe_freqs
    }

    pub fn patches(&self) -> usize {
        let pg = self.world.grid / PATCH;
        pg * pg
    }

    /// Rows of the decoder's context memory.
    pub fn context_rows(&self) -> usize {
        self.patches() + self.n_agents + 2
    }

    pub fn traj_dim(&self) -> usize {
        2 * self.world.future_steps
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if !(1..=crate::world::MAX_AGENTS).contains(&self.n_agents) {
            return Err(Error::Config {
                key: "n_agents".into(),
                detail: format!("must be in 1..={}", crate::world::MAX_AGENTS),
            });
        }
        if self.vocab != vocab_size() {
            return Err(Error::Config {
                key: "vocab".into(),
                detail: format!("vocabulary has {} tokens", vocab_size()),
            });
        }
        Ok(())
    }

    /// Every trainable tensor, initialized from `seed`.
    pub fn init_params(&self) -> ParamStore {
        let (dq, dl, h) = (self.d_q, self.d_l, self.hidden);
        let pe = self.pe_dim();
        let tf2 = self.traj_dim();
        let mut b = ParamBuilder::new(self.seed);

        b.normal("stack.perceive.query", &[self.n_agents, dq], 0.5);
        b.linear("stack.perceive.anchor", pe, dq, true);
        b.linear("stack.perceive.key", BEV_CHANNELS, dq, true);
        b.linear("stack.perceive.value", BEV_CHANNELS, dq, true);
        b.mlp("stack.perceive.ffn", dq, h, dq);
        b.linear("stack.predict.slot", pe, dq, true);
        for p in ["wq", "wk", "wv"] {
            b.linear(&format!("stack.predict.{p}"), dq, dq, false);
        }
        b.linear("stack.predict.head", dq, tf2, true);
        b.normal("stack.plan.query", &[1, dq], 0.5);
        b.linear("stack.plan.status", 4, dq, true);
        b.linear("stack.plan.patch", BEV_CHANNELS + pe, dq, true);
        for p in ["wq", "wk", "wv"] {
            b.linear(&format!("stack.plan.{p}"), dq, dq, false);
        }
        b.linear("stack.plan.head", dq, tf2, true);

        b.mlp("mixer.instance", 2 * dq, h, dl);
        b.linear("mixer.bev", BEV_CHANNELS, dl, true);
        b.linear("mixer.ego", dq, dl, true);
        b.linear("mixer.plan", tf2, dl, true);

        b.normal("dec.tok", &[self.vocab, dl], 1.0);
        b.normal("dec.pos", &[self.max_seq, dl], 0.3);
        b.normal("dec.ctx_slot", &[self.context_rows(), dl], 0.3);
        for l in 0..self.dec_layers {
            for p in ["sq", "sk", "sv", "so", "cq", "ck", "cv", "co"] {
                b.linear(&format!("dec.l{l}.{p}"), dl, dl, false);
            }
            b.mlp(&format!("dec.l{l}.ffn"), dl, 2 * dl, dl);
        }
        b.linear("dec.out", dl, self.vocab, true);

        if self.align {
            let (n, d) = (self.bank_tokens, self.bank_dim);
            b.normal("align.p2", &[n, d], 1.0);
            b.normal("align.p3", &[n, d], 1.0);
            b.mlp("align.phi_p1", dl, h, self.text_dim);
            b.mlp("align.phi_pred", tf2, h, d);
            b.mlp("align.phi_llm2", self.vocab, h, d);
            b.mlp("align.phi_plan", tf2, h, d);
            b.mlp("align.phi_llm3", self.vocab, h, d);
        }
        b.finish()
    }

    /// Freshly initialized alignment tensors only, as used by the
    /// consistency probe on models trained without them.
    pub fn init_align_params(&self) -> ParamStore {
        let mut full = Self {
            align: true,
            ..self.clone()
        }
        .init_params();
        full.retain_with_prefix(ALIGN_PREFIX);
        full
    }
}

pub const ALIGN_PREFIX: &str = "align.";

/// Scene-independent constants derived from the configuration.
#[derive(Debug, Clone)]
pub struct Statics {
    pub cell_pe: Tensor,
    pub patch_pe: Tensor,
    pub pool: Tensor,
    pub cumsum: Tensor,
}

impl Statics {
    pub fn new(cfg: &ModelConfig) -> Self {
        let w = &cfg.world;
        Self {
            cell_pe: pos_codes(&cell_centers(w), cfg),
            patch_pe: pos_codes(&patch_centers(w), cfg),
            pool: pool_matrix(w),
            cumsum: cumsum_pairs(w.future_steps),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub statics: Statics,
    pub embedder: TextEmbedder,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let params = cfg.init_params();
        Ok(Self::with_params(cfg, params))
    }

    pub fn with_params(cfg: ModelConfig, params: ParamStore) -> Self {
        let statics = Statics::new(&cfg);
        let embedder = TextEmbedder::new(cfg.vocab, cfg.text_dim);
        Self {
            cfg,
            params,
            statics,
            embedder,
        }
    }

    pub fn has_alignment(&self) -> bool {
        self.params.names().any(|n| n.starts_with(ALIGN_PREFIX))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            meta: serde_json::to_value(&self.cfg)?,
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_value(ck.meta)?;
        cfg.validate()?;
        let expected = cfg.init_params();
        for (name, t) in expected.iter() {
            match ck.params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => return Err(Error::shape("checkpoint", t.shape(), p.shape())),
                None => return Err(Error::Format(format!("checkpoint lacks `{name}`"))),
            }
        }
        if ck.params.len() != expected.len() {
            return Err(Error::Format("checkpoint has unexpected tensors".into()));
        }
        Ok(Self::with_params(cfg, ck.params))
    }
}

/// Everything a training or evaluation pass needs from one scene, computed
/// once up front.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub scene: Scene,
    /// `[grid^2, 4]`
    pub cells: Tensor,
    /// `[n_agents, pe]`
    pub anchor_pe: Tensor,
    /// `[n_agents, 2 T_f]`, each agent's last position repeated per step.
    pub anchor_rows: Tensor,
    /// `[n_agents, grid^2]` fixed positional term of the perception scores.
    pub locality: Tensor,
    /// `[1, 4]`
    pub ego_status: Tensor,
    /// `[1, 2 T_f]`
    pub ego_origin: Tensor,
    /// `[n_agents * T_f, 2]`
    pub agents_gt: Tensor,
    /// `[T_f, 2]`
    pub ego_gt: Tensor,
    /// Per agent id: caption and prediction samples.
    pub perception: Vec<LanguageSample>,
    pub prediction: Vec<LanguageSample>,
    pub planning: LanguageSample,
    pub qa: Vec<QASample>,
    /// `[n_agents, text_dim]` frozen caption embeddings.
    pub caption_targets: Tensor,
}

fn tiled(p: [f64; 2], steps: usize) -> Vec<f64> {
    (0..steps).flat_map(|_| p).collect()
}

impl SceneData {
    pub fn new(scene: &Scene, model: &Model) -> Result<Self> {
        let language = language_samples(scene);
        let qa = qa_samples(scene);
        Self::with_samples(scene, &language, &qa, model)
    }

    pub fn with_samples(
        scene: &Scene,
        language: &[LanguageSample],
        qa: &[QASample],
        model: &Model,
    ) -> Result<Self> {
        let cfg = &model.cfg;
        let w = &cfg.world;
        let n = scene.agents.len();
        if n != cfg.n_agents {
            return Err(Error::contract(format!(
                "scene {} has {n} agents, model expects {}",
                scene.seed, cfg.n_agents
            )));
        }
        let tf = w.future_steps;
        let bev = render_bev(scene, w);
        let cells = bev.reshaped(&[w.cells(), BEV_CHANNELS])?;
        let anchors: Vec<[f64; 2]> = scene.agents.iter().map(|a| a.position()).collect();
        let anchor_pe = pos_codes(&anchors, cfg);

        let locality = locality_bias(&anchor_pe, &model.statics.cell_pe, cfg);

        let anchor_rows = Tensor::new(
            vec![n, 2 * tf],
            anchors.iter().flat_map(|&p| tiled(p, tf)).collect(),
        )?;
        let st = scene.ego_status(w.dt);
        let agents_gt = Tensor::new(
            vec![n * tf, 2],
            scene
                .agents
                .iter()
                .flat_map(|a| a.future_gt.iter().flatten().copied())
                .collect(),
        )?;
        let ego_gt = Tensor::new(
            vec![tf, 2],
            scene.ego_future_gt.iter().flatten().copied().collect(),
        )?;

        let mine = |c: Category| -> Vec<LanguageSample> {
            language
                .iter()
                .filter(|s| s.scene_seed == scene.seed && s.category == c)
                .cloned()
                .collect()
        };
        let by_agent = |samples: Vec<LanguageSample>, what: &str| -> Result<Vec<LanguageSample>> {
            scene
                .agents
                .iter()
                .map(|a| {
                    samples
                        .iter()
                        .find(|s| s.agent_id == Some(a.id))
                        .cloned()
                        .ok_or_else(|| {
                            Error::contract(format!(
                                "scene {} lacks a {what} sample for agent {}",
                                scene.seed, a.id
                            ))
                        })
                })
                .collect()
        };
        let perception = by_agent(mine(Category::Perception), "perception")?;
        let prediction = by_agent(mine(Category::Prediction), "prediction")?;
        let planning = mine(Category::Planning).into_iter().next().ok_or_else(|| {
            Error::contract(format!("scene {} lacks a planning sample", scene.seed))
        })?;
        let qa: Vec<QASample> = qa
            .iter()
            .filter(|q| q.scene_seed == scene.seed)
            .cloned()
            .collect();

        let mut caption_targets = Tensor::zeros(&[n, cfg.text_dim]);
        for (i, s) in perception.iter().enumerate() {
            let body = strip_eos(&s.target_tokens);
            let e = model.embedder.embed(body)?;
            caption_targets.data_mut()[i * cfg.text_dim..(i + 1) * cfg.text_dim]
                .copy_from_slice(e.data());
        }

        Ok(Self {
            scene: scene.clone(),
            cells,
            anchor_pe,
            anchor_rows,
            locality,
            ego_status: Tensor::vector(st.to_vec()),
            ego_origin: Tensor::vector(tiled(scene.ego_position(), tf)),
            agents_gt,
            ego_gt,
            perception,
            prediction,
            planning,
            qa,
            caption_targets,
        })
    }
}

/// Tokens before the first EOS.
pub fn strip_eos(tokens: &[u32]) -> &[u32] {
    let end = tokens
        .iter()
        .position(|&t| t == crate::world::EOS)
        .unwrap_or(tokens.len());
    &tokens[..end]
}
