//! Finite-difference check of every training loss with respect to the
//! model parameters, over randomized model sizes and scenes.

use std::fmt;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{p1a_loss, p2a_loss, p3a_loss};
use crate::autodiff::gradcheck::{relative_error, DEFAULT_STEP};
use crate::autodiff::Var;
use crate::error::Result;
use crate::model::{Model, ModelConfig, SceneData};
use crate::params::{ParamStore, Session};
use crate::slow::{context_memory, lm_loss, teacher_forced_logits, token_mixer};
use crate::stack::{forward, stack_task_loss};
use crate::world::{generate_scene, LanguageSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Task,
    Lm,
    P1a,
    P2a,
    P3a,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [Self::Task, Self::Lm, Self::P1a, Self::P2a, Self::P3a];

    pub fn name(self) -> &'static str {
        match self {
            Self::Task => "stack_task_loss",
            Self::Lm => "lm_loss",
            Self::P1a => "p1a_loss",
            Self::P2a => "p2a_loss",
            Self::P3a => "p3a_loss",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub cases_per_loss: usize,
    pub coords_per_case: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cases_per_loss: 20,
            coords_per_case: 48,
            step: DEFAULT_STEP,
            tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub loss: LossKind,
    pub case: usize,
    pub n_agents: usize,
    pub scene_seed: u64,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub config: SuiteConfig,
    pub cases: Vec<CaseReport>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &CaseReport> {
        self.cases
            .iter()
            .filter(|c| !(c.max_rel_error <= self.config.tolerance))
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn max_rel_error(&self, loss: LossKind) -> f64 {
        self.cases
            .iter()
            .filter(|c| c.loss == loss)
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// One randomized model and scene.
pub struct Case {
    pub model: Model,
    pub data: SceneData,
    pub tau: f64,
    /// Language sample used by the language-modeling loss.
    pub lm_sample: LanguageSample,
}

pub fn random_case(rng: &mut ChaCha8Rng, n_agents: usize) -> Result<Case> {
    let widths = [8usize, 16];
    let cfg = ModelConfig {
        n_agents,
        d_q: *widths.choose(rng).expect("nonempty"),
        d_l: *widths.choose(rng).expect("nonempty"),
        hidden: *widths.choose(rng).expect("nonempty"),
        bank_tokens: *[4usize, 8].choose(rng).expect("nonempty"),
        bank_dim: *widths.choose(rng).expect("nonempty"),
        dec_layers: rng.random_range(1..=2),
        seed: rng.random(),
        align: true,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg)?;
    let scene = generate_scene(rng.random_range(0..1_000_000), n_agents, &model.cfg.world)?;
    let data = SceneData::new(&scene, &model)?;
    let lm_sample = match rng.random_range(0..3) {
        0 => data.perception[rng.random_range(0..n_agents)].clone(),
        1 => data.prediction[rng.random_range(0..n_agents)].clone(),
        _ => data.planning.clone(),
    };
    Ok(Case {
        model,
        data,
        tau: rng.random_range(0.07..1.0),
        lm_sample,
    })
}

/// Builds the scalar `loss` for `case` in `s`.
pub fn build_loss(s: &mut Session<'_>, case: &Case, loss: LossKind) -> Result<Var> {
    let (model, d) = (&case.model, &case.data);
    let cfg = &model.cfg;
    let st = forward(s, cfg, &model.statics, d, None)?;
    if loss == LossKind::Task {
        return stack_task_loss(&mut s.g, &st.traj, &d.agents_gt, &d.ego_gt);
    }
    let ctx = token_mixer(s, cfg, st.pooled, &st.tokens, st.traj.v_ego)?;
    if loss == LossKind::P1a {
        return p1a_loss(s, ctx.q_instance, &d.caption_targets);
    }
    let memory = context_memory(s, &ctx)?;
    match loss {
        LossKind::Lm => {
            let x = &case.lm_sample;
            let logits = teacher_forced_logits(s, cfg, memory, &x.prompt_tokens, &x.target_tokens)?;
            lm_loss(&mut s.g, logits, &x.target_tokens)
        }
        LossKind::P2a => {
            let logits = d
                .prediction
                .iter()
                .map(|x| teacher_forced_logits(s, cfg, memory, &x.prompt_tokens, &x.target_tokens))
                .collect::<Result<Vec<_>>>()?;
            p2a_loss(s, cfg, st.traj.v_agents, &logits, case.tau)
        }
        LossKind::P3a => {
            let x = &d.planning;
            let logits = teacher_forced_logits(s, cfg, memory, &x.prompt_tokens, &x.target_tokens)?;
            p3a_loss(s, cfg, st.traj.v_ego, logits)
        }
        LossKind::Task | LossKind::P1a => unreachable!("handled above"),
    }
}

fn loss_value(params: &ParamStore, case: &Case, loss: LossKind) -> Result<f64> {
    let mut s = Session::inference(params);
    let v = build_loss(&mut s, case, loss)?;
    Ok(s.value(v).item())
}

/// Checks `coords` sampled parameter coordinates of `loss` on `case`. Each
/// draw picks a parameter tensor the loss depends on, then a coordinate in it.
pub fn check_case(
    case: &Case,
    loss: LossKind,
    coords: usize,
    step: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, f64, String, usize, f64, f64)> {
    let mut s = Session::new(&case.model.params);
    let v = build_loss(&mut s, case, loss)?;
    let grads = s.gradients(v)?;
    let names: Vec<&String> = grads.keys().collect();

    let mut params = case.model.params.clone();
    let mut worst = (0, -1.0, String::new(), 0, 0.0, 0.0);
    for _ in 0..coords {
        let name = *names.choose(rng).expect("loss depends on some parameter");
        let n = grads[name].numel();
        let j = rng.random_range(0..n);
        let orig = params.get(name).expect("bound").data()[j];
        params.get_mut(name).expect("bound").data_mut()[j] = orig + step;
        let up = loss_value(&params, case, loss)?;
        params.get_mut(name).expect("bound").data_mut()[j] = orig - step;
        let down = loss_value(&params, case, loss)?;
        params.get_mut(name).expect("bound").data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * step);
        let analytic = grads[name].data()[j];
        let err = relative_error(analytic, numeric);
        worst.0 += 1;
        if !(err <= worst.1) {
            worst = (worst.0, err, name.clone(), j, analytic, numeric);
        }
    }
    Ok(worst)
}

/// Agent counts cycled through the cases of each loss.
pub const AGENT_COUNTS: [usize; 3] = [1, 2, 4];

pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut cases = Vec::new();
    for (li, &loss) in LossKind::ALL.iter().enumerate() {
        for c in 0..cfg.cases_per_loss {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream((li * 10_000 + c) as u64);
            let n_agents = AGENT_COUNTS[c % AGENT_COUNTS.len()];
            let case = random_case(&mut rng, n_agents)?;
            let (checked, max_rel_error, worst_param, worst_coord, analytic, numeric) =
                check_case(&case, loss, cfg.coords_per_case, cfg.step, &mut rng)?;
            cases.push(CaseReport {
                loss,
                case: c,
                n_agents,
                scene_seed: case.data.scene.seed,
                checked,
                max_rel_error,
                worst_param,
                worst_coord,
                analytic,
                numeric,
            });
        }
    }
    Ok(SuiteReport {
        config: *cfg,
        cases,
        seconds: start.elapsed().as_secs_f64(),
    })
}
