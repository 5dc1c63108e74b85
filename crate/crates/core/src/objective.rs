//! Per-scene training objective: stack task loss, language-modeling loss on
//! one routed item, and the alignment loss its category selects.

use serde::{Deserialize, Serialize};

use crate::align::{p1a_loss, p2a_loss, p3a_loss, route, ActiveLosses};
use crate::autodiff::Var;
use crate::error::Result;
use crate::model::{Model, SceneData};
use crate::params::Session;
use crate::slow::{context_memory, lm_loss, teacher_forced_logits, token_mixer};
use crate::stack::{forward, stack_task_loss, StackOutput};
use crate::world::Category;

/// What the language head trains on for one scene in one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Item {
    /// Caption of one agent.
    Perception(usize),
    /// Narrations of every agent in the scene.
    Prediction,
    Planning,
    /// One question-answer pair; trains the language loss only.
    Qa(usize),
}

impl Item {
    pub fn category(self) -> Option<Category> {
        match self {
            Item::Perception(_) => Some(Category::Perception),
            Item::Prediction => Some(Category::Prediction),
            Item::Planning => Some(Category::Planning),
            Item::Qa(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub task: f64,
    pub lm: f64,
    pub p1a: f64,
    pub p2a: f64,
    pub p3a: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            task: 1.0,
            lm: 1.0,
            p1a: 1.0,
            p2a: 1.0,
            p3a: 1.0,
        }
    }
}

/// Loss values of one scene or, summed and divided by the batch size, of a
/// whole step. Inactive alignment losses are exactly zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub task: f64,
    pub lm: f64,
    pub p1a: f64,
    pub p2a: f64,
    pub p3a: f64,
}

impl LossValues {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.task * self.task + w.lm * self.lm + w.p1a * self.p1a + w.p2a * self.p2a + w.p3a * self.p3a
    }

    pub fn add(&mut self, o: &LossValues) {
        self.task += o.task;
        self.lm += o.lm;
        self.p1a += o.p1a;
        self.p2a += o.p2a;
        self.p3a += o.p3a;
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.task *= c;
        self.lm *= c;
        self.p1a *= c;
        self.p2a *= c;
        self.p3a *= c;
        self
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SceneObjective {
    pub total: Var,
    pub task: Var,
    pub lm: Var,
    pub p1a: Option<Var>,
    pub p2a: Option<Var>,
    pub p3a: Option<Var>,
    pub stack: StackOutput,
}

impl SceneObjective {
    pub fn values(&self, s: &Session<'_>) -> LossValues {
        let v = |x: Option<Var>| x.map_or(0.0, |x| s.value(x).item());
        LossValues {
            task: s.value(self.task).item(),
            lm: s.value(self.lm).item(),
            p1a: v(self.p1a),
            p2a: v(self.p2a),
            p3a: v(self.p3a),
        }
    }

    pub fn active(&self) -> ActiveLosses {
        ActiveLosses {
            p1a: self.p1a.is_some(),
            p2a: self.p2a.is_some(),
            p3a: self.p3a.is_some(),
        }
    }
}

/// Builds the weighted scene objective. Alignment losses fire only when the
/// model carries alignment parameters and the item's category routes to
/// them.
pub fn scene_objective(
    s: &mut Session<'_>,
    model: &Model,
    data: &SceneData,
    item: Item,
    weights: &LossWeights,
    tau: f64,
) -> Result<SceneObjective> {
    let cfg = &model.cfg;
    let stack = forward(s, cfg, &model.statics, data, None)?;
    let task = stack_task_loss(&mut s.g, &stack.traj, &data.agents_gt, &data.ego_gt)?;
    let ctx = token_mixer(s, cfg, stack.pooled, &stack.tokens, stack.traj.v_ego)?;
    let memory = context_memory(s, &ctx)?;

    let align = model.has_alignment();
    let active = item.category().map(route).unwrap_or_default();
    let (mut p1a, mut p2a, mut p3a) = (None, None, None);

    let lm = match item {
        Item::Perception(k) => {
            let sample = &data.perception[k];
            let logits = teacher_forced_logits(
                s,
                cfg,
                memory,
                &sample.prompt_tokens,
                &sample.target_tokens,
            )?;
            if align && active.p1a {
                p1a = Some(p1a_loss(s, ctx.q_instance, &data.caption_targets)?);
            }
            lm_loss(&mut s.g, logits, &sample.target_tokens)?
        }
        Item::Prediction => {
            let mut logits = Vec::with_capacity(data.prediction.len());
            let mut sum = None;
            for sample in &data.prediction {
                let l = teacher_forced_logits(
                    s,
                    cfg,
                    memory,
                    &sample.prompt_tokens,
                    &sample.target_tokens,
                )?;
                let loss = lm_loss(&mut s.g, l, &sample.target_tokens)?;
                sum = Some(match sum {
                    None => loss,
                    Some(acc) => s.g.add(acc, loss)?,
                });
                logits.push(l);
            }
            if align && active.p2a {
                p2a = Some(p2a_loss(s, cfg, stack.traj.v_agents, &logits, tau)?);
            }
            let sum = sum.expect("scene has at least one agent");
            s.g.scale(sum, 1.0 / data.prediction.len() as f64)?
        }
        Item::Planning => {
            let sample = &data.planning;
            let logits = teacher_forced_logits(
                s,
                cfg,
                memory,
                &sample.prompt_tokens,
                &sample.target_tokens,
            )?;
            if align && active.p3a {
                p3a = Some(p3a_loss(s, cfg, stack.traj.v_ego, logits)?);
            }
            lm_loss(&mut s.g, logits, &sample.target_tokens)?
        }
        Item::Qa(k) => {
            let q = &data.qa[k];
            let logits =
                teacher_forced_logits(s, cfg, memory, &q.question_tokens, &q.answer_tokens)?;
            lm_loss(&mut s.g, logits, &q.answer_tokens)?
        }
    };

    let mut total = s.g.scale(task, weights.task)?;
    let l = s.g.scale(lm, weights.lm)?;
    total = s.g.add(total, l)?;
    for (loss, w) in [(p1a, weights.p1a), (p2a, weights.p2a), (p3a, weights.p3a)] {
        if let Some(loss) = loss {
            let l = s.g.scale(loss, w)?;
            total = s.g.add(total, l)?;
        }
    }
    Ok(SceneObjective {
        total,
        task,
        lm,
        p1a,
        p2a,
        p3a,
        stack,
    })
}
