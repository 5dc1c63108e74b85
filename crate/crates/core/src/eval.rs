//! Held-out metrics: plan collision rate by horizon, caption BLEU-4, QA
//! exact match by hop, and the plan/explanation consistency probe.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::align::{cosine, planning_embeddings};
use crate::error::{Error, Result};
use crate::model::{strip_eos, Model, SceneData};
use crate::params::{ParamStore, Session};
use crate::slow::{context_memory, decode, teacher_forced_logits, token_mixer};
use crate::stack::forward;
use crate::train::{ordered_map, prepare};
use crate::world::{dist, Corpus, Hop, Point, QASample, Scene, WorldConfig};

/// Collision horizons in seconds.
pub const HORIZONS: [f64; 3] = [1.0, 2.0, 3.0];

/// Longest caption or answer the evaluator decodes.
pub const MAX_DECODE: usize = 16;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CollisionRates {
    #[serde(rename = "1s")]
    pub s1: f64,
    #[serde(rename = "2s")]
    pub s2: f64,
    #[serde(rename = "3s")]
    pub s3: f64,
    pub avg: f64,
}

impl CollisionRates {
    pub fn by_horizon(&self) -> [f64; 3] {
        [self.s1, self.s2, self.s3]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct QaAccuracy {
    #[serde(rename = "H0")]
    pub h0: f64,
    #[serde(rename = "H1")]
    pub h1: f64,
    #[serde(rename = "All")]
    pub all: f64,
}

impl QaAccuracy {
    /// Exact-match rates from `(hop, correct)` outcomes. A hop class with no
    /// questions scores 0.
    pub fn from_outcomes(outcomes: &[(Hop, bool)]) -> Self {
        let rate = |f: &dyn Fn(Hop) -> bool| {
            let (n, k) = outcomes
                .iter()
                .filter(|(h, _)| f(*h))
                .fold((0usize, 0usize), |(n, k), &(_, ok)| {
                    (n + 1, k + usize::from(ok))
                });
            if n == 0 {
                0.0
            } else {
                k as f64 / n as f64
            }
        };
        Self {
            h0: rate(&|h| h == Hop::H0),
            h1: rate(&|h| h == Hop::H1),
            all: rate(&|_| true),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub collision_rate: CollisionRates,
    pub bleu4: f64,
    pub qa_acc: QaAccuracy,
    pub consistency: f64,
    pub n_scenes: usize,
}

/// Plan step index checked for a horizon of `h` seconds.
pub fn horizon_steps(h: f64, world: &WorldConfig) -> Result<usize> {
    let k = (h / world.dt).round() as usize;
    if k == 0 || k > world.future_steps {
        return Err(Error::contract(format!(
            "horizon {h} s maps to step {k}, outside 1..={}",
            world.future_steps
        )));
    }
    Ok(k)
}

/// Whether any of the first `steps` plan points is within `r_ego + r_agent`
/// of an agent's ground-truth position at the same step.
pub fn collides(plan: &[Point], scene: &Scene, world: &WorldConfig, steps: usize) -> Result<bool> {
    if plan.len() < steps {
        return Err(Error::contract(format!(
            "plan has {} points, horizon needs {steps}",
            plan.len()
        )));
    }
    for a in &scene.agents {
        if a.future_gt.len() < steps {
            return Err(Error::contract(format!(
                "agent {} has {} future points, horizon needs {steps}",
                a.id,
                a.future_gt.len()
            )));
        }
        let reach = world.ego_radius + world.radius_of(a.class);
        if (0..steps).any(|k| dist(plan[k], a.future_gt[k]) <= reach) {
            return Ok(true);
        }
    }
    Ok(false)
}

pub fn collision_rate(
    plans: &[Vec<Point>],
    scenes: &[Scene],
    world: &WorldConfig,
) -> Result<CollisionRates> {
    if plans.len() != scenes.len() {
        return Err(Error::contract(format!(
            "{} plans for {} scenes",
            plans.len(),
            scenes.len()
        )));
    }
    if scenes.is_empty() {
        return Err(Error::contract("no scenes to evaluate"));
    }
    let mut rates = [0.0; 3];
    for (r, &h) in rates.iter_mut().zip(&HORIZONS) {
        let k = horizon_steps(h, world)?;
        let mut hits = 0usize;
        for (p, s) in plans.iter().zip(scenes) {
            hits += usize::from(collides(p, s, world, k)?);
        }
        *r = hits as f64 / scenes.len() as f64;
    }
    Ok(CollisionRates {
        s1: rates[0],
        s2: rates[1],
        s3: rates[2],
        avg: rates.iter().sum::<f64>() / 3.0,
    })
}

fn ngram_counts<T: Eq + Hash + Clone>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 with uniform weights. Unigram precision is unsmoothed;
/// higher orders use `(matches + 1) / (total + 1)`. The brevity penalty uses
/// the reference length closest to each candidate, shorter on ties.
pub fn bleu4<T: Eq + Hash + Clone>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::contract("bleu4 needs at least one candidate"));
    }
    if candidates.len() != references.len() {
        return Err(Error::contract(format!(
            "{} candidates for {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::contract("every candidate needs a reference"));
        }
        c_len += cand.len();
        r_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("nonempty");
        for n in 1..=4 {
            let cc = ngram_counts(cand, n);
            let mut best: HashMap<&[T], usize> = HashMap::new();
            for r in refs {
                for (g, k) in ngram_counts(r, n) {
                    let e = best.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &cc {
                matches[n - 1] += (*k).min(best.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    if matches[0] == 0 || c_len == 0 {
        return Ok(0.0);
    }
    let mut log_p = (matches[0] as f64 / totals[0] as f64).ln();
    for n in 1..4 {
        log_p += ((matches[n] + 1) as f64 / (totals[n] + 1) as f64).ln();
    }
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(bp * (log_p / 4.0).exp())
}

/// Answer tokens the model decodes for `prompt`, without EOS.
pub fn answer(
    s: &mut Session<'_>,
    model: &Model,
    memory: crate::Var,
    prompt: &[u32],
) -> Result<Vec<u32>> {
    let out = decode(s, &model.cfg, memory, prompt, MAX_DECODE)?;
    Ok(strip_eos(&out.tokens).to_vec())
}

/// Exact-match accuracy of `answers[i]` against `samples[i]`, ignoring
/// anything from the first EOS on.
pub fn score_answers(samples: &[QASample], answers: &[Vec<u32>]) -> Result<QaAccuracy> {
    if samples.len() != answers.len() {
        return Err(Error::contract(format!(
            "{} answers for {} questions",
            answers.len(),
            samples.len()
        )));
    }
    let outcomes: Vec<(Hop, bool)> = samples
        .iter()
        .zip(answers)
        .map(|(q, a)| (q.hop, strip_eos(a) == strip_eos(&q.answer_tokens)))
        .collect();
    Ok(QaAccuracy::from_outcomes(&outcomes))
}

/// Exact-match QA accuracy of greedy answers over the given scenes.
pub fn qa_accuracy(model: &Model, data: &[SceneData]) -> Result<QaAccuracy> {
    let answers = ordered_map(data, |d| {
        let mut s = Session::inference(&model.params);
        let stack = forward(&mut s, &model.cfg, &model.statics, d, None)?;
        let ctx = token_mixer(
            &mut s,
            &model.cfg,
            stack.pooled,
            &stack.tokens,
            stack.traj.v_ego,
        )?;
        let memory = context_memory(&mut s, &ctx)?;
        d.qa.iter()
            .map(|q| answer(&mut s, model, memory, &q.question_tokens))
            .collect::<Result<Vec<_>>>()
    })?;
    let samples: Vec<QASample> = data.iter().flat_map(|d| d.qa.iter().cloned()).collect();
    score_answers(&samples, &answers.concat())
}

/// Parameters used by the consistency probe: the model's own, plus freshly
/// initialized alignment tensors if it has none.
pub fn probe_params(model: &Model) -> ParamStore {
    let mut p = model.params.clone();
    if !model.has_alignment() {
        for (name, t) in model.cfg.init_align_params().iter() {
            p.insert(name.clone(), t.clone());
        }
    }
    p
}

fn scene_consistency(model: &Model, params: &ParamStore, d: &SceneData) -> Result<f64> {
    let cfg = &model.cfg;
    let mut s = Session::inference(params);
    let stack = forward(&mut s, cfg, &model.statics, d, None)?;
    let ctx = token_mixer(&mut s, cfg, stack.pooled, &stack.tokens, stack.traj.v_ego)?;
    let memory = context_memory(&mut s, &ctx)?;
    let p = &d.planning;
    let logits = teacher_forced_logits(&mut s, cfg, memory, &p.prompt_tokens, &p.target_tokens)?;
    let (z_plan, z_llm) = planning_embeddings(&mut s, cfg, stack.traj.v_ego, logits)?;
    let c = cosine(&mut s.g, z_plan.output, z_llm.output)?;
    Ok(s.value(c).item())
}

/// Mean plan/explanation cosine in the planning alignment space.
pub fn consistency_probe(model: &Model, data: &[SceneData]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("no scenes to probe"));
    }
    let params = probe_params(model);
    let c = ordered_map(data, |d| scene_consistency(model, &params, d))?;
    Ok(c.iter().sum::<f64>() / c.len() as f64)
}

struct SceneEval {
    plan: Vec<Point>,
    captions: Vec<(Vec<u32>, Vec<u32>)>,
    answers: Vec<Vec<u32>>,
    consistency: f64,
}

fn eval_scene(model: &Model, probe: &ParamStore, d: &SceneData) -> Result<SceneEval> {
    let cfg = &model.cfg;
    let mut s = Session::inference(&model.params);
    let stack = forward(&mut s, cfg, &model.statics, d, None)?;
    let plan = s
        .value(stack.traj.v_ego)
        .data()
        .chunks(2)
        .map(|c| [c[0], c[1]])
        .collect();
    let ctx = token_mixer(&mut s, cfg, stack.pooled, &stack.tokens, stack.traj.v_ego)?;
    let memory = context_memory(&mut s, &ctx)?;
    let mut captions = Vec::with_capacity(d.perception.len());
    for p in &d.perception {
        let got = answer(&mut s, model, memory, &p.prompt_tokens)?;
        captions.push((got, strip_eos(&p.target_tokens).to_vec()));
    }
    let answers =
        d.qa.iter()
            .map(|q| answer(&mut s, model, memory, &q.question_tokens))
            .collect::<Result<Vec<_>>>()?;
    Ok(SceneEval {
        plan,
        captions,
        answers,
        consistency: scene_consistency(model, probe, d)?,
    })
}

/// Full metric suite over every scene of `corpus`.
pub fn evaluate(model: &Model, corpus: &Corpus) -> Result<EvalReport> {
    let data = prepare(corpus, model)?;
    let probe = probe_params(model);
    let per = ordered_map(&data, |d| eval_scene(model, &probe, d))?;

    let plans: Vec<Vec<Point>> = per.iter().map(|e| e.plan.clone()).collect();
    let collision = collision_rate(&plans, &corpus.scenes, &model.cfg.world)?;
    let (cands, refs): (Vec<_>, Vec<_>) = per
        .iter()
        .flat_map(|e| e.captions.iter().cloned())
        .map(|(c, r)| (c, vec![r]))
        .unzip();
    let samples: Vec<QASample> = data.iter().flat_map(|d| d.qa.iter().cloned()).collect();
    let answers: Vec<Vec<u32>> = per.iter().flat_map(|e| e.answers.iter().cloned()).collect();
    Ok(EvalReport {
        collision_rate: collision,
        bleu4: bleu4(&cands, &refs)?,
        qa_acc: score_answers(&samples, &answers)?,
        consistency: per.iter().map(|e| e.consistency).sum::<f64>() / per.len() as f64,
        n_scenes: per.len(),
    })
}
