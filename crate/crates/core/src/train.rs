//! Joint training loop.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, SceneData};
use crate::objective::{scene_objective, Item, LossValues, LossWeights};
use crate::params::{ParamStore, Session};
use crate::world::Corpus;

pub const THREADS_ENV: &str = "ALNP3_THREADS";

/// Worker count from `ALNP3_THREADS`, default 1.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

/// Maps `f` over `items` on a pool of [`thread_count`] workers, keeping input
/// order in the output.
pub fn ordered_map<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    let n = thread_count();
    if n == 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::contract(e.to_string()))?;
    pool.install(|| items.par_iter().map(f).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_scenes: usize,
    pub seed: u64,
    pub align_enabled: bool,
    pub tau: f64,
    pub grad_clip: f64,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            steps: 2000,
            batch_scenes: 4,
            seed: 0,
            align_enabled: true,
            tau: 0.07,
            grad_clip: 5.0,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: &str| {
            Err(Error::Config {
                key: key.into(),
                detail: detail.into(),
            })
        };
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if self.batch_scenes == 0 {
            return bad("batch_scenes", "must be at least 1");
        }
        if !(self.tau > 0.0) {
            return bad("tau", "must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip", "must be positive");
        }
        Ok(())
    }
}

/// Adam with bias correction and a fixed learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Updates every parameter in `grads`. Errors before writing anything if
    /// an update would be non-finite.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut updates = Vec::with_capacity(grads.len());
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| {
                Error::contract(format!("gradient for unknown parameter `{name}`"))
            })?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let mut next = p.clone();
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                next.data_mut()[i] -= self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
            if !next.is_finite() {
                return Err(Error::Domain {
                    op: "adam",
                    detail: format!("non-finite update for `{name}` at step {}", self.t),
                });
            }
            updates.push((name, next));
        }
        for (name, t) in updates {
            *params.get_mut(name).expect("checked above") = t;
        }
        Ok(())
    }
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveCounts {
    pub p1a: usize,
    pub p2a: usize,
    pub p3a: usize,
}

/// One optimizer step. Loss fields are batch means; inactive losses
/// contribute zero, so `total` is the weighted sum of the fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub task: f64,
    pub lm: f64,
    pub p1a: f64,
    pub p2a: f64,
    pub p3a: f64,
    pub total: f64,
    /// Before clipping.
    pub grad_norm: f64,
    pub active: ActiveCounts,
    pub items: Vec<Item>,
}

impl StepReport {
    pub fn values(&self) -> LossValues {
        LossValues {
            task: self.task,
            lm: self.lm,
            p1a: self.p1a,
            p2a: self.p2a,
            p3a: self.p3a,
        }
    }
}

/// Fixed category cycle across batch slots.
const CYCLE: [u8; 4] = [0, 1, 2, 3];

fn pick_item(slot: usize, data: &SceneData, rng: &mut ChaCha8Rng) -> Item {
    match CYCLE[slot % CYCLE.len()] {
        0 => Item::Perception(rng.random_range(0..data.perception.len())),
        1 => Item::Prediction,
        2 => Item::Planning,
        _ => Item::Qa(rng.random_range(0..data.qa.len())),
    }
}

pub fn prepare(corpus: &Corpus, model: &Model) -> Result<Vec<SceneData>> {
    if corpus.scenes.is_empty() {
        return Err(Error::contract("corpus has no scenes"));
    }
    if corpus.meta.n_agents != model.cfg.n_agents {
        return Err(Error::contract(format!(
            "corpus has {} agents per scene, model expects {}",
            corpus.meta.n_agents, model.cfg.n_agents
        )));
    }
    if corpus.meta.world != model.cfg.world {
        return Err(Error::contract(
            "corpus world settings differ from the model's",
        ));
    }
    ordered_map(&corpus.scenes, |scene| {
        let lang: Vec<_> = corpus.samples_for(scene.seed).cloned().collect();
        let qa: Vec<_> = corpus.qa_for(scene.seed).cloned().collect();
        SceneData::with_samples(scene, &lang, &qa, model)
    })
}

/// Model configuration for a training run: the train config decides the seed
/// and whether alignment tensors exist.
pub fn model_config_for(base: &ModelConfig, cfg: &TrainConfig) -> ModelConfig {
    ModelConfig {
        align: cfg.align_enabled,
        seed: cfg.seed,
        ..base.clone()
    }
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    data: Vec<SceneData>,
    adam: Adam,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(corpus: &Corpus, base: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_config_for(base, &cfg))?;
        let data = prepare(corpus, &model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            adam: Adam::new(cfg.learning_rate),
            model,
            cfg,
            data,
            rng,
            step: 0,
        })
    }

    pub fn data(&self) -> &[SceneData] {
        &self.data
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let n = self.data.len();
        let b = self.cfg.batch_scenes;
        let scenes: Vec<usize> = if b <= n {
            sample(&mut self.rng, n, b).into_vec()
        } else {
            (0..b).map(|_| self.rng.random_range(0..n)).collect()
        };
        let jobs: Vec<(usize, Item)> = scenes
            .iter()
            .enumerate()
            .map(|(slot, &i)| {
                (
                    i,
                    pick_item(self.step * b + slot, &self.data[i], &mut self.rng),
                )
            })
            .collect();

        let model = &self.model;
        let data = &self.data;
        let weights = self.cfg.loss_weights;
        let tau = self.cfg.tau;
        let inv_b = 1.0 / b as f64;
        let results = ordered_map(&jobs, |&(i, item)| {
            let mut s = Session::new(&model.params);
            let obj = scene_objective(&mut s, model, &data[i], item, &weights, tau)?;
            let scaled = s.g.scale(obj.total, inv_b)?;
            let grads = s.gradients(scaled)?;
            Ok((obj.values(&s), obj.active(), grads))
        })?;

        let mut values = LossValues::default();
        let mut active = ActiveCounts::default();
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for (v, a, g) in results {
            values.add(&v);
            active.p1a += usize::from(a.p1a);
            active.p2a += usize::from(a.p2a);
            active.p3a += usize::from(a.p3a);
            for (name, t) in g {
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&t),
                    None => {
                        grads.insert(name, t);
                    }
                }
            }
        }
        let values = values.scaled(inv_b);

        let norm = global_norm(&grads);
        if !norm.is_finite() {
            return Err(Error::Domain {
                op: "train",
                detail: format!("non-finite gradient norm at step {}", self.step),
            });
        }
        if norm > self.cfg.grad_clip {
            let c = self.cfg.grad_clip / norm;
            for t in grads.values_mut() {
                t.data_mut().iter_mut().for_each(|x| *x *= c);
            }
        }
        self.adam.step(&mut self.model.params, &grads)?;

        let report = StepReport {
            step: self.step,
            task: values.task,
            lm: values.lm,
            p1a: values.p1a,
            p2a: values.p2a,
            p3a: values.p3a,
            total: values.total(&weights),
            grad_norm: norm,
            active,
            items: jobs.iter().map(|j| j.1).collect(),
        };
        self.step += 1;
        Ok(report)
    }
}

/// Runs `cfg.steps` optimizer steps, handing every report to `on_step`.
pub fn train(
    corpus: &Corpus,
    base: &ModelConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepReport) -> Result<()>,
) -> Result<Model> {
    let mut t = Trainer::new(corpus, base, cfg.clone())?;
    for _ in 0..cfg.steps {
        let r = t.step()?;
        on_step(&r)?;
    }
    Ok(t.model)
}

/// One arm of an ablation: the trained model, its step reports, and
/// held-out metrics before and after training.
#[derive(Debug, Clone)]
pub struct Arm {
    pub model: Model,
    pub reports: Vec<StepReport>,
    pub untrained: crate::eval::EvalReport,
    pub trained: crate::eval::EvalReport,
}

impl Arm {
    pub fn summary(&self) -> ArmSummary {
        ArmSummary {
            align_enabled: self.model.has_alignment(),
            first: self.reports.first().cloned(),
            last: self.reports.last().cloned(),
            untrained: self.untrained.clone(),
            trained: self.trained.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub align_enabled: bool,
    pub first: Option<StepReport>,
    pub last: Option<StepReport>,
    pub untrained: crate::eval::EvalReport,
    pub trained: crate::eval::EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub config: TrainConfig,
    pub align: ArmSummary,
    pub no_align: ArmSummary,
}

/// Trains twice from the same seed, with and without alignment, and
/// evaluates both arms on `heldout`. `on_step` receives the arm's
/// `align_enabled` flag with every report.
pub fn ablate(
    corpus: &Corpus,
    heldout: &Corpus,
    base: &ModelConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(bool, &StepReport) -> Result<()>,
) -> Result<(Arm, Arm)> {
    let mut run = |align: bool| -> Result<Arm> {
        let c = TrainConfig {
            align_enabled: align,
            ..cfg.clone()
        };
        let init = Model::new(model_config_for(base, &c))?;
        let untrained = crate::eval::evaluate(&init, heldout)?;
        let mut reports = Vec::with_capacity(c.steps);
        let model = train(corpus, base, &c, |r| {
            reports.push(r.clone());
            on_step(align, r)
        })?;
        let trained = crate::eval::evaluate(&model, heldout)?;
        Ok(Arm {
            model,
            reports,
            untrained,
            trained,
        })
    };
    let on = run(true)?;
    let off = run(false)?;
    Ok((on, off))
}
