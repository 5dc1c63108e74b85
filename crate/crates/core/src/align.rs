//! Cross-modal alignment: the frozen text embedder, prompt-bank attention
//! pooling, and the perception, prediction and planning alignment losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::mlp;
use crate::params::Session;
use crate::world::Category;

/// Seed of the frozen embedding table. Fixed so text targets never depend
/// on the model seed.
pub const TEXT_EMBED_SEED: u64 = 0x7e47_5eed;

/// Meters to decameters before the trajectory projection heads.
pub const TRAJ_INPUT_SCALE: f64 = 0.1;

/// Norm guard used by every cosine in this module.
pub const COS_EPS: f64 = 1e-12;

/// Frozen bag-of-tokens text encoder: the L2-normalized mean of fixed random
/// token vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedder {
    table: Tensor,
}

impl TextEmbedder {
    pub fn new(vocab: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(TEXT_EMBED_SEED);
        Self {
            table: Tensor::randn(&[vocab, dim], 1.0, &mut rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    /// `[1, dim]` unit vector.
    pub fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::contract("cannot embed an empty token sequence"));
        }
        let d = self.dim();
        let mut acc = vec![0.0; d];
        for &t in tokens {
            if t as usize >= self.table.rows() {
                return Err(Error::UnknownToken(t));
            }
            for (a, &v) in acc.iter_mut().zip(self.table.row(t as usize)) {
                *a += v;
            }
        }
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Domain {
                op: "text_embed",
                detail: "mean embedding has zero norm".into(),
            });
        }
        acc.iter_mut().for_each(|a| *a /= norm);
        Ok(Tensor::vector(acc))
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.table.data() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Pooled {
    /// `[rows, D]`, each row a convex combination of bank rows.
    pub output: Var,
    /// `[rows, N]` softmax weights.
    pub weights: Var,
}

/// `alpha = softmax(projected . bank^T)`, `output = alpha . bank`.
pub fn attention_pool(g: &mut Graph, bank: Var, projected: Var) -> Result<Pooled> {
    if g.shape(projected)[1] != g.shape(bank)[1] {
        return Err(Error::shape(
            "attention_pool",
            g.shape(projected),
            g.shape(bank),
        ));
    }
    let bt = g.transpose(bank)?;
    let scores = g.matmul(projected, bt)?;
    let weights = g.softmax(scores)?;
    let output = g.matmul(weights, bank)?;
    Ok(Pooled { output, weights })
}

/// Projects `h` through the head at `phi` and pools it over the bank.
pub fn pool_through(s: &mut Session<'_>, bank: &str, phi: &str, h: Var) -> Result<Pooled> {
    let w = s.param(bank)?;
    let p = mlp(s, h, phi)?;
    attention_pool(&mut s.g, w, p)
}

/// Mean squared error between `phi_p1(q_instance)` and the stacked caption
/// embeddings, averaged over every element.
pub fn p1a_loss(s: &mut Session<'_>, q_instance: Var, targets: &Tensor) -> Result<Var> {
    let rows = s.g.shape(q_instance)[0];
    if targets.rows() != rows {
        return Err(Error::contract(format!(
            "{rows} instance tokens but {} caption embeddings",
            targets.rows()
        )));
    }
    let pred = mlp(s, q_instance, "align.phi_p1")?;
    let t = s.constant(targets.clone());
    let diff = s.g.sub(pred, t)?;
    let sq = s.g.square(diff)?;
    s.g.mean(sq)
}

/// Symmetric InfoNCE over the cosine matrix of `za` and `zb` rows, matched
/// pairs on the diagonal.
pub fn info_nce(g: &mut Graph, za: Var, zb: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::contract(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if g.shape(za) != g.shape(zb) {
        return Err(Error::shape("info_nce", g.shape(za), g.shape(zb)));
    }
    let n = g.shape(za)[0];
    let a = g.normalize_rows(za, COS_EPS)?;
    let b = g.normalize_rows(zb, COS_EPS)?;
    let bt = g.transpose(b)?;
    let sim = g.matmul(a, bt)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    let eye = g.constant(Tensor::identity(n));

    let rows = g.log_softmax(logits)?;
    let rows = g.mul(rows, eye)?;
    let row_sum = g.sum(rows)?;
    let lt = g.transpose(logits)?;
    let cols = g.log_softmax(lt)?;
    let cols = g.mul(cols, eye)?;
    let col_sum = g.sum(cols)?;
    let both = g.add(row_sum, col_sum)?;
    g.scale(both, -1.0 / (2 * n) as f64)
}

/// `-(a . b) / ((|a| + eps)(|b| + eps))` for two `[1, D]` rows.
pub fn neg_cosine(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let c = cosine(g, a, b)?;
    g.scale(c, -1.0)
}

pub fn cosine(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) || g.shape(a)[0] != 1 {
        return Err(Error::shape("cosine", g.shape(a), g.shape(b)));
    }
    let bt = g.transpose(b)?;
    let dot = g.matmul(a, bt)?;
    let na = g.l2_norm(a)?;
    let na = g.add_scalar(na, COS_EPS)?;
    let nb = g.l2_norm(b)?;
    let nb = g.add_scalar(nb, COS_EPS)?;
    let den = g.mul(na, nb)?;
    let inv = g.recip(den)?;
    let c = g.mul(dot, inv)?;
    g.reshape(c, &[1])
}

fn scaled_traj(s: &mut Session<'_>, v: Var, rows: usize, width: usize) -> Result<Var> {
    let flat = s.g.reshape(v, &[rows, width])?;
    s.g.scale(flat, TRAJ_INPUT_SCALE)
}

/// Per-agent prediction and answer embeddings in the `p2` space.
pub fn prediction_embeddings(
    s: &mut Session<'_>,
    cfg: &ModelConfig,
    v_agents: Var,
    answer_logits: &[Var],
) -> Result<(Pooled, Pooled)> {
    let n = s.g.shape(v_agents)[0];
    if answer_logits.len() != n {
        return Err(Error::contract(format!(
            "{n} agents but {} prediction answers",
            answer_logits.len()
        )));
    }
    let flat = scaled_traj(s, v_agents, n, cfg.traj_dim())?;
    let z_pred = pool_through(s, "align.p2", "align.phi_pred", flat)?;
    let mut means = Vec::with_capacity(n);
    for &l in answer_logits {
        means.push(s.g.mean_rows(l)?);
    }
    let stacked = s.g.concat_rows(&means)?;
    let z_llm = pool_through(s, "align.p2", "align.phi_llm2", stacked)?;
    Ok((z_pred, z_llm))
}

pub fn p2a_loss(
    s: &mut Session<'_>,
    cfg: &ModelConfig,
    v_agents: Var,
    answer_logits: &[Var],
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::contract(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let (z_pred, z_llm) = prediction_embeddings(s, cfg, v_agents, answer_logits)?;
    info_nce(&mut s.g, z_pred.output, z_llm.output, tau)
}

/// Plan and explanation embeddings in the `p3` space.
pub fn planning_embeddings(
    s: &mut Session<'_>,
    cfg: &ModelConfig,
    v_ego: Var,
    plan_logits: Var,
) -> Result<(Pooled, Pooled)> {
    let flat = scaled_traj(s, v_ego, 1, cfg.traj_dim())?;
    let z_plan = pool_through(s, "align.p3", "align.phi_plan", flat)?;
    let m = s.g.mean_rows(plan_logits)?;
    let z_llm = pool_through(s, "align.p3", "align.phi_llm3", m)?;
    Ok((z_plan, z_llm))
}

pub fn p3a_loss(
    s: &mut Session<'_>,
    cfg: &ModelConfig,
    v_ego: Var,
    plan_logits: Var,
) -> Result<Var> {
    let (z_plan, z_llm) = planning_embeddings(s, cfg, v_ego, plan_logits)?;
    neg_cosine(&mut s.g, z_plan.output, z_llm.output)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ActiveLosses {
    pub p1a: bool,
    pub p2a: bool,
    pub p3a: bool,
}

/// Which alignment loss a language sample trains. The language-modeling loss
/// is always active.
pub fn route(category: Category) -> ActiveLosses {
    match category {
        Category::Perception => ActiveLosses {
            p1a: true,
            ..Default::default()
        },
        Category::Prediction => ActiveLosses {
            p2a: true,
            ..Default::default()
        },
        Category::Planning => ActiveLosses {
            p3a: true,
            ..Default::default()
        },
    }
}
