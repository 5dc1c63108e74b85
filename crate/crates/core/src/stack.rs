//! The driving stack: BEV cells to agent tracks, motion forecasts and an
//! ego plan.
//!
//! Query `i` is hard-assigned to agent `i`; its positional code comes from
//! that agent's last observed position.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SceneData, Statics};
use crate::nn::{linear, mlp};
use crate::params::Session;
use crate::world::BEV_CHANNELS;

/// Fourier features `sin/cos(w x), sin/cos(w y)` at `w = pi 2^k / extent`.
pub fn pos_code(p: [f64; 2], cfg: &ModelConfig) -> Vec<f64> {
    let base = std::f64::consts::PI / cfg.world.extent();
    let mut out = Vec::with_capacity(cfg.pe_dim());
    for k in 0..cfg.pe_freqs {
        let w = base * f64::from(1u32 << k);
        out.extend([
            (w * p[0]).sin(),
            (w * p[0]).cos(),
            (w * p[1]).sin(),
            (w * p[1]).cos(),
        ]);
    }
    out
}

/// Stacked [`pos_code`] rows.
pub fn pos_codes(points: &[[f64; 2]], cfg: &ModelConfig) -> Tensor {
    let data = points.iter().flat_map(|&p| pos_code(p, cfg)).collect();
    Tensor::new(vec![points.len(), cfg.pe_dim()], data).expect("at least one point")
}

#[derive(Debug, Clone, Copy)]
pub struct StackTokens {
    pub q_track: Var,
    pub q_motion: Var,
    pub q_ego: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Trajectories {
    /// `[n_agents, T_f, 2]`
    pub v_agents: Var,
    /// `[T_f, 2]`
    pub v_ego: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct StackOutput {
    pub tokens: StackTokens,
    pub traj: Trajectories,
    /// `[patches, 4]` average-pooled BEV.
    pub pooled: Var,
}

/// Cross-attention of one learnable query per agent over the BEV cells,
/// followed by a two-layer feed-forward head.
///
/// Scores are `q k / sqrt(d) + locality`, where `locality[i, j]` is a fixed
/// positional term between agent `i` and cell `j`. Values see cell content
/// only.
pub fn perceive(
    s: &mut Session<'_>,
    cfg: &ModelConfig,
    cells: Var,
    anchor_pe: &Tensor,
    locality: &Tensor,
) -> Result<Var> {
    let want = [cfg.world.cells(), BEV_CHANNELS];
    if s.g.shape(cells) != want {
        return Err(Error::shape("perceive", s.g.shape(cells), &want));
    }
    if anchor_pe.shape() != [cfg.n_agents, cfg.pe_dim()] {
        return Err(Error::shape(
            "perceive",
            anchor_pe.shape(),
            &[cfg.n_agents, cfg.pe_dim()],
        ));
    }
    let query = s.param("stack.perceive.query")?;
    let ape = s.constant(anchor_pe.clone());
    let anchor = linear(s, ape, "stack.perceive.anchor")?;
    let q = s.g.add(query, anchor)?;
    let k = linear(s, cells, "stack.perceive.key")?;
    let v = linear(s, cells, "stack.perceive.value")?;
    let bias = s.constant(locality.clone());
    let attended = s.g.attention(q, k, v, Some(bias))?;
    mlp(s, attended, "stack.perceive.ffn")
}

/// The locality term of [`perceive`] for arbitrary cell codes.
pub fn locality_bias(anchor_pe: &Tensor, cell_pe: &Tensor, cfg: &ModelConfig) -> Tensor {
    let (n, m, d) = (anchor_pe.rows(), cell_pe.rows(), anchor_pe.cols());
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let a = anchor_pe.row(i);
        for j in 0..m {
            let c = cell_pe.row(j);
            let dot: f64 = (0..d).map(|t| a[t] * c[t]).sum();
            out.data_mut()[i * m + j] = cfg.locality * dot;
        }
    }
    out
}

/// Adds `rows` (tiled start positions) to the running sum of per-step
/// offsets.
fn accumulate(
    s: &mut Session<'_>,
    statics: &Statics,
    offsets: Var,
    rows: &Tensor,
    scale: f64,
) -> Result<Var> {
    let offsets = s.g.scale(offsets, scale)?;
    let c = s.constant(statics.cumsum.clone());
    let summed = s.g.matmul(offsets, c)?;
    let start = s.constant(rows.clone());
    s.g.add(summed, start)
}

/// Agent-agent self-attention, then per-agent offsets accumulated from each
/// agent's last position. Returns `(q_motion, v_agents)`.
pub fn predict(
    s: &mut Session<'_>,
    cfg: &ModelConfig,
    statics: &Statics,
    q_track: Var,
    anchor_pe: &Tensor,
    anchor_rows: &Tensor,
) -> Result<(Var, Var)> {
    let ape = s.constant(anchor_pe.clone());
    let slot = linear(s, ape, "stack.predict.slot")?;
    let h = s.g.add(q_track, slot)?;
    let q = linear(s, h, "stack.predict.wq")?;
    let k = linear(s, h, "stack.predict.wk")?;
    let v = linear(s, h, "stack.predict.wv")?;
    let mixed = s.g.attention(q, k, v, None)?;
    let q_motion = s.g.add(h, mixed)?;
    let offsets = linear(s, q_motion, "stack.predict.head")?;
    let flat = accumulate(s, statics, offsets, anchor_rows, cfg.offset_scale)?;
    let v_agents =
        s.g.reshape(flat, &[cfg.n_agents, cfg.world.future_steps, 2])?;
    Ok((q_motion, v_agents))
}

/// Ego query cross-attends over motion tokens and pooled BEV patches, then
/// emits offsets accumulated from the ego's last position. Returns
/// `(q_ego, v_ego)`.
#[allow(clippy::too_many_arguments)]
pub fn plan(
    s: &mut Session<'_>,
    cfg: &ModelConfig,
    statics: &Statics,
    q_motion: Var,
    pooled: Var,
    ego_status: &Tensor,
    ego_origin: &Tensor,
) -> Result<(Var, Var)> {
    let query = s.param("stack.plan.query")?;
    let st = s.constant(ego_status.clone());
    let st = linear(s, st, "stack.plan.status")?;
    let q0 = s.g.add(query, st)?;

    let ppe = s.constant(statics.patch_pe.clone());
    let patch_in = s.g.concat(&[pooled, ppe])?;
    let patches = linear(s, patch_in, "stack.plan.patch")?;
    let memory = s.g.concat_rows(&[q_motion, patches])?;

    let q = linear(s, q0, "stack.plan.wq")?;
    let k = linear(s, memory, "stack.plan.wk")?;
    let v = linear(s, memory, "stack.plan.wv")?;
    let read = s.g.attention(q, k, v, None)?;
    let q_ego = s.g.add(q0, read)?;
    let offsets = linear(s, q_ego, "stack.plan.head")?;
    let flat = accumulate(s, statics, offsets, ego_origin, cfg.offset_scale)?;
    let v_ego = s.g.reshape(flat, &[cfg.world.future_steps, 2])?;
    Ok((q_ego, v_ego))
}

/// Full stack forward for one scene. `cells` overrides the scene's rendered
/// grid when given (used to differentiate with respect to the BEV input).
pub fn forward(
    s: &mut Session<'_>,
    cfg: &ModelConfig,
    statics: &Statics,
    data: &SceneData,
    cells: Option<Var>,
) -> Result<StackOutput> {
    let cells = match cells {
        Some(c) => c,
        None => s.constant(data.cells.clone()),
    };
    let q_track = perceive(s, cfg, cells, &data.anchor_pe, &data.locality)?;
    let (q_motion, v_agents) =
        predict(s, cfg, statics, q_track, &data.anchor_pe, &data.anchor_rows)?;
    let pool = s.constant(statics.pool.clone());
    let pooled = s.g.matmul(pool, cells)?;
    let (q_ego, v_ego) = plan(
        s,
        cfg,
        statics,
        q_motion,
        pooled,
        &data.ego_status,
        &data.ego_origin,
    )?;
    Ok(StackOutput {
        tokens: StackTokens {
            q_track,
            q_motion,
            q_ego,
        },
        traj: Trajectories { v_agents, v_ego },
        pooled,
    })
}

/// Mean squared waypoint error over every agent and ego waypoint:
/// `mean_k |p_k - gt_k|^2` with `k` running over `n_agents * T_f + T_f`
/// points.
pub fn stack_task_loss(
    g: &mut Graph,
    traj: &Trajectories,
    agents_gt: &Tensor,
    ego_gt: &Tensor,
) -> Result<Var> {
    let va = g.shape(traj.v_agents).to_vec();
    if va.len() != 3 || agents_gt.shape() != [va[0] * va[1], 2] {
        return Err(Error::contract(format!(
            "agent count mismatch: predicted {:?}, ground truth {:?}",
            va,
            agents_gt.shape()
        )));
    }
    if g.shape(traj.v_ego) != ego_gt.shape() {
        return Err(Error::shape(
            "stack_task_loss",
            g.shape(traj.v_ego),
            ego_gt.shape(),
        ));
    }
    let flat = g.reshape(traj.v_agents, &[va[0] * va[1], 2])?;
    let pred = g.concat_rows(&[flat, traj.v_ego])?;
    let gt_data: Vec<f64> = agents_gt
        .data()
        .iter()
        .chain(ego_gt.data())
        .copied()
        .collect();
    let gt = g.constant(Tensor::new(g.shape(pred).to_vec(), gt_data)?);
    let diff = g.sub(pred, gt)?;
    let sq = g.square(diff)?;
    let m = g.mean(sq)?;
    // mean over coordinates -> mean over points
    g.scale(m, 2.0)
}
