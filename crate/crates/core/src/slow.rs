//! Token mixer and the small autoregressive decoder.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{causal_mask, linear, mlp, rms_norm};
use crate::params::Session;
use crate::stack::StackTokens;
use crate::world::{Vocab, EOS};

/// Inputs to the decoder, all of width `d_l`.
#[derive(Debug, Clone, Copy)]
pub struct DrivingContext {
    /// `[patches, d_l]`
    pub b_ctx: Var,
    /// `[n_agents, d_l]`
    pub q_instance: Var,
    /// `[1, d_l]`
    pub q_ego_ctx: Var,
    /// `[1, d_l]`
    pub v_plan_ctx: Var,
}

/// Meters to decameters before the plan projection.
const PLAN_INPUT_SCALE: f64 = 0.1;

pub fn token_mixer(
    s: &mut Session<'_>,
    cfg: &ModelConfig,
    pooled: Var,
    tokens: &StackTokens,
    v_ego: Var,
) -> Result<DrivingContext> {
    let fused = s.g.concat(&[tokens.q_track, tokens.q_motion])?;
    let q_instance = mlp(s, fused, "mixer.instance")?;
    let b_ctx = linear(s, pooled, "mixer.bev")?;
    let q_ego_ctx = linear(s, tokens.q_ego, "mixer.ego")?;
    let plan = s.g.reshape(v_ego, &[1, cfg.traj_dim()])?;
    let plan = s.g.scale(plan, PLAN_INPUT_SCALE)?;
    let v_plan_ctx = linear(s, plan, "mixer.plan")?;
    Ok(DrivingContext {
        b_ctx,
        q_instance,
        q_ego_ctx,
        v_plan_ctx,
    })
}

/// Context rows in a fixed order, tagged by learnable slot embeddings and
/// normalized.
pub fn context_memory(s: &mut Session<'_>, ctx: &DrivingContext) -> Result<Var> {
    let rows =
        s.g.concat_rows(&[ctx.b_ctx, ctx.q_instance, ctx.q_ego_ctx, ctx.v_plan_ctx])?;
    let slots = s.param("dec.ctx_slot")?;
    if s.g.shape(slots) != s.g.shape(rows) {
        return Err(Error::shape(
            "context_memory",
            s.g.shape(rows),
            s.g.shape(slots),
        ));
    }
    let tagged = s.g.add(rows, slots)?;
    rms_norm(s, tagged)
}

fn decoder_layer(s: &mut Session<'_>, x: Var, memory: Var, mask: Var, l: usize) -> Result<Var> {
    let p = |n: &str| format!("dec.l{l}.{n}");

    let h = rms_norm(s, x)?;
    let q = linear(s, h, &p("sq"))?;
    let k = linear(s, h, &p("sk"))?;
    let v = linear(s, h, &p("sv"))?;
    let a = s.g.attention(q, k, v, Some(mask))?;
    let a = linear(s, a, &p("so"))?;
    let x = s.g.add(x, a)?;

    let h = rms_norm(s, x)?;
    let q = linear(s, h, &p("cq"))?;
    let k = linear(s, memory, &p("ck"))?;
    let v = linear(s, memory, &p("cv"))?;
    let a = s.g.attention(q, k, v, None)?;
    let a = linear(s, a, &p("co"))?;
    let x = s.g.add(x, a)?;

    let h = rms_norm(s, x)?;
    let f = mlp(s, h, &p("ffn"))?;
    s.g.add(x, f)
}

/// Final normalized hidden states for `tokens`, `[len, d_l]`.
pub fn decoder_hidden(
    s: &mut Session<'_>,
    cfg: &ModelConfig,
    memory: Var,
    tokens: &[u32],
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::contract("decoder input is empty"));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::contract(format!(
            "sequence of {} tokens exceeds max_seq {}",
            tokens.len(),
            cfg.max_seq
        )));
    }
    Vocab::get().check(tokens)?;
    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let tok = s.param("dec.tok")?;
    let emb = s.g.gather_rows(tok, &idx)?;
    let pos = s.param("dec.pos")?;
    let pos =
        s.g.gather_rows(pos, &(0..tokens.len()).collect::<Vec<_>>())?;
    let mut x = s.g.add(emb, pos)?;
    let mask = s.constant(causal_mask(tokens.len()));
    for l in 0..cfg.dec_layers {
        x = decoder_layer(s, x, memory, mask, l)?;
    }
    rms_norm(s, x)
}

/// Logits predicting each target token from the prompt and the preceding
/// target tokens, `[target_len, V]`.
pub fn teacher_forced_logits(
    s: &mut Session<'_>,
    cfg: &ModelConfig,
    memory: Var,
    prompt: &[u32],
    target: &[u32],
) -> Result<Var> {
    if prompt.is_empty() || target.is_empty() {
        return Err(Error::contract("prompt and target must be nonempty"));
    }
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(&target[..target.len() - 1]);
    let h = decoder_hidden(s, cfg, memory, &seq)?;
    let rows: Vec<usize> = (prompt.len() - 1..seq.len()).collect();
    let h = s.g.gather_rows(h, &rows)?;
    linear(s, h, "dec.out")
}

/// Mean token cross-entropy of `logits` rows against `target`.
pub fn lm_loss(g: &mut Graph, logits: Var, target: &[u32]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != target.len() {
        return Err(Error::contract(format!(
            "logits {:?} do not match target length {}",
            shape,
            target.len()
        )));
    }
    let v = shape[1];
    let mut onehot = Tensor::zeros(&shape);
    for (r, &t) in target.iter().enumerate() {
        if t as usize >= v {
            return Err(Error::UnknownToken(t));
        }
        onehot.data_mut()[r * v + t as usize] = 1.0;
    }
    let ls = g.log_softmax(logits)?;
    let pick = g.constant(onehot);
    let picked = g.mul(ls, pick)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / target.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    /// `[generated, V]`
    pub logits: Tensor,
    pub tokens: Vec<u32>,
}

fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding until EOS or `max_len` tokens.
pub fn decode(
    s: &mut Session<'_>,
    cfg: &ModelConfig,
    memory: Var,
    prompt: &[u32],
    max_len: usize,
) -> Result<DecoderOutput> {
    if prompt.is_empty() {
        return Err(Error::contract("prompt must be nonempty"));
    }
    if max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    if prompt.len() > cfg.max_seq {
        return Err(Error::contract(format!(
            "prompt of {} tokens exceeds max_seq {}",
            prompt.len(),
            cfg.max_seq
        )));
    }
    let max_len = max_len.min(cfg.max_seq + 1 - prompt.len());
    let mut seq = prompt.to_vec();
    let mut tokens = Vec::new();
    let mut logits = Vec::new();
    while tokens.len() < max_len {
        let h = decoder_hidden(s, cfg, memory, &seq)?;
        let last = s.g.gather_rows(h, &[seq.len() - 1])?;
        let out = linear(s, last, "dec.out")?;
        let row = s.g.value(out).data().to_vec();
        let t = argmax(&row);
        logits.extend(row);
        tokens.push(t);
        if t == EOS {
            break;
        }
        seq.push(t);
    }
    let v = cfg.vocab;
    Ok(DecoderOutput {
        logits: Tensor::new(vec![tokens.len(), v], logits)?,
        tokens,
    })
}
