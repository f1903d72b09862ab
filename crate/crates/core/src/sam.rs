//! Situation aggregation: target and behavior embeddings, the
//! channel-adaptive gate, and the pooled sequence embedding.

use crate::config::{ModelConfig, SamVariant};
use crate::error::Result;
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{BoundParams, ParamSpec};

fn mlp_specs(out: &mut Vec<ParamSpec>, name: &str, d2: usize, out_dim: usize, std: f64) {
    out.push(ParamSpec::normal(format!("sam.{name}.w1"), vec![d2, d2], std));
    out.push(ParamSpec::normal(format!("sam.{name}.b1"), vec![d2], std));
    out.push(ParamSpec::normal(format!("sam.{name}.w2"), vec![out_dim, d2], std));
    out.push(ParamSpec::normal(format!("sam.{name}.b2"), vec![out_dim], std));
}

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (n, d2, std) = (cfg.num_fields, cfg.d_common, cfg.init_std);
    let mut v = vec![ParamSpec::normal("sam.wc", vec![n], std)];
    mlp_specs(&mut v, "target", d2, d2, std);
    if cfg.ablation.sam != SamVariant::AvgPool {
        mlp_specs(&mut v, "weight", d2, 1, std);
    }
    mlp_specs(&mut v, "behavior", d2, d2, std);
    match cfg.ablation.sam {
        SamVariant::ScalarScore => v.push(ParamSpec::normal("sam.score", vec![1, 3 * d2], std)),
        _ => v.push(ParamSpec::normal("sam.gate", vec![d2, 3 * d2], std)),
    }
    v
}

/// `W2 · GELU(W1 x + b1) + b2` over the last axis.
pub fn mlp(tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let h = tape.linear(x, p.var(&format!("sam.{name}.w1"))?)?;
    let h = tape.add(h, p.var(&format!("sam.{name}.b1"))?)?;
    let h = tape.gelu(h);
    let o = tape.linear(h, p.var(&format!("sam.{name}.w2"))?)?;
    tape.add(o, p.var(&format!("sam.{name}.b2"))?)
}

/// `b_c = MLP(v_c + Σ_k w_{c,k} v_{c,k})` with `v_c [B, 1, d2]` and
/// `target [B, n, 1, d2]`; returns `[B, 1, d2]`.
pub fn target_embedding(tape: &mut Tape, p: &BoundParams, v_c: Var, target: Var) -> Result<Var> {
    let n = tape.shape(target)[1];
    let wc = tape.reshape(p.var("sam.wc")?, vec![1, n, 1, 1])?;
    let weighted = tape.mul(target, wc)?;
    let s = tape.sum_axis(weighted, 1)?;
    let x = tape.add(v_c, s)?;
    mlp(tape, p, "target", x)
}

/// Field weights `w'_{i,k}` as `[B, n, L, 1]`, summing to one over `n`.
pub fn field_weights(tape: &mut Tape, p: &BoundParams, hist: Var, target: Var, cfg: &ModelConfig) -> Result<Var> {
    let sh = tape.shape(hist).to_vec();
    let (b, n, l) = (sh[0], sh[1], sh[2]);
    if cfg.ablation.sam == SamVariant::AvgPool {
        return Ok(tape.constant(Tensor::full(&[b, n, l, 1], 1.0 / n as f64)));
    }
    let x = if cfg.ablation.sam == SamVariant::Untargeted {
        hist
    } else {
        let inter = tape.mul(target, hist)?;
        tape.add(hist, inter)?
    };
    let w = mlp(tape, p, "weight", x)?;
    let w = tape.reshape(w, vec![b, n, l])?;
    let w = tape.permute(w, &[0, 2, 1])?;
    let w = tape.softmax(w);
    let w = tape.permute(w, &[0, 2, 1])?;
    tape.reshape(w, vec![b, n, l, 1])
}

/// `b_i = MLP(v_i + Σ_k w'_{i,k} ṽ_{i,k})`, zeroed at padding.
///
/// `hist [B, n, L, d2]`, `target [B, n, 1, d2]`, `items [B, L, d2]`,
/// `mask [B, L, 1]`; returns `[B, L, d2]`.
pub fn behavior_embedding(
    tape: &mut Tape,
    p: &BoundParams,
    hist: Var,
    target: Var,
    items: Var,
    mask: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    let w = field_weights(tape, p, hist, target, cfg)?;
    let weighted = tape.mul(hist, w)?;
    let s = tape.sum_axis(weighted, 1)?;
    let x = tape.add(items, s)?;
    let b = mlp(tape, p, "behavior", x)?;
    tape.mul(b, mask)
}

/// `g_i = sigmoid(W_g (b_i ‖ b_i ⊙ b_c ‖ b_c))`; `[B, L, d2]`, or `[B, L, 1]`
/// for the scalar-score variant.
pub fn channel_gate(tape: &mut Tape, p: &BoundParams, b: Var, b_c: Var, cfg: &ModelConfig) -> Result<Var> {
    let shape = tape.shape(b).to_vec();
    let bc = tape.broadcast_to(b_c, &shape)?;
    let prod = tape.mul(b, bc)?;
    let cat = tape.concat_last(&[b, prod, bc])?;
    let w = match cfg.ablation.sam {
        SamVariant::ScalarScore => p.var("sam.score")?,
        _ => p.var("sam.gate")?,
    };
    let z = tape.linear(cat, w)?;
    Ok(tape.sigmoid(z))
}

/// `e_s = (1/L) Σ_i g_i ⊙ b_i`, or divided by the real history length when
/// `counts` is given. Returns `[B, d2]`.
pub fn pool_sequence(tape: &mut Tape, b: Var, g: Var, counts: Option<&[f64]>) -> Result<Var> {
    let l = tape.shape(b)[1];
    let gb = tape.mul(g, b)?;
    let s = tape.sum_axis(gb, 1)?;
    match counts {
        None => Ok(tape.scale(s, 1.0 / l as f64)),
        Some(c) => {
            let inv = c.iter().map(|&x| 1.0 / x.max(1.0)).collect();
            let inv = tape.constant(Tensor::new(vec![c.len(), 1], inv)?);
            tape.mul(s, inv)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SamOutput {
    /// `[B, 1, d2]`
    pub target: Var,
    /// `[B, L, d2]`
    pub behaviors: Var,
    pub gates: Var,
    /// `[B, d2]`
    pub sequence: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn aggregate(
    tape: &mut Tape,
    p: &BoundParams,
    hist: Var,
    target: Var,
    v_c: Var,
    items: Var,
    mask: Var,
    counts: &[f64],
    cfg: &ModelConfig,
) -> Result<SamOutput> {
    let b_c = target_embedding(tape, p, v_c, target)?;
    let b = behavior_embedding(tape, p, hist, target, items, mask, cfg)?;
    let g = channel_gate(tape, p, b, b_c, cfg)?;
    let e_s = pool_sequence(tape, b, g, cfg.pool_by_count.then_some(counts))?;
    Ok(SamOutput {
        target: b_c,
        behaviors: b,
        gates: g,
        sequence: e_s,
    })
}
