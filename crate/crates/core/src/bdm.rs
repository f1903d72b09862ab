//! Behavior denoising: a relevance score per history position and a
//! differentiable keep factor drawn with the Gumbel-Softmax trick.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{BdmVariant, ModelConfig};
use crate::embedding::{Batch, Embedded};
use crate::error::{Error, Result};
use crate::model::Mode;
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{BoundParams, ParamSpec};

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    if cfg.ablation.bdm != BdmVariant::Full {
        return Vec::new();
    }
    let (n, d1, d2, std) = (cfg.num_fields, cfg.d_situ(), cfg.d_common, cfg.init_std);
    vec![
        ParamSpec::normal("bdm.w1", vec![d2, n * d1], std),
        ParamSpec::normal("bdm.w2", vec![1, d2], std),
    ]
}

/// One standard Gumbel draw, `-ln(-ln γ)` with `γ ~ U(0, 1)`.
pub fn sample_gumbel<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.sample(rand::distributions::Open01);
    -(-u.ln()).ln()
}

/// `g0 - g1` for `len` positions from one seeded stream.
pub fn gumbel_noise(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| {
            let g0 = sample_gumbel(&mut rng);
            let g1 = sample_gumbel(&mut rng);
            g0 - g1
        })
        .collect()
}

/// `p = sigmoid(W2 (v_i + W1 (‖_k f_c^k ⊙ ‖_k f_i^k) + v_c))`, zeroed at padding.
///
/// Returns `[B, L, 1]`.
pub fn keep_probability(tape: &mut Tape, p: &BoundParams, e: &Embedded, mask: Var, cfg: &ModelConfig) -> Result<Var> {
    let sh = tape.shape(e.item).to_vec();
    let (b, l) = (sh[0], sh[1]);
    let nd1 = cfg.num_fields * cfg.d_situ();
    let inter = tape.mul(e.situ, e.cand_situ)?;
    let inter = tape.permute(inter, &[0, 2, 1, 3])?;
    let inter = tape.reshape(inter, vec![b, l, nd1])?;
    let proj = tape.linear(inter, p.var("bdm.w1")?)?;
    let s = tape.add(e.item, proj)?;
    let s = tape.add(s, e.cand)?;
    let logit = tape.linear(s, p.var("bdm.w2")?)?;
    let prob = tape.sigmoid(logit);
    tape.mul(prob, mask)
}

/// Keep factor `d̂` per position. Training draws fresh noise from `seed`;
/// evaluation returns `p` itself.
pub fn gumbel_soft_select(tape: &mut Tape, prob: Var, mask: &[f64], tau: f64, mode: Mode) -> Result<Var> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    match mode {
        Mode::Eval => Ok(prob),
        Mode::Train { seed } => {
            let noise = gumbel_noise(seed, tape.value(prob).len());
            tape.gumbel_select(prob, &noise, mask, tau)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DenoiseOutput {
    /// `[B, L, 1]`; absent when the module is switched off.
    pub keep_prob: Option<Var>,
    /// `[B, L, 1]`; absent when the module is switched off (keep factor 1).
    pub select: Option<Var>,
    /// `[B, L, d2]`
    pub items: Var,
}

pub fn denoise(
    tape: &mut Tape,
    p: &BoundParams,
    e: &Embedded,
    batch: &Batch,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<DenoiseOutput> {
    if cfg.ablation.bdm != BdmVariant::Full {
        return Ok(DenoiseOutput {
            keep_prob: None,
            select: None,
            items: e.item,
        });
    }
    let mask = tape.constant(batch.mask_tensor());
    let prob = keep_probability(tape, p, e, mask, cfg)?;
    let select = gumbel_soft_select(tape, prob, &batch.mask, cfg.tau, mode)?;
    let items = tape.mul(e.item, select)?;
    Ok(DenoiseOutput {
        keep_prob: Some(prob),
        select: Some(select),
        items,
    })
}

/// Keep factors for a plain probability vector, outside any model graph.
pub fn soft_select_values(prob: &[f64], noise: &[f64], tau: f64) -> Vec<f64> {
    let mut t = Tape::new();
    let p = t.constant(Tensor::vector(prob.to_vec()));
    let ones = vec![1.0; prob.len()];
    let d = t.gumbel_select(p, noise, &ones, tau).expect("matching lengths");
    t.value(d).data().to_vec()
}
