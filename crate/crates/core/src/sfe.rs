//! Situational feature encoding.
//!
//! Each behavior's specific situational vector is blended with its field's
//! general vector, then reinterpreted as the weights of a tiny per-behavior
//! network that transforms the denoised item embedding.

use crate::config::{ModelConfig, SfeVariant};
use crate::embedding::Embedded;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::params::{BoundParams, ParamSpec};

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d1, d2, std) = (cfg.d_situ(), cfg.d_common, cfg.init_std);
    let h = cfg.gate_hidden();
    let mut v = Vec::new();
    if cfg.ablation.sfe != SfeVariant::SpecificOnly {
        v.extend([
            ParamSpec::normal("sfe.gate.w1", vec![h, d2 + d1], std),
            ParamSpec::normal("sfe.gate.b1", vec![h], std),
            ParamSpec::normal("sfe.gate.w2", vec![1, h], std),
            ParamSpec::normal("sfe.gate.b2", vec![1], std),
        ]);
    }
    if matches!(cfg.ablation.sfe, SfeVariant::AvgConcat | SfeVariant::Concat) {
        v.push(ParamSpec::normal("sfe.proj", vec![d2, d2 + d1], std));
    }
    v
}

/// Scalar gate `sigmoid(MLP(left ⊙ right))` over the last axis.
pub fn gate(tape: &mut Tape, p: &BoundParams, left: Var, right: Var) -> Result<Var> {
    let x = tape.mul(left, right)?;
    let h = tape.linear(x, p.var("sfe.gate.w1")?)?;
    let h = tape.add(h, p.var("sfe.gate.b1")?)?;
    let h = tape.gelu(h);
    let o = tape.linear(h, p.var("sfe.gate.w2")?)?;
    let o = tape.add(o, p.var("sfe.gate.b2")?)?;
    Ok(tape.sigmoid(o))
}

/// `gate · specific + (1 − gate) · general`, written as
/// `general + gate · (specific − general)`.
pub fn blend(tape: &mut Tape, gate: Var, specific: Var, general: Var) -> Result<Var> {
    let diff = tape.sub(specific, general)?;
    let scaled = tape.mul(gate, diff)?;
    tape.add(general, scaled)
}

/// Gated fusion of the specific vector `spec` with the field's general
/// vector. `target` is `v_c ‖ f_c^k` and `own` is `v̂_i ‖ f_i^k`.
pub fn fuse_general_specific(
    tape: &mut Tape,
    p: &BoundParams,
    spec: Var,
    general: Var,
    target: Var,
    own: Var,
) -> Result<Var> {
    let g = gate(tape, p, target, own)?;
    blend(tape, g, spec, general)
}

/// Weights and biases of one carved network, each batched over the leading
/// axes of the fused tensor. Weights are row-major `d2 × d2`.
#[derive(Clone, Debug)]
pub struct MicroMlp {
    pub layers: Vec<(Var, Var)>,
    pub width: usize,
}

fn check_carving(d1: usize, d2: usize, depth: usize) -> Result<()> {
    if d1 != depth * (d2 * d2 + d2) {
        return Err(Error::InvalidShape {
            op: "carve_micro_mlp",
            detail: format!(
                "fused width {d1} must equal d1 = D·(d2²+d2) = {depth}·({}+{d2}) = {}",
                d2 * d2,
                depth * (d2 * d2 + d2)
            ),
        });
    }
    Ok(())
}

/// Splits the last axis into `w0 ‖ b0 ‖ w1 ‖ b1 ‖ …`.
pub fn carve_micro_mlp(tape: &mut Tape, fused: Var, cfg: &ModelConfig) -> Result<MicroMlp> {
    let d2 = cfg.d_common;
    let d1 = *tape.shape(fused).last().unwrap();
    check_carving(d1, d2, cfg.micro_depth)?;
    let mut layers = Vec::with_capacity(cfg.micro_depth);
    for j in 0..cfg.micro_depth {
        let base = j * (d2 * d2 + d2);
        let w = tape.slice_last(fused, base, d2 * d2)?;
        let b = tape.slice_last(fused, base + d2 * d2, d2)?;
        layers.push((w, b));
    }
    Ok(MicroMlp { layers, width: d2 })
}

/// Plain-slice carving used outside the graph: `(weight, bias)` per layer.
pub fn carve_values(fused: &[f64], d2: usize, depth: usize) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    check_carving(fused.len(), d2, depth)?;
    Ok(fused
        .chunks(d2 * d2 + d2)
        .map(|c| (c[..d2 * d2].to_vec(), c[d2 * d2..].to_vec()))
        .collect())
}

pub fn flatten_values(layers: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|(w, b)| w.iter().chain(b).copied())
        .collect()
}

/// Runs `x` through the carved network: tanh between layers, none after
/// the last. `x` must share the network's leading axes.
pub fn refine(tape: &mut Tape, x: Var, mlp: &MicroMlp) -> Result<Var> {
    let mut h = x;
    let last = mlp.layers.len() - 1;
    for (j, &(w, b)) in mlp.layers.iter().enumerate() {
        h = tape.batched_matvec(w, h, mlp.width)?;
        h = tape.add(h, b)?;
        if j < last {
            h = tape.tanh(h);
        }
    }
    Ok(h)
}

/// Produces the refined situational features of the history
/// `[B, n, L, d2]` and of the candidate `[B, n, 1, d2]`.
pub fn encode_all(
    tape: &mut Tape,
    p: &BoundParams,
    e: &Embedded,
    items: Var,
    cfg: &ModelConfig,
) -> Result<(Var, Var)> {
    let sh = tape.shape(items).to_vec();
    let (b, l) = (sh[0], sh[1]);
    let hist_items = tape.reshape(items, vec![b, 1, l, cfg.d_common])?;
    let cand_items = tape.reshape(e.cand, vec![b, 1, 1, cfg.d_common])?;
    let target = concat_item(tape, cand_items, e.cand_situ)?;
    let own = concat_item(tape, hist_items, e.situ)?;
    let hist = encode_path(tape, p, e.situ, e.general, target, own, hist_items, cfg)?;
    let cand = encode_path(tape, p, e.cand_situ, e.general, target, target, cand_items, cfg)?;
    Ok((hist, cand))
}

/// `item ‖ situ` with `item [B, 1, L, d2]` broadcast over the field axis.
fn concat_item(tape: &mut Tape, item: Var, situ: Var) -> Result<Var> {
    let s = tape.shape(situ).to_vec();
    let mut target = s.clone();
    *target.last_mut().unwrap() = *tape.shape(item).last().unwrap();
    let item = tape.broadcast_to(item, &target)?;
    tape.concat_last(&[item, situ])
}

#[allow(clippy::too_many_arguments)]
fn encode_path(
    tape: &mut Tape,
    p: &BoundParams,
    spec: Var,
    general: Var,
    target: Var,
    own: Var,
    items: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    let shape = tape.shape(spec).to_vec();
    let n = shape[1];
    let mut plane = shape.clone();
    *plane.last_mut().unwrap() = cfg.d_common;
    let fused = match cfg.ablation.sfe {
        SfeVariant::SpecificOnly => spec,
        _ => fuse_general_specific(tape, p, spec, general, target, own)?,
    };
    let mean_fused = |tape: &mut Tape| -> Result<Var> {
        let s = tape.sum_axis(fused, 1)?;
        let s = tape.scale(s, 1.0 / n as f64);
        let mut one = shape.clone();
        one[1] = 1;
        tape.reshape(s, one)
    };
    match cfg.ablation.sfe {
        SfeVariant::Full | SfeVariant::SpecificOnly => {
            let mlp = carve_micro_mlp(tape, fused, cfg)?;
            let x = tape.broadcast_to(items, &plane)?;
            refine(tape, x, &mlp)
        }
        SfeVariant::AvgMicro => {
            let fbar = mean_fused(tape)?;
            let mlp = carve_micro_mlp(tape, fbar, cfg)?;
            let one = refine(tape, items, &mlp)?;
            tape.broadcast_to(one, &plane)
        }
        SfeVariant::AvgConcat => {
            let fbar = mean_fused(tape)?;
            let cat = tape.concat_last(&[items, fbar])?;
            let one = tape.linear(cat, p.var("sfe.proj")?)?;
            tape.broadcast_to(one, &plane)
        }
        SfeVariant::Concat => {
            let cat = concat_item(tape, items, fused)?;
            tape.linear(cat, p.var("sfe.proj")?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::params::ModelParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(d2: usize, depth: usize) -> ModelConfig {
        ModelConfig {
            d_common: d2,
            micro_depth: depth,
            ..ModelConfig::default()
        }
    }

    fn gate_params(c: &ModelConfig, w2: f64, b2: f64) -> ModelParams {
        let (d1, d2, h) = (c.d_situ(), c.d_common, c.gate_hidden());
        let mut p = ModelParams::new();
        p.insert("sfe.gate.w1", Tensor::zeros(&[h, d2 + d1]), false);
        p.insert("sfe.gate.b1", Tensor::zeros(&[h]), false);
        p.insert("sfe.gate.w2", Tensor::full(&[1, h], w2), false);
        p.insert("sfe.gate.b2", Tensor::full(&[1], b2), false);
        p
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn fuse_once(b2: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let c = cfg(2, 1);
        let (d1, d2) = (c.d_situ(), c.d_common);
        let params = gate_params(&c, 0.0, b2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let p = params.bind(&mut t);
        let spec_v = rand_vec(&mut rng, d1);
        let gen_v = rand_vec(&mut rng, d1);
        let spec = t.constant(Tensor::vector(spec_v.clone()));
        let general = t.constant(Tensor::vector(gen_v.clone()));
        let target = t.constant(Tensor::vector(rand_vec(&mut rng, d1 + d2)));
        let own = t.constant(Tensor::vector(rand_vec(&mut rng, d1 + d2)));
        let out = fuse_general_specific(&mut t, &p, spec, general, target, own).unwrap();
        (t.value(out).data().to_vec(), spec_v, gen_v)
    }

    #[test]
    fn saturated_gates_select_one_side() {
        let (out, spec, _) = fuse_once(800.0);
        assert_eq!(out, spec);
        let (out, _, general) = fuse_once(-800.0);
        assert_eq!(out, general);
    }

    #[test]
    fn zero_gate_mlp_averages() {
        let (out, spec, general) = fuse_once(0.0);
        for i in 0..out.len() {
            assert!((out[i] - 0.5 * (spec[i] + general[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn carving_uses_exactly_d1_values() {
        let c = cfg(8, 2);
        assert_eq!(c.d_situ(), 144);
        let fused: Vec<f64> = (0..144).map(f64::from).collect();
        let layers = carve_values(&fused, 8, 2).unwrap();
        assert_eq!(layers.len(), 2);
        assert_eq!(layers[0].0.len(), 64);
        assert_eq!(layers[0].1, (64..72).map(f64::from).collect::<Vec<_>>());
        assert_eq!(flatten_values(&layers), fused);
        let zeros = carve_values(&[0.0; 144], 8, 2).unwrap();
        assert!(flatten_values(&zeros).iter().all(|&x| x == 0.0));
        let err = carve_values(&fused[..143], 8, 2).unwrap_err().to_string();
        assert!(err.contains("D·(d2²+d2)"), "{err}");
    }

    #[test]
    fn tape_carving_matches_plain_carving() {
        let c = cfg(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = rand_vec(&mut rng, c.d_situ());
        let mut t = Tape::new();
        let f = t.constant(Tensor::vector(v.clone()));
        let mlp = carve_micro_mlp(&mut t, f, &c).unwrap();
        let plain = carve_values(&v, 3, 2).unwrap();
        for (j, &(w, b)) in mlp.layers.iter().enumerate() {
            assert_eq!(t.value(w).data(), &plain[j].0[..]);
            assert_eq!(t.value(b).data(), &plain[j].1[..]);
        }
    }

    #[test]
    fn identity_layers_give_tanh() {
        let c = cfg(3, 2);
        let eye: Vec<f64> = Tensor::eye(3).into_data();
        let fused = flatten_values(&[(eye.clone(), vec![0.0; 3]), (eye, vec![0.0; 3])]);
        let mut t = Tape::new();
        let f = t.constant(Tensor::vector(fused));
        let mlp = carve_micro_mlp(&mut t, f, &c).unwrap();
        let x = t.constant(Tensor::vector(vec![0.1, -0.4, 2.0]));
        let y = refine(&mut t, x, &mlp).unwrap();
        let want: Vec<f64> = [0.1f64, -0.4, 2.0].iter().map(|v| v.tanh()).collect();
        assert_eq!(t.value(y).data(), &want[..]);

        let mut t = Tape::new();
        let f = t.constant(Tensor::zeros(&[c.d_situ()]));
        let mlp = carve_micro_mlp(&mut t, f, &c).unwrap();
        let x = t.constant(Tensor::vector(vec![0.1, -0.4, 2.0]));
        let y = refine(&mut t, x, &mlp).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn refine_gradients_reach_input_and_fused_vector() {
        let c = cfg(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ModelParams::new();
        params.insert("f", Tensor::vector(rand_vec(&mut rng, c.d_situ())), false);
        params.insert("x", Tensor::vector(rand_vec(&mut rng, 2)), false);
        let r = crate::numerics::grad_check(
            &params,
            |t, p| {
                let mlp = carve_micro_mlp(t, p.var("f")?, &c)?;
                let y = refine(t, p.var("x")?, &mlp)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            1e-5,
            crate::numerics::Coordinates::All,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-7, "{r:?}");
    }
}
