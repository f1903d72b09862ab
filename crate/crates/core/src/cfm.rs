//! Correlation fusion: stacked mixer blocks over the `[B, n, L, d2]` tensor
//! of refined situational features.
//!
//! A block applies, in order, the behavior mixer (three windowed variants
//! fused by learned scalars), the channel mixer and the feature mixer. All
//! `M` blocks reuse one parameter set.

use std::rc::Rc;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var, GATHER_ZERO};
use crate::params::{BoundParams, ParamSpec};

pub const LN_EPS: f64 = 1e-5;

/// How the history is cut into windows of `L_w` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    /// Contiguous windows from the start.
    Adjacent,
    /// Every `L / L_w`-th row, one window per starting offset.
    Dilated,
    /// Contiguous windows starting at `⌊L_w / 2⌋`; rows outside every
    /// window form the remainder.
    Shifted,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Adjacent, Partition::Dilated, Partition::Shifted];

    fn key(self) -> &'static str {
        match self {
            Partition::Adjacent => "adj",
            Partition::Dilated => "dil",
            Partition::Shifted => "shi",
        }
    }
}

/// Row indices of every window, plus the rows no window covers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentMap {
    pub segments: Vec<Vec<usize>>,
    pub remain: Vec<usize>,
    pub len: usize,
}

impl SegmentMap {
    pub fn new(kind: Partition, len: usize, window: usize) -> Result<SegmentMap> {
        if window == 0 || !len.is_multiple_of(window) {
            return Err(Error::Config(format!("window {window} must divide length {len}")));
        }
        let count = len / window;
        let (segments, remain) = match kind {
            Partition::Adjacent => ((0..count).map(|s| (s * window..(s + 1) * window).collect()).collect(), vec![]),
            Partition::Dilated => (
                (0..count).map(|s| (0..window).map(|t| s + t * count).collect()).collect(),
                vec![],
            ),
            Partition::Shifted => {
                if count < 2 {
                    return Err(Error::Config(format!(
                        "shifted windows need length / window >= 2, got {len} / {window}"
                    )));
                }
                let off = window / 2;
                let segs: Vec<Vec<usize>> = (0..count - 1)
                    .map(|s| (off + s * window..off + (s + 1) * window).collect())
                    .collect();
                let tail = off + (count - 1) * window;
                (segs, (0..off).chain(tail..len).collect())
            }
        };
        Ok(SegmentMap { segments, remain, len })
    }

    pub fn window(&self) -> usize {
        self.segments[0].len()
    }

    /// Segment and slot of every row, `None` for remainder rows.
    pub fn owner(&self) -> Vec<Option<(usize, usize)>> {
        let mut own = vec![None; self.len];
        for (s, seg) in self.segments.iter().enumerate() {
            for (t, &r) in seg.iter().enumerate() {
                own[r] = Some((s, t));
            }
        }
        own
    }

    /// Output row order when the remainder is emitted first.
    pub fn literal_order(&self) -> Vec<usize> {
        self.remain
            .iter()
            .copied()
            .chain(self.segments.iter().flatten().copied())
            .collect()
    }

    /// Index for gathering `[G, L, d2]` into `[G, S, d2, L_w]` windows.
    fn gather_index(&self, groups: usize, d2: usize) -> Rc<[usize]> {
        let (s_count, w) = (self.segments.len(), self.window());
        let mut idx = Vec::with_capacity(groups * s_count * d2 * w);
        for g in 0..groups {
            for seg in &self.segments {
                for a in 0..d2 {
                    for &r in seg {
                        idx.push((g * self.len + r) * d2 + a);
                    }
                }
            }
        }
        idx.into()
    }

    /// Inverse of [`gather_index`](Self::gather_index); remainder rows read zero.
    fn scatter_index(&self, groups: usize, d2: usize) -> Rc<[usize]> {
        let (s_count, w) = (self.segments.len(), self.window());
        let own = self.owner();
        let mut idx = Vec::with_capacity(groups * self.len * d2);
        for g in 0..groups {
            for o in &own {
                for a in 0..d2 {
                    idx.push(match *o {
                        Some((s, t)) => ((g * s_count + s) * d2 + a) * w + t,
                        None => GATHER_ZERO,
                    });
                }
            }
        }
        idx.into()
    }
}

fn pname(mixer: &str, plane: Option<usize>, leaf: &str) -> String {
    match plane {
        None => format!("cfm.{mixer}.{leaf}"),
        Some(k) => format!("cfm.{mixer}.{k}.{leaf}"),
    }
}

fn mixer_specs(out: &mut Vec<ParamSpec>, mixer: &str, plane: Option<usize>, io: usize, hidden: usize, norm: usize, std: f64) {
    out.push(ParamSpec::normal(pname(mixer, plane, "w1"), vec![hidden, io], std));
    out.push(ParamSpec::normal(pname(mixer, plane, "w2"), vec![io, hidden], std));
    out.push(ParamSpec::constant(pname(mixer, plane, "ln_gain"), vec![norm], 1.0));
    out.push(ParamSpec::constant(pname(mixer, plane, "ln_bias"), vec![norm], 0.0));
}

fn branch_enabled(cfg: &ModelConfig, kind: Partition) -> bool {
    let f = &cfg.ablation.cfm;
    match kind {
        Partition::Adjacent => f.adjacent,
        Partition::Dilated => f.dilated,
        Partition::Shifted => f.shifted,
    }
}

fn planes(cfg: &ModelConfig) -> Vec<Option<usize>> {
    if cfg.share_planes {
        vec![None]
    } else {
        (0..cfg.num_fields).map(Some).collect()
    }
}

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d2, std) = (cfg.d_common, cfg.init_std);
    let sw = &cfg.ablation.cfm;
    let mut v = Vec::new();
    for plane in planes(cfg) {
        if sw.behavior {
            for kind in Partition::ALL {
                if branch_enabled(cfg, kind) {
                    mixer_specs(&mut v, kind.key(), plane, cfg.window, cfg.hidden_behavior, d2, std);
                }
            }
            v.push(ParamSpec::constant(pname("fuse", plane, "w"), vec![3], 1.0 / 3.0));
        }
        if sw.channel {
            mixer_specs(&mut v, "cha", plane, d2, cfg.hidden_channel, d2, std);
        }
    }
    if sw.feature {
        let n = cfg.num_fields;
        mixer_specs(&mut v, "fea", None, n, cfg.hidden_feature, n, std);
    }
    v
}

/// `LayerNorm → W1 → GELU → W2` over the last axis of an already laid out
/// tensor, without the residual.
fn mlp_block(tape: &mut Tape, p: &BoundParams, x: Var, mixer: &str, plane: Option<usize>, cfg: &ModelConfig) -> Result<Var> {
    let h = tape.linear(x, p.var(&pname(mixer, plane, "w1"))?)?;
    let h = if cfg.ablation.cfm.gelu { tape.gelu(h) } else { h };
    tape.linear(h, p.var(&pname(mixer, plane, "w2"))?)
}

fn norm(tape: &mut Tape, p: &BoundParams, x: Var, mixer: &str, plane: Option<usize>) -> Result<Var> {
    let g = p.var(&pname(mixer, plane, "ln_gain"))?;
    let b = p.var(&pname(mixer, plane, "ln_bias"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

/// One windowed behavior mixer on `v [..., L, d2]`: residual plus the shared
/// MLP applied per window and per channel, results written back to their
/// original rows.
pub fn window_mix(
    tape: &mut Tape,
    p: &BoundParams,
    v: Var,
    kind: Partition,
    plane: Option<usize>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let r = shape.len();
    let (l, d2) = (shape[r - 2], shape[r - 1]);
    let groups = tape.value(v).len() / (l * d2);
    let map = SegmentMap::new(kind, l, cfg.window)?;
    let key = kind.key();
    let x = norm(tape, p, v, key, plane)?;
    let seg_shape = vec![groups, map.segments.len(), d2, map.window()];
    let segs = tape.gather(x, map.gather_index(groups, d2), seg_shape)?;
    let y = mlp_block(tape, p, segs, key, plane, cfg)?;
    let back = tape.gather(y, map.scatter_index(groups, d2), shape.clone())?;
    let out = tape.add(v, back)?;
    if kind == Partition::Shifted && cfg.shifted_literal_order {
        let order = map.literal_order();
        let mut idx = Vec::with_capacity(groups * l * d2);
        for g in 0..groups {
            for &row in &order {
                idx.extend((0..d2).map(|a| (g * l + row) * d2 + a));
            }
        }
        return tape.gather(out, idx.into(), shape);
    }
    Ok(out)
}

pub fn adjacent_mix(tape: &mut Tape, p: &BoundParams, v: Var, plane: Option<usize>, cfg: &ModelConfig) -> Result<Var> {
    window_mix(tape, p, v, Partition::Adjacent, plane, cfg)
}

pub fn dilated_mix(tape: &mut Tape, p: &BoundParams, v: Var, plane: Option<usize>, cfg: &ModelConfig) -> Result<Var> {
    window_mix(tape, p, v, Partition::Dilated, plane, cfg)
}

pub fn shifted_mix(tape: &mut Tape, p: &BoundParams, v: Var, plane: Option<usize>, cfg: &ModelConfig) -> Result<Var> {
    window_mix(tape, p, v, Partition::Shifted, plane, cfg)
}

/// `w1·adjacent + w2·dilated + w3·shifted`; disabled branches contribute
/// nothing, so disabling all three yields zeros.
pub fn behavior_mix(tape: &mut Tape, p: &BoundParams, v: Var, plane: Option<usize>, cfg: &ModelConfig) -> Result<Var> {
    let fuse = p.var(&pname("fuse", plane, "w"))?;
    let mut acc: Option<Var> = None;
    for (i, kind) in Partition::ALL.into_iter().enumerate() {
        if !branch_enabled(cfg, kind) {
            continue;
        }
        let out = window_mix(tape, p, v, kind, plane, cfg)?;
        let w = tape.slice(fuse, 0, i, 1)?;
        let term = tape.mul(out, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => Ok(tape.scale(v, 0.0)),
    }
}

/// Residual MLP over the channel axis of `v [..., d2]`.
pub fn channel_mix(tape: &mut Tape, p: &BoundParams, v: Var, plane: Option<usize>, cfg: &ModelConfig) -> Result<Var> {
    let x = norm(tape, p, v, "cha", plane)?;
    let y = mlp_block(tape, p, x, "cha", plane, cfg)?;
    tape.add(v, y)
}

/// Residual MLP over the field axis of `v [B, n, L, d2]`.
pub fn feature_mix(tape: &mut Tape, p: &BoundParams, v: Var, cfg: &ModelConfig) -> Result<Var> {
    let t = tape.permute(v, &[0, 2, 3, 1])?;
    let x = norm(tape, p, t, "fea", None)?;
    let y = mlp_block(tape, p, x, "fea", None, cfg)?;
    let out = tape.add(t, y)?;
    tape.permute(out, &[0, 3, 1, 2])
}

/// Behavior then channel mixing on one set of planes.
fn plane_mix(tape: &mut Tape, p: &BoundParams, v: Var, plane: Option<usize>, cfg: &ModelConfig) -> Result<Var> {
    let mut h = v;
    if cfg.ablation.cfm.behavior {
        h = behavior_mix(tape, p, h, plane, cfg)?;
    }
    if cfg.ablation.cfm.channel {
        h = channel_mix(tape, p, h, plane, cfg)?;
    }
    Ok(h)
}

pub fn cfm_block(tape: &mut Tape, p: &BoundParams, v: Var, cfg: &ModelConfig) -> Result<Var> {
    let mut h = if cfg.share_planes {
        plane_mix(tape, p, v, None, cfg)?
    } else {
        let mut parts = Vec::with_capacity(cfg.num_fields);
        for k in 0..cfg.num_fields {
            let s = tape.slice(v, 1, k, 1)?;
            parts.push(plane_mix(tape, p, s, Some(k), cfg)?);
        }
        tape.concat(&parts, 1)?
    };
    if cfg.ablation.cfm.feature {
        h = feature_mix(tape, p, h, cfg)?;
    }
    Ok(h)
}

/// `M` applications of the shared block.
pub fn cfm_forward(tape: &mut Tape, p: &BoundParams, v: Var, cfg: &ModelConfig) -> Result<Var> {
    let mut h = v;
    for _ in 0..cfg.mixer_depth {
        h = cfm_block(tape, p, h, cfg)?;
    }
    Ok(h)
}
