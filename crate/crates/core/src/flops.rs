//! Closed-form multiply-add counts of one forward pass.
//!
//! Only matrix products are counted (the tape counts the same ops), so the
//! estimate for a batch of `B` equals `B` times the per-example figure.

use serde::Serialize;

use crate::config::{BdmVariant, ModelConfig, SamVariant, SfeVariant};

/// Cost of one module as `per_position · L + fixed`.
///
/// `fixed` is negative only for the shifted mixer, which covers `L/L_w − 1`
/// windows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ModuleMacs {
    pub per_position: i64,
    pub fixed: i64,
}

impl ModuleMacs {
    /// The part that scales with the history length, `per_position · L`.
    pub fn history(&self, seq_len: usize) -> i64 {
        self.per_position * seq_len as i64
    }

    pub fn total(&self, seq_len: usize) -> u64 {
        (self.history(seq_len) + self.fixed) as u64
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopEstimate {
    pub seq_len: usize,
    pub bdm: ModuleMacs,
    pub sfe: ModuleMacs,
    pub cfm: ModuleMacs,
    pub sam: ModuleMacs,
    pub head: ModuleMacs,
}

impl FlopEstimate {
    pub fn modules(&self) -> [(&'static str, ModuleMacs); 5] {
        [
            ("bdm", self.bdm),
            ("sfe", self.sfe),
            ("cfm", self.cfm),
            ("sam", self.sam),
            ("head", self.head),
        ]
    }

    pub fn total(&self) -> u64 {
        self.modules().iter().map(|(_, m)| m.total(self.seq_len)).sum()
    }

    /// Sum of the length-proportional parts.
    pub fn history(&self) -> u64 {
        self.modules().iter().map(|(_, m)| m.history(self.seq_len)).sum::<i64>() as u64
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<6} {:>14} {:>10} {:>14}\n", "module", "per position", "fixed", "total");
        for (name, m) in self.modules() {
            s += &format!("{name:<6} {:>14} {:>10} {:>14}\n", m.per_position, m.fixed, m.total(self.seq_len));
        }
        s += &format!("{:<6} {:>14} {:>10} {:>14}\n", "all", "", "", self.total());
        s
    }
}

/// Per-example multiply-adds by module.
pub fn flop_estimate(cfg: &ModelConfig) -> FlopEstimate {
    let (n, d1, d2) = (cfg.num_fields as i64, cfg.d_situ() as i64, cfg.d_common as i64);
    let depth = cfg.micro_depth as i64;
    let a = &cfg.ablation;

    let bdm = match a.bdm {
        BdmVariant::Full => ModuleMacs {
            per_position: n * d1 * d2 + d2,
            fixed: 0,
        },
        _ => ModuleMacs::default(),
    };

    let h = cfg.gate_hidden() as i64;
    let gate = if a.sfe == SfeVariant::SpecificOnly { 0 } else { n * ((d2 + d1) * h + h) };
    let encode = match a.sfe {
        SfeVariant::Full | SfeVariant::SpecificOnly => n * depth * d2 * d2,
        SfeVariant::AvgMicro => depth * d2 * d2,
        SfeVariant::AvgConcat => (d2 + d1) * d2,
        SfeVariant::Concat => n * (d2 + d1) * d2,
    };
    // the candidate runs the same path with a history of one
    let sfe = ModuleMacs {
        per_position: gate + encode,
        fixed: gate + encode,
    };

    let (lw, m) = (cfg.window as i64, cfg.mixer_depth as i64);
    let window_cost = n * d2 * 2 * lw * cfg.hidden_behavior as i64;
    let mut cfm = ModuleMacs::default();
    if a.cfm.behavior {
        for on in [a.cfm.adjacent, a.cfm.dilated, a.cfm.shifted] {
            if on {
                // L/L_w windows per row of channels
                cfm.per_position += window_cost / lw;
            }
        }
        if a.cfm.shifted {
            cfm.fixed -= window_cost;
        }
    }
    if a.cfm.channel {
        cfm.per_position += n * 2 * d2 * cfg.hidden_channel as i64;
    }
    if a.cfm.feature {
        cfm.per_position += d2 * 2 * n * cfg.hidden_feature as i64;
    }
    cfm.per_position *= m;
    cfm.fixed *= m;

    let weight = if a.sam == SamVariant::AvgPool { 0 } else { n * (d2 * d2 + d2) };
    let gate_out = if a.sam == SamVariant::ScalarScore { 1 } else { d2 };
    let sam = ModuleMacs {
        per_position: weight + 2 * d2 * d2 + 3 * d2 * gate_out,
        fixed: 2 * d2 * d2,
    };

    let mut widths = vec![4 * cfg.d_common];
    widths.extend(&cfg.head_hidden);
    widths.push(1);
    let head = ModuleMacs {
        per_position: 0,
        fixed: widths.windows(2).map(|w| (w[0] * w[1]) as i64).sum(),
    };

    FlopEstimate {
        seq_len: cfg.seq_len,
        bdm,
        sfe,
        cfm,
        sam,
        head,
    }
}

/// `cfm(2L) − 2·cfm(L)`: the windows the shifted mixer leaves out, one per
/// block.
pub fn shifted_boundary(cfg: &ModelConfig) -> u64 {
    let a = &cfg.ablation.cfm;
    if !(a.behavior && a.shifted) {
        return 0;
    }
    (cfg.mixer_depth * cfg.num_fields * cfg.d_common * 2 * cfg.window * cfg.hidden_behavior) as u64
}
