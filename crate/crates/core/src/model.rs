//! Full forward pass and parameter accounting.

use crate::config::{BdmVariant, ModelConfig, SamVariant, SfeVariant};
use crate::embedding::{self, Batch};
use crate::error::Result;
use crate::numerics::{Tape, Var};
use crate::params::{BoundParams, ModelParams, ParamSpec};
use crate::{bdm, cfm, predictor, sam, sfe};

/// Training draws Gumbel noise from `seed`; evaluation uses the keep
/// probability directly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut v = embedding::param_specs(cfg);
    v.extend(bdm::param_specs(cfg));
    v.extend(sfe::param_specs(cfg));
    v.extend(cfm::param_specs(cfg));
    v.extend(sam::param_specs(cfg));
    v.extend(predictor::param_specs(cfg));
    v
}

/// Validates `cfg` and samples every array from `cfg.seed`.
pub fn init_params(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    ModelParams::from_specs(&param_specs(cfg), cfg.seed)
}

/// Intermediate handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub keep_prob: Option<Var>,
    pub select: Option<Var>,
    /// `[B, n, L, d2]` before mixing.
    pub encoded: Var,
    /// `[B, n, 1, d2]`
    pub target_feats: Var,
    pub mixed: Var,
    pub sam: sam::SamOutput,
    /// `[B, 1]`
    pub yhat: Var,
}

pub fn forward(tape: &mut Tape, p: &BoundParams, batch: &Batch, cfg: &ModelConfig, mode: Mode) -> Result<Forward> {
    let e = embedding::embed(tape, p, batch, cfg)?;
    let den = bdm::denoise(tape, p, &e, batch, cfg, mode)?;
    let (encoded, target_feats) = sfe::encode_all(tape, p, &e, den.items, cfg)?;
    let mixed = cfm::cfm_forward(tape, p, encoded, cfg)?;
    let mask = tape.constant(batch.mask_tensor());
    let counts: Vec<f64> = batch.mask.chunks(batch.seq_len).map(|c| c.iter().sum()).collect();
    let s = sam::aggregate(tape, p, mixed, target_feats, e.cand, e.item, mask, &counts, cfg)?;
    let d2 = cfg.d_common;
    let b_c = tape.reshape(s.target, vec![batch.size, d2])?;
    let yhat = predictor::predict(tape, p, e.user, s.sequence, b_c, e.context, cfg)?;
    Ok(Forward {
        keep_prob: den.keep_prob,
        select: den.select,
        encoded,
        target_feats,
        mixed,
        sam: s,
        yhat,
    })
}

/// Mean loss of a batch; returns `(loss, yhat)`.
pub fn loss(tape: &mut Tape, p: &BoundParams, batch: &Batch, cfg: &ModelConfig, mode: Mode) -> Result<(Var, Var)> {
    let f = forward(tape, p, batch, cfg, mode)?;
    let l = predictor::nll_loss(tape, f.yhat, &batch.labels)?;
    Ok((l, f.yhat))
}

/// Scores a batch in evaluation mode.
pub fn predict_batch(params: &ModelParams, batch: &Batch, cfg: &ModelConfig) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let f = forward(&mut tape, &p, batch, cfg, Mode::Eval)?;
    Ok(tape.value(f.yhat).data().to_vec())
}

/// Closed-form parameter count per module.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub embedding: usize,
    pub bdm: usize,
    pub sfe: usize,
    pub cfm: usize,
    pub sam: usize,
    pub head: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.embedding + self.bdm + self.sfe + self.cfm + self.sam + self.head
    }
}

pub fn param_count(cfg: &ModelConfig) -> ParamBreakdown {
    let (n, d1, d2) = (cfg.num_fields, cfg.d_situ(), cfg.d_common);
    let a = &cfg.ablation;
    let embedding = (cfg.item_vocab + cfg.user_vocab + cfg.context_vocab) * d2
        + cfg.situ_vocab.iter().sum::<usize>() * d1
        + n * d1;
    let bdm = if a.bdm == BdmVariant::Full { d2 * n * d1 + d2 } else { 0 };
    let h = cfg.gate_hidden();
    let sfe = match a.sfe {
        SfeVariant::SpecificOnly => 0,
        SfeVariant::AvgConcat | SfeVariant::Concat => h * (d2 + d1) + 2 * h + 1 + d2 * (d2 + d1),
        _ => h * (d2 + d1) + 2 * h + 1,
    };
    let mixer = |io: usize, hidden: usize, norm: usize| 2 * io * hidden + 2 * norm;
    let branches = [a.cfm.adjacent, a.cfm.dilated, a.cfm.shifted]
        .iter()
        .filter(|&&b| b)
        .count();
    let mut per_plane = 0;
    if a.cfm.behavior {
        per_plane += branches * mixer(cfg.window, cfg.hidden_behavior, d2) + 3;
    }
    if a.cfm.channel {
        per_plane += mixer(d2, cfg.hidden_channel, d2);
    }
    let planes = if cfg.share_planes { 1 } else { n };
    let cfm = planes * per_plane + if a.cfm.feature { mixer(n, cfg.hidden_feature, n) } else { 0 };
    let sam_mlp = |out: usize| d2 * d2 + d2 + out * d2 + out;
    let sam = n
        + 2 * sam_mlp(d2)
        + if a.sam == SamVariant::AvgPool { 0 } else { sam_mlp(1) }
        + if a.sam == SamVariant::ScalarScore { 3 * d2 } else { d2 * 3 * d2 };
    let mut widths = vec![4 * d2];
    widths.extend(&cfg.head_hidden);
    widths.push(1);
    let head = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    ParamBreakdown {
        embedding,
        bdm,
        sfe,
        cfm,
        sam,
        head,
    }
}

/// Human-readable table of [`param_count`] including the carving identity.
pub fn param_report(cfg: &ModelConfig) -> String {
    let b = param_count(cfg);
    let (d2, dd) = (cfg.d_common, cfg.micro_depth);
    format!(
        "d1 = D·(d2²+d2) = {dd}·({}+{d2}) = {}\n\
         embedding {:>10}\nbdm       {:>10}\nsfe       {:>10}\ncfm       {:>10}\nsam       {:>10}\nhead      {:>10}\ntotal     {:>10}\n",
        d2 * d2,
        cfg.d_situ(),
        b.embedding,
        b.bdm,
        b.sfe,
        b.cfm,
        b.sam,
        b.head,
        b.total()
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::data::TrainRecord;
    use crate::embedding::{BehaviorSequence, Situation};
    use crate::numerics::{grad_check, Coordinates};

    pub(crate) fn small() -> ModelConfig {
        ModelConfig {
            seq_len: 4,
            window: 2,
            num_fields: 2,
            d_common: 2,
            micro_depth: 1,
            mixer_depth: 2,
            hidden_behavior: 2,
            hidden_channel: 3,
            hidden_feature: 2,
            head_hidden: vec![3],
            item_vocab: 5,
            user_vocab: 3,
            context_vocab: 3,
            situ_vocab: vec![3, 4],
            init_std: 0.3,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn records(cfg: &ModelConfig) -> Vec<TrainRecord> {
        let s = |a, b| Situation::new(vec![a, b]);
        let r1 = TrainRecord {
            user: 1,
            context: 2,
            sequence: BehaviorSequence::from_history(&[(1, s(1, 2)), (3, s(2, 3))], 2, s(1, 1), cfg.seq_len),
            label: 1.0,
        };
        let r2 = TrainRecord {
            user: 2,
            context: 1,
            sequence: BehaviorSequence::from_history(
                &[(4, s(2, 1)), (2, s(1, 3)), (1, s(2, 2)), (3, s(1, 1)), (4, s(2, 3))],
                3,
                s(2, 2),
                cfg.seq_len,
            ),
            label: 0.0,
        };
        vec![r1, r2]
    }

    #[test]
    fn init_is_seed_deterministic() {
        let c = small();
        assert_eq!(init_params(&c).unwrap(), init_params(&c).unwrap());
        let other = ModelConfig { seed: 1, ..c.clone() };
        assert_ne!(init_params(&c).unwrap(), init_params(&other).unwrap());
    }

    #[test]
    fn closed_form_count_matches_enumeration_for_every_variant() {
        for v in Variant::all() {
            for share in [true, false] {
                let mut c = small();
                c.ablation = v.ablation();
                c.share_planes = share;
                let p = init_params(&c).unwrap();
                assert_eq!(param_count(&c).total(), p.numel(), "{v} share={share}");
            }
        }
        assert!(param_report(&ModelConfig::default()).contains("2·(64+8) = 144"));
    }

    #[test]
    fn forward_shapes_and_ranges() {
        let c = small();
        let params = init_params(&c).unwrap();
        let batch = Batch::from_records(&records(&c), &c).unwrap();
        let mut t = Tape::new();
        let p = params.bind(&mut t);
        let f = forward(&mut t, &p, &batch, &c, Mode::Train { seed: 3 }).unwrap();
        assert_eq!(t.shape(f.encoded), &[2, 2, 4, 2]);
        assert_eq!(t.shape(f.mixed), &[2, 2, 4, 2]);
        assert_eq!(t.shape(f.yhat), &[2, 1]);
        let kp = t.value(f.keep_prob.unwrap()).data().to_vec();
        // record 1 has two padding positions
        assert_eq!(&kp[..2], &[0.0, 0.0]);
        assert!(kp[2..].iter().all(|&x| x > 0.0 && x < 1.0));
        assert!(t.value(f.yhat).data().iter().all(|&x| x > 0.0 && x < 1.0));
        let g = t.value(f.sam.gates).data();
        assert!(g.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn every_variant_runs_and_checks_gradients() {
        let c0 = small();
        let recs = records(&c0);
        for v in Variant::all() {
            let mut c = c0.clone();
            c.ablation = v.ablation();
            let params = init_params(&c).unwrap();
            let batch = Batch::from_records(&recs, &c).unwrap();
            let r = grad_check(
                &params,
                |t, p| Ok(loss(t, p, &batch, &c, Mode::Train { seed: 9 })?.0),
                // without situations the mixers see exact zeros, where layer
                // norm curvature makes wider steps inaccurate
                1e-6,
                Coordinates::Sample { count: 60, seed: 1 },
            )
            .unwrap();
            assert!(r.max_relative_error < 1e-5, "{v}: {r:?}");
        }
    }

    #[test]
    fn bdm_off_leaves_items_untouched() {
        let mut c = small();
        c.ablation = Variant::NoBdm.ablation();
        let params = init_params(&c).unwrap();
        let batch = Batch::from_records(&records(&c), &c).unwrap();
        let mut t = Tape::new();
        let p = params.bind(&mut t);
        let e = embedding::embed(&mut t, &p, &batch, &c).unwrap();
        let d = bdm::denoise(&mut t, &p, &e, &batch, &c, Mode::Train { seed: 1 }).unwrap();
        assert_eq!(t.value(d.items), t.value(e.item));
    }

    #[test]
    fn relabeling_items_leaves_output_unchanged() {
        let c = small();
        let params = init_params(&c).unwrap();
        let recs = records(&c);
        // swap item ids 1 and 4 in both the table and the data
        let perm = |i: usize| match i {
            1 => 4,
            4 => 1,
            x => x,
        };
        let mut p2 = params.clone();
        let table = p2.get_mut("emb.item").unwrap();
        let d = table.data_mut();
        for j in 0..2 {
            d.swap(2 + j, 8 + j);
        }
        let mut recs2 = recs.clone();
        for r in &mut recs2 {
            r.sequence.item_ids.iter_mut().for_each(|x| *x = perm(*x));
            r.sequence.candidate_item = perm(r.sequence.candidate_item);
        }
        let a = predict_batch(&params, &Batch::from_records(&recs, &c).unwrap(), &c).unwrap();
        let b = predict_batch(&p2, &Batch::from_records(&recs2, &c).unwrap(), &c).unwrap();
        assert_eq!(a, b);
    }
}
