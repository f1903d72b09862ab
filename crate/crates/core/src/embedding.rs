//! Embedding tables and batched lookups.
//!
//! Common features (items, users, contexts) live in `d2`-wide tables and
//! situational features in one `d1`-wide table per field. Row 0 of every
//! table is the padding row.

use crate::config::ModelConfig;
use crate::data::TrainRecord;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{BoundParams, ParamSpec};

pub const PAD: usize = 0;

/// One id per situational field.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Situation {
    pub ids: Vec<usize>,
}

impl Situation {
    pub fn new(ids: Vec<usize>) -> Self {
        Situation { ids }
    }

    pub fn padding(n: usize) -> Self {
        Situation { ids: vec![PAD; n] }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.ids.len() != cfg.num_fields {
            return Err(Error::InvalidArgument(format!(
                "situation has {} fields, expected {}",
                self.ids.len(),
                cfg.num_fields
            )));
        }
        for (k, (&id, &m)) in self.ids.iter().zip(&cfg.situ_vocab).enumerate() {
            if id >= m {
                return Err(Error::IdOutOfRange {
                    field: format!("situation[{k}]"),
                    id,
                    vocab: m,
                });
            }
        }
        Ok(())
    }
}

/// A fixed-length, left-padded history plus the candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorSequence {
    pub item_ids: Vec<usize>,
    pub situations: Vec<Situation>,
    pub mask: Vec<bool>,
    pub candidate_item: usize,
    pub candidate_situation: Situation,
}

impl BehaviorSequence {
    /// Keeps the most recent `seq_len` behaviors (oldest first in `history`)
    /// and left-pads the rest.
    pub fn from_history(
        history: &[(usize, Situation)],
        candidate_item: usize,
        candidate_situation: Situation,
        seq_len: usize,
    ) -> Self {
        let n = candidate_situation.ids.len();
        let keep = &history[history.len().saturating_sub(seq_len)..];
        let pad = seq_len - keep.len();
        let mut item_ids = vec![PAD; pad];
        let mut situations = vec![Situation::padding(n); pad];
        let mut mask = vec![false; pad];
        for (item, s) in keep {
            item_ids.push(*item);
            situations.push(s.clone());
            mask.push(true);
        }
        BehaviorSequence {
            item_ids,
            situations,
            mask,
            candidate_item,
            candidate_situation,
        }
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let l = cfg.seq_len;
        if self.item_ids.len() != l || self.situations.len() != l || self.mask.len() != l {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} does not match seq_len {l}",
                self.item_ids.len()
            )));
        }
        let first_real = self.mask.iter().position(|&m| m).unwrap_or(l);
        if self.mask[first_real..].iter().any(|&m| !m) {
            return Err(Error::InvalidArgument("padding must be a contiguous prefix".into()));
        }
        for i in 0..l {
            if !self.mask[i] && (self.item_ids[i] != PAD || self.situations[i].ids.iter().any(|&x| x != PAD)) {
                return Err(Error::InvalidArgument(format!("padding position {i} carries a non-zero id")));
            }
            check_id("item", self.item_ids[i], cfg.item_vocab)?;
            self.situations[i].validate(cfg)?;
        }
        check_id("candidate item", self.candidate_item, cfg.item_vocab)?;
        self.candidate_situation.validate(cfg)
    }
}

fn check_id(field: &str, id: usize, vocab: usize) -> Result<()> {
    if id >= vocab {
        return Err(Error::IdOutOfRange {
            field: field.to_string(),
            id,
            vocab,
        });
    }
    Ok(())
}

/// Column-oriented ids for `size` records.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub seq_len: usize,
    /// `[size · seq_len]`, record-major.
    pub hist_items: Vec<usize>,
    /// One `[size · seq_len]` column per field.
    pub hist_situ: Vec<Vec<usize>>,
    pub mask: Vec<f64>,
    pub cand_items: Vec<usize>,
    pub cand_situ: Vec<Vec<usize>>,
    pub users: Vec<usize>,
    pub contexts: Vec<usize>,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn from_records<'a, I>(records: I, cfg: &ModelConfig) -> Result<Batch>
    where
        I: IntoIterator<Item = &'a TrainRecord>,
    {
        let n = cfg.num_fields;
        let mut b = Batch {
            size: 0,
            seq_len: cfg.seq_len,
            hist_items: Vec::new(),
            hist_situ: vec![Vec::new(); n],
            mask: Vec::new(),
            cand_items: Vec::new(),
            cand_situ: vec![Vec::new(); n],
            users: Vec::new(),
            contexts: Vec::new(),
            labels: Vec::new(),
        };
        for r in records {
            let s = &r.sequence;
            s.validate(cfg)?;
            check_id("user", r.user, cfg.user_vocab)?;
            check_id("context", r.context, cfg.context_vocab)?;
            b.hist_items.extend_from_slice(&s.item_ids);
            for k in 0..n {
                b.hist_situ[k].extend(s.situations.iter().map(|x| x.ids[k]));
                b.cand_situ[k].push(s.candidate_situation.ids[k]);
            }
            b.mask.extend(s.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
            b.cand_items.push(s.candidate_item);
            b.users.push(r.user);
            b.contexts.push(r.context);
            b.labels.push(r.label);
            b.size += 1;
        }
        if b.size == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Ok(b)
    }

    /// Mask as a `[B, L, 1]` tensor.
    pub fn mask_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.size, self.seq_len, 1], self.mask.clone())
    }
}

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d1, d2, std) = (cfg.d_situ(), cfg.d_common, cfg.init_std);
    let mut v = vec![
        ParamSpec::normal("emb.item", vec![cfg.item_vocab, d2], std).padded(),
        ParamSpec::normal("emb.user", vec![cfg.user_vocab, d2], std).padded(),
        ParamSpec::normal("emb.context", vec![cfg.context_vocab, d2], std).padded(),
    ];
    for (k, &m) in cfg.situ_vocab.iter().enumerate() {
        v.push(ParamSpec::normal(format!("emb.situ.{k}"), vec![m, d1], std).padded());
    }
    v.push(ParamSpec::normal("emb.general", vec![cfg.num_fields, d1], std));
    v
}

/// Looked-up embeddings of one batch, laid out for the downstream modules.
#[derive(Clone, Copy, Debug)]
pub struct Embedded {
    /// `[B, L, d2]`
    pub item: Var,
    /// `[B, n, L, d1]`
    pub situ: Var,
    /// `[B, 1, d2]`
    pub cand: Var,
    /// `[B, n, 1, d1]`
    pub cand_situ: Var,
    /// `[n, 1, d1]`
    pub general: Var,
    /// `[B, d2]`
    pub user: Var,
    /// `[B, d2]`
    pub context: Var,
}

pub fn embed(tape: &mut Tape, p: &BoundParams, batch: &Batch, cfg: &ModelConfig) -> Result<Embedded> {
    let (b, l, n, d1, d2) = (batch.size, batch.seq_len, cfg.num_fields, cfg.d_situ(), cfg.d_common);
    let item_t = p.var("emb.item")?;
    let item = tape.lookup(item_t, &batch.hist_items, "item")?;
    let item = tape.reshape(item, vec![b, l, d2])?;
    let cand = tape.lookup(item_t, &batch.cand_items, "candidate item")?;
    let cand = tape.reshape(cand, vec![b, 1, d2])?;
    let user = tape.lookup(p.var("emb.user")?, &batch.users, "user")?;
    let context = tape.lookup(p.var("emb.context")?, &batch.contexts, "context")?;

    let (situ, cand_situ, general) = if cfg.ablation.situation {
        let mut hist = Vec::with_capacity(n);
        let mut cands = Vec::with_capacity(n);
        for k in 0..n {
            let table = p.var(&format!("emb.situ.{k}"))?;
            let name = format!("situation[{k}]");
            let h = tape.lookup(table, &batch.hist_situ[k], &name)?;
            hist.push(tape.reshape(h, vec![b, 1, l, d1])?);
            let c = tape.lookup(table, &batch.cand_situ[k], &name)?;
            cands.push(tape.reshape(c, vec![b, 1, 1, d1])?);
        }
        let general = tape.reshape(p.var("emb.general")?, vec![n, 1, d1])?;
        (tape.concat(&hist, 1)?, tape.concat(&cands, 1)?, general)
    } else {
        (
            tape.constant(Tensor::zeros(&[b, n, l, d1])),
            tape.constant(Tensor::zeros(&[b, n, 1, d1])),
            tape.constant(Tensor::zeros(&[n, 1, d1])),
        )
    };
    Ok(Embedded {
        item,
        situ,
        cand,
        cand_situ,
        general,
        user,
        context,
    })
}

/// Single-sequence lookup: `(item [L, d2], situ [n, L, d1], cand [d2], cand_situ [n, d1])`.
pub fn lookup_sequence(
    tape: &mut Tape,
    p: &BoundParams,
    seq: &BehaviorSequence,
    cfg: &ModelConfig,
) -> Result<(Var, Var, Var, Var)> {
    let record = TrainRecord {
        user: PAD,
        context: PAD,
        sequence: seq.clone(),
        label: 0.0,
    };
    let batch = Batch::from_records([&record], cfg)?;
    let e = embed(tape, p, &batch, cfg)?;
    let (l, n, d1, d2) = (cfg.seq_len, cfg.num_fields, cfg.d_situ(), cfg.d_common);
    Ok((
        tape.reshape(e.item, vec![l, d2])?,
        tape.reshape(e.situ, vec![n, l, d1])?,
        tape.reshape(e.cand, vec![d2])?,
        tape.reshape(e.cand_situ, vec![n, d1])?,
    ))
}
