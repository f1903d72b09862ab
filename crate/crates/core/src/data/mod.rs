//! Training records: a synthetic generator with a planted situational
//! signal, and a JSON Lines reader/writer for external logs.

mod ingest;
mod synth;

pub use ingest::{
    decompose_timestamp, ingest_path, ingest_str, parse_timestamp, record_to_json, write_jsonl, FieldSource, IngestReport,
    Schema,
};
pub use synth::{Generator, SynthSpec};

use crate::config::BEHAVIOR_EXPOSURE;
use crate::embedding::{BehaviorSequence, Situation};

/// One labeled example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub user: usize,
    /// Request-context id; 0 when absent.
    pub context: usize,
    pub sequence: BehaviorSequence,
    /// 0.0 or 1.0.
    pub label: f64,
}

/// Keeps at most `keep` exposures immediately before each click (and before
/// the end of the history) and drops every other exposure.
pub fn filter_exposures(record: &TrainRecord, keep: usize, behavior_field: usize) -> TrainRecord {
    let s = &record.sequence;
    let real: Vec<(usize, Situation)> = (0..s.len())
        .filter(|&i| s.mask[i])
        .map(|i| (s.item_ids[i], s.situations[i].clone()))
        .collect();
    let mut kept = Vec::with_capacity(real.len());
    let mut run: Vec<(usize, Situation)> = Vec::new();
    for b in real {
        match b.1.ids[behavior_field] {
            BEHAVIOR_EXPOSURE => run.push(b),
            _ => {
                let start = run.len().saturating_sub(keep);
                kept.extend(run.drain(..).skip(start));
                kept.push(b);
            }
        }
    }
    let start = run.len().saturating_sub(keep);
    kept.extend(run.into_iter().skip(start));
    TrainRecord {
        sequence: BehaviorSequence::from_history(
            &kept,
            s.candidate_item,
            s.candidate_situation.clone(),
            s.len(),
        ),
        ..record.clone()
    }
}
