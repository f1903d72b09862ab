//! JSON Lines logs.
//!
//! One record per line:
//!
//! ```json
//! {"user": 3, "context": 1, "label": 1,
//!  "candidate": {"item": 7, "situation": {"behavior": 2, "ts": "2024-03-02T12:30Z"}},
//!  "history": [{"item": 4, "situation": {"behavior": 1, "ts": 1709380000}}]}
//! ```
//!
//! History is oldest first. Each situational field either reads an id by
//! name or is derived from the behavior's `ts` (hour of day, meal period,
//! weekday/weekend). A derived field given explicitly by name wins over `ts`.

use std::fmt;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDateTime, Timelike, Weekday};
use serde_json::{json, Map, Value};

use super::TrainRecord;
use crate::config::ModelConfig;
use crate::embedding::{BehaviorSequence, Situation};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldSource {
    /// Id read from the situation object; `vocab` counts the padding id.
    Direct { vocab: usize },
    Hour,
    Period,
    Weekpart,
}

impl FieldSource {
    pub fn vocab(&self) -> usize {
        match *self {
            FieldSource::Direct { vocab } => vocab,
            FieldSource::Hour => 25,
            FieldSource::Period => 5,
            FieldSource::Weekpart => 3,
        }
    }
}

/// Ordered situational fields.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schema {
    pub fields: Vec<(String, FieldSource)>,
}

impl Schema {
    /// Parses `name:vocab` (direct) and `hour`/`period`/`weekpart` (derived)
    /// entries separated by commas, e.g. `behavior:3,hour,period,weekpart`.
    pub fn parse(text: &str) -> Result<Schema> {
        let mut fields = Vec::new();
        for entry in text.split(',').map(str::trim).filter(|e| !e.is_empty()) {
            let field = match entry.split_once(':') {
                Some((name, v)) => {
                    let vocab: usize = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("schema: bad vocabulary size in `{entry}`")))?;
                    if vocab < 2 {
                        return Err(Error::Config(format!("schema: `{entry}` needs at least one non-padding id")));
                    }
                    (name.trim().to_string(), FieldSource::Direct { vocab })
                }
                None => {
                    let src = match entry {
                        "hour" => FieldSource::Hour,
                        "period" => FieldSource::Period,
                        "weekpart" => FieldSource::Weekpart,
                        _ => return Err(Error::Config(format!("schema: unknown derived field `{entry}`"))),
                    };
                    (entry.to_string(), src)
                }
            };
            if fields.iter().any(|(n, _)| *n == field.0) {
                return Err(Error::Config(format!("schema: duplicate field `{}`", field.0)));
            }
            fields.push(field);
        }
        if fields.is_empty() {
            return Err(Error::Config("schema: no fields".into()));
        }
        Ok(Schema { fields })
    }

    pub fn situ_vocab(&self) -> Vec<usize> {
        self.fields.iter().map(|(_, s)| s.vocab()).collect()
    }

    pub fn apply_vocab(&self, cfg: &mut ModelConfig) {
        cfg.situ_vocab = self.situ_vocab();
        cfg.num_fields = self.fields.len();
    }

    fn situation(&self, v: &Value) -> std::result::Result<Situation, String> {
        let obj = v.as_object().ok_or("situation must be an object")?;
        let ts = match obj.get("ts") {
            Some(t) => Some(parse_timestamp(t).map_err(|e| e.to_string())?),
            None => None,
        };
        let mut ids = Vec::with_capacity(self.fields.len());
        for (name, src) in &self.fields {
            let id = match (obj.get(name), src) {
                (Some(x), _) => x
                    .as_u64()
                    .ok_or_else(|| format!("field `{name}` must be a non-negative integer"))?
                    as usize,
                (None, FieldSource::Direct { .. }) => return Err(format!("missing field `{name}`")),
                (None, derived) => {
                    let t = ts.ok_or_else(|| format!("field `{name}` needs `ts`"))?;
                    let (h, p, w) = decompose_timestamp(t);
                    match derived {
                        FieldSource::Hour => h,
                        FieldSource::Period => p,
                        _ => w,
                    }
                }
            };
            if id >= src.vocab() {
                return Err(format!("field `{name}` id {id} outside vocabulary of {}", src.vocab()));
            }
            ids.push(id);
        }
        Ok(Situation::new(ids))
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .fields
            .iter()
            .map(|(n, s)| match s {
                FieldSource::Direct { vocab } => format!("{n}:{vocab}"),
                _ => n.clone(),
            })
            .collect();
        f.write_str(&parts.join(","))
    }
}

/// Seconds since the Unix epoch, from an integer or a date-time string.
pub fn parse_timestamp(v: &Value) -> Result<i64> {
    let bad = || Error::InvalidArgument(format!("unparseable timestamp {v}"));
    if let Some(n) = v.as_i64() {
        return Ok(n);
    }
    let s = v.as_str().ok_or_else(bad)?;
    if let Ok(n) = s.parse::<i64>() {
        return Ok(n);
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%MZ", "%Y-%m-%dT%H:%M:%SZ", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t.and_utc().timestamp());
        }
    }
    Err(bad())
}

/// `(hour id, period id, weekpart id)` in UTC. Hours map to 1..=24; periods
/// are breakfast [5, 10) = 1, lunch [10, 15) = 2, dinner [15, 21) = 3 and
/// other = 4; weekday = 1 and weekend = 2.
pub fn decompose_timestamp(secs: i64) -> (usize, usize, usize) {
    let t = DateTime::from_timestamp(secs, 0).unwrap_or_default();
    let h = t.hour() as usize;
    let period = match h {
        5..=9 => 1,
        10..=14 => 2,
        15..=20 => 3,
        _ => 4,
    };
    let weekpart = match t.weekday() {
        Weekday::Sat | Weekday::Sun => 2,
        _ => 1,
    };
    (h + 1, period, weekpart)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IngestReport {
    pub records: usize,
    /// `(1-based line, reason)` for every skipped line.
    pub skipped: Vec<(usize, String)>,
    /// Records whose history exceeded `seq_len`.
    pub truncated: usize,
}

fn id_in(obj: &Map<String, Value>, key: &str, vocab: usize, required: bool) -> std::result::Result<usize, String> {
    match obj.get(key) {
        None if !required => Ok(0),
        None => Err(format!("missing `{key}`")),
        Some(v) => {
            let id = v.as_u64().ok_or_else(|| format!("`{key}` must be a non-negative integer"))? as usize;
            if id >= vocab {
                return Err(format!("`{key}` id {id} outside vocabulary of {vocab}"));
            }
            Ok(id)
        }
    }
}

fn parse_line(line: &str, schema: &Schema, cfg: &ModelConfig) -> std::result::Result<(TrainRecord, bool), String> {
    let v: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = v.as_object().ok_or("record must be an object")?;
    let user = id_in(obj, "user", cfg.user_vocab, true)?;
    let context = id_in(obj, "context", cfg.context_vocab, false)?;
    let label = match obj.get("label") {
        Some(Value::Bool(b)) => f64::from(*b),
        Some(x) => match x.as_f64() {
            Some(y) if y == 0.0 || y == 1.0 => y,
            _ => return Err("`label` must be 0 or 1".into()),
        },
        None => return Err("missing `label`".into()),
    };
    let behavior = |b: &Value| -> std::result::Result<(usize, Situation), String> {
        let o = b.as_object().ok_or("behavior must be an object")?;
        let item = id_in(o, "item", cfg.item_vocab, true)?;
        if item == 0 {
            return Err("item id 0 is reserved for padding".into());
        }
        let s = schema.situation(o.get("situation").ok_or("missing `situation`")?)?;
        Ok((item, s))
    };
    let (cand_item, cand_situ) = behavior(obj.get("candidate").ok_or("missing `candidate`")?)?;
    let hist = match obj.get("history") {
        None => Vec::new(),
        Some(Value::Array(a)) => a.iter().map(&behavior).collect::<std::result::Result<Vec<_>, _>>()?,
        Some(_) => return Err("`history` must be an array".into()),
    };
    let truncated = hist.len() > cfg.seq_len;
    let sequence = BehaviorSequence::from_history(&hist, cand_item, cand_situ, cfg.seq_len);
    Ok((
        TrainRecord {
            user,
            context,
            sequence,
            label,
        },
        truncated,
    ))
}

/// Parses JSON Lines text. Blank lines are ignored. Malformed lines are
/// skipped and reported, or abort with their line number when `strict`.
pub fn ingest_str(text: &str, schema: &Schema, cfg: &ModelConfig, strict: bool) -> Result<(Vec<TrainRecord>, IngestReport)> {
    if schema.situ_vocab() != cfg.situ_vocab {
        return Err(Error::Config(format!(
            "schema `{schema}` implies situational vocabularies {:?} but the model has {:?}",
            schema.situ_vocab(),
            cfg.situ_vocab
        )));
    }
    let mut out = Vec::new();
    let mut report = IngestReport::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line, schema, cfg) {
            Ok((r, t)) => {
                report.truncated += usize::from(t);
                out.push(r);
            }
            Err(message) if strict => return Err(Error::Ingest { line: i + 1, message }),
            Err(message) => report.skipped.push((i + 1, message)),
        }
    }
    report.records = out.len();
    Ok((out, report))
}

pub fn ingest_path(path: &Path, schema: &Schema, cfg: &ModelConfig, strict: bool) -> Result<(Vec<TrainRecord>, IngestReport)> {
    ingest_str(&std::fs::read_to_string(path)?, schema, cfg, strict)
}

/// The JSON form read by [`ingest_str`]; derived fields are written as ids.
pub fn record_to_json(r: &TrainRecord, schema: &Schema) -> Value {
    let situ = |s: &Situation| -> Value {
        Value::Object(
            schema
                .fields
                .iter()
                .zip(&s.ids)
                .map(|((n, _), &id)| (n.clone(), json!(id)))
                .collect(),
        )
    };
    let s = &r.sequence;
    let history: Vec<Value> = (0..s.len())
        .filter(|&i| s.mask[i])
        .map(|i| json!({"item": s.item_ids[i], "situation": situ(&s.situations[i])}))
        .collect();
    json!({
        "user": r.user,
        "context": r.context,
        "label": r.label as u8,
        "candidate": {"item": s.candidate_item, "situation": situ(&s.candidate_situation)},
        "history": history,
    })
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[TrainRecord], schema: &Schema) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, &record_to_json(r, schema)).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
