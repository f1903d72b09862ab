use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FieldSource, Schema, TrainRecord};
use crate::config::{parse, parse_list, ModelConfig, BEHAVIOR_CLICK, BEHAVIOR_EXPOSURE};
use crate::embedding::{BehaviorSequence, Situation};
use crate::error::{Error, Result};

/// Parameters of the synthetic world.
///
/// Items fall into `clusters` groups. Every cluster has a globally preferred
/// value of the key situational field (field 1), and each user prefers, per
/// cluster, that value with probability `consistency` and a uniform value
/// otherwise. Clicks in the history come from preferred cells; a `noise_rate`
/// fraction of positions are uniform exposures. The candidate's key
/// situation matches the user's preference with probability `base_rate`,
/// and the label is Bernoulli with
/// `base + s(1 - base)` on a match and `base (1 - s)` otherwise, where
/// `s = signal_strength`, so the expected positive rate is `base_rate`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    /// Number of values of the key situational field.
    pub situations: usize,
    /// Value counts of further fields that carry no signal.
    pub distractors: Vec<usize>,
    pub contexts: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise_rate: f64,
    pub signal_strength: f64,
    pub base_rate: f64,
    pub consistency: f64,
    pub train_records: usize,
    pub test_records: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            users: 200,
            items: 32,
            clusters: 4,
            situations: 4,
            distractors: vec![4],
            contexts: 4,
            min_len: 10,
            max_len: 40,
            noise_rate: 0.5,
            signal_strength: 0.8,
            base_rate: 0.5,
            consistency: 0.8,
            train_records: 10_000,
            test_records: 2_000,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.users == 0 || self.clusters == 0 || self.items < self.clusters {
            return fail("need users >= 1 and items >= clusters >= 1");
        }
        if self.situations < 2 || self.distractors.iter().any(|&d| d < 1) || self.contexts < 1 {
            return fail("field value counts must be >= 2 for the key field and >= 1 otherwise");
        }
        if self.min_len > self.max_len {
            return fail("min_len exceeds max_len");
        }
        for (name, v) in [
            ("noise_rate", self.noise_rate),
            ("signal_strength", self.signal_strength),
            ("base_rate", self.base_rate),
            ("consistency", self.consistency),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(&format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }

    pub fn num_fields(&self) -> usize {
        2 + self.distractors.len()
    }

    /// Vocabulary sizes including the padding id.
    pub fn situ_vocab(&self) -> Vec<usize> {
        let mut v = vec![3, self.situations + 1];
        v.extend(self.distractors.iter().map(|d| d + 1));
        v
    }

    pub fn field_names(&self) -> Vec<String> {
        let mut v = vec!["behavior".to_string(), "slot".to_string()];
        v.extend((0..self.distractors.len()).map(|i| format!("extra{i}")));
        v
    }

    /// The JSONL schema of records written from this spec.
    pub fn schema(&self) -> Schema {
        Schema {
            fields: self
                .field_names()
                .into_iter()
                .zip(self.situ_vocab())
                .map(|(n, vocab)| (n, FieldSource::Direct { vocab }))
                .collect(),
        }
    }

    /// Copies vocabulary sizes into `cfg`.
    pub fn apply_vocab(&self, cfg: &mut ModelConfig) {
        cfg.item_vocab = self.items + 1;
        cfg.user_vocab = self.users + 1;
        cfg.context_vocab = self.contexts + 1;
        cfg.situ_vocab = self.situ_vocab();
        cfg.num_fields = cfg.situ_vocab.len();
        cfg.behavior_field = 0;
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let Some(k) = key.strip_prefix("synth.") else {
            return Ok(false);
        };
        match k {
            "users" => self.users = parse(key, value)?,
            "items" => self.items = parse(key, value)?,
            "clusters" => self.clusters = parse(key, value)?,
            "situations" => self.situations = parse(key, value)?,
            "distractors" => self.distractors = parse_list(key, value)?,
            "contexts" => self.contexts = parse(key, value)?,
            "min_len" => self.min_len = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "noise_rate" => self.noise_rate = parse(key, value)?,
            "signal_strength" => self.signal_strength = parse(key, value)?,
            "base_rate" => self.base_rate = parse(key, value)?,
            "consistency" => self.consistency = parse(key, value)?,
            "train_records" => self.train_records = parse(key, value)?,
            "test_records" => self.test_records = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        let list = self.distractors.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        [
            ("users", self.users.to_string()),
            ("items", self.items.to_string()),
            ("clusters", self.clusters.to_string()),
            ("situations", self.situations.to_string()),
            ("distractors", list),
            ("contexts", self.contexts.to_string()),
            ("min_len", self.min_len.to_string()),
            ("max_len", self.max_len.to_string()),
            ("noise_rate", format!("{:?}", self.noise_rate)),
            ("signal_strength", format!("{:?}", self.signal_strength)),
            ("base_rate", format!("{:?}", self.base_rate)),
            ("consistency", format!("{:?}", self.consistency)),
            ("train_records", self.train_records.to_string()),
            ("test_records", self.test_records.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .iter()
        .map(|(k, v)| format!("synth.{k} = {v}\n"))
        .collect()
    }
}

/// A sampled world: cluster preferences and per-user preferred cells.
#[derive(Clone, Debug)]
pub struct Generator {
    spec: SynthSpec,
    /// `preferred[u][c]` is user `u`'s preferred key situation (1-based) for
    /// cluster `c`; row 0 is unused.
    preferred: Vec<Vec<usize>>,
    cluster_items: Vec<Vec<usize>>,
}

impl Generator {
    pub fn new(spec: &SynthSpec) -> Result<Generator> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let global: Vec<usize> = (0..spec.clusters).map(|_| rng.gen_range(1..=spec.situations)).collect();
        let mut preferred = vec![vec![0; spec.clusters]];
        for _ in 0..spec.users {
            let row = global
                .iter()
                .map(|&g| {
                    if rng.gen::<f64>() < spec.consistency {
                        g
                    } else {
                        rng.gen_range(1..=spec.situations)
                    }
                })
                .collect();
            preferred.push(row);
        }
        let mut cluster_items = vec![Vec::new(); spec.clusters];
        for item in 1..=spec.items {
            cluster_items[(item - 1) % spec.clusters].push(item);
        }
        Ok(Generator {
            spec: spec.clone(),
            preferred,
            cluster_items,
        })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn cluster_of(&self, item: usize) -> usize {
        (item - 1) % self.spec.clusters
    }

    pub fn preferred(&self, user: usize, cluster: usize) -> usize {
        self.preferred[user][cluster]
    }

    /// Whether the candidate sits in a cell the user prefers.
    pub fn matches(&self, r: &TrainRecord) -> bool {
        let s = &r.sequence;
        s.candidate_situation.ids[1] == self.preferred(r.user, self.cluster_of(s.candidate_item))
    }

    /// Click probability of a record under the generating process.
    pub fn oracle(&self, r: &TrainRecord) -> f64 {
        let (b, s) = (self.spec.base_rate, self.spec.signal_strength);
        if self.matches(r) {
            b + s * (1.0 - b)
        } else {
            b * (1.0 - s)
        }
    }

    fn situation<R: Rng>(&self, rng: &mut R, kind: usize, slot: usize) -> Situation {
        let mut ids = vec![kind, slot];
        ids.extend(self.spec.distractors.iter().map(|&d| rng.gen_range(1..=d)));
        Situation::new(ids)
    }

    fn record<R: Rng>(&self, rng: &mut R, seq_len: usize) -> TrainRecord {
        let sp = &self.spec;
        let user = rng.gen_range(1..=sp.users);
        let len = rng.gen_range(sp.min_len..=sp.max_len);
        let mut hist = Vec::with_capacity(len);
        for _ in 0..len {
            if rng.gen::<f64>() < sp.noise_rate {
                let item = rng.gen_range(1..=sp.items);
                let slot = rng.gen_range(1..=sp.situations);
                hist.push((item, self.situation(rng, BEHAVIOR_EXPOSURE, slot)));
            } else {
                let c = rng.gen_range(0..sp.clusters);
                let item = *self.cluster_items[c].choose(rng).unwrap();
                hist.push((item, self.situation(rng, BEHAVIOR_CLICK, self.preferred(user, c))));
            }
        }
        let c = rng.gen_range(0..sp.clusters);
        let item = *self.cluster_items[c].choose(rng).unwrap();
        let pref = self.preferred(user, c);
        let slot = if rng.gen::<f64>() < sp.base_rate {
            pref
        } else {
            let other = rng.gen_range(1..sp.situations);
            if other >= pref {
                other + 1
            } else {
                other
            }
        };
        let cand = self.situation(rng, BEHAVIOR_CLICK, slot);
        let context = rng.gen_range(1..=sp.contexts);
        let mut r = TrainRecord {
            user,
            context,
            sequence: BehaviorSequence::from_history(&hist, item, cand, seq_len),
            label: 0.0,
        };
        r.label = f64::from(rng.gen::<f64>() < self.oracle(&r));
        r
    }

    /// `count` records from stream `stream`; the world is shared by all
    /// streams of one generator.
    pub fn records(&self, stream: u64, count: usize, seq_len: usize) -> Vec<TrainRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(stream + 1);
        (0..count).map(|_| self.record(&mut rng, seq_len)).collect()
    }

    pub fn train_set(&self, seq_len: usize) -> Vec<TrainRecord> {
        self.records(0, self.spec.train_records, seq_len)
    }

    pub fn test_set(&self, seq_len: usize) -> Vec<TrainRecord> {
        self.records(1, self.spec.test_records, seq_len)
    }
}
