//! Minibatch Adam training and evaluation.

use std::path::PathBuf;
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{parse, parse_kv, BdmVariant, ModelConfig};
use crate::data::{filter_exposures, ingest_path, Generator, Schema, SynthSpec, TrainRecord};
use crate::embedding::Batch;
use crate::error::{Error, Result};
use crate::flops::flop_estimate;
use crate::model::{init_params, loss, param_count, predict_batch, Mode};
use crate::numerics::Tape;
use crate::params::ModelParams;
use crate::predictor::{Metrics, MetricsAccumulator};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synth(SynthSpec),
    Files {
        train: PathBuf,
        test: Option<PathBuf>,
        schema: Schema,
        strict: bool,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    /// Evaluates on the test set every this many steps when set.
    pub eval_every: Option<usize>,
    /// Shuffling and Gumbel noise; the model has its own init seed.
    pub seed: u64,
    pub data: DataSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 256,
            epochs: 5,
            max_steps: None,
            eval_every: None,
            seed: 0,
            data: DataSource::Synth(SynthSpec::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("Adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }

    /// Applies one `key = value` setting to the trainer, the generator
    /// settings or the model, in that order. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "steps" => self.max_steps = Some(parse(key, value)?),
            "eval_every" => self.eval_every = Some(parse(key, value)?),
            "train_seed" => self.seed = parse(key, value)?,
            _ => {
                if key.starts_with("synth.") {
                    let DataSource::Synth(spec) = &mut self.data else {
                        return Err(Error::Config(format!("`{key}` needs a synthetic data source")));
                    };
                    if spec.set(key, value)? {
                        return Ok(());
                    }
                } else if self.model.set(key, value)? {
                    return Ok(());
                }
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
        }
        Ok(())
    }

    /// Applies every setting of a key-value file.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (line, k, v) in parse_kv(text)? {
            self.set(&k, &v)
                .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "lr = {:?}\nbeta1 = {:?}\nbeta2 = {:?}\neps = {:?}\nbatch_size = {}\nepochs = {}\ntrain_seed = {}\n",
            self.lr, self.beta1, self.beta2, self.eps, self.batch_size, self.epochs, self.seed
        );
        if let Some(n) = self.max_steps {
            s += &format!("steps = {n}\n");
        }
        if let Some(n) = self.eval_every {
            s += &format!("eval_every = {n}\n");
        }
        s += &self.model.to_kv();
        if let DataSource::Synth(spec) = &self.data {
            s += &spec.to_kv();
        }
        s
    }

    /// Sizes the model's situational vocabularies to the data source, and
    /// every vocabulary for synthetic data.
    pub fn resolve_vocab(&mut self) {
        match &self.data {
            DataSource::Synth(spec) => spec.apply_vocab(&mut self.model),
            DataSource::Files { schema, .. } => schema.apply_vocab(&mut self.model),
        }
    }

    /// Loads `(train, test)` after [`TrainConfig::resolve_vocab`].
    pub fn load_data(&mut self) -> Result<(Vec<TrainRecord>, Vec<TrainRecord>)> {
        self.resolve_vocab();
        let (train, test) = match &self.data {
            DataSource::Synth(spec) => {
                let g = Generator::new(spec)?;
                (g.train_set(self.model.seq_len), g.test_set(self.model.seq_len))
            }
            DataSource::Files {
                train,
                test,
                schema,
                strict,
            } => {
                let (tr, _) = ingest_path(train, schema, &self.model, *strict)?;
                let te = match test {
                    Some(p) => ingest_path(p, schema, &self.model, *strict)?.0,
                    None => Vec::new(),
                };
                (tr, te)
            }
        };
        Ok((prepare(&self.model, train), prepare(&self.model, test)))
    }
}

/// Applies data-level ablations (the exposure filter) to records.
pub fn prepare(cfg: &ModelConfig, records: Vec<TrainRecord>) -> Vec<TrainRecord> {
    match cfg.ablation.bdm {
        BdmVariant::KeepExposures(x) => records
            .iter()
            .map(|r| filter_exposures(r, x, cfg.behavior_field))
            .collect(),
        _ => records,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalPoint {
    pub step: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    /// Mean training loss of each epoch (partial epochs included).
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    /// Final test metrics; absent without test data.
    pub test: Option<Metrics>,
    pub steps: usize,
    pub wall_seconds: f64,
    pub param_count: usize,
    pub flops_per_example: u64,
}

/// First and second moment estimates per parameter array.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let moments = params
            .iter()
            .map(|(_, p)| (vec![0.0; p.tensor.len()], vec![0.0; p.tensor.len()]))
            .collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            moments,
        }
    }

    /// One bias-corrected update; `grads` follows `params.iter()` order.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((_, p), (m, v)), g) in params.iter_mut().zip(&mut self.moments).zip(grads) {
            let frozen = if p.padded { p.tensor.last_dim() } else { 0 };
            let data = p.tensor.data_mut();
            for i in frozen..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                data[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

fn norm_report(params: &ModelParams) -> String {
    params
        .iter()
        .map(|(k, p)| format!("{k}={:.4e}", p.tensor.norm()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Loss and per-array gradients of one batch.
pub fn loss_and_grads(params: &ModelParams, batch: &Batch, cfg: &ModelConfig, seed: u64) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let (l, _) = loss(&mut tape, &p, batch, cfg, Mode::Train { seed })?;
    let value = tape.value(l).data()[0];
    let g = tape.backward(l)?;
    let grads = params
        .iter()
        .map(|(path, q)| Ok(g.get_or_zeros(p.var(path)?, q.tensor.len())))
        .collect::<Result<Vec<_>>>()?;
    Ok((value, grads))
}

/// Gumbel seed of one optimizer step.
fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64).wrapping_add(1)
}

/// Scores `records` in evaluation mode using scoped worker threads; each
/// shard accumulates separately and the shards are merged in order.
pub fn evaluate(params: &ModelParams, records: &[TrainRecord], cfg: &ModelConfig, batch_size: usize) -> Result<Metrics> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    let shard = records.len().div_ceil(workers).max(1);
    let parts: Vec<Result<MetricsAccumulator>> = std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(shard)
            .map(|chunk| {
                s.spawn(move || {
                    let mut acc = MetricsAccumulator::default();
                    for b in chunk.chunks(batch_size.max(1)) {
                        let batch = Batch::from_records(b, cfg)?;
                        acc.push(&predict_batch(params, &batch, cfg)?, &batch.labels);
                    }
                    Ok(acc)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
    });
    let mut acc = MetricsAccumulator::default();
    for p in parts {
        acc.merge(p?);
    }
    acc.finish()
}

/// Trains from `params` on prepared records. Batches are assembled one step
/// ahead on a loader thread.
pub fn train_from(
    cfg: &TrainConfig,
    mut params: ModelParams,
    train: &[TrainRecord],
    test: &[TrainRecord],
) -> Result<(RunReport, ModelParams)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("no records to train on".into()));
    }
    let start = Instant::now();
    let m = &cfg.model;
    let mut adam = Adam::new(&params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let count = params.numel();
    let mut report = RunReport {
        epoch_losses: Vec::new(),
        step_losses: Vec::new(),
        evals: Vec::new(),
        test: None,
        steps: 0,
        wall_seconds: 0.0,
        param_count: count,
        flops_per_example: flop_estimate(m).total(),
    };
    let budget = cfg.max_steps.unwrap_or(usize::MAX);
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        if step >= budget {
            break;
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407)));
        let (tx, rx) = sync_channel::<Result<Batch>>(2);
        let outcome = std::thread::scope(|s| -> Result<bool> {
            let order = &order;
            s.spawn(move || {
                for idx in order.chunks(cfg.batch_size) {
                    let batch = Batch::from_records(idx.iter().map(|&i| &train[i]), m);
                    if tx.send(batch).is_err() {
                        break;
                    }
                }
            });
            let (mut sum, mut n) = (0.0, 0usize);
            let mut stopped = false;
            for batch in rx.iter() {
                let batch = batch?;
                let (l, grads) = loss_and_grads(&params, &batch, m, step_seed(cfg.seed, step))?;
                if !l.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        norms: norm_report(&params),
                    });
                }
                adam.step(&mut params, &grads);
                step += 1;
                report.step_losses.push(l);
                sum += l * batch.size as f64;
                n += batch.size;
                if let Some(every) = cfg.eval_every.filter(|&e| e > 0) {
                    if step % every == 0 && !test.is_empty() {
                        let metrics = evaluate(&params, test, m, cfg.batch_size)?;
                        report.evals.push(EvalPoint { step, metrics });
                    }
                }
                if step >= budget {
                    stopped = true;
                    break;
                }
            }
            // dropping the receiver unblocks the loader
            drop(rx);
            report.epoch_losses.push(sum / n.max(1) as f64);
            Ok(stopped)
        })?;
        if outcome {
            break 'epochs;
        }
    }
    report.steps = step;
    if !test.is_empty() {
        report.test = Some(evaluate(&params, test, m, cfg.batch_size)?);
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    debug_assert_eq!(params.numel(), param_count(m).total());
    Ok((report, params))
}

/// Loads data, initializes from `cfg.model.seed` and trains.
pub fn train(cfg: &TrainConfig) -> Result<(RunReport, ModelParams)> {
    let mut cfg = cfg.clone();
    let (tr, te) = cfg.load_data()?;
    let params = init_params(&cfg.model)?;
    train_from(&cfg, params, &tr, &te)
}
