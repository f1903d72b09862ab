//! wasm-bindgen entry points for `www/index.html`.

use wasm_bindgen::prelude::*;

use dsain::bdm::{gumbel_noise, soft_select_values};
use dsain::cfm::{Partition, SegmentMap};
use dsain::config::ModelConfig;
use dsain::data::{Generator, SynthSpec, TrainRecord};
use dsain::embedding::Batch;
use dsain::model::{init_params, predict_batch};
use dsain::params::ModelParams;
use dsain::predictor::auc;
use dsain::train::{loss_and_grads, prepare, Adam};

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Histogram of Gumbel keep factors for one keep probability, `bins` equal
/// buckets over [0, 1].
#[wasm_bindgen]
pub fn keep_histogram(prob: f64, tau: f64, samples: usize, bins: usize, seed: u64) -> Result<Vec<u32>, JsError> {
    histogram(prob, tau, samples, bins, seed).map_err(js_err)
}

fn histogram(prob: f64, tau: f64, samples: usize, bins: usize, seed: u64) -> Result<Vec<u32>, String> {
    if !(0.0..=1.0).contains(&prob) || tau <= 0.0 || bins == 0 {
        return Err("need 0 <= prob <= 1, tau > 0 and bins > 0".into());
    }
    let noise = gumbel_noise(seed, samples);
    let keep = soft_select_values(&vec![prob; samples], &noise, tau);
    let mut hist = vec![0u32; bins];
    for k in keep {
        hist[((k * bins as f64) as usize).min(bins - 1)] += 1;
    }
    Ok(hist)
}

/// Window index of every row under `kind` (`adjacent`, `dilated` or
/// `shifted`); -1 marks rows outside every window.
#[wasm_bindgen]
pub fn partition_owners(kind: &str, len: usize, window: usize) -> Result<Vec<i32>, JsError> {
    owners(kind, len, window).map_err(js_err)
}

fn owners(kind: &str, len: usize, window: usize) -> Result<Vec<i32>, String> {
    let kind = match kind {
        "adjacent" => Partition::Adjacent,
        "dilated" => Partition::Dilated,
        "shifted" => Partition::Shifted,
        other => return Err(format!("unknown partition `{other}`")),
    };
    let map = SegmentMap::new(kind, len, window).map_err(|e| e.to_string())?;
    Ok(map.owner().into_iter().map(|o| o.map_or(-1, |(s, _)| s as i32)).collect())
}

/// A small model trained step by step on synthetic clicks.
#[wasm_bindgen]
pub struct Trainer {
    cfg: ModelConfig,
    params: ModelParams,
    adam: Adam,
    train: Vec<TrainRecord>,
    test: Vec<TrainRecord>,
    batch_size: usize,
    step: usize,
}

#[wasm_bindgen]
impl Trainer {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, signal: f64, lr: f64) -> Result<Trainer, JsError> {
        Trainer::build(seed, signal, lr).map_err(js_err)
    }

    /// Runs `n` optimizer steps and returns their losses.
    pub fn run(&mut self, n: usize) -> Result<Vec<f64>, JsError> {
        self.advance(n).map_err(js_err)
    }

    /// AUC on the held-out records.
    pub fn test_auc(&self) -> Result<f64, JsError> {
        self.score().map_err(js_err)
    }

    pub fn steps(&self) -> usize {
        self.step
    }
}

impl Trainer {
    fn build(seed: u64, signal: f64, lr: f64) -> dsain::Result<Trainer> {
        let spec = SynthSpec {
            users: 50,
            signal_strength: signal,
            train_records: 2000,
            test_records: 500,
            seed,
            ..SynthSpec::default()
        };
        let mut cfg = ModelConfig {
            seq_len: 20,
            window: 5,
            d_common: 4,
            micro_depth: 2,
            mixer_depth: 1,
            seed,
            ..ModelConfig::default()
        };
        spec.apply_vocab(&mut cfg);
        cfg.validate()?;
        let g = Generator::new(&spec)?;
        let train = prepare(&cfg, g.train_set(cfg.seq_len));
        let test = prepare(&cfg, g.test_set(cfg.seq_len));
        let params = init_params(&cfg)?;
        let adam = Adam::new(&params, lr, 0.9, 0.999, 1e-8);
        Ok(Trainer { cfg, params, adam, train, test, batch_size: 32, step: 0 })
    }

    fn advance(&mut self, n: usize) -> dsain::Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(n);
        let per_epoch = self.train.len().div_ceil(self.batch_size);
        for _ in 0..n {
            let b = self.step % per_epoch;
            let end = ((b + 1) * self.batch_size).min(self.train.len());
            let batch = Batch::from_records(&self.train[b * self.batch_size..end], &self.cfg)?;
            let (l, g) = loss_and_grads(&self.params, &batch, &self.cfg, self.cfg.seed ^ self.step as u64)?;
            self.adam.step(&mut self.params, &g);
            self.step += 1;
            losses.push(l);
        }
        Ok(losses)
    }

    fn score(&self) -> dsain::Result<f64> {
        let mut scores = Vec::with_capacity(self.test.len());
        let mut labels = Vec::with_capacity(self.test.len());
        for chunk in self.test.chunks(128) {
            let batch = Batch::from_records(chunk, &self.cfg)?;
            scores.extend(predict_batch(&self.params, &batch, &self.cfg)?);
            labels.extend(&batch.labels);
        }
        auc(&scores, &labels)
    }
}
