//! Prediction head, loss and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{nll, Tape, Var};
use crate::params::{BoundParams, ParamSpec};

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut widths = vec![4 * cfg.d_common];
    widths.extend(&cfg.head_hidden);
    widths.push(1);
    widths
        .windows(2)
        .enumerate()
        .flat_map(|(j, w)| {
            [
                ParamSpec::normal(format!("head.{j}.w"), vec![w[1], w[0]], cfg.init_std),
                ParamSpec::normal(format!("head.{j}.b"), vec![w[1]], cfg.init_std),
            ]
        })
        .collect()
}

/// `sigmoid(MLP(u ‖ e_s ‖ b_c ‖ e_o))` with GELU between layers. All inputs
/// are `[B, d2]`; returns `[B, 1]`.
pub fn predict(tape: &mut Tape, p: &BoundParams, u: Var, e_s: Var, b_c: Var, e_o: Var, cfg: &ModelConfig) -> Result<Var> {
    let mut h = tape.concat_last(&[u, e_s, b_c, e_o])?;
    let layers = cfg.head_hidden.len() + 1;
    for j in 0..layers {
        h = tape.linear(h, p.var(&format!("head.{j}.w"))?)?;
        h = tape.add(h, p.var(&format!("head.{j}.b"))?)?;
        if j + 1 < layers {
            h = tape.gelu(h);
        }
    }
    Ok(tape.sigmoid(h))
}

/// Mean negative log-likelihood of `yhat [B, 1]` against `labels`.
pub fn nll_loss(tape: &mut Tape, yhat: Var, labels: &[f64]) -> Result<Var> {
    tape.nll_loss(yhat, labels)
}

/// Probability that a random positive outscores a random negative, ties
/// counted half, via average ranks.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&y| y > 0.5).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument(
            "AUC needs at least one positive and one negative label".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite {
            location: "AUC scores".into(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tied block i..=j shares the average rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] > 0.5 {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub logloss: f64,
    pub n: usize,
}

impl Metrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Pooled scores and labels; shards merge by concatenation.
#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    pub scores: Vec<f64>,
    pub labels: Vec<f64>,
}

impl MetricsAccumulator {
    pub fn push(&mut self, scores: &[f64], labels: &[f64]) {
        self.scores.extend_from_slice(scores);
        self.labels.extend_from_slice(labels);
    }

    pub fn merge(&mut self, other: MetricsAccumulator) {
        self.scores.extend(other.scores);
        self.labels.extend(other.labels);
    }

    pub fn finish(&self) -> Result<Metrics> {
        if self.scores.is_empty() {
            return Err(Error::InvalidArgument("no records".into()));
        }
        Ok(Metrics {
            auc: auc(&self.scores, &self.labels)?,
            logloss: nll(&self.scores, &self.labels),
            n: self.scores.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gelu, sigmoid, Tensor};
    use crate::params::ModelParams;
    use proptest::prelude::*;

    fn brute_auc(s: &[f64], y: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] > 0.5 && y[j] < 0.5 {
                    den += 1.0;
                    num += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_basics() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 1.0);
        assert!(auc(&[0.1, 0.2], &[1.0, 1.0]).is_err());
        let s = [0.3, 0.3, 0.9, 0.1, 0.5, 0.3];
        let y = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        assert_eq!(auc(&s, &y).unwrap(), brute_auc(&s, &y));
    }

    #[test]
    fn auc_of_independent_labels_is_half() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let s: Vec<f64> = (0..20_000).map(|_| rng.gen()).collect();
        let y: Vec<f64> = (0..20_000).map(|_| f64::from(rng.gen::<bool>())).collect();
        assert!((auc(&s, &y).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn zero_head_predicts_half() {
        let cfg = ModelConfig {
            d_common: 2,
            micro_depth: 1,
            ..ModelConfig::default()
        };
        let mut params = ModelParams::new();
        for s in param_specs(&cfg) {
            params.insert(s.path.clone(), Tensor::zeros(&s.shape), false);
        }
        let mut t = Tape::new();
        let p = params.bind(&mut t);
        let x = t.constant(Tensor::ones(&[3, 2]));
        let y = predict(&mut t, &p, x, x, x, x, &cfg).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn one_hidden_unit_hand_case() {
        let cfg = ModelConfig {
            d_common: 1,
            micro_depth: 1,
            head_hidden: vec![1],
            ..ModelConfig::default()
        };
        let mut params = ModelParams::new();
        params.insert("head.0.w", Tensor::matrix(1, 4, vec![1.0, -1.0, 0.5, 2.0]).unwrap(), false);
        params.insert("head.0.b", Tensor::vector(vec![0.1]), false);
        params.insert("head.1.w", Tensor::matrix(1, 1, vec![3.0]).unwrap(), false);
        params.insert("head.1.b", Tensor::vector(vec![-0.2]), false);
        let run = |params: &ModelParams| {
            let mut t = Tape::new();
            let p = params.bind(&mut t);
            let u = t.constant(Tensor::matrix(1, 1, vec![0.2]).unwrap());
            let e = t.constant(Tensor::matrix(1, 1, vec![0.4]).unwrap());
            let y = predict(&mut t, &p, u, e, u, e, &cfg).unwrap();
            t.value(y).data()[0]
        };
        let z = 0.2 - 0.4 + 0.5 * 0.2 + 2.0 * 0.4 + 0.1;
        assert_eq!(run(&params), sigmoid(3.0 * gelu(z) - 0.2));
        let mut bumped = params.clone();
        bumped.get_mut("head.1.b").unwrap().data_mut()[0] += 0.5;
        assert!(run(&bumped) > run(&params));
    }

    #[test]
    fn loss_hand_cases() {
        assert!((nll(&[0.5; 4], &[1.0, 0.0, 1.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(nll(&[1.0, 0.0], &[1.0, 0.0]) < 1e-11);
        let want = -((0.9f64).ln() + (1.0 - 0.2f64).ln() + (0.4f64).ln()) / 3.0;
        assert!((nll(&[0.9, 0.2, 0.4], &[1.0, 0.0, 1.0]) - want).abs() < 1e-15);
        let mut t = Tape::new();
        let y = t.constant(Tensor::vector(vec![0.5]));
        assert!(nll_loss(&mut t, y, &[]).is_err());
    }

    #[test]
    fn metrics_json_and_empty_rejection() {
        let mut acc = MetricsAccumulator::default();
        assert!(acc.finish().unwrap_err().to_string().contains("no records"));
        acc.push(&[0.2, 0.8], &[0.0, 1.0]);
        let mut other = MetricsAccumulator::default();
        other.push(&[0.4], &[1.0]);
        acc.merge(other);
        let m = acc.finish().unwrap();
        assert_eq!(m.n, 3);
        let j: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(j["auc"], 1.0);
        assert_eq!(j["n"], 3);
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(
            s in proptest::collection::vec(-5.0f64..5.0, 8..40),
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut y: Vec<f64> = s.iter().map(|_| f64::from(rng.gen::<bool>())).collect();
            y[0] = 1.0;
            y[1] = 0.0;
            let t: Vec<f64> = s.iter().map(|&x| (2.0 * x).exp() + 3.0).collect();
            prop_assert_eq!(auc(&s, &y).unwrap(), auc(&t, &y).unwrap());
            prop_assert!((auc(&s, &y).unwrap() - brute_auc(&s, &y)).abs() < 1e-12);
        }
    }
}
