//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ModelParams};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Path and flat index of the coordinate with the largest error.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Which coordinates to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coordinates {
    All,
    Sample { count: usize, seed: u64 },
}

/// Compares the analytic gradient of `f` with central differences.
///
/// The error of one coordinate is `|analytic - numeric| / max(1, |numeric|)`.
/// Padding rows of padded tables are skipped: their gradient is masked by
/// construction.
pub fn grad_check<F>(params: &ModelParams, f: F, step: f64, coords: Coordinates) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&step) {
        return Err(Error::InvalidArgument(format!("step {step} outside [1e-6, 1e-3]")));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let root = f(&mut tape, &bound)?;
    if !tape.value(root).all_finite() {
        return Err(Error::NonFinite {
            location: "objective at the unperturbed point".into(),
        });
    }
    let grads = tape.backward(root)?;

    let mut candidates: Vec<(String, usize)> = Vec::new();
    for (path, p) in params.iter() {
        for i in 0..p.tensor.len() {
            if !p.is_frozen(i) {
                candidates.push((path.to_string(), i));
            }
        }
    }
    let chosen: Vec<(String, usize)> = match coords {
        Coordinates::All => candidates,
        Coordinates::Sample { count, seed } if count < candidates.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, candidates.len(), count).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| candidates[i].clone()).collect()
        }
        Coordinates::Sample { .. } => candidates,
    };

    let eval = |p: &ModelParams, path: &str, i: usize| -> Result<f64> {
        let mut t = Tape::new();
        let b = p.bind(&mut t);
        let r = f(&mut t, &b)?;
        let v = t.value(r).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite {
                location: format!("objective with {path}[{i}] perturbed"),
            });
        }
        Ok(v)
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (path, i) in &chosen {
        let analytic = grads.get(bound.var(path)?).map_or(0.0, |g| g[*i]);
        let orig = work.get(path)?.data()[*i];
        work.get_mut(path)?.data_mut()[*i] = orig + step;
        let plus = eval(&work, path, *i)?;
        work.get_mut(path)?.data_mut()[*i] = orig - step;
        let minus = eval(&work, path, *i)?;
        work.get_mut(path)?.data_mut()[*i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst = Some((path.clone(), *i));
        }
        report.checked += 1;
    }
    Ok(report)
}
