use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::Var;
use super::params::{ParamStore, Session};
use crate::error::{Error, Result};

/// Which coordinates a gradient check visits.
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Randomly sampled coordinates over all unfrozen parameters.
    pub samples: usize,
    /// Parameters checked at every coordinate, in addition to the sample.
    pub include: Vec<String>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-3,
            samples: 500,
            include: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoordinateCheck {
    pub path: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checks: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// Frozen parameters are never visited. `f` must build the same
/// computation every time it is called; two evaluations at the unperturbed
/// point that differ in any bit are reported as a contract error.
pub fn grad_check<F>(f: F, params: &ParamStore<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<'_, f64>) -> Result<Var>,
{
    if opts.epsilon <= 0.0 {
        return Err(Error::arg("epsilon must be positive"));
    }
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut s = Session::inference(store);
        let loss = f(&mut s)?;
        s.graph.value(loss).item()
    };

    let (base, analytic) = {
        let mut s = Session::training(params);
        let loss = f(&mut s)?;
        let grads = s.backward(loss)?;
        (s.graph.value(loss).item()?, s.param_grads(&grads))
    };
    if eval(params)?.to_bits() != base.to_bits() {
        return Err(Error::contract("function under check is not deterministic"));
    }
    let analytic: std::collections::HashMap<String, Vec<f64>> = analytic.into_iter().collect();

    let trainable: Vec<(&str, usize)> = params
        .iter()
        .filter(|(p, _)| !params.is_frozen(p))
        .map(|(p, t)| (p, t.numel()))
        .collect();
    let total: usize = trainable.iter().map(|(_, n)| n).sum();

    let mut coords: Vec<(String, usize)> = Vec::new();
    for path in &opts.include {
        if params.is_frozen(path) {
            continue;
        }
        let n = params.get(path)?.numel();
        coords.extend((0..n).map(|i| (path.clone(), i)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut picks = sample(&mut rng, total, opts.samples.min(total)).into_vec();
    picks.sort_unstable();
    let mut offset = 0;
    let mut it = picks.into_iter().peekable();
    for (path, n) in &trainable {
        while let Some(&flat) = it.peek() {
            if flat >= offset + n {
                break;
            }
            let c = (path.to_string(), flat - offset);
            if !coords.contains(&c) {
                coords.push(c);
            }
            it.next();
        }
        offset += n;
    }

    let mut work = params.clone();
    let mut checks = Vec::with_capacity(coords.len());
    for (path, index) in coords {
        let orig = work.get(&path)?.data()[index];
        let h = opts.epsilon;
        let mut at = |offset: f64| -> Result<f64> {
            work.get_mut(&path)?.data_mut()[index] = orig + offset;
            eval(&work)
        };
        // five-point central stencil: truncation error O(h^4)
        let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
        work.get_mut(&path)?.data_mut()[index] = orig;
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
        let a = analytic.get(&path).map_or(0.0, |g| g[index]);
        checks.push(CoordinateCheck {
            rel_error: rel_error(a, numeric),
            path,
            index,
            analytic: a,
            numeric,
        });
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        checks,
    })
}
