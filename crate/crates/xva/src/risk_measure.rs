//! Survival-conditioned value at risk and expected shortfall of one-year loss
//! increments, and the deterministic ES term structure built from them.
//!
//! The tail set is `{X >= VaR}` as a set of sample atoms, so with atoms the
//! tail mass can fall short of `alpha` by at most one atom's weight. No
//! interpolation of the boundary atom is done.

use serde::{Deserialize, Serialize};

use crate::error::{Result, XvaError};
use crate::market_sim::TimeGrid;

pub const DEFAULT_ALPHA: f64 = 0.025;
pub const DEFAULT_MIN_SURVIVING: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint {
    pub increment: f64,
    pub survived: bool,
    pub weight: f64,
}

/// Weighted sample of loss increments with bank-survival flags.
///
/// Weights need only be positive; they are normalized internally.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConditionalSample {
    pub points: Vec<SamplePoint>,
    pub anchor_time: f64,
}

impl ConditionalSample {
    /// Equal-weight sample.
    pub fn uniform(increments: &[f64], survived: &[bool], anchor_time: f64) -> Self {
        assert_eq!(increments.len(), survived.len());
        let w = 1.0 / increments.len().max(1) as f64;
        Self {
            points: increments
                .iter()
                .zip(survived)
                .map(|(&increment, &survived)| SamplePoint { increment, survived, weight: w })
                .collect(),
            anchor_time,
        }
    }

    pub fn all_survived(increments: &[f64]) -> Self {
        Self::uniform(increments, &vec![true; increments.len()], 0.0)
    }

    pub fn n_surviving(&self) -> usize {
        self.points.iter().filter(|p| p.survived).count()
    }

    fn surviving_sorted(&self) -> Result<(Vec<(f64, f64)>, f64)> {
        let mut v = Vec::with_capacity(self.points.len());
        for p in &self.points {
            if !(p.weight > 0.0) || !p.weight.is_finite() || !p.increment.is_finite() {
                return Err(XvaError::Estimation("sample weights must be positive and values finite".into()));
            }
            if p.survived {
                v.push((p.increment, p.weight));
            }
        }
        if v.is_empty() {
            return Err(XvaError::Estimation("no surviving samples".into()));
        }
        // descending by value
        v.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mass = v.iter().map(|x| x.1).sum();
        Ok((v, mass))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(XvaError::Argument(format!("tail probability {alpha} outside (0, 1)")))
    }
}

fn var_of_sorted(v: &[(f64, f64)], mass: f64, alpha: f64) -> f64 {
    let limit = alpha * mass * (1.0 + 1e-12);
    let mut var = v[0].0;
    let mut tail = 0.0;
    let mut i = 0;
    while i < v.len() {
        let x = v[i].0;
        let mut j = i;
        while j < v.len() && v[j].0 == x {
            tail += v[j].1;
            j += 1;
        }
        if tail > limit {
            break;
        }
        var = x;
        i = j;
    }
    var
}

/// Smallest sample value `l` with `P(X >= l, survived) / P(survived) <= alpha`.
/// When even the largest value carries more than `alpha`, that value is returned.
pub fn conditional_var(sample: &ConditionalSample, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let (v, mass) = sample.surviving_sorted()?;
    Ok(var_of_sorted(&v, mass, alpha))
}

/// Mean of the surviving increments at or above the conditional VaR.
pub fn conditional_es(sample: &ConditionalSample, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let (v, mass) = sample.surviving_sorted()?;
    let var = var_of_sorted(&v, mass, alpha);
    let (mut num, mut den) = (0.0, 0.0);
    // centred at VaR so that ES >= VaR holds in floating point too
    for &(x, w) in v.iter().take_while(|(x, _)| *x >= var) {
        num += w * (x - var);
        den += w;
    }
    Ok(var + num / den)
}

/// Grid-aligned deterministic curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermStructure {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl TermStructure {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(XvaError::Argument("term structure length does not match its grid".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(XvaError::Argument("term structure values must be finite".into()));
        }
        Ok(Self { times, values })
    }

    pub fn constant(grid: &TimeGrid, c: f64) -> Self {
        Self {
            times: grid.times().to_vec(),
            values: vec![c; grid.len()],
        }
    }

    pub fn zeros(grid: &TimeGrid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Pointwise maximum with another curve on the same grid.
    pub fn max_with(&self, other: &TermStructure) -> TermStructure {
        TermStructure {
            times: self.times.clone(),
            values: self.values.iter().zip(&other.values).map(|(a, b)| a.max(*b)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EsOptions {
    pub alpha: f64,
    pub min_surviving: usize,
}

impl Default for EsOptions {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            min_surviving: DEFAULT_MIN_SURVIVING,
        }
    }
}

/// ES curve from pooled one-year increments per grid point.
///
/// `pools[k]` is `None` where no one-year window exists; those points and any
/// after the last computed one take the last computed value. Warnings are
/// returned for thin or empty surviving samples; an empty one yields 0.
pub fn es_term_structure(grid: &TimeGrid, pools: &[Option<ConditionalSample>], opts: EsOptions) -> Result<(TermStructure, Vec<String>)> {
    if pools.len() != grid.len() {
        return Err(XvaError::Argument("one pool per grid point expected".into()));
    }
    check_alpha(opts.alpha)?;
    let mut warnings = Vec::new();
    let mut values = vec![f64::NAN; grid.len()];
    for (k, pool) in pools.iter().enumerate() {
        let Some(sample) = pool else { continue };
        let t = grid.times()[k];
        let n = sample.n_surviving();
        if n == 0 {
            warnings.push(format!("ES at t={t}: no surviving samples, set to 0"));
            values[k] = 0.0;
            continue;
        }
        if n < opts.min_surviving {
            warnings.push(format!("ES at t={t}: only {n} surviving samples"));
        }
        values[k] = conditional_es(sample, opts.alpha)?;
    }
    let mut last = 0.0;
    for v in values.iter_mut() {
        if v.is_nan() {
            *v = last;
        } else {
            last = *v;
        }
    }
    Ok((TermStructure::new(grid.times().to_vec(), values)?, warnings))
}
