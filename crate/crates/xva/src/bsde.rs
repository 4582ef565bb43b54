//! Backward solvers: the linear capital-cost recursion, its nonlinear
//! `max(ES, KVA)` version, the implicit funding fixed point and the
//! replication of counterparty risk (UCVA + MVA + FVA without capital).
//!
//! Funding and margin costs use a deterministic projection: conditional
//! expectations are replaced by cross-path averages over paths where the bank
//! is still alive, and discounting by the survival-weighted mean discount
//! factor of each step.

use serde::{Deserialize, Serialize};

use crate::error::{Result, XvaError};
use crate::market_sim::TimeGrid;
use crate::risk_measure::TermStructure;
use crate::stats;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct KVAInputs {
    pub ec_curve: TermStructure,
    pub rate_curve: TermStructure,
    pub hurdle: f64,
    /// Capital is held until this time; the solution vanishes from there on.
    pub horizon: f64,
}

impl KVAInputs {
    fn validate(&self) -> Result<usize> {
        let n = self.ec_curve.len();
        if n == 0 || self.rate_curve.len() != n || self.rate_curve.times != self.ec_curve.times {
            return Err(XvaError::Argument("capital and rate curves must share a nonempty grid".into()));
        }
        if !(self.hurdle >= 0.0) || !self.hurdle.is_finite() {
            return Err(XvaError::Argument(format!("hurdle rate {} must be nonnegative", self.hurdle)));
        }
        let t = &self.ec_curve.times;
        Ok(t.partition_point(|&x| x < self.horizon - 1e-9).min(n - 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackwardSolution {
    pub value_curve: TermStructure,
    pub iterations: usize,
    pub residual: f64,
}

impl BackwardSolution {
    pub fn at0(&self) -> f64 {
        self.value_curve.values[0]
    }
}

/// `K_t = h * int_t^T exp(-int_t^s (r + h)) C_s ds` by the trapezoid rule.
pub fn kva_linear(inputs: &KVAInputs) -> Result<BackwardSolution> {
    let end = inputs.validate()?;
    let t = &inputs.ec_curve.times;
    let c = &inputs.ec_curve.values;
    let r = &inputs.rate_curve.values;
    let h = inputs.hurdle;
    let mut k = vec![0.0; t.len()];
    for j in (0..end).rev() {
        let dt = t[j + 1] - t[j];
        let d = (-(0.5 * (r[j] + r[j + 1]) + h) * dt).exp();
        k[j] = 0.5 * h * dt * (c[j] + d * c[j + 1]) + d * k[j + 1];
    }
    Ok(BackwardSolution {
        value_curve: TermStructure::new(t.clone(), k)?,
        iterations: 1,
        residual: 0.0,
    })
}

/// KVA with capital `max(ES, KVA)`, by Picard iteration on the linear solver
/// starting from `kva_linear(ES)`.
pub fn kva_bsde(es: &KVAInputs, tol: f64, max_iter: usize) -> Result<BackwardSolution> {
    if !(tol > 0.0) {
        return Err(XvaError::Argument("tolerance must be positive".into()));
    }
    let mut cur = kva_linear(es)?;
    let mut step = es.clone();
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        step.ec_curve = es.ec_curve.max_with(&cur.value_curve);
        let next = kva_linear(&step)?;
        residual = next
            .value_curve
            .values
            .iter()
            .zip(&cur.value_curve.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()));
        let scale = next.value_curve.sup_norm();
        cur = next;
        if residual <= tol * scale || residual == 0.0 {
            cur.iterations = it;
            cur.residual = residual;
            return Ok(cur);
        }
    }
    Err(XvaError::Convergence {
        solver: "kva_bsde",
        iterations: max_iter,
        residual,
    })
}

/// Survival-conditioned cross-path averages on a primary grid.
#[derive(Debug, Clone)]
pub struct Projection {
    pub n_paths: usize,
    pub times: Vec<f64>,
    /// Values are zero from this index on.
    pub end_index: usize,
    /// Bank alive flags, path-major.
    pub alive: Vec<bool>,
    /// `E[exp(-r_k dt) 1{alive at k+1} | alive at k]` per step.
    pub growth: Vec<f64>,
}

impl Projection {
    /// `rate` and `alive` are path-major on `grid`.
    pub fn new(grid: &TimeGrid, end_index: usize, rate: &[f64], alive: Vec<bool>) -> Result<Self> {
        let nt = grid.len();
        if nt == 0 || !rate.len().is_multiple_of(nt) || alive.len() != rate.len() || end_index >= nt {
            return Err(XvaError::Argument("projection inputs do not match the grid".into()));
        }
        let n_paths = rate.len() / nt;
        let times = grid.times().to_vec();
        let mut growth = vec![1.0; nt];
        for k in 0..nt - 1 {
            let dt = times[k + 1] - times[k];
            let mut num = Vec::with_capacity(n_paths);
            let mut den = 0usize;
            for p in 0..n_paths {
                if alive[p * nt + k] {
                    den += 1;
                    num.push(if alive[p * nt + k + 1] { (-rate[p * nt + k] * dt).exp() } else { 0.0 });
                }
            }
            growth[k] = if den > 0 { stats::pairwise_sum(&num) / den as f64 } else { 0.0 };
        }
        Ok(Self {
            n_paths,
            times,
            end_index,
            alive,
            growth,
        })
    }

    /// A projection with every path alive throughout.
    pub fn riskless(grid: &TimeGrid, end_index: usize, rate: &[f64]) -> Result<Self> {
        Self::new(grid, end_index, rate, vec![true; rate.len()])
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    /// Mean of `f(p)` over paths alive at `k` (0 if none are).
    pub fn cond_mean(&self, k: usize, f: impl Fn(usize) -> f64) -> f64 {
        let nt = self.n_times();
        let v: Vec<f64> = (0..self.n_paths).filter(|&p| self.alive[p * nt + k]).map(f).collect();
        stats::mean(&v)
    }

    /// Deterministic short-rate curve reproducing the survival-weighted discounting.
    pub fn implied_rate_curve(&self) -> TermStructure {
        let nt = self.n_times();
        let mut r = vec![0.0; nt];
        for k in 0..nt - 1 {
            let dt = self.times[k + 1] - self.times[k];
            r[k] = if self.growth[k] > 0.0 { -self.growth[k].ln() / dt } else { 0.0 };
        }
        if nt > 1 {
            r[nt - 1] = r[nt - 2];
        }
        TermStructure {
            times: self.times.clone(),
            values: r,
        }
    }

    /// `V_k = growth_k V_{k+1} + dt E[g_k | alive_k]` with `g` path-major.
    pub fn linear_backward(&self, g: &[f64]) -> Result<BackwardSolution> {
        let nt = self.n_times();
        if g.len() != self.n_paths * nt {
            return Err(XvaError::Argument("integrand does not match the projection".into()));
        }
        let mut v = vec![0.0; nt];
        for k in (0..self.end_index).rev() {
            let dt = self.times[k + 1] - self.times[k];
            v[k] = self.growth[k] * v[k + 1] + dt * self.cond_mean(k, |p| g[p * nt + k]);
        }
        Ok(BackwardSolution {
            value_curve: TermStructure::new(self.times.clone(), v)?,
            iterations: 1,
            residual: 0.0,
        })
    }
}

/// Funding valuation `F_k = growth_k F_{k+1} + dt E[lambda (N - EC_k - F_k)^+ | alive_k]`,
/// with the left-point `F_k` resolved by Picard iteration.
///
/// `need` holds the funding need before capital and FVA, `lambda` the
/// unsecured spread, both path-major.
pub fn fva_fixed_point(proj: &Projection, need: &[f64], ec: &TermStructure, lambda: &[f64], tol: f64, max_iter: usize) -> Result<BackwardSolution> {
    let nt = proj.n_times();
    if need.len() != proj.n_paths * nt || lambda.len() != need.len() || ec.len() != nt {
        return Err(XvaError::Argument("funding inputs do not match the projection".into()));
    }
    let mut f = vec![0.0; nt];
    let mut iterations = 0;
    let mut worst = 0.0f64;
    let mut rows: Vec<(f64, f64)> = Vec::with_capacity(proj.n_paths);
    for k in (0..proj.end_index).rev() {
        let dt = proj.times[k + 1] - proj.times[k];
        rows.clear();
        for p in 0..proj.n_paths {
            if proj.alive[p * nt + k] {
                let i = p * nt + k;
                rows.push((lambda[i], need[i] - ec.values[k]));
            }
        }
        if rows.is_empty() {
            f[k] = proj.growth[k] * f[k + 1];
            continue;
        }
        let carry = proj.growth[k] * f[k + 1];
        let eval = |x: f64| {
            let v: Vec<f64> = rows.iter().map(|(l, n)| l * (n - x).max(0.0)).collect();
            carry + dt * stats::mean(&v)
        };
        let mut x = carry;
        let mut converged = false;
        let mut res = f64::INFINITY;
        for it in 1..=max_iter {
            let y = eval(x);
            res = (y - x).abs();
            x = y;
            iterations = iterations.max(it);
            if res <= tol * x.abs().max(1e-300) || res == 0.0 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(XvaError::Convergence {
                solver: "fva_fixed_point",
                iterations: max_iter,
                residual: res,
            });
        }
        worst = worst.max(res);
        f[k] = x;
    }
    Ok(BackwardSolution {
        value_curve: TermStructure::new(proj.times.clone(), f)?,
        iterations,
        residual: worst,
    })
}

/// Path-wise funding recursion, discounting with each path's own rate and
/// stopping at the bank's default. Diagnostic only; path-major output.
pub fn fva_per_path(proj: &Projection, rate: &[f64], need: &[f64], ec: &TermStructure, lambda: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let nt = proj.n_times();
    if rate.len() != proj.n_paths * nt || need.len() != rate.len() || lambda.len() != rate.len() {
        return Err(XvaError::Argument("funding inputs do not match the projection".into()));
    }
    let mut out = vec![0.0; rate.len()];
    for p in 0..proj.n_paths {
        for k in (0..proj.end_index).rev() {
            let i = p * nt + k;
            if !proj.alive[i] {
                continue;
            }
            let dt = proj.times[k + 1] - proj.times[k];
            let carry = (-rate[i] * dt).exp() * out[i + 1];
            let target = need[i] - ec.values[k];
            let mut x = carry;
            let mut ok = false;
            for _ in 0..max_iter {
                let y = carry + dt * lambda[i] * (target - x).max(0.0);
                let done = (y - x).abs() <= tol * y.abs().max(1e-300);
                x = y;
                if done {
                    ok = true;
                    break;
                }
            }
            if !ok {
                return Err(XvaError::Convergence {
                    solver: "fva_per_path",
                    iterations: max_iter,
                    residual: f64::NAN,
                });
            }
            out[i] = x;
        }
    }
    Ok(out)
}

/// Path-major inputs of the counterparty-risk replication.
#[derive(Debug, Clone, Copy)]
pub struct ReplicationInputs<'a> {
    /// Sum of spot exposures `P` over sets with a live counterparty.
    pub exposure_sum: &'a [f64],
    /// UCVA of the live sets along each path.
    pub ucva: &'a [f64],
    pub mva_integrand: &'a [f64],
    pub lambda: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub ucva: TermStructure,
    pub mva: BackwardSolution,
    pub fva: BackwardSolution,
    pub trc: TermStructure,
}

/// Funding need `sum P - UCVA - MVA` per path and time.
pub fn funding_need(proj: &Projection, inputs: &ReplicationInputs, mva: &TermStructure) -> Vec<f64> {
    let nt = proj.n_times();
    (0..inputs.exposure_sum.len())
        .map(|i| inputs.exposure_sum[i] - inputs.ucva[i] - mva.values[i % nt])
        .collect()
}

/// Capital-free target reserve: projected UCVA, MVA and FVA with `EC = 0`.
pub fn replication_bsde(proj: &Projection, inputs: &ReplicationInputs, tol: f64, max_iter: usize) -> Result<Replication> {
    let nt = proj.n_times();
    let n = proj.n_paths * nt;
    if [inputs.exposure_sum, inputs.ucva, inputs.mva_integrand, inputs.lambda].iter().any(|v| v.len() != n) {
        return Err(XvaError::Argument("replication inputs do not match the projection".into()));
    }
    let ucva = TermStructure::new(proj.times.clone(), (0..nt).map(|k| proj.cond_mean(k, |p| inputs.ucva[p * nt + k])).collect())?;
    let mva = proj.linear_backward(inputs.mva_integrand)?;
    let need = funding_need(proj, inputs, &mva.value_curve);
    let fva = fva_fixed_point(proj, &need, &TermStructure::new(proj.times.clone(), vec![0.0; nt])?, inputs.lambda, tol, max_iter)?;
    let trc = (0..nt).map(|k| ucva.values[k] + mva.value_curve.values[k] + fva.value_curve.values[k]).collect();
    Ok(Replication {
        trc: TermStructure::new(proj.times.clone(), trc)?,
        ucva,
        mva,
        fva,
    })
}
