//! Nested scenario generation: a mean-reverting Gaussian short rate stepped by
//! Euler, and default times from exponential clocks tied together by a Gaussian
//! copula.
//!
//! Primary paths run under the pricing measure. Secondary sub-paths branch from
//! a primary state, add the historical drift shift to the rate, and redraw the
//! default clocks of entities still alive at the branch time.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XvaError};
use crate::rng;

/// Marker for "no default inside this scenario grid".
pub const NEVER: u32 = u32::MAX;

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(XvaError::Argument("time grid needs at least two points".into()));
        }
        if times[0] != 0.0 {
            return Err(XvaError::Argument("time grid must start at 0".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(XvaError::Argument("time grid must be strictly increasing".into()));
        }
        Ok(Self { times })
    }

    /// Grid `0, step, 2 step, ...` ending exactly at `horizon` (last step may be short).
    pub fn uniform(horizon: f64, step: f64) -> Result<Self> {
        if !(horizon > 0.0) || !(step > 0.0) {
            return Err(XvaError::Argument("horizon and step must be positive".into()));
        }
        let n = (horizon / step - TIME_EPS).ceil() as usize;
        let mut times: Vec<f64> = (0..n).map(|k| k as f64 * step).collect();
        times.push(horizon);
        Self::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    /// First grid index whose time is at or after `t`, if any.
    pub fn index_at_or_after(&self, t: f64) -> Option<usize> {
        let i = self.times.partition_point(|&x| x < t - TIME_EPS);
        (i < self.times.len()).then_some(i)
    }

    /// Sub-grid starting at index `from`.
    pub fn tail(&self, from: usize, to: usize) -> TimeGrid {
        TimeGrid {
            times: self.times[from..=to].to_vec(),
        }
    }
}

/// Piecewise-constant hazard rate. `knots[j]` ends segment `j`; the last
/// segment extends to infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardCurve {
    pub knots: Vec<f64>,
    pub hazards: Vec<f64>,
}

impl HazardCurve {
    pub fn flat(h: f64) -> Self {
        Self {
            knots: vec![f64::INFINITY],
            hazards: vec![h],
        }
    }

    /// Integrated hazard on `[0, t]`.
    pub fn cumulative(&self, t: f64) -> f64 {
        let mut acc = 0.0;
        let mut lo = 0.0;
        for (&k, &h) in self.knots.iter().zip(&self.hazards) {
            if t <= k {
                return acc + h * (t - lo);
            }
            acc += h * (k - lo);
            lo = k;
        }
        acc + self.hazards.last().copied().unwrap_or(0.0) * (t - lo)
    }

    pub fn survival(&self, t: f64) -> f64 {
        (-self.cumulative(t)).exp()
    }

    pub fn hazard_at(&self, t: f64) -> f64 {
        for (&k, &h) in self.knots.iter().zip(&self.hazards) {
            if t < k {
                return h;
            }
        }
        self.hazards.last().copied().unwrap_or(0.0)
    }

    /// Smallest `t` with `cumulative(t) = x`, or infinity.
    pub fn inverse_cumulative(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        let mut lo = 0.0;
        for (&k, &h) in self.knots.iter().zip(&self.hazards) {
            let seg = if k.is_finite() { h * (k - lo) } else { f64::INFINITY };
            if acc + seg >= x {
                return if h > 0.0 { lo + (x - acc) / h } else { f64::INFINITY };
            }
            acc += seg;
            lo = k;
        }
        let h = self.hazards.last().copied().unwrap_or(0.0);
        if h > 0.0 {
            lo + (x - acc) / h
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub r0: f64,
    pub mean_reversion: f64,
    pub rate_vol: f64,
    pub long_term_rate: f64,
    #[serde(default)]
    pub hist_drift_shift: f64,
    /// Entity correlations, counterparties first and the bank last. Empty means independent.
    #[serde(default)]
    pub correlation: Vec<Vec<f64>>,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            r0: 0.02,
            mean_reversion: 0.1,
            rate_vol: 0.01,
            long_term_rate: 0.03,
            hist_drift_shift: 0.0,
            correlation: Vec::new(),
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.r0, self.mean_reversion, self.rate_vol, self.long_term_rate, self.hist_drift_shift];
        if finite.iter().any(|x| !x.is_finite()) {
            return Err(XvaError::ModelConfig("model parameters must be finite".into()));
        }
        if self.rate_vol < 0.0 || self.mean_reversion < 0.0 {
            return Err(XvaError::ModelConfig("rate_vol and mean_reversion must be nonnegative".into()));
        }
        Ok(())
    }

    /// Lower Cholesky factor of the correlation matrix for `n` entities, or
    /// `None` when entities are independent.
    pub fn copula_factor(&self, n: usize) -> Result<Option<Vec<f64>>> {
        let c = &self.correlation;
        if c.is_empty() {
            return Ok(None);
        }
        if c.len() != n || c.iter().any(|row| row.len() != n) {
            return Err(XvaError::ModelConfig(format!("correlation matrix must be {n}x{n}")));
        }
        for i in 0..n {
            if (c[i][i] - 1.0).abs() > 1e-12 {
                return Err(XvaError::ModelConfig("correlation diagonal must be 1".into()));
            }
            for j in 0..n {
                if !(-1.0..=1.0).contains(&c[i][j]) || (c[i][j] - c[j][i]).abs() > 1e-12 {
                    return Err(XvaError::ModelConfig("correlation must be symmetric with entries in [-1, 1]".into()));
                }
            }
        }
        // Cholesky with a small tolerance so that singular PSD matrices pass.
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = c[i][j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s < -1e-10 {
                        return Err(XvaError::ModelConfig("correlation matrix is not positive semi-definite".into()));
                    }
                    l[i * n + i] = s.max(0.0).sqrt();
                } else if l[j * n + j] > 1e-12 {
                    l[i * n + j] = s / l[j * n + j];
                } else if s.abs() > 1e-8 {
                    return Err(XvaError::ModelConfig("correlation matrix is not positive semi-definite".into()));
                }
            }
        }
        Ok(Some(l))
    }
}

/// Model shared by all paths of a scenario set.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: ModelParams,
    /// Hazard curves per entity (counterparties first, bank last).
    pub hazards: Vec<HazardCurve>,
    chol: Option<Vec<f64>>,
}

impl Model {
    pub fn new(params: ModelParams, hazards: Vec<HazardCurve>) -> Result<Self> {
        params.validate()?;
        let chol = params.copula_factor(hazards.len())?;
        Ok(Self { params, hazards, chol })
    }

    pub fn n_entities(&self) -> usize {
        self.hazards.len()
    }

    #[inline]
    pub(crate) fn euler_step(&self, r: f64, dt: f64, dw: f64, shift: f64) -> f64 {
        let p = &self.params;
        r + (p.mean_reversion * (p.long_term_rate - r) + shift) * dt + p.rate_vol * dw
    }

    /// Copula uniforms turned into unit exponential clock levels.
    fn clock_levels(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let n = out.len();
        for e in out.iter_mut() {
            *e = rng::normal(rng);
        }
        if let Some(l) = &self.chol {
            // descending so each row only reads untouched draws
            for i in (0..n).rev() {
                out[i] = (0..=i).map(|k| l[i * n + k] * out[k]).sum();
            }
        }
        for z in out.iter_mut() {
            let u = rng::norm_cdf(*z).max(f64::MIN_POSITIVE);
            *z = -u.ln();
        }
    }
}

/// Paths of short rate, discount factor and grid-snapped default times.
///
/// Arrays are path-major: entry `(p, k)` sits at `p * grid.len() + k`.
#[derive(Debug, Clone)]
pub struct ScenarioSet {
    pub grid: TimeGrid,
    pub n_paths: usize,
    /// Sub-paths per primary path (1 for a primary set).
    pub group: usize,
    /// Index of this set's first time in the primary grid.
    pub origin_index: usize,
    pub seed: u64,
    pub short_rate: Vec<f64>,
    /// Discount factor relative to the first grid time.
    pub discount: Vec<f64>,
    /// Absolute default time snapped to the grid, or infinity.
    pub default_time: Vec<f64>,
    /// Grid index of the default (0 for defaults at or before the first time), or [`NEVER`].
    pub default_step: Vec<u32>,
    pub model: Arc<Model>,
}

impl ScenarioSet {
    pub fn n_times(&self) -> usize {
        self.grid.len()
    }

    pub fn n_entities(&self) -> usize {
        self.model.n_entities()
    }

    #[inline]
    pub fn rate(&self, p: usize, k: usize) -> f64 {
        self.short_rate[p * self.grid.len() + k]
    }

    #[inline]
    pub fn df(&self, p: usize, k: usize) -> f64 {
        self.discount[p * self.grid.len() + k]
    }

    #[inline]
    pub fn default_step(&self, p: usize, e: usize) -> u32 {
        self.default_step[p * self.n_entities() + e]
    }

    /// Entity `e` still alive at grid index `k` on path `p`.
    #[inline]
    pub fn alive(&self, p: usize, e: usize, k: usize) -> bool {
        (k as u64) < self.default_step(p, e) as u64
    }
}

fn snap(grid: &[f64], from: usize, tau: f64) -> u32 {
    if !tau.is_finite() || tau > grid[grid.len() - 1] + TIME_EPS {
        return NEVER;
    }
    let i = grid.partition_point(|&x| x < tau - TIME_EPS);
    (i.max(from + 1) - from) as u32
}

fn simulate_primary_path(model: &Model, grid: &TimeGrid, seed: u64, p: usize, rate: &mut [f64], disc: &mut [f64], dsteps: &mut [u32], dtimes: &mut [f64]) {
    let times = grid.times();
    let mut w = Vec::with_capacity(times.len());
    let mut scratch = Vec::new();
    if model.params.rate_vol > 0.0 {
        rng::brownian_at(times, |n| rng::stream(seed, &[rng::TAG_RATE, p as u64, n]), &mut w, &mut scratch);
    } else {
        w.resize(times.len(), 0.0);
    }
    rate[0] = model.params.r0;
    disc[0] = 1.0;
    for k in 0..times.len() - 1 {
        let dt = grid.dt(k);
        rate[k + 1] = model.euler_step(rate[k], dt, w[k + 1] - w[k], 0.0);
        disc[k + 1] = disc[k] * (-rate[k] * dt).exp();
    }
    let mut levels = vec![0.0; model.n_entities()];
    let mut drng = rng::stream(seed, &[rng::TAG_DEFAULT, p as u64]);
    model.clock_levels(&mut drng, &mut levels);
    for (e, lev) in levels.iter().enumerate() {
        let tau = model.hazards[e].inverse_cumulative(*lev);
        let s = snap(times, 0, tau);
        dsteps[e] = s;
        dtimes[e] = if s == NEVER { f64::INFINITY } else { times[s as usize] };
    }
}

/// Primary paths under the pricing measure.
pub fn generate_primary(params: &ModelParams, hazards: &[HazardCurve], grid: &TimeGrid, n: usize, seed: u64) -> Result<ScenarioSet> {
    if n == 0 {
        return Err(XvaError::Argument("need at least one primary path".into()));
    }
    let model = Arc::new(Model::new(params.clone(), hazards.to_vec())?);
    let nt = grid.len();
    let ne = model.n_entities();
    let mut short_rate = vec![0.0; n * nt];
    let mut discount = vec![0.0; n * nt];
    let mut default_step = vec![NEVER; n * ne];
    let mut default_time = vec![f64::INFINITY; n * ne];
    short_rate
        .par_chunks_mut(nt)
        .zip(discount.par_chunks_mut(nt))
        .zip(default_step.par_chunks_mut(ne.max(1)).zip(default_time.par_chunks_mut(ne.max(1))))
        .enumerate()
        .for_each(|(p, ((r, d), (ds, dt)))| simulate_primary_path(&model, grid, seed, p, r, d, ds, dt));
    Ok(ScenarioSet {
        grid: grid.clone(),
        n_paths: n,
        group: 1,
        origin_index: 0,
        seed,
        short_rate,
        discount,
        default_time,
        default_step,
        model,
    })
}

/// One secondary sub-path on the primary grid between `k` and `end`.
///
/// `rate[0]` is the primary rate at `k`; `disc` is relative to `k`; default
/// steps are relative to `k` (0 = already defaulted at the branch).
#[derive(Debug, Default, Clone)]
pub struct Branch {
    pub rate: Vec<f64>,
    pub disc: Vec<f64>,
    pub default_step: Vec<u32>,
    w: Vec<f64>,
    rel: Vec<f64>,
    scratch: Vec<f64>,
    levels: Vec<f64>,
}

impl Branch {
    #[inline]
    pub fn alive(&self, e: usize, j: usize) -> bool {
        (j as u64) < self.default_step[e] as u64
    }
}

/// Fill `b` with sub-path `sub` of primary path `p` branching at index `k`.
pub fn simulate_branch(base: &ScenarioSet, p: usize, k: usize, end: usize, sub: usize, seed: u64, b: &mut Branch) {
    let model = &*base.model;
    let times = base.grid.times();
    let t0 = times[k];
    let len = end - k + 1;
    let tk = rng::time_key(t0);
    b.rel.clear();
    b.rel.extend(times[k..=end].iter().map(|t| t - t0));
    if model.params.rate_vol > 0.0 {
        rng::brownian_at(
            &b.rel,
            |n| rng::stream(seed, &[rng::TAG_SUB_RATE, p as u64, tk, sub as u64, n]),
            &mut b.w,
            &mut b.scratch,
        );
    } else {
        b.w.clear();
        b.w.resize(len, 0.0);
    }
    b.rate.clear();
    b.disc.clear();
    b.rate.push(base.rate(p, k));
    b.disc.push(1.0);
    let shift = model.params.hist_drift_shift;
    for j in 0..len - 1 {
        let dt = times[k + j + 1] - times[k + j];
        let r = b.rate[j];
        b.rate.push(model.euler_step(r, dt, b.w[j + 1] - b.w[j], shift));
        b.disc.push(b.disc[j] * (-r * dt).exp());
    }
    let ne = model.n_entities();
    b.levels.resize(ne, 0.0);
    let mut drng = rng::stream(seed, &[rng::TAG_SUB_DEFAULT, p as u64, tk, sub as u64]);
    model.clock_levels(&mut drng, &mut b.levels);
    b.default_step.clear();
    for e in 0..ne {
        if !base.alive(p, e, k) {
            b.default_step.push(0);
            continue;
        }
        let h = &model.hazards[e];
        let tau = h.inverse_cumulative(h.cumulative(t0) + b.levels[e]);
        let s = snap(&times[..=end], k, tau);
        b.default_step.push(s);
    }
}

/// Grid index one year after `k` (nearest point at or beyond `t_k + 1`).
pub fn one_year_ahead(grid: &TimeGrid, k: usize) -> Option<usize> {
    grid.index_at_or_after(grid.times()[k] + 1.0)
}

/// `m` secondary sub-paths per primary path, branching at `t_index` and
/// covering one year ahead.
pub fn spawn_secondary(base: &ScenarioSet, t_index: usize, m: usize, seed: u64) -> Result<ScenarioSet> {
    if t_index + 1 >= base.grid.len() {
        return Err(XvaError::Argument("no one-year window after the final grid point".into()));
    }
    let end = one_year_ahead(&base.grid, t_index).unwrap_or(base.grid.len() - 1);
    spawn_secondary_window(base, t_index, end, m, seed)
}

/// Secondary sub-paths from `t_index` to an explicit end index.
pub fn spawn_secondary_window(base: &ScenarioSet, t_index: usize, end: usize, m: usize, seed: u64) -> Result<ScenarioSet> {
    if base.group != 1 || base.origin_index != 0 {
        return Err(XvaError::Argument("secondary paths branch from a primary set".into()));
    }
    if m == 0 {
        return Err(XvaError::Argument("need at least one secondary path".into()));
    }
    if t_index >= end || end >= base.grid.len() {
        return Err(XvaError::Argument(format!("bad secondary window {t_index}..{end}")));
    }
    let grid = base.grid.tail(t_index, end);
    let nt = grid.len();
    let ne = base.n_entities();
    let n = base.n_paths * m;
    let rows: Vec<Branch> = (0..n)
        .into_par_iter()
        .map(|q| {
            let mut b = Branch::default();
            simulate_branch(base, q / m, t_index, end, q % m, seed, &mut b);
            b
        })
        .collect();
    let mut out = ScenarioSet {
        grid,
        n_paths: n,
        group: m,
        origin_index: t_index,
        seed,
        short_rate: Vec::with_capacity(n * nt),
        discount: Vec::with_capacity(n * nt),
        default_time: Vec::with_capacity(n * ne),
        default_step: Vec::with_capacity(n * ne),
        model: base.model.clone(),
    };
    for (q, b) in rows.iter().enumerate() {
        out.short_rate.extend_from_slice(&b.rate);
        out.discount.extend_from_slice(&b.disc);
        for e in 0..ne {
            let s = b.default_step[e];
            out.default_step.push(s);
            out.default_time.push(match s {
                NEVER => f64::INFINITY,
                0 => base.default_time[(q / m) * ne + e],
                s => out.grid.times()[s as usize],
            });
        }
    }
    Ok(out)
}

/// Ratio `discount[j] / discount[i]` on one path.
pub fn discount_between(s: &ScenarioSet, path: usize, i: usize, j: usize) -> Result<f64> {
    if i > j {
        return Err(XvaError::Argument(format!("discount_between needs i <= j, got {i} > {j}")));
    }
    if path >= s.n_paths || j >= s.n_times() {
        return Err(XvaError::Argument("path or grid index out of range".into()));
    }
    Ok(s.df(path, j) / s.df(path, i))
}
