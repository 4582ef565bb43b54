//! The full valuation pipeline.
//!
//! One pass runs: primary simulation, exposure cube, UCVA lattice, capital-free
//! replication (UCVA + MVA + FVA*), the forward reserve-capital process along
//! primary paths, one-year loss increments on secondary sub-paths pooled into
//! an ES term structure, KVA, economic capital `max(ES, KVA)`, and the funding
//! valuation refined with that capital. Extra passes feed the refined funding
//! curve and capital back into the forward process.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{self, BackwardSolution, KVAInputs, Projection, ReplicationInputs};
use crate::error::{Result, XvaError};
use crate::exposure::{self, blended_ratio, neg, pos, ConditionalUcva, CreditSetup, DvaConvention, ImFunding};
use crate::instruments::{Portfolio, Pricer, SetState, Slice, Trade};
use crate::market_sim::{generate_primary, one_year_ahead, simulate_branch, Branch, ModelParams, ScenarioSet, TimeGrid};
use crate::risk_measure::{self, ConditionalSample, EsOptions, TermStructure};
use crate::stats::{self, Estimate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub n_primary: usize,
    /// Secondary sub-paths per primary path and grid point.
    pub n_secondary: usize,
    pub seed: u64,
    /// Grid step in years.
    pub step: f64,
    /// Grid horizon; defaults to the portfolio maturity.
    pub horizon: Option<f64>,
    pub hurdle: f64,
    /// ES tail probability.
    pub alpha: f64,
    pub min_surviving: usize,
    pub tol: f64,
    pub max_iter: usize,
    /// Batch-means blocks for standard errors.
    pub blocks: usize,
    pub dva_convention: DvaConvention,
    /// Passes through the forward/backward loop; 1 is the standard scheme.
    pub passes: usize,
    /// Added to spot exposure at counterparty default.
    pub gap_shock: f64,
    /// Short-rate nodes of the UCVA lattice.
    pub lattice_nodes: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            n_primary: 2000,
            n_secondary: 200,
            seed: 42,
            step: 0.5,
            horizon: None,
            hurdle: 0.105,
            alpha: risk_measure::DEFAULT_ALPHA,
            min_surviving: risk_measure::DEFAULT_MIN_SURVIVING,
            tol: bsde::DEFAULT_TOL,
            max_iter: bsde::DEFAULT_MAX_ITER,
            blocks: 20,
            dva_convention: DvaConvention::AsWritten,
            passes: 1,
            gap_shock: 0.0,
            lattice_nodes: 161,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(XvaError::Config(m.into()));
        if self.n_primary == 0 || self.n_secondary == 0 {
            return bad("path counts must be at least 1");
        }
        if !(self.step > 0.0) || !self.step.is_finite() {
            return bad("grid step must be positive");
        }
        if let Some(h) = self.horizon {
            if !(h > 0.0) || !h.is_finite() {
                return bad("horizon must be positive");
            }
        }
        if !(self.hurdle >= 0.0) || !self.hurdle.is_finite() {
            return bad("hurdle rate must be nonnegative");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return bad("solver tolerance and iteration cap must be positive");
        }
        if self.blocks == 0 || self.passes == 0 {
            return bad("blocks and passes must be at least 1");
        }
        if self.lattice_nodes < 8 {
            return bad("lattice needs at least 8 nodes");
        }
        if !self.gap_shock.is_finite() {
            return bad("gap shock must be finite");
        }
        Ok(())
    }
}

/// A reported value with its Monte Carlo standard error where one exists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub se: Option<f64>,
}

impl From<Estimate> for Metric {
    fn from(e: Estimate) -> Self {
        Metric { value: e.value, se: Some(e.se) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermStructures {
    pub t: Vec<f64>,
    pub es: Vec<f64>,
    pub kva: Vec<f64>,
    pub ec: Vec<f64>,
    pub blended_lambda: Vec<f64>,
    /// Survival-adjusted short rate used to discount capital costs.
    pub rate: Vec<f64>,
    pub ucva: Vec<f64>,
    pub mva: Vec<f64>,
    pub fva_star: Vec<f64>,
    pub fva: Vec<f64>,
}

/// Incremental charges of adding a trade.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ftp {
    pub d_ucva: f64,
    pub d_mva: f64,
    pub d_fva: f64,
    pub d_kva: f64,
    pub d_trc: f64,
    /// `d_trc + d_kva`.
    pub ftp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub n_primary: usize,
    pub n_secondary: usize,
    pub step: f64,
    pub horizon: f64,
    pub n_times: usize,
    pub hurdle: f64,
    pub alpha: f64,
    pub passes: usize,
    pub dva_convention: DvaConvention,
    pub im_funding: ImFunding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XVAReport {
    pub ucva: Metric,
    pub mva: Metric,
    pub fva_star: Metric,
    pub fva: Metric,
    pub kva: Metric,
    pub ftdcva: Metric,
    pub ftddva: Metric,
    /// `ucva + mva + fva`.
    pub trc: f64,
    /// Mean loss at the end of each path (bank default or maturity).
    pub loss_at_horizon: Metric,
    /// `linear` or `bsde`, whichever produced the KVA.
    pub kva_solver: String,
    pub ftp: Option<Ftp>,
    pub term_structures: TermStructures,
    pub warnings: Vec<String>,
    pub meta: RunMeta,
    /// Wall-clock seconds per stage; kept out of serialized reports.
    #[serde(skip)]
    pub timings: Vec<(String, f64)>,
}

/// Loss process along primary paths.
#[derive(Debug, Clone, PartialEq)]
pub struct LossProcessPaths {
    pub n_paths: usize,
    pub n_times: usize,
    /// `TRC - RC`, path-major, held constant after each path stops.
    pub loss: Vec<f64>,
    pub rc: Vec<f64>,
    pub trc: Vec<f64>,
    /// Grid index where each path stops: bank default or portfolio end.
    pub stop_index: Vec<usize>,
    /// Initial accrued loss.
    pub y: f64,
}

impl LossProcessPaths {
    pub fn terminal_losses(&self) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.loss[p * self.n_times + self.stop_index[p]]).collect()
    }
}

/// Deterministic curves entering the forward reserve-capital process.
#[derive(Debug, Clone, Copy)]
pub struct Curves<'c> {
    pub mva: &'c [f64],
    pub fva: &'c [f64],
    pub ec: &'c [f64],
}

#[derive(Default)]
struct Scratch {
    exps: Vec<f64>,
    vals: Vec<f64>,
    states: Vec<SetState>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Node {
    sum_p: f64,
    mva: f64,
    ucva: f64,
    blended: f64,
}

struct Leg {
    trc: f64,
    rc: f64,
    survived: bool,
}

/// State evaluation shared by primary paths and sub-paths.
pub struct Nodes<'a> {
    pricer: &'a Pricer,
    credit: &'a CreditSetup,
    slices: Vec<Slice>,
    lattice: ConditionalUcva,
    set_entity: Vec<usize>,
    recovery: Vec<f64>,
    times: Vec<f64>,
    lambda: Vec<f64>,
    gap: f64,
    end_index: usize,
    bank: usize,
}

impl<'a> Nodes<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(pricer: &'a Pricer, credit: &'a CreditSetup, set_entity: Vec<usize>, grid: &TimeGrid, end_index: usize, r_range: (f64, f64), lattice_nodes: usize, gap: f64) -> Self {
        let times = grid.times().to_vec();
        let slices = times.par_iter().map(|&t| pricer.slice(t)).collect();
        let lattice = ConditionalUcva::build(pricer, &set_entity, credit, grid, end_index, r_range, lattice_nodes, gap);
        Self {
            pricer,
            credit,
            slices,
            lattice,
            recovery: set_entity.iter().map(|&e| credit.curve(e).recovery).collect(),
            set_entity,
            lambda: times.iter().map(|&t| credit.lambda(t)).collect(),
            times,
            gap,
            end_index,
            bank: credit.bank_index(),
        }
    }

    fn eval(&self, k: usize, r: f64, alive: impl Fn(usize) -> bool, sc: &mut Scratch) -> Node {
        let ns = self.set_entity.len();
        sc.vals.resize(ns, 0.0);
        self.slices[k].values(r, &mut sc.exps, &mut sc.vals);
        sc.states.clear();
        let t = self.times[k];
        let mut node = Node::default();
        let (mut posted, mut at_risk) = (0.0, 0.0);
        for i in 0..ns {
            let st = self.pricer.state_from_mtm(i, t, r, sc.vals[i]);
            sc.states.push(st);
            if alive(self.set_entity[i]) {
                node.sum_p += st.p;
                posted += st.im_posted;
                at_risk += neg(st.p + self.gap).min(st.im_posted);
            }
        }
        node.ucva = self.lattice.value(k, r, &alive);
        let lam = self.lambda[k];
        node.blended = blended_ratio(lam, at_risk, posted);
        if posted > 0.0 {
            let spread = match self.credit.funding.im_funding {
                ImFunding::Unsecured => lam,
                ImFunding::Blended => node.blended,
                ImFunding::Fixed { spread } => spread,
            };
            node.mva = spread * posted;
        }
        node
    }

    fn loss(&self, i: usize, sc: &Scratch) -> f64 {
        let st = sc.states[i];
        (1.0 - self.recovery[i]) * pos(st.p + self.gap - st.im_received)
    }

    /// Evolves reserve capital from `k0` for `len` steps with `RC_k0 = TRC_k0`.
    ///
    /// `rates[j]` is the short rate at `k0 + j`; entity `e` is alive at `k0 + j`
    /// while `j < steps[e]`. `on_step(j, trc, rc)` sees every visited node.
    fn evolve(&self, k0: usize, rates: &[f64], steps: &[u32], len: usize, c: Curves, sc: &mut Scratch, mut on_step: impl FnMut(usize, f64, f64)) -> Leg {
        let alive_at = |e: usize, j: usize| (j as u64) < steps[e] as u64;
        let mut node = self.eval(k0, rates[0], |e| alive_at(e, 0), sc);
        let mut trc = if k0 < self.end_index { node.ucva + c.mva[k0] + c.fva[k0] } else { 0.0 };
        let mut rc = trc;
        on_step(0, trc, rc);
        for j in 0..len {
            let k = k0 + j;
            if k >= self.end_index {
                break;
            }
            let dt = self.times[k + 1] - self.times[k];
            rc += (rates[j] * dt).exp_m1() * trc - self.lambda[k] * pos(node.sum_p - c.ec[k] - trc) * dt - node.mva * dt;
            node = self.eval(k + 1, rates[j + 1], |e| alive_at(e, j + 1), sc);
            let jj = (j + 1) as u32;
            let bank_step = steps[self.bank];
            if bank_step >= jj {
                for (i, &e) in self.set_entity.iter().enumerate() {
                    if steps[e] == jj {
                        rc -= self.loss(i, sc);
                    }
                }
            }
            if bank_step == jj {
                // reserve transfers the UCVA of the surviving sets at own default
                rc -= node.ucva;
                on_step(j + 1, 0.0, rc);
                return Leg { trc: 0.0, rc, survived: false };
            }
            trc = node.ucva + c.mva[k + 1] + c.fva[k + 1];
            on_step(j + 1, trc, rc);
        }
        Leg {
            trc,
            rc,
            survived: alive_at(self.bank, len),
        }
    }
}

/// Forward reserve capital and loss along every primary path.
pub fn forward_rc_paths(nodes: &Nodes, s: &ScenarioSet, curves: Curves) -> Result<LossProcessPaths> {
    let nt = s.n_times();
    if nodes.times.len() != nt || curves.mva.len() != nt || curves.fva.len() != nt || curves.ec.len() != nt || s.origin_index != 0 {
        return Err(XvaError::Argument("forward RC inputs are not on the primary grid".into()));
    }
    let ne = s.n_entities();
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, usize)> = (0..s.n_paths)
        .into_par_iter()
        .map_init(Scratch::default, |sc, p| {
            let mut l = vec![0.0; nt];
            let mut rc = vec![0.0; nt];
            let mut trc = vec![0.0; nt];
            let mut stop = 0;
            nodes.evolve(
                0,
                &s.short_rate[p * nt..(p + 1) * nt],
                &s.default_step[p * ne..(p + 1) * ne],
                nt - 1,
                curves,
                sc,
                |j, t, r| {
                    trc[j] = t;
                    rc[j] = r;
                    l[j] = t - r;
                    stop = j;
                },
            );
            for j in stop + 1..nt {
                l[j] = l[stop];
                rc[j] = rc[stop];
            }
            (l, rc, trc, stop)
        })
        .collect();
    let mut out = LossProcessPaths {
        n_paths: s.n_paths,
        n_times: nt,
        loss: Vec::with_capacity(s.n_paths * nt),
        rc: Vec::with_capacity(s.n_paths * nt),
        trc: Vec::with_capacity(s.n_paths * nt),
        stop_index: Vec::with_capacity(s.n_paths),
        y: 0.0,
    };
    for (l, rc, trc, stop) in rows {
        out.loss.extend(l);
        out.rc.extend(rc);
        out.trc.extend(trc);
        out.stop_index.push(stop);
    }
    Ok(out)
}

/// Pooled one-year loss increments per grid point, from `m` sub-paths per
/// primary path alive at that point.
pub fn loss_increment_pools(nodes: &Nodes, s: &ScenarioSet, curves: Curves, m: usize, seed: u64) -> Vec<Option<ConditionalSample>> {
    let nt = s.n_times();
    let bank = nodes.bank;
    let last = nt - 1;
    (0..nt)
        .map(|k| {
            if k >= nodes.end_index {
                return None;
            }
            // past the last full year the window runs to the grid end, where the book is gone
            let j = one_year_ahead(&s.grid, k).unwrap_or(last);
            let rows: Vec<Vec<(f64, bool)>> = (0..s.n_paths)
                .into_par_iter()
                .map_init(
                    || (Branch::default(), Scratch::default()),
                    |(b, sc), p| {
                        if !s.alive(p, bank, k) {
                            return Vec::new();
                        }
                        (0..m)
                            .map(|sub| {
                                simulate_branch(s, p, k, j, sub, seed, b);
                                let leg = nodes.evolve(k, &b.rate, &b.default_step, j - k, curves, sc, |_, _, _| {});
                                (leg.trc - leg.rc, leg.survived)
                            })
                            .collect()
                    },
                )
                .collect();
            let flat: Vec<(f64, bool)> = rows.into_iter().flatten().collect();
            if flat.is_empty() {
                return Some(ConditionalSample::default());
            }
            let (x, surv): (Vec<f64>, Vec<bool>) = flat.into_iter().unzip();
            Some(ConditionalSample::uniform(&x, &surv, s.grid.times()[k]))
        })
        .collect()
}

/// Reset transform of an unreset reserve-capital path: at each schedule index
/// the path is brought back to `TRC`, with unchanged dynamics in between.
/// Index 0 plays the role of the initial reset time.
pub fn apply_reset_schedule(unreset_rc: &[f64], trc: &[f64], schedule: &[usize]) -> Result<Vec<f64>> {
    check_schedule(unreset_rc.len(), trc.len(), schedule)?;
    let mut out = unreset_rc.to_vec();
    let mut prev = 0;
    let mut shift = 0.0;
    let mut next = schedule.iter().peekable();
    for (t, o) in out.iter_mut().enumerate() {
        if next.peek() == Some(&&t) {
            shift += trc[t] - trc[prev] - (unreset_rc[t] - unreset_rc[prev]);
            prev = t;
            next.next();
        }
        *o += shift;
    }
    Ok(out)
}

/// Left limits of the reset path at each reset time.
pub fn reset_left_limits(unreset_rc: &[f64], trc: &[f64], schedule: &[usize]) -> Result<Vec<f64>> {
    check_schedule(unreset_rc.len(), trc.len(), schedule)?;
    let mut prev = 0;
    Ok(schedule
        .iter()
        .map(|&t| {
            let v = trc[prev] + unreset_rc[t] - unreset_rc[prev];
            prev = t;
            v
        })
        .collect())
}

/// Inverse transform: `unreset = rc - sum_{t_l <= t} (TRC_{t_l} - RC_{t_l-})`.
pub fn remove_resets(rc: &[f64], left_limits: &[f64], trc: &[f64], schedule: &[usize]) -> Result<Vec<f64>> {
    check_schedule(rc.len(), trc.len(), schedule)?;
    if left_limits.len() != schedule.len() {
        return Err(XvaError::Argument("one left limit per reset time expected".into()));
    }
    let mut out = rc.to_vec();
    let mut shift = 0.0;
    let mut l = 0;
    for (t, o) in out.iter_mut().enumerate() {
        if l < schedule.len() && schedule[l] == t {
            shift += trc[t] - left_limits[l];
            l += 1;
        }
        *o -= shift;
    }
    Ok(out)
}

fn check_schedule(n: usize, m: usize, schedule: &[usize]) -> Result<()> {
    if n != m {
        return Err(XvaError::Argument("paths must share a grid".into()));
    }
    if schedule.windows(2).any(|w| w[1] <= w[0]) || schedule.first() == Some(&0) || schedule.last().is_some_and(|&t| t >= n) {
        return Err(XvaError::Argument("reset indices must be strictly increasing within (0, n)".into()));
    }
    Ok(())
}

fn lap(timings: &mut Vec<(String, f64)>, clock: &mut Instant, stage: &str) {
    timings.push((stage.to_string(), clock.elapsed().as_secs_f64()));
    log::info!("{stage}: {:.2}s", clock.elapsed().as_secs_f64());
    *clock = Instant::now();
}

/// Funding quantities of one block of paths.
struct FundingBlock {
    mva0: f64,
    fva_star0: f64,
    fva0: f64,
}

struct PathInputs {
    rate: Vec<f64>,
    alive: Vec<bool>,
    ucva: Vec<f64>,
    sum_p: Vec<f64>,
    mva_g: Vec<f64>,
    lambda: Vec<f64>,
}

impl PathInputs {
    fn range(&self, nt: usize, r: std::ops::Range<usize>) -> std::ops::Range<usize> {
        r.start * nt..r.end * nt
    }

    fn replication(&self, grid: &TimeGrid, end: usize, paths: std::ops::Range<usize>, cfg: &EngineConfig) -> Result<(Projection, bsde::Replication)> {
        let nt = grid.len();
        let ix = self.range(nt, paths);
        let proj = Projection::new(grid, end, &self.rate[ix.clone()], self.alive[ix.clone()].to_vec())?;
        let rep = bsde::replication_bsde(
            &proj,
            &ReplicationInputs {
                exposure_sum: &self.sum_p[ix.clone()],
                ucva: &self.ucva[ix.clone()],
                mva_integrand: &self.mva_g[ix.clone()],
                lambda: &self.lambda[ix],
            },
            cfg.tol,
            cfg.max_iter,
        )?;
        Ok((proj, rep))
    }

    fn refined_fva(&self, proj: &Projection, paths: std::ops::Range<usize>, rep: &bsde::Replication, ec: &TermStructure, cfg: &EngineConfig) -> Result<BackwardSolution> {
        let nt = proj.n_times();
        let ix = self.range(nt, paths);
        let inputs = ReplicationInputs {
            exposure_sum: &self.sum_p[ix.clone()],
            ucva: &self.ucva[ix.clone()],
            mva_integrand: &self.mva_g[ix.clone()],
            lambda: &self.lambda[ix.clone()],
        };
        let need = bsde::funding_need(proj, &inputs, &rep.mva.value_curve);
        bsde::fva_fixed_point(proj, &need, ec, &self.lambda[ix], cfg.tol, cfg.max_iter)
    }
}

/// Runs the whole pipeline on one portfolio.
pub fn run_full(portfolio: &Portfolio, credit: &CreditSetup, params: &ModelParams, cfg: &EngineConfig) -> Result<XVAReport> {
    cfg.validate()?;
    portfolio.validate()?;
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut warnings = Vec::new();

    let horizon = cfg.horizon.unwrap_or(portfolio.maturity()).max(cfg.step);
    let grid = TimeGrid::uniform(horizon, cfg.step)?;
    let nt = grid.len();
    let s = generate_primary(params, &credit.hazards(), &grid, cfg.n_primary, cfg.seed).map_err(|e| e.at_stage("simulation"))?;
    lap(&mut timings, &mut clock, "simulation");

    let pricer = Pricer::new(portfolio, params);
    let cube = exposure::build_cube_with(&pricer, portfolio, &s, credit, cfg.gap_shock).map_err(|e| e.at_stage("exposure"))?;
    let end = cube.end_index;
    if portfolio.maturity() > grid.horizon() + 1e-9 {
        warnings.push(format!("grid horizon {} ends before portfolio maturity {}", grid.horizon(), portfolio.maturity()));
    }
    lap(&mut timings, &mut clock, "exposure");

    // lattice must cover primary rates and one-year sub-path excursions
    let (lo, hi) = s.short_rate.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &r| (a.min(r), b.max(r)));
    let pad = 5.0 * params.rate_vol + 1.5 * params.hist_drift_shift.abs() + 0.01;
    let nodes = Nodes::new(&pricer, credit, cube.set_entity.clone(), &grid, end, (lo - pad, hi + pad), cfg.lattice_nodes, cfg.gap_shock);
    lap(&mut timings, &mut clock, "ucva_lattice");

    let bank = credit.bank_index();
    let np = s.n_paths;
    let rows: Vec<Vec<Node>> = (0..np)
        .into_par_iter()
        .map_init(Scratch::default, |sc, p| (0..nt).map(|k| nodes.eval(k, s.rate(p, k), |e| s.alive(p, e, k), sc)).collect())
        .collect();
    let mut inputs = PathInputs {
        rate: s.short_rate.clone(),
        alive: Vec::with_capacity(np * nt),
        ucva: Vec::with_capacity(np * nt),
        sum_p: Vec::with_capacity(np * nt),
        mva_g: Vec::with_capacity(np * nt),
        lambda: Vec::with_capacity(np * nt),
    };
    let mut blended = Vec::with_capacity(np * nt);
    for (p, row) in rows.iter().enumerate() {
        for (k, n) in row.iter().enumerate() {
            inputs.alive.push(s.alive(p, bank, k));
            inputs.ucva.push(n.ucva);
            inputs.sum_p.push(n.sum_p);
            inputs.mva_g.push(n.mva);
            inputs.lambda.push(nodes.lambda[k]);
            blended.push(n.blended);
        }
    }
    drop(rows);

    let (proj, rep) = inputs.replication(&grid, end, 0..np, cfg).map_err(|e| e.at_stage("replication"))?;
    lap(&mut timings, &mut clock, "replication");

    let es_opts = EsOptions {
        alpha: cfg.alpha,
        min_surviving: cfg.min_surviving,
    };
    let rate_curve = proj.implied_rate_curve();
    let mut fva_curve = rep.fva.value_curve.values.clone();
    let mut ec_curve = vec![0.0; nt];
    let mut loss_check = Estimate::default();
    let mut es = TermStructure::zeros(&grid);
    let mut kva = BackwardSolution {
        value_curve: TermStructure::zeros(&grid),
        iterations: 0,
        residual: 0.0,
    };
    let mut kva_solver = "linear";
    let mut fva = rep.fva.clone();
    for pass in 1..=cfg.passes {
        let curves = Curves {
            mva: &rep.mva.value_curve.values,
            fva: &fva_curve,
            ec: &ec_curve,
        };
        let losses = forward_rc_paths(&nodes, &s, curves).map_err(|e| e.at_stage("forward_rc"))?;
        if pass == 1 {
            loss_check = stats::batch_means(&losses.terminal_losses(), cfg.blocks);
        }
        lap(&mut timings, &mut clock, "forward_rc");

        let pools = loss_increment_pools(&nodes, &s, curves, cfg.n_secondary, cfg.seed);
        let (es_ts, w) = risk_measure::es_term_structure(&grid, &pools, es_opts).map_err(|e| e.at_stage("expected_shortfall"))?;
        drop(pools);
        es = es_ts;
        if pass == cfg.passes {
            warnings.extend(w);
        }
        lap(&mut timings, &mut clock, "expected_shortfall");

        let k_in = KVAInputs {
            ec_curve: es.clone(),
            rate_curve: rate_curve.clone(),
            hurdle: cfg.hurdle,
            horizon: grid.times()[end],
        };
        kva = bsde::kva_linear(&k_in).map_err(|e| e.at_stage("kva"))?;
        let scale = kva.value_curve.sup_norm();
        let binds = kva.value_curve.values.iter().zip(&es.values).any(|(k, e)| *k > e + 1e-12 * scale);
        kva_solver = "linear";
        if binds {
            kva = bsde::kva_bsde(&k_in, cfg.tol, cfg.max_iter).map_err(|e| e.at_stage("kva"))?;
            kva_solver = "bsde";
        }
        let ec = es.max_with(&kva.value_curve);
        lap(&mut timings, &mut clock, "kva");

        fva = inputs.refined_fva(&proj, 0..np, &rep, &ec, cfg).map_err(|e| e.at_stage("refined_fva"))?;
        fva_curve = fva.value_curve.values.clone();
        ec_curve = ec.values;
        lap(&mut timings, &mut clock, "refined_fva");
    }
    let ec = TermStructure::new(grid.times().to_vec(), ec_curve)?;

    // block re-solves for funding standard errors
    let blocks: Vec<FundingBlock> = stats::block_ranges(np, cfg.blocks)
        .into_iter()
        .map(|r| {
            let (bp, brep) = inputs.replication(&grid, end, r.clone(), cfg)?;
            let f = inputs.refined_fva(&bp, r, &brep, &ec, cfg)?;
            Ok(FundingBlock {
                mva0: brep.mva.at0(),
                fva_star0: brep.fva.at0(),
                fva0: f.at0(),
            })
        })
        .collect::<Result<_>>()
        .map_err(|e| e.at_stage("funding_errors"))?;
    let se = |f: fn(&FundingBlock) -> f64| Some(stats::se_of_blocks(&blocks.iter().map(f).collect::<Vec<_>>()));

    let ucva = stats::batch_means(&exposure::ucva_paths(&cube, &s, credit), cfg.blocks);
    let (ftdcva, ftddva) = exposure::ftd_cva_dva(&cube, &s, credit, cfg.dva_convention, cfg.blocks);
    lap(&mut timings, &mut clock, "report");

    let mva = Metric {
        value: rep.mva.at0(),
        se: se(|b| b.mva0),
    };
    let fva_m = Metric {
        value: fva.at0(),
        se: se(|b| b.fva0),
    };
    let blended_curve = (0..nt).map(|k| proj.cond_mean(k, |p| blended[p * nt + k])).collect();
    Ok(XVAReport {
        ucva: ucva.into(),
        mva,
        fva_star: Metric {
            value: rep.fva.at0(),
            se: se(|b| b.fva_star0),
        },
        fva: fva_m,
        kva: Metric {
            value: kva.at0(),
            se: None,
        },
        ftdcva: ftdcva.into(),
        ftddva: ftddva.into(),
        trc: ucva.value + mva.value + fva_m.value,
        loss_at_horizon: loss_check.into(),
        kva_solver: kva_solver.into(),
        ftp: None,
        term_structures: TermStructures {
            t: grid.times().to_vec(),
            es: es.values,
            kva: kva.value_curve.values,
            ec: ec.values,
            blended_lambda: blended_curve,
            rate: rate_curve.values,
            ucva: rep.ucva.values,
            mva: rep.mva.value_curve.values,
            fva_star: rep.fva.value_curve.values,
            fva: fva.value_curve.values,
        },
        warnings,
        meta: RunMeta {
            seed: cfg.seed,
            n_primary: cfg.n_primary,
            n_secondary: cfg.n_secondary,
            step: cfg.step,
            horizon,
            n_times: nt,
            hurdle: cfg.hurdle,
            alpha: cfg.alpha,
            passes: cfg.passes,
            dva_convention: cfg.dva_convention,
            im_funding: credit.funding.im_funding,
        },
        timings,
    })
}

/// Base and extended runs with common random numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalReport {
    pub base: XVAReport,
    pub with_trade: XVAReport,
    pub ftp: Ftp,
}

pub fn ftp_between(base: &XVAReport, with_trade: &XVAReport) -> Ftp {
    let d_trc = with_trade.trc - base.trc;
    let d_kva = with_trade.kva.value - base.kva.value;
    Ftp {
        d_ucva: with_trade.ucva.value - base.ucva.value,
        d_mva: with_trade.mva.value - base.mva.value,
        d_fva: with_trade.fva.value - base.fva.value,
        d_kva,
        d_trc,
        ftp: d_trc + d_kva,
    }
}

/// Values the book with and without `trade` on the same scenarios.
pub fn incremental_xva(base: &Portfolio, trade: Trade, credit: &CreditSetup, params: &ModelParams, cfg: &EngineConfig) -> Result<IncrementalReport> {
    let extended = base.with_trade(trade)?;
    let mut cfg = cfg.clone();
    cfg.horizon = Some(cfg.horizon.unwrap_or(0.0).max(extended.maturity()).max(base.maturity()));
    let b = run_full(base, credit, params, &cfg)?;
    let mut w = run_full(&extended, credit, params, &cfg)?;
    let ftp = ftp_between(&b, &w);
    w.ftp = Some(ftp);
    Ok(IncrementalReport { base: b, with_trade: w, ftp })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exposure::{CreditCurve, FundingSpec};
    use crate::instruments::{MarginSpec, NettingSet, TradeType};

    fn swap(id: &str, ty: TradeType, mat: f64, set: &str) -> Trade {
        Trade {
            id: id.into(),
            trade_type: ty,
            notional: 10_000.0,
            maturity_years: mat,
            fixed_rate: None,
            fixed_tenor_months: 6,
            float_tenor_months: 3,
            netting_set: set.into(),
        }
    }

    fn book(trades: Vec<Trade>) -> Portfolio {
        let mut sets: Vec<NettingSet> = Vec::new();
        for t in trades {
            match sets.iter_mut().find(|s| s.id == t.netting_set) {
                Some(s) => s.trades.push(t),
                None => sets.push(NettingSet {
                    id: t.netting_set.clone(),
                    counterparty: t.netting_set.clone(),
                    margin: MarginSpec::default(),
                    trades: vec![t],
                }),
            }
        }
        Portfolio { netting_sets: sets }
    }

    fn credit(bps: &[(&str, f64)], bank_bps: f64) -> CreditSetup {
        CreditSetup {
            counterparties: bps.iter().map(|(n, s)| CreditCurve::flat(n, 0.4, *s).unwrap()).collect(),
            bank: CreditCurve::flat("Bank", 0.4, bank_bps).unwrap(),
            funding: FundingSpec::default(),
        }
    }

    fn small_cfg() -> EngineConfig {
        EngineConfig {
            n_primary: 200,
            n_secondary: 20,
            step: 0.5,
            blocks: 10,
            min_surviving: 10,
            ..EngineConfig::default()
        }
    }

    #[test]
    fn empty_book_is_free() {
        let r = run_full(&Portfolio::default(), &credit(&[("A", 100.0)], 100.0), &ModelParams::default(), &small_cfg()).unwrap();
        for m in [r.ucva, r.mva, r.fva_star, r.fva, r.kva, r.ftdcva, r.ftddva] {
            assert_eq!(m.value, 0.0);
        }
        assert_eq!(r.trc, 0.0);
    }

    #[test]
    fn zero_spread_removes_funding() {
        let pf = book(vec![swap("1", TradeType::Payer, 5.0, "A"), swap("2", TradeType::Receiver, 3.0, "B")]);
        let mut cr = credit(&[("A", 150.0), ("B", 300.0)], 100.0);
        cr.funding.lambda = Some(0.0);
        let r = run_full(&pf, &cr, &ModelParams::default(), &small_cfg()).unwrap();
        assert_eq!(r.fva.value, 0.0);
        assert_eq!(r.fva_star.value, 0.0);
        assert_eq!(r.trc, r.ucva.value);
        assert!(r.ucva.value > 0.0 && r.kva.value > 0.0);
    }

    #[test]
    fn report_identities() {
        let pf = book(vec![swap("1", TradeType::Payer, 5.0, "A"), swap("2", TradeType::Receiver, 7.0, "B")]);
        let cr = credit(&[("A", 150.0), ("B", 300.0)], 100.0);
        let r = run_full(&pf, &cr, &ModelParams::default(), &small_cfg()).unwrap();
        assert_eq!(r.trc, r.ucva.value + r.mva.value + r.fva.value);
        assert_eq!(r.mva.value, 0.0);
        assert!(r.fva.value <= r.fva_star.value);
        let ts = &r.term_structures;
        for k in 0..ts.t.len() {
            assert_eq!(ts.ec[k], ts.es[k].max(ts.kva[k]));
            assert!(ts.kva[k] <= ts.ec[k]);
        }
        assert_eq!(*ts.kva.last().unwrap(), 0.0);
    }

    #[test]
    fn riskless_book_has_no_loss() {
        // no defaults and no funding spread: L is identically zero
        let pf = book(vec![swap("1", TradeType::Payer, 5.0, "A")]);
        let mut cr = credit(&[("A", 0.0)], 0.0);
        cr.funding.lambda = Some(0.0);
        let params = ModelParams::default();
        let g = TimeGrid::uniform(5.0, 0.5).unwrap();
        let s = generate_primary(&params, &cr.hazards(), &g, 50, 1).unwrap();
        let pricer = Pricer::new(&pf, &params);
        let nodes = Nodes::new(&pricer, &cr, vec![0], &g, 10, (-0.1, 0.15), 81, 0.0);
        let z = vec![0.0; g.len()];
        let l = forward_rc_paths(&nodes, &s, Curves { mva: &z, fva: &z, ec: &z }).unwrap();
        assert!(l.loss.iter().all(|v| *v == 0.0));
        assert!(l.stop_index.iter().all(|k| *k == 10));
    }

    #[test]
    fn forced_default_jumps_by_the_loss() {
        // flat zero rates, constant exposure book replaced by a forced default path
        let params = ModelParams {
            r0: 0.0,
            mean_reversion: 0.0,
            rate_vol: 0.0,
            long_term_rate: 0.0,
            hist_drift_shift: 0.0,
            correlation: vec![],
        };
        let pf = Portfolio {
            netting_sets: vec![NettingSet {
                id: "A".into(),
                counterparty: "A".into(),
                margin: MarginSpec::default(),
                trades: vec![Trade {
                    fixed_rate: Some(0.01),
                    ..swap("1", TradeType::Receiver, 2.0, "A")
                }],
            }],
        };
        let mut cr = credit(&[("A", 0.0)], 0.0);
        cr.funding.lambda = Some(0.0);
        let g = TimeGrid::uniform(2.0, 0.5).unwrap();
        let mut s = generate_primary(&params, &cr.hazards(), &g, 1, 1).unwrap();
        s.default_step[0] = 2;
        let pricer = Pricer::new(&pf, &params);
        let nodes = Nodes::new(&pricer, &cr, vec![0], &g, 4, (-0.05, 0.05), 41, 0.0);
        let z = vec![0.0; g.len()];
        let l = forward_rc_paths(&nodes, &s, Curves { mva: &z, fva: &z, ec: &z }).unwrap();
        let exposure = 0.6 * pricer.set_value(0, 1.0, 0.0).max(0.0);
        assert!(exposure > 0.0);
        assert_eq!(l.loss[1], 0.0);
        assert!((l.loss[2] - exposure).abs() < 1e-12);
        assert!((l.loss[4] - exposure).abs() < 1e-12);
    }

    #[test]
    fn loss_is_a_martingale_in_mean() {
        let pf = book(vec![swap("1", TradeType::Payer, 10.0, "A"), swap("2", TradeType::Receiver, 5.0, "B")]);
        let cr = credit(&[("A", 200.0), ("B", 400.0)], 150.0);
        let cfg = EngineConfig {
            n_primary: 2000,
            n_secondary: 2,
            ..small_cfg()
        };
        let r = run_full(&pf, &cr, &ModelParams::default(), &cfg).unwrap();
        let l = r.loss_at_horizon;
        assert!(l.value.abs() <= 3.0 * l.se.unwrap(), "{l:?}");
    }

    #[test]
    fn reset_schedule_cases() {
        let rc = [10.0, 12.0, 9.0, 11.0];
        let trc = [10.0, 11.0, 10.5, 13.0];
        assert_eq!(apply_reset_schedule(&rc, &trc, &[]).unwrap(), rc.to_vec());
        assert_eq!(apply_reset_schedule(&rc, &trc, &[1, 2, 3]).unwrap(), trc.to_vec());
        // single reset at index 1
        let one = apply_reset_schedule(&rc, &trc, &[1]).unwrap();
        let shift = trc[1] - trc[0] - (rc[1] - rc[0]);
        assert_eq!(one, vec![10.0, 12.0 + shift, 9.0 + shift, 11.0 + shift]);
        assert_eq!(one[1], trc[1]);
        let left = reset_left_limits(&rc, &trc, &[1]).unwrap();
        assert_eq!(left, vec![trc[0] + rc[1] - rc[0]]);
        assert_eq!(remove_resets(&one, &left, &trc, &[1]).unwrap(), rc.to_vec());
        assert!(apply_reset_schedule(&rc, &trc, &[2, 1]).is_err());
        assert!(apply_reset_schedule(&rc, &trc, &[4]).is_err());
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let pf = book(vec![swap("1", TradeType::Payer, 4.0, "A"), swap("2", TradeType::Receiver, 3.0, "B")]);
        let cr = credit(&[("A", 150.0), ("B", 300.0)], 100.0);
        let cfg = small_cfg();
        let run = |n| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
            pool.install(|| run_full(&pf, &cr, &ModelParams::default(), &cfg).unwrap())
        };
        let a = serde_json::to_string(&run(1)).unwrap();
        let b = serde_json::to_string(&run(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mirror_trade_reduces_ucva() {
        let base = book(vec![swap("1", TradeType::Payer, 5.0, "A")]);
        let cr = credit(&[("A", 300.0)], 100.0);
        let inc = incremental_xva(&base, swap("m", TradeType::Receiver, 5.0, "A"), &cr, &ModelParams::default(), &small_cfg()).unwrap();
        assert!(inc.ftp.d_ucva < 0.0);
        assert!(inc.with_trade.ucva.value.abs() < 1e-9);
        assert_eq!(inc.ftp.ftp, inc.ftp.d_trc + inc.ftp.d_kva);
        assert!(incremental_xva(&base, swap("1", TradeType::Receiver, 5.0, "A"), &cr, &ModelParams::default(), &small_cfg()).is_err());
    }

    #[test]
    fn first_trade_ftp_is_full_cost() {
        let cr = credit(&[("A", 300.0)], 100.0);
        let cfg = EngineConfig {
            horizon: Some(5.0),
            ..small_cfg()
        };
        let empty = Portfolio {
            netting_sets: vec![NettingSet {
                id: "A".into(),
                counterparty: "A".into(),
                margin: MarginSpec::default(),
                trades: vec![],
            }],
        };
        let inc = incremental_xva(&empty, swap("1", TradeType::Payer, 5.0, "A"), &cr, &ModelParams::default(), &cfg).unwrap();
        assert!((inc.ftp.ftp - (inc.with_trade.trc + inc.with_trade.kva.value)).abs() < 1e-12);
    }
}
