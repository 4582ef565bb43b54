//! Credit inputs, the exposure cube, and the default-loss metrics built on it:
//! UCVA, first-to-default CVA/DVA, the MVA integrand and the blended IM
//! funding spread.
//!
//! UCVA estimators integrate the default time out analytically: given the
//! market path, a counterparty alive at `t_k` defaults in `(t_k, t_{k+1}]`
//! with probability `1 - S(t_{k+1}) / S(t_k)` and its loss is booked at
//! `t_{k+1}`, which is where a simulated default would be snapped to. This keeps
//! the estimator unbiased for the grid model while removing default noise.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XvaError};
use crate::instruments::{Portfolio, Pricer};
use crate::market_sim::{HazardCurve, ScenarioSet, TimeGrid, NEVER};
use crate::stats;

#[derive(Debug, Clone, PartialEq)]
pub struct CreditCurve {
    pub entity: String,
    pub recovery: f64,
    pub tenors: Vec<f64>,
    pub spreads_bps: Vec<f64>,
    pub hazard: HazardCurve,
}

impl CreditCurve {
    pub fn new(entity: &str, recovery: f64, tenors: Vec<f64>, spreads_bps: Vec<f64>) -> Result<Self> {
        let hazard = bootstrap_hazard(&tenors, &spreads_bps, recovery)?;
        Ok(Self {
            entity: entity.into(),
            recovery,
            tenors,
            spreads_bps,
            hazard,
        })
    }

    pub fn flat(entity: &str, recovery: f64, spread_bps: f64) -> Result<Self> {
        Self::new(entity, recovery, vec![1.0], vec![spread_bps])
    }
}

/// Piecewise-constant hazards from CDS spreads by the credit triangle applied
/// to cumulative hazard: `Lambda(T_j) = s_j T_j / (1 - R)`.
pub fn bootstrap_hazard(tenors: &[f64], spreads_bps: &[f64], recovery: f64) -> Result<HazardCurve> {
    if tenors.is_empty() || tenors.len() != spreads_bps.len() {
        return Err(XvaError::Config("credit curve needs matching tenors and spreads".into()));
    }
    if !(0.0..1.0).contains(&recovery) {
        return Err(XvaError::Config(format!("recovery {recovery} outside [0, 1)")));
    }
    if tenors.windows(2).any(|w| !(w[1] > w[0])) || !(tenors[0] > 0.0) {
        return Err(XvaError::Config("tenors must be positive and strictly increasing".into()));
    }
    if spreads_bps.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(XvaError::Config("spreads must be nonnegative".into()));
    }
    let lgd = 1.0 - recovery;
    let mut hazards = Vec::with_capacity(tenors.len());
    let mut prev_t = 0.0;
    let mut prev_cum = 0.0;
    for (&t, &s) in tenors.iter().zip(spreads_bps) {
        let cum = s * 1e-4 * t / lgd;
        hazards.push(((cum - prev_cum) / (t - prev_t)).max(0.0));
        prev_cum = prev_cum.max(cum);
        prev_t = t;
    }
    let mut knots = tenors.to_vec();
    *knots.last_mut().unwrap() = f64::INFINITY;
    Ok(HazardCurve { knots, hazards })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum ImFunding {
    /// IM funded at the unsecured spread.
    #[default]
    Unsecured,
    /// Specialist lender: the unsecured spread scaled by the IM fraction at risk.
    Blended,
    Fixed {
        spread: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FundingSpec {
    /// Flat unsecured funding spread; by default the bank's hazard times loss given default.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub im_funding: ImFunding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CreditSetup {
    pub counterparties: Vec<CreditCurve>,
    pub bank: CreditCurve,
    pub funding: FundingSpec,
}

impl CreditSetup {
    /// Entity hazards with counterparties first and the bank last.
    pub fn hazards(&self) -> Vec<HazardCurve> {
        self.counterparties
            .iter()
            .chain(std::iter::once(&self.bank))
            .map(|c| c.hazard.clone())
            .collect()
    }

    pub fn bank_index(&self) -> usize {
        self.counterparties.len()
    }

    pub fn entity_index(&self, id: &str) -> Option<usize> {
        self.counterparties.iter().position(|c| c.entity == id)
    }

    pub fn curve(&self, e: usize) -> &CreditCurve {
        if e == self.bank_index() {
            &self.bank
        } else {
            &self.counterparties[e]
        }
    }

    /// Unsecured funding spread at `t`.
    pub fn lambda(&self, t: f64) -> f64 {
        self.funding
            .lambda
            .unwrap_or_else(|| self.bank.hazard.hazard_at(t) * (1.0 - self.bank.recovery))
    }

    /// Counterparty entity index of every netting set.
    pub fn set_entities(&self, portfolio: &Portfolio) -> Result<Vec<usize>> {
        portfolio
            .netting_sets
            .iter()
            .map(|s| {
                self.entity_index(&s.counterparty).ok_or_else(|| {
                    XvaError::Config(format!("netting set {} references unknown counterparty {}", s.id, s.counterparty))
                })
            })
            .collect()
    }
}

/// Default loss of one netting set, booked at the snapped default index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEvent {
    pub step: usize,
    pub set: usize,
    pub loss: f64,
}

/// Per path, time and netting set exposure quantities.
///
/// Entry `(p, k, i)` sits at `(p * n_times + k) * n_sets + i`.
#[derive(Debug, Clone)]
pub struct ExposureCube {
    pub n_paths: usize,
    pub n_times: usize,
    pub n_sets: usize,
    pub set_entity: Vec<usize>,
    pub recovery: Vec<f64>,
    /// First grid index at or after portfolio maturity.
    pub end_index: usize,
    pub mtm: Vec<f64>,
    pub vm: Vec<f64>,
    pub p: Vec<f64>,
    /// Gap exposure used at defaults.
    pub q: Vec<f64>,
    pub im_received: Vec<f64>,
    pub im_posted: Vec<f64>,
    /// Counterparty losses up to the bank's default and maturity, per path.
    pub events: Vec<Vec<LossEvent>>,
}

impl ExposureCube {
    #[inline]
    pub fn at(&self, p: usize, k: usize, i: usize) -> usize {
        (p * self.n_times + k) * self.n_sets + i
    }
}

#[inline]
pub(crate) fn pos(x: f64) -> f64 {
    x.max(0.0)
}

#[inline]
pub(crate) fn neg(x: f64) -> f64 {
    (-x).max(0.0)
}

/// End index of the portfolio on a grid.
pub fn maturity_index(grid: &TimeGrid, portfolio_maturity: f64) -> usize {
    if portfolio_maturity <= grid.times()[0] {
        return 0;
    }
    grid.index_at_or_after(portfolio_maturity).unwrap_or(grid.len() - 1)
}

pub fn build_cube(portfolio: &Portfolio, s: &ScenarioSet, credit: &CreditSetup) -> Result<ExposureCube> {
    let pricer = Pricer::new(portfolio, &s.model.params);
    build_cube_with(&pricer, portfolio, s, credit, 0.0)
}

/// Fills the cube; `gap_shock` is added to the spot exposure to form `Q`.
pub fn build_cube_with(pricer: &Pricer, portfolio: &Portfolio, s: &ScenarioSet, credit: &CreditSetup, gap_shock: f64) -> Result<ExposureCube> {
    let set_entity = credit.set_entities(portfolio)?;
    if s.n_entities() != credit.counterparties.len() + 1 {
        return Err(XvaError::Argument("scenario entities do not match the credit setup".into()));
    }
    let ns = set_entity.len();
    let nt = s.n_times();
    let np = s.n_paths;
    let times = s.grid.times();
    let end_index = maturity_index(&s.grid, portfolio.maturity());
    let slices: Vec<_> = times.par_iter().map(|&t| pricer.slice(t)).collect();
    let recovery: Vec<f64> = set_entity.iter().map(|&e| credit.curve(e).recovery).collect();
    let bank = credit.bank_index();

    let rows: Vec<(Vec<[f64; 6]>, Vec<LossEvent>)> = (0..np)
        .into_par_iter()
        .map(|p| {
            let mut scratch = Vec::new();
            let mut vals = vec![0.0; ns];
            let mut row = vec![[0.0; 6]; nt * ns];
            for k in 0..nt {
                let r = s.rate(p, k);
                slices[k].values(r, &mut scratch, &mut vals);
                for i in 0..ns {
                    let st = pricer.state_from_mtm(i, times[k], r, vals[i]);
                    row[k * ns + i] = [st.mtm, st.vm, st.p, st.p + gap_shock, st.im_received, st.im_posted];
                }
            }
            let bank_step = s.default_step(p, bank) as u64;
            let mut events = Vec::new();
            for (i, &e) in set_entity.iter().enumerate() {
                let ds = s.default_step(p, e);
                if ds == 0 || ds == NEVER {
                    continue;
                }
                let k = ds as usize;
                // ties resolve with the bank defaulting last
                if k <= end_index && (k as u64) <= bank_step {
                    let c = row[k * ns + i];
                    events.push(LossEvent {
                        step: k,
                        set: i,
                        loss: (1.0 - recovery[i]) * pos(c[3] - c[4]),
                    });
                }
            }
            events.sort_by_key(|ev| (ev.step, ev.set));
            (row, events)
        })
        .collect();

    let n = np * nt * ns;
    let mut cube = ExposureCube {
        n_paths: np,
        n_times: nt,
        n_sets: ns,
        set_entity,
        recovery,
        end_index,
        mtm: Vec::with_capacity(n),
        vm: Vec::with_capacity(n),
        p: Vec::with_capacity(n),
        q: Vec::with_capacity(n),
        im_received: Vec::with_capacity(n),
        im_posted: Vec::with_capacity(n),
        events: Vec::with_capacity(np),
    };
    for (row, ev) in rows {
        for c in row {
            cube.mtm.push(c[0]);
            cube.vm.push(c[1]);
            cube.p.push(c[2]);
            cube.q.push(c[3]);
            cube.im_received.push(c[4]);
            cube.im_posted.push(c[5]);
        }
        cube.events.push(ev);
    }
    Ok(cube)
}

/// Per-path UCVA at the first time of `s`, defaults integrated out, bank default ignored.
pub fn ucva_paths(cube: &ExposureCube, s: &ScenarioSet, credit: &CreditSetup) -> Vec<f64> {
    let times = s.grid.times();
    let ns = cube.n_sets;
    // conditional default probabilities per set and step
    let pd: Vec<Vec<f64>> = cube
        .set_entity
        .iter()
        .map(|&e| {
            let h = &credit.curve(e).hazard;
            let s0 = h.survival(times[0]);
            (0..cube.n_times)
                .map(|k| if k == 0 { 0.0 } else { (h.survival(times[k - 1]) - h.survival(times[k])) / s0 })
                .collect()
        })
        .collect();
    (0..cube.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut v = 0.0;
            for i in 0..ns {
                if !s.alive(p, cube.set_entity[i], 0) {
                    continue;
                }
                let lgd = 1.0 - cube.recovery[i];
                for k in 1..=cube.end_index {
                    let c = cube.at(p, k, i);
                    v += lgd * pd[i][k] * s.df(p, k) * pos(cube.q[c] - cube.im_received[c]);
                }
            }
            v
        })
        .collect()
}

/// UCVA at `t_index` per primary path, averaged over the sub-paths of `s`.
///
/// `s` must be a scenario set starting at `t_index` (the primary set itself
/// for `t_index = 0`, otherwise secondary paths spawned there to maturity).
pub fn ucva(cube: &ExposureCube, s: &ScenarioSet, credit: &CreditSetup, t_index: usize) -> Result<Vec<f64>> {
    if s.origin_index != t_index {
        return Err(XvaError::Estimation(format!(
            "no scenario paths start at index {t_index} (set starts at {})",
            s.origin_index
        )));
    }
    let v = ucva_paths(cube, s, credit);
    Ok(v.chunks(s.group).map(stats::mean).collect())
}

/// Whose margin enters the first-to-default DVA term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DvaConvention {
    /// `(1 - R_i)(Q - IM_posted)^-` at counterparty defaults before the bank's.
    #[default]
    AsWritten,
    /// `(1 - R_bank)(Q + IM_posted)^-` at the bank's default, on sets whose
    /// counterparty is still alive.
    Symmetric,
}

/// Per-path discounted FTDCVA and FTDDVA cash flows.
pub fn ftd_paths(cube: &ExposureCube, s: &ScenarioSet, credit: &CreditSetup, convention: DvaConvention) -> (Vec<f64>, Vec<f64>) {
    let bank = credit.bank_index();
    let bank_lgd = 1.0 - credit.bank.recovery;
    (0..cube.n_paths)
        .map(|p| {
            let cva: f64 = cube.events[p].iter().map(|e| s.df(p, e.step) * e.loss).sum();
            let sb = s.default_step(p, bank);
            let mut dva = 0.0;
            match convention {
                DvaConvention::AsWritten => {
                    for (i, &e) in cube.set_entity.iter().enumerate() {
                        let k = s.default_step(p, e);
                        if k == 0 || k == NEVER || k as usize > cube.end_index || k > sb {
                            continue;
                        }
                        let c = cube.at(p, k as usize, i);
                        dva += s.df(p, k as usize) * (1.0 - cube.recovery[i]) * neg(cube.q[c] - cube.im_posted[c]);
                    }
                }
                DvaConvention::Symmetric => {
                    if sb != 0 && sb != NEVER && sb as usize <= cube.end_index {
                        let k = sb as usize;
                        for (i, &e) in cube.set_entity.iter().enumerate() {
                            if s.default_step(p, e) > sb {
                                let c = cube.at(p, k, i);
                                dva += s.df(p, k) * bank_lgd * neg(cube.q[c] + cube.im_posted[c]);
                            }
                        }
                    }
                }
            }
            (cva, dva)
        })
        .unzip()
}

/// FTDCVA and FTDDVA at time 0 with batch-means errors.
pub fn ftd_cva_dva(cube: &ExposureCube, s: &ScenarioSet, credit: &CreditSetup, convention: DvaConvention, blocks: usize) -> (stats::Estimate, stats::Estimate) {
    let (c, d) = ftd_paths(cube, s, credit, convention);
    (stats::batch_means(&c, blocks), stats::batch_means(&d, blocks))
}

/// IM funding spread on one path and time. Blended mode returns
/// `lambda * sum J (Q^- min IM_posted) / sum J IM_posted`, with 0/0 = 0.
pub fn im_spread(cube: &ExposureCube, s: &ScenarioSet, credit: &CreditSetup, p: usize, k: usize) -> f64 {
    let t = s.grid.times()[k];
    match credit.funding.im_funding {
        ImFunding::Unsecured => credit.lambda(t),
        ImFunding::Fixed { spread } => spread,
        ImFunding::Blended => {
            let mut num = 0.0;
            let mut den = 0.0;
            for (i, &e) in cube.set_entity.iter().enumerate() {
                if s.alive(p, e, k) {
                    let c = cube.at(p, k, i);
                    num += neg(cube.q[c]).min(cube.im_posted[c]);
                    den += cube.im_posted[c];
                }
            }
            blended_ratio(credit.lambda(t), num, den)
        }
    }
}

#[inline]
pub(crate) fn blended_ratio(lambda: f64, num: f64, den: f64) -> f64 {
    if den > 0.0 {
        lambda * num / den
    } else {
        0.0
    }
}

/// Blended IM spread per path at `t_index`.
pub fn blended_spread(cube: &ExposureCube, s: &ScenarioSet, credit: &CreditSetup, t_index: usize) -> Vec<f64> {
    let mut c = credit.clone();
    c.funding.im_funding = ImFunding::Blended;
    (0..cube.n_paths).map(|p| im_spread(cube, s, &c, p, t_index)).collect()
}

/// `lambda_bar * sum_i J^i IM_posted^i` per `(path, time)`, path-major.
pub fn mva_integrand(cube: &ExposureCube, s: &ScenarioSet, credit: &CreditSetup) -> Vec<f64> {
    let nt = cube.n_times;
    let mut out = vec![0.0; cube.n_paths * nt];
    out.par_chunks_mut(nt).enumerate().for_each(|(p, row)| {
        for (k, v) in row.iter_mut().enumerate() {
            let mut posted = 0.0;
            for (i, &e) in cube.set_entity.iter().enumerate() {
                if s.alive(p, e, k) {
                    posted += cube.im_posted[cube.at(p, k, i)];
                }
            }
            if posted > 0.0 {
                *v = im_spread(cube, s, credit, p, k) * posted;
            }
        }
    });
    out
}

/// UCVA of each netting set as a function of `(grid index, short rate)`, by
/// backward induction through the Euler transition of the short rate.
///
/// Used for the UCVA level on any state reached by primary or secondary
/// paths, which the loss process needs at every node.
#[derive(Debug, Clone)]
pub struct ConditionalUcva {
    n_times: usize,
    n_sets: usize,
    set_entity: Vec<usize>,
    r_lo: f64,
    dr: f64,
    n_r: usize,
    values: Vec<f64>,
}

impl ConditionalUcva {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        pricer: &Pricer,
        set_entity: &[usize],
        credit: &CreditSetup,
        grid: &TimeGrid,
        end_index: usize,
        r_range: (f64, f64),
        n_r: usize,
        gap_shock: f64,
    ) -> Self {
        let params = pricer.params();
        let times = grid.times();
        let nt = times.len();
        let ns = set_entity.len();
        let (mut lo, mut hi) = r_range;
        if hi - lo < 1e-3 {
            lo -= 5e-4;
            hi += 5e-4;
        }
        let n_r = n_r.max(4);
        let dr = (hi - lo) / (n_r - 1) as f64;
        let (gx, gw) = stats::gauss_hermite_normal(32);
        let mut me = Self {
            n_times: nt,
            n_sets: ns,
            set_entity: set_entity.to_vec(),
            r_lo: lo,
            dr,
            n_r,
            values: vec![0.0; ns * nt * n_r],
        };
        let lgd: Vec<f64> = set_entity.iter().map(|&e| 1.0 - credit.curve(e).recovery).collect();
        for k in (0..end_index.min(nt - 1)).rev() {
            let dt = times[k + 1] - times[k];
            let slice = pricer.slice(times[k + 1]);
            let pd: Vec<f64> = set_entity
                .iter()
                .map(|&e| {
                    let h = &credit.curve(e).hazard;
                    1.0 - h.survival(times[k + 1]) / h.survival(times[k])
                })
                .collect();
            let rows: Vec<Vec<f64>> = (0..n_r)
                .into_par_iter()
                .map(|n| {
                    let r = lo + n as f64 * dr;
                    let mean = r + params.mean_reversion * (params.long_term_rate - r) * dt;
                    let sd = params.rate_vol * dt.sqrt();
                    let mut acc = vec![0.0; ns];
                    let mut scratch = Vec::new();
                    let mut mtm = vec![0.0; ns];
                    for (x, w) in gx.iter().zip(&gw) {
                        let r1 = mean + sd * x;
                        slice.values(r1, &mut scratch, &mut mtm);
                        for i in 0..ns {
                            let st = pricer.state_from_mtm(i, times[k + 1], r1, mtm[i]);
                            let loss = lgd[i] * pos(st.p + gap_shock - st.im_received);
                            let cont = me.set_value(i, k + 1, r1);
                            acc[i] += w * (pd[i] * loss + (1.0 - pd[i]) * cont);
                        }
                    }
                    let disc = (-r * dt).exp();
                    acc.iter().map(|a| a * disc).collect()
                })
                .collect();
            for (n, row) in rows.iter().enumerate() {
                for (i, v) in row.iter().enumerate() {
                    me.values[(i * nt + k) * n_r + n] = *v;
                }
            }
        }
        me
    }

    /// UCVA of set `i` at grid index `k` and short rate `r`.
    #[inline]
    pub fn set_value(&self, i: usize, k: usize, r: f64) -> f64 {
        let base = (i * self.n_times + k) * self.n_r;
        let v = &self.values[base..base + self.n_r];
        let x = ((r - self.r_lo) / self.dr).clamp(0.0, (self.n_r - 1) as f64);
        let j = (x.floor() as usize).min(self.n_r - 2);
        let t = x - j as f64;
        let p1 = v[j];
        let p2 = v[j + 1];
        let p0 = if j > 0 { v[j - 1] } else { 2.0 * p1 - p2 };
        let p3 = if j + 2 < self.n_r { v[j + 2] } else { 2.0 * p2 - p1 };
        // Catmull-Rom
        p1 + 0.5 * t * (p2 - p0 + t * (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3 + t * (3.0 * (p1 - p2) + p3 - p0)))
    }

    /// Sum over sets whose counterparty passes `alive`.
    #[inline]
    pub fn value(&self, k: usize, r: f64, alive: impl Fn(usize) -> bool) -> f64 {
        (0..self.n_sets)
            .filter(|&i| alive(self.set_entity[i]))
            .map(|i| self.set_value(i, k, r))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instruments::{MarginSpec, NettingSet, Trade, TradeType};
    use crate::market_sim::{generate_primary, ModelParams};

    fn setup(cp_bps: f64, bank_bps: f64) -> CreditSetup {
        CreditSetup {
            counterparties: vec![CreditCurve::flat("C", 0.4, cp_bps).unwrap()],
            bank: CreditCurve::flat("Bank", 0.4, bank_bps).unwrap(),
            funding: FundingSpec::default(),
        }
    }

    fn one_swap(ty: TradeType, margin: MarginSpec) -> Portfolio {
        Portfolio {
            netting_sets: vec![NettingSet {
                id: "S".into(),
                counterparty: "C".into(),
                margin,
                trades: vec![Trade {
                    id: "1".into(),
                    trade_type: ty,
                    notional: 10_000.0,
                    maturity_years: 10.0,
                    fixed_rate: None,
                    fixed_tenor_months: 6,
                    float_tenor_months: 3,
                    netting_set: "S".into(),
                }],
            }],
        }
    }

    #[test]
    fn flat_spread_bootstrap() {
        let c = CreditCurve::flat("X", 0.4, 100.0).unwrap();
        assert!((c.hazard.hazard_at(3.0) - 0.016_666_666_666_666_67).abs() < 1e-15);
        let z = CreditCurve::new("Z", 0.4, vec![1.0, 5.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(z.hazard.hazard_at(7.0), 0.0);
        assert!(CreditCurve::new("Y", 0.4, vec![5.0, 1.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn triangle_bootstrap_reprices_cumulative_hazard() {
        let tenors = vec![0.5, 1.0, 2.0, 5.0, 10.0];
        let spreads = vec![44.0, 59.0, 102.0, 235.0, 295.0];
        let h = bootstrap_hazard(&tenors, &spreads, 0.4).unwrap();
        for (t, s) in tenors.iter().zip(&spreads) {
            assert!((h.cumulative(*t) - s * 1e-4 * t / 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn spot_exposure_equals_mtm_minus_vm() {
        let g = TimeGrid::uniform(10.0, 0.5).unwrap();
        let cr = setup(100.0, 50.0);
        let half = MarginSpec {
            vm_threshold: 100.0,
            ..MarginSpec::default()
        };
        let pf = one_swap(TradeType::Payer, half);
        let s = generate_primary(&ModelParams::default(), &cr.hazards(), &g, 50, 3).unwrap();
        let cube = build_cube(&pf, &s, &cr).unwrap();
        for j in 0..cube.p.len() {
            assert_eq!(cube.p[j], cube.mtm[j] - cube.vm[j]);
            assert!(cube.p[j].abs() <= 100.0 + 1e-9);
        }
    }

    #[test]
    fn full_collateral_means_no_losses() {
        let g = TimeGrid::uniform(10.0, 0.5).unwrap();
        let cr = setup(500.0, 50.0);
        let pf = one_swap(
            TradeType::Payer,
            MarginSpec {
                vm_threshold: 0.0,
                ..MarginSpec::default()
            },
        );
        let s = generate_primary(&ModelParams::default(), &cr.hazards(), &g, 200, 3).unwrap();
        let cube = build_cube(&pf, &s, &cr).unwrap();
        assert!(cube.events.iter().flatten().all(|e| e.loss == 0.0));
        assert!(cube.events.iter().any(|e| !e.is_empty()));
        assert!(ucva_paths(&cube, &s, &cr).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unknown_counterparty_is_config_error() {
        let g = TimeGrid::uniform(10.0, 0.5).unwrap();
        let cr = setup(100.0, 50.0);
        let mut pf = one_swap(TradeType::Payer, MarginSpec::default());
        pf.netting_sets[0].counterparty = "nobody".into();
        let s = generate_primary(&ModelParams::default(), &cr.hazards(), &g, 2, 3).unwrap();
        assert!(matches!(build_cube(&pf, &s, &cr), Err(XvaError::Config(_))));
    }

    /// Hand-built cube with constant exposure on a flat zero-rate scenario set.
    fn constant_cube(s: &ScenarioSet, q: f64) -> ExposureCube {
        let nt = s.n_times();
        let n = s.n_paths * nt;
        let mut events = Vec::new();
        for p in 0..s.n_paths {
            let k = s.default_step(p, 0);
            let sb = s.default_step(p, 1);
            let mut ev = Vec::new();
            if k != NEVER && k <= sb {
                ev.push(LossEvent {
                    step: k as usize,
                    set: 0,
                    loss: 0.6 * q,
                });
            }
            events.push(ev);
        }
        ExposureCube {
            n_paths: s.n_paths,
            n_times: nt,
            n_sets: 1,
            set_entity: vec![0],
            recovery: vec![0.4],
            end_index: nt - 1,
            mtm: vec![q; n],
            vm: vec![0.0; n],
            p: vec![q; n],
            q: vec![q; n],
            im_received: vec![0.0; n],
            im_posted: vec![0.0; n],
            events,
        }
    }

    fn zero_rate() -> ModelParams {
        ModelParams {
            r0: 0.0,
            mean_reversion: 0.0,
            rate_vol: 0.0,
            long_term_rate: 0.0,
            hist_drift_shift: 0.0,
            correlation: vec![],
        }
    }

    #[test]
    fn forced_default_loses_sixty() {
        let g = TimeGrid::uniform(2.0, 0.5).unwrap();
        let mut s = generate_primary(&zero_rate(), &[HazardCurve::flat(0.0), HazardCurve::flat(0.0)], &g, 1, 1).unwrap();
        s.default_step[0] = 2;
        s.default_time[0] = 1.0;
        let cube = constant_cube(&s, 100.0);
        assert_eq!(cube.events[0], vec![LossEvent { step: 2, set: 0, loss: 60.0 }]);
    }

    #[test]
    fn constant_exposure_ucva_matches_closed_form() {
        let gamma = 0.03;
        let g = TimeGrid::uniform(10.0, 0.25).unwrap();
        let cr = CreditSetup {
            counterparties: vec![CreditCurve::flat("C", 0.4, gamma * 0.6 * 1e4).unwrap()],
            bank: CreditCurve::flat("Bank", 0.4, 0.0).unwrap(),
            funding: FundingSpec::default(),
        };
        let s = generate_primary(&zero_rate(), &cr.hazards(), &g, 4000, 8).unwrap();
        let cube = constant_cube(&s, 250.0);
        let exact = 0.6 * 250.0 * (1.0 - (-gamma * 10.0f64).exp());
        let integrated = stats::batch_means(&ucva_paths(&cube, &s, &cr), 20);
        assert!((integrated.value - exact).abs() < 1e-9);
        // realized-default estimator agrees within its error
        let (cva, _) = ftd_cva_dva(&cube, &s, &cr, DvaConvention::AsWritten, 20);
        assert!((cva.value - exact).abs() < 3.0 * cva.se, "{} vs {exact}", cva.value);
    }

    #[test]
    fn zero_hazard_gives_zero_ucva() {
        let g = TimeGrid::uniform(10.0, 0.5).unwrap();
        let cr = setup(0.0, 50.0);
        let pf = one_swap(TradeType::Payer, MarginSpec::default());
        let s = generate_primary(&ModelParams::default(), &cr.hazards(), &g, 100, 3).unwrap();
        let cube = build_cube(&pf, &s, &cr).unwrap();
        assert!(ucva(&cube, &s, &cr, 0).unwrap().iter().all(|v| *v == 0.0));
        assert!(ucva(&cube, &s, &cr, 3).is_err());
    }

    #[test]
    fn no_bank_default_makes_ftdcva_equal_ucva() {
        let g = TimeGrid::uniform(10.0, 0.5).unwrap();
        let cr = setup(300.0, 0.0);
        let pf = one_swap(TradeType::Payer, MarginSpec::default());
        let s = generate_primary(&ModelParams::default(), &cr.hazards(), &g, 4000, 21).unwrap();
        let cube = build_cube(&pf, &s, &cr).unwrap();
        let u = stats::batch_means(&ucva_paths(&cube, &s, &cr), 20);
        let (c, _) = ftd_cva_dva(&cube, &s, &cr, DvaConvention::AsWritten, 20);
        let se = (u.se.powi(2) + c.se.powi(2)).sqrt();
        assert!((u.value - c.value).abs() < 3.0 * se, "{} vs {}", u.value, c.value);
        assert!(c.value <= u.value + 3.0 * se);
    }

    #[test]
    fn mirrored_book_swaps_cva_and_dva() {
        let g = TimeGrid::uniform(10.0, 0.5).unwrap();
        let cr = setup(200.0, 200.0);
        let payer = one_swap(TradeType::Payer, MarginSpec::default());
        let receiver = one_swap(TradeType::Receiver, MarginSpec::default());
        let s = generate_primary(&ModelParams::default(), &cr.hazards(), &g, 20_000, 4).unwrap();
        let cp = build_cube(&payer, &s, &cr).unwrap();
        let cr_ = build_cube(&receiver, &s, &cr).unwrap();
        // same default events: the receiver's DVA is the payer's CVA
        let (c, _) = ftd_paths(&cp, &s, &cr, DvaConvention::AsWritten);
        let (_, d) = ftd_paths(&cr_, &s, &cr, DvaConvention::AsWritten);
        for (x, y) in c.iter().zip(&d) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
        // equal hazards and recoveries: bank-default DVA matches in distribution
        let (_, d) = ftd_paths(&cr_, &s, &cr, DvaConvention::Symmetric);
        let a = stats::batch_means(&c, 20);
        let b = stats::batch_means(&d, 20);
        let se = (a.se.powi(2) + b.se.powi(2)).sqrt();
        assert!((a.value - b.value).abs() < 3.0 * se, "{} vs {} (se {se})", a.value, b.value);
    }

    #[test]
    fn zero_exposure_gives_zero_ftd() {
        let g = TimeGrid::uniform(5.0, 0.5).unwrap();
        let s = generate_primary(&zero_rate(), &[HazardCurve::flat(0.2), HazardCurve::flat(0.2)], &g, 100, 1).unwrap();
        let cube = constant_cube(&s, 0.0);
        let cr = setup(100.0, 100.0);
        for conv in [DvaConvention::AsWritten, DvaConvention::Symmetric] {
            let (c, d) = ftd_cva_dva(&cube, &s, &cr, conv, 20);
            assert_eq!((c.value, d.value), (0.0, 0.0));
        }
    }

    #[test]
    fn blended_spread_examples() {
        assert_eq!(blended_ratio(0.02, 100.0, 200.0), 0.01);
        assert_eq!(blended_ratio(0.02, 0.0, 0.0), 0.0);
        let g = TimeGrid::uniform(2.0, 0.5).unwrap();
        let s = generate_primary(&zero_rate(), &[HazardCurve::flat(0.0), HazardCurve::flat(0.0)], &g, 1, 1).unwrap();
        let mut cube = constant_cube(&s, -500.0);
        cube.im_posted = vec![100.0; cube.q.len()];
        let mut cr = setup(0.0, 0.0);
        cr.funding.lambda = Some(0.02);
        assert!((blended_spread(&cube, &s, &cr, 1)[0] - 0.02).abs() < 1e-15);
        cube.q = vec![10.0; cube.q.len()];
        assert_eq!(blended_spread(&cube, &s, &cr, 1)[0], 0.0);
    }

    #[test]
    fn mva_integrand_constant_margin() {
        let g = TimeGrid::uniform(10.0, 0.5).unwrap();
        let s = generate_primary(&zero_rate(), &[HazardCurve::flat(0.0), HazardCurve::flat(0.0)], &g, 2, 1).unwrap();
        let mut cube = constant_cube(&s, 0.0);
        cube.im_posted = vec![100.0; cube.q.len()];
        let mut cr = setup(0.0, 0.0);
        cr.funding.im_funding = ImFunding::Fixed { spread: 0.01 };
        let m = mva_integrand(&cube, &s, &cr);
        assert!(m.iter().all(|v| (*v - 1.0).abs() < 1e-15));
        cr.funding.im_funding = ImFunding::Fixed { spread: 0.0 };
        assert!(mva_integrand(&cube, &s, &cr).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lattice_agrees_with_monte_carlo() {
        let g = TimeGrid::uniform(10.0, 0.5).unwrap();
        let cr = setup(250.0, 100.0);
        let params = ModelParams::default();
        let pf = one_swap(TradeType::Payer, MarginSpec::default());
        let s = generate_primary(&params, &cr.hazards(), &g, 4000, 12).unwrap();
        let pricer = Pricer::new(&pf, &params);
        let cube = build_cube_with(&pricer, &pf, &s, &cr, 0.0).unwrap();
        let mc = stats::batch_means(&ucva_paths(&cube, &s, &cr), 20);
        let lat = ConditionalUcva::build(&pricer, &cube.set_entity, &cr, &g, cube.end_index, (-0.1, 0.15), 201, 0.0);
        let v0 = lat.value(0, params.r0, |_| true);
        assert!((v0 - mc.value).abs() < 3.0 * mc.se + 1e-3 * mc.value, "{v0} vs {} ({})", mc.value, mc.se);
        assert_eq!(lat.value(cube.end_index, 0.02, |_| true), 0.0);
    }

    #[test]
    fn nested_ucva_matches_lattice_at_later_time() {
        use crate::market_sim::spawn_secondary_window;
        let g = TimeGrid::uniform(10.0, 0.5).unwrap();
        let cr = setup(250.0, 100.0);
        let params = ModelParams::default();
        let pf = one_swap(TradeType::Payer, MarginSpec::default());
        let s = generate_primary(&params, &cr.hazards(), &g, 8, 12).unwrap();
        let pricer = Pricer::new(&pf, &params);
        let k = 6;
        let sec = spawn_secondary_window(&s, k, g.len() - 1, 2000, 5).unwrap();
        let cube = build_cube_with(&pricer, &pf, &sec, &cr, 0.0).unwrap();
        let nested = ucva(&cube, &sec, &cr, k).unwrap();
        let per_sub = ucva_paths(&cube, &sec, &cr);
        let lat = ConditionalUcva::build(&pricer, &cube.set_entity, &cr, &g, 20, (-0.1, 0.15), 201, 0.0);
        for p in 0..8 {
            if !s.alive(p, 0, k) {
                assert_eq!(nested[p], 0.0);
                continue;
            }
            let l = lat.set_value(0, k, s.rate(p, k));
            let e = stats::batch_means(&per_sub[p * 2000..(p + 1) * 2000], 20);
            assert!((nested[p] - l).abs() < 3.5 * e.se + 0.01 * l, "path {p}: {} vs {l} (se {})", nested[p], e.se);
        }
    }
}
