//! Interest-rate swaps, netting sets, margin rules and analytic mark-to-market
//! under the Gaussian short-rate model.
//!
//! Bond prices are `P(t, T) = A(t, T) exp(-B(t, T) r_t)`. A swap's fixed leg is a
//! strip of bonds; the floating leg is valued as the next reset payment minus
//! the bond at maturity, with the running fixing approximated from the current
//! short rate so that the mark-to-market stays a function of `(t, r_t)`.
//! Accruals are year fractions on the ACT/365F convention, which on a year-based
//! grid reduces to the difference of times.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, XvaError};
use crate::market_sim::{ModelParams, ScenarioSet};

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TradeType {
    /// Pay fixed, receive floating.
    Payer,
    /// Receive fixed, pay floating.
    Receiver,
}

impl TradeType {
    fn sign(self) -> f64 {
        match self {
            TradeType::Payer => 1.0,
            TradeType::Receiver => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub id: String,
    pub trade_type: TradeType,
    pub notional: f64,
    pub maturity_years: f64,
    /// `None` means the par rate at inception.
    pub fixed_rate: Option<f64>,
    pub fixed_tenor_months: u32,
    pub float_tenor_months: u32,
    pub netting_set: String,
}

impl Trade {
    pub fn validate(&self) -> Result<()> {
        if !(self.notional > 0.0) || !self.notional.is_finite() {
            return Err(XvaError::Config(format!("trade {}: notional must be positive", self.id)));
        }
        if !(self.maturity_years > 0.0) || !self.maturity_years.is_finite() {
            return Err(XvaError::Config(format!("trade {}: maturity must be positive", self.id)));
        }
        if self.fixed_tenor_months == 0 || self.float_tenor_months == 0 {
            return Err(XvaError::Config(format!("trade {}: payment tenors must be positive", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "model")]
pub enum ImModel {
    #[default]
    None,
    Fixed {
        amount: f64,
    },
    /// Quantile of the mark-to-market move over `horizon` years at tail level `alpha`.
    Quantile {
        alpha: f64,
        horizon: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSpec {
    /// Variation margin threshold; infinity (`null` in JSON) means uncollateralized.
    #[serde(default = "no_threshold", with = "threshold")]
    pub vm_threshold: f64,
    #[serde(default)]
    pub im_received: ImModel,
    #[serde(default)]
    pub im_posted: ImModel,
}

fn no_threshold() -> f64 {
    f64::INFINITY
}

mod threshold {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl Default for MarginSpec {
    fn default() -> Self {
        Self {
            vm_threshold: f64::INFINITY,
            im_received: ImModel::None,
            im_posted: ImModel::None,
        }
    }
}

impl MarginSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.vm_threshold >= 0.0) {
            return Err(XvaError::Config("vm threshold must be nonnegative".into()));
        }
        for m in [&self.im_received, &self.im_posted] {
            match *m {
                ImModel::Fixed { amount } if !(amount >= 0.0) => {
                    return Err(XvaError::Config("fixed initial margin must be nonnegative".into()))
                }
                ImModel::Quantile { alpha, horizon } if !(alpha > 0.0 && alpha < 1.0) || !(horizon > 0.0) => {
                    return Err(XvaError::Config("quantile margin needs alpha in (0,1) and a positive horizon".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Sign-preserving truncation of the mark-to-market beyond the threshold.
    #[inline]
    pub fn variation_margin(&self, mtm: f64) -> f64 {
        if self.vm_threshold.is_infinite() {
            0.0
        } else {
            mtm.signum() * (mtm.abs() - self.vm_threshold).max(0.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NettingSet {
    pub id: String,
    pub counterparty: String,
    pub margin: MarginSpec,
    pub trades: Vec<Trade>,
}

impl NettingSet {
    pub fn maturity(&self) -> f64 {
        self.trades.iter().map(|t| t.maturity_years).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Portfolio {
    pub netting_sets: Vec<NettingSet>,
}

impl Portfolio {
    pub fn maturity(&self) -> f64 {
        self.netting_sets.iter().map(NettingSet::maturity).fold(0.0, f64::max)
    }

    pub fn n_trades(&self) -> usize {
        self.netting_sets.iter().map(|s| s.trades.len()).sum()
    }

    pub fn trades(&self) -> impl Iterator<Item = &Trade> {
        self.netting_sets.iter().flat_map(|s| s.trades.iter())
    }

    pub fn set_index(&self, id: &str) -> Option<usize> {
        self.netting_sets.iter().position(|s| s.id == id)
    }

    /// Copy with `trade` appended to its netting set.
    pub fn with_trade(&self, trade: Trade) -> Result<Portfolio> {
        if self.trades().any(|t| t.id == trade.id) {
            return Err(XvaError::Config(format!("trade {} already in the portfolio", trade.id)));
        }
        trade.validate()?;
        let mut out = self.clone();
        let i = out
            .set_index(&trade.netting_set)
            .ok_or_else(|| XvaError::Config(format!("unknown netting set {}", trade.netting_set)))?;
        out.netting_sets[i].trades.push(trade);
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.netting_sets {
            s.margin.validate()?;
            for t in &s.trades {
                t.validate()?;
                if t.netting_set != s.id {
                    return Err(XvaError::Config(format!("trade {} filed under set {}", t.id, s.id)));
                }
                if !ids.insert(t.id.clone()) {
                    return Err(XvaError::Config(format!("duplicate trade id {}", t.id)));
                }
            }
        }
        Ok(())
    }
}

/// `(ln A, B)` of the bond price over time to maturity `tau`.
#[inline]
pub fn bond_coefficients(p: &ModelParams, tau: f64) -> (f64, f64) {
    let k = p.mean_reversion;
    let s2 = p.rate_vol * p.rate_vol;
    if k < 1e-8 {
        (s2 * tau * tau * tau / 6.0, tau)
    } else {
        let b = (1.0 - (-k * tau).exp()) / k;
        let ln_a = (p.long_term_rate - s2 / (2.0 * k * k)) * (b - tau) - s2 * b * b / (4.0 * k);
        (ln_a, b)
    }
}

#[inline]
pub fn bond_price(p: &ModelParams, tau: f64, r: f64) -> f64 {
    let (a, b) = bond_coefficients(p, tau);
    (a - b * r).exp()
}

/// Payment dates generated backwards from maturity.
fn schedule(maturity: f64, months: u32) -> Vec<f64> {
    let step = months as f64 / 12.0;
    let mut out = Vec::new();
    let mut j = 0usize;
    loop {
        let d = maturity - j as f64 * step;
        if d <= EPS {
            break;
        }
        out.push(d);
        j += 1;
    }
    out.reverse();
    out
}

#[derive(Debug, Clone)]
struct PricedTrade {
    sign: f64,
    notional: f64,
    maturity: f64,
    fixed_rate: f64,
    /// (payment date, accrual)
    fixed: Vec<(f64, f64)>,
    float: Vec<f64>,
}

impl PricedTrade {
    fn new(t: &Trade, p: &ModelParams) -> Self {
        let fixed_dates = schedule(t.maturity_years, t.fixed_tenor_months);
        let fixed: Vec<(f64, f64)> = fixed_dates
            .iter()
            .enumerate()
            .map(|(i, &d)| (d, d - if i == 0 { 0.0 } else { fixed_dates[i - 1] }))
            .collect();
        let float = schedule(t.maturity_years, t.float_tenor_months);
        let fixed_rate = t.fixed_rate.unwrap_or_else(|| {
            let annuity: f64 = fixed.iter().map(|&(d, a)| a * bond_price(p, d, p.r0)).sum();
            (1.0 - bond_price(p, t.maturity_years, p.r0)) / annuity
        });
        Self {
            sign: t.trade_type.sign(),
            notional: t.notional,
            maturity: t.maturity_years,
            fixed_rate,
            fixed,
            float,
        }
    }

    /// Affine-exponential terms `(coef, date key, reset key)` of the value at `t`.
    fn terms(&self, t: f64, mut push: impl FnMut(f64, f64, Option<f64>)) {
        if t >= self.maturity - EPS {
            return;
        }
        let n = self.sign * self.notional;
        let i = self.float.partition_point(|&d| d <= t + EPS);
        let next = self.float[i];
        let prev = if i == 0 { 0.0 } else { self.float[i - 1] };
        push(n, next, Some(prev));
        push(-n, self.maturity, None);
        for &(d, acc) in &self.fixed {
            if d > t + EPS {
                push(-n * self.fixed_rate * acc, d, None);
            }
        }
    }

    fn value(&self, p: &ModelParams, t: f64, r: f64) -> f64 {
        let mut v = 0.0;
        self.terms(t, |c, d, reset| {
            let (a1, b1) = bond_coefficients(p, d - t);
            let (a, b) = match reset {
                Some(prev) => {
                    let (a0, b0) = bond_coefficients(p, d - prev);
                    (a1 - a0, b1 - b0)
                }
                None => (a1, b1),
            };
            v += c * (a - b * r).exp();
        });
        v
    }
}

/// Swap pricer for a whole portfolio, with par rates fixed at construction.
#[derive(Debug, Clone)]
pub struct Pricer {
    params: ModelParams,
    sets: Vec<Vec<PricedTrade>>,
    set_maturity: Vec<f64>,
    margins: Vec<MarginSpec>,
}

/// Per-set exposure quantities at one `(t, r)` state.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SetState {
    pub mtm: f64,
    pub vm: f64,
    /// Net spot exposure `mtm - vm`.
    pub p: f64,
    pub im_received: f64,
    pub im_posted: f64,
}

impl Pricer {
    pub fn new(portfolio: &Portfolio, params: &ModelParams) -> Self {
        let sets = portfolio
            .netting_sets
            .iter()
            .map(|s| s.trades.iter().map(|t| PricedTrade::new(t, params)).collect())
            .collect();
        Self {
            params: params.clone(),
            sets,
            set_maturity: portfolio.netting_sets.iter().map(NettingSet::maturity).collect(),
            margins: portfolio.netting_sets.iter().map(|s| s.margin.clone()).collect(),
        }
    }

    pub fn n_sets(&self) -> usize {
        self.sets.len()
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Fixed rates actually used, per set and trade.
    pub fn fixed_rates(&self) -> Vec<Vec<f64>> {
        self.sets.iter().map(|s| s.iter().map(|t| t.fixed_rate).collect()).collect()
    }

    pub fn trade_value(&self, set: usize, trade: usize, t: f64, r: f64) -> f64 {
        self.sets[set][trade].value(&self.params, t, r)
    }

    pub fn set_value(&self, set: usize, t: f64, r: f64) -> f64 {
        self.sets[set].iter().map(|tr| tr.value(&self.params, t, r)).sum()
    }

    pub fn set_maturity(&self, set: usize) -> f64 {
        self.set_maturity[set]
    }

    fn initial_margin(&self, set: usize, model: &ImModel, t: f64, r: f64, mtm: f64, received: bool) -> f64 {
        if t >= self.set_maturity[set] - EPS {
            return 0.0;
        }
        match *model {
            ImModel::None => 0.0,
            ImModel::Fixed { amount } => amount,
            ImModel::Quantile { alpha, horizon } => {
                let p = &self.params;
                let mean = r + p.mean_reversion * (p.long_term_rate - r) * horizon;
                let sd = p.rate_vol * horizon.sqrt();
                let z = statrs::function::erf::erfc_inv(2.0 * alpha) * std::f64::consts::SQRT_2;
                let th = t + horizon;
                let v_lo = self.set_value(set, th, mean - z * sd);
                let v_hi = self.set_value(set, th, mean + z * sd);
                if received {
                    (v_lo.max(v_hi) - mtm).max(0.0)
                } else {
                    (mtm - v_lo.min(v_hi)).max(0.0)
                }
            }
        }
    }

    /// Margin-adjusted state of `set` given its mark-to-market at `(t, r)`.
    pub fn state_from_mtm(&self, set: usize, t: f64, r: f64, mtm: f64) -> SetState {
        let m = &self.margins[set];
        let vm = m.variation_margin(mtm);
        SetState {
            mtm,
            vm,
            p: mtm - vm,
            im_received: self.initial_margin(set, &m.im_received, t, r, mtm, true),
            im_posted: self.initial_margin(set, &m.im_posted, t, r, mtm, false),
        }
    }

    pub fn has_initial_margin(&self) -> bool {
        self.margins
            .iter()
            .any(|m| m.im_received != ImModel::None || m.im_posted != ImModel::None)
    }

    /// Precomputed evaluation of all set values at a fixed time.
    pub fn slice(&self, t: f64) -> Slice {
        let mut index: BTreeMap<(i64, i64), usize> = BTreeMap::new();
        let mut exps: Vec<(f64, f64)> = Vec::new();
        let ns = self.sets.len();
        let mut coef_by_set: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ns];
        let key = |x: f64| (x * 1e7).round() as i64;
        for (s, trades) in self.sets.iter().enumerate() {
            for tr in trades {
                tr.terms(t, |c, d, reset| {
                    let k = (key(d), reset.map_or(-1, key));
                    let j = *index.entry(k).or_insert_with(|| {
                        let (a1, b1) = bond_coefficients(&self.params, d - t);
                        let ab = match reset {
                            Some(prev) => {
                                let (a0, b0) = bond_coefficients(&self.params, d - prev);
                                (a1 - a0, b1 - b0)
                            }
                            None => (a1, b1),
                        };
                        exps.push(ab);
                        exps.len() - 1
                    });
                    coef_by_set[s].push((j, c));
                });
            }
        }
        let nt = exps.len();
        let mut coef = vec![0.0; ns * nt];
        for (s, list) in coef_by_set.iter().enumerate() {
            for &(j, c) in list {
                coef[s * nt + j] += c;
            }
        }
        Slice {
            t,
            ln_a: exps.iter().map(|e| e.0).collect(),
            b: exps.iter().map(|e| e.1).collect(),
            coef,
            n_sets: ns,
        }
    }
}

/// All set values at one time as `sum_j coef[s][j] exp(ln_a[j] - b[j] r)`.
#[derive(Debug, Clone)]
pub struct Slice {
    pub t: f64,
    ln_a: Vec<f64>,
    b: Vec<f64>,
    coef: Vec<f64>,
    n_sets: usize,
}

impl Slice {
    /// Writes the value of every set at short rate `r` into `out`.
    pub fn values(&self, r: f64, scratch: &mut Vec<f64>, out: &mut [f64]) {
        let nt = self.b.len();
        scratch.clear();
        scratch.extend(self.ln_a.iter().zip(&self.b).map(|(a, b)| (a - b * r).exp()));
        for (s, o) in out.iter_mut().enumerate().take(self.n_sets) {
            let row = &self.coef[s * nt..(s + 1) * nt];
            *o = row.iter().zip(scratch.iter()).map(|(c, e)| c * e).sum();
        }
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }
}

/// Mark-to-market of netting set `set` on a scenario path.
pub fn mtm(pricer: &Pricer, set: usize, s: &ScenarioSet, path: usize, t_index: usize) -> f64 {
    pricer.set_value(set, s.grid.times()[t_index], s.rate(path, t_index))
}

/// `(VM, IM received, IM posted)` of `set` on a scenario path.
pub fn margin_balances(pricer: &Pricer, set: usize, s: &ScenarioSet, path: usize, t_index: usize) -> (f64, f64, f64) {
    let t = s.grid.times()[t_index];
    let r = s.rate(path, t_index);
    let st = pricer.state_from_mtm(set, t, r, pricer.set_value(set, t, r));
    (st.vm, st.im_received, st.im_posted)
}
