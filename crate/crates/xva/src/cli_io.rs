//! Portfolio, credit and run-configuration files, and report emission.
//!
//! Portfolio CSV has two sections, each introduced by its header line:
//!
//! ```text
//! set_id,counterparty,vm_threshold,im_received,im_posted
//! A,A,inf,none,none
//! trade_id,type,notional,maturity_years,fixed_rate,fixed_tenor_months,float_tenor_months,netting_set
//! 6,payer,10000,30,par,6,3,A
//! ```
//!
//! Margin models are written `none`, `fixed:<amount>` or
//! `quantile:<tail prob>:<horizon years>`. Credit CSV is one row per quote:
//! `entity,role,recovery,tenor,spread_bps` with role `counterparty` or `bank`.
//! Lines starting with `#` are comments. Files ending in `.json` are read as
//! JSON instead.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{EngineConfig, IncrementalReport, XVAReport};
use crate::error::{Result, XvaError};
use crate::exposure::{CreditCurve, CreditSetup, FundingSpec};
use crate::instruments::{ImModel, MarginSpec, NettingSet, Portfolio, Trade, TradeType};
use crate::market_sim::ModelParams;

pub const SET_HEADER: [&str; 5] = ["set_id", "counterparty", "vm_threshold", "im_received", "im_posted"];
pub const TRADE_HEADER: [&str; 8] = [
    "trade_id",
    "type",
    "notional",
    "maturity_years",
    "fixed_rate",
    "fixed_tenor_months",
    "float_tenor_months",
    "netting_set",
];
pub const CREDIT_HEADER: [&str; 5] = ["entity", "role", "recovery", "tenor", "spread_bps"];

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| XvaError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn json_error(file: &str, e: serde_json::Error) -> XvaError {
    XvaError::Parse {
        file: file.into(),
        line: e.line() as u64,
        msg: e.to_string(),
    }
}

/// Non-comment CSV records with their 1-based line numbers.
fn records(text: &str, file: &str) -> Result<Vec<(u64, Vec<String>)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| XvaError::Parse {
            file: file.into(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        out.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(out)
}

fn perr(file: &str, line: u64, msg: impl Into<String>) -> XvaError {
    XvaError::Parse {
        file: file.into(),
        line,
        msg: msg.into(),
    }
}

fn num(file: &str, line: u64, field: &str, s: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| perr(file, line, format!("{field}: cannot read `{s}` as a number")))
}

fn is_header(rec: &[String], header: &[&str]) -> bool {
    rec.len() == header.len() && rec.iter().zip(header).all(|(a, b)| a.eq_ignore_ascii_case(b))
}

pub fn parse_im(s: &str) -> Option<ImModel> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["none"] | [""] => Some(ImModel::None),
        ["fixed", a] => Some(ImModel::Fixed { amount: a.parse().ok()? }),
        ["quantile", a, h] => Some(ImModel::Quantile {
            alpha: a.parse().ok()?,
            horizon: h.parse().ok()?,
        }),
        _ => None,
    }
}

pub fn format_im(m: &ImModel) -> String {
    match m {
        ImModel::None => "none".into(),
        ImModel::Fixed { amount } => format!("fixed:{amount}"),
        ImModel::Quantile { alpha, horizon } => format!("quantile:{alpha}:{horizon}"),
    }
}

fn parse_trade(file: &str, line: u64, r: &[String]) -> Result<Trade> {
    if r.len() != TRADE_HEADER.len() {
        return Err(perr(file, line, format!("expected {} trade fields, found {}", TRADE_HEADER.len(), r.len())));
    }
    let trade_type = match r[1].to_ascii_lowercase().as_str() {
        "payer" => TradeType::Payer,
        "receiver" => TradeType::Receiver,
        other => return Err(perr(file, line, format!("unknown trade type `{other}`"))),
    };
    let fixed_rate = match r[4].to_ascii_lowercase().as_str() {
        "par" | "" => None,
        x => Some(num(file, line, "fixed_rate", x)?),
    };
    let months = |i: usize, f: &str| r[i].parse::<u32>().map_err(|_| perr(file, line, format!("{f}: expected whole months, found `{}`", r[i])));
    let t = Trade {
        id: r[0].clone(),
        trade_type,
        notional: num(file, line, "notional", &r[2])?,
        maturity_years: num(file, line, "maturity_years", &r[3])?,
        fixed_rate,
        fixed_tenor_months: months(5, "fixed_tenor_months")?,
        float_tenor_months: months(6, "float_tenor_months")?,
        netting_set: r[7].clone(),
    };
    t.validate().map_err(|e| perr(file, line, e.to_string()))?;
    Ok(t)
}

pub fn parse_portfolio_csv(text: &str, file: &str) -> Result<Portfolio> {
    let mut sets: Vec<NettingSet> = Vec::new();
    let mut section = 0; // 0 none, 1 sets, 2 trades
    let mut seen_ids = std::collections::HashSet::new();
    for (line, r) in records(text, file)? {
        if is_header(&r, &SET_HEADER) {
            section = 1;
            continue;
        }
        if is_header(&r, &TRADE_HEADER) {
            section = 2;
            continue;
        }
        match section {
            1 => {
                if r.len() != SET_HEADER.len() {
                    return Err(perr(file, line, format!("expected {} netting-set fields, found {}", SET_HEADER.len(), r.len())));
                }
                if sets.iter().any(|s| s.id == r[0]) {
                    return Err(perr(file, line, format!("duplicate netting set `{}`", r[0])));
                }
                let vm_threshold = if r[2].is_empty() { f64::INFINITY } else { num(file, line, "vm_threshold", &r[2])? };
                let im = |s: &str| parse_im(&s.to_ascii_lowercase()).ok_or_else(|| perr(file, line, format!("cannot read margin model `{s}`")));
                let margin = MarginSpec {
                    vm_threshold,
                    im_received: im(&r[3])?,
                    im_posted: im(&r[4])?,
                };
                margin.validate().map_err(|e| perr(file, line, e.to_string()))?;
                sets.push(NettingSet {
                    id: r[0].clone(),
                    counterparty: r[1].clone(),
                    margin,
                    trades: Vec::new(),
                });
            }
            2 => {
                let t = parse_trade(file, line, &r)?;
                if !seen_ids.insert(t.id.clone()) {
                    return Err(perr(file, line, format!("duplicate trade id `{}`", t.id)));
                }
                let Some(s) = sets.iter_mut().find(|s| s.id == t.netting_set) else {
                    return Err(perr(file, line, format!("unknown netting set `{}`", t.netting_set)));
                };
                s.trades.push(t);
            }
            _ => return Err(perr(file, line, "data before a section header")),
        }
    }
    Ok(Portfolio { netting_sets: sets })
}

pub fn portfolio_to_csv(p: &Portfolio) -> String {
    let mut out = String::new();
    out.push_str(&SET_HEADER.join(","));
    out.push('\n');
    for s in &p.netting_sets {
        let th = if s.margin.vm_threshold.is_finite() { s.margin.vm_threshold.to_string() } else { "inf".into() };
        let _ = writeln!(out, "{},{},{},{},{}", s.id, s.counterparty, th, format_im(&s.margin.im_received), format_im(&s.margin.im_posted));
    }
    out.push_str(&TRADE_HEADER.join(","));
    out.push('\n');
    for t in p.trades() {
        let ty = match t.trade_type {
            TradeType::Payer => "payer",
            TradeType::Receiver => "receiver",
        };
        let fr = t.fixed_rate.map_or("par".to_string(), |x| x.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            t.id, ty, t.notional, t.maturity_years, fr, t.fixed_tenor_months, t.float_tenor_months, t.netting_set
        );
    }
    out
}

pub fn load_portfolio(path: &Path) -> Result<Portfolio> {
    let text = read(path)?;
    let file = path.display().to_string();
    let p = if is_json(path) {
        let p: Portfolio = serde_json::from_str(&text).map_err(|e| json_error(&file, e))?;
        p.validate().map_err(|e| perr(&file, 0, e.to_string()))?;
        p
    } else {
        parse_portfolio_csv(&text, &file)?
    };
    Ok(p)
}

pub fn write_portfolio(p: &Portfolio, path: &Path) -> Result<()> {
    let text = if is_json(path) { serde_json::to_string_pretty(p).expect("portfolio serializes") } else { portfolio_to_csv(p) };
    Ok(std::fs::write(path, text)?)
}

/// A single trade: JSON object, or CSV with the trade header and one row.
pub fn load_trade(path: &Path) -> Result<Trade> {
    let text = read(path)?;
    let file = path.display().to_string();
    if is_json(path) {
        let t: Trade = serde_json::from_str(&text).map_err(|e| json_error(&file, e))?;
        t.validate().map_err(|e| perr(&file, 0, e.to_string()))?;
        return Ok(t);
    }
    let rows: Vec<_> = records(&text, &file)?.into_iter().filter(|(_, r)| !is_header(r, &TRADE_HEADER)).collect();
    match rows.as_slice() {
        [(line, r)] => parse_trade(&file, *line, r),
        _ => Err(perr(&file, 0, format!("expected exactly one trade row, found {}", rows.len()))),
    }
}

/// One credit curve in the JSON credit format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveQuotes {
    pub entity: String,
    pub recovery: f64,
    pub tenors: Vec<f64>,
    pub spreads_bps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreditFile {
    pub counterparties: Vec<CurveQuotes>,
    pub bank: CurveQuotes,
}

fn curve_of(q: &CurveQuotes) -> Result<CreditCurve> {
    CreditCurve::new(&q.entity, q.recovery, q.tenors.clone(), q.spreads_bps.clone())
}

fn quotes_of(c: &CreditCurve) -> CurveQuotes {
    CurveQuotes {
        entity: c.entity.clone(),
        recovery: c.recovery,
        tenors: c.tenors.clone(),
        spreads_bps: c.spreads_bps.clone(),
    }
}

pub fn parse_credit_csv(text: &str, file: &str) -> Result<CreditSetup> {
    // entity -> (role, recovery, first line, quotes)
    let mut order: Vec<String> = Vec::new();
    let mut by: BTreeMap<String, (bool, f64, u64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (line, r) in records(text, file)? {
        if is_header(&r, &CREDIT_HEADER) {
            continue;
        }
        if r.len() != CREDIT_HEADER.len() {
            return Err(perr(file, line, format!("expected {} credit fields, found {}", CREDIT_HEADER.len(), r.len())));
        }
        let bank = match r[1].to_ascii_lowercase().as_str() {
            "bank" => true,
            "counterparty" => false,
            other => return Err(perr(file, line, format!("unknown role `{other}`"))),
        };
        let rec = num(file, line, "recovery", &r[2])?;
        let tenor = num(file, line, "tenor", &r[3])?;
        let spread = num(file, line, "spread_bps", &r[4])?;
        if !(0.0..1.0).contains(&rec) {
            return Err(perr(file, line, format!("recovery {rec} outside [0, 1)")));
        }
        if !(spread >= 0.0) {
            return Err(perr(file, line, "spread must be nonnegative"));
        }
        let e = by.entry(r[0].clone()).or_insert_with(|| {
            order.push(r[0].clone());
            (bank, rec, line, Vec::new(), Vec::new())
        });
        if e.0 != bank || e.1 != rec {
            return Err(perr(file, line, format!("entity `{}` changes role or recovery", r[0])));
        }
        if e.3.last().is_some_and(|&t| tenor <= t) || !(tenor > 0.0) {
            return Err(perr(file, line, format!("tenors of `{}` must be positive and increasing", r[0])));
        }
        e.3.push(tenor);
        e.4.push(spread);
    }
    let mut counterparties = Vec::new();
    let mut bank = None;
    for name in order {
        let (is_bank, rec, line, tenors, spreads) = by.remove(&name).unwrap();
        let c = CreditCurve::new(&name, rec, tenors, spreads).map_err(|e| perr(file, line, e.to_string()))?;
        if is_bank {
            if bank.is_some() {
                return Err(perr(file, line, "more than one bank curve"));
            }
            bank = Some(c);
        } else {
            counterparties.push(c);
        }
    }
    let bank = bank.ok_or_else(|| perr(file, 0, "no bank curve"))?;
    Ok(CreditSetup {
        counterparties,
        bank,
        funding: FundingSpec::default(),
    })
}

pub fn credit_to_csv(c: &CreditSetup) -> String {
    let mut out = CREDIT_HEADER.join(",");
    out.push('\n');
    let rows = c.counterparties.iter().map(|x| (x, "counterparty")).chain(std::iter::once((&c.bank, "bank")));
    for (curve, role) in rows {
        for (t, s) in curve.tenors.iter().zip(&curve.spreads_bps) {
            let _ = writeln!(out, "{},{},{},{},{}", curve.entity, role, curve.recovery, t, s);
        }
    }
    out
}

pub fn load_credit(path: &Path) -> Result<CreditSetup> {
    let text = read(path)?;
    let file = path.display().to_string();
    if is_json(path) {
        let f: CreditFile = serde_json::from_str(&text).map_err(|e| json_error(&file, e))?;
        let wrap = |e: XvaError| perr(&file, 0, e.to_string());
        return Ok(CreditSetup {
            counterparties: f.counterparties.iter().map(curve_of).collect::<Result<_>>().map_err(wrap)?,
            bank: curve_of(&f.bank).map_err(wrap)?,
            funding: FundingSpec::default(),
        });
    }
    parse_credit_csv(&text, &file)
}

pub fn write_credit(c: &CreditSetup, path: &Path) -> Result<()> {
    let text = if is_json(path) {
        serde_json::to_string_pretty(&CreditFile {
            counterparties: c.counterparties.iter().map(quotes_of).collect(),
            bank: quotes_of(&c.bank),
        })
        .expect("credit serializes")
    } else {
        credit_to_csv(c)
    };
    Ok(std::fs::write(path, text)?)
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// Run configuration file. Relative paths are taken from the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub portfolio: PathBuf,
    pub credit: PathBuf,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelParams,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub funding: FundingSpec,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read(path)?;
        let file = path.display().to_string();
        let mut c: RunConfig = serde_json::from_str(&text).map_err(|e| json_error(&file, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut c.portfolio, &mut c.credit, &mut c.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.engine.validate()?;
        if let Some(l) = self.funding.lambda {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(XvaError::Config("funding spread must be nonnegative".into()));
            }
        }
        Ok(())
    }

    /// Loads portfolio and credit, with this config's funding choices applied.
    pub fn load_inputs(&self) -> Result<(Portfolio, CreditSetup)> {
        self.validate()?;
        let p = load_portfolio(&self.portfolio)?;
        let mut c = load_credit(&self.credit)?;
        c.funding = self.funding.clone();
        c.set_entities(&p)?;
        Ok((p, c))
    }
}

/// Rounds to 15 significant digits.
pub fn round15(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.14e}").parse().unwrap_or(x)
}

fn round_numbers(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Number(n) => {
            if let (true, Some(x)) = (n.is_f64(), n.as_f64()) {
                if let Some(m) = serde_json::Number::from_f64(round15(x)) {
                    *n = m;
                }
            }
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(round_numbers),
        serde_json::Value::Object(o) => o.values_mut().for_each(round_numbers),
        _ => {}
    }
}

/// Pretty JSON with every float rounded to 15 significant digits.
pub fn to_stable_json<T: Serialize>(x: &T) -> String {
    let mut v = serde_json::to_value(x).expect("report serializes");
    round_numbers(&mut v);
    let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
    s.push('\n');
    s
}

fn cell(x: f64) -> String {
    round15(x).to_string()
}

pub fn report_csv(r: &XVAReport) -> String {
    let mut out = String::from("metric,value,se\n");
    let rows = [
        ("ucva", r.ucva),
        ("mva", r.mva),
        ("fva_star", r.fva_star),
        ("fva", r.fva),
        ("kva", r.kva),
        ("ftdcva", r.ftdcva),
        ("ftddva", r.ftddva),
        ("loss_at_horizon", r.loss_at_horizon),
    ];
    for (name, m) in rows {
        let _ = writeln!(out, "{name},{},{}", cell(m.value), m.se.map(cell).unwrap_or_default());
    }
    let _ = writeln!(out, "trc,{},", cell(r.trc));
    out
}

pub fn term_structures_csv(r: &XVAReport) -> String {
    let ts = &r.term_structures;
    let mut out = String::from("t,es,kva,ec,blended_lambda,rate,ucva,mva,fva_star,fva\n");
    for k in 0..ts.t.len() {
        let row = [ts.t[k], ts.es[k], ts.kva[k], ts.ec[k], ts.blended_lambda[k], ts.rate[k], ts.ucva[k], ts.mva[k], ts.fva_star[k], ts.fva[k]];
        out.push_str(&row.iter().map(|x| cell(*x)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct MetaFile<'a> {
    meta: &'a crate::engine::RunMeta,
    warnings: &'a [String],
    timings_seconds: BTreeMap<&'a str, f64>,
    threads: usize,
    version: &'static str,
}

fn write_file(dir: &Path, name: &str, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, text).map_err(|e| XvaError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))))?;
    written.push(p);
    Ok(())
}

/// Writes `xva.json`, `xva.csv`, `term_structures.csv` and `run_meta.json`,
/// plus `ftp.csv` when the report carries an FTP.
pub fn emit_report(r: &XVAReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| XvaError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))?;
    let mut written = Vec::new();
    write_file(dir, "xva.json", &to_stable_json(r), &mut written)?;
    write_file(dir, "xva.csv", &report_csv(r), &mut written)?;
    write_file(dir, "term_structures.csv", &term_structures_csv(r), &mut written)?;
    let mut timings = BTreeMap::new();
    for (k, v) in &r.timings {
        *timings.entry(k.as_str()).or_insert(0.0) += v;
    }
    let meta = MetaFile {
        meta: &r.meta,
        warnings: &r.warnings,
        timings_seconds: timings,
        threads: rayon::current_num_threads(),
        version: env!("CARGO_PKG_VERSION"),
    };
    write_file(dir, "run_meta.json", &to_stable_json(&meta), &mut written)?;
    if let Some(f) = r.ftp {
        let mut out = String::from("metric,value\n");
        for (name, v) in [("d_ucva", f.d_ucva), ("d_fva", f.d_fva), ("d_mva", f.d_mva), ("d_kva", f.d_kva), ("d_trc", f.d_trc), ("ftp", f.ftp)] {
            let _ = writeln!(out, "{name},{}", cell(v));
        }
        write_file(dir, "ftp.csv", &out, &mut written)?;
    }
    Ok(written)
}

/// Extended-book report with its FTP, plus the base report under `base/`.
pub fn emit_incremental(r: &IncrementalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut w = emit_report(&r.with_trade, dir)?;
    w.extend(emit_report(&r.base, &dir.join("base"))?);
    Ok(w)
}
