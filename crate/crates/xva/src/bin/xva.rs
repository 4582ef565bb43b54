use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use xva::cli_io::{self, RunConfig};
use xva::engine::{incremental_xva, run_full, XVAReport};
use xva::XvaError;

#[derive(Parser)]
#[command(name = "xva", version, about = "Desk-scale XVA engine: CVA, FVA, MVA, KVA and transfer pricing")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Price the book and write reports.
    Run(Common),
    /// Price the book with and without one added trade and report the FTP.
    Incremental {
        #[command(flatten)]
        common: Common,
        /// Trade file (one-row CSV or JSON object).
        #[arg(long)]
        add: PathBuf,
    },
    /// Load and check inputs without pricing.
    Validate(Common),
    /// Print the effective configuration as JSON.
    PrintConfig(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_primary: Option<usize>,
    #[arg(long)]
    n_secondary: Option<usize>,
    /// Time step in years.
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    hurdle: Option<f64>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn config(&self) -> xva::Result<RunConfig> {
        let mut c = RunConfig::load(&self.config)?;
        if let Some(d) = &self.output_dir {
            c.output_dir = d.clone();
        }
        let e = &mut c.engine;
        e.seed = self.seed.unwrap_or(e.seed);
        e.n_primary = self.n_primary.unwrap_or(e.n_primary);
        e.n_secondary = self.n_secondary.unwrap_or(e.n_secondary);
        e.step = self.step.unwrap_or(e.step);
        e.hurdle = self.hurdle.unwrap_or(e.hurdle);
        if let Some(n) = self.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| XvaError::Config(format!("thread pool: {e}")))?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn summarize(r: &XVAReport) {
    let se = |s: Option<f64>| s.map_or(String::new(), |s| format!(" (se {s:.4})"));
    for (name, m) in [("UCVA", r.ucva), ("MVA", r.mva), ("FVA*", r.fva_star), ("FVA", r.fva), ("KVA", r.kva), ("FTDCVA", r.ftdcva), ("FTDDVA", r.ftddva)] {
        println!("{name:<8}{:>14.4}{}", m.value, se(m.se));
    }
    println!("{:<8}{:>14.4}", "TRC", r.trc);
    for w in &r.warnings {
        warn!("{w}");
    }
}

fn run(cli: Cli) -> xva::Result<()> {
    match cli.cmd {
        Cmd::Run(c) => {
            let cfg = c.config()?;
            let (p, credit) = cfg.load_inputs()?;
            info!("{} trades in {} netting sets", p.n_trades(), p.netting_sets.len());
            let r = run_full(&p, &credit, &cfg.model, &cfg.engine)?;
            summarize(&r);
            for f in cli_io::emit_report(&r, &cfg.output_dir)? {
                info!("wrote {}", f.display());
            }
        }
        Cmd::Incremental { common, add } => {
            let cfg = common.config()?;
            let (p, credit) = cfg.load_inputs()?;
            let trade = cli_io::load_trade(&add)?;
            credit.set_entities(&p.with_trade(trade.clone())?)?;
            let r = incremental_xva(&p, trade, &credit, &cfg.model, &cfg.engine)?;
            summarize(&r.with_trade);
            let f = r.ftp;
            println!("dUCVA {:.4}  dMVA {:.4}  dFVA {:.4}  dKVA {:.4}  FTP {:.4}", f.d_ucva, f.d_mva, f.d_fva, f.d_kva, f.ftp);
            for f in cli_io::emit_incremental(&r, &cfg.output_dir)? {
                info!("wrote {}", f.display());
            }
        }
        Cmd::Validate(c) => {
            let cfg = c.config()?;
            let (p, credit) = cfg.load_inputs()?;
            println!(
                "ok: {} trades, {} netting sets, {} counterparties, maturity {} years",
                p.n_trades(),
                p.netting_sets.len(),
                credit.counterparties.len(),
                p.maturity()
            );
        }
        Cmd::PrintConfig(c) => {
            let cfg = c.config()?;
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("XVA_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
