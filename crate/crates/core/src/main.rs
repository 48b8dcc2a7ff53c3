use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use twentyq::analysis::{capacity_bsc, capacity_general, crossover_epsilon, rate_curves, sorted_pm_rate, RateProcedure, DEFAULT_TOL};
use twentyq::channel::ChannelFamily;
use twentyq::config::{self, ConfigFile, Kind, Overrides};
use twentyq::harness::{rows_csv, run_experiment, run_sweep, summary_csv, summary_path, sweep_csv, validate_bounds};

#[derive(Parser)]
#[command(name = "twentyq", version, about = "Noisy adaptive 20-questions simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Capacity of the configured channel.
    Capacity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Report in bits instead of nats.
        #[arg(long)]
        bits: bool,
    },
    /// Asymptotic decay-rate curves over a sweep of nu.
    RateCurves {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        bits: bool,
    },
    /// Monte Carlo experiment, or a budget sweep when the config has [sweep].
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        procedure: Option<ProcedureArg>,
    },
    /// Checks the mean stopping time and excess-probability bounds.
    #[command(name = "validate-t1")]
    ValidateT1 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluates the channel continuity condition at one point.
    CheckContinuity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProcedureArg {
    Alg1,
    Alg2,
    SortedPm,
    SortedPmTerminated,
}

impl From<ProcedureArg> for Kind {
    fn from(p: ProcedureArg) -> Self {
        match p {
            ProcedureArg::Alg1 => Kind::Alg1,
            ProcedureArg::Alg2 => Kind::Alg2,
            ProcedureArg::SortedPm => Kind::SortedPm,
            ProcedureArg::SortedPmTerminated => Kind::SortedPmTerminated,
        }
    }
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn config_error(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, err: e.into() }
}

fn runtime_error(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, err: e.into() }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| runtime_error(anyhow::anyhow!("{}: {e}", p.display()))),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(runtime_error),
    }
}

fn load(path: &Path) -> Result<ConfigFile, Failure> {
    config::load(path).map_err(config_error)
}

fn unit(bits: bool) -> (f64, &'static str) {
    if bits {
        (std::f64::consts::LN_2, "bits")
    } else {
        (1.0, "nats")
    }
}

fn capacity(config: &Path, out: Option<&Path>, bits: bool) -> Result<(), Failure> {
    let cfg = load(config)?;
    let ch = cfg.channel().map_err(config_error)?;
    let (scale, name) = unit(bits);
    let mut text = format!("method,value_{name},argmax_q\n");
    let general = capacity_general(&ch, DEFAULT_TOL).map_err(runtime_error)?;
    text += &format!("enumeration,{},{}\n", general.value / scale, general.argmax_q);
    if let ChannelFamily::MdBsc { nu } = ch.family() {
        let f = ch.state_map();
        let c = capacity_bsc(*nu, f, DEFAULT_TOL).map_err(runtime_error)?;
        text += &format!("closed_form_bsc,{},{}\n", c.value / scale, c.argmax_q);
        let pm = sorted_pm_rate(*nu, f).map_err(runtime_error)?;
        text += &format!("sorted_pm_rate,{},\n", pm / scale);
    }
    emit(out, &text)
}

fn curves(config: &Path, out: Option<&Path>, bits: bool) -> Result<(), Failure> {
    let cfg = load(config)?;
    let f = cfg.state_map().map_err(config_error)?;
    let section = cfg.rate_curves_section().map_err(config_error)?;
    let grid = section.eps_grid();
    let procedures: Vec<RateProcedure> = if section.d == 1 {
        RateProcedure::ALL.to_vec()
    } else {
        vec![RateProcedure::Alg2, RateProcedure::MeasurementIndependent]
    };
    let (scale, name) = unit(bits);
    let mut text = format!("nu,procedure,epsilon,rate_{name},argmax_q\n");
    for &nu in &section.nu {
        let cs = rate_curves(nu, &f, &grid, section.d, &procedures, section.mi_alpha).map_err(config_error)?;
        for c in &cs {
            let q = c.argmax_q.map_or(String::new(), |q| q.to_string());
            for &(e, r) in &c.points {
                text += &format!("{nu},{},{e},{},{q}\n", c.procedure.name(), r / scale);
            }
        }
        if section.d == 1 {
            match crossover_epsilon(nu, &f, 1).map_err(runtime_error)? {
                Some(e) => eprintln!("nu = {nu}: alg2 overtakes sorted PM at epsilon = {e}"),
                None => eprintln!("nu = {nu}: alg2 is ahead of sorted PM at every epsilon"),
            }
        }
    }
    emit(out, &text)
}

fn simulate(config: &Path, ov: Overrides) -> Result<(), Failure> {
    let cfg = load(config)?;
    if cfg.sweep.is_some() {
        let (cfgs, level) = cfg.sweep(&ov).map_err(config_error)?;
        let res = run_sweep(&cfgs, level).map_err(runtime_error)?;
        let mut fit_rows = vec![("quantile_level".to_string(), level.to_string())];
        if let Some(fit) = res.fit {
            fit_rows.extend([
                ("slope".into(), fit.slope.to_string()),
                ("slope_se".into(), fit.slope_se.to_string()),
                ("intercept".into(), fit.intercept.to_string()),
            ]);
        }
        let fit_text = rows_csv(&fit_rows);
        eprint!("{fit_text}");
        if let Some(p) = &ov.out {
            fs::write(summary_path(p), &fit_text).map_err(runtime_error)?;
        }
        return emit(ov.out.as_deref(), &sweep_csv(&res));
    }
    let exp = cfg.experiment(&ov).map_err(config_error)?;
    let summary = run_experiment(&exp).map_err(runtime_error)?;
    emit(None, &summary_csv(&exp, &summary))
}

fn validate(config: &Path, ov: Overrides) -> Result<(), Failure> {
    let cfg = load(config)?;
    let exp = cfg.experiment(&Overrides { out: None, ..ov.clone() }).map_err(config_error)?;
    let report = validate_bounds(&exp).map_err(runtime_error)?;
    emit(ov.out.as_deref(), &rows_csv(&report.rows()))?;
    if report.contaminated {
        return Err(Failure {
            code: 3,
            err: anyhow::anyhow!(
                "capped runs exceed {}: pairs {}, trials {}; raise max_steps",
                twentyq::harness::CAP_CONTAMINATION,
                report.pair_capped_fraction,
                report.trial_capped_fraction
            ),
        });
    }
    if report.applicable && !report.holds() {
        return Err(runtime_error(anyhow::anyhow!("bounds violated beyond three standard errors")));
    }
    if !report.applicable {
        eprintln!("decoder or termination setting is outside the guarantee; bound check not applicable");
    }
    Ok(())
}

fn continuity(config: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let cfg = load(config)?;
    let ch = cfg.channel().map_err(config_error)?;
    let s = cfg.continuity_section().map_err(config_error)?;
    let r = ch.check_continuity(s.q, s.xi, s.c).map_err(config_error)?;
    emit(out, &format!("q,xi,lhs,bound_c,satisfied\n{},{},{},{},{}\n", r.q, r.xi, r.lhs, r.bound_c, r.satisfied))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Capacity { config, out, bits } => capacity(&config, out.as_deref(), bits),
        Command::RateCurves { config, out, bits } => curves(&config, out.as_deref(), bits),
        Command::Simulate { config, seed, trials, out, procedure } => simulate(
            &config,
            Overrides { seed, trials, out, procedure: procedure.map(Kind::from) },
        ),
        Command::ValidateT1 { config, seed, trials, out } => {
            validate(&config, Overrides { seed, trials, out, procedure: None })
        }
        Command::CheckContinuity { config, out } => continuity(&config, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
