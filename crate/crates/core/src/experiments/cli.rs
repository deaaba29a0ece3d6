//! The `kattn` command line.
//!
//! Exit codes: 0 when the run passes, 1 when a suite fails or the run errors,
//! 2 on usage or configuration errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::attention::Variant;
use crate::error::{Error, Result};

use super::complexity::{verify_complexity, COMPLEXITY_VARIANTS};
use super::config::ExperimentConfig;
use super::models::TaskKind;
use super::output::{num, resolve_out_dir, write, Provenance};
use super::suites::{
    gradcheck_variant, run_decomposition_suite, run_kernel_convergence, run_sparsity_sweep,
    run_task, GRADCHECK_VARIANTS,
};
use crate::numerics::Rng;

/// Largest relative error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "kattn",
    about = "Similarity x magnitude attention experiments",
    arg_required_else_help = true
)]
struct Cli {
    /// Seed of every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// TOML config; unknown keys are errors.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: $KATTN_OUT_DIR, else ./kattn-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the similarity x magnitude identities on random inputs.
    DecomposeCheck {
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Random-feature kernel error against the number of frequencies.
    KernelConverge,
    /// Attention sparsity as the magnitude norm exponent shrinks.
    SparsitySweep,
    /// Train a variant on a synthetic task.
    Train {
        #[arg(long, default_value = "seq")]
        task: String,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fit operation counts of each variant to its cost model.
    BenchComplexity,
    /// Finite-difference gradient check of full training objectives.
    Gradcheck {
        /// Single variant to check (default: all).
        #[arg(long)]
        variant: Option<String>,
    },
}

struct Ctx {
    prov: Provenance,
    out: PathBuf,
    cfg: ExperimentConfig,
}

impl Ctx {
    fn csv(&self, name: &str, body: &str) -> Result<()> {
        write(&self.out, name, &self.prov.csv(body))?;
        Ok(())
    }

    fn json(&self, name: &str, value: &impl serde::Serialize) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
        s.push('\n');
        write(&self.out, name, &s)?;
        Ok(())
    }
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidParameter(_) => Failure::Usage(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            1
        }
    }
}

fn load_config(path: Option<&Path>) -> std::result::Result<ExperimentConfig, Failure> {
    match path {
        Some(p) => ExperimentConfig::load(p).map_err(|e| Failure::Usage(e.to_string())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn parse_variant(s: &str) -> std::result::Result<Variant, Failure> {
    s.parse().map_err(|e: Error| Failure::Usage(e.to_string()))
}

fn execute(cli: Cli) -> std::result::Result<bool, Failure> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::DecomposeCheck { trials: Some(t) } => cfg.decomposition.trials = *t,
        Command::Train {
            epochs: Some(e), ..
        } => cfg.train.epochs = *e,
        _ => {}
    }
    if let Command::Train {
        variant: Some(v), ..
    } = &cli.command
    {
        cfg.attention.variant = parse_variant(v)?;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let ctx = Ctx {
        prov: Provenance {
            seed: cli.seed,
            config_hash: cfg.hash(),
        },
        out: resolve_out_dir(cli.out.as_deref()),
        cfg,
    };
    let rng = Rng::new(cli.seed);
    let cfg = &ctx.cfg;
    match cli.command {
        Command::DecomposeCheck { .. } => {
            let d = &cfg.decomposition;
            let rep = run_decomposition_suite(&rng, d.trials, &d.dims, d.large_norm)?;
            ctx.csv("decomposition.csv", &rep.to_csv())?;
            for r in &rep.rows {
                println!(
                    "{:<15} d={:<3} max_rel_error={:.3e} tol={:.0e} {}",
                    r.case,
                    r.d,
                    r.max_rel_error,
                    r.tolerance,
                    if r.pass() { "PASS" } else { "FAIL" }
                );
            }
            println!(
                "gat branches: {} non-negative, {} negative",
                rep.gat_positive, rep.gat_negative
            );
            Ok(rep.pass())
        }
        Command::KernelConverge => {
            let c = &cfg.convergence;
            let rep = run_kernel_convergence(c, &rng)?;
            ctx.csv("convergence.csv", &rep.study.to_csv())?;
            ctx.json("exceedance.json", &rep.exceedance)?;
            let st = &rep.study;
            let top = st.stationary_at_max_r();
            let ex = &rep.exceedance;
            println!(
                "stationary slope {:.3} (target -0.5 +- 0.15) {}",
                st.slope,
                pass(st.slope_pass())
            );
            println!(
                "R={} share within {}: {:.3} {}",
                top.r,
                c.tolerance,
                top.within_tolerance,
                pass(st.accuracy_pass())
            );
            println!("nonstationary slope {:.3}", st.slope_nonstationary);
            println!(
                "bound at R={}: {:.3e}; exceedances {}/{} (limit {:.3}) {}",
                ex.r,
                ex.bound,
                ex.exceedances,
                ex.trials,
                ex.limit,
                pass(ex.pass())
            );
            Ok(rep.pass())
        }
        Command::SparsitySweep => {
            let rep = run_sparsity_sweep(&cfg.sparsity, &rng)?;
            ctx.csv("sparsity.csv", &rep.to_csv())?;
            for r in &rep.rows {
                println!(
                    "p={:<5} extreme mass {:.3} mean entropy {:.3} mean max weight {:.3}",
                    r.p, r.extreme_mass, r.mean_entropy, r.mean_max_weight
                );
            }
            let ok = rep.pass();
            println!("{}", pass(ok));
            Ok(ok)
        }
        Command::Train { task, .. } => {
            let kind: TaskKind = task
                .parse()
                .map_err(|e: Error| Failure::Usage(e.to_string()))?;
            let variant = cfg.attention.variant;
            let rep = run_task(kind, &[variant], &[ctx.prov.seed], cfg)?;
            let stem = format!("train_{}_{}", kind, variant);
            ctx.csv(&format!("{stem}_log.csv"), &rep.logs_csv())?;
            ctx.csv(&format!("{stem}_metrics.csv"), &rep.runs_csv())?;
            let r = &rep.runs[0];
            if r.diverged {
                println!("{kind} {variant}: diverged");
                return Ok(false);
            }
            println!(
                "{kind} {variant}: train {} {} test {} {}",
                kind.metric_name(),
                num(r.train_metric),
                kind.metric_name(),
                num(r.test_metric)
            );
            Ok(true)
        }
        Command::BenchComplexity => {
            let rep = verify_complexity(&cfg.complexity, &COMPLEXITY_VARIANTS, ctx.prov.seed)?;
            ctx.csv("complexity_counts.csv", &rep.to_csv())?;
            ctx.csv("complexity_fits.csv", &rep.fits_csv())?;
            for v in &rep.variants {
                println!(
                    "{:<12} residual {:.2e} T^2 ratios {:?} {}",
                    v.variant.name(),
                    v.relative_residual,
                    v.doubling_ratios,
                    pass(v.pass())
                );
            }
            Ok(rep.pass())
        }
        Command::Gradcheck { variant } => {
            let variants = match variant {
                Some(v) => vec![parse_variant(&v)?],
                None => GRADCHECK_VARIANTS.to_vec(),
            };
            let mut body = String::from("variant,checked,max_rel_error,worst,skipped,pass\n");
            let mut all = true;
            for v in variants {
                let r = gradcheck_variant(v, ctx.prov.seed)?;
                let ok = r.passes(GRADCHECK_TOLERANCE);
                all &= ok;
                let worst = r
                    .worst
                    .as_ref()
                    .map(|(n, i)| format!("{n}[{i}]"))
                    .unwrap_or_default();
                body.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    v,
                    r.checked,
                    num(r.max_rel_error),
                    worst,
                    r.skipped.join(";"),
                    ok
                ));
                for s in &r.skipped {
                    eprintln!("warning: {v}: skipped {s} (entries above 1e3)");
                }
                println!(
                    "{:<12} max_rel_error {:.2e} over {} entries {}",
                    v.name(),
                    r.max_rel_error,
                    r.checked,
                    pass(ok)
                );
            }
            ctx.csv("gradcheck.csv", &body)?;
            Ok(all)
        }
    }
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}
