use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ncc_core::estimators::{cox_fit, proposed_fit, thomas_fit, FitResult, ProposedOptions, WeightReference};
use ncc_core::harness::{self, Estimator, HarnessOptions};
use ncc_core::io;
use ncc_core::sim::{generate_cohort, sample_ncc, ScenarioConfig};
use ncc_core::theory::{check_proposition, mc_sigma, uniform_grid};
use ncc_core::{Bandwidth, Error, KernelConfig, KernelShape, ShortfallPolicy};

#[derive(Parser)]
#[command(name = "ncc", version, about = "Cox regression from time-restricted nested case-control samples")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a cohort from a scenario config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a nested case-control sample from a cohort file.
    Sample {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "drop")]
        shortfall: ShortfallPolicy,
        /// Config giving the covariate law and horizon of the cohort file; defaults to the standard design.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit Thomas' or the kernel-weighted estimator to an ncc file; prints JSON.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["thomas", "proposed"])]
        estimator: String,
        /// Size of the cohort the sample was drawn from.
        #[arg(long)]
        cohort_size: usize,
        /// Design number of controls; defaults to the largest per record.
        #[arg(long)]
        m: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[command(flatten)]
        kernel: KernelArgs,
    },
    /// Fit the full-cohort Cox model to external subject and covariate files; prints JSON.
    FitCox {
        #[arg(long)]
        subjects: PathBuf,
        #[arg(long)]
        covariates: PathBuf,
    },
    /// Monte Carlo study of one scenario.
    Mc {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        reps: usize,
        #[arg(long)]
        seed: u64,
        /// Worker threads; 0 uses all cores.
        #[arg(long, default_value_t = 0)]
        threads: usize,
        #[command(flatten)]
        kernel: KernelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// All 18 published designs beside the published numbers.
    Table1 {
        #[arg(long, default_value_t = 2000)]
        reps: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        threads: usize,
        #[command(flatten)]
        kernel: KernelArgs,
        /// Cell table; variance ratios go to `<stem>_ratios.csv` beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo evaluation of the asymptotic information matrices.
    Theory {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        draws: usize,
        #[arg(long)]
        grid: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct KernelArgs {
    /// Fixed bandwidth.
    #[arg(long, conflicts_with = "bandwidth_rule")]
    bandwidth: Option<f64>,
    /// `r=<rate>`: h = 0.05 (n / 200)^(-rate), rate in (1/4, 1/2).
    #[arg(long)]
    bandwidth_rule: Option<String>,
    #[arg(long, default_value = "indicator")]
    kernel: KernelShape,
    #[arg(long, default_value = "pilot")]
    weight_ref: WeightReference,
}

impl KernelArgs {
    fn options(&self) -> anyhow::Result<HarnessOptions> {
        let mut kernel = KernelConfig {
            shape: self.kernel,
            ..KernelConfig::default()
        };
        if let Some(h) = self.bandwidth {
            kernel.bandwidth = Bandwidth::Fixed(h);
        }
        if let Some(rule) = &self.bandwidth_rule {
            let rate = rule
                .strip_prefix("r=")
                .and_then(|r| r.parse::<f64>().ok())
                .ok_or_else(|| Error::Invalid(format!("bandwidth rule must look like r=<rate>, got '{rule}'")))?;
            kernel.bandwidth = Bandwidth::Scaled {
                h0: 0.05,
                n0: 200.0,
                rate,
            };
        }
        Ok(HarnessOptions {
            kernel,
            proposed: ProposedOptions {
                weight_ref: self.weight_ref,
                ..ProposedOptions::default()
            },
        })
    }
}

#[derive(Serialize)]
struct FitJson {
    estimator: &'static str,
    beta_hat: Vec<f64>,
    std_errors: Vec<f64>,
    vcov: Vec<Vec<f64>>,
    sigma_hat: Vec<Vec<f64>>,
    iterations: usize,
    converged: bool,
    final_score_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    bandwidth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pilot_beta_hat: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    locally_monotone: Option<bool>,
}

fn rows(m: &ncc_core::nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl FitJson {
    fn new(estimator: &'static str, fit: &FitResult) -> Self {
        FitJson {
            estimator,
            beta_hat: fit.beta_hat.clone(),
            std_errors: fit.std_errors(),
            vcov: rows(&fit.vcov),
            sigma_hat: rows(&fit.sigma_hat),
            iterations: fit.iterations,
            converged: fit.converged,
            final_score_norm: fit.final_score_norm,
            bandwidth: None,
            pilot_beta_hat: None,
            locally_monotone: None,
        }
    }
}

fn config_or_default(path: Option<&Path>) -> anyhow::Result<ScenarioConfig> {
    Ok(match path {
        Some(p) => io::read_config(p).with_context(|| format!("reading {}", p.display()))?,
        None => io::parse_config("")?,
    })
}

fn ratios_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    out.with_file_name(format!("{stem}_ratios.csv"))
}

fn print_table1(report: &harness::Table1Report) {
    println!("{:<7} {:>4} {:>2} {:<9} {:>21} {:>21} {:>21}", "cens", "beta", "m", "estimator", "ave_est (paper)", "emp_var (paper)", "est_var (paper)");
    for b in &report.blocks {
        for e in Estimator::ALL {
            let s = b.summary.get(e);
            let p = b.paper_cell(e);
            println!(
                "{:<7} {:>4} {:>2} {:<9} {:>9.3} ({:>8.3}) {:>9.3} ({:>8.3}) {:>9.3} ({:>8.3})",
                b.censoring, b.beta, b.m, e.name(), s.ave_est[0], p.ave_est, s.emp_var[0], p.emp_var, s.est_var[0], p.est_var
            );
        }
        println!(
            "{:<7} {:>4} {:>2} {:<9} cen_prop {:.3} ({:.3})  proposed/thomas var {:.3} ({:.3})",
            b.censoring,
            b.beta,
            b.m,
            "",
            b.summary.cen_prop,
            b.paper_cen_prop,
            b.var_ratio(Estimator::Proposed, Estimator::Thomas),
            b.paper_var_ratio(Estimator::Proposed, Estimator::Thomas)
        );
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate { config, seed, out } => {
            let sc = config_or_default(Some(&config))?;
            let cohort = generate_cohort(&sc, sc.n, seed)?;
            io::write_cohort(&out, &cohort, &sc.covariate_law)?;
        }
        Command::Sample {
            cohort,
            m,
            seed,
            shortfall,
            config,
            out,
        } => {
            let sc = config_or_default(config.as_deref())?;
            let cohort = io::read_cohort(&cohort, &sc.covariate_law, sc.tau)?;
            let ncc = sample_ncc(&cohort, m, seed, shortfall)?;
            io::write_ncc(&out, &ncc)?;
        }
        Command::Fit {
            data,
            estimator,
            cohort_size,
            m,
            tau,
            kernel,
        } => {
            let ncc = io::read_ncc(&data, cohort_size, m, tau)?;
            let json = if estimator == "thomas" {
                FitJson::new("thomas", &thomas_fit(&ncc, None)?)
            } else {
                let opts = kernel.options()?;
                let p = proposed_fit(&ncc, &opts.kernel, &opts.proposed)?;
                FitJson {
                    bandwidth: Some(opts.kernel.resolve(ncc.n())?.h),
                    pilot_beta_hat: p.pilot.as_ref().map(|f| f.beta_hat.clone()),
                    locally_monotone: p.locally_monotone,
                    ..FitJson::new("proposed", &p.fit)
                }
            };
            println!("{}", serde_json::to_string_pretty(&json)?);
        }
        Command::FitCox { subjects, covariates } => {
            let rs = io::read_cox_external(&subjects, &covariates)?;
            println!("{}", serde_json::to_string_pretty(&FitJson::new("cox", &cox_fit(&rs, None)?))?);
        }
        Command::Mc {
            config,
            reps,
            seed,
            threads,
            kernel,
            out,
        } => {
            let sc = config_or_default(Some(&config))?;
            let summary = harness::run_scenario(&sc, reps, seed, threads, &kernel.options()?)?;
            for e in &summary.estimators {
                if e.degenerate {
                    log::warn!("{}: {} of {} fits failed", e.estimator.name(), e.failures, summary.reps);
                }
                println!(
                    "{:<9} ave_est {:>7.3}  emp_var {:>7.3}  est_var {:>7.3}  failures {}",
                    e.estimator.name(),
                    e.ave_est[0],
                    e.emp_var[0],
                    e.est_var[0],
                    e.failures
                );
            }
            println!("cen_prop {:.3}", summary.cen_prop);
            io::write_summaries(&out, &[summary])?;
        }
        Command::Table1 {
            reps,
            seed,
            threads,
            kernel,
            out,
        } => {
            let report = harness::replicate_table1(seed, reps, threads, &kernel.options()?)?;
            print_table1(&report);
            io::write_table1_report(&out, &report)?;
            io::write_table1_ratios(&ratios_path(&out), &report)?;
        }
        Command::Theory {
            config,
            draws,
            grid,
            seed,
            out,
        } => {
            let sc = config_or_default(Some(&config))?;
            if grid < 2 {
                bail!(Error::Invalid("grid needs at least 2 points".into()));
            }
            let report = mc_sigma(&sc, &uniform_grid(sc.tau, grid), draws, seed)?;
            let prop = check_proposition(&report, None)?;
            let n = sc.n as f64;
            for (name, m) in [("cox", &report.sigma_c), ("thomas", &report.sigma_p), ("proposed", &report.sigma)] {
                let var: Vec<String> = m
                    .clone()
                    .try_inverse()
                    .map(|inv| inv.diagonal().iter().map(|v| format!("{:.4}", v / n)).collect())
                    .unwrap_or_else(|| vec!["singular".into()]);
                println!("{name:<9} asymptotic variance at n = {}: {}", sc.n, var.join(" "));
            }
            println!(
                "min eigenvalue of Sigma_P^-1 - Sigma^-1: {:.4e} (se {:.1e}), {}",
                prop.min_eigenvalue,
                prop.min_eigenvalue_se,
                prop.verdict.label()
            );
            if report.truncated() {
                log::warn!("integrals truncated at t = {:.4}", report.grid().last().copied().unwrap_or(0.0));
            }
            io::write_theory(&out, &report, Some(&prop))?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NonConvergence { .. }) => 3,
        Some(Error::Conditioning(_)) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
