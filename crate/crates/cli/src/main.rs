use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use mstnma::data_io::RunConfig;
use mstnma::pipeline::{self, RunOptions};
use mstnma::plot;
use mstnma::simharness::{self, EngineSimConfig, PowerSimConfig, SimMetrics};
use mstnma::survmodels::ModelKind;
use mstnma::Error;

#[derive(Parser, Debug)]
#[command(name = "mstnma", version, about = "Mean-survival network meta-analysis pipeline")]
struct Cli {
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// MCMC chains (overrides the config file).
    #[arg(long, global = true)]
    chains: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Reject unknown config keys and treat convergence warnings as errors.
    #[arg(long, global = true, conflicts_with = "lenient")]
    strict: bool,
    /// Skip malformed IPD rows with a warning instead of failing.
    #[arg(long, global = true)]
    lenient: bool,
    /// Log at debug level.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit Lee-Carter models and build external population curves.
    ProjectMortality,
    /// Fit survival models per arm and extrapolate to mean survival.
    FitSurvival {
        #[arg(long)]
        model: Option<String>,
    },
    /// Turn per-arm MST draws into LYG contrasts.
    ExtractContrasts {
        #[arg(long)]
        model: Option<String>,
    },
    /// Fit the power-likelihood NMA.
    Nma {
        #[arg(long)]
        model: Option<String>,
    },
    /// Bayes-rule, LaEV and GRADE decisions from the NMA draws.
    Decide {
        #[arg(long)]
        model: Option<String>,
    },
    /// Cost-effectiveness outputs (CEAC, EIB, ICER).
    Cea {
        #[arg(long)]
        model: Option<String>,
    },
    /// Power-likelihood bias simulation.
    SimulatePower {
        #[arg(long)]
        replications: Option<usize>,
        /// Run every (n_poor, bias, tau) scenario of the default grid.
        #[arg(long)]
        grid: bool,
    },
    /// Engine calibration and efficiency simulation.
    SimulateEngine {
        #[arg(long)]
        replications: Option<usize>,
    },
    /// Full pipeline with resumable stages.
    Run {
        /// Write the bundled synthetic fixture here and run it.
        #[arg(long)]
        fixture: Option<PathBuf>,
        /// Rerun every stage even if its inputs are unchanged.
        #[arg(long)]
        force: bool,
        /// Model override for the primary fit.
        #[arg(long)]
        model: Option<String>,
    },
    /// Redraw the forest plot from NMA outputs.
    Plot,
}

const EXIT_ERROR: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_CONVERGENCE: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(warnings) => {
            for w in &warnings {
                log::warn!("{w}");
            }
            if cli.strict && !warnings.is_empty() {
                eprintln!("error: {} convergence warning(s) under --strict", warnings.len());
                return ExitCode::from(EXIT_CONVERGENCE);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_validation));
            ExitCode::from(if validation { EXIT_VALIDATION } else { EXIT_ERROR })
        }
    }
}

fn load_config(cli: &Cli, path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let Some(path) = path.or(cli.config.as_deref()) else {
        bail!(Error::Config("--config is required for this command".into()));
    };
    let loaded = RunConfig::load(path, cli.strict).with_context(|| format!("loading {}", path.display()))?;
    let mut cfg = loaded.config;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(c) = cli.chains {
        cfg.mcmc.chains = c;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn model_or(cfg: &RunConfig, model: &Option<String>) -> anyhow::Result<ModelKind> {
    Ok(match model {
        Some(m) => ModelKind::parse(m)?,
        None => cfg.model,
    })
}

fn run(cli: &Cli) -> anyhow::Result<Vec<String>> {
    let out = &cli.out;
    let opts = RunOptions {
        lenient: cli.lenient,
        force: false,
    };
    let stage = |r: mstnma::Result<pipeline::StageOutput>| -> anyhow::Result<Vec<String>> {
        let r = r?;
        for f in &r.files {
            println!("{}", out.join(f).display());
        }
        Ok(r.warnings)
    };
    match &cli.command {
        Command::ProjectMortality => {
            let cfg = load_config(cli, None)?;
            stage(pipeline::project_mortality(&cfg, out))
        }
        Command::FitSurvival { model } => {
            let cfg = load_config(cli, None)?;
            stage(pipeline::fit_survival(&cfg, out, model_or(&cfg, model)?, &opts))
        }
        Command::ExtractContrasts { model } => {
            let cfg = load_config(cli, None)?;
            stage(pipeline::extract_contrasts(&cfg, out, model_or(&cfg, model)?))
        }
        Command::Nma { model } => {
            let cfg = load_config(cli, None)?;
            stage(pipeline::run_nma(&cfg, out, model_or(&cfg, model)?))
        }
        Command::Decide { model } => {
            let cfg = load_config(cli, None)?;
            stage(pipeline::decide(&cfg, out, model_or(&cfg, model)?))
        }
        Command::Cea { model } => {
            let cfg = load_config(cli, None)?;
            if cfg.costs.treatments.is_empty() {
                bail!(Error::Config("no [costs] section in the configuration".into()));
            }
            let m = model_or(&cfg, model)?;
            let (treatments, effects) = pipeline::load_effects(out, m)?;
            let cea = pipeline::cea_for(&cfg, &treatments, &effects)?;
            let dir = out.join("decision").join(m.as_str());
            fs::create_dir_all(&dir)?;
            cea.write_ceac_csv(fs::File::create(dir.join("ceac.csv"))?)?;
            cea.write_eib_csv(fs::File::create(dir.join("eib.csv"))?)?;
            fs::write(dir.join("ceac.svg"), plot::ceac_svg(&cea))?;
            let reference = &treatments[cea.reference];
            for e in cea.icer.iter().filter(|e| &e.treatment != reference) {
                match e.icer {
                    Some(v) => println!("ICER {} vs {}: {v:.1}", e.treatment, reference),
                    None => println!("ICER {} vs {}: undefined", e.treatment, reference),
                }
            }
            Ok(Vec::new())
        }
        Command::Plot => {
            let cfg = load_config(cli, None)?;
            stage(pipeline::plot_forest(&cfg, out))
        }
        Command::Run { fixture, force, model } => {
            let cfg_path = match fixture {
                Some(dir) => Some(pipeline::write_fixture(dir)?),
                None => None,
            };
            let mut cfg = load_config(cli, cfg_path.as_deref())?;
            if model.is_some() {
                cfg.model = model_or(&cfg, model)?;
                cfg.validate()?;
            }
            let report = pipeline::run_pipeline(&cfg, out, &RunOptions { force: *force, ..opts })?;
            for s in &report.ran {
                println!("ran     {s}");
            }
            for s in &report.skipped {
                println!("skipped {s}");
            }
            println!("{}", out.join("manifest.json").display());
            Ok(report.warnings)
        }
        Command::SimulatePower { replications, grid } => {
            let mut base = match &cli.config {
                Some(p) => PowerSimConfig::from_toml_str(&fs::read_to_string(p)?)?,
                None => PowerSimConfig::default(),
            };
            if let Some(r) = replications {
                base.replications = *r;
            }
            if let Some(s) = cli.seed {
                base.seed = s;
            }
            if let Some(c) = cli.chains {
                base.mcmc.chains = c;
            }
            let scenarios: Vec<PowerSimConfig> = if *grid {
                let mut v = Vec::new();
                for n_poor in [2, 4, 6] {
                    for bias_magnitude in [0.0, 0.5, 1.0] {
                        for tau_true in [0.1, 0.3] {
                            v.push(PowerSimConfig { n_poor, bias_magnitude, tau_true, ..base.clone() });
                        }
                    }
                }
                v
            } else {
                vec![base]
            };
            let mut groups: Vec<(String, Vec<SimMetrics>)> = Vec::new();
            for sc in &scenarios {
                let label = format!("poor{}_bias{}_tau{}", sc.n_poor, sc.bias_magnitude, sc.tau_true);
                let r = simharness::run_power_study(sc)?;
                let dir = if *grid { out.join(&label) } else { out.clone() };
                r.write_outputs(&dir)?;
                for m in &r.metrics {
                    println!(
                        "{label} {:8} bias {:+.4} |bias| {:.4} rmse {:.4} width {:.4} var {:.5} (failures {})",
                        m.arm, m.mean_bias, m.mean_abs_bias, m.rmse, m.cri_width, m.posterior_variance, m.failures
                    );
                }
                groups.push((label, r.metrics));
            }
            fs::create_dir_all(out)?;
            fs::write(out.join("simulation.svg"), plot::simulation_svg(&groups))?;
            Ok(Vec::new())
        }
        Command::SimulateEngine { replications } => {
            let mut cfg = match &cli.config {
                Some(p) => EngineSimConfig::from_toml_str(&fs::read_to_string(p)?)?,
                None => EngineSimConfig::default(),
            };
            if let Some(r) = replications {
                cfg.replications = *r;
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(c) = cli.chains {
                cfg.mcmc.chains = c;
            }
            let r = simharness::run_engine_study(&cfg)?;
            r.write_outputs(out)?;
            for m in &r.metrics {
                println!(
                    "{:22} coverage {:.3} rmse {:.4} width {:.4} ess/s {:.1} crps {:.4}",
                    m.arm, m.coverage, m.rmse, m.cri_width, m.ess_per_sec, m.crps
                );
            }
            let groups: Vec<(String, Vec<SimMetrics>)> = r.metrics.iter().map(|m| (m.arm.clone(), vec![m.clone()])).collect();
            fs::write(out.join("simulation.svg"), plot::simulation_svg(&groups))?;
            Ok(Vec::new())
        }
    }
}
