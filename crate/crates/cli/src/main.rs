use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use lordnet::checks::gradcheck_suite;
use lordnet::config::RunConfig;
use lordnet::experiments::{self, PRESETS};
use lordnet::render::{self, PgmFormat};
use lordnet::{fdm, io, msr, pipeline, Error, Field};

/// Deviation at or above which `gradcheck` fails.
const GRADCHECK_LIMIT: f64 = 1e-5;

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_ACCEPTANCE: u8 = 3;

#[derive(Parser)]
#[command(name = "lordnet", version, about = "Neural and finite-difference PDE solvers on square grids")]
struct Cli {
    /// Worker threads for sample-level parallelism (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Sample random inputs, optionally with finite-difference targets.
    Gen {
        #[command(flatten)]
        config: ConfigArg,
        /// First sample seed (default: the config's train seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of samples (default: the config's training sample count).
        #[arg(long)]
        count: Option<usize>,
        /// Also write solver targets (implied by the mse loss).
        #[arg(long)]
        solve: bool,
        /// Output directory (default: <output_dir>/data).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Run the finite-difference solver on field files and audit the residuals.
    Solve {
        #[command(flatten)]
        config: ConfigArg,
        /// A field file or a directory of them.
        #[arg(long)]
        input: PathBuf,
        /// Output directory (default: <output_dir>/solve).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Time steps per input for Navier-Stokes problems.
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[arg(long)]
        force: bool,
    },
    /// Train and evaluate a model, writing checkpoints and reports.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides the parameter-initialization seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint, or the finite-difference reference, on the test set.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, conflicts_with = "fdm", required_unless_present = "fdm")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        fdm: bool,
        /// Overrides the first test seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the report here as JSON besides printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare every differentiable operation against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Render a 2D field as a PGM heatmap (or a CSV table).
    Render {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Plain-text P2 instead of binary P5.
        #[arg(long)]
        p2: bool,
        /// Write a full-precision `i,j,value` table instead of an image.
        #[arg(long)]
        csv: bool,
        /// Select index k along the leading axis of a 3D field.
        #[arg(long)]
        slice: Option<usize>,
    },
    /// Run a scripted experiment preset and check it against its expectations.
    Experiments {
        name: Option<String>,
        #[arg(long)]
        list: bool,
        /// Print the preset's run configurations as JSON instead of running it.
        #[arg(long)]
        print_config: bool,
        /// Root directory for results (default: $LORDNET_OUT or ./out).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

/// Failure that maps onto a specific exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(Exit(code, _)) = err.downcast_ref::<Exit>() {
        return *code;
    }
    match err.downcast_ref::<Error>() {
        Some(
            Error::NotConverged { .. }
            | Error::Numerical(_)
            | Error::Diverged { .. }
            | Error::NonFiniteState { .. }
            | Error::Degenerate(_),
        ) => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

fn load(config: &ConfigArg) -> anyhow::Result<RunConfig> {
    Ok(RunConfig::load(&config.config)?.with_env_output())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: cannot start {jobs} workers: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Gen {
            config,
            seed,
            count,
            solve,
            out,
            force,
        } => {
            let cfg = load(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("data"));
            let solve = solve || cfg.train.loss == lordnet::train::LossKind::Mse;
            let m = pipeline::generate(
                &cfg,
                &out,
                seed.unwrap_or(cfg.seeds.train),
                count.unwrap_or(cfg.data.samples),
                solve,
                force,
            )?;
            println!("wrote {} files to {}", m.files.len(), out.display());
            Ok(())
        }
        Command::Solve {
            config,
            input,
            out,
            steps,
            force,
        } => {
            let cfg = load(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("solve"));
            solve(&cfg, &input, &out, steps, force)
        }
        Command::Train { config, seed, force } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seeds.init = s;
            }
            let out = cfg.output_dir.clone();
            let (_, summary) = pipeline::run(&cfg, &out, force)?;
            println!(
                "trained {} iterations: loss {:.4e} -> {:.4e}; test error {:.4e} ± {:.4e}",
                summary.train.iters,
                summary.train.initial_loss().unwrap_or(f64::NAN),
                summary.train.final_loss().unwrap_or(f64::NAN),
                summary.eval.mean,
                summary.eval.std
            );
            println!("outputs in {}", out.display());
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            fdm,
            seed,
            out,
        } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seeds.test = s;
                cfg.validate()?;
            }
            let value = if fdm {
                serde_json::json!({ "model": "fdm", "report": pipeline::evaluate_fdm(&cfg)? })
            } else {
                let dir = checkpoint.expect("clap enforces --checkpoint without --fdm");
                let (report, timing) = pipeline::evaluate_checkpoint(&cfg, &dir)?;
                serde_json::json!({ "model": dir, "report": report, "timing": timing })
            };
            println!("{}", serde_json::to_string_pretty(&value)?);
            if let Some(path) = out {
                io::write_json(&path, &value)?;
            }
            Ok(())
        }
        Command::Gradcheck { seeds } => {
            let results = gradcheck_suite(seeds)?;
            let mut names: Vec<&str> = results.iter().map(|r| r.name.as_str()).collect();
            names.dedup();
            let mut failed = 0;
            for name in names {
                let worst = results
                    .iter()
                    .filter(|r| r.name == name)
                    .map(|r| r.deviation)
                    .fold(0.0, f64::max);
                let ok = worst < GRADCHECK_LIMIT;
                if !ok {
                    failed += 1;
                }
                println!("{} {name}: max deviation {worst:.3e}", if ok { "PASS" } else { "FAIL" });
            }
            if failed > 0 {
                return Err(Exit(EXIT_ACCEPTANCE, format!("{failed} gradient checks at or above {GRADCHECK_LIMIT:e}")).into());
            }
            Ok(())
        }
        Command::Render {
            input,
            out,
            p2,
            csv,
            slice,
        } => {
            let mut f = io::read_field(&input)?;
            if let Some(k) = slice {
                f = render::slice_leading(&f, k)?;
            }
            if csv {
                io::write_bytes(&out, render::render_csv(&f)?.as_bytes())?;
            } else {
                let format = if p2 { PgmFormat::P2 } else { PgmFormat::P5 };
                let (bytes, meta) = render::render_pgm(&f, format)?;
                io::write_bytes(&out, &bytes)?;
                io::write_json(&sidecar(&out), &meta)?;
            }
            Ok(())
        }
        Command::Experiments {
            name,
            list,
            print_config,
            out,
            force,
        } => {
            if list || name.is_none() {
                for p in PRESETS {
                    println!("{p}");
                }
                return Ok(());
            }
            let name = name.expect("checked above");
            let root = out
                .or_else(|| std::env::var_os(lordnet::config::OUTPUT_ENV).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("out"));
            if print_config {
                let root = root.join("presets").join(&name);
                let runs: serde_json::Map<String, serde_json::Value> = experiments::preset_runs(&name, &root)?
                    .into_iter()
                    .map(|(label, cfg)| Ok((label, serde_json::to_value(cfg)?)))
                    .collect::<anyhow::Result<_>>()?;
                println!("{}", serde_json::to_string_pretty(&runs)?);
                return Ok(());
            }
            let outcome = experiments::run_preset(&name, &root, force)?;
            for c in &outcome.checks {
                println!("{}", c.describe());
            }
            for (k, v) in &outcome.notes {
                println!("  {k}: {v:.4e}");
            }
            if !outcome.passed {
                let failed: Vec<String> = outcome.checks.iter().filter(|c| !c.passed).map(|c| c.describe()).collect();
                return Err(Exit(EXIT_ACCEPTANCE, format!("preset {name} failed: {}", failed.join("; "))).into());
            }
            Ok(())
        }
    }
}

fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn input_files(input: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "ldnf"));
    files.sort();
    if files.is_empty() {
        bail!(Exit(EXIT_CONFIG, format!("no .ldnf files in {}", input.display())));
    }
    Ok(files)
}

fn solve(cfg: &RunConfig, input: &Path, out: &Path, steps: usize, force: bool) -> anyhow::Result<()> {
    let files = input_files(input)?;
    io::prepare_output_dir(out, force)?;
    let grid = cfg.grid_spec()?;
    let spec = cfg.residual_spec()?;
    let tol = cfg.grid.cg_tol;
    let params = cfg.ns_params(1)?;
    let mut failures = 0;
    let mut audits = Vec::new();
    for path in &files {
        let name = path.file_name().expect("listed files have names").to_string_lossy().into_owned();
        let outcome = (|| -> lordnet::Result<(Field, msr::Audit)> {
            let x = io::read_field(path)?;
            match params {
                None => {
                    let u = fdm::poisson_solve(&x, &grid, tol)?;
                    let a = msr::audit(&x, &u, &spec, tol)?;
                    Ok((u, a))
                }
                Some(p) => {
                    let mut psi = x;
                    let mut worst = msr::Audit { residual: 0.0, bound: f64::INFINITY };
                    for _ in 0..steps {
                        let next = fdm::ns_advance(&psi, &grid, &p, tol)?;
                        let a = msr::audit(&psi, &next, &spec, tol)?;
                        if a.residual - a.bound > worst.residual - worst.bound {
                            worst = a;
                        }
                        psi = next;
                    }
                    Ok((psi, worst))
                }
            }
        })();
        match outcome {
            Ok((sol, a)) => {
                io::write_field(&out.join(&name), &sol)?;
                let verdict = if a.passed() { "ok" } else { "FAIL" };
                println!("audit {name}: max residual {:.3e} (bound {:.3e}) {verdict}", a.residual, a.bound);
                if !a.passed() {
                    failures += 1;
                }
                audits.push(serde_json::json!({ "file": name, "residual": a.residual, "bound": a.bound }));
            }
            Err(e @ (Error::NotConverged { .. } | Error::Numerical(_))) => {
                warn!("{name}: {e}");
                println!("audit {name}: {e}");
                failures += 1;
                audits.push(serde_json::json!({ "file": name, "error": e.to_string() }));
            }
            Err(e) => return Err(e.into()),
        }
    }
    io::write_json(&out.join("audit.json"), &audits)?;
    info!("solved {} inputs into {}", files.len(), out.display());
    if failures > 0 {
        bail!(Exit(EXIT_NUMERICAL, format!("{failures} of {} samples failed the solve or its audit", files.len())));
    }
    Ok(())
}
