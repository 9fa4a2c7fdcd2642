use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use semedit_core::directions::Method;
use semedit_core::metrics::{Distance, Metric, MetricReport};
use semedit_harness::pipeline::{self, AblationReport, RunPaths};
use semedit_harness::{ExperimentConfig, HarnessError, Result};

#[derive(Parser)]
#[command(name = "semedit", version, about = "Class-specific latent controls for semantic image synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    TestScale,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Print a starting config.
    InitConfig {
        #[arg(long, value_enum, default_value = "default")]
        preset: Preset,
    },
    /// Train the generator and the proxy segmenter.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Find direction sets for the selected methods and classes.
    Discover {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated subset of ctrl_sis, random, ganspace, sefa.
        #[arg(long)]
        methods: Option<String>,
        /// Comma-separated class ids.
        #[arg(long)]
        classes: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score an archive and write report.txt and report.json.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        archive: Option<PathBuf>,
        /// Comma-separated metric ids, e.g. mCD,mOD,FID-lite.
        #[arg(long)]
        metrics: Option<String>,
        /// features or msssim.
        #[arg(long)]
        distance: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Loss ablation of Ctrl-SIS.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        classes: Option<String>,
        #[arg(long)]
        distance: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the editing API.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        archive: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Print a saved metric or ablation report.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
}

fn list(arg: &Option<String>) -> Option<Vec<String>> {
    arg.as_ref().map(|s| s.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
}

fn parse_classes(arg: &Option<String>, cfg: &ExperimentConfig) -> Result<Vec<usize>> {
    match list(arg) {
        None => Ok(cfg.classes()),
        Some(items) => {
            let classes = items
                .iter()
                .map(|s| s.parse::<usize>().map_err(|_| HarnessError::Usage(format!("bad class id {s:?}"))))
                .collect::<Result<Vec<_>>>()?;
            if classes.is_empty() {
                return Err(HarnessError::Usage("empty class list".into()));
            }
            Ok(classes)
        }
    }
}

fn parse_methods(arg: &Option<String>, cfg: &ExperimentConfig) -> Result<Vec<Method>> {
    match list(arg) {
        None => Ok(cfg.discovery.methods.clone()),
        Some(items) => {
            let methods = items
                .iter()
                .map(|s| Method::parse(s).map_err(|_| HarnessError::Usage(format!("unknown method {s:?}"))))
                .collect::<Result<Vec<_>>>()?;
            if methods.is_empty() {
                return Err(HarnessError::Usage("empty method list".into()));
            }
            Ok(methods)
        }
    }
}

fn parse_metrics(arg: &Option<String>, cfg: &ExperimentConfig) -> Result<Vec<Metric>> {
    match list(arg) {
        None => Ok(cfg.eval.metrics.clone()),
        Some(items) => items
            .iter()
            .map(|s| Metric::parse(s).map_err(|_| HarnessError::Usage(format!("unknown metric {s:?}"))))
            .collect(),
    }
}

fn parse_distance(arg: &Option<String>, cfg: &ExperimentConfig) -> Result<Distance> {
    let id = arg.as_deref().unwrap_or(&cfg.eval.distance);
    Distance::parse(id).map_err(|_| HarnessError::Usage(format!("unknown distance backend {id:?}")))
}

fn load(config: &Path, out: &Option<PathBuf>) -> Result<(ExperimentConfig, RunPaths)> {
    let cfg = ExperimentConfig::load(config)?;
    let dir = out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, RunPaths::new(dir)))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitConfig { preset } => {
            let cfg = match preset {
                Preset::Default => ExperimentConfig::default(),
                Preset::TestScale => ExperimentConfig::test_scale(),
            };
            print!("{}", cfg.to_toml());
        }
        Command::Train { config, out } => {
            let (cfg, paths) = load(&config, &out)?;
            let mut log = Vec::new();
            let ck = pipeline::train(&cfg, |line| {
                if let pipeline::TrainLogLine::Generator(e) = line {
                    if e.step % 100 == 0 {
                        log::info!("step {} D {:.4} G {:.4}", e.step, e.loss_discriminator, e.loss_generator);
                    }
                }
                log.push(serde_json::to_string(line).expect("log line is plain data"));
            })?;
            let mut text = log.join("\n");
            text.push('\n');
            pipeline::write_file(&paths.train_log(), text.as_bytes())?;
            pipeline::write_file(&paths.checkpoint(), &ck.to_bytes()?)?;
            println!("{}", paths.checkpoint().display());
            println!("checkpoint {}", ck.hash()?);
        }
        Command::Discover { config, checkpoint, methods, classes, out } => {
            let (cfg, paths) = load(&config, &out)?;
            let methods = parse_methods(&methods, &cfg)?;
            let classes = parse_classes(&classes, &cfg)?;
            let ck = pipeline::load_checkpoint(&checkpoint.unwrap_or_else(|| paths.checkpoint()))?;
            let archive = pipeline::discover(&cfg, &ck, &methods, &classes, |r| {
                if r.step % 50 == 0 {
                    log::info!("step {} loss {:.5}", r.step, r.loss.total);
                }
            })?;
            pipeline::write_file(&paths.archive(), &archive.to_bytes()?)?;
            println!("{}", paths.archive().display());
            println!("archive {}", archive.hash()?);
        }
        Command::Evaluate { config, checkpoint, archive, metrics, distance, out } => {
            let (cfg, paths) = load(&config, &out)?;
            let metrics = parse_metrics(&metrics, &cfg)?;
            let distance = parse_distance(&distance, &cfg)?;
            let ck = pipeline::load_checkpoint(&checkpoint.unwrap_or_else(|| paths.checkpoint()))?;
            let archive = pipeline::load_archive(&archive.unwrap_or_else(|| paths.archive()), &ck)?;
            let report = pipeline::evaluate(&cfg, &ck, &archive, &metrics, &distance)?;
            pipeline::write_file(&paths.report("json"), report.to_json()?.as_bytes())?;
            pipeline::write_file(&paths.report("txt"), report.to_text().as_bytes())?;
            print!("{}", report.to_text());
            println!("{}", paths.report("json").display());
        }
        Command::Ablate { config, checkpoint, classes, distance, out } => {
            let (cfg, paths) = load(&config, &out)?;
            let classes = parse_classes(&classes, &cfg)?;
            let distance = parse_distance(&distance, &cfg)?;
            let ck = pipeline::load_checkpoint(&checkpoint.unwrap_or_else(|| paths.checkpoint()))?;
            let report = pipeline::ablate(&cfg, &ck, &classes, &distance, |v, s| log::info!("ablation {v} seed {s}"))?;
            pipeline::write_file(&paths.ablation("json"), report.to_json().as_bytes())?;
            pipeline::write_file(&paths.ablation("txt"), report.to_text().as_bytes())?;
            print!("{}", report.to_text());
            println!("{}", paths.ablation("json").display());
        }
        Command::Serve { checkpoint, archive, port, host } => {
            let ck = pipeline::load_checkpoint(&checkpoint)?;
            let archive = pipeline::load_archive(&archive, &ck)?;
            let state = semedit_service::AppState::new(ck, archive)?;
            let addr = format!("{host}:{port}");
            log::info!("listening on {addr}");
            semedit_service::serve_blocking(state, &addr).map_err(|source| HarnessError::Io { path: addr, source })?;
        }
        Command::Report { input, format } => {
            let text = String::from_utf8_lossy(&pipeline::read_file(&input)?).into_owned();
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| HarnessError::Usage(format!("{}: {e}", input.display())))?;
            let out = if value.get("seeds").is_some() {
                let r = AblationReport::from_json(&text)?;
                match format {
                    Format::Text => r.to_text(),
                    Format::Json => r.to_json(),
                }
            } else {
                let r = MetricReport::from_json(&text)?;
                match format {
                    Format::Text => r.to_text(),
                    Format::Json => r.to_json()?,
                }
            };
            print!("{out}");
            if !out.ends_with('\n') {
                println!();
            }
        }
    }
    std::io::stdout().flush().ok();
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
