use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use crowdgraph::config::ExperimentConfig;
use crowdgraph::experiment;
use crowdgraph::gradcheck::{run_suite, suite::DEFAULT_SEEDS};
use crowdgraph::{Error, Result};

#[derive(Parser)]
#[command(name = "crowdgraph", version, about = "Graph-enhanced crowd counting on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed (initialization, shuffling, augmentation).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, log and report.
    Train(Common),
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Eval)]
        split: Split,
    },
    /// Train and evaluate the five component variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Seeds shared by every variant.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Train and evaluate once per neighbor count.
    SweepK {
        #[command(flatten)]
        common: Common,
        #[arg(long = "k", value_delimiter = ',', default_values_t = [1usize, 2, 4, 8, 16])]
        ks: Vec<usize>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: u64,
        /// Corrupt the backward rule of this operation (negative control).
        #[arg(long, hide = true)]
        fault: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Dump both semantic graphs, the density map and points for one scene.
    GraphDump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene_seed: u64,
    },
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print (or write) the default configuration with every field explicit.
    Init {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Usage(_) => 2,
        Error::Checkpoint(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), contents)?;
    Ok(())
}

fn json(v: &impl serde::Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// The expected configuration for a checkpoint: only enforced when the user
/// names one explicitly.
fn expected_config(c: &Common) -> Result<Option<ExperimentConfig>> {
    if c.config.is_some() || c.seed.is_some() {
        load_config(c).map(Some)
    } else {
        Ok(None)
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let out = experiment::train(&cfg, |e| {
                eprintln!(
                    "epoch {:>4}  L_joint {:.5}  L_density {:.6}  L_cls {:.5}  L_loc {:.4}",
                    e.epoch, e.l_joint, e.l_density, e.l_cls, e.l_loc
                )
            })?;
            out.write_artifacts(&c.out_dir)?;
            if let Some(m) = &out.eval_metrics {
                println!("eval MAE {:.4}  MSE(RMSE) {:.4}  ({} scenes)", m.mae, m.mse, m.images.len());
            }
            println!("wrote {}", c.out_dir.display());
        }
        Command::Eval { common, checkpoint, split } => {
            let expected = expected_config(&common)?;
            let (model, mut store) = experiment::load_checkpoint(&checkpoint, expected.as_ref())?;
            let cfg = &model.cfg;
            let (base, n) = match split {
                Split::Train => (cfg.data.train_seed_base, cfg.data.train_scenes),
                Split::Eval => (cfg.data.eval_seed_base, cfg.data.eval_scenes),
            };
            if n == 0 {
                return Err(Error::Config("the selected split is empty".into()));
            }
            let scenes = experiment::scenes_for(cfg, &experiment::split_seeds(base, n));
            let m = experiment::evaluate(&model, &mut store, &scenes)?;
            write(&common.out_dir, "metrics.json", json(&serde_json::json!({
                "config_hash": cfg.hash(),
                "split": match split { Split::Train => "train", Split::Eval => "eval" },
                "mae": m.mae,
                "mse": m.mse,
                "images": m.images.len(),
            }))?)?;
            write(&common.out_dir, "counts.csv", m.counts_csv())?;
            println!("MAE {:.4}  MSE(RMSE) {:.4}  ({} scenes)", m.mae, m.mse, m.images.len());
        }
        Command::Ablate { common, seeds } => {
            let cfg = load_config(&common)?;
            let report = experiment::ablate(&cfg, &seeds, |name, seed, m| {
                eprintln!("{name:<8} seed {seed}: MAE {:.3}  MSE(RMSE) {:.3}", m.mae, m.mse)
            })?;
            write(&common.out_dir, "ablation.csv", report.to_csv())?;
            write(&common.out_dir, "ablation.json", json(&report)?)?;
            print!("{}", report.to_csv());
        }
        Command::SweepK { common, ks } => {
            let cfg = load_config(&common)?;
            let rows = experiment::sweep_k(&cfg, &ks, |r| eprintln!("K={}: MAE {:.3}  MSE(RMSE) {:.3}", r.k, r.mae, r.mse))?;
            let csv = experiment::sweep_csv(&rows);
            write(&common.out_dir, "sweep_k.csv", &csv)?;
            print!("{csv}");
        }
        Command::Gradcheck { seeds, fault, out_dir } => {
            let fault: Option<&'static str> = fault.map(|f| &*Box::leak(f.into_boxed_str()));
            let report = run_suite(seeds, fault, |_| {})?;
            print!("{}", report.to_text());
            if let Some(dir) = out_dir {
                write(&dir, "gradcheck.json", json(&report)?)?;
            }
            if !report.passed() {
                for f in report.failures() {
                    eprintln!("gradient check failed: {} (max rel err {:.3e}, seed {})", f.name, f.max_rel_err, f.worst_seed);
                }
                return Ok(ExitCode::from(1));
            }
        }
        Command::GraphDump { common, checkpoint, scene_seed } => {
            let expected = expected_config(&common)?;
            let (model, mut store) = experiment::load_checkpoint(&checkpoint, expected.as_ref())?;
            let dump = experiment::graph_dump(&model, &mut store, scene_seed)?;
            dump.write(&common.out_dir)?;
            println!("wrote {}", common.out_dir.display());
        }
        Command::Config { action: ConfigAction::Init { out } } => {
            let text = ExperimentConfig::default().to_json() + "\n";
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
