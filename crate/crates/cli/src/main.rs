mod config;
mod suites;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tom_core::checkpoint;
use tom_core::envs::{make_offline_dataset, RoadAndRocks, RoadAndRocksConfig, ScriptedExpert};
use tom_core::mbrl::{decile_means, run_offline, run_online, write_metrics_csv, MetricsRow, ReferencePolicy};
use tom_core::mdp::{Environment, ReplayBuffer};
use tom_core::tom::{buffer_importance_weights, Discriminator, DualQ};
use tom_core::FDivergence;

use config::{BuiltEnv, EnvSelection, ExperimentConfig, Mode, ReferenceKind};

pub const WEIGHTS_CSV_VERSION: &str = "tom-weights v1";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config file not found: {}", .0.display())]
    MissingConfig(PathBuf),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Numerical(String),
    #[error(transparent)]
    Core(#[from] tom_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Numerical(_) => 2,
            CliError::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "tom", version, about = "Transition occupancy matching experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment for every configured seed.
    Train {
        config: PathBuf,
        /// `key=value` overrides, dotted keys for nested tables.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write per-transition importance weights for a buffer.
    DumpWeights {
        /// Run directory holding discriminator and dual Q checkpoints.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Buffer CSV.
        #[arg(long)]
        buffer: PathBuf,
        /// Destination; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run a property suite over random tabular problems.
    OracleCheck {
        #[arg(value_enum)]
        suite: suites::Suite,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
    },
    /// Generate a road-and-rocks offline dataset.
    MakeDataset {
        #[arg(long)]
        output: PathBuf,
        /// Destination of the expert subset; `<output stem>.expert.csv` when absent.
        #[arg(long)]
        expert_output: Option<PathBuf>,
        #[arg(long, default_value_t = 5000)]
        random: usize,
        #[arg(long, default_value_t = 20)]
        expert_trajectories: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Road-and-rocks parameters as a TOML file.
        #[arg(long)]
        env_config: Option<PathBuf>,
    },
    /// Print the default experiment config.
    Defaults,
}

/// Settings the weight dump needs to reproduce the training-time weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct WeightSettings {
    divergence: FDivergence,
    weight_value_samples: usize,
    seed: u64,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    name: &'a str,
    seed: u64,
    config_sha256: String,
    mode: Mode,
    env: &'static str,
    failed: bool,
    tool_version: &'static str,
    config: &'a ExperimentConfig,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { config, overrides } => train(&config, &overrides),
        Command::DumpWeights {
            checkpoint,
            buffer,
            output,
        } => dump_weights(&checkpoint, &buffer, output.as_deref()),
        Command::OracleCheck {
            suite,
            seeds,
            first_seed,
        } => {
            if seeds == 0 {
                return Err(CliError::Usage("--seeds must be positive".into()));
            }
            let report = suites::run(suite, seeds, first_seed);
            println!("{report}");
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::Numerical(format!("suite {} failed", suite.name())))
            }
        }
        Command::MakeDataset {
            output,
            expert_output,
            random,
            expert_trajectories,
            seed,
            env_config,
        } => make_dataset(&output, expert_output, random, expert_trajectories, seed, env_config.as_deref()),
        Command::Defaults => {
            let text = toml::to_string(&ExperimentConfig::default())
                .map_err(|e| CliError::Usage(format!("cannot render defaults: {e}")))?;
            print!("{text}");
            Ok(())
        }
    }
}

fn expert_path_for(output: &Path) -> PathBuf {
    let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    output.with_file_name(format!("{stem}.expert.csv"))
}

fn make_dataset(
    output: &Path,
    expert_output: Option<PathBuf>,
    random: usize,
    expert_trajectories: usize,
    seed: u64,
    env_config: Option<&Path>,
) -> Result<(), CliError> {
    let env_config: RoadAndRocksConfig = match env_config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => RoadAndRocksConfig::default(),
    };
    let env = RoadAndRocks::new(env_config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = make_offline_dataset(&env, random, expert_trajectories, &mut rng)?;
    data.buffer.write_csv(BufWriter::new(File::create(output)?))?;
    let expert_path = expert_output.unwrap_or_else(|| expert_path_for(output));
    data.expert.write_csv(BufWriter::new(File::create(&expert_path)?))?;
    eprintln!(
        "wrote {} transitions to {} ({} expert in {})",
        data.buffer.len(),
        output.display(),
        data.expert.len(),
        expert_path.display()
    );
    Ok(())
}

fn read_buffer(path: &Path) -> Result<ReplayBuffer, CliError> {
    let file = File::open(path).map_err(|e| CliError::Usage(format!("cannot open buffer {}: {e}", path.display())))?;
    Ok(ReplayBuffer::read_csv(BufReader::new(file), 1)?)
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_metrics_csv(rows, &mut w)?;
    w.flush()?;
    Ok(())
}

fn train(path: &Path, overrides: &[String]) -> Result<(), CliError> {
    let config = config::load(path, overrides)?;
    let mut any_failed = false;
    for &seed in &config.seeds {
        let dir = config.run_dir(seed);
        std::fs::create_dir_all(&dir)?;
        let mut loop_config = config.loop_config.clone();
        loop_config.seed = seed;
        let failed = match (config.mode, config.env.build()) {
            (Mode::Online, BuiltEnv::PointMass(env)) => train_online(&loop_config, &env, &dir)?,
            (Mode::Online, BuiltEnv::RoadAndRocks(env)) => train_online(&loop_config, &env, &dir)?,
            (Mode::Offline, BuiltEnv::RoadAndRocks(env)) => train_offline(&config, &loop_config, &env, &dir)?,
            (Mode::Offline, BuiltEnv::PointMass(_)) => {
                return Err(CliError::Usage("offline mode runs on road_and_rocks only".into()))
            }
        };
        checkpoint::save(&dir.join("env.json"), "env", &config.env)?;
        checkpoint::save(
            &dir.join("weight_settings.json"),
            "weight_settings",
            &WeightSettings {
                divergence: loop_config.divergence,
                weight_value_samples: loop_config.weight_value_samples,
                seed,
            },
        )?;
        let manifest = Manifest {
            name: &config.name,
            seed,
            config_sha256: config.digest(),
            mode: config.mode,
            env: config.env.name(),
            failed,
            tool_version: env!("CARGO_PKG_VERSION"),
            config: &config,
        };
        let mut w = BufWriter::new(File::create(dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut w, &manifest).map_err(tom_core::Error::from)?;
        w.flush()?;
        println!("{} seed {seed}: {}", config.name, if failed { "failed" } else { "ok" });
        any_failed |= failed;
    }
    if any_failed {
        Err(CliError::Numerical("learner diverged; see the status column of metrics.csv".into()))
    } else {
        Ok(())
    }
}

fn train_online<E: Environment>(config: &tom_core::mbrl::LoopConfig, env: &E, dir: &Path) -> Result<bool, CliError> {
    let run = run_online(config, env)?;
    write_metrics(&dir.join("metrics.csv"), &run.metrics)?;
    checkpoint::save(&dir.join("policy.json"), "policy", &run.policy)?;
    checkpoint::save(&dir.join("critics.json"), "critics", &run.critics)?;
    checkpoint::save(&dir.join("model.json"), "gaussian_mlp_model", &run.model)?;
    checkpoint::save(
        &dir.join("reference.json"),
        "reference_policy",
        &ReferencePolicy::Learned(run.policy.clone()),
    )?;
    if let (Some(d), Some(q)) = (&run.discriminator, &run.dual_q) {
        checkpoint::save(&dir.join("discriminator.json"), "discriminator", d)?;
        checkpoint::save(&dir.join("dual_q.json"), "dual_q", q)?;
    }
    run.replay.write_csv(BufWriter::new(File::create(dir.join("replay.csv"))?))?;
    Ok(run.failed)
}

fn offline_data(config: &ExperimentConfig, env: &RoadAndRocks) -> Result<(ReplayBuffer, ReplayBuffer), CliError> {
    let ds = &config.dataset;
    match &ds.path {
        Some(path) => {
            let buffer = read_buffer(path)?;
            let expert_path = ds.expert_path.clone().unwrap_or_else(|| expert_path_for(path));
            Ok((buffer, read_buffer(&expert_path)?))
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(ds.seed);
            let data = make_offline_dataset(env, ds.n_random, ds.n_expert_trajectories, &mut rng)?;
            Ok((data.buffer, data.expert))
        }
    }
}

fn train_offline(
    config: &ExperimentConfig,
    loop_config: &tom_core::mbrl::LoopConfig,
    env: &RoadAndRocks,
    dir: &Path,
) -> Result<bool, CliError> {
    let (dataset, expert) = offline_data(config, env)?;
    let reference = match config.reference {
        ReferenceKind::Expert => Some(ReferencePolicy::Scripted(ScriptedExpert::for_road(env))),
        ReferenceKind::Learned => None,
    };
    let run = run_offline(loop_config, &dataset, &expert, env, reference.as_ref())?;
    write_metrics(&dir.join("metrics.csv"), &run.metrics)?;
    checkpoint::save(&dir.join("policy.json"), "policy", &run.policy)?;
    checkpoint::save(&dir.join("model.json"), "linear_gaussian_model", &run.model)?;
    let reference = reference.unwrap_or_else(|| ReferencePolicy::Learned(run.policy.clone()));
    checkpoint::save(&dir.join("reference.json"), "reference_policy", &reference)?;
    if let (Some(d), Some(q)) = (&run.discriminator, &run.dual_q) {
        checkpoint::save(&dir.join("discriminator.json"), "discriminator", d)?;
        checkpoint::save(&dir.join("dual_q.json"), "dual_q", q)?;
    }
    dataset.write_csv(BufWriter::new(File::create(dir.join("dataset.csv"))?))?;
    Ok(run.failed)
}

fn load_checkpoint<T: serde::de::DeserializeOwned>(dir: &Path, file: &str, kind: &str) -> Result<T, CliError> {
    let path = dir.join(file);
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "{} has no {kind} checkpoint (expected {})",
            dir.display(),
            path.display()
        )));
    }
    Ok(checkpoint::load(&path, kind)?)
}

fn dump_weights(dir: &Path, buffer_path: &Path, output: Option<&Path>) -> Result<(), CliError> {
    let disc: Discriminator = load_checkpoint(dir, "discriminator.json", "discriminator")?;
    let q: DualQ = load_checkpoint(dir, "dual_q.json", "dual_q")?;
    let reference: ReferencePolicy = load_checkpoint(dir, "reference.json", "reference_policy")?;
    let settings: WeightSettings = load_checkpoint(dir, "weight_settings.json", "weight_settings")?;
    let env: Option<EnvSelection> = if dir.join("env.json").exists() {
        Some(checkpoint::load(&dir.join("env.json"), "env")?)
    } else {
        None
    };
    let buffer = read_buffer(buffer_path)?;
    let (sd, ad) = (buffer.state_dim(), buffer.action_dim());
    if disc.spec.input_dim != 2 * sd + ad || q.spec.input_dim != sd + ad {
        return Err(CliError::Usage(format!(
            "checkpoint expects {} discriminator inputs and {} value inputs; buffer has state dim {sd}, action dim {ad}",
            disc.spec.input_dim, q.spec.input_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let weights = buffer_importance_weights(
        &q,
        &reference,
        &disc,
        &buffer,
        settings.divergence,
        settings.weight_value_samples,
        &mut rng,
    )?;
    let road = match env {
        Some(EnvSelection::RoadAndRocks(c)) => Some(RoadAndRocks::new(c)),
        _ => None,
    };

    let sink: Box<dyn Write> = match output {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = BufWriter::new(sink);
    writeln!(w, "# {WEIGHTS_CSV_VERSION}")?;
    writeln!(w, "{}", if road.is_some() { "insertion_index,weight,on_road" } else { "insertion_index,weight" })?;
    for (t, weight) in buffer.iter().zip(&weights) {
        match &road {
            Some(env) => writeln!(w, "{},{},{}", t.insertion_index, weight, u8::from(env.is_on_road(&t.state)))?,
            None => writeln!(w, "{},{}", t.insertion_index, weight)?,
        }
    }
    for (d, m) in decile_means(&weights).iter().enumerate() {
        writeln!(w, "#decile,{d},{m}")?;
    }
    w.flush()?;
    Ok(())
}
