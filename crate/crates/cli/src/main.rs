//! `mgrad`: train, evaluate and probe mirror-gradient recommenders.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

use settings::{Settings, Toggle};

/// Configuration problems; reported with exit status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Parser)]
#[command(name = "mgrad", version, about = "Mirror-gradient training and robustness probes for BPR recommenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.mgckpt, trace.csv and metrics.json.
    Train,
    /// Evaluate a checkpoint; writes eval.json.
    Eval,
    /// Run a robustness or flatness probe on a checkpoint.
    Probe {
        #[arg(value_enum)]
        kind: ProbeKind,
    },
    /// Train baseline and mirror-gradient arms on shared seeds; writes compare.json.
    Compare,
    /// Grid search over (alpha1, alpha2); writes gridsearch.csv and heatmap.csv.
    Gridsearch,
    /// Two-basin selection benchmark; writes basin.csv.
    Basin,
    /// Emit a synthetic dataset as interaction and feature files.
    Synth,
    /// Dataset statistics; writes stats.json.
    Stats,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ProbeKind {
    Noise,
    Adjust,
    Landscape,
    Flatness,
    Bound,
}

impl ProbeKind {
    fn name(self) -> &'static str {
        match self {
            ProbeKind::Noise => "noise",
            ProbeKind::Adjust => "adjust",
            ProbeKind::Landscape => "landscape",
            ProbeKind::Flatness => "flatness",
            ProbeKind::Bound => "bound",
        }
    }
}

#[derive(Args)]
struct Opts {
    /// Flat JSON config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Interactions file (`user<TAB>item`).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Item features as `modality=path`; repeatable.
    #[arg(long, global = true)]
    features: Option<Vec<String>>,
    /// Use a generated dataset instead of --data.
    #[arg(long, global = true)]
    synth: bool,
    #[arg(long, global = true)]
    users: Option<usize>,
    #[arg(long, global = true)]
    items: Option<usize>,
    /// Interactions per synthetic user.
    #[arg(long, global = true)]
    interactions: Option<usize>,
    #[arg(long, global = true)]
    synth_noise: Option<f64>,
    #[arg(long, global = true, value_delimiter = ',')]
    synth_modalities: Option<Vec<String>>,

    /// mf | multimodal-mf
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    dim: Option<usize>,
    #[arg(long, global = true)]
    l2: Option<f64>,
    #[arg(long, global = true)]
    init_scale: Option<f64>,

    #[arg(long, global = true, value_enum)]
    mg: Option<Toggle>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    alpha1: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    alpha2: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    eta: Option<f64>,
    /// sgd | adam | rmsprop | adagrad
    #[arg(long, global = true)]
    base: Option<String>,
    #[arg(long, global = true)]
    iterations: Option<usize>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    moment_update_in_mirror: Option<bool>,

    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    lambda_adv: Option<f64>,
    /// item-factors | features
    #[arg(long, global = true)]
    adv_target: Option<String>,

    #[arg(long, global = true)]
    k: Option<usize>,
    /// train | valid | test
    #[arg(long, global = true)]
    split: Option<String>,
    /// min-k-test | test-size
    #[arg(long, global = true)]
    map_norm: Option<String>,
    /// sequential | parallel
    #[arg(long, global = true)]
    exec: Option<String>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    #[arg(long, global = true)]
    sigma: Option<f64>,
    #[arg(long, global = true)]
    repeats: Option<usize>,
    /// factors | factors-and-projections
    #[arg(long, global = true)]
    noise_target: Option<String>,
    #[arg(long, global = true)]
    grid: Option<usize>,
    #[arg(long, global = true)]
    range: Option<f64>,
    #[arg(long, global = true)]
    fraction: Option<f64>,
    /// mix | self-mix | shift
    #[arg(long, global = true)]
    adjust_mode: Option<String>,
    #[arg(long, global = true)]
    radius: Option<f64>,
    #[arg(long, global = true)]
    samples: Option<usize>,
    #[arg(long, global = true)]
    rho: Option<f64>,

    #[arg(long, global = true)]
    seeds: Option<usize>,
    /// Baseline learning rate (alpha1 - alpha2) * eta.
    #[arg(long, global = true)]
    matched_rate: bool,
    #[arg(long, global = true, value_delimiter = ',', allow_negative_numbers = true)]
    alpha1_grid: Option<Vec<f64>>,
    #[arg(long, global = true, value_delimiter = ',', allow_negative_numbers = true)]
    alpha2_grid: Option<Vec<f64>>,

    #[arg(long, global = true)]
    trials: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    basin_init: Option<f64>,
    /// Leave the sharpness-aware arm out of the basin benchmark.
    #[arg(long, global = true)]
    no_sam: bool,
}

impl Opts {
    /// Flags that were given, as config keys.
    fn overrides(&self) -> Map<String, Value> {
        let mut m = Map::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("seed", self.seed.map(Value::from));
        put("out", self.out.as_ref().map(to_json));
        put("data", self.data.as_ref().map(to_json));
        put("features", self.features.as_ref().map(to_json));
        put("synth", self.synth.then_some(Value::Bool(true)));
        put("users", self.users.map(Value::from));
        put("items", self.items.map(Value::from));
        put("interactions", self.interactions.map(Value::from));
        put("synth_noise", self.synth_noise.map(Value::from));
        put("synth_modalities", self.synth_modalities.as_ref().map(to_json));
        put("model", self.model.clone().map(Value::from));
        put("dim", self.dim.map(Value::from));
        put("l2", self.l2.map(Value::from));
        put("init_scale", self.init_scale.map(Value::from));
        put("mg", self.mg.map(|t| to_json(&t)));
        put("alpha1", self.alpha1.map(Value::from));
        put("alpha2", self.alpha2.map(Value::from));
        put("beta", self.beta.map(Value::from));
        put("eta", self.eta.map(Value::from));
        put("base", self.base.clone().map(Value::from));
        put("iterations", self.iterations.map(Value::from));
        put("batch", self.batch.map(Value::from));
        put("moment_update_in_mirror", self.moment_update_in_mirror.map(Value::from));
        put("epsilon", self.epsilon.map(Value::from));
        put("lambda_adv", self.lambda_adv.map(Value::from));
        put("adv_target", self.adv_target.clone().map(Value::from));
        put("k", self.k.map(Value::from));
        put("split", self.split.clone().map(Value::from));
        put("map_norm", self.map_norm.clone().map(Value::from));
        put("exec", self.exec.clone().map(Value::from));
        put("checkpoint", self.checkpoint.as_ref().map(to_json));
        put("sigma", self.sigma.map(Value::from));
        put("repeats", self.repeats.map(Value::from));
        put("noise_target", self.noise_target.clone().map(Value::from));
        put("grid", self.grid.map(Value::from));
        put("range", self.range.map(Value::from));
        put("fraction", self.fraction.map(Value::from));
        put("adjust_mode", self.adjust_mode.clone().map(Value::from));
        put("radius", self.radius.map(Value::from));
        put("samples", self.samples.map(Value::from));
        put("rho", self.rho.map(Value::from));
        put("seeds", self.seeds.map(Value::from));
        put("matched_rate", self.matched_rate.then_some(Value::Bool(true)));
        put("alpha1_grid", self.alpha1_grid.as_ref().map(to_json));
        put("alpha2_grid", self.alpha2_grid.as_ref().map(to_json));
        put("trials", self.trials.map(Value::from));
        put("basin_init", self.basin_init.map(Value::from));
        put("sam", self.no_sam.then_some(Value::Bool(false)));
        m
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("flag values serialize")
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Probe { .. } => "probe",
            Command::Compare => "compare",
            Command::Gridsearch => "gridsearch",
            Command::Basin => "basin",
            Command::Synth => "synth",
            Command::Stats => "stats",
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.downcast_ref::<ConfigError>().is_some()
            || e.downcast_ref::<mgrad::MgError>().is_some_and(|m| m.is_config())
    });
    if config {
        2
    } else {
        1
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let command = cli.command.name();
    let settings = Settings::resolve(command, cli.opts.config.as_deref(), cli.opts.overrides())?;
    let echo = match &cli.command {
        Command::Probe { kind } => format!("probe-{}", kind.name()),
        _ => command.to_string(),
    };
    settings.write_echo(&echo)?;
    match cli.command {
        Command::Train => commands::train(&settings),
        Command::Eval => commands::eval(&settings),
        Command::Probe { kind } => commands::probe(&settings, kind),
        Command::Compare => commands::compare(&settings),
        Command::Gridsearch => commands::gridsearch(&settings),
        Command::Basin => commands::basin(&settings),
        Command::Synth => commands::synth(&settings),
        Command::Stats => commands::stats(&settings),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MG_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
