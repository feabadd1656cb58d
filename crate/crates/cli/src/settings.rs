//! Run configuration: command defaults, overlaid by a flat JSON file, overlaid by flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::ValueEnum;
use mgrad::data::{self, Dataset, Split, SplitRatios, SynthConfig};
use mgrad::models::{ModelKind, ModelSpec};
use mgrad::optim::{MgConfig, OptimizerKind};
use mgrad::probes::{AdjustMode, AdvConfig, AdvTarget, EvalConfig, MapNorm, NoiseTarget};
use mgrad::Exec;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Toggle {
    On,
    Off,
}

/// Fully resolved settings. Every field has a value after resolution, so the
/// echoed JSON is a complete, replayable config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub seed: u64,
    pub out: PathBuf,

    pub data: Option<PathBuf>,
    /// `modality=path` entries.
    pub features: Vec<String>,
    pub synth: bool,
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub synth_noise: f64,
    /// `modality=dim` entries for synthetic features.
    pub synth_modalities: Vec<String>,

    pub model: ModelKind,
    pub dim: usize,
    pub l2: f64,
    pub init_scale: f64,

    pub mg: Toggle,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: usize,
    pub eta: f64,
    pub base: OptimizerKind,
    pub iterations: usize,
    pub batch: usize,
    pub moment_update_in_mirror: bool,

    pub epsilon: f64,
    pub lambda_adv: f64,
    pub adv_target: AdvTarget,

    pub k: usize,
    pub split: Split,
    pub map_norm: MapNorm,
    pub exec: Exec,
    pub checkpoint: Option<PathBuf>,

    pub sigma: f64,
    pub repeats: usize,
    pub noise_target: NoiseTarget,
    pub grid: usize,
    pub range: f64,
    pub fraction: f64,
    pub adjust_mode: AdjustMode,
    pub radius: f64,
    pub samples: usize,
    pub rho: f64,

    pub seeds: usize,
    pub matched_rate: bool,
    pub alpha1_grid: Vec<f64>,
    pub alpha2_grid: Vec<f64>,

    pub trials: usize,
    pub basin_init: Option<f64>,
    pub sam: bool,
}

impl Settings {
    /// Defaults for `command`; the basin benchmark runs plain SGD on a 1-D
    /// function and so has its own optimizer defaults.
    pub fn defaults(command: &str) -> Self {
        let basin = command == "basin";
        Self {
            seed: 0,
            out: PathBuf::from("mgrad-out"),
            data: None,
            features: Vec::new(),
            synth: false,
            users: 200,
            items: 100,
            interactions: 10,
            synth_noise: 0.1,
            synth_modalities: vec!["text=16".into(), "visual=16".into()],
            model: ModelKind::MultimodalMf,
            dim: 8,
            l2: ModelSpec::DEFAULT_L2,
            init_scale: 0.1,
            mg: Toggle::On,
            alpha1: if basin { 2.0 } else { 1.0 },
            alpha2: if basin { 1.0 } else { 0.5 },
            beta: if basin { 1 } else { 3 },
            eta: if basin { 0.005 } else { 0.01 },
            base: if basin { OptimizerKind::Sgd } else { OptimizerKind::Adam },
            iterations: if basin { 500 } else { 1000 },
            batch: 256,
            moment_update_in_mirror: true,
            epsilon: 0.5,
            lambda_adv: 0.0,
            adv_target: AdvTarget::ItemFactors,
            k: 5,
            split: if command == "train" || command == "gridsearch" {
                Split::Valid
            } else {
                Split::Test
            },
            map_norm: MapNorm::MinKTest,
            exec: Exec::default(),
            checkpoint: None,
            sigma: 1e-6,
            repeats: 10,
            noise_target: NoiseTarget::Factors,
            grid: 21,
            range: 1.0,
            fraction: 0.01,
            adjust_mode: AdjustMode::Mix,
            radius: 0.1,
            samples: 500,
            rho: 0.05,
            seeds: 1,
            matched_rate: false,
            alpha1_grid: vec![0.5, 1.0, 2.0],
            alpha2_grid: vec![0.1, 0.5, 1.0],
            trials: 200,
            basin_init: None,
            sam: true,
        }
    }

    /// `defaults(command)` <- config file <- flag overrides.
    pub fn resolve(command: &str, file: Option<&Path>, flags: Map<String, Value>) -> anyhow::Result<Self> {
        let Value::Object(mut merged) = serde_json::to_value(Self::defaults(command))? else {
            unreachable!("settings serialize to an object");
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(|e| ConfigError(format!("{e:#}")))?;
            let value: Value = serde_json::from_str(&text)
                .map_err(|e| ConfigError(format!("config {}: {e}", path.display())))?;
            let Value::Object(map) = value else {
                bail!(ConfigError(format!("config {} must be a JSON object", path.display())));
            };
            merged.extend(map);
        }
        merged.extend(flags);
        serde_json::from_value(Value::Object(merged)).map_err(|e| ConfigError(format!("invalid config: {e}")).into())
    }

    pub fn write_echo(&self, command: &str) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join(format!("{command}.config.json"));
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.mgckpt"))
    }

    pub fn mg_config(&self) -> anyhow::Result<MgConfig> {
        let cfg = MgConfig::new(self.alpha1, self.alpha2, self.beta, self.eta, self.base, self.iterations)?
            .with_moment_update_in_mirror(self.moment_update_in_mirror);
        Ok(match self.mg {
            Toggle::On => cfg,
            Toggle::Off => cfg.without_mirror(),
        })
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            k: self.k,
            split: self.split,
            map_norm: self.map_norm,
            exec: self.exec,
        }
    }

    pub fn adv_config(&self) -> Option<AdvConfig> {
        (self.lambda_adv > 0.0).then_some(AdvConfig {
            epsilon: self.epsilon,
            lambda_adv: self.lambda_adv,
            target: self.adv_target,
        })
    }

    pub fn model_spec(&self, ds: &Dataset) -> anyhow::Result<ModelSpec> {
        let spec = match self.model {
            ModelKind::Mf => ModelSpec::mf(self.dim),
            ModelKind::MultimodalMf => {
                let dims = ds.feature_dims();
                if dims.is_empty() {
                    bail!(ConfigError("multimodal-mf needs item features (--features or --synth)".into()));
                }
                ModelSpec::multimodal(self.dim, dims)
            }
        }
        .with_l2(self.l2);
        spec.validate()?;
        Ok(spec)
    }

    /// Loads or generates the dataset and applies the seeded 8:1:1 split.
    pub fn dataset(&self) -> anyhow::Result<Dataset> {
        let ds = if self.synth {
            let cfg = SynthConfig {
                num_users: self.users,
                num_items: self.items,
                latent_dim: self.dim,
                modality_dims: parse_pairs(&self.synth_modalities, "synth_modalities")?
                    .into_iter()
                    .map(|(m, v)| Ok((m, v.parse::<usize>().map_err(|e| ConfigError(format!("synth_modalities: {e}")))?)))
                    .collect::<anyhow::Result<BTreeMap<_, _>>>()?,
                noise_std: self.synth_noise,
                interactions_per_user: self.interactions,
                seed: self.seed,
                ..SynthConfig::default()
            };
            data::synth_generate(&cfg)?.dataset
        } else {
            let Some(path) = &self.data else {
                bail!(ConfigError("no dataset: pass --data PATH or --synth".into()));
            };
            let raw = data::load_interactions(path)?;
            if raw.duplicates > 0 {
                log::info!("dropped {} duplicate interactions", raw.duplicates);
            }
            let mut ds = Dataset::from_raw(raw)?;
            let mut features = data::Features::new();
            for (m, p) in parse_pairs(&self.features, "features")? {
                let load = data::load_features(Path::new(&p), &m, &ds.item_tokens)?;
                if load.missing > 0 {
                    log::warn!("{m}: {} items without features (zero-filled)", load.missing);
                }
                if load.unknown > 0 {
                    log::warn!("{m}: {} rows for unknown items ignored", load.unknown);
                }
                features.insert(m, load.matrix);
            }
            ds = ds.with_features(features)?;
            ds
        };
        Ok(data::split(&ds, SplitRatios::default(), self.seed)?)
    }
}

fn parse_pairs(entries: &[String], what: &str) -> anyhow::Result<Vec<(String, String)>> {
    entries
        .iter()
        .map(|e| match e.split_once('=') {
            Some((k, v)) if !k.is_empty() && !v.is_empty() => Ok((k.to_string(), v.to_string())),
            _ => Err(ConfigError(format!("{what}: expected name=value, got `{e}`")).into()),
        })
        .collect()
}
