//! Declarative experiment configuration.
//!
//! A run reads one TOML document (every key optional, unknown keys
//! rejected), applies `--set section.key=value` overrides on the raw
//! document, then validates the result into [`ExperimentConfig`].

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use placerec_core::evaluator::GroundTruthMatcher;
use placerec_core::losses::{LossConfig, LossKind};
use placerec_core::mining::Miner;
use placerec_core::places::{BatchSpec, IngestOptions, SynthConfig};
use placerec_core::trainer::{AggregatorSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Name of the resolved config written next to every run's outputs.
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub synth: SynthSection,
    pub db: DbSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub reduce: ReduceSection,
    pub report: ReportSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub places: usize,
    pub images_per_place: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub max_shift: usize,
    pub gain: f64,
    pub noise_std: f64,
    pub distractor_amp: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            places: 64,
            images_per_place: 8,
            height: 7,
            width: 7,
            channels: 32,
            max_shift: s.max_shift,
            gain: s.gain,
            noise_std: s.noise_std,
            distractor_amp: s.distractor_amp,
        }
    }
}

impl SynthSection {
    pub fn perturbation(&self) -> SynthConfig {
        SynthConfig {
            max_shift: self.max_shift,
            gain: self.gain,
            noise_std: self.noise_std,
            distractor_amp: self.distractor_amp,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

/// Manifest ingestion for `build-db`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbSection {
    pub manifest: Option<PathBuf>,
    /// Optional `N x H x W x C` feature stack aligned with the manifest rows.
    pub features: Option<PathBuf>,
    pub cell_size_deg: f64,
    pub min_images: usize,
    pub permissive: bool,
}

impl Default for DbSection {
    fn default() -> Self {
        let o = IngestOptions::default();
        Self {
            manifest: None,
            features: None,
            cell_size_deg: o.cell_size_deg,
            min_images: o.min_images,
            permissive: o.permissive,
        }
    }
}

impl DbSection {
    pub fn ingest_options(&self) -> IngestOptions {
        IngestOptions {
            min_images: self.min_images,
            permissive: self.permissive,
            cell_size_deg: self.cell_size_deg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Database directory; synthesized from `[synth]` when absent.
    pub db: Option<PathBuf>,
    pub places_per_batch: usize,
    pub images_per_place: usize,
    /// `conv-ap`, `gem` or `avg`.
    pub aggregator: String,
    pub d: usize,
    pub s1: usize,
    pub s2: usize,
    pub bias: bool,
    pub gem_p: f64,
    /// `ms`, `triplet` or `contrastive`.
    pub loss: String,
    /// `ms`, `hardest` or `all`; defaults to the loss's usual partner.
    pub miner: Option<String>,
    pub ms_epsilon: f64,
    pub margin: Option<f64>,
    pub ms_alpha: Option<f64>,
    pub ms_beta: Option<f64>,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_bias: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            db: None,
            places_per_batch: 8,
            images_per_place: 4,
            aggregator: "conv-ap".into(),
            d: 64,
            s1: 2,
            s2: 2,
            bias: true,
            gem_p: 3.0,
            loss: "ms".into(),
            miner: None,
            ms_epsilon: 0.1,
            margin: None,
            ms_alpha: None,
            ms_beta: None,
            lr: t.initial_lr,
            lr_decay_factor: t.lr_decay_factor,
            lr_decay_every: t.lr_decay_every,
            epochs: 15,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            decay_bias: t.decay_bias,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> Result<TrainConfig> {
        let aggregator = match self.aggregator.as_str() {
            "conv-ap" => AggregatorSpec::ConvAp {
                d: self.d,
                s1: self.s1,
                s2: self.s2,
                bias: self.bias,
            },
            "gem" => AggregatorSpec::Gem { p: self.gem_p },
            "avg" => AggregatorSpec::Avg,
            other => bail!("unknown aggregator {other:?} (expected conv-ap, gem or avg)"),
        };
        let loss = match self.loss.as_str() {
            "ms" => LossKind::MultiSimilarity,
            "triplet" => LossKind::Triplet,
            "contrastive" => LossKind::Contrastive,
            other => bail!("unknown loss {other:?} (expected ms, triplet or contrastive)"),
        };
        let miner_name = self.miner.clone().unwrap_or_else(|| {
            match loss {
                LossKind::MultiSimilarity => "ms",
                LossKind::Triplet => "hardest",
                LossKind::Contrastive => "all",
            }
            .to_owned()
        });
        let miner = match miner_name.as_str() {
            "ms" => Miner::MultiSimilarity {
                epsilon: self.ms_epsilon,
            },
            "hardest" => Miner::Hardest,
            "all" => Miner::All,
            other => bail!("unknown miner {other:?} (expected ms, hardest or all)"),
        };
        let base = loss.default_config();
        let loss_cfg = LossConfig {
            margin: self.margin.unwrap_or(base.margin),
            ms_alpha: self.ms_alpha.unwrap_or(base.ms_alpha),
            ms_beta: self.ms_beta.unwrap_or(base.ms_beta),
        };
        let cfg = TrainConfig {
            batch: BatchSpec {
                num_places: self.places_per_batch,
                images_per_place: self.images_per_place,
                rng_seed: seed,
            },
            aggregator,
            loss,
            loss_cfg,
            miner,
            initial_lr: self.lr,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_every: self.lr_decay_every,
            max_epochs: self.epochs,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            decay_bias: self.decay_bias,
            rng_seed: seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Describe `db` with this head, splitting each place's images into
    /// references (first `ref_images`) and queries (the rest).
    pub checkpoint: Option<PathBuf>,
    pub db: Option<PathBuf>,
    pub ref_images: usize,
    /// Or evaluate precomputed descriptor sets.
    pub queries: Option<PathBuf>,
    pub refs: Option<PathBuf>,
    /// PCA model applied to both sides before retrieval.
    pub pca: Option<PathBuf>,
    /// `label`, `geo` or `geo:<radius in m>`.
    pub ground_truth: String,
    pub ks: Vec<usize>,
    /// Row label in reports; defaults to the head's label.
    pub label: Option<String>,
    /// Column group in reports.
    pub set: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            db: None,
            ref_images: 4,
            queries: None,
            refs: None,
            pca: None,
            ground_truth: "label".into(),
            ks: vec![1, 5, 10],
            label: None,
            set: "test".into(),
        }
    }
}

impl EvalSection {
    pub fn matcher(&self) -> Result<GroundTruthMatcher> {
        Ok(GroundTruthMatcher::parse(&self.ground_truth)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReduceSection {
    /// Descriptor set the PCA is fitted on.
    pub fit: Option<PathBuf>,
    /// Descriptor sets to transform with the fitted model.
    pub apply: Vec<PathBuf>,
    pub out_dim: usize,
    pub epsilon: f64,
}

impl Default for ReduceSection {
    fn default() -> Self {
        Self {
            fit: None,
            apply: Vec::new(),
            out_dim: 64,
            epsilon: placerec_core::evaluator::pca::DEFAULT_PCA_EPSILON,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Eval output directories (or their `report.kv` files).
    pub runs: Vec<PathBuf>,
}

/// Parses an override value as a TOML value, falling back to a bare string
/// so `--set train.loss=triplet` works without quotes.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_owned()))
}

/// Applies one `dotted.key=value` override to a raw document.
pub fn apply_override(doc: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override {assignment:?} is not key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} is malformed");
    }
    let (last, parents) = path.split_last().expect("split yields one element");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry((*p).to_owned())
            .or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .with_context(|| format!("override {key:?}: {p:?} is not a section"))?;
    }
    table.insert((*last).to_owned(), parse_value(raw.trim()));
    Ok(())
}

/// Reads `path` (if any), applies overrides and the seed flag, validates.
pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut doc = match path {
        Some(p) => std::fs::read_to_string(p)
            .with_context(|| format!("reading config {}", p.display()))?
            .parse::<Table>()
            .with_context(|| format!("parsing config {}", p.display()))?,
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    if let Some(s) = seed {
        let s = i64::try_from(s).context("seed must fit in a signed 64-bit TOML integer")?;
        doc.insert("seed".into(), Value::Integer(s));
    }
    let cfg: ExperimentConfig = Value::Table(doc).try_into().context("invalid configuration")?;
    Ok(cfg)
}

/// Writes the resolved configuration into `out_dir`.
pub fn write_resolved(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let text = toml::to_string(cfg).context("serializing resolved config")?;
    std::fs::write(out_dir.join(RESOLVED_CONFIG_FILE), text)
        .with_context(|| format!("writing config into {}", out_dir.display()))
}
