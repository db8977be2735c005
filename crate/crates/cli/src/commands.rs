use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use placerec_core::aggregators::Aggregator;
use placerec_core::evaluator::format::{load_descriptor_set, load_tensor, save_descriptor_set, DescriptorSet};
use placerec_core::evaluator::pca::{pca_transform, pca_whiten_fit, PCAModel};
use placerec_core::evaluator::recall_at_k;
use placerec_core::places::{attach_features, ingest_manifest, load_db, save_db, synth_places, PlacesDB};
use placerec_core::trainer::{describe_db, load_checkpoint, save_checkpoint, train as train_head};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::report::{report_table, RunResult};

pub const CHECKPOINT_FILE: &str = "checkpoint.vprc";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const REFS_FILE: &str = "refs.vprk";
pub const QUERIES_FILE: &str = "queries.vprk";
pub const REPORT_KV_FILE: &str = "report.kv";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const PCA_FILE: &str = "pca.json";

fn synth_db(cfg: &ExperimentConfig) -> Result<PlacesDB> {
    let s = &cfg.synth;
    Ok(synth_places(s.places, s.images_per_place, s.shape(), &s.perturbation(), cfg.seed)?)
}

fn open_db(cfg: &ExperimentConfig, dir: &Path) -> Result<PlacesDB> {
    load_db(dir, &cfg.db.ingest_options()).with_context(|| format!("loading database {}", dir.display()))
}

pub fn synth(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let db = synth_db(cfg)?;
    save_db(&db, out)?;
    println!("{} places, {} images -> {}", db.len(), db.num_images(), out.display());
    Ok(())
}

pub fn build_db(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let manifest = cfg.db.manifest.as_ref().context("build-db needs db.manifest")?;
    let mut db = ingest_manifest(manifest, &cfg.db.ingest_options())
        .with_context(|| format!("ingesting {}", manifest.display()))?;
    if let Some(features) = &cfg.db.features {
        db = attach_features(db, &load_tensor(features)?)?;
    }
    save_db(&db, out)?;
    println!("{} places, {} images -> {}", db.len(), db.num_images(), out.display());
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let train_cfg = cfg.train.to_train_config(cfg.seed)?;
    let db = match &cfg.train.db {
        Some(dir) => open_db(cfg, dir)?,
        None => synth_db(cfg)?,
    };
    let (head, log) = train_head(&db, &train_cfg)?;
    let echo = toml::to_string(cfg)?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &head, &echo)?;
    fs::write(out.join(TRAIN_LOG_FILE), log.to_csv())?;
    let last = log.epoch_mean_loss.last().copied().unwrap_or(f64::NAN);
    println!(
        "{}: {} steps, final epoch loss {last:.4}, {:.1}s",
        head.label(),
        log.steps.len(),
        log.wall_clock_secs
    );
    Ok(())
}

/// On-disk PCA model; JSON keeps every `f64` exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaFile {
    pub mean: Vec<f64>,
    pub projection: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub epsilon: f64,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl From<PCAModel> for PcaFile {
    fn from(m: PCAModel) -> Self {
        Self {
            mean: m.mean,
            projection: m.projection,
            eigenvalues: m.eigenvalues,
            epsilon: m.epsilon,
            in_dim: m.in_dim,
            out_dim: m.out_dim,
        }
    }
}

impl PcaFile {
    pub fn into_model(self) -> Result<PCAModel> {
        if self.mean.len() != self.in_dim
            || self.projection.len() != self.in_dim * self.out_dim
            || self.eigenvalues.len() != self.out_dim
        {
            bail!("PCA file has inconsistent dimensions");
        }
        Ok(PCAModel {
            mean: self.mean,
            projection: self.projection,
            eigenvalues: self.eigenvalues,
            epsilon: self.epsilon,
            in_dim: self.in_dim,
            out_dim: self.out_dim,
        })
    }

    pub fn load(path: &Path) -> Result<PCAModel> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str::<PcaFile>(&text)?.into_model()
    }
}

fn apply_pca(model: &PCAModel, set: &DescriptorSet) -> Result<DescriptorSet> {
    let rows = set
        .embeddings
        .rows()
        .map(|r| Ok(pca_transform(model, r)?.into_inner()))
        .collect::<Result<Vec<_>>>()?;
    Ok(DescriptorSet::new(&rows, set.meta.clone())?)
}

fn head_columns(head: &Aggregator) -> (Option<usize>, Option<String>) {
    match head {
        Aggregator::ConvAp(p) => (Some(p.out_channels), Some(format!("{}x{}", p.s1, p.s2))),
        _ => (None, None),
    }
}

pub fn eval(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let e = &cfg.eval;
    let (mut refs, mut queries, default_label, d, s) = match (&e.checkpoint, &e.queries, &e.refs) {
        (Some(ckpt), None, None) => {
            let (head, _) = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let dir = e.db.as_ref().context("eval with a checkpoint needs eval.db")?;
            let (ref_db, query_db) = open_db(cfg, dir)?.split_images(e.ref_images);
            let refs = describe_db(&head, &ref_db)?;
            let queries = describe_db(&head, &query_db)?;
            save_descriptor_set(&out.join(REFS_FILE), &refs)?;
            save_descriptor_set(&out.join(QUERIES_FILE), &queries)?;
            let (d, s) = head_columns(&head);
            (refs, queries, head.label(), d, s)
        }
        (None, Some(q), Some(r)) => {
            let refs = load_descriptor_set(r).with_context(|| format!("loading {}", r.display()))?;
            let queries = load_descriptor_set(q).with_context(|| format!("loading {}", q.display()))?;
            (refs, queries, "descriptors".to_owned(), None, None)
        }
        _ => bail!("eval needs either eval.checkpoint with eval.db, or both eval.queries and eval.refs"),
    };
    if let Some(pca) = &e.pca {
        let model = PcaFile::load(pca)?;
        refs = apply_pca(&model, &refs)?;
        queries = apply_pca(&model, &queries)?;
    }
    let report = recall_at_k(&queries, &refs, &e.matcher()?, &e.ks)?;
    let result = RunResult {
        label: e.label.clone().unwrap_or(default_label),
        set: e.set.clone(),
        d,
        s,
        report,
    };
    let text = format!("{} on {}\n{}", result.label, result.set, result.report.to_table());
    fs::write(out.join(REPORT_TEXT_FILE), &text)?;
    fs::write(out.join(REPORT_KV_FILE), result.to_kv())?;
    print!("{text}");
    Ok(())
}

pub fn reduce(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let r = &cfg.reduce;
    let fit_path = r.fit.as_ref().context("reduce needs reduce.fit")?;
    let fit = load_descriptor_set(fit_path).with_context(|| format!("loading {}", fit_path.display()))?;
    let model = pca_whiten_fit(&fit.embeddings, r.out_dim, r.epsilon)?;
    for path in &r.apply {
        let set = load_descriptor_set(path).with_context(|| format!("loading {}", path.display()))?;
        let name = path.file_name().context("apply path has no file name")?;
        save_descriptor_set(&out.join(name), &apply_pca(&model, &set)?)?;
    }
    let file = PcaFile::from(model);
    fs::write(out.join(PCA_FILE), serde_json::to_string(&file)?)?;
    println!("PCA {} -> {} fitted on {} descriptors", file.in_dim, file.out_dim, fit.len());
    Ok(())
}

fn report_kv_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(REPORT_KV_FILE)
    } else {
        p.to_path_buf()
    }
}

pub fn report(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let runs = cfg
        .report
        .runs
        .iter()
        .map(|p| {
            let path = report_kv_path(p);
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            RunResult::from_kv(&text).with_context(|| format!("parsing {}", path.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let table = report_table(&runs)?;
    let text = table.to_text();
    fs::write(out.join(REPORT_TEXT_FILE), &text)?;
    fs::write(out.join(REPORT_JSON_FILE), table.to_json()?)?;
    print!("{text}");
    Ok(())
}
