//! Supervised training of the aggregation head on P×K batches.
//!
//! Each step: sample a batch, aggregate every feature map into a
//! descriptor, build the similarity matrix, mine pairs, evaluate the
//! loss, backpropagate into the head parameters and take one SGD step.
//! The feature maps themselves are frozen (they stand in for a fixed
//! backbone), so only Conv-AP's `W`/bias or GeM's `p` are trained.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aggregators::{Aggregator, ConvAPParams, FeatureMap, GemParams};
use crate::embedding::{similarity_matrix, EmbeddingBatch};
use crate::evaluator::format::{read_tensor, write_tensor, DescriptorMeta, DescriptorSet, Tensor};
use crate::losses::{LossConfig, LossKind};
use crate::mining::Miner;
use crate::places::{BatchSpec, ImageRecord, PkSampler, PlacesDB};
use crate::{Error, Result};

/// Heavy-ball SGD with L2 weight decay folded into the gradient:
/// `g' = g + wd * w`, `v <- momentum * v + g'`, `w <- w - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Per-tensor switch for weight decay; empty means "decay everything".
    pub decay_mask: Vec<bool>,
    pub velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidParam(format!("learning rate {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidParam(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::InvalidParam(format!("weight decay {weight_decay}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            decay_mask: Vec::new(),
            velocity: Vec::new(),
        })
    }
}

/// One in-place SGD update of every parameter tensor.
pub fn sgd_step(params: &mut [&mut [f64]], grads: &[Vec<f64>], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (t, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Shape(format!(
                "tensor {t}: {} parameters but {} gradient entries",
                p.len(),
                g.len()
            )));
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of tensor {t} at entry {i}: {}", g[i])));
        }
    }
    if state.velocity.len() != params.len() {
        state.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    for (t, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let wd = if state.decay_mask.get(t).copied().unwrap_or(true) {
            state.weight_decay
        } else {
            0.0
        };
        let v = &mut state.velocity[t];
        for ((w, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = state.momentum * *vi + (gi + wd * *w);
            *w -= state.learning_rate * *vi;
        }
    }
    Ok(())
}

/// Which head to train and how to initialize it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AggregatorSpec {
    ConvAp { d: usize, s1: usize, s2: usize, bias: bool },
    Gem { p: f64 },
    Avg,
}

impl AggregatorSpec {
    /// Conv-AP: uniform `±1/sqrt(c)` weights, zero bias. GeM: the given `p`.
    pub fn init(&self, in_channels: usize, rng: &mut ChaCha8Rng) -> Result<Aggregator> {
        Ok(match *self {
            AggregatorSpec::ConvAp { d, s1, s2, bias } => {
                Aggregator::ConvAp(ConvAPParams::init(in_channels, d, s1, s2, bias, rng)?)
            }
            AggregatorSpec::Gem { p } => Aggregator::Gem(GemParams::new(p)?),
            AggregatorSpec::Avg => Aggregator::Avg,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch: BatchSpec,
    pub aggregator: AggregatorSpec,
    pub loss: LossKind,
    pub loss_cfg: LossConfig,
    pub miner: Miner,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub max_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Apply weight decay to the Conv-AP bias as well as the weights.
    pub decay_bias: bool,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: BatchSpec {
                num_places: 100,
                images_per_place: 4,
                rng_seed: 0,
            },
            aggregator: AggregatorSpec::ConvAp {
                d: 2048,
                s1: 2,
                s2: 2,
                bias: true,
            },
            loss: LossKind::MultiSimilarity,
            loss_cfg: LossConfig::multi_similarity(),
            miner: Miner::MultiSimilarity { epsilon: 0.1 },
            initial_lr: 0.03,
            lr_decay_factor: 0.3,
            lr_decay_every: 5,
            max_epochs: 30,
            momentum: 0.9,
            weight_decay: 0.001,
            decay_bias: true,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.batch.validate()?;
        self.loss_cfg.validate()?;
        if self.lr_decay_every == 0 {
            return Err(Error::InvalidParam("lr_decay_every must be positive".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "lr decay factor {}",
                self.lr_decay_factor
            )));
        }
        if let Miner::MultiSimilarity { epsilon } = self.miner {
            if epsilon.is_nan() || epsilon < 0.0 {
                return Err(Error::InvalidParam(format!("miner epsilon {epsilon}")));
            }
        }
        OptimizerState::new(self.initial_lr, self.momentum, self.weight_decay).map(|_| ())
    }
}

/// Step schedule: `initial_lr * factor^floor(epoch / every)`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let drops = (epoch / cfg.lr_decay_every.max(1)) as i32;
    cfg.initial_lr * cfg.lr_decay_factor.powi(drops)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
    pub triplets: usize,
    pub skipped_anchors: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epoch_lr: Vec<f64>,
    pub epoch_mean_loss: Vec<f64>,
    pub wall_clock_secs: f64,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// CSV with one row per step.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epoch,lr,loss,positive_pairs,negative_pairs,triplets,skipped_anchors\n");
        for st in &self.steps {
            s += &format!(
                "{},{},{},{},{},{},{},{}\n",
                st.step,
                st.epoch,
                st.lr,
                st.loss,
                st.positive_pairs,
                st.negative_pairs,
                st.triplets,
                st.skipped_anchors
            );
        }
        s
    }
}

/// Loss value and parameter gradients of one batch.
pub struct BatchOutcome {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub mined: crate::mining::MinedSet,
}

/// Forward and backward pass over one batch of feature maps.
pub fn batch_gradients(
    agg: &Aggregator,
    maps: &[&FeatureMap],
    labels: &[u64],
    loss: LossKind,
    loss_cfg: &LossConfig,
    miner: &Miner,
) -> Result<BatchOutcome> {
    let descriptors: Vec<Vec<f64>> = maps
        .par_iter()
        .map(|f| agg.forward(f).map(|z| z.into_inner()))
        .collect::<Result<_>>()?;
    let batch = EmbeddingBatch::normalized(&descriptors, labels.to_vec())?;
    let sim = similarity_matrix(&batch)?;
    let mined = miner.mine(&sim, labels);
    let out = loss.compute(&sim, &mined, loss_cfg)?;
    let grad_z = out.grad(&batch);
    let d = batch.dim();
    let per_item: Vec<Vec<Vec<f64>>> = maps
        .par_iter()
        .enumerate()
        .map(|(i, f)| agg.backward(f, &grad_z[i * d..(i + 1) * d]).map(|g| g.0))
        .collect::<Result<_>>()?;
    let mut grads: Vec<Vec<f64>> = agg.param_slices().iter().map(|p| vec![0.0; p.len()]).collect();
    for item in per_item {
        for (acc, g) in grads.iter_mut().zip(item) {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
    }
    Ok(BatchOutcome {
        loss: out.value,
        grads,
        mined,
    })
}

/// Trains a freshly initialized head.
pub fn train(db: &PlacesDB, cfg: &TrainConfig) -> Result<(Aggregator, TrainLog)> {
    let channels = first_payload(db)?.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let init = cfg.aggregator.init(channels, &mut rng)?;
    train_from(db, cfg, init)
}

fn first_payload(db: &PlacesDB) -> Result<&FeatureMap> {
    let (_, rec) = db
        .records()
        .next()
        .ok_or_else(|| Error::InvalidParam("empty database".into()))?;
    rec.payload
        .as_ref()
        .ok_or_else(|| Error::MissingPayload(rec.image_ref.clone()))
}

/// Trains starting from the given head parameters.
pub fn train_from(db: &PlacesDB, cfg: &TrainConfig, mut agg: Aggregator) -> Result<(Aggregator, TrainLog)> {
    cfg.validate()?;
    let started = Instant::now();
    let mut log = TrainLog::default();
    if cfg.max_epochs == 0 {
        return Ok((agg, log));
    }
    let mut sampler = PkSampler::new(db, cfg.batch)?;
    let mut opt = OptimizerState::new(cfg.initial_lr, cfg.momentum, cfg.weight_decay)?;
    opt.decay_mask = agg
        .param_names()
        .iter()
        .map(|&n| n != "bias" || cfg.decay_bias)
        .collect();
    let mut step = 0;
    for epoch in 0..cfg.max_epochs {
        opt.learning_rate = lr_at_epoch(cfg, epoch);
        log.epoch_lr.push(opt.learning_rate);
        sampler.start_epoch();
        let mut epoch_loss = 0.0;
        let batches = sampler.batches_per_epoch();
        for _ in 0..batches {
            let batch = sampler.next_batch(db);
            let maps = batch.payloads(db)?;
            let outcome = batch_gradients(&agg, &maps, &batch.labels, cfg.loss, &cfg.loss_cfg, &cfg.miner)?;
            if !outcome.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: outcome.loss,
                });
            }
            {
                let mut params = agg.param_slices_mut();
                sgd_step(&mut params, &outcome.grads, &mut opt)?;
            }
            agg.project();
            log.steps.push(StepLog {
                step,
                epoch,
                lr: opt.learning_rate,
                loss: outcome.loss,
                positive_pairs: outcome.mined.positive_pairs.len(),
                negative_pairs: outcome.mined.negative_pairs.len(),
                triplets: outcome.mined.triplets.len(),
                skipped_anchors: outcome.mined.stats.skipped_anchors,
            });
            epoch_loss += outcome.loss;
            step += 1;
        }
        log.epoch_mean_loss.push(epoch_loss / batches.max(1) as f64);
    }
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((agg, log))
}

/// Aggregates every image of `db` into a descriptor set (manifest order),
/// with coordinates and place ids as metadata.
pub fn describe_db(agg: &Aggregator, db: &PlacesDB) -> Result<DescriptorSet> {
    let records: Vec<(u64, &ImageRecord)> = db.records().collect();
    let rows: Vec<Vec<f64>> = records
        .par_iter()
        .map(|(_, r)| {
            let map = r
                .payload
                .as_ref()
                .ok_or_else(|| Error::MissingPayload(r.image_ref.clone()))?;
            agg.forward(map).map(|z| z.into_inner())
        })
        .collect::<Result<_>>()?;
    let meta = records
        .iter()
        .map(|(pid, r)| DescriptorMeta {
            id: r.image_ref.clone(),
            lat: Some(r.lat),
            lon: Some(r.lon),
            place_id: Some(*pid),
        })
        .collect();
    DescriptorSet::new(&rows, meta)
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"VPRC";
const CHECKPOINT_VERSION: u16 = 1;

/// Writes a checkpoint: magic `VPRC`, version u16, the config echo
/// (u32 length + UTF-8), the head kind (u16 length + UTF-8), a u32 tensor
/// count, then per tensor a u16-length name followed by a `VPRK` tensor.
/// All integers little-endian.
pub fn save_checkpoint(path: &Path, agg: &Aggregator, config_echo: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(config_echo.len() as u32).to_le_bytes())?;
    w.write_all(config_echo.as_bytes())?;
    write_str16(&mut w, agg.name())?;
    let mut tensors: Vec<(&str, Tensor)> = Vec::new();
    match agg {
        Aggregator::ConvAp(p) => {
            tensors.push(("weight", Tensor::from_f64(vec![p.out_channels, p.in_channels], &p.weight)?));
            if let Some(b) = &p.bias {
                tensors.push(("bias", Tensor::from_f64(vec![p.out_channels], b)?));
            }
            tensors.push(("grid", Tensor::from_f64(vec![2], &[p.s1 as f64, p.s2 as f64])?));
        }
        Aggregator::Gem(p) => tensors.push(("p", Tensor::from_f64(vec![1], &[p.p])?)),
        Aggregator::Avg => {}
    }
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &tensors {
        write_str16(&mut w, name)?;
        write_tensor(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`], returning the head
/// and the config echo.
pub fn load_checkpoint(path: &Path) -> Result<(Aggregator, String)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)?;
    if u16::from_le_bytes(v) != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", u16::from_le_bytes(v))));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut cfg = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut cfg)?;
    let config = String::from_utf8(cfg).map_err(|_| Error::Format("config echo is not UTF-8".into()))?;
    let kind = read_str16(&mut r)?;
    r.read_exact(&mut len)?;
    let count = u32::from_le_bytes(len);
    let mut tensors = std::collections::HashMap::new();
    for _ in 0..count {
        let name = read_str16(&mut r)?;
        tensors.insert(name, read_tensor(&mut r)?);
    }
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name:?}")))
    };
    let agg = match kind.as_str() {
        "conv-ap" => {
            let weight = take("weight")?;
            let grid = take("grid")?.to_f64();
            if weight.rank() != 2 || grid.len() != 2 {
                return Err(Error::Format("malformed Conv-AP tensors".into()));
            }
            let bias = take("bias").ok().map(|b| b.to_f64());
            Aggregator::ConvAp(ConvAPParams::new(
                weight.dims[1],
                weight.dims[0],
                weight.to_f64(),
                bias,
                grid[0] as usize,
                grid[1] as usize,
            )?)
        }
        "gem" => Aggregator::Gem(GemParams::new(take("p")?.to_f64()[0])?),
        "avg" => Aggregator::Avg,
        other => return Err(Error::Format(format!("unknown head kind {other:?}"))),
    };
    Ok((agg, config))
}

fn write_str16<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u16).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str16<R: Read>(r: &mut R) -> Result<String> {
    let mut len = [0u8; 2];
    r.read_exact(&mut len)?;
    let mut buf = vec![0u8; u16::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("name is not UTF-8".into()))
}
