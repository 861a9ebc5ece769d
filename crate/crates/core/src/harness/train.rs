//! Classification training runs with CSV metrics.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{synthetic_classification, ClassificationData, SyntheticSpec};
use super::idx::load_idx_dataset;
use super::metrics::MetricsSink;
use crate::distributed::{DistributedConfig, DistributedSeng, SyncMode};
use crate::error::{Result, SengError};
use crate::net::{LayerSpec, Network};
use crate::optimizer::{full_batch_stats, Dataset, MetricsRecord, Optimizer, Seng, SgdMomentum, TargetData, TrainConfig};
use crate::sketch::stream_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Seng,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    /// The last `test_fraction` of the samples is held out.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        test_fraction: f64,
    },
}

impl DatasetSource {
    pub fn load(&self) -> Result<ClassificationData> {
        match self {
            DatasetSource::Synthetic(spec) => synthetic_classification(spec),
            DatasetSource::Idx {
                images,
                labels,
                test_fraction,
            } => {
                if !(0.0..1.0).contains(test_fraction) {
                    return Err(SengError::Parameter("test fraction must lie in [0, 1)".into()));
                }
                let (all, classes) = load_idx_dataset(images, labels)?;
                let n_test = (all.len() as f64 * test_fraction).floor() as usize;
                let split = all.len() - n_test;
                let idx: Vec<usize> = (0..all.len()).collect();
                Ok(ClassificationData {
                    train: all.subset(&idx[..split]),
                    test: all.subset(&idx[split..]),
                    classes,
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub optimizer: OptimizerKind,
    pub data: DatasetSource,
    pub hidden: Vec<usize>,
    pub workers: usize,
    pub sync: SyncMode,
    /// Stop after this many updates even if epochs remain.
    pub max_steps: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            optimizer: OptimizerKind::Seng,
            data: DatasetSource::Synthetic(SyntheticSpec::default()),
            hidden: vec![32],
            workers: 1,
            sync: SyncMode::Fresh,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub final_test_acc: Option<f64>,
    pub steps: u64,
    /// Step rows and epoch rows in emission order.
    pub records: Vec<MetricsRecord>,
}

/// Dense/ReLU stack with He-initialized weights.
pub fn build_mlp(input: usize, hidden: &[usize], outputs: usize, seed: u64) -> Result<Network> {
    let mut layers = Vec::new();
    let mut width = input;
    for &h in hidden {
        layers.push(LayerSpec::Dense {
            inputs: width,
            outputs: h,
        });
        layers.push(LayerSpec::Relu);
        width = h;
    }
    layers.push(LayerSpec::Dense {
        inputs: width,
        outputs,
    });
    Ok(Network::new(input, layers)?.he_init(seed))
}

/// Fraction of samples whose arg-max output matches the label.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    let TargetData::Classes(labels) = &data.targets else {
        return Err(SengError::Parameter("accuracy needs class labels".into()));
    };
    if data.is_empty() {
        return Err(SengError::Parameter("empty dataset".into()));
    }
    let out = net.predict(&data.inputs)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = out.row(i);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap_or(0);
            best == y
        })
        .count();
    Ok(hits as f64 / data.len() as f64)
}

fn make_optimizer(cfg: &RunConfig) -> Result<Box<dyn Optimizer>> {
    Ok(match cfg.optimizer {
        OptimizerKind::Sgd => Box::new(SgdMomentum::new(cfg.train.clone())?),
        OptimizerKind::Seng if cfg.workers <= 1 => Box::new(Seng::new(cfg.train.clone())?),
        OptimizerKind::Seng => Box::new(DistributedSeng::new(
            cfg.train.clone(),
            DistributedConfig {
                workers: cfg.workers,
                mode: cfg.sync,
            },
        )?),
    })
}

/// Trains an MLP and, when `out` is given, writes `metrics.csv` and
/// `model.json` there.
pub fn run_training(cfg: &RunConfig, out: Option<&Path>) -> Result<RunSummary> {
    cfg.train.validate()?;
    if cfg.workers == 0 {
        return Err(SengError::Parameter("worker count must be at least 1".into()));
    }
    if cfg.workers > cfg.train.batch_size {
        return Err(SengError::Parameter(format!(
            "{} workers exceed batch size {}",
            cfg.workers, cfg.train.batch_size
        )));
    }
    let data = cfg.data.load()?;
    let n = data.train.len();
    if n < cfg.train.batch_size {
        return Err(SengError::Parameter(format!(
            "batch size {} exceeds {n} training samples",
            cfg.train.batch_size
        )));
    }
    let mut net = build_mlp(data.input_dim(), &cfg.hidden, data.classes.max(2), cfg.train.seed)?;
    let mut opt = make_optimizer(cfg)?;

    let mut sink = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(MetricsSink::new(BufWriter::new(File::create(dir.join("metrics.csv"))?))?)
        }
        None => None,
    };
    let mut records = Vec::new();
    let mut emit = |r: MetricsRecord, sink: &mut Option<MetricsSink<BufWriter<File>>>| -> Result<()> {
        if let Some(s) = sink.as_mut() {
            s.record(&r)?;
        }
        records.push(r);
        Ok(())
    };

    let per_epoch = n / cfg.train.batch_size;
    let epochs = cfg.train.max_epoch.ceil() as u64;
    let limit = cfg.max_steps.unwrap_or(u64::MAX);
    let mut order: Vec<usize> = (0..n).collect();
    let mut last = (f64::NAN, f64::NAN, None);
    'outer: for e in 0..epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.train.seed, e, 0, 3));
        order.shuffle(&mut rng);
        let mut finished = false;
        for k in 0..per_epoch {
            if opt.steps_taken() >= limit {
                break;
            }
            let epoch = e as f64 + k as f64 / per_epoch as f64;
            if epoch >= cfg.train.max_epoch {
                break;
            }
            let batch = data
                .train
                .subset(&order[k * cfg.train.batch_size..(k + 1) * cfg.train.batch_size]);
            let rec = opt.step(&mut net, &batch, epoch)?;
            emit(rec, &mut sink)?;
            finished = k + 1 == per_epoch;
        }
        let (loss, grad_norm) = full_batch_stats(&net, &data.train, cfg.train.loss)?;
        let test_acc = if data.test.is_empty() {
            None
        } else {
            Some(accuracy(&net, &data.test)?)
        };
        last = (loss, grad_norm, test_acc);
        let mut row = MetricsRecord {
            step: opt.steps_taken(),
            epoch: if finished { (e + 1) as f64 } else { e as f64 },
            train_loss: loss,
            grad_norm,
            test_acc,
            eta_est: None,
            eps_est: None,
            payload_bytes: 0,
            num_syncs: 0,
            wall_ms: 0.0,
            step_norm: 0.0,
            step_bound: 0.0,
        };
        row.wall_ms = started.elapsed().as_secs_f64() * 1e3;
        emit(row, &mut sink)?;
        if !finished {
            break 'outer;
        }
    }
    if let Some(mut s) = sink {
        s.flush()?;
    }
    if let Some(dir) = out {
        let json = serde_json::to_string(&net).map_err(|e| SengError::Io(e.to_string()))?;
        fs::write(dir.join("model.json"), json)?;
    }
    Ok(RunSummary {
        final_loss: last.0,
        final_grad_norm: last.1,
        final_test_acc: last.2,
        steps: opt.steps_taken(),
        records,
    })
}
