//! Two-branch training: batch construction, SGD with momentum and
//! per-group learning rates, the step schedule, metrics logging and
//! resumable checkpoints.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backbone::Backbone;
use crate::checkpoint::{Checkpoint, Tensor};
use crate::data::{
    derive_seed, oversample_satellite, AugmentConfig, DatasetManifest, ImageStore, SatelliteDraw,
    View,
};
use crate::error::{Error, Result};
use crate::heads::HeadMode;
use crate::losses::SampleTag;
use crate::model::GeoModel;
use crate::nn::Parameterized;
use crate::retrieval::{self, Direction, RetrievalReport};

const PLAN_STREAM: u64 = 0x706c_616e;
const BATCH_STREAM: u64 = 0x6261_7463;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr_backbone: f64,
    pub base_lr_new: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub seed: u64,
    /// Satellite draws per epoch, as a multiple of the satellite images.
    #[serde(default = "default_oversample")]
    pub oversample_factor: usize,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Clip the global gradient norm to this value.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Stop after this many optimizer steps in total.
    #[serde(default)]
    pub max_steps: Option<u64>,
    /// Evaluate every this many epochs when a validation set is given.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_oversample() -> usize {
    3
}

fn default_eval_every() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 120,
            base_lr_backbone: 0.003,
            base_lr_new: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_decay_factor: 0.1,
            lr_decay_epochs: vec![70, 110],
            seed: 0,
            oversample_factor: default_oversample(),
            augment: AugmentConfig::default(),
            grad_clip: None,
            max_steps: None,
            eval_every: default_eval_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "batch_size must be even and >= 2, got {}",
                self.batch_size
            )));
        }
        if self.oversample_factor == 0 {
            return Err(Error::Config("oversample_factor must be >= 1".into()));
        }
        let rates = [
            self.base_lr_backbone,
            self.base_lr_new,
            self.momentum,
            self.weight_decay,
            self.lr_decay_factor,
        ];
        if rates.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(
                "learning rates, momentum, weight decay and decay factor must be finite and >= 0"
                    .into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!(
                    "grad_clip must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// `(backbone, new layers)` learning rates at `epoch` (0-based).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> (f64, f64) {
    let passed = cfg.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
    let f = cfg.lr_decay_factor.powi(passed as i32);
    (cfg.base_lr_backbone * f, cfg.base_lr_new * f)
}

/// SGD with momentum in the PyTorch form: `g += wd * p; v = mu * v + g;
/// p -= lr * v`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Array2<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Update every parameter of `model` with the rate `lr(name)`.
    pub fn step<P: Parameterized + ?Sized>(&mut self, model: &mut P, lr: &dyn Fn(&str) -> f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        model.visit_params("", &mut |name, p| {
            let mut g = p.grad.clone();
            if wd != 0.0 {
                g.scaled_add(wd, &p.value);
            }
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(p.value.raw_dim()));
            if mu != 0.0 {
                *v *= mu;
                *v += &g;
            } else {
                *v = g;
            }
            p.value.scaled_add(-lr(name), v);
        });
    }
}

/// Global L2 norm of all gradients; rescale them to `max_norm` if larger.
pub fn clip_grad_norm<P: Parameterized + ?Sized>(model: &mut P, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    model.visit_params("", &mut |_, p| {
        sq += p.grad.iter().map(|g| g * g).sum::<f64>()
    });
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        model.visit_params("", &mut |_, p| p.grad *= s);
    }
    norm
}

/// One location of a batch: a UAV entry and an augmented satellite draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchPair {
    pub location: usize,
    pub uav_entry: usize,
    pub satellite: SatelliteDraw,
}

/// Batches of one epoch as groups of `batch_size / 2` satellite draws with
/// distinct locations. Each oversampling pass is shuffled and chunked on its
/// own; an incomplete trailing chunk is dropped.
pub fn plan_epoch(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<Vec<SatelliteDraw>>> {
    cfg.validate()?;
    let half = cfg.batch_size / 2;
    let locations = manifest.locations().len();
    if locations < half {
        return Err(Error::Dataset(format!(
            "batch size {} needs {half} training locations, found {locations}",
            cfg.batch_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ PLAN_STREAM, epoch as u64, 0));
    let draws = oversample_satellite(manifest, cfg.oversample_factor, &cfg.augment, &mut rng);
    let per_pass = draws.len() / cfg.oversample_factor;
    let mut batches = Vec::new();
    for pass in draws.chunks(per_pass.max(1)) {
        let mut pending = pass.to_vec();
        pending.shuffle(&mut rng);
        while !pending.is_empty() {
            let mut batch: Vec<SatelliteDraw> = Vec::with_capacity(half);
            pending.retain(|d| {
                let loc = manifest.entries[d.entry].location_id;
                let taken = batch
                    .iter()
                    .any(|b| manifest.entries[b.entry].location_id == loc);
                if batch.len() < half && !taken {
                    batch.push(*d);
                    false
                } else {
                    true
                }
            });
            if batch.len() < half {
                break;
            }
            batches.push(batch);
        }
    }
    Ok(batches)
}

/// Pair each satellite draw with a UAV image of the same location, chosen
/// uniformly at random.
pub fn build_batch<R: rand::Rng + ?Sized>(
    manifest: &DatasetManifest,
    draws: &[SatelliteDraw],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<BatchPair>> {
    if batch_size < 2 || !batch_size.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "batch_size must be even and >= 2, got {batch_size}"
        )));
    }
    if draws.len() != batch_size / 2 {
        return Err(Error::Dataset(format!(
            "batch size {batch_size} needs {} locations, got {}",
            batch_size / 2,
            draws.len()
        )));
    }
    let uav = manifest.by_location(View::Uav);
    let mut seen = Vec::with_capacity(draws.len());
    draws
        .iter()
        .map(|d| {
            let location = manifest.entries[d.entry].location_id;
            if seen.contains(&location) {
                return Err(Error::Dataset(format!(
                    "location {location} appears twice in one batch"
                )));
            }
            seen.push(location);
            let views = uav
                .get(&location)
                .ok_or_else(|| Error::Dataset(format!("location {location} has no UAV images")))?;
            Ok(BatchPair {
                location,
                uav_entry: *views.choose(rng).expect("non-empty"),
                satellite: *d,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub l_ce: f64,
    pub l_triplet: f64,
    pub l_total: f64,
    pub lr_backbone: f64,
    pub lr_new: f64,
}

pub const METRICS_HEADER: &str = "step,epoch,l_ce,l_triplet,l_total,lr_backbone,lr_new";

impl StepLog {
    /// CSV row; floats use the shortest representation that round-trips.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.l_ce,
            self.l_triplet,
            self.l_total,
            self.lr_backbone,
            self.lr_new
        )
    }
}

/// Everything needed to continue a run exactly. Sampling is derived from
/// `(seed, epoch)` and `(seed, step)`, so the counters stand in for a
/// serialized generator.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    /// Batches of the current epoch already consumed.
    pub batch_in_epoch: usize,
    pub step: u64,
    pub optimizer: Sgd,
    pub history: Vec<StepLog>,
    pub best_recall: Option<f64>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            batch_in_epoch: 0,
            step: 0,
            optimizer: Sgd::new(cfg.momentum, cfg.weight_decay),
            history: Vec::new(),
            best_recall: None,
        }
    }
}

/// Query and gallery stores used to pick the best checkpoint.
pub struct Validation<'a> {
    pub queries: &'a ImageStore,
    pub gallery: &'a ImageStore,
}

pub struct Trainer<'a> {
    pub model: GeoModel,
    pub config: TrainConfig,
    pub state: TrainState,
    store: &'a ImageStore,
    labels: BTreeMap<usize, usize>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: GeoModel, config: TrainConfig, store: &'a ImageStore) -> Result<Self> {
        config.validate()?;
        let labels = store.manifest.label_map();
        if labels.len() != model.config.head.num_classes {
            return Err(Error::Config(format!(
                "head.num_classes is {} but the training split has {} locations",
                model.config.head.num_classes,
                labels.len()
            )));
        }
        let state = TrainState::new(&config);
        Ok(Self {
            model,
            config,
            state,
            store,
            labels,
        })
    }

    /// Continue from an archive written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint, config: TrainConfig, store: &'a ImageStore) -> Result<Self> {
        let model = GeoModel::from_checkpoint(ck)?;
        let mut t = Trainer::new(model, config, store)?;
        let s = ck
            .metadata
            .get("extra")
            .and_then(|e| e.get("train_state"))
            .ok_or_else(|| Error::Checkpoint("archive has no training state".into()))?;
        let field = |k: &str| {
            s.get(k)
                .and_then(Value::as_u64)
                .ok_or_else(|| Error::Checkpoint(format!("training state lacks `{k}`")))
        };
        t.state.epoch = field("epoch")? as usize;
        t.state.batch_in_epoch = field("batch_in_epoch")? as usize;
        t.state.step = field("step")?;
        t.state.best_recall = s.get("best_recall").and_then(Value::as_f64);
        for (name, tensor) in &ck.tensors {
            if let Some(param) = name.strip_prefix("optim.momentum.") {
                t.state
                    .optimizer
                    .velocity
                    .insert(param.to_string(), tensor.to_array2()?);
            }
        }
        if let Ok(h) = ck.get("train.history") {
            let h = h.to_array2()?;
            t.state.history = h
                .rows()
                .into_iter()
                .map(|r| StepLog {
                    step: r[0] as u64,
                    epoch: r[1] as usize,
                    l_ce: r[2],
                    l_triplet: r[3],
                    l_total: r[4],
                    lr_backbone: r[5],
                    lr_new: r[6],
                })
                .collect();
        }
        Ok(t)
    }

    pub fn checkpoint(&mut self) -> Checkpoint {
        let extra = json!({
            "train_config": self.config,
            "train_state": {
                "epoch": self.state.epoch,
                "batch_in_epoch": self.state.batch_in_epoch,
                "step": self.state.step,
                "best_recall": self.state.best_recall,
            },
        });
        let mut ck = self.model.to_checkpoint(extra);
        for (name, v) in &self.state.optimizer.velocity {
            ck.insert(format!("optim.momentum.{name}"), Tensor::from_array2(v));
        }
        let rows: Vec<f64> = self
            .state
            .history
            .iter()
            .flat_map(|l| {
                [
                    l.step as f64,
                    l.epoch as f64,
                    l.l_ce,
                    l.l_triplet,
                    l.l_total,
                    l.lr_backbone,
                    l.lr_new,
                ]
            })
            .collect();
        ck.insert(
            "train.history",
            Tensor {
                shape: vec![self.state.history.len(), 7],
                data: rows,
            },
        );
        ck
    }

    /// One optimizer step on `pairs`, with the given `(backbone, new)` rates.
    pub fn train_step(&mut self, pairs: &[BatchPair], lrs: (f64, f64)) -> Result<StepLog> {
        let norm = self.model.config.normalization.clone();
        let mut images = Vec::with_capacity(pairs.len() * 2);
        let mut labels = Vec::with_capacity(pairs.len() * 2);
        let mut tags = Vec::with_capacity(pairs.len() * 2);
        let mut ids = Vec::with_capacity(pairs.len() * 2);
        for p in pairs {
            let label = self.labels[&p.location];
            images.push(self.store.tensor(p.uav_entry, &norm)?);
            images.push(
                self.store
                    .augmented(p.satellite.entry, &p.satellite.params, &norm)?,
            );
            for (entry, view) in [
                (p.uav_entry, View::Uav),
                (p.satellite.entry, View::Satellite),
            ] {
                labels.push(label);
                tags.push(SampleTag {
                    location: p.location,
                    view,
                });
                ids.push(self.store.entry(entry).sample_id());
            }
        }
        let step = self.state.step;
        let fwd = self.model.forward_batch(
            &images,
            HeadMode::Train {
                seed: derive_seed(self.config.seed, BATCH_STREAM, step),
            },
        );
        let fwd = match fwd {
            Ok(f) => f,
            Err(Error::NonFinite { .. }) => {
                return Err(Error::NonFiniteLoss {
                    step,
                    batch_ids: ids,
                })
            }
            Err(e) => return Err(e),
        };
        let (loss, df, dz) = self.model.losses(&fwd, &labels, &tags)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                batch_ids: ids,
            });
        }
        self.model.zero_grad();
        self.model.backward(&fwd, &df, &dz);
        self.model.heads.commit_stats(&fwd.heads);
        if let Some(c) = self.config.grad_clip {
            clip_grad_norm(&mut self.model, c);
        }
        let (lr_b, lr_n) = lrs;
        self.state.optimizer.step(&mut self.model, &|name| {
            if Backbone::is_backbone_param(name) {
                lr_b
            } else {
                lr_n
            }
        });
        self.state.step += 1;
        let log = StepLog {
            step,
            epoch: self.state.epoch,
            l_ce: loss.ce,
            l_triplet: loss.triplet,
            l_total: loss.total,
            lr_backbone: lr_b,
            lr_new: lr_n,
        };
        self.state.history.push(log);
        Ok(log)
    }

    fn sample_pairs(&self, draws: &[SatelliteDraw]) -> Result<Vec<BatchPair>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.config.seed ^ BATCH_STREAM,
            self.state.step,
            1,
        ));
        build_batch(
            &self.store.manifest,
            draws,
            self.config.batch_size,
            &mut rng,
        )
    }

    fn done(&self) -> bool {
        self.state.epoch >= self.config.epochs
            || self.config.max_steps.is_some_and(|m| self.state.step >= m)
    }

    /// Run until `epochs` or `max_steps`, calling `on_step` after every step
    /// and `on_epoch` after every completed epoch.
    pub fn run_with(
        &mut self,
        on_step: &mut dyn FnMut(&StepLog) -> Result<()>,
        on_epoch: &mut dyn FnMut(&mut Self) -> Result<()>,
    ) -> Result<()> {
        while !self.done() {
            let plan = plan_epoch(&self.store.manifest, &self.config, self.state.epoch)?;
            let lrs = lr_at(self.state.epoch, &self.config);
            while self.state.batch_in_epoch < plan.len() {
                if self.config.max_steps.is_some_and(|m| self.state.step >= m) {
                    return Ok(());
                }
                let pairs = self.sample_pairs(&plan[self.state.batch_in_epoch])?;
                let log = self.train_step(&pairs, lrs)?;
                self.state.batch_in_epoch += 1;
                on_step(&log)?;
            }
            self.state.epoch += 1;
            self.state.batch_in_epoch = 0;
            on_epoch(self)?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_with(&mut |_| Ok(()), &mut |_| Ok(()))
    }

    /// Run while writing `metrics.csv`, `last.ckpt` every epoch and
    /// `best.ckpt` by UAV-to-satellite Recall@1 when validation is given.
    /// An existing metrics file is appended to when resuming.
    pub fn run_to_dir(
        &mut self,
        out: &Path,
        validation: Option<Validation<'_>>,
    ) -> Result<TrainOutputs> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let metrics_path = out.join("metrics.csv");
        let mut metrics = open_metrics(&metrics_path, self.state.step > 0)?;
        let eval_every = self.config.eval_every;
        let mut last_report = None;
        let result = self.run_with(
            &mut |log| {
                writeln!(metrics, "{}", log.csv_row()).map_err(|e| Error::io(&metrics_path, e))
            },
            &mut |t| {
                let epoch = t.state.epoch;
                if let Some(v) = &validation {
                    if eval_every > 0 && (epoch % eval_every == 0 || epoch == t.config.epochs) {
                        let report = retrieval::evaluate(
                            &t.model,
                            v.queries,
                            v.gallery,
                            Direction::UavToSat,
                        )?;
                        let r1 = report.recall(1);
                        log::info!(
                            "epoch {epoch}: uav_to_sat Recall@1 {r1:.4}, AP {:.4}",
                            report.mean_ap
                        );
                        if t.state.best_recall.is_none_or(|b| r1 > b) {
                            t.state.best_recall = Some(r1);
                            t.checkpoint().save(&out.join("best.ckpt"))?;
                        }
                        last_report = Some(report);
                    }
                }
                t.checkpoint().save(&out.join("last.ckpt"))
            },
        );
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        result?;
        let last = out.join("last.ckpt");
        self.checkpoint().save(&last)?;
        Ok(TrainOutputs {
            metrics: metrics_path,
            last_checkpoint: last,
            best_checkpoint: validation
                .is_some()
                .then(|| out.join("best.ckpt"))
                .filter(|p| p.exists()),
            last_report,
        })
    }
}

#[derive(Debug)]
pub struct TrainOutputs {
    pub metrics: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub last_report: Option<RetrievalReport>,
}

fn open_metrics(path: &Path, append: bool) -> Result<std::io::BufWriter<File>> {
    let file = if append && path.exists() {
        OpenOptions::new().append(true).open(path)
    } else {
        File::create(path)
    }
    .map_err(|e| Error::io(path, e))?;
    let fresh = file.metadata().map(|m| m.len() == 0).unwrap_or(true);
    let mut w = std::io::BufWriter::new(file);
    if fresh {
        writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}
