//! End-to-end pipelines behind the command line: loading data for a run
//! config, training with on-disk artifacts, evaluation of a checkpoint and
//! the strategy / part-count sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::asa::Strategy;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{
    generate_synthetic, load_university1652, DatasetManifest, ImageStore, Split, View,
};
use crate::error::{Error, Result};
use crate::model::{check_compatible, GeoModel, ModelConfig};
use crate::retrieval::{self, summary_table, Direction, RetrievalReport};
use crate::training::{Trainer, Validation};

/// Query and gallery stores of one retrieval direction.
pub struct EvalPair {
    pub queries: ImageStore,
    pub gallery: ImageStore,
}

pub struct RunData {
    pub train: ImageStore,
    pub uav_to_sat: EvalPair,
    pub sat_to_uav: EvalPair,
}

impl RunData {
    pub fn pair(&self, d: Direction) -> &EvalPair {
        match d {
            Direction::UavToSat => &self.uav_to_sat,
            Direction::SatToUav => &self.sat_to_uav,
        }
    }
}

fn manifests(cfg: &RunConfig) -> Result<(DatasetManifest, [DatasetManifest; 4])> {
    let load_tests = !cfg.data.eval_on_train;
    let (train, tests) = match &cfg.data.root {
        Some(root) => {
            let train = load_university1652(root, Split::Train)?;
            let tests = if load_tests {
                Some(
                    [
                        Split::QueryUav,
                        Split::GallerySat,
                        Split::QuerySat,
                        Split::GalleryUav,
                    ]
                    .map(|s| load_university1652(root, s)),
                )
            } else {
                None
            };
            (train, tests)
        }
        None => {
            let ds = generate_synthetic(&cfg.data.synthetic)?;
            let tests = if load_tests {
                if ds.test.is_empty() {
                    log::warn!("synthetic data has no test locations; evaluating on the training locations");
                    None
                } else {
                    Some(
                        [
                            Split::QueryUav,
                            Split::GallerySat,
                            Split::QuerySat,
                            Split::GalleryUav,
                        ]
                        .map(|s| {
                            ds.manifest(s).cloned().ok_or_else(|| {
                                Error::Dataset(format!("synthetic data lacks split {s:?}"))
                            })
                        }),
                    )
                }
            } else {
                None
            };
            (ds.train, tests)
        }
    };
    let tests = match tests {
        Some([a, b, c, d]) => [a?, b?, c?, d?],
        None => [
            train.filter_view(View::Uav),
            train.filter_view(View::Satellite),
            train.filter_view(View::Satellite),
            train.filter_view(View::Uav),
        ],
    };
    Ok((train, tests))
}

/// Build the image stores of a run at the backbone input size.
pub fn load_data(cfg: &RunConfig) -> Result<RunData> {
    let (train, [qu, gs, qs, gu]) = manifests(cfg)?;
    let size = (
        cfg.model.backbone.image_height,
        cfg.model.backbone.image_width,
    );
    let preload = cfg.data.preload;
    let store = |m: DatasetManifest| ImageStore::new(m, "", size, preload);
    Ok(RunData {
        train: store(train)?,
        uav_to_sat: EvalPair {
            queries: store(qu)?,
            gallery: store(gs)?,
        },
        sat_to_uav: EvalPair {
            queries: store(qs)?,
            gallery: store(gu)?,
        },
    })
}

/// Model config with the class count and normalization fitted to the
/// training split.
pub fn fit_model_config(cfg: &RunConfig, data: &RunData) -> Result<ModelConfig> {
    let mut model = cfg.model.clone();
    let classes = data.train.manifest.locations().len();
    if model.head.num_classes != classes {
        log::info!("setting head.num_classes to the {classes} training locations");
        model.head.num_classes = classes;
    }
    if cfg.data.normalization_samples > 0 {
        model.normalization = data.train.normalization(cfg.data.normalization_samples)?;
    }
    Ok(model)
}

/// Refuse a non-empty output directory unless `force`, then create it.
pub fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output {} exists; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn evaluate_directions(
    model: &GeoModel,
    data: &RunData,
    directions: &[Direction],
) -> Result<Vec<RetrievalReport>> {
    directions
        .iter()
        .map(|&d| {
            let p = data.pair(d);
            retrieval::evaluate(model, &p.queries, &p.gallery, d)
        })
        .collect()
}

/// Write `report_<direction>.json`, `rankings_<direction>.csv` and
/// `summary.txt`.
pub fn write_reports(dir: &Path, name: &str, reports: &[RetrievalReport]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for r in reports {
        let json = dir.join(format!("report_{}.json", r.direction));
        write_text(&json, &serde_json::to_string_pretty(r)?)?;
        let csv = dir.join(format!("rankings_{}.csv", r.direction));
        write_text(&csv, &r.per_query_csv())?;
        written.extend([json, csv]);
    }
    let summary = dir.join("summary.txt");
    write_text(
        &summary,
        &summary_table(&[(name.to_string(), reports.iter().collect())]),
    )?;
    written.push(summary);
    Ok(written)
}

#[derive(Debug)]
pub struct TrainRun {
    pub model: GeoModel,
    pub reports: Vec<RetrievalReport>,
    pub metrics: PathBuf,
    pub last_checkpoint: PathBuf,
}

/// Train under `cfg` into `out` (metrics, checkpoints, resolved config,
/// final reports for both directions).
pub fn train_run(cfg: &RunConfig, out: &Path, force: bool) -> Result<TrainRun> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    prepare_output(out, force)?;
    let mut resolved = cfg.clone();
    resolved.model = fit_model_config(cfg, &data)?;
    write_text(&out.join("config.json"), &resolved.to_json())?;
    let model = GeoModel::new(resolved.model.clone(), resolved.train.seed)?;
    let mut trainer = Trainer::new(model, resolved.train.clone(), &data.train)?;
    let validation = Validation {
        queries: &data.uav_to_sat.queries,
        gallery: &data.uav_to_sat.gallery,
    };
    let outputs = trainer.run_to_dir(out, Some(validation))?;
    let reports = evaluate_directions(&trainer.model, &data, &Direction::BOTH)?;
    write_reports(out, "ASA", &reports)?;
    Ok(TrainRun {
        model: trainer.model,
        reports,
        metrics: outputs.metrics,
        last_checkpoint: outputs.last_checkpoint,
    })
}

/// Continue a run from its `last.ckpt`, appending to its metrics.
pub fn resume_run(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Result<TrainRun> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let ck = Checkpoint::load(checkpoint)?;
    let mut trainer = Trainer::resume(&ck, cfg.train.clone(), &data.train)?;
    let validation = Validation {
        queries: &data.uav_to_sat.queries,
        gallery: &data.uav_to_sat.gallery,
    };
    let outputs = trainer.run_to_dir(out, Some(validation))?;
    let reports = evaluate_directions(&trainer.model, &data, &Direction::BOTH)?;
    write_reports(out, "ASA", &reports)?;
    Ok(TrainRun {
        model: trainer.model,
        reports,
        metrics: outputs.metrics,
        last_checkpoint: outputs.last_checkpoint,
    })
}

/// Load a checkpoint and check it against the run config. The class count
/// and normalization come from the checkpoint.
pub fn load_checkpoint_for(cfg: &RunConfig, path: &Path) -> Result<GeoModel> {
    let ck = Checkpoint::load(path)?;
    let model = GeoModel::from_checkpoint(&ck)?;
    let mut expected = cfg.model.clone();
    expected.head.num_classes = model.config.head.num_classes;
    check_compatible(&model.config, &expected)?;
    Ok(model)
}

pub fn eval_run(
    cfg: &RunConfig,
    checkpoint: &Path,
    directions: &[Direction],
) -> Result<Vec<RetrievalReport>> {
    let model = load_checkpoint_for(cfg, checkpoint)?;
    let data = load_data(cfg)?;
    evaluate_directions(&model, &data, directions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Strategies,
    Parts,
    All,
}

impl std::str::FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strategies" => Ok(Sweep::Strategies),
            "parts" => Ok(Sweep::Parts),
            "all" => Ok(Sweep::All),
            other => Err(Error::Config(format!(
                "unknown sweep `{other}` (strategies, parts, all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub sweep: String,
    pub strategy: Strategy,
    pub num_parts: usize,
    pub uav_to_sat_r1: f64,
    pub uav_to_sat_ap: f64,
    pub sat_to_uav_r1: f64,
    pub sat_to_uav_ap: f64,
}

pub const ABLATION_HEADER: &str =
    "sweep,strategy,num_parts,uav_to_sat_recall1,uav_to_sat_ap,sat_to_uav_recall1,sat_to_uav_ap";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.sweep,
            self.strategy,
            self.num_parts,
            self.uav_to_sat_r1,
            self.uav_to_sat_ap,
            self.sat_to_uav_r1,
            self.sat_to_uav_ap
        )
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// The variants of a sweep as `(sweep name, strategy, K)`.
pub fn sweep_variants(sweep: Sweep, base: &RunConfig) -> Vec<(&'static str, Strategy, usize)> {
    let k = base.model.partition.num_parts;
    let mut v = Vec::new();
    if matches!(sweep, Sweep::Strategies | Sweep::All) {
        for s in [
            Strategy::HardUniform,
            Strategy::HardKmeans,
            Strategy::SoftKmeans,
        ] {
            v.push(("strategy", s, k));
        }
    }
    if matches!(sweep, Sweep::Parts | Sweep::All) {
        for k in 1..=4 {
            v.push(("parts", base.model.partition.strategy, k));
        }
    }
    v
}

/// Train and evaluate every variant on the same data and seed. Each run
/// writes its artifacts under `out/<sweep>_<strategy>_k<K>/`; the combined
/// table goes to `out/<sweep>.csv` per sweep kind.
pub fn ablation_run(
    base: &RunConfig,
    sweep: Sweep,
    out: &Path,
    force: bool,
) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let data = load_data(base)?;
    prepare_output(out, force)?;
    let fitted = fit_model_config(base, &data)?;
    let mut rows = Vec::new();
    for (name, strategy, k) in sweep_variants(sweep, base) {
        let mut cfg = base.clone();
        cfg.model = fitted.clone();
        cfg.model.partition.strategy = strategy;
        cfg.model.partition.num_parts = k;
        cfg.validate()?;
        let dir = out.join(format!("{name}_{strategy}_k{k}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_text(&dir.join("config.json"), &cfg.to_json())?;
        log::info!("ablation {name}: strategy {strategy}, K={k}");
        let model = GeoModel::new(cfg.model.clone(), cfg.train.seed)?;
        let mut trainer = Trainer::new(model, cfg.train.clone(), &data.train)?;
        trainer.run_to_dir(&dir, None)?;
        let reports = evaluate_directions(&trainer.model, &data, &Direction::BOTH)?;
        write_reports(&dir, &format!("{strategy} K={k}"), &reports)?;
        rows.push(AblationRow {
            sweep: name.to_string(),
            strategy,
            num_parts: k,
            uav_to_sat_r1: reports[0].recall(1),
            uav_to_sat_ap: reports[0].mean_ap,
            sat_to_uav_r1: reports[1].recall(1),
            sat_to_uav_ap: reports[1].mean_ap,
        });
    }
    for name in ["strategy", "parts"] {
        let subset: Vec<AblationRow> = rows.iter().filter(|r| r.sweep == name).cloned().collect();
        if !subset.is_empty() {
            write_text(
                &out.join(format!("ablation_{name}.csv")),
                &ablation_csv(&subset),
            )?;
        }
    }
    Ok(rows)
}
