//! End-to-end runs that read data, train or evaluate, and write artifacts.
//!
//! Output directory layout of a training run:
//!
//! | file | content |
//! |------|---------|
//! | `metrics.csv` | one row per epoch |
//! | `results.csv` | final accuracies and costs, `key,value` |
//! | `model.ffcnn` | checkpoint |
//! | `confusion_<mode>.csv` / `.png` | test-set confusion matrices |
//! | `run.log` | wall-clock timings and MAC counts (not reproducible) |
//!
//! Sweeps and comparisons put one such directory per cell under their own
//! output directory and add a summary table (`sweep.csv`, `compare.csv`).

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::bp::{bp_train, evaluate_bp, BpNetwork};
use crate::cam::{cams_from_pass, combined_cam, render_cam, CamMap};
use crate::checkpoint::{bp_checkpoint, ff_checkpoint, restore_ff, Checkpoint};
use crate::config::{ExperimentConfig, InferenceMode, TrainConfig};
use crate::data::{load_mnist, split, Dataset};
use crate::error::{Error, Result};
use crate::ff::{self, FfNetwork};
use crate::inference::{argmax, evaluate, features_from_pass, ClassifierHead, Evaluation};
use crate::labels::LabelCodec;
use crate::metrics::{results_artifact, Algorithm, CsvArtifact, RunMetrics};
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const MODEL_FILE: &str = "model.ffcnn";
pub const RUN_LOG: &str = "run.log";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const COMPARE_FILE: &str = "compare.csv";

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// MNIST from `cfg.data_dir`, split 50k/10k with `cfg.split_seed`, then
/// truncated to the configured limits.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let (source, test) = load_mnist(&cfg.data_dir)?;
    let (train, val) = split(&source, cfg.split_seed)?;
    Ok(Splits {
        train: train.take(cfg.train_limit),
        val: val.take(cfg.val_limit),
        test: test.take(cfg.test_limit),
    })
}

/// Appends lines to `run.log` and mirrors them to the logger.
pub struct RunLog {
    path: PathBuf,
}

impl RunLog {
    pub fn create(out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join(RUN_LOG);
        std::fs::write(&path, "").map_err(|e| Error::io(&path, e))?;
        Ok(RunLog { path })
    }

    pub fn line(&self, msg: &str) -> Result<()> {
        log::info!("{msg}");
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{msg}").map_err(|e| Error::io(&self.path, e))
    }
}

fn codec_for(cfg: &ExperimentConfig, hw: (usize, usize)) -> Result<LabelCodec> {
    LabelCodec::new(cfg.train.label_set()?, cfg.train.label_intensity, hw.0, hw.1)
}

fn write_confusion(out_dir: &Path, cfg: &ExperimentConfig, e: &Evaluation) -> Result<()> {
    let stem = format!("confusion_{}", e.mode.as_str());
    let mut art = CsvArtifact::for_config(cfg).with_meta("mode", e.mode.as_str());
    let csv = e.confusion.to_csv();
    let mut lines = csv.lines();
    art.columns = lines.next().unwrap_or_default().split(',').map(String::from).collect();
    art.rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    art.write(&out_dir.join(format!("{stem}.csv")))?;
    e.confusion.render_png(&out_dir.join(format!("{stem}.png")))
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub out_dir: PathBuf,
    pub metrics: RunMetrics,
    pub val: [Evaluation; 2],
    pub test: [Evaluation; 2],
    pub network: FfNetwork,
    pub head: ClassifierHead,
}

impl TrainReport {
    pub fn test_accuracy(&self, mode: InferenceMode) -> f64 {
        self.test.iter().find(|e| e.mode == mode).map_or(0.0, |e| e.accuracy)
    }
}

fn both_modes(
    network: &FfNetwork,
    head: &ClassifierHead,
    codec: &LabelCodec,
    ds: &Dataset,
) -> Result<[Evaluation; 2]> {
    Ok([
        evaluate(network, head, codec, ds, InferenceMode::Classifier)?,
        evaluate(network, head, codec, ds, InferenceMode::Goodness)?,
    ])
}

/// FF training on preloaded splits; writes every artifact into `cfg.out_dir`.
pub fn train_on(cfg: &ExperimentConfig, splits: &Splits) -> Result<TrainReport> {
    let out = cfg.out_dir.clone();
    let log = RunLog::create(&out)?;
    log.line(&format!(
        "train: config {} seed {} | {} train / {} val / {} test images",
        cfg.hash(),
        cfg.train.seed,
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    ))?;
    let started = Instant::now();
    let mut log_err = None;
    let outcome = ff::train(&cfg.train, &splits.train, Some(&splits.val), |m| {
        let layers: Vec<String> = m.disc_acc.iter().map(|a| format!("{a:.2}")).collect();
        let r = log.line(&format!(
            "epoch {:>3} lr {:.3e} loss {:.5} disc_acc [{}] train {:.2} val {} ({:.1}s)",
            m.epoch,
            m.lr,
            m.network_loss,
            layers.join(" "),
            m.train_acc,
            m.val_acc.map_or("-".into(), |v| format!("{v:.2}")),
            m.wall_seconds
        ));
        if let Err(e) = r {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    let train_secs = started.elapsed().as_secs_f64();
    let metrics = RunMetrics {
        algorithm: Algorithm::Ff,
        layers: outcome.network.layers.len(),
        epochs: outcome.epochs,
    };
    metrics.to_artifact(cfg).write(&out.join(METRICS_FILE))?;
    ff_checkpoint(cfg, &outcome.network, &outcome.head).save(&out.join(MODEL_FILE))?;

    let codec = codec_for(cfg, splits.train.image_hw())?;
    let t = Instant::now();
    let val = both_modes(&outcome.network, &outcome.head, &codec, &splits.val)?;
    let test = both_modes(&outcome.network, &outcome.head, &codec, &splits.test)?;
    for e in &test {
        write_confusion(&out, cfg, e)?;
    }
    let per_image = |e: &Evaluation, n: usize| e.conv_macs / n.max(1) as u64;
    let kv = vec![
        ("train_images", splits.train.len().to_string()),
        ("val_images", splits.val.len().to_string()),
        ("test_images", splits.test.len().to_string()),
        ("conv_params", outcome.network.param_count().to_string()),
        ("val_acc_classifier", format!("{:.4}", val[0].accuracy)),
        ("val_acc_goodness", format!("{:.4}", val[1].accuracy)),
        ("test_acc_classifier", format!("{:.4}", test[0].accuracy)),
        ("test_acc_goodness", format!("{:.4}", test[1].accuracy)),
        ("classifier_macs_per_image", per_image(&test[0], splits.test.len()).to_string()),
        ("goodness_macs_per_image", per_image(&test[1], splits.test.len()).to_string()),
    ];
    results_artifact(cfg, Algorithm::Ff, &kv).write(&out.join(RESULTS_FILE))?;
    log.line(&format!(
        "done: training {:.1}s ({:.3e} conv MACs), evaluation {:.1}s | test classifier {:.2}% goodness {:.2}%",
        train_secs,
        outcome.conv_macs as f64,
        t.elapsed().as_secs_f64(),
        test[0].accuracy,
        test[1].accuracy
    ))?;
    Ok(TrainReport {
        out_dir: out,
        metrics,
        val,
        test,
        network: outcome.network,
        head: outcome.head,
    })
}

pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    train_on(cfg, &load_splits(cfg)?)
}

/// Evaluate a stored FF model on the test split of `data_cfg`.
pub fn run_eval(
    model: &Path,
    data_cfg: &ExperimentConfig,
    mode: InferenceMode,
    out_dir: &Path,
) -> Result<Evaluation> {
    let (cfg, network, head) = restore_ff(&Checkpoint::load(model)?)?;
    let splits = load_splits(data_cfg)?;
    let codec = codec_for(&cfg, network.input_hw)?;
    let e = evaluate(&network, &head, &codec, &splits.test, mode)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_confusion(out_dir, &cfg, &e)?;
    Ok(e)
}

#[derive(Debug, Clone)]
pub struct BpReport {
    pub out_dir: PathBuf,
    pub metrics: RunMetrics,
    pub val: Evaluation,
    pub test: Evaluation,
    pub network: BpNetwork,
}

/// Backprop baseline on preloaded splits, with `cfg.bp_lr` as base rate.
pub fn train_bp_on(cfg: &ExperimentConfig, splits: &Splits) -> Result<BpReport> {
    let out = cfg.out_dir.clone();
    let log = RunLog::create(&out)?;
    log.line(&format!("train bp: config {} seed {}", cfg.hash(), cfg.train.seed))?;
    let mut log_err = None;
    let outcome = bp_train(&cfg.train, cfg.bp_lr, &splits.train, Some(&splits.val), |m| {
        let r = log.line(&format!(
            "epoch {:>3} lr {:.3e} loss {:.5} train {:.2} val {} ({:.1}s)",
            m.epoch,
            m.lr,
            m.network_loss,
            m.train_acc,
            m.val_acc.map_or("-".into(), |v| format!("{v:.2}")),
            m.wall_seconds
        ));
        if let Err(e) = r {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    let metrics = RunMetrics {
        algorithm: Algorithm::Bp,
        layers: outcome.network.layers.len(),
        epochs: outcome.epochs,
    };
    metrics.to_artifact(cfg).write(&out.join(METRICS_FILE))?;
    bp_checkpoint(cfg, &outcome.network).save(&out.join(MODEL_FILE))?;
    let val = evaluate_bp(&outcome.network, &splits.val)?;
    let test = evaluate_bp(&outcome.network, &splits.test)?;
    write_confusion(&out, cfg, &test)?;
    let kv = vec![
        ("train_images", splits.train.len().to_string()),
        ("val_images", splits.val.len().to_string()),
        ("test_images", splits.test.len().to_string()),
        ("conv_params", outcome.network.conv_param_count().to_string()),
        ("val_acc_classifier", format!("{:.4}", val.accuracy)),
        ("test_acc_classifier", format!("{:.4}", test.accuracy)),
    ];
    let mut art = results_artifact(cfg, Algorithm::Bp, &kv);
    art.meta.insert("bp_lr".into(), format!("{:e}", cfg.bp_lr));
    art.write(&out.join(RESULTS_FILE))?;
    log.line(&format!("done: test {:.2}%", test.accuracy))?;
    Ok(BpReport {
        out_dir: out,
        metrics,
        val,
        test,
        network: outcome.network,
    })
}

#[derive(Debug, Clone)]
pub struct CamReport {
    pub image_index: usize,
    pub label: usize,
    pub predicted: usize,
    pub class: usize,
    /// Per-layer maps, then the combined map when more than one layer is asked for.
    pub maps: Vec<CamMap>,
    pub files: Vec<PathBuf>,
}

fn cam_stem(cam: &CamMap) -> String {
    match cam.layers.as_slice() {
        [l] => format!("cam_l{l}"),
        _ => "cam_combined".into(),
    }
}

/// CAMs of test image `image_index`. `class` defaults to the classifier's
/// prediction and `layers` to every layer the classifier reads.
pub fn run_cam(
    model: &Path,
    data_cfg: &ExperimentConfig,
    image_index: usize,
    class: Option<usize>,
    layers: Option<&[usize]>,
    out_dir: &Path,
) -> Result<CamReport> {
    let (cfg, network, head) = restore_ff(&Checkpoint::load(model)?)?;
    let (_, test) = load_mnist(&data_cfg.data_dir)?;
    if image_index >= test.len() {
        return Err(Error::InvalidArgument(format!(
            "image index {image_index} outside the {} test images",
            test.len()
        )));
    }
    let (h, w) = test.image_hw();
    let image = test.image(image_index).to_vec();
    let pass = network.forward(&Tensor::from_vec(&[1, 1, h, w], image.clone())?)?;
    let logits = head.logits(&features_from_pass(&pass))?;
    let predicted = argmax(logits.sample(0));
    let class = class.unwrap_or(predicted);
    let all: Vec<usize> = (2..=network.layers.len()).collect();
    let layers = layers.unwrap_or(&all);
    let mut maps = cams_from_pass(&network, &head, &pass, 0, class, layers)?;
    if maps.len() > 1 {
        maps.push(combined_cam(&maps)?);
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    for cam in &maps {
        let stem = cam_stem(cam);
        let (_, cw) = cam.hw();
        let layer_list: Vec<String> = cam.layers.iter().map(|l| l.to_string()).collect();
        let mut art = CsvArtifact::for_config(&cfg)
            .with_meta("image_index", image_index)
            .with_meta("label", test.label(image_index))
            .with_meta("class", class)
            .with_meta("layers", layer_list.join(" "))
            .with_meta("logit", format!("{:e}", logits.sample(0)[class]))
            .with_meta("bias", format!("{:e}", head.bias.data()[class]));
        art.columns = std::iter::once("y".to_string())
            .chain((0..cw).map(|x| format!("x{x}")))
            .collect();
        art.rows = cam
            .grid()
            .into_iter()
            .enumerate()
            .map(|(y, row)| std::iter::once(y.to_string()).chain(row).collect())
            .collect();
        let csv = out_dir.join(format!("{stem}.csv"));
        let png = out_dir.join(format!("{stem}.png"));
        art.write(&csv)?;
        render_cam(cam, Some((&image, (h, w))), &png)?;
        files.push(csv);
        files.push(png);
    }
    Ok(CamReport {
        image_index,
        label: test.label(image_index),
        predicted,
        class,
        maps,
        files,
    })
}

/// Outcome of one sweep cell.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub index: usize,
    pub train: TrainConfig,
    pub config_hash: String,
    pub val_classifier: f64,
    pub val_goodness: f64,
    pub test_classifier: f64,
    pub test_goodness: f64,
}

pub const SWEEP_COLUMNS: [&str; 15] = [
    "cell",
    "seed",
    "filters",
    "kernel",
    "batch_size",
    "label_intensity",
    "label_set",
    "pooling",
    "include_first_layer_loss",
    "config_hash",
    "conv_params",
    "val_acc_classifier",
    "val_acc_goodness",
    "test_acc_classifier",
    "test_acc_goodness",
];

/// Cell configs: the grid product, cell `i` seeded with `master + i`.
pub fn sweep_cells(cfg: &ExperimentConfig) -> Result<Vec<ExperimentConfig>> {
    if cfg.sweep.is_empty() {
        return Err(Error::Config("sweep requested but no sweep.* grid is set".into()));
    }
    let cells = cfg.sweep.expand(&cfg.train);
    debug_assert_eq!(cells.len(), cfg.sweep.cell_count());
    cells
        .into_iter()
        .enumerate()
        .map(|(i, mut t)| {
            t.seed = cfg.train.seed.wrapping_add(i as u64);
            t.validate()?;
            let mut c = cfg.with_train(t);
            c.out_dir = cfg.out_dir.join(format!("cell{i:03}"));
            Ok(c)
        })
        .collect()
}

/// Train every grid cell (in parallel) and write `sweep.csv`.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepCell>> {
    let cells = sweep_cells(cfg)?;
    let splits = load_splits(cfg)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    log::info!("sweep: {} cells into {}", cells.len(), cfg.out_dir.display());
    let results: Vec<SweepCell> = cells
        .par_iter()
        .enumerate()
        .map(|(index, c)| {
            let r = train_on(c, &splits)?;
            Ok(SweepCell {
                index,
                train: c.train.clone(),
                config_hash: c.hash(),
                val_classifier: r.val[0].accuracy,
                val_goodness: r.val[1].accuracy,
                test_classifier: r.test[0].accuracy,
                test_goodness: r.test[1].accuracy,
            })
        })
        .collect::<Result<_>>()?;

    let mut art = CsvArtifact::for_config(cfg).with_meta("cells", results.len());
    art.columns = SWEEP_COLUMNS.iter().map(|c| c.to_string()).collect();
    art.rows = results
        .iter()
        .map(|r| {
            let t = &r.train;
            let params: usize = FfNetwork::layer_specs(t)
                .map(|s| s.iter().map(|x| x.param_count()).sum())
                .unwrap_or(0);
            vec![
                r.index.to_string(),
                t.seed.to_string(),
                t.filters.iter().map(|f| f.to_string()).collect::<Vec<_>>().join("/"),
                t.kernel.to_string(),
                t.batch_size.to_string(),
                t.label_intensity.to_string(),
                t.label_set.as_str().into(),
                t.pooling.to_string(),
                t.include_first_layer_loss.to_string(),
                r.config_hash.clone(),
                params.to_string(),
                format!("{:.4}", r.val_classifier),
                format!("{:.4}", r.val_goodness),
                format!("{:.4}", r.test_classifier),
                format!("{:.4}", r.test_goodness),
            ]
        })
        .collect();
    art.write(&cfg.out_dir.join(SWEEP_FILE))?;
    Ok(results)
}

#[derive(Debug, Clone)]
pub struct CompareRow {
    pub filters: Vec<usize>,
    pub conv_params: usize,
    pub ff_val_classifier: f64,
    pub ff_val_goodness: f64,
    pub ff_test_classifier: f64,
    pub ff_test_goodness: f64,
    pub bp_val: f64,
    pub bp_test: f64,
}

/// FF and BP trained on the same splits for each filter setting in
/// `sweep.filters` (or the base filters); writes `compare.csv`.
pub fn run_compare(cfg: &ExperimentConfig) -> Result<Vec<CompareRow>> {
    let widths = if cfg.sweep.filters.is_empty() {
        vec![cfg.train.filters.clone()]
    } else {
        cfg.sweep.filters.clone()
    };
    let splits = load_splits(cfg)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let jobs: Vec<(usize, bool)> = (0..widths.len()).flat_map(|i| [(i, false), (i, true)]).collect();
    let done: Vec<(usize, bool, Vec<f64>)> = jobs
        .par_iter()
        .map(|&(i, bp)| {
            let tag = widths[i].iter().map(|f| f.to_string()).collect::<Vec<_>>().join("-");
            let mut c = cfg.with_train(TrainConfig {
                filters: widths[i].clone(),
                ..cfg.train.clone()
            });
            c.out_dir = cfg.out_dir.join(format!("{}_f{tag}", if bp { "bp" } else { "ff" }));
            let accs = if bp {
                let r = train_bp_on(&c, &splits)?;
                vec![r.val.accuracy, r.test.accuracy]
            } else {
                let r = train_on(&c, &splits)?;
                vec![r.val[0].accuracy, r.val[1].accuracy, r.test[0].accuracy, r.test[1].accuracy]
            };
            Ok((i, bp, accs))
        })
        .collect::<Result<_>>()?;

    let rows: Vec<CompareRow> = widths
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let get = |bp: bool| &done.iter().find(|d| d.0 == i && d.1 == bp).expect("every job ran").2;
            let (ff, bp) = (get(false), get(true));
            let t = TrainConfig {
                filters: f.clone(),
                ..cfg.train.clone()
            };
            CompareRow {
                filters: f.clone(),
                conv_params: FfNetwork::layer_specs(&t)
                    .map(|s| s.iter().map(|x| x.param_count()).sum())
                    .unwrap_or(0),
                ff_val_classifier: ff[0],
                ff_val_goodness: ff[1],
                ff_test_classifier: ff[2],
                ff_test_goodness: ff[3],
                bp_val: bp[0],
                bp_test: bp[1],
            }
        })
        .collect();
    let mut art = CsvArtifact::for_config(cfg).with_meta("bp_lr", format!("{:e}", cfg.bp_lr));
    art.columns = [
        "filters",
        "conv_params",
        "ff_val_acc_classifier",
        "ff_val_acc_goodness",
        "ff_test_acc_classifier",
        "ff_test_acc_goodness",
        "bp_val_acc",
        "bp_test_acc",
    ]
    .iter()
    .map(|c| c.to_string())
    .collect();
    art.rows = rows
        .iter()
        .map(|r| {
            vec![
                r.filters.iter().map(|f| f.to_string()).collect::<Vec<_>>().join("/"),
                r.conv_params.to_string(),
                format!("{:.4}", r.ff_val_classifier),
                format!("{:.4}", r.ff_val_goodness),
                format!("{:.4}", r.ff_test_classifier),
                format!("{:.4}", r.ff_test_goodness),
                format!("{:.4}", r.bp_val),
                format!("{:.4}", r.bp_test),
            ]
        })
        .collect();
    art.write(&cfg.out_dir.join(COMPARE_FILE))?;
    Ok(rows)
}
