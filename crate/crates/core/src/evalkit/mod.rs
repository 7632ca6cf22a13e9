//! Test-split scoring and the configuration x anomaly-type report.

mod metrics;
mod report;

pub use metrics::{
    auroc, auroc_pair_count, average_precision, best_dice, pixel_auroc, sweep_threshold, ScoredSet, DICE_SWEEP_POINTS,
};
pub use report::{
    merge_reports, read_report, render_table, write_report, CellMetrics, MetricsReport, ReportRow,
    REPORT_SCHEMA_VERSION,
};

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Axis};

use crate::checkpoint::Checkpoint;
use crate::config::EvalOptions;
use crate::error::{Error, Result};
use crate::pdc::{self, ImageBatch};
use crate::synthdata::{self, AnomalyType, Label, LabeledSample};
use crate::train::Pipeline;

const EVAL_BATCH: usize = 16;

/// Per-sample image score and smoothed residual map.
#[derive(Debug, Clone)]
pub struct Scored {
    pub scores: Vec<f64>,
    pub maps: Vec<Array2<f64>>,
}

/// Runs encode, refine, decode, residual map and image score over `samples`.
pub fn score_samples(pipeline: &Pipeline, samples: &[LabeledSample], opts: &EvalOptions) -> Result<Scored> {
    let mut out = Scored { scores: Vec::with_capacity(samples.len()), maps: Vec::with_capacity(samples.len()) };
    for chunk in samples.chunks(EVAL_BATCH) {
        let x = ImageBatch::from_planes(chunk.iter().map(|s| s.image.view()))?;
        let xhat = pipeline.reconstruct(&x)?;
        let a = pdc::residual_map(&x, &xhat, opts.smoothing_sigma)?;
        out.scores.extend(pdc::image_score(&a, opts.top_q)?);
        out.maps.extend(a.data().axis_iter(Axis(0)).map(|m| m.to_owned()));
    }
    Ok(out)
}

/// Metrics for every anomaly type present in `test`, each scored against all
/// normal test samples.
pub fn evaluate_samples(
    pipeline: &Pipeline,
    test: &[LabeledSample],
    opts: &EvalOptions,
) -> Result<BTreeMap<String, CellMetrics>> {
    let scored = score_samples(pipeline, test, opts)?;
    let normals: Vec<usize> = (0..test.len()).filter(|&i| test[i].label == Label::Normal).collect();
    let mut cells = BTreeMap::new();
    for kind in [AnomalyType::Contrast, AnomalyType::Texture] {
        let anomalous: Vec<usize> = (0..test.len()).filter(|&i| test[i].anomaly_type == kind).collect();
        if anomalous.is_empty() {
            continue;
        }
        let members: Vec<usize> = normals.iter().chain(&anomalous).copied().collect();
        let set = ScoredSet::new(
            members.iter().map(|&i| scored.scores[i]).collect(),
            members.iter().map(|&i| test[i].label == Label::Anomalous).collect(),
        )?;
        let maps: Vec<Array2<f64>> = members.iter().map(|&i| scored.maps[i].clone()).collect();
        let masks: Vec<Array2<bool>> = members.iter().map(|&i| test[i].mask.clone()).collect();
        cells.insert(
            kind.as_str().to_string(),
            CellMetrics {
                image_auroc: auroc(&set)?,
                image_ap: average_precision(&set)?,
                pixel_auroc: pixel_auroc(&maps, &masks)?,
                best_dice: best_dice(&maps, &masks)?,
                n_normal: normals.len(),
                n_anomalous: anomalous.len(),
            },
        );
    }
    Ok(cells)
}

/// Scores the test split of `dataset_dir` with a loaded checkpoint.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, dataset_dir: &Path) -> Result<MetricsReport> {
    let splits = synthdata::load_dataset(dataset_dir)?;
    if splits.test.is_empty() {
        return Err(Error::ManifestMismatch("the test split is empty".into()));
    }
    let size = ckpt.pipeline.model.config().image_size;
    if splits.test[0].image.nrows() != size {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint expects {size}x{size} images, dataset has {0}x{0}",
            splits.test[0].image.nrows()
        )));
    }
    let cells = evaluate_samples(&ckpt.pipeline, &splits.test, &ckpt.run.eval)?;
    Ok(MetricsReport::single(ReportRow::for_checkpoint(ckpt, cells)))
}
