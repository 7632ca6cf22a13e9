//! Losses, the seeded SGD-with-momentum loop and memory-bank maintenance.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pdc::{self, ImageBatch, ModelConfig, ModelParams};
use crate::popusense::{self, MemoryBank, PopuSenseConfig, RefinerParams, Variant};
use crate::synthdata::{self, Label, LabeledSample};

pub const MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Configuration {
    Pdccore,
    NarrowPopusense,
    WidePopusense,
}

impl Configuration {
    pub fn as_str(self) -> &'static str {
        match self {
            Configuration::Pdccore => "pdccore",
            Configuration::NarrowPopusense => "narrow_popusense",
            Configuration::WidePopusense => "wide_popusense",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pdccore" => Some(Configuration::Pdccore),
            "narrow_popusense" => Some(Configuration::NarrowPopusense),
            "wide_popusense" => Some(Configuration::WidePopusense),
            _ => None,
        }
    }

    /// Name used in reports.
    pub fn display_name(self) -> &'static str {
        match self {
            Configuration::Pdccore => "PDCCore",
            Configuration::NarrowPopusense => "Narrow PopuSense",
            Configuration::WidePopusense => "Wide PopuSense",
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Configuration::Pdccore => None,
            Configuration::NarrowPopusense => Some(Variant::Narrow),
            Configuration::WidePopusense => Some(Variant::Wide),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
    #[default]
    L2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub configuration: Configuration,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossKind,
    pub seed: u64,
    /// Absent for `pdccore`.
    pub popusense: Option<PopuSenseConfig>,
    /// Keep the refiner's zero output projection fixed (identity refinement).
    pub freeze_refiner_output: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 || self.learning_rate.is_infinite() {
            return Err(Error::Config("train.learning_rate must be a finite non-negative number".into()));
        }
        match (self.configuration.variant(), &self.popusense) {
            (None, None) => Ok(()),
            (Some(v), Some(p)) if p.variant == v => p.validate(self.batch_size),
            _ => Err(Error::Config(format!(
                "popusense settings do not match configuration {}",
                self.configuration.as_str()
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainStats {
    /// Validation loss before the first epoch.
    pub initial_val_loss: Option<f64>,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub seconds: Vec<f64>,
}

impl TrainStats {
    /// `epoch,train_loss,val_loss,seconds`, one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,seconds\n");
        for (i, ((t, v), s)) in self.train_loss.iter().zip(&self.val_loss).zip(&self.seconds).enumerate() {
            out.push_str(&format!("{},{t},{v},{s:.3}\n", i + 1));
        }
        out
    }
}

/// Mean absolute or mean squared pixel error over the whole batch.
pub fn reconstruction_loss(x: &ImageBatch, xhat: &ImageBatch, kind: LossKind) -> Result<f64> {
    loss_and_grad(x.data(), xhat.data(), kind).map(|(l, _)| l)
}

fn loss_and_grad(x: &Array4<f64>, xhat: &Array4<f64>, kind: LossKind) -> Result<(f64, Array4<f64>)> {
    if x.dim() != xhat.dim() {
        return Err(Error::ShapeMismatch(format!("input {:?} vs reconstruction {:?}", x.dim(), xhat.dim())));
    }
    let n = x.len() as f64;
    let diff = xhat - x;
    Ok(match kind {
        LossKind::L1 => {
            (diff.iter().map(|d| d.abs()).sum::<f64>() / n, diff.mapv(|d| d.signum() * f64::from(d != 0.0) / n))
        }
        LossKind::L2 => (diff.iter().map(|d| d * d).sum::<f64>() / n, diff.mapv(|d| 2.0 * d / n)),
    })
}

/// Refiner, its configuration and the population bank of one PopuSense arm.
#[derive(Debug, Clone, PartialEq)]
pub struct PopuSense {
    pub config: PopuSenseConfig,
    pub refiner: RefinerParams,
    pub bank: MemoryBank,
}

/// Everything needed to reconstruct images for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub configuration: Configuration,
    pub model: ModelParams,
    pub popusense: Option<PopuSense>,
}

/// Refiner seeds are derived from the training seed so arms sharing a seed
/// share their autoencoder initialization.
fn refiner_seed(seed: u64) -> u64 {
    synthdata::mix_seed(seed ^ 0x0DEF_1AE5_0000_0001)
}

impl Pipeline {
    pub fn new(
        configuration: Configuration,
        model: ModelConfig,
        popusense: Option<PopuSenseConfig>,
        seed: u64,
    ) -> Result<Self> {
        let model = ModelParams::new(model, seed)?;
        let c = model.config().latent_channels;
        let popusense = match (configuration.variant(), popusense) {
            (None, _) => None,
            (Some(v), Some(cfg)) if cfg.variant == v => Some(PopuSense {
                config: cfg,
                refiner: RefinerParams::new(c, cfg.layers, refiner_seed(seed)),
                bank: MemoryBank::new(cfg.bank_capacity, c),
            }),
            (Some(_), _) => {
                return Err(Error::Config(format!(
                    "configuration {} needs matching popusense settings",
                    configuration.as_str()
                )))
            }
        };
        Ok(Self { configuration, model, popusense })
    }

    pub fn from_train_config(cfg: &TrainConfig, model: ModelConfig) -> Result<Self> {
        Self::new(cfg.configuration, model, cfg.popusense, cfg.seed)
    }

    /// Forward pass treating `x` as one batch: the wide hypergraph joins every
    /// sample in `x` with the bank.
    pub fn reconstruct_batch(&self, x: &ImageBatch) -> Result<ImageBatch> {
        let z = pdc::encode(x, &self.model)?;
        let z = match &self.popusense {
            Some(ps) => popusense::refine(&z, &ps.bank, &ps.config, &ps.refiner)?,
            None => z,
        };
        pdc::decode(&z, &self.model)
    }

    /// Evaluation forward pass. Wide refinement scores every sample on its
    /// own against the frozen bank, so results do not depend on which other
    /// samples share the batch. A bank holding fewer than `k` entries (only
    /// before the first training step) cannot give a lone sample `k`
    /// neighbours; the batch then supplies the context, as in training.
    pub fn reconstruct(&self, x: &ImageBatch) -> Result<ImageBatch> {
        match &self.popusense {
            Some(ps) if ps.config.variant == Variant::Wide && ps.bank.len() >= ps.config.k => {
                let mut planes = Vec::with_capacity(x.batch_size());
                for sample in x.data().axis_chunks_iter(Axis(0), 1) {
                    let one = ImageBatch::new(sample.to_owned())?;
                    planes.push(self.reconstruct_batch(&one)?.into_inner());
                }
                let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
                let stacked = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
                ImageBatch::new(stacked)
            }
            _ => self.reconstruct_batch(x),
        }
    }

    /// Loss and full gradients for one batch; also returns the pre-refinement
    /// latents (used for bank maintenance).
    fn loss_grad(&self, x: &ImageBatch, kind: LossKind) -> Result<(f64, Gradients, pdc::LatentMap, bool)> {
        let (z, enc) = pdc::encode_traced(x, &self.model)?;
        let (z_ref, ref_trace) = match &self.popusense {
            Some(ps) => {
                let (zr, t) = popusense::refine_traced(&z, &ps.bank, &ps.config, &ps.refiner)?;
                (zr, Some(t))
            }
            None => (z.clone(), None),
        };
        let dec = pdc::decode_traced(&z_ref, &self.model)?;
        let (loss, dxhat) = loss_and_grad(x.data(), dec.output(), kind)?;
        // Every output pinned at exactly 0 or 1: the sigmoid's gradient is zero
        // everywhere and training cannot recover.
        let saturated = dec.output().iter().all(|&v| v == 0.0 || v == 1.0);
        let mut model_grad = self.model.zeros_like();
        let dz_ref = dec.backward(&self.model, &dxhat, &mut model_grad);
        let mut refiner_grad = None;
        let dz = match (&self.popusense, ref_trace) {
            (Some(ps), Some(t)) => {
                let mut g = ps.refiner.zeros_like();
                let dz = t.backward(&ps.refiner, &dz_ref, &mut g)?;
                refiner_grad = Some(g);
                dz
            }
            _ => dz_ref,
        };
        enc.backward(&self.model, &dz, &mut model_grad);
        Ok((loss, Gradients { model: model_grad, refiner: refiner_grad }, z, saturated))
    }

    /// Loss and gradients of one batch, exposed for gradient checks.
    pub fn loss_and_gradients(&self, x: &ImageBatch, kind: LossKind) -> Result<(f64, Gradients)> {
        self.loss_grad(x, kind).map(|(l, g, _, _)| (l, g))
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub model: ModelParams,
    pub refiner: Option<RefinerParams>,
}

/// Momentum buffers, shaped like the parameters they follow.
#[derive(Debug, Clone)]
pub struct OptState {
    model: ModelParams,
    refiner: Option<RefinerParams>,
}

impl OptState {
    pub fn new(p: &Pipeline) -> Self {
        Self { model: p.model.zeros_like(), refiner: p.popusense.as_ref().map(|ps| ps.refiner.zeros_like()) }
    }
}

fn sgd_momentum(params: Vec<&mut [f64]>, grads: Vec<&mut [f64]>, velocity: Vec<&mut [f64]>, lr: f64) {
    for ((p, g), v) in params.into_iter().zip(grads).zip(velocity) {
        for ((p, g), v) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *v = MOMENTUM * *v + g;
            *p -= lr * *v;
        }
    }
}

fn all_finite(blocks: Vec<&mut [f64]>) -> bool {
    blocks.iter().all(|b| b.iter().all(|v| v.is_finite()))
}

fn batch_of(samples: &[&LabeledSample]) -> Result<ImageBatch> {
    ImageBatch::from_planes(samples.iter().map(|s| s.image.view()))
}

fn check_normal(data: &[LabeledSample]) -> Result<()> {
    match data.iter().position(|s| s.label != Label::Normal) {
        Some(index) => Err(Error::AnomalyLeakage { index }),
        None => Ok(()),
    }
}

/// One shuffled pass of mini-batch SGD with momentum. Returns the mean batch loss.
///
/// Fails with [`Error::NonFiniteLoss`] when the loss, a gradient or an updated
/// parameter is not finite, or when every reconstructed pixel of a batch is
/// saturated at exactly 0 or 1 (a dead network).
pub fn train_epoch(
    pipeline: &mut Pipeline,
    opt: &mut OptState,
    data: &[LabeledSample],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    check_normal(data)?;
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(synthdata::mix_seed(cfg.seed ^ synthdata::mix_seed(epoch as u64)));
    order.shuffle(&mut rng);
    let mut total = 0.0;
    let mut batches = 0;
    for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let samples: Vec<&LabeledSample> = chunk.iter().map(|&i| &data[i]).collect();
        let x = batch_of(&samples)?;
        let (loss, mut grads, z, saturated) = pipeline.loss_grad(&x, cfg.loss)?;
        let diverged = Error::NonFiniteLoss { epoch, step };
        if !loss.is_finite() || saturated {
            return Err(diverged);
        }
        if cfg.freeze_refiner_output {
            if let Some(g) = grads.refiner.as_mut() {
                let out = g.layers_mut().last_mut().expect("non-empty stack");
                out.theta.fill(0.0);
                out.bias.fill(0.0);
            }
        }
        if !all_finite(grads.model.blocks_mut()) || !grads.refiner.as_mut().is_none_or(|g| all_finite(g.blocks_mut())) {
            return Err(diverged);
        }
        sgd_momentum(pipeline.model.blocks_mut(), grads.model.blocks_mut(), opt.model.blocks_mut(), cfg.learning_rate);
        if let (Some(ps), Some(g), Some(v)) =
            (pipeline.popusense.as_mut(), grads.refiner.as_mut(), opt.refiner.as_mut())
        {
            sgd_momentum(ps.refiner.blocks_mut(), g.blocks_mut(), v.blocks_mut(), cfg.learning_rate);
        }
        if !all_finite(pipeline.model.blocks_mut())
            || !pipeline.popusense.as_mut().is_none_or(|ps| all_finite(ps.refiner.blocks_mut()))
        {
            return Err(diverged);
        }
        if let Some(ps) = pipeline.popusense.as_mut() {
            if ps.config.variant == Variant::Wide {
                popusense::bank_update(&mut ps.bank, &z)?;
            }
        }
        total += loss;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Pixel-weighted mean reconstruction loss with the evaluation forward pass.
pub fn validation_loss(pipeline: &Pipeline, data: &[LabeledSample], kind: LossKind, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&LabeledSample> = chunk.iter().collect();
        let x = batch_of(&refs)?;
        let xhat = pipeline.reconstruct(&x)?;
        let n = x.data().len();
        total += reconstruction_loss(&x, &xhat, kind)? * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

/// Runs all epochs in memory. Validation loss is tracked when `val` is non-empty.
pub fn train_pipeline(
    run: &RunConfig,
    train: &[LabeledSample],
    val: &[LabeledSample],
) -> Result<(Pipeline, TrainStats)> {
    let cfg = run.train_config();
    cfg.validate()?;
    check_normal(train)?;
    let mut pipeline = Pipeline::from_train_config(&cfg, run.model_config())?;
    let mut opt = OptState::new(&pipeline);
    let mut stats = TrainStats::default();
    let val_loss = |p: &Pipeline| -> Result<f64> {
        if val.is_empty() {
            Ok(f64::NAN)
        } else {
            validation_loss(p, val, cfg.loss, cfg.batch_size)
        }
    };
    if cfg.epochs > 0 {
        stats.initial_val_loss = Some(val_loss(&pipeline)?);
    }
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let loss = train_epoch(&mut pipeline, &mut opt, train, &cfg, epoch)?;
        let v = val_loss(&pipeline)?;
        stats.train_loss.push(loss);
        stats.val_loss.push(v);
        stats.seconds.push(start.elapsed().as_secs_f64());
    }
    Ok((pipeline, stats))
}

/// Trains on `dataset_dir` and writes the checkpoint archive.
pub fn fit(run: &RunConfig, dataset_dir: &Path, out_checkpoint: &Path) -> Result<TrainStats> {
    let splits = synthdata::load_dataset(dataset_dir)?;
    if let Some(s) = splits.train.first() {
        if s.image.nrows() != run.data.size {
            return Err(Error::Config(format!(
                "dataset images are {0}x{0} but data.size = {1}",
                s.image.nrows(),
                run.data.size
            )));
        }
    }
    let (pipeline, stats) = train_pipeline(run, &splits.train, &splits.val)?;
    save_checkpoint(out_checkpoint, &Checkpoint::new(pipeline, run))?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_sample;
    use crate::synthdata::AnomalyType;
    use rand::Rng;

    fn batch(b: usize, s: usize, seed: u64) -> ImageBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBatch::new(Array4::from_shape_fn((b, 1, s, s), |_| rng.random_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn loss_examples() {
        let x = batch(2, 8, 1);
        assert_eq!(reconstruction_loss(&x, &x, LossKind::L2).unwrap(), 0.0);
        let a = ImageBatch::new(Array4::from_elem((2, 1, 8, 8), 0.75)).unwrap();
        let b = ImageBatch::new(Array4::from_elem((2, 1, 8, 8), 0.25)).unwrap();
        assert_eq!(reconstruction_loss(&a, &b, LossKind::L2).unwrap(), 0.25);
        let y = batch(2, 8, 2);
        let oracle = x.data().iter().zip(y.data().iter()).map(|(p, q)| (p - q).abs()).sum::<f64>() / 128.0;
        assert!((reconstruction_loss(&x, &y, LossKind::L1).unwrap() - oracle).abs() < 1e-12);
        assert!(reconstruction_loss(&x, &batch(1, 8, 0), LossKind::L1).is_err());
    }

    fn tiny_run(configuration: Configuration) -> RunConfig {
        let mut run = RunConfig::default();
        run.data.size = 32;
        run.model.latent_channels = 8;
        run.model.base_width = 4;
        run.train.configuration = configuration;
        run.train.batch_size = 4;
        run.popusense.k = Some(2);
        run.popusense.bank_capacity = 8;
        run.resolve();
        run
    }

    fn normals(n: usize, s: usize) -> Vec<LabeledSample> {
        (0..n).map(|i| generate_sample(AnomalyType::None, 100 + i as u64, s).unwrap()).collect()
    }

    #[test]
    fn zero_learning_rate_keeps_params_but_updates_bank() {
        let mut run = tiny_run(Configuration::WidePopusense);
        run.train.learning_rate = 0.0;
        let cfg = run.train_config();
        let mut p = Pipeline::from_train_config(&cfg, run.model_config()).unwrap();
        let before = p.clone();
        let mut opt = OptState::new(&p);
        train_epoch(&mut p, &mut opt, &normals(8, 32), &cfg, 0).unwrap();
        assert_eq!(p.model, before.model);
        let ps = p.popusense.as_ref().unwrap();
        assert_eq!(ps.refiner, before.popusense.as_ref().unwrap().refiner);
        assert_eq!(ps.bank.len(), 8);
    }

    #[test]
    fn identity_refinement_matches_baseline_loss() {
        let data = normals(8, 32);
        let mut losses = Vec::new();
        for c in [Configuration::Pdccore, Configuration::NarrowPopusense, Configuration::WidePopusense] {
            let mut run = tiny_run(c);
            run.train.learning_rate = 0.0;
            let cfg = run.train_config();
            let mut p = Pipeline::from_train_config(&cfg, run.model_config()).unwrap();
            let mut opt = OptState::new(&p);
            losses.push(train_epoch(&mut p, &mut opt, &data, &cfg, 0).unwrap());
        }
        assert_eq!(losses[0].to_bits(), losses[1].to_bits());
        assert_eq!(losses[0].to_bits(), losses[2].to_bits());
    }

    #[test]
    fn rejects_anomalous_training_samples() {
        let run = tiny_run(Configuration::Pdccore);
        let mut data = normals(3, 32);
        data.push(generate_sample(AnomalyType::Contrast, 5, 32).unwrap());
        assert!(matches!(train_pipeline(&run, &data, &[]), Err(Error::AnomalyLeakage { index: 3 })));
    }

    #[test]
    fn divergence_is_reported() {
        let mut run = tiny_run(Configuration::Pdccore);
        run.train.learning_rate = 1e3;
        run.train.epochs = 3;
        let err = train_pipeline(&run, &normals(8, 32), &[]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn zero_epochs_is_initialization() {
        let mut run = tiny_run(Configuration::NarrowPopusense);
        run.train.epochs = 0;
        let (p, stats) = train_pipeline(&run, &normals(4, 32), &normals(2, 32)).unwrap();
        assert_eq!(p, Pipeline::from_train_config(&run.train_config(), run.model_config()).unwrap());
        assert_eq!(stats, TrainStats::default());
    }
}
