//! Masked-reconstruction pretraining, supervised fine-tuning and evaluation.

pub mod optim;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{extract_patch, standardize, Coord, Dataset, HyperspectralCube, LabelMap, SplitSpec};
use crate::error::{Error, Result};
use crate::masking::{build_mask_plan, FilterScope, MaskMode, MaskPlan, MaskSettings, RealDft};
use crate::metrics::MetricsReport;
use crate::model::{self, Bound, Dropout, ModelConfig, ModelParams};
use crate::rng::{self, tag};
use crate::tensor::{Graph, Tensor, Var};

pub use optim::{adam_update, AdamConfig, OptimizerState};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Pretrain,
    Finetune,
}

/// How the two channels of the dual mode share a step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ChannelSchedule {
    /// Both channels every step, losses added.
    #[default]
    Sum,
    /// One channel per step, chosen by a seeded coin.
    Alternate,
}

/// Which decoded tokens enter the spatial reconstruction loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SpatialLoss {
    #[default]
    Masked,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub mask_mode: MaskMode,
    pub ratio: f64,
    pub gamma: f64,
    pub filter_scope: FilterScope,
    pub schedule: ChannelSchedule,
    pub spatial_loss: SpatialLoss,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Fine-tune only the classification head.
    pub head_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            mode: TrainMode::Pretrain,
            mask_mode: MaskMode::Dual,
            ratio: 0.7,
            gamma: 0.3,
            filter_scope: FilterScope::Token,
            schedule: ChannelSchedule::Sum,
            spatial_loss: SpatialLoss::Masked,
            epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            head_only: false,
        }
    }

    pub fn finetune() -> Self {
        TrainConfig {
            mode: TrainMode::Finetune,
            epochs: Preset::IndianPines.finetune_epochs(),
            lr: 5e-4,
            ..TrainConfig::pretrain()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn mask_settings(&self) -> MaskSettings {
        MaskSettings {
            mode: self.mask_mode,
            ratio: self.ratio,
            gamma: self.gamma,
            scope: self.filter_scope,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.ratio) {
            return fail("ratio must lie in [0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail("gamma must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return fail("adam eps must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight decay must be non-negative");
        }
        Ok(())
    }
}

/// Fine-tuning epochs at which the reference datasets converge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    IndianPines,
    Pavia,
    Houston,
}

impl Preset {
    pub fn finetune_epochs(self) -> usize {
        match self {
            Preset::IndianPines => 35,
            Preset::Pavia => 25,
            Preset::Houston => 20,
        }
    }
}

/// Worker count from `SFMIM_THREADS`, else the machine's parallelism.
pub fn worker_threads() -> usize {
    std::env::var("SFMIM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(worker_threads())
            .build()
            .expect("thread pool")
    })
}

/// A standardized cube with its labels and splits.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub cube: HyperspectralCube,
    pub labels: LabelMap,
    pub splits: SplitSpec,
}

impl TrainingData {
    /// Standardizes `cube` with statistics from the unlabeled and train pixels.
    pub fn new(cube: &HyperspectralCube, labels: LabelMap, splits: SplitSpec) -> Result<Self> {
        if labels.height() != cube.height() || labels.width() != cube.width() {
            return Err(Error::Data(format!(
                "labels are {}x{}, cube is {}x{}",
                labels.height(),
                labels.width(),
                cube.height(),
                cube.width()
            )));
        }
        let cube = standardize(cube, &splits.fit_coords())?;
        Ok(TrainingData { cube, labels, splits })
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let splits = ds
            .splits
            .clone()
            .ok_or_else(|| Error::Data("dataset has no split file".into()))?;
        TrainingData::new(&ds.cube, ds.labels.clone(), splits)
    }

    pub fn classes(&self) -> usize {
        self.labels.num_classes()
    }

    pub fn tokens(&self, at: Coord, patch_size: usize) -> Result<Tensor> {
        Ok(extract_patch(&self.cube, at, patch_size)?.tokens)
    }

    pub fn coords(&self, split: Split) -> &[Coord] {
        match split {
            Split::Train => &self.splits.train,
            Split::Test => &self.splits.test,
            Split::Unlabeled => &self.splits.unlabeled,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Unlabeled,
}

/// Batch-mean reconstruction losses of one pretraining step.
///
/// `spatial` comes from token substitution, `spectral` from band zeroing
/// (including the combined spatial-spectral arm), `frequency` from DFT
/// filtering. `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    pub spatial: f64,
    pub spectral: f64,
    pub frequency: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Channel {
    Spatial,
    Frequency,
    Spectral,
    SpatialSpectral,
}

impl Channel {
    fn stream_id(self) -> u64 {
        match self {
            Channel::Spatial => 0,
            Channel::Frequency => 1,
            Channel::Spectral => 2,
            Channel::SpatialSpectral => 3,
        }
    }
}

fn channels(cfg: &TrainConfig, step: u64) -> Vec<Channel> {
    match cfg.mask_mode {
        MaskMode::Spatial => vec![Channel::Spatial],
        MaskMode::Frequency => vec![Channel::Frequency],
        MaskMode::Spectral => vec![Channel::Spectral],
        MaskMode::SpatialSpectral => vec![Channel::SpatialSpectral],
        MaskMode::Dual => match cfg.schedule {
            ChannelSchedule::Sum => vec![Channel::Spatial, Channel::Frequency],
            ChannelSchedule::Alternate => {
                if rng::stream(cfg.seed, &[tag::SCHEDULE, step]).random_bool(0.5) {
                    vec![Channel::Spatial]
                } else {
                    vec![Channel::Frequency]
                }
            }
        },
    }
}

/// Seed of the mask plan and dropout streams for sample `index` of `step`.
pub fn sample_seed(seed: u64, step: u64, index: usize) -> u64 {
    rng::derive_seed(seed, &[tag::SAMPLE, step, index as u64])
}

fn constant_mse(g: &mut Graph<'_>, pred: Var, target: &Tensor, weights: &Tensor) -> Result<Option<Var>> {
    let count = weights.data().iter().filter(|&&w| w != 0.0).count();
    if count == 0 {
        return Ok(None);
    }
    let t = g.constant(target.clone());
    let w = g.constant(weights.clone());
    let diff = g.sub(pred, t)?;
    let d = g.mul(diff, w)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(Some(g.scale(s, 1.0 / count as f64)))
}

struct SampleLoss {
    spatial: Option<Var>,
    spectral: Option<Var>,
    frequency: Option<Var>,
}

#[allow(clippy::too_many_arguments)]
fn pretrain_graph(
    g: &mut Graph<'_>,
    b: &Bound,
    tokens: &Tensor,
    target: &Tensor,
    plan: &MaskPlan,
    chans: &[Channel],
    cfg: &TrainConfig,
    seed: u64,
    dft: &RealDft,
    train: bool,
) -> Result<SampleLoss> {
    let rate = if train { b.config.dropout } else { 0.0 };
    let mut out = SampleLoss {
        spatial: None,
        spectral: None,
        frequency: None,
    };
    let (n, bands) = (tokens.rows(), tokens.cols());
    for &ch in chans {
        let mut r = rng::stream(seed, &[tag::DROPOUT, ch.stream_id()]);
        let drop = (rate > 0.0).then_some(Dropout { rate, rng: &mut r });
        match ch {
            Channel::Spatial => {
                let mask = plan.spatial.as_ref().expect("spatial plan");
                let x = model::embed(g, b, tokens)?;
                let x = model::substitute_masked(g, b, x, mask)?;
                let enc = model::encode(g, b, x, drop)?;
                let pred = model::decode(g, b, enc.tokens)?;
                out.spatial = match cfg.spatial_loss {
                    SpatialLoss::All => Some(g.mse(pred, target)?),
                    SpatialLoss::Masked => {
                        let idx = mask.masked_indices();
                        if idx.is_empty() {
                            None
                        } else {
                            let rows: Vec<Vec<f64>> = idx.iter().map(|&i| target.row(i).to_vec()).collect();
                            let sel = g.gather_rows(pred, &idx)?;
                            Some(g.mse(sel, &Tensor::from_rows(&rows)?)?)
                        }
                    }
                };
            }
            Channel::Frequency => {
                let corrupted = plan.frequency_corrupt(tokens, dft)?.expect("frequency plan");
                let x = model::embed(g, b, &corrupted)?;
                let enc = model::encode(g, b, x, drop)?;
                let pred = model::decode(g, b, enc.tokens)?;
                out.frequency = Some(g.mse(pred, target)?);
            }
            Channel::Spectral | Channel::SpatialSpectral => {
                let bands_mask = plan.bands.as_ref().expect("band plan").flags().to_vec();
                let corrupted = plan.band_corrupt(tokens).expect("band plan");
                let mut x = model::embed(g, b, &corrupted)?;
                let rows_masked = match (ch, plan.spatial.as_ref()) {
                    (Channel::SpatialSpectral, Some(m)) => {
                        x = model::substitute_masked(g, b, x, m)?;
                        m.flags().to_vec()
                    }
                    _ => vec![false; n],
                };
                let enc = model::encode(g, b, x, drop)?;
                let pred = model::decode(g, b, enc.tokens)?;
                let w: Vec<f64> = (0..n * bands)
                    .map(|j| (rows_masked[j / bands] || bands_mask[j % bands]) as u8 as f64)
                    .collect();
                out.spectral = constant_mse(g, pred, target, &Tensor::new(vec![n, bands], w)?)?;
            }
        }
    }
    Ok(out)
}

struct SampleResult {
    loss: StepLoss,
    grads: Option<Vec<Tensor>>,
}

fn pretrain_sample(
    params: &ModelParams,
    tokens: &Tensor,
    cfg: &TrainConfig,
    step: u64,
    index: usize,
    dft: &RealDft,
    with_grads: bool,
    train: bool,
) -> Result<SampleResult> {
    let seed = sample_seed(cfg.seed, step, index);
    let plan = build_mask_plan(&cfg.mask_settings(), tokens.rows(), tokens.cols(), seed)?;
    let chans = channels(cfg, step);
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let parts = pretrain_graph(&mut g, &b, tokens, tokens, &plan, &chans, cfg, seed, dft, train)?;
    let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0]);
    let loss = StepLoss {
        spatial: value(parts.spatial),
        spectral: value(parts.spectral),
        frequency: value(parts.frequency),
        total: 0.0,
    };
    let grads = if with_grads {
        let mut total: Option<Var> = None;
        for v in [parts.spatial, parts.spectral, parts.frequency].into_iter().flatten() {
            total = Some(match total {
                None => v,
                Some(t) => g.add(t, v)?,
            });
        }
        if let Some(t) = total {
            g.backward(t)?;
        }
        Some(collect_grads(&g, &b, params))
    } else {
        None
    };
    Ok(SampleResult { loss, grads })
}

fn collect_grads(g: &Graph<'_>, b: &Bound, params: &ModelParams) -> Vec<Tensor> {
    b.vars()
        .into_iter()
        .zip(params.named())
        .map(|(v, (_, t))| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

fn mean_grads(per_sample: Vec<Vec<Tensor>>) -> Vec<Tensor> {
    let n = per_sample.len() as f64;
    let mut it = per_sample.into_iter();
    let mut acc = it.next().expect("non-empty batch");
    for gs in it {
        for (a, g) in acc.iter_mut().zip(gs) {
            a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
        }
    }
    for a in &mut acc {
        a.data_mut().iter_mut().for_each(|x| *x /= n);
    }
    acc
}

fn batch_loss(results: &[SampleResult]) -> StepLoss {
    let n = results.len() as f64;
    let mut l = StepLoss::default();
    for r in results {
        l.spatial += r.loss.spatial;
        l.spectral += r.loss.spectral;
        l.frequency += r.loss.frequency;
    }
    l.spatial /= n;
    l.spectral /= n;
    l.frequency /= n;
    l.total = l.spatial + l.spectral + l.frequency;
    l
}

fn check_batch(batch: &[Tensor], params: &ModelParams) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let c = &params.config;
    if let Some(t) = batch.iter().find(|t| t.rows() != c.tokens() || t.cols() != c.bands) {
        return Err(Error::Shape(format!(
            "batch token matrix {:?}, model expects {}x{}",
            t.shape(),
            c.tokens(),
            c.bands
        )));
    }
    Ok(())
}

fn run_pretrain_batch(
    batch: &[Tensor],
    params: &ModelParams,
    cfg: &TrainConfig,
    step: u64,
    with_grads: bool,
    train: bool,
) -> Result<Vec<SampleResult>> {
    if cfg.mode != TrainMode::Pretrain {
        return Err(Error::Contract("pretraining step with a finetune config".into()));
    }
    check_batch(batch, params)?;
    let dft = RealDft::new(params.config.bands)?;
    pool().install(|| {
        batch
            .par_iter()
            .enumerate()
            .map(|(i, t)| pretrain_sample(params, t, cfg, step, i, &dft, with_grads, train))
            .collect()
    })
}

/// Reconstruction losses for `batch` without dropout or parameter updates.
pub fn pretrain_loss(batch: &[Tensor], params: &ModelParams, cfg: &TrainConfig, step: u64) -> Result<StepLoss> {
    Ok(batch_loss(&run_pretrain_batch(batch, params, cfg, step, false, false)?))
}

/// Batch losses and mean gradients, in [`ModelParams::named`] order.
pub fn pretrain_gradients(
    batch: &[Tensor],
    params: &ModelParams,
    cfg: &TrainConfig,
    step: u64,
    train: bool,
) -> Result<(StepLoss, Vec<Tensor>)> {
    let mut results = run_pretrain_batch(batch, params, cfg, step, true, train)?;
    let loss = batch_loss(&results);
    let grads = mean_grads(results.iter_mut().map(|r| r.grads.take().expect("grads")).collect());
    Ok((loss, grads))
}

pub fn new_optimizer(params: &ModelParams, cfg: &TrainConfig) -> OptimizerState {
    OptimizerState::new(params.named().into_iter().map(|(name, t)| {
        let head = name.starts_with("head.");
        (t, params.is_trainable(&name) && (!cfg.head_only || head))
    }))
}

/// One optimizer step on the summed reconstruction losses of `batch`.
///
/// The step index used to seed masks is `opt.step` before the update.
pub fn pretrain_step(
    batch: &[Tensor],
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<StepLoss> {
    let step = opt.step;
    let (loss, grads) = pretrain_gradients(batch, params, cfg, step, true)?;
    if !loss.total.is_finite() {
        return Err(Error::Training(format!("non-finite loss {} at step {step}", loss.total)));
    }
    adam_update(&mut params.tensors_mut(), opt, &grads, &cfg.adam())?;
    Ok(loss)
}

/// One optimizer step of cross-entropy on labelled sequences (labels in `1..=K`).
pub fn finetune_step(
    batch: &[(Tensor, u32)],
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<f64> {
    let step = opt.step;
    let tokens: Vec<Tensor> = batch.iter().map(|(t, _)| t.clone()).collect();
    check_batch(&tokens, params)?;
    let k = params.config.classes;
    if let Some((_, l)) = batch.iter().find(|(_, l)| *l == 0 || *l as usize > k) {
        return Err(Error::Contract(format!("label {l} outside 1..={k}")));
    }
    let p: &ModelParams = params;
    let results: Vec<Result<(f64, Vec<Tensor>)>> = pool().install(|| {
        batch
            .par_iter()
            .enumerate()
            .map(|(i, (tokens, label))| {
                let seed = sample_seed(cfg.seed, step, i);
                let mut r = rng::stream(seed, &[tag::DROPOUT]);
                let rate = p.config.dropout;
                let mut g = Graph::new();
                let b = p.bind(&mut g);
                let x = model::embed(&mut g, &b, tokens)?;
                let drop = (rate > 0.0).then_some(Dropout { rate, rng: &mut r });
                let enc = model::encode(&mut g, &b, x, drop)?;
                let logits = model::classify(&mut g, &b, enc.cls)?;
                let loss = g.cross_entropy(logits, &[*label as usize - 1])?;
                g.backward(loss)?;
                Ok((g.value(loss).data()[0], collect_grads(&g, &b, p)))
            })
            .collect()
    });
    let mut losses = Vec::with_capacity(results.len());
    let mut grads = Vec::with_capacity(results.len());
    for r in results {
        let (l, g) = r?;
        losses.push(l);
        grads.push(g);
    }
    let loss = losses.iter().sum::<f64>() / losses.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Training(format!("non-finite loss {loss} at step {step}")));
    }
    adam_update(&mut params.tensors_mut(), opt, &mean_grads(grads), &cfg.adam())?;
    Ok(loss)
}

/// Predicted labels for `coords`, in order.
pub fn predict(params: &ModelParams, data: &TrainingData, coords: &[Coord]) -> Result<Vec<u32>> {
    let s = params.config.patch_size;
    pool().install(|| {
        coords
            .par_iter()
            .map(|&c| params.predict(&data.tokens(c, s)?))
            .collect()
    })
}

pub fn evaluate(params: &ModelParams, data: &TrainingData, coords: &[Coord]) -> Result<MetricsReport> {
    let pred = predict(params, data, coords)?;
    let truth: Vec<u32> = coords.iter().map(|&c| data.labels.get(c)).collect();
    MetricsReport::from_labels(&truth, &pred, params.config.classes)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: Option<f64>,
    /// OA, AA, kappa.
    pub scores: Option<[f64; 3]>,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        let loss = self.loss.map(|l| l.to_string()).unwrap_or_default();
        let scores = match self.scores {
            Some([oa, aa, k]) => format!("{oa:.6},{aa:.6},{k:.6}"),
            None => ",,".to_string(),
        };
        format!("{},{},{loss},{scores}", self.epoch, self.split)
    }
}

pub const LOG_HEADER: &str = "epoch,split,loss,oa,aa,kappa";

/// CSV log flushed after every row.
pub struct TrainLog {
    out: Option<BufWriter<File>>,
}

impl TrainLog {
    pub fn disabled() -> Self {
        TrainLog { out: None }
    }

    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = TrainLog {
            out: Some(BufWriter::new(f)),
        };
        log.line(LOG_HEADER).map_err(|e| Error::io(path, e))?;
        Ok(log)
    }

    fn line(&mut self, s: &str) -> std::io::Result<()> {
        if let Some(w) = &mut self.out {
            writeln!(w, "{s}")?;
            w.flush()?;
        }
        Ok(())
    }

    pub fn record(&mut self, r: &EpochRecord) -> Result<()> {
        self.line(&r.csv_line())
            .map_err(|e| Error::io("training log", e))
    }
}

fn shuffled(coords: &[Coord], seed: u64, epoch: usize) -> Vec<Coord> {
    let mut v = coords.to_vec();
    v.shuffle(&mut rng::stream(seed, &[tag::EPOCH, epoch as u64]));
    v
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub best: ModelParams,
    pub best_epoch: usize,
    pub best_loss: Option<f64>,
    pub last: ModelParams,
    pub last_loss: Option<f64>,
    pub history: Vec<EpochRecord>,
}

/// Epoch loop over shuffled unlabeled patches.
pub fn pretrain(
    data: &TrainingData,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    init: Option<ModelParams>,
    log: &mut TrainLog,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if cfg.mode != TrainMode::Pretrain {
        return Err(Error::Config("pretrain needs mode = pretrain".into()));
    }
    let mut params = match init {
        Some(p) => p,
        None => ModelParams::init(model_cfg, cfg.seed)?,
    };
    check_data(&params.config, data)?;
    let coords = data.coords(Split::Unlabeled);
    if coords.is_empty() {
        return Err(Error::Data("no unlabeled pixels to pretrain on".into()));
    }
    let s = params.config.patch_size;
    let mut opt = new_optimizer(&params, cfg);
    let mut out = PretrainOutcome {
        best: params.clone(),
        best_epoch: 0,
        best_loss: None,
        last: params.clone(),
        last_loss: None,
        history: Vec::new(),
    };
    for epoch in 1..=cfg.epochs {
        let order = shuffled(coords, cfg.seed, epoch);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk.iter().map(|&c| data.tokens(c, s)).collect::<Result<Vec<_>>>()?;
            let l = pretrain_step(&batch, &mut params, &mut opt, cfg)?;
            sum += l.total * chunk.len() as f64;
            count += chunk.len();
        }
        let loss = sum / count as f64;
        let rec = EpochRecord {
            epoch,
            split: "pretrain".into(),
            loss: Some(loss),
            scores: None,
        };
        log.record(&rec)?;
        out.history.push(rec);
        if out.best_loss.is_none_or(|b| loss < b) {
            out.best = params.clone();
            out.best_epoch = epoch;
            out.best_loss = Some(loss);
        }
        out.last_loss = Some(loss);
    }
    out.last = params;
    Ok(out)
}

fn check_data(cfg: &ModelConfig, data: &TrainingData) -> Result<()> {
    if cfg.bands != data.cube.bands() {
        return Err(Error::Config(format!(
            "model expects {} bands, cube has {}",
            cfg.bands,
            data.cube.bands()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub best: ModelParams,
    pub best_epoch: usize,
    pub report: MetricsReport,
    pub last: ModelParams,
    pub history: Vec<EpochRecord>,
}

impl FinetuneOutcome {
    /// Test OA after each epoch, epoch 0 being the initialization.
    pub fn oa_curve(&self) -> Vec<f64> {
        self.history
            .iter()
            .filter(|r| r.split == "test")
            .filter_map(|r| r.scores.map(|s| s[0]))
            .collect()
    }

    /// First epoch whose test OA reaches `target`.
    pub fn epochs_to_oa(&self, target: f64) -> Option<usize> {
        self.oa_curve().iter().position(|&oa| oa >= target)
    }
}

/// Cross-entropy training on the train split, evaluated on the test split
/// after every epoch; the best-OA parameters are kept (earliest on ties).
pub fn finetune(
    data: &TrainingData,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    init: Option<ModelParams>,
    log: &mut TrainLog,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if cfg.mode != TrainMode::Finetune {
        return Err(Error::Config("finetune needs mode = finetune".into()));
    }
    let mut params = match init {
        Some(p) => p,
        None => ModelParams::init(model_cfg, cfg.seed)?,
    };
    check_data(&params.config, data)?;
    let k = data.classes();
    if k < 2 {
        return Err(Error::Data(format!("need at least 2 classes, labels hold {k}")));
    }
    if params.config.classes != k {
        return Err(Error::Config(format!(
            "model head has {} classes, labels hold {k}",
            params.config.classes
        )));
    }
    let train = data.coords(Split::Train);
    if train.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    let test = data.coords(Split::Test);
    let s = params.config.patch_size;
    let mut opt = new_optimizer(&params, cfg);
    let mut history = Vec::new();

    let report = evaluate(&params, data, test)?;
    let test_row = |epoch: usize, r: &MetricsReport| EpochRecord {
        epoch,
        split: "test".into(),
        loss: None,
        scores: Some([r.oa, r.aa, r.kappa]),
    };
    let rec = test_row(0, &report);
    log.record(&rec)?;
    history.push(rec);
    let (mut best, mut best_epoch, mut best_report) = (params.clone(), 0, report);

    for epoch in 1..=cfg.epochs {
        let order = shuffled(train, cfg.seed, epoch);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&c| Ok((data.tokens(c, s)?, data.labels.get(c))))
                .collect::<Result<Vec<_>>>()?;
            sum += finetune_step(&batch, &mut params, &mut opt, cfg)? * chunk.len() as f64;
            count += chunk.len();
        }
        let rec = EpochRecord {
            epoch,
            split: "train".into(),
            loss: Some(sum / count as f64),
            scores: None,
        };
        log.record(&rec)?;
        history.push(rec);
        let report = evaluate(&params, data, test)?;
        let rec = test_row(epoch, &report);
        log.record(&rec)?;
        history.push(rec);
        if report.oa > best_report.oa {
            best = params.clone();
            best_epoch = epoch;
            best_report = report;
        }
    }
    Ok(FinetuneOutcome {
        best,
        best_epoch,
        report: best_report,
        last: params,
        history,
    })
}

/// One row of the masking-strategy comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub strategy: MaskMode,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
}

/// Pretrain, fine-tune and evaluate once per strategy with shared seeds and budgets.
pub fn ablate(
    data: &TrainingData,
    model_cfg: &ModelConfig,
    pre: &TrainConfig,
    fine: &TrainConfig,
    strategies: &[MaskMode],
    mut on_row: impl FnMut(&AblationRow) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let cfg = TrainConfig {
            mask_mode: strategy,
            ..pre.clone()
        };
        let p = pretrain(data, model_cfg, &cfg, None, &mut TrainLog::disabled())?;
        let f = finetune(data, model_cfg, fine, Some(p.last), &mut TrainLog::disabled())?;
        let row = AblationRow {
            strategy,
            oa: f.report.oa,
            aa: f.report.aa,
            kappa: f.report.kappa,
        };
        on_row(&row)?;
        rows.push(row);
    }
    Ok(rows)
}
