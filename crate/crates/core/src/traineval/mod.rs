//! Optimiser, unsupervised training loop and evaluation.

mod adam;
mod metrics;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use metrics::{epe, fl_all, occlusion_f_measure, FMeasure, F_MEASURE_STEPS};

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{augment, generate_sample, histogram_equalize, Augment, OcclusionMap, Sample, ShapesConfig};
use crate::error::{invalid, FlowError, Result};
use crate::loss::{multiscale_loss, total_loss, LossOptions, LossWeights, OcclusionHandling, ScaleSchedule};
use crate::net::{bidirectional_flow, image_pyramid, predict_bidirectional, NetConfig, NetworkParams};
use crate::tensor::{read_checkpoint, write_checkpoint, Tape, Tensor, Var};
use crate::warp::{occlusion_map_of, FlowField};

/// First seed of the held-out evaluation stream; training seeds stay below it.
pub const EVAL_SEED_BASE: u64 = 1 << 62;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Total number of optimiser steps (resumed runs continue up to this).
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub schedule: ScaleSchedule,
    /// Enlarged-search half-width for the loss warp; 0 for plain bilinear.
    pub radius: usize,
    pub occlusion: OcclusionHandling,
    pub hflip: bool,
    pub vflip: bool,
    /// Histogram-equalise both frames before they reach the network.
    pub equalize: bool,
    pub seed: u64,
    /// Interval of metrics-log records, each carrying an eval EPE.
    pub log_every: usize,
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            weights: LossWeights::CHAIRS,
            schedule: ScaleSchedule::default(),
            radius: 4,
            occlusion: OcclusionHandling::Detached,
            hflip: true,
            vflip: true,
            equalize: true,
            seed: 0,
            log_every: 100,
            eval_samples: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        if self.log_every == 0 {
            return Err(invalid("log_every must be at least 1"));
        }
        self.weights.validate()
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            weights: self.weights,
            radius: self.radius,
            occlusion: self.occlusion,
        }
    }
}

/// Where training pairs come from.
#[derive(Clone, Debug)]
pub enum DataSource {
    /// Fresh generated scenes every step.
    Synthetic(ShapesConfig),
    /// A fixed set, visited in a per-epoch shuffled order.
    Samples(Vec<Sample>),
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: NetworkParams,
    pub adam: AdamState,
    /// Completed optimiser steps.
    pub step: usize,
}

impl TrainState {
    pub fn new(net: &NetConfig, seed: u64) -> Result<Self> {
        let params = NetworkParams::init(net, seed)?;
        let adam = AdamState::new(&params);
        Ok(TrainState { params, adam, step: 0 })
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut records: Vec<(String, Tensor)> = Vec::new();
        for (k, t) in self.params.iter() {
            records.push((k.to_string(), t.clone()));
        }
        for (k, t) in &self.adam.m {
            records.push((format!("adam.m.{k}"), t.clone()));
        }
        for (k, t) in &self.adam.v {
            records.push((format!("adam.v.{k}"), t.clone()));
        }
        // counters are stored as two 24-bit halves to stay exact in f32
        for (name, value) in [("adam.t", self.adam.t), ("train.step", self.step as u64)] {
            let lo = (value & 0xff_ffff) as f32;
            let hi = (value >> 24) as f32;
            records.push((name.to_string(), Tensor::new(&[2], vec![lo, hi])?));
        }
        write_checkpoint(w, records.iter().map(|(k, t)| (k.as_str(), t)))
    }

    /// Restores a state written by [`TrainState::write`]. A bare parameter
    /// checkpoint starts a fresh optimiser at step 0.
    pub fn read<R: Read>(r: R, net: &NetConfig) -> Result<Self> {
        let named = read_checkpoint(r)?;
        let params = NetworkParams::from_named(net, &named)?;
        let lookup: BTreeMap<&str, &Tensor> = named.iter().map(|(k, t)| (k.as_str(), t)).collect();
        let counter = |name: &str| -> Result<Option<u64>> {
            match lookup.get(name) {
                None => Ok(None),
                Some(t) if t.numel() == 2 => Ok(Some(t.data()[0] as u64 | ((t.data()[1] as u64) << 24))),
                Some(_) => Err(FlowError::Checkpoint(format!("malformed counter {name}"))),
            }
        };
        let mut adam = AdamState::new(&params);
        let t = counter("adam.t")?;
        if let Some(t) = t {
            adam.t = t;
            for (k, p) in params.iter() {
                for (prefix, map) in [("adam.m", &mut adam.m), ("adam.v", &mut adam.v)] {
                    let name = format!("{prefix}.{k}");
                    let saved = lookup
                        .get(name.as_str())
                        .ok_or_else(|| FlowError::Checkpoint(format!("missing tensor {name}")))?;
                    if saved.shape() != p.shape() {
                        return Err(FlowError::Checkpoint(format!("tensor {name} has the wrong shape")));
                    }
                    map.insert(k.to_string(), (*saved).clone());
                }
            }
        }
        let step = counter("train.step")?.unwrap_or(0) as usize;
        Ok(TrainState { params, adam, step })
    }

    /// Parameters only, as consumed by inference.
    pub fn write_params<W: Write>(&self, w: W) -> Result<()> {
        write_checkpoint(w, self.params.iter())
    }
}

/// Loss components of one step, averaged over both directions at the
/// finest scale (`loss` is the full weighted objective).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: usize,
    pub loss: f32,
    pub lp1: f32,
    pub lp2: f32,
    pub ls1: f32,
    pub ls2: f32,
    /// Held-out EPE, present on logging steps.
    pub epe: Option<f32>,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:.6} {:.6} {:.6} {:.6} {:.6} ",
            self.step, self.loss, self.lp1, self.lp2, self.ls1, self.ls2
        )?;
        match self.epe {
            Some(e) => write!(f, "{e:.6}"),
            None => write!(f, "nan"),
        }
    }
}

/// Network input for a `[C, H, W]` image.
pub fn preprocess(image: &Tensor, equalize: bool) -> Result<Tensor> {
    if equalize {
        histogram_equalize(image)
    } else {
        Ok(image.clone())
    }
}

fn stack(images: &[Tensor]) -> Result<Tensor> {
    let batched: Vec<Tensor> = images
        .iter()
        .map(crate::data::as_batch)
        .collect::<Result<_>>()?;
    Tensor::stack_batch(&batched)
}

fn step_rng(seed: u64, step: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(stream);
    rng
}

/// Training seed of element `b` of step `step`.
fn train_seed(seed: u64, step: usize, batch: usize, b: usize) -> u64 {
    let idx = (step * batch + b) as u64;
    ((seed & 0xf_ffff) << 40 | idx) & (EVAL_SEED_BASE - 1)
}

fn batch_samples(config: &TrainConfig, source: &DataSource, step: usize) -> Result<Vec<Sample>> {
    let b = config.batch_size;
    match source {
        DataSource::Synthetic(shapes) => (0..b)
            .into_par_iter()
            .map(|i| generate_sample(shapes, train_seed(config.seed, step, b, i)))
            .collect(),
        DataSource::Samples(all) => {
            if all.is_empty() {
                return Err(invalid("training set is empty"));
            }
            let n = all.len();
            (0..b)
                .map(|i| {
                    let k = step * b + i;
                    let (epoch, pos) = (k / n, k % n);
                    let mut order: Vec<usize> = (0..n).collect();
                    order.shuffle(&mut step_rng(config.seed, epoch, 2));
                    Ok(all[order[pos]].clone())
                })
                .collect()
        }
    }
}

/// Augmented, preprocessed `(I1, I2)` batches for one step.
fn training_batch(config: &TrainConfig, source: &DataSource, step: usize) -> Result<(Tensor, Tensor)> {
    let samples = batch_samples(config, source, step)?;
    let mut rng = step_rng(config.seed, step, 1);
    let mut i1 = Vec::with_capacity(samples.len());
    let mut i2 = Vec::with_capacity(samples.len());
    for s in samples {
        let mut s = s.without_gt();
        if config.hflip && rng.gen_bool(0.5) {
            s = augment(&s, Augment::HFlip);
        }
        if config.vflip && rng.gen_bool(0.5) {
            s = augment(&s, Augment::VFlip);
        }
        i1.push(preprocess(&s.i1, config.equalize)?);
        i2.push(preprocess(&s.i2, config.equalize)?);
    }
    Ok((stack(&i1)?, stack(&i2)?))
}

/// Builds the symmetric multi-scale objective for one batch and returns the
/// root together with the finest-scale component handles.
fn objective(
    tape: &mut Tape,
    config: &TrainConfig,
    net: &NetConfig,
    params: &crate::net::ParamVars,
    i1: Tensor,
    i2: Tensor,
    progress: f32,
) -> Result<(Var, [Var; 4])> {
    let a = tape.constant(i1);
    let b = tape.constant(i2);
    let p1 = image_pyramid(tape, a, net.num_scales)?;
    let p2 = image_pyramid(tape, b, net.num_scales)?;
    let (f12, f21) = bidirectional_flow(tape, params, net, &p1, &p2)?;
    let opts = config.loss_options();
    let s = net.num_scales;
    let mut per_scale = Vec::with_capacity(s);
    let mut finest = None;
    for k in 0..s {
        let level = s - k;
        let fwd = total_loss(tape, p1[level], p2[level], f12[k], f21[k], &opts)?;
        let bwd = total_loss(tape, p2[level], p1[level], f21[k], f12[k], &opts)?;
        let both = tape.add(fwd.total, bwd.total)?;
        per_scale.push(tape.mul_scalar(both, 0.5)?);
        if k + 1 == s {
            let mut comps = [fwd.brightness; 4];
            for (slot, (x, y)) in comps.iter_mut().zip([
                (fwd.brightness, bwd.brightness),
                (fwd.gradient, bwd.gradient),
                (fwd.smooth1, bwd.smooth1),
                (fwd.smooth2, bwd.smooth2),
            ]) {
                let sum = tape.add(x, y)?;
                *slot = tape.mul_scalar(sum, 0.5)?;
            }
            finest = Some(comps);
        }
    }
    let total = multiscale_loss(tape, &per_scale, &config.schedule, progress)?;
    Ok((total, finest.expect("num_scales ≥ 1")))
}

/// One optimiser step on `state`; returns the step record without EPE.
pub fn train_step(config: &TrainConfig, net: &NetConfig, source: &DataSource, state: &mut TrainState) -> Result<StepRecord> {
    let step = state.step;
    let (i1, i2) = training_batch(config, source, step)?;
    let progress = (step as f32 / config.steps as f32).min(1.0);
    let mut tape = Tape::new();
    let params = state.params.register(&mut tape);
    let (root, comps) = objective(&mut tape, config, net, &params, i1, i2, progress).map_err(|e| match e {
        FlowError::FullyOccluded => {
            log::error!("step {}: every pixel of a frame is occluded; loss is undefined", step + 1);
            e
        }
        other => other,
    })?;
    let value = |v: Var| tape.value(v).item();
    let record = StepRecord {
        step: step + 1,
        loss: value(root)?,
        lp1: value(comps[0])?,
        lp2: value(comps[1])?,
        ls1: value(comps[2])?,
        ls2: value(comps[3])?,
        epe: None,
    };
    let mut grads = tape.backward(root)?;
    let grads: BTreeMap<String, Tensor> = params
        .iter()
        .filter_map(|(k, v)| grads.take(v).map(|g| (k.to_string(), g)))
        .collect();
    adam_step(&mut state.params, &grads, &mut state.adam, config.learning_rate, &config.adam)?;
    state.step += 1;
    Ok(record)
}

/// Held-out samples for periodic evaluation during training.
pub fn eval_set(config: &TrainConfig, source: &DataSource) -> Result<Vec<Sample>> {
    match source {
        DataSource::Synthetic(shapes) => (0..config.eval_samples as u64)
            .into_par_iter()
            .map(|i| generate_sample(shapes, EVAL_SEED_BASE + i))
            .collect(),
        DataSource::Samples(all) => Ok(all
            .iter()
            .filter(|s| s.gt_flow.is_some())
            .take(config.eval_samples)
            .cloned()
            .collect()),
    }
}

/// Runs optimiser steps from `state.step` up to `config.steps`, calling
/// `on_step` after each. Every `log_every` steps (and at the last step) the
/// record carries the EPE on `eval` (if non-empty).
pub fn train(
    config: &TrainConfig,
    net: &NetConfig,
    source: &DataSource,
    eval: &[Sample],
    state: &mut TrainState,
    on_step: impl FnMut(&StepRecord, &TrainState) -> Result<()>,
) -> Result<()> {
    train_until(config, net, source, eval, state, config.steps, on_step)
}

/// Like [`train`] but stops after step `until` (capped at `config.steps`).
/// The schedule still follows `config.steps`, so a run interrupted this way
/// and resumed later matches an uninterrupted one bit for bit.
pub fn train_until(
    config: &TrainConfig,
    net: &NetConfig,
    source: &DataSource,
    eval: &[Sample],
    state: &mut TrainState,
    until: usize,
    mut on_step: impl FnMut(&StepRecord, &TrainState) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    net.validate()?;
    let end = until.min(config.steps);
    while state.step < end {
        let mut record = train_step(config, net, source, state)?;
        let logged = record.step % config.log_every == 0 || record.step == end;
        if logged && !eval.is_empty() {
            record.epe = Some(evaluate(&state.params, net, eval, config.equalize)?.epe);
        }
        on_step(&record, state)?;
    }
    Ok(())
}

/// Metrics of one evaluated pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub epe: f32,
    pub fl_all: f32,
    pub f_measure: Option<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean of per-sample EPE.
    pub epe: f32,
    /// Mean of per-sample Fl-all.
    pub fl_all: f32,
    /// Max F-measure with confusion counts pooled over all samples.
    pub f_measure: Option<f32>,
    pub samples: Vec<SampleMetrics>,
}

/// Scores predicted flows (and optional occlusion maps) against ground
/// truth. Samples without ground-truth flow are rejected.
pub fn score(preds: &[(FlowField, Option<OcclusionMap>)], gts: &[Sample]) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(invalid(format!("{} predictions for {} ground-truth samples", preds.len(), gts.len())));
    }
    if gts.is_empty() {
        return Err(invalid("nothing to evaluate"));
    }
    let mut pooled = FMeasure::default();
    let mut any_occ = false;
    let mut samples = Vec::with_capacity(gts.len());
    for ((flow, occ), gt) in preds.iter().zip(gts) {
        let gt_flow = gt
            .gt_flow
            .as_ref()
            .ok_or_else(|| invalid("sample has no ground-truth flow"))?;
        let f_measure = match (occ, &gt.gt_occ) {
            (Some(o), Some(g)) => {
                pooled.add(o, g)?;
                any_occ = true;
                let mut one = FMeasure::default();
                one.add(o, g)?;
                one.max_f()
            }
            _ => None,
        };
        samples.push(SampleMetrics {
            epe: epe(flow, gt_flow, None)?,
            fl_all: fl_all(flow, gt_flow, None)?,
            f_measure,
        });
    }
    let n = samples.len() as f64;
    let mean = |f: fn(&SampleMetrics) -> f32| (samples.iter().map(|s| f64::from(f(s))).sum::<f64>() / n) as f32;
    Ok(EvalReport {
        epe: mean(|s| s.epe),
        fl_all: mean(|s| s.fl_all),
        f_measure: if any_occ { pooled.max_f() } else { None },
        samples,
    })
}

/// Forward flow and the occlusion map of the backward flow for each pair.
pub fn predict_samples(
    params: &NetworkParams,
    net: &NetConfig,
    samples: &[Sample],
    equalize: bool,
) -> Result<Vec<(FlowField, OcclusionMap)>> {
    const CHUNK: usize = 8;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let i1: Vec<Tensor> = chunk.iter().map(|s| preprocess(&s.i1, equalize)).collect::<Result<_>>()?;
        let i2: Vec<Tensor> = chunk.iter().map(|s| preprocess(&s.i2, equalize)).collect::<Result<_>>()?;
        let (fwd, bwd) = predict_bidirectional(params, net, &stack(&i1)?, &stack(&i2)?)?;
        for (f, b) in fwd.into_iter().zip(bwd) {
            let occ = OcclusionMap::new(b.width(), b.height(), occlusion_map_of(&b)?)?;
            out.push((f, occ));
        }
    }
    Ok(out)
}

/// Runs the network on `samples` and scores it.
pub fn evaluate(params: &NetworkParams, net: &NetConfig, samples: &[Sample], equalize: bool) -> Result<EvalReport> {
    let preds: Vec<(FlowField, Option<OcclusionMap>)> = predict_samples(params, net, samples, equalize)?
        .into_iter()
        .map(|(f, o)| (f, Some(o)))
        .collect();
    score(&preds, samples)
}

/// Scores the all-zero predictor.
pub fn zero_flow_baseline(samples: &[Sample]) -> Result<EvalReport> {
    let preds: Vec<(FlowField, Option<OcclusionMap>)> = samples
        .iter()
        .map(|s| (FlowField::zeros(s.i1.shape()[2], s.i1.shape()[1]), None))
        .collect();
    score(&preds, samples)
}
