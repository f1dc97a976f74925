//! Endpoint error, KITTI outlier rate and occlusion max F-measure.

use crate::data::OcclusionMap;
use crate::error::{invalid, FlowError, Result};
use crate::warp::FlowField;

fn check_aligned(pred: &FlowField, gt: &FlowField, mask: Option<&[bool]>) -> Result<()> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(FlowError::ShapeMismatch {
            op: "flow metric",
            lhs: vec![pred.height(), pred.width()],
            rhs: vec![gt.height(), gt.width()],
        });
    }
    if let Some(m) = mask {
        if m.len() != gt.width() * gt.height() {
            return Err(invalid(format!("mask has {} entries, flow has {}", m.len(), gt.width() * gt.height())));
        }
    }
    Ok(())
}

/// Per-pixel endpoint errors restricted to `mask`.
fn endpoint_errors<'a>(
    pred: &'a FlowField,
    gt: &'a FlowField,
    mask: Option<&'a [bool]>,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    (0..gt.width() * gt.height())
        .filter(move |&p| mask.map_or(true, |m| m[p]))
        .map(move |p| {
            let du = f64::from(pred.u()[p]) - f64::from(gt.u()[p]);
            let dv = f64::from(pred.v()[p]) - f64::from(gt.v()[p]);
            let g = f64::from(gt.u()[p]).hypot(f64::from(gt.v()[p]));
            (du.hypot(dv), g)
        })
}

/// Mean endpoint error over the pixels selected by `mask` (all if `None`).
pub fn epe(pred: &FlowField, gt: &FlowField, mask: Option<&[bool]>) -> Result<f32> {
    check_aligned(pred, gt, mask)?;
    let (sum, n) = endpoint_errors(pred, gt, mask).fold((0.0, 0usize), |(s, n), (e, _)| (s + e, n + 1));
    if n == 0 {
        return Err(invalid("epe over an empty mask"));
    }
    Ok((sum / n as f64) as f32)
}

/// Percentage of selected pixels whose endpoint error is at least 3 px and
/// at least 5% of the ground-truth magnitude.
pub fn fl_all(pred: &FlowField, gt: &FlowField, mask: Option<&[bool]>) -> Result<f32> {
    check_aligned(pred, gt, mask)?;
    let (bad, n) = endpoint_errors(pred, gt, mask).fold((0usize, 0usize), |(b, n), (e, g)| {
        let outlier = e >= 3.0 && e >= 0.05 * g;
        (b + usize::from(outlier), n + 1)
    });
    if n == 0 {
        return Err(invalid("fl_all over an empty mask"));
    }
    Ok((100.0 * bad as f64 / n as f64) as f32)
}

/// Number of thresholds `τ = k / 255`, `k = 1..=255`.
pub const F_MEASURE_STEPS: usize = 255;

/// Pooled confusion counts for the max F-measure over many frames.
///
/// The occlusion score is `1 − O`; a pixel is predicted occluded at
/// threshold `τ` when its score is at least `τ`. Ground truth marks
/// occluded pixels with values below 0.5.
#[derive(Clone, Debug)]
pub struct FMeasure {
    /// Pixels whose score reaches threshold `k` but not `k + 1`.
    occluded: [u64; F_MEASURE_STEPS + 1],
    visible: [u64; F_MEASURE_STEPS + 1],
}

impl Default for FMeasure {
    fn default() -> Self {
        FMeasure {
            occluded: [0; F_MEASURE_STEPS + 1],
            visible: [0; F_MEASURE_STEPS + 1],
        }
    }
}

fn threshold(k: usize) -> f32 {
    k as f32 / F_MEASURE_STEPS as f32
}

/// Largest `k` with `score ≥ k / 255`.
fn bin(score: f32) -> usize {
    let mut k = (score.clamp(0.0, 1.0) * F_MEASURE_STEPS as f32).floor() as usize;
    k = k.min(F_MEASURE_STEPS);
    while k < F_MEASURE_STEPS && score >= threshold(k + 1) {
        k += 1;
    }
    while k > 0 && score < threshold(k) {
        k -= 1;
    }
    k
}

impl FMeasure {
    pub fn add(&mut self, pred: &OcclusionMap, gt: &OcclusionMap) -> Result<()> {
        if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
            return Err(FlowError::ShapeMismatch {
                op: "occlusion_f_measure",
                lhs: vec![pred.height(), pred.width()],
                rhs: vec![gt.height(), gt.width()],
            });
        }
        for (&o, &g) in pred.data().iter().zip(gt.data()) {
            let k = bin(1.0 - o);
            if g < 0.5 {
                self.occluded[k] += 1;
            } else {
                self.visible[k] += 1;
            }
        }
        Ok(())
    }

    /// Maximum F over thresholds, or `None` if no ground-truth pixel is occluded.
    pub fn max_f(&self) -> Option<f32> {
        let positives: u64 = self.occluded.iter().sum();
        if positives == 0 {
            log::warn!("occlusion F-measure undefined: ground truth has no occluded pixels");
            return None;
        }
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut best = 0.0f64;
        for k in (1..=F_MEASURE_STEPS).rev() {
            tp += self.occluded[k];
            fp += self.visible[k];
            let fn_ = positives - tp;
            if tp > 0 {
                let f = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
                best = best.max(f);
            }
        }
        Some(best as f32)
    }
}

/// Max F-measure of one predicted occlusion map against binary ground truth.
pub fn occlusion_f_measure(pred: &OcclusionMap, gt: &OcclusionMap) -> Result<Option<f32>> {
    let mut acc = FMeasure::default();
    acc.add(pred, gt)?;
    Ok(acc.max_f())
}
