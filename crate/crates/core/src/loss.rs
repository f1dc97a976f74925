//! Occlusion-masked photometric losses, edge-aware smoothness, and their
//! weighted multi-scale combination.

use crate::error::{invalid, FlowError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// ε² of the Charbonnier penalty `Ψ(s) = √(s² + 0.001²)`.
pub const CHARBONNIER_EPS_SQ: f32 = 1e-6;

/// `Ψ(0)`: the smallest value any normalised loss term can take.
pub const CHARBONNIER_FLOOR: f32 = 0.001;

/// Term weights `(γ₁, γ₂, γ₃, γ₄)` and the edge sharpness `α`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub brightness: f32,
    pub gradient: f32,
    pub smooth1: f32,
    pub smooth2: f32,
    pub alpha: f32,
}

impl LossWeights {
    /// (1.0, 1.0, 10.0, 0.0, 10.0): the setting for synthetic chairs-like data.
    pub const CHAIRS: LossWeights = LossWeights {
        brightness: 1.0,
        gradient: 1.0,
        smooth1: 10.0,
        smooth2: 0.0,
        alpha: 10.0,
    };

    /// (0.03, 3.0, 0.0, 10.0, 10.0): the setting for driving footage.
    pub const KITTI: LossWeights = LossWeights {
        brightness: 0.03,
        gradient: 3.0,
        smooth1: 0.0,
        smooth2: 10.0,
        alpha: 10.0,
    };

    pub fn preset(name: &str) -> Option<LossWeights> {
        match name {
            "chairs" | "sintel" => Some(Self::CHAIRS),
            "kitti" => Some(Self::KITTI),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.brightness, self.gradient, self.smooth1, self.smooth2, self.alpha];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::CHAIRS
    }
}

/// Per-scale loss weights as a function of training progress `t ∈ [0, 1]`.
///
/// At `t = 0` all scales weigh the same. The weights move linearly to the
/// target profile by `t = ramp_end` and stay there: the finest scale gets
/// `finest`, the coarser ones share the rest geometrically with `ratio`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleSchedule {
    pub finest: f32,
    pub ratio: f32,
    pub ramp_end: f32,
}

impl Default for ScaleSchedule {
    fn default() -> Self {
        ScaleSchedule {
            finest: 0.7,
            ratio: 0.5,
            ramp_end: 0.5,
        }
    }
}

impl ScaleSchedule {
    /// Weights ordered coarse → fine, summing to 1.
    pub fn weights(&self, scales: usize, t: f32) -> Result<Vec<f32>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid(format!("training progress {t} outside [0, 1]")));
        }
        if scales == 0 {
            return Err(invalid("schedule needs at least one scale"));
        }
        if scales == 1 {
            return Ok(vec![1.0]);
        }
        let uniform = 1.0 / scales as f32;
        let mut target = vec![0.0f32; scales];
        target[scales - 1] = self.finest;
        // coarser scales, next-finest first, decaying by `ratio`
        let norm: f32 = (0..scales - 1).map(|k| self.ratio.powi(k as i32)).sum();
        for k in 0..scales - 1 {
            target[scales - 2 - k] = (1.0 - self.finest) * self.ratio.powi(k as i32) / norm;
        }
        let a = if self.ramp_end <= 0.0 { 1.0 } else { (t / self.ramp_end).min(1.0) };
        Ok(target.iter().map(|&w| (1.0 - a) * uniform + a * w).collect())
    }
}

/// `Ψ(s) = √(s² + 10⁻⁶)`, elementwise.
pub fn charbonnier(tape: &mut Tape, s: Var) -> Result<Var> {
    let sq = tape.mul(s, s)?;
    let shifted = tape.add_scalar(sq, CHARBONNIER_EPS_SQ)?;
    tape.sqrt(shifted)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhotometricMode {
    Brightness,
    Gradient,
}

/// Forward difference along axis 3 (x) or 2 (y): `a[i+1] − a[i]`.
fn forward_diff(tape: &mut Tape, a: Var, axis: usize) -> Result<Option<Var>> {
    let len = tape.shape(a)[axis];
    if len < 2 {
        return Ok(None);
    }
    let hi = tape.narrow(a, axis, 1, len - 1)?;
    let lo = tape.narrow(a, axis, 0, len - 1)?;
    tape.sub(hi, lo).map(Some)
}

/// Second difference along an axis: `a[i+1] − 2a[i] + a[i−1]` for interior `i`.
fn second_diff(tape: &mut Tape, a: Var, axis: usize) -> Result<Option<Var>> {
    let len = tape.shape(a)[axis];
    if len < 3 {
        return Ok(None);
    }
    let hi = tape.narrow(a, axis, 2, len - 2)?;
    let mid = tape.narrow(a, axis, 1, len - 2)?;
    let lo = tape.narrow(a, axis, 0, len - 2)?;
    let outer = tape.add(hi, lo)?;
    let mid2 = tape.mul_scalar(mid, 2.0)?;
    tape.sub(outer, mid2).map(Some)
}

/// Mean over the channel axis of an NCHW tensor, kept as a size-1 axis.
fn channel_mean(tape: &mut Tape, a: Var) -> Result<Var> {
    let shape = tape.shape(a).to_vec();
    let s = tape.reduce_sum(a, Some(&[1]))?;
    let s = tape.reshape(s, &[shape[0], 1, shape[2], shape[3]])?;
    tape.div_scalar(s, shape[1] as f32)
}

/// Per-pixel Charbonnier residual summed over channels, `Σ_c Ψ(a_c − b_c)`.
fn residual(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let p = charbonnier(tape, d)?;
    let (n, _, h, w) = tape.value(p).dims4()?;
    let s = tape.reduce_sum(p, Some(&[1]))?;
    tape.reshape(s, &[n, 1, h, w])
}

fn check_mask(tape: &Tape, image: Var, occ: Var) -> Result<()> {
    let (n, _, h, w) = tape.value(image).dims4()?;
    if tape.shape(occ) != [n, 1, h, w] {
        return Err(FlowError::ShapeMismatch {
            op: "photometric_loss",
            lhs: vec![n, 1, h, w],
            rhs: tape.shape(occ).to_vec(),
        });
    }
    Ok(())
}

/// Occlusion-masked mean of the Charbonnier photometric residual:
/// `Σ ρ·O / Σ O` with `ρ` the channel-summed penalty of the brightness
/// difference, or of the x and y forward-difference gradients taken
/// together (each masked by `O` at its left/top pixel).
pub fn photometric_loss(tape: &mut Tape, warped: Var, target: Var, occ: Var, mode: PhotometricMode) -> Result<Var> {
    if tape.shape(warped) != tape.shape(target) {
        return Err(FlowError::ShapeMismatch {
            op: "photometric_loss",
            lhs: tape.shape(warped).to_vec(),
            rhs: tape.shape(target).to_vec(),
        });
    }
    check_mask(tape, target, occ)?;
    let mut pairs: Vec<(Var, Var)> = Vec::with_capacity(2);
    match mode {
        PhotometricMode::Brightness => pairs.push((residual(tape, warped, target)?, occ)),
        PhotometricMode::Gradient => {
            for axis in [3, 2] {
                let (Some(gw), Some(gt)) = (forward_diff(tape, warped, axis)?, forward_diff(tape, target, axis)?) else {
                    continue;
                };
                let rho = residual(tape, gw, gt)?;
                let len = tape.shape(rho)[axis];
                let mask = tape.narrow(occ, axis, 0, len)?;
                pairs.push((rho, mask));
            }
            if pairs.is_empty() {
                return Err(invalid("image gradient loss needs at least 2 pixels along an axis"));
            }
        }
    }
    let mut num = None;
    let mut den = None;
    for (rho, mask) in pairs {
        let masked = tape.mul(rho, mask)?;
        let n = tape.sum_all(masked)?;
        let d = tape.sum_all(mask)?;
        num = Some(match num {
            Some(acc) => tape.add(acc, n)?,
            None => n,
        });
        den = Some(match den {
            Some(acc) => tape.add(acc, d)?,
            None => d,
        });
    }
    let (num, den) = (num.expect("non-empty"), den.expect("non-empty"));
    if tape.value(den).item()? <= 0.0 {
        return Err(FlowError::FullyOccluded);
    }
    tape.div(num, den)
}

/// Edge-aware smoothness `mean Ψ(|∂ᵏ_d F| · exp(−α |∂_d I|))` over both flow
/// components and both directions, `k = order ∈ {1, 2}`; `∂_d I` is the
/// channel mean of the absolute forward difference.
pub fn smoothness_loss(tape: &mut Tape, flow: Var, image: Var, order: u8, alpha: f32) -> Result<Var> {
    let (n, c, h, w) = tape.value(flow).dims4()?;
    let (ni, _, hi, wi) = tape.value(image).dims4()?;
    if c != 2 || (n, h, w) != (ni, hi, wi) {
        return Err(FlowError::ShapeMismatch {
            op: "smoothness_loss",
            lhs: tape.shape(flow).to_vec(),
            rhs: tape.shape(image).to_vec(),
        });
    }
    if !(1..=2).contains(&order) {
        return Err(invalid(format!("smoothness order must be 1 or 2, got {order}")));
    }
    let mut total = None;
    let mut count = 0usize;
    for axis in [3, 2] {
        let deriv = if order == 1 {
            forward_diff(tape, flow, axis)?
        } else {
            second_diff(tape, flow, axis)?
        };
        let Some(deriv) = deriv else { continue };
        let Some(di) = forward_diff(tape, image, axis)? else { continue };
        let di = tape.abs(di)?;
        let di = channel_mean(tape, di)?;
        let len = tape.shape(deriv)[axis];
        // second differences are centred one pixel in
        let di = tape.narrow(di, axis, (order - 1) as usize, len)?;
        let scaled = tape.mul_scalar(di, -alpha)?;
        let edge = tape.exp(scaled)?;
        let edge = tape.expand(edge, &tape.shape(deriv).to_vec())?;
        // Ψ is even, so Ψ(|x|·e) = Ψ(x·e) for e ≥ 0
        let weighted = tape.mul(deriv, edge)?;
        let pen = charbonnier(tape, weighted)?;
        count += tape.value(pen).numel();
        let s = tape.sum_all(pen)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| invalid("flow field too small for the smoothness stencil"))?;
    tape.div_scalar(total, count as f32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OcclusionHandling {
    /// Every pixel counts as visible.
    Off,
    /// `O` from the backward flow, cut off from the gradient graph.
    Detached,
    /// `O` from the backward flow, differentiated through.
    Differentiable,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub weights: LossWeights,
    /// Enlarged-search half-width; 0 selects plain bilinear warping.
    pub radius: usize,
    pub occlusion: OcclusionHandling,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            weights: LossWeights::default(),
            radius: 4,
            occlusion: OcclusionHandling::Detached,
        }
    }
}

/// Handles to a weighted loss and its four components.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub brightness: Var,
    pub gradient: Var,
    pub smooth1: Var,
    pub smooth2: Var,
    pub occlusion: Var,
}

/// Single-scale loss for reconstructing `i1` from `i2` with forward flow
/// `f12`, masked by the occlusion map of backward flow `f21`.
pub fn total_loss(tape: &mut Tape, i1: Var, i2: Var, f12: Var, f21: Var, opts: &LossOptions) -> Result<LossTerms> {
    opts.weights.validate()?;
    let (n, _, h, w) = tape.value(i1).dims4()?;
    let occlusion = match opts.occlusion {
        OcclusionHandling::Off => tape.constant(Tensor::ones(&[n, 1, h, w])),
        OcclusionHandling::Detached | OcclusionHandling::Differentiable => {
            let v = tape.range_map(f21)?;
            let o = tape.occlusion_map(v)?;
            if opts.occlusion == OcclusionHandling::Detached {
                tape.detach(o)
            } else {
                o
            }
        }
    };
    let warped = if opts.radius >= 1 {
        tape.backward_warp_enlarged(i2, i1, f12, opts.radius)?
    } else {
        tape.backward_warp(i2, f12)?
    };
    let brightness = photometric_loss(tape, warped, i1, occlusion, PhotometricMode::Brightness)?;
    let gradient = photometric_loss(tape, warped, i1, occlusion, PhotometricMode::Gradient)?;
    let smooth1 = smoothness_loss(tape, f12, i1, 1, opts.weights.alpha)?;
    let smooth2 = smoothness_loss(tape, f12, i1, 2, opts.weights.alpha)?;
    let ws = opts.weights;
    let parts = [
        (brightness, ws.brightness),
        (gradient, ws.gradient),
        (smooth1, ws.smooth1),
        (smooth2, ws.smooth2),
    ];
    let mut total = None;
    for (term, gamma) in parts {
        let t = tape.mul_scalar(term, gamma)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, t)?,
            None => t,
        });
    }
    Ok(LossTerms {
        total: total.expect("four terms"),
        brightness,
        gradient,
        smooth1,
        smooth2,
        occlusion,
    })
}

/// `Σ_s w_s(t) · L_s` over per-scale losses ordered coarse → fine.
pub fn multiscale_loss(tape: &mut Tape, losses: &[Var], schedule: &ScaleSchedule, t: f32) -> Result<Var> {
    let weights = schedule.weights(losses.len(), t)?;
    let mut total = None;
    for (&l, w) in losses.iter().zip(weights) {
        let s = tape.mul_scalar(l, w)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| invalid("multiscale loss of no scales"))
}
