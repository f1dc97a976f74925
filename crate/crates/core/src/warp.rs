//! Forward and backward warping.
//!
//! Forward warping splats every pixel of the second frame along the backward
//! flow `F21`; the accumulated weight is the *range map* `V` and
//! `O = min(1, V)` marks the pixels of the first frame that are visible in
//! the second (1) or occluded (0).
//!
//! Backward warping reconstructs the first frame by sampling the second at
//! `p + F12(p)`. Besides the usual four-neighbour bilinear gather, an
//! enlarged-search variant looks for the best-matching pixel in a window
//! around the proposal and interpolates from a stencil mirrored around the
//! proposal, so the flow gradient points towards that match.
//!
//! On a [`Tape`], images are `(n, c, h, w)` and flows `(n, 2, h, w)` with
//! channel 0 = horizontal (positive right) and 1 = vertical (positive down),
//! both in pixels.

use crate::error::{invalid, FlowError, Result};
use crate::tensor::{Backward, Tape, Tensor, Var};

/// A dense displacement field for one image, stored as planar `[u, v]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            data: vec![0.0; 2 * width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Self {
        let mut flow = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                flow.set(x, y, f(x, y));
            }
        }
        flow
    }

    /// Builds a field from separate row-major `u` and `v` planes.
    pub fn from_planes(width: usize, height: usize, u: &[f32], v: &[f32]) -> Result<Self> {
        if u.len() != width * height || v.len() != width * height {
            return Err(invalid("flow planes do not match the field size"));
        }
        let mut data = u.to_vec();
        data.extend_from_slice(v);
        Ok(FlowField { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.data[i], self.data[self.width * self.height + i])
    }

    pub fn set(&mut self, x: usize, y: usize, (u, v): (f32, f32)) {
        let i = y * self.width + x;
        let plane = self.width * self.height;
        self.data[i] = u;
        self.data[plane + i] = v;
    }

    pub fn u(&self) -> &[f32] {
        &self.data[..self.width * self.height]
    }

    pub fn v(&self) -> &[f32] {
        &self.data[self.width * self.height..]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn magnitude(&self) -> Vec<f32> {
        self.u().iter().zip(self.v()).map(|(u, v)| u.hypot(*v)).collect()
    }

    /// As a `(1, 2, h, w)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 2, self.height, self.width], self.data.clone()).expect("flow layout")
    }

    /// Extracts batch element `n` of a `(n, 2, h, w)` tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        if c != 2 {
            return Err(invalid(format!("flow tensor needs 2 channels, got {c}")));
        }
        Ok(FlowField {
            width: w,
            height: h,
            data: t.batch(n)?.into_data(),
        })
    }

    /// Mirrors left-right; horizontal motion changes sign.
    pub fn hflip(&self) -> Self {
        let (w, h) = (self.width, self.height);
        FlowField::from_fn(w, h, |x, y| {
            let (u, v) = self.get(w - 1 - x, y);
            (-u, v)
        })
    }

    /// Mirrors top-bottom; vertical motion changes sign.
    pub fn vflip(&self) -> Self {
        let (w, h) = (self.width, self.height);
        FlowField::from_fn(w, h, |x, y| {
            let (u, v) = self.get(x, h - 1 - y);
            (u, -v)
        })
    }
}

/// Range map of a single backward flow field (no tape).
pub fn range_map_of(flow: &FlowField) -> Result<Vec<f32>> {
    if !flow.is_finite() {
        return Err(FlowError::NonFinite("range_map"));
    }
    let mut out = vec![0.0f32; flow.width * flow.height];
    splat(flow.u(), flow.v(), flow.width, flow.height, &mut out);
    Ok(out)
}

/// Occlusion map `min(1, V)` of a single backward flow field (no tape).
pub fn occlusion_map_of(flow: &FlowField) -> Result<Vec<f32>> {
    Ok(range_map_of(flow)?.into_iter().map(|v| v.min(1.0)).collect())
}

/// Bilinear splat footprint of a point: the cell origin and fractions.
#[inline]
fn cell(px: f32, py: f32) -> (isize, isize, f32, f32) {
    let x0 = px.floor();
    let y0 = py.floor();
    (x0 as isize, y0 as isize, px - x0, py - y0)
}

#[inline]
fn inside(x: isize, y: isize, w: usize, h: usize) -> bool {
    x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h
}

fn splat(u: &[f32], v: &[f32], w: usize, h: usize, out: &mut [f32]) {
    for j in 0..h {
        for i in 0..w {
            let k = j * w + i;
            let (x0, y0, fx, fy) = cell(i as f32 + u[k], j as f32 + v[k]);
            let taps = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1, y0, fx * (1.0 - fy)),
                (x0, y0 + 1, (1.0 - fx) * fy),
                (x0 + 1, y0 + 1, fx * fy),
            ];
            for (x, y, wt) in taps {
                if inside(x, y, w, h) {
                    out[y as usize * w + x as usize] += wt;
                }
            }
        }
    }
}

struct RangeMapOp;

impl Backward for RangeMapOp {
    fn name(&self) -> &'static str {
        "range_map"
    }

    fn backward(
        &self,
        grad: &Tensor,
        inputs: &[&Tensor],
        _output: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let flow = inputs[0];
        let (n, _, h, w) = flow.dims4()?;
        let plane = h * w;
        let mut g = Tensor::zeros(flow.shape());
        for b in 0..n {
            let f = &flow.data()[b * 2 * plane..(b + 1) * 2 * plane];
            let gv = &grad.data()[b * plane..(b + 1) * plane];
            let gf = &mut g.data_mut()[b * 2 * plane..(b + 1) * 2 * plane];
            for j in 0..h {
                for i in 0..w {
                    let k = j * w + i;
                    let (x0, y0, fx, fy) = cell(i as f32 + f[k], j as f32 + f[plane + k]);
                    // (x, y, ∂weight/∂fx, ∂weight/∂fy)
                    let taps = [
                        (x0, y0, -(1.0 - fy), -(1.0 - fx)),
                        (x0 + 1, y0, 1.0 - fy, -fx),
                        (x0, y0 + 1, -fy, 1.0 - fx),
                        (x0 + 1, y0 + 1, fy, fx),
                    ];
                    let (mut du, mut dv) = (0.0f32, 0.0f32);
                    for (x, y, dx, dy) in taps {
                        if inside(x, y, w, h) {
                            let gt = gv[y as usize * w + x as usize];
                            du += gt * dx;
                            dv += gt * dy;
                        }
                    }
                    gf[k] = du;
                    gf[plane + k] = dv;
                }
            }
        }
        Ok(vec![Some(g)])
    }
}

/// Sampling stencil of one output pixel: two columns, two rows, the
/// interpolation fractions, and whether the coordinate was clamped.
#[derive(Clone, Copy, Debug)]
struct Stencil {
    xl: usize,
    xr: usize,
    yt: usize,
    yb: usize,
    fx: f32,
    fy: f32,
    free_x: bool,
    free_y: bool,
}

/// Flow-proposed sampling position, clamped to the image.
#[inline]
fn proposal(x: usize, y: usize, u: f32, v: f32, w: usize, h: usize) -> (f32, f32, bool, bool) {
    let px = x as f32 + u;
    let py = y as f32 + v;
    let max_x = (w - 1) as f32;
    let max_y = (h - 1) as f32;
    let cx = px.clamp(0.0, max_x);
    let cy = py.clamp(0.0, max_y);
    (cx, cy, cx == px && px < max_x, cy == py && py < max_y)
}

/// The pair of grid lines mirrored around the unit cell `[c0, c0 + 1]` that
/// contains the proposal, such that one of them is `cand`.
#[inline]
fn mirrored(c0: isize, cand: isize, len: usize) -> (usize, usize) {
    let other = 2 * c0 + 1 - cand;
    let lo = cand.min(other).clamp(0, len as isize - 1) as usize;
    let hi = cand.max(other).clamp(0, len as isize - 1) as usize;
    (lo, hi)
}

fn stencil(x: usize, y: usize, u: f32, v: f32, w: usize, h: usize, cand: Option<(isize, isize)>) -> Stencil {
    let (cx, cy, free_x, free_y) = proposal(x, y, u, v, w, h);
    let (x0, y0, fx, fy) = cell(cx, cy);
    let (ax, ay) = cand.unwrap_or((x0, y0));
    let (xl, xr) = mirrored(x0, ax, w);
    let (yt, yb) = mirrored(y0, ay, h);
    Stencil {
        xl,
        xr,
        yt,
        yb,
        fx,
        fy,
        free_x,
        free_y,
    }
}

/// Integer grid candidate per output pixel chosen by the enlarged search.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidates {
    shape: (usize, usize, usize),
    points: Vec<(isize, isize)>,
}

impl Candidates {
    /// Candidate for batch element `n` at output pixel `(x, y)`.
    pub fn get(&self, n: usize, x: usize, y: usize) -> (isize, isize) {
        let (_, h, w) = self.shape;
        self.points[(n * h + y) * w + x]
    }
}

/// For every output pixel, searches the `(2·radius+1)²` window around the
/// rounded proposal for the in-image pixel of `image` closest in summed
/// absolute intensity to `target` at that output pixel. Ties go to the
/// candidate nearest the proposal, then to row-major order.
pub fn search_candidates(image: &Tensor, target: &Tensor, flow: &Tensor, radius: usize) -> Result<Candidates> {
    if radius < 1 {
        return Err(invalid("enlarged search radius must be at least 1"));
    }
    let (n, c, h, w) = check_warp_shapes(image, flow)?;
    if target.shape() != image.shape() {
        return Err(FlowError::ShapeMismatch {
            op: "backward_warp_enlarged",
            lhs: image.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let plane = h * w;
    let r = radius as isize;
    let mut points = Vec::with_capacity(n * plane);
    for b in 0..n {
        let img = &image.data()[b * c * plane..(b + 1) * c * plane];
        let tgt = &target.data()[b * c * plane..(b + 1) * c * plane];
        let f = &flow.data()[b * 2 * plane..(b + 1) * 2 * plane];
        for y in 0..h {
            for x in 0..w {
                let k = y * w + x;
                let (cx, cy, _, _) = proposal(x, y, f[k], f[plane + k], w, h);
                let (rx, ry) = (cx.round() as isize, cy.round() as isize);
                let mut best = (cx.floor() as isize, cy.floor() as isize);
                let mut best_key = (f32::INFINITY, f32::INFINITY);
                for sy in ry - r..=ry + r {
                    for sx in rx - r..=rx + r {
                        if !inside(sx, sy, w, h) {
                            continue;
                        }
                        let s = sy as usize * w + sx as usize;
                        let cost: f32 = (0..c).map(|ch| (img[ch * plane + s] - tgt[ch * plane + k]).abs()).sum();
                        let dist = (sx as f32 - cx).powi(2) + (sy as f32 - cy).powi(2);
                        // strict comparison keeps the earlier (row-major) candidate on exact ties
                        if cost < best_key.0 || (cost == best_key.0 && dist < best_key.1) {
                            best_key = (cost, dist);
                            best = (sx, sy);
                        }
                    }
                }
                points.push(best);
            }
        }
    }
    Ok(Candidates {
        shape: (n, h, w),
        points,
    })
}

fn check_warp_shapes(image: &Tensor, flow: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = image.dims4()?;
    let (fn_, fc, fh, fw) = flow.dims4()?;
    if (fn_, fc, fh, fw) != (n, 2, h, w) {
        return Err(FlowError::ShapeMismatch {
            op: "backward_warp",
            lhs: image.shape().to_vec(),
            rhs: flow.shape().to_vec(),
        });
    }
    Ok((n, c, h, w))
}

struct StencilWarp {
    channels: usize,
    stencils: Vec<Stencil>,
}

impl StencilWarp {
    fn build(image: &Tensor, flow: &Tensor, cands: Option<&Candidates>) -> Result<(StencilWarp, Tensor)> {
        let (n, c, h, w) = check_warp_shapes(image, flow)?;
        if let Some(cd) = cands {
            if cd.shape != (n, h, w) {
                return Err(invalid("candidate grid does not match the warp output"));
            }
        }
        let plane = h * w;
        let mut stencils = Vec::with_capacity(n * plane);
        let mut out = Tensor::zeros(image.shape());
        for b in 0..n {
            let f = &flow.data()[b * 2 * plane..(b + 1) * 2 * plane];
            let img = &image.data()[b * c * plane..(b + 1) * c * plane];
            let dst = &mut out.data_mut()[b * c * plane..(b + 1) * c * plane];
            for y in 0..h {
                for x in 0..w {
                    let k = y * w + x;
                    let cand = cands.map(|cd| cd.get(b, x, y));
                    let s = stencil(x, y, f[k], f[plane + k], w, h, cand);
                    for ch in 0..c {
                        let p = &img[ch * plane..(ch + 1) * plane];
                        let top = (1.0 - s.fx) * p[s.yt * w + s.xl] + s.fx * p[s.yt * w + s.xr];
                        let bot = (1.0 - s.fx) * p[s.yb * w + s.xl] + s.fx * p[s.yb * w + s.xr];
                        dst[ch * plane + k] = (1.0 - s.fy) * top + s.fy * bot;
                    }
                    stencils.push(s);
                }
            }
        }
        Ok((StencilWarp { channels: c, stencils }, out))
    }
}

impl Backward for StencilWarp {
    fn name(&self) -> &'static str {
        "backward_warp"
    }

    fn backward(
        &self,
        grad: &Tensor,
        inputs: &[&Tensor],
        _output: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let image = inputs[0];
        let (n, c, h, w) = image.dims4()?;
        debug_assert_eq!(c, self.channels);
        let plane = h * w;
        let mut gi = needs[0].then(|| Tensor::zeros(image.shape()));
        let mut gf = needs[1].then(|| Tensor::zeros(inputs[1].shape()));
        for b in 0..n {
            let img = &image.data()[b * c * plane..(b + 1) * c * plane];
            let g = &grad.data()[b * c * plane..(b + 1) * c * plane];
            for k in 0..plane {
                let s = self.stencils[b * plane + k];
                let idx = [
                    s.yt * w + s.xl,
                    s.yt * w + s.xr,
                    s.yb * w + s.xl,
                    s.yb * w + s.xr,
                ];
                let wts = [
                    (1.0 - s.fx) * (1.0 - s.fy),
                    s.fx * (1.0 - s.fy),
                    (1.0 - s.fx) * s.fy,
                    s.fx * s.fy,
                ];
                let (mut du, mut dv) = (0.0f32, 0.0f32);
                for ch in 0..c {
                    let go = g[ch * plane + k];
                    let p = &img[ch * plane..(ch + 1) * plane];
                    if let Some(gi) = gi.as_mut() {
                        let dst = &mut gi.data_mut()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                        for (i, wt) in idx.iter().zip(wts) {
                            dst[*i] += go * wt;
                        }
                    }
                    let (tl, tr, bl, br) = (p[idx[0]], p[idx[1]], p[idx[2]], p[idx[3]]);
                    du += go * ((1.0 - s.fy) * (tr - tl) + s.fy * (br - bl));
                    dv += go * ((1.0 - s.fx) * (bl - tl) + s.fx * (br - tr));
                }
                if let Some(gf) = gf.as_mut() {
                    let dst = &mut gf.data_mut()[b * 2 * plane..(b + 1) * 2 * plane];
                    dst[k] = if s.free_x { du } else { 0.0 };
                    dst[plane + k] = if s.free_y { dv } else { 0.0 };
                }
            }
        }
        Ok(vec![gi, gf])
    }
}

impl Tape {
    /// Range map `V` of backward flows `(n, 2, h, w)`, shaped `(n, 1, h, w)`.
    /// Splats landing outside the image are discarded.
    pub fn range_map(&mut self, flow_backward: Var) -> Result<Var> {
        let f = self.value(flow_backward);
        let (n, c, h, w) = f.dims4()?;
        if c != 2 {
            return Err(invalid(format!("range_map needs a 2-channel flow, got {c}")));
        }
        if !f.is_finite() {
            return Err(FlowError::NonFinite("range_map"));
        }
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, 1, h, w]);
        for b in 0..n {
            let fb = &f.data()[b * 2 * plane..(b + 1) * 2 * plane];
            splat(&fb[..plane], &fb[plane..], w, h, &mut out.data_mut()[b * plane..(b + 1) * plane]);
        }
        self.record(out, &[flow_backward], RangeMapOp)
    }

    /// Occlusion map `O = min(1, V)`; 0 = occluded, 1 = visible.
    pub fn occlusion_map(&mut self, range: Var) -> Result<Var> {
        if self.value(range).data().iter().any(|&v| v < 0.0) {
            return Err(invalid("range map must be non-negative"));
        }
        self.min_scalar(range, 1.0)
    }

    /// Bilinear backward warp: samples `image` at `p + flow(p)`, clamping the
    /// sampling position to the image.
    pub fn backward_warp(&mut self, image: Var, flow: Var) -> Result<Var> {
        let (op, out) = StencilWarp::build(self.value(image), self.value(flow), None)?;
        self.record(out, &[image, flow], op)
    }

    /// Backward warp with an enlarged search window of half-width `radius`
    /// around each proposal; `target` is the frame being reconstructed.
    pub fn backward_warp_enlarged(&mut self, image: Var, target: Var, flow: Var, radius: usize) -> Result<Var> {
        let cands = search_candidates(self.value(image), self.value(target), self.value(flow), radius)?;
        self.backward_warp_with_candidates(image, flow, &cands)
    }

    /// Stencil warp for a fixed set of search results; the candidate choice
    /// is treated as a constant.
    pub fn backward_warp_with_candidates(&mut self, image: Var, flow: Var, cands: &Candidates) -> Result<Var> {
        let (op, out) = StencilWarp::build(self.value(image), self.value(flow), Some(cands))?;
        self.record(out, &[image, flow], op)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, uniform_tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct evaluation of the double sum defining the range map.
    fn brute_range_map(u: &[f32], v: &[f32], w: usize, h: usize) -> Vec<f32> {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0f64;
                for j in 0..h {
                    for i in 0..w {
                        let k = j * w + i;
                        let px = i as f64 + f64::from(u[k]);
                        let py = j as f64 + f64::from(v[k]);
                        s += (1.0 - (x as f64 - px).abs()).max(0.0) * (1.0 - (y as f64 - py).abs()).max(0.0);
                    }
                }
                out[y * w + x] = s as f32;
            }
        }
        out
    }

    /// Per-pixel bilinear sampler with coordinate clamping.
    fn brute_sample(img: &[f32], w: usize, h: usize, px: f32, py: f32) -> f32 {
        let px = px.clamp(0.0, (w - 1) as f32);
        let py = py.clamp(0.0, (h - 1) as f32);
        let mut s = 0.0;
        for y in 0..h {
            for x in 0..w {
                let wt = (1.0 - (x as f32 - px).abs()).max(0.0) * (1.0 - (y as f32 - py).abs()).max(0.0);
                s += wt * img[y * w + x];
            }
        }
        s
    }

    fn flow_tensor(w: usize, h: usize, u: &[f32], v: &[f32]) -> Tensor {
        let mut d = u.to_vec();
        d.extend_from_slice(v);
        Tensor::new(&[1, 2, h, w], d).unwrap()
    }

    #[test]
    fn toy_occlusion_example() {
        let mut tape = Tape::new();
        let f = tape.constant(flow_tensor(2, 2, &[0.0, -1.0, 0.0, 0.0], &[0.0; 4]));
        let v = tape.range_map(f).unwrap();
        assert_eq!(tape.value(v).data(), &[2.0, 0.0, 1.0, 1.0]);
        let o = tape.occlusion_map(v).unwrap();
        assert_eq!(tape.value(o).data(), &[1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_flow_range_is_one() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[2, 2, 5, 7]));
        let v = tape.range_map(f).unwrap();
        assert!(tape.value(v).data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn half_pixel_splat() {
        let u = [0.5, 0.0];
        let v = [0.0, 0.0];
        let brute = brute_range_map(&u, &v, 2, 1);
        assert_eq!(brute, vec![0.5, 1.5]);
        let mut tape = Tape::new();
        let f = tape.constant(flow_tensor(2, 1, &u, &v));
        let r = tape.range_map(f).unwrap();
        assert_eq!(tape.value(r).data(), brute.as_slice());
    }

    #[test]
    fn range_map_matches_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (w, h) = (6, 5);
            let u: Vec<f32> = (0..w * h).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let v: Vec<f32> = (0..w * h).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let flow = FlowField::from_planes(w, h, &u, &v).unwrap();
            let fast = range_map_of(&flow).unwrap();
            let brute = brute_range_map(&u, &v, w, h);
            for (a, b) in fast.iter().zip(&brute) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn occlusion_map_errors_and_passthrough() {
        let mut tape = Tape::new();
        let neg = tape.constant(Tensor::new(&[1], vec![-0.1]).unwrap());
        assert!(tape.occlusion_map(neg).is_err());
        let low = tape.constant(Tensor::new(&[1], vec![0.3]).unwrap());
        let o = tape.occlusion_map(low).unwrap();
        assert_eq!(tape.value(o).data(), &[0.3]);
        let bad = FlowField::from_planes(1, 1, &[f32::NAN], &[0.0]).unwrap();
        assert!(range_map_of(&bad).is_err());
    }

    #[test]
    fn zero_flow_warp_is_bitwise_identity() {
        let img = uniform_tensor(&[2, 3, 6, 5], 4);
        let mut tape = Tape::new();
        let i = tape.constant(img.clone());
        let f = tape.constant(Tensor::zeros(&[2, 2, 6, 5]));
        let out = tape.backward_warp(i, f).unwrap();
        assert!(tape.value(out).data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn two_pixel_warp_cases() {
        let img = Tensor::new(&[1, 1, 1, 2], vec![5.0, 9.0]).unwrap();
        for (u, expected) in [([-1.0, 0.0], [5.0, 9.0]), ([-1.0, -1.0], [5.0, 5.0])] {
            let brute: Vec<f32> = (0..2).map(|x| brute_sample(img.data(), 2, 1, x as f32 + u[x], 0.0)).collect();
            assert_eq!(brute, expected);
            let mut tape = Tape::new();
            let i = tape.constant(img.clone());
            let f = tape.constant(flow_tensor(2, 1, &u, &[0.0, 0.0]));
            let out = tape.backward_warp(i, f).unwrap();
            assert_eq!(tape.value(out).data(), &expected);
        }
    }

    #[test]
    fn half_pixel_shift_gives_midpoints() {
        let ramp: Vec<f32> = (0..=10).map(|x| x as f32).collect();
        let img = Tensor::new(&[1, 1, 1, 11], ramp).unwrap();
        let mut tape = Tape::new();
        let i = tape.constant(img);
        let f = tape.constant(flow_tensor(11, 1, &[0.5; 11], &[0.0; 11]));
        let out = tape.backward_warp(i, f).unwrap();
        for x in 0..10 {
            assert_eq!(tape.value(out).data()[x], x as f32 + 0.5);
        }
    }

    #[test]
    fn warp_matches_brute_sampler() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (w, h) = (7, 6);
        let img = uniform_tensor(&[1, 1, h, w], 2);
        let u: Vec<f32> = (0..w * h).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let v: Vec<f32> = (0..w * h).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let mut tape = Tape::new();
        let i = tape.constant(img.clone());
        let f = tape.constant(flow_tensor(w, h, &u, &v));
        let out = tape.backward_warp(i, f).unwrap();
        for y in 0..h {
            for x in 0..w {
                let k = y * w + x;
                let b = brute_sample(img.data(), w, h, x as f32 + u[k], y as f32 + v[k]);
                assert!((tape.value(out).data()[k] - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn enlarged_reduces_to_bilinear_near_proposal() {
        // the target equals the image, so every proposal's best match is within its own cell
        let (w, h) = (8, 8);
        let img = Tensor::from_fn(&[1, 1, h, w], |k| ((k % w) * 10 + (k / w)) as f32);
        let flow = Tensor::full(&[1, 2, h, w], 0.0);
        let mut tape = Tape::new();
        let i = tape.constant(img.clone());
        let t = tape.constant(img);
        let f = tape.constant(flow);
        let a = tape.backward_warp(i, f).unwrap();
        let b = tape.backward_warp_enlarged(i, t, f, 3).unwrap();
        assert_eq!(tape.value(a), tape.value(b));

        // fractional flow whose best candidate falls in the 2×2 cell
        let img = uniform_tensor(&[1, 2, h, w], 8);
        let flow = Tensor::full(&[1, 2, h, w], 0.3);
        let mut tape = Tape::new();
        let i = tape.constant(img.clone());
        let f = tape.constant(flow.clone());
        let plain = tape.backward_warp(i, f).unwrap();
        // the target is the plain warp at each pixel's nearest neighbour, which lies in-cell
        let tgt = Tensor::from_fn(img.shape(), |k| {
            let (c, y, x) = (k / 64, (k / 8) % 8, k % 8);
            let (sx, sy) = ((x as f32 + 0.3).round() as usize, (y as f32 + 0.3).round() as usize);
            img.data()[c * 64 + sy.min(7) * 8 + sx.min(7)]
        });
        let t = tape.constant(tgt);
        let enl = tape.backward_warp_enlarged(i, t, f, 2).unwrap();
        assert_eq!(tape.value(plain), tape.value(enl));
    }

    #[test]
    fn integer_flow_gathers_exactly() {
        let img = uniform_tensor(&[1, 3, 6, 6], 1);
        let flow = Tensor::from_fn(&[1, 2, 6, 6], |k| if k < 36 { 1.0 } else { -1.0 });
        let mut tape = Tape::new();
        let (i, f) = (tape.constant(img.clone()), tape.constant(flow));
        // the frame being reconstructed is the exact shifted copy
        let t = tape.backward_warp(i, f).unwrap();
        let out = tape.backward_warp_enlarged(i, t, f, 1).unwrap();
        let out = tape.value(out);
        for c in 0..3 {
            for y in 1..6 {
                for x in 0..5 {
                    let k = c * 36 + y * 6 + x;
                    assert_eq!(out.data()[k], img.data()[c * 36 + (y - 1) * 6 + x + 1]);
                }
            }
        }
        assert_eq!(out, tape.value(t));
    }

    #[test]
    fn radius_zero_rejected() {
        let img = Tensor::zeros(&[1, 1, 4, 4]);
        let flow = Tensor::zeros(&[1, 2, 4, 4]);
        assert!(search_candidates(&img, &img, &flow, 0).is_err());
    }

    #[test]
    fn enlarged_gradient_points_to_distant_match() {
        // 1-D ramp; the proposal sits at x2 = 3.4 but the target intensity lives at x = 6
        let w = 12;
        let ramp: Vec<f32> = (0..w).map(|x| x as f32 * 0.1).collect();
        let img = Tensor::new(&[1, 1, 1, w], ramp.clone()).unwrap();
        let mut target = vec![0.0; w];
        target[3] = ramp[6];
        let target = Tensor::new(&[1, 1, 1, w], target).unwrap();
        let mut u = vec![0.0; w];
        u[3] = 0.4;
        let flow = flow_tensor(w, 1, &u, &vec![0.0; w]);

        let cands = search_candidates(&img, &target, &flow, 4).unwrap();
        assert_eq!(cands.get(0, 3, 0), (6, 0));
        // plain bilinear cannot see it
        let plain = search_candidates(&img, &target, &flow, 1).unwrap();
        assert_eq!(plain.get(0, 3, 0), (4, 0));

        let loss = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
            let i = tape.constant(img.clone());
            let t = tape.constant(target.clone());
            let warped = tape.backward_warp_with_candidates(i, v[0], &cands)?;
            let d = tape.sub(warped, t)?;
            let d = tape.narrow(d, 3, 3, 1)?;
            tape.mul(d, d)
        };
        let mut tape = Tape::new();
        let f = tape.param(flow.clone());
        let l = loss(&mut tape, &[f]).unwrap();
        let l = tape.sum_all(l).unwrap();
        let g = tape.backward(l).unwrap();
        let du = g.get(f).unwrap().data()[3];
        assert!(du < 0.0, "descent must move the proposal rightwards, got {du}");
        let err = check_gradients(loss, &[flow], 1e-3).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    fn random_flow(shape: &[usize], seed: u64, max: f32) -> Tensor {
        // integer part in [-max, max], fractional part in [0.1, 0.9]
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-max..max).floor() + rng.gen_range(0.1..0.9))
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let img = uniform_tensor(&[1, 2, 6, 6], seed);
            let tgt = uniform_tensor(&[1, 2, 6, 6], seed + 50);
            let flow = random_flow(&[1, 2, 6, 6], seed, 2.0);
            let err = check_gradients(|t, v| t.range_map(v[0]), &[flow.clone()], 1e-3).unwrap();
            assert!(err < 1e-3, "range_map seed {seed}: {err}");
            let err = check_gradients(|t, v| t.backward_warp(v[0], v[1]), &[img.clone(), flow.clone()], 1e-3).unwrap();
            assert!(err < 1e-3, "backward_warp seed {seed}: {err}");
            let cands = search_candidates(&img, &tgt, &flow, 3).unwrap();
            let err = check_gradients(
                |t, v| t.backward_warp_with_candidates(v[0], v[1], &cands),
                &[img.clone(), flow.clone()],
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-3, "enlarged seed {seed}: {err}");
        }
    }

    #[test]
    fn flow_field_flips_are_involutions() {
        let f = FlowField::from_fn(4, 3, |x, y| (x as f32, y as f32 * 2.0));
        assert_eq!(f.hflip().hflip(), f);
        assert_eq!(f.vflip().vflip(), f);
        assert_eq!(f.hflip().get(3, 1), (-0.0, 2.0));
        assert_eq!(FlowField::from_tensor(&f.to_tensor(), 0).unwrap(), f);
    }
}
