//! Flow visualisation on the Middlebury colour wheel.

use std::f32::consts::PI;

use crate::tensor::Tensor;
use crate::warp::FlowField;

const SEGMENTS: [(usize, [f32; 3], [f32; 3]); 6] = [
    // (length, start colour, per-step delta); colours in 0..=255
    (15, [255.0, 0.0, 0.0], [0.0, 255.0, 0.0]),     // red → yellow
    (6, [255.0, 255.0, 0.0], [-255.0, 0.0, 0.0]),   // yellow → green
    (4, [0.0, 255.0, 0.0], [0.0, 0.0, 255.0]),      // green → cyan
    (11, [0.0, 255.0, 255.0], [0.0, -255.0, 0.0]),  // cyan → blue
    (13, [0.0, 0.0, 255.0], [255.0, 0.0, 0.0]),     // blue → magenta
    (6, [255.0, 0.0, 255.0], [0.0, 0.0, -255.0]),   // magenta → red
];

fn wheel() -> Vec<[f32; 3]> {
    let mut cols = Vec::with_capacity(55);
    for (len, start, delta) in SEGMENTS {
        for i in 0..len {
            let f = i as f32 / len as f32;
            cols.push([
                (start[0] + f * delta[0]) / 255.0,
                (start[1] + f * delta[1]) / 255.0,
                (start[2] + f * delta[2]) / 255.0,
            ]);
        }
    }
    cols
}

/// `[3, H, W]` RGB rendering in `[0, 1]`. Hue encodes direction and
/// saturation `|f| / max_mag`; zero flow is white and vectors beyond
/// `max_mag` are darkened. Without `max_mag` the 99th percentile of the
/// magnitudes is used.
pub fn flow_to_color(flow: &FlowField, max_mag: Option<f32>) -> Tensor {
    let (w, h) = (flow.width(), flow.height());
    let mags = flow.magnitude();
    let max_mag = max_mag.unwrap_or_else(|| {
        let mut sorted: Vec<f32> = mags.iter().copied().filter(|m| m.is_finite()).collect();
        sorted.sort_by(f32::total_cmp);
        if sorted.is_empty() {
            return 0.0;
        }
        let idx = ((sorted.len() - 1) as f32 * 0.99).round() as usize;
        let p = sorted[idx];
        if p > 0.0 {
            p
        } else {
            sorted[sorted.len() - 1]
        }
    });
    let cols = wheel();
    let n = cols.len();
    let plane = w * h;
    let mut out = Tensor::ones(&[3, h, w]);
    if !(max_mag > 0.0) {
        return out;
    }
    let data = out.data_mut();
    for p in 0..plane {
        let (u, v) = (flow.u()[p], flow.v()[p]);
        if !(u.is_finite() && v.is_finite()) {
            data[p] = 0.0;
            data[plane + p] = 0.0;
            data[2 * plane + p] = 0.0;
            continue;
        }
        let rad = mags[p] / max_mag;
        let mut a = (-v).atan2(-u) / PI;
        if a >= 1.0 {
            a = -1.0;
        }
        let fk = (a + 1.0) / 2.0 * n as f32;
        let k0 = (fk.floor() as usize) % n;
        let k1 = (k0 + 1) % n;
        let f = fk - fk.floor();
        for c in 0..3 {
            let col = (1.0 - f) * cols[k0][c] + f * cols[k1][c];
            let col = if rad <= 1.0 { 1.0 - rad * (1.0 - col) } else { col * 0.75 };
            data[c * plane + p] = col;
        }
    }
    out
}
