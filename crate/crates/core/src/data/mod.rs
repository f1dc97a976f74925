//! Synthetic scenes, preprocessing, augmentation and file formats.
//!
//! Images are `[C, H, W]` tensors with values in `[0, 1]`.

mod color;
mod formats;
mod synth;

pub use color::flow_to_color;
pub use formats::{
    load_flo, load_image_png, load_kitti_png, load_occlusion_png, read_flo, read_image_png, read_kitti_png,
    read_manifest, read_occlusion_png, save_flo, save_image_png, save_kitti_png, save_occlusion_png, write_flo,
    write_image_png, write_kitti_png, write_manifest, write_occlusion_png, ManifestEntry, FLO_MAGIC,
};
pub use synth::{generate_batch, generate_sample, BackgroundMode, Layer, Scene, Shape, ShapesConfig, Texture, Wave};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;
use crate::warp::FlowField;

/// Per-pixel visibility of frame-1 pixels in frame 2 (1 visible, 0 occluded).
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl OcclusionMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(invalid(format!(
                "occlusion map of {width}×{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(OcclusionMap { width, height, data })
    }

    pub fn ones(width: usize, height: usize) -> Self {
        OcclusionMap {
            width,
            height,
            data: vec![1.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Fraction of pixels with value below 0.5.
    pub fn occluded_fraction(&self) -> f32 {
        let n = self.data.iter().filter(|&&v| v < 0.5).count();
        n as f32 / self.data.len().max(1) as f32
    }

    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        flip_plane(&mut out.data, self.width, self.height, true);
        out
    }

    pub fn vflip(&self) -> Self {
        let mut out = self.clone();
        flip_plane(&mut out.data, self.width, self.height, false);
        out
    }
}

/// An image pair with optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub i1: Tensor,
    pub i2: Tensor,
    /// Forward flow `I1 → I2`.
    pub gt_flow: Option<FlowField>,
    /// Visibility of `I1` pixels in `I2`.
    pub gt_occ: Option<OcclusionMap>,
    /// Backward flow `I2 → I1`.
    pub gt_flow_backward: Option<FlowField>,
    pub seed: u64,
}

impl Sample {
    pub fn without_gt(mut self) -> Self {
        self.gt_flow = None;
        self.gt_occ = None;
        self.gt_flow_backward = None;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augment {
    HFlip,
    VFlip,
    /// Exchange the frames. Ground truth is dropped.
    Swap,
}

pub fn augment(sample: &Sample, op: Augment) -> Sample {
    match op {
        Augment::HFlip => Sample {
            i1: flip_image(&sample.i1, true),
            i2: flip_image(&sample.i2, true),
            gt_flow: sample.gt_flow.as_ref().map(FlowField::hflip),
            gt_occ: sample.gt_occ.as_ref().map(OcclusionMap::hflip),
            gt_flow_backward: sample.gt_flow_backward.as_ref().map(FlowField::hflip),
            seed: sample.seed,
        },
        Augment::VFlip => Sample {
            i1: flip_image(&sample.i1, false),
            i2: flip_image(&sample.i2, false),
            gt_flow: sample.gt_flow.as_ref().map(FlowField::vflip),
            gt_occ: sample.gt_occ.as_ref().map(OcclusionMap::vflip),
            gt_flow_backward: sample.gt_flow_backward.as_ref().map(FlowField::vflip),
            seed: sample.seed,
        },
        Augment::Swap => Sample {
            i1: sample.i2.clone(),
            i2: sample.i1.clone(),
            gt_flow: None,
            gt_occ: None,
            gt_flow_backward: None,
            seed: sample.seed,
        },
    }
}

fn flip_plane(data: &mut [f32], width: usize, height: usize, horizontal: bool) {
    if horizontal {
        for row in data.chunks_mut(width) {
            row.reverse();
        }
    } else {
        for y in 0..height / 2 {
            let (top, bottom) = data.split_at_mut((height - 1 - y) * width);
            top[y * width..(y + 1) * width].swap_with_slice(&mut bottom[..width]);
        }
    }
}

fn flip_image(image: &Tensor, horizontal: bool) -> Tensor {
    let shape = image.shape().to_vec();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut out = image.clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        flip_plane(plane, w, h, horizontal);
    }
    out
}

/// Per-channel global histogram equalisation over 256 bins.
///
/// Each value maps to `(cdf(bin) − cdf_min) / (N − cdf_min)` where `cdf_min`
/// is the count of the lowest occupied bin. Constant channels are returned
/// unchanged.
pub fn histogram_equalize(image: &Tensor) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() < 2 {
        return Err(invalid(format!("histogram_equalize needs an image, got shape {shape:?}")));
    }
    let plane = shape[shape.len() - 2] * shape[shape.len() - 1];
    let mut out = image.clone();
    if plane == 0 {
        return Ok(out);
    }
    let bin = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as usize;
    for ch in out.data_mut().chunks_mut(plane) {
        let mut hist = [0usize; 256];
        for &v in ch.iter() {
            hist[bin(v)] += 1;
        }
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for (c, h) in cdf.iter_mut().zip(hist) {
            acc += h;
            *c = acc;
        }
        let cdf_min = hist.iter().copied().find(|&h| h > 0).unwrap_or(0);
        let n = ch.len();
        if n == cdf_min {
            continue;
        }
        let denom = (n - cdf_min) as f32;
        for v in ch.iter_mut() {
            *v = (cdf[bin(*v)] - cdf_min) as f32 / denom;
        }
    }
    Ok(out)
}

/// `[C, H, W]` image as a one-element NCHW batch.
pub fn as_batch(image: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    image.reshape(&shape)
}
