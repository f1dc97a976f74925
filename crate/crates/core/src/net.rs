//! Coarse-to-fine flow network.
//!
//! The encoder halves the resolution `num_scales` times. The decoder starts
//! with a flow prediction at the coarsest level and refines it level by
//! level up to half resolution. Each refinement stage sees the encoder skip
//! features, the upsampled decoder features and coarser flow, and (with
//! `warped_inputs` enabled) the first image, the second image warped by the
//! upsampled flow, and their absolute difference. Stages predict a residual
//! on top of the upsampled flow.
//!
//! Flows at level `l` are in pixels of that level (`W / 2^l`).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, FlowError, Result};
use crate::tensor::{Resample, Tape, Tensor, Var};
use crate::warp::FlowField;

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    /// Pyramid levels with a flow prediction (coarsest is `1 / 2^num_scales`).
    pub num_scales: usize,
    pub base_channels: usize,
    /// Channels per image (the network sees two stacked images).
    pub input_channels: usize,
    pub leaky_slope: f32,
    /// Enlarged-search half-width used by the training loss.
    pub enlarged_radius: usize,
    /// Feed warped image and error map to each decoder stage.
    pub warped_inputs: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            num_scales: 4,
            base_channels: 16,
            input_channels: 3,
            leaky_slope: 0.1,
            enlarged_radius: 4,
            warped_inputs: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_scales < 2 {
            return Err(invalid("num_scales must be at least 2"));
        }
        if self.base_channels == 0 || self.input_channels == 0 {
            return Err(invalid("channel counts must be positive"));
        }
        Ok(())
    }

    /// Encoder width at level `l ≥ 1`: base × (1, 2, 4, 6, 8, …).
    pub fn encoder_channels(&self, level: usize) -> usize {
        let mult = if level == 1 { 1 } else { 2 * (level - 1) };
        self.base_channels * mult
    }

    /// Decoder width at refinement level `l` (1 ≤ l < num_scales).
    pub fn decoder_channels(&self, level: usize) -> usize {
        (self.encoder_channels(level) / 2).max(4)
    }

    fn decoder_input_channels(&self, level: usize) -> usize {
        let extra = if self.warped_inputs { 3 * self.input_channels } else { 0 };
        self.encoder_channels(level) + self.decoder_channels(level) + 2 + extra
    }

    /// Checks that an image of this size fits the pyramid.
    pub fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        let m = 1usize << self.num_scales;
        if height % m != 0 || width % m != 0 || height == 0 || width == 0 {
            return Err(invalid(format!(
                "image {width}×{height} must be divisible by 2^{} = {m}",
                self.num_scales
            )));
        }
        Ok(())
    }

    /// `(name, shape, init)` for every parameter, in construction order.
    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut out = Vec::new();
        let mut layer = |name: String, shape: [usize; 4], bias: usize, init: Init| {
            out.push((format!("{name}.w"), shape.to_vec(), init));
            out.push((format!("{name}.b"), vec![bias], Init::Zero));
        };
        let s = self.num_scales;
        let mut prev = 2 * self.input_channels;
        for l in 1..=s {
            let c = self.encoder_channels(l);
            layer(format!("enc{l}"), [c, prev, 3, 3], c, Init::FanIn(prev * 9));
            layer(format!("enc{l}_1"), [c, c, 3, 3], c, Init::FanIn(c * 9));
            prev = c;
        }
        layer(format!("flow{s}"), [2, self.encoder_channels(s), 3, 3], 2, Init::Zero);
        for l in (1..s).rev() {
            let above = if l + 1 == s {
                self.encoder_channels(s)
            } else {
                self.decoder_channels(l + 1)
            };
            let d = self.decoder_channels(l);
            // transposed kernels are stored (in, out, k, k)
            layer(format!("up{l}"), [above, d, 4, 4], d, Init::FanIn(above * 4));
            let cin = self.decoder_input_channels(l);
            layer(format!("dec{l}"), [d, cin, 3, 3], d, Init::FanIn(cin * 9));
            layer(format!("flow{l}"), [2, d, 3, 3], 2, Init::Zero);
        }
        out
    }

    /// Number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zero,
    /// He-uniform for leaky-ReLU layers.
    FanIn(usize),
}

/// Learnable tensors keyed by layer name.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    tensors: BTreeMap<String, Tensor>,
}

impl NetworkParams {
    /// Deterministic initialisation; flow heads start at zero so the initial
    /// prediction is zero flow at every scale.
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in config.layout() {
            let t = match init {
                Init::Zero => Tensor::zeros(&shape),
                Init::FanIn(fan_in) => {
                    let bound = (6.0 / fan_in as f32).sqrt();
                    Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
                }
            };
            tensors.insert(name, t);
        }
        Ok(NetworkParams { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a gradient-receiving leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            vars: self.tensors.iter().map(|(k, t)| (k.clone(), tape.param(t.clone()))).collect(),
        }
    }

    /// Rebuilds parameters from named tensors, requiring every tensor of
    /// `config` with the expected shape. Other names are ignored.
    pub fn from_named(config: &NetConfig, named: &[(String, Tensor)]) -> Result<Self> {
        let lookup: BTreeMap<&str, &Tensor> = named.iter().map(|(k, t)| (k.as_str(), t)).collect();
        let mut tensors = BTreeMap::new();
        for (name, shape, _) in config.layout() {
            let t = lookup
                .get(name.as_str())
                .ok_or_else(|| FlowError::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(FlowError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            tensors.insert(name, (*t).clone());
        }
        Ok(NetworkParams { tensors })
    }
}

/// Parameters registered on a tape.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| FlowError::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        ParamVars {
            vars: iter.into_iter().collect(),
        }
    }
}

/// `[I, down(I), down²(I), …]` with `levels + 1` entries.
pub fn image_pyramid(tape: &mut Tape, image: Var, levels: usize) -> Result<Vec<Var>> {
    let mut out = vec![image];
    for _ in 0..levels {
        let prev = *out.last().expect("non-empty");
        out.push(tape.resample2x(prev, Resample::DownAvg)?);
    }
    Ok(out)
}

/// ×2 bilinear upsampling of a flow, with values doubled to the finer grid.
pub fn upsample_flow(tape: &mut Tape, flow: Var) -> Result<Var> {
    let up = tape.resample2x(flow, Resample::UpBilinear)?;
    tape.mul_scalar(up, 2.0)
}

fn conv(tape: &mut Tape, p: &ParamVars, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    tape.conv2d(x, w, Some(b), stride, 1)
}

/// Flow pyramid for the pair `(pyr1[0], pyr2[0])`, ordered coarse → fine,
/// from `1 / 2^num_scales` to `1 / 2` resolution. `pyr1`/`pyr2` are image
/// pyramids from [`image_pyramid`] with at least `num_scales` levels.
pub fn forward_flow(tape: &mut Tape, params: &ParamVars, config: &NetConfig, pyr1: &[Var], pyr2: &[Var]) -> Result<Vec<Var>> {
    let s = config.num_scales;
    if pyr1.len() < s || pyr2.len() < s {
        return Err(invalid("image pyramid is shallower than the network"));
    }
    let (_, c, h, w) = tape.value(pyr1[0]).dims4()?;
    if c != config.input_channels {
        return Err(invalid(format!("network expects {} channels, got {c}", config.input_channels)));
    }
    config.check_dims(h, w)?;
    let slope = config.leaky_slope;

    let mut x = tape.concat(&[pyr1[0], pyr2[0]], 1)?;
    let mut skips = Vec::with_capacity(s);
    for l in 1..=s {
        let a = conv(tape, params, &format!("enc{l}"), x, 2)?;
        let a = tape.leaky_relu(a, slope)?;
        let b = conv(tape, params, &format!("enc{l}_1"), a, 1)?;
        x = tape.leaky_relu(b, slope)?;
        skips.push(x);
    }

    let mut feat = x;
    let mut flow = conv(tape, params, &format!("flow{s}"), feat, 1)?;
    let mut flows = vec![flow];
    for l in (1..s).rev() {
        let up_flow = upsample_flow(tape, flow)?;
        let wt = params.get(&format!("up{l}.w"))?;
        let bias = params.get(&format!("up{l}.b"))?;
        let up_feat = tape.conv_transpose2d(feat, wt, Some(bias), 2, 1)?;
        let up_feat = tape.leaky_relu(up_feat, slope)?;
        let mut parts = vec![skips[l - 1], up_feat, up_flow];
        if config.warped_inputs {
            let warped = tape.backward_warp(pyr2[l], up_flow)?;
            let diff = tape.sub(warped, pyr1[l])?;
            let err = tape.abs(diff)?;
            parts.extend([pyr1[l], warped, err]);
        }
        let cat = tape.concat(&parts, 1)?;
        let d = conv(tape, params, &format!("dec{l}"), cat, 1)?;
        feat = tape.leaky_relu(d, slope)?;
        let residual = conv(tape, params, &format!("flow{l}"), feat, 1)?;
        flow = tape.add(up_flow, residual)?;
        flows.push(flow);
    }
    Ok(flows)
}

/// Forward (`I1 → I2`) and backward (`I2 → I1`) flow pyramids computed with
/// the same registered parameters.
pub fn bidirectional_flow(
    tape: &mut Tape,
    params: &ParamVars,
    config: &NetConfig,
    pyr1: &[Var],
    pyr2: &[Var],
) -> Result<(Vec<Var>, Vec<Var>)> {
    let f12 = forward_flow(tape, params, config, pyr1, pyr2)?;
    let f21 = forward_flow(tape, params, config, pyr2, pyr1)?;
    Ok((f12, f21))
}

/// Full-resolution forward flow for a batch of preprocessed image pairs,
/// evaluated without gradients.
pub fn predict(params: &NetworkParams, config: &NetConfig, i1: &Tensor, i2: &Tensor) -> Result<Vec<FlowField>> {
    let mut tape = Tape::new();
    let vars = constants(&mut tape, params);
    let a = tape.constant(i1.clone());
    let b = tape.constant(i2.clone());
    let p1 = image_pyramid(&mut tape, a, config.num_scales)?;
    let p2 = image_pyramid(&mut tape, b, config.num_scales)?;
    let flows = forward_flow(&mut tape, &vars, config, &p1, &p2)?;
    full_resolution(&mut tape, *flows.last().expect("num_scales ≥ 2"))
}

/// Full-resolution forward and backward flows, evaluated without gradients.
pub fn predict_bidirectional(
    params: &NetworkParams,
    config: &NetConfig,
    i1: &Tensor,
    i2: &Tensor,
) -> Result<(Vec<FlowField>, Vec<FlowField>)> {
    let mut tape = Tape::new();
    let vars = constants(&mut tape, params);
    let a = tape.constant(i1.clone());
    let b = tape.constant(i2.clone());
    let p1 = image_pyramid(&mut tape, a, config.num_scales)?;
    let p2 = image_pyramid(&mut tape, b, config.num_scales)?;
    let (f12, f21) = bidirectional_flow(&mut tape, &vars, config, &p1, &p2)?;
    let fwd = full_resolution(&mut tape, *f12.last().expect("num_scales ≥ 2"))?;
    let bwd = full_resolution(&mut tape, *f21.last().expect("num_scales ≥ 2"))?;
    Ok((fwd, bwd))
}

fn constants(tape: &mut Tape, params: &NetworkParams) -> ParamVars {
    ParamVars {
        vars: params.iter().map(|(k, t)| (k.to_string(), tape.constant(t.clone()))).collect(),
    }
}

fn full_resolution(tape: &mut Tape, half: Var) -> Result<Vec<FlowField>> {
    let full = upsample_flow(tape, half)?;
    let t = tape.value(full);
    (0..t.shape()[0]).map(|n| FlowField::from_tensor(t, n)).collect()
}
