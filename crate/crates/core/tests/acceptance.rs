//! Acceptance harness: prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `FF_ACCEPT_STEPS` shortens the training runs for quick local iterations;
//! the reported learning results are then not at the reference budget.

use std::io::Cursor;
use std::process::ExitCode;
use std::time::Instant;

use flowforge::data::{
    generate_sample, read_flo, read_kitti_png, write_flo, write_kitti_png, Sample, ShapesConfig,
};
use flowforge::loss::{
    charbonnier, multiscale_loss, photometric_loss, smoothness_loss, total_loss, LossOptions,
    OcclusionHandling, PhotometricMode, ScaleSchedule,
};
use flowforge::net::{bidirectional_flow, image_pyramid, predict, NetConfig, NetworkParams, ParamVars};
use flowforge::tensor::gradcheck::{check_gradients, check_gradients_smooth, uniform_tensor};
use flowforge::tensor::{read_checkpoint, write_checkpoint, Resample};
use flowforge::traineval::{
    epe, eval_set, evaluate, fl_all, train, zero_flow_baseline, DataSource, TrainConfig, TrainState,
};
use flowforge::warp::{occlusion_map_of, range_map_of, search_candidates, FlowField};
use flowforge::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 4] = [0, 1, 2, 3];
const HELD_OUT: usize = 200;
const GRAD_TOL: f32 = 1e-3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(id: &str, name: &str, result: Result<Outcome>) -> bool {
    let o = result.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
    println!("[{}] {id} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

// ---------------------------------------------------------------- 1

fn fig3_oracle() -> Result<Outcome> {
    let flow = FlowField::from_planes(2, 2, &[0.0, -1.0, 0.0, 0.0], &[0.0; 4])?;
    let v = range_map_of(&flow)?;
    let o = occlusion_map_of(&flow)?;
    let pass = v == [2.0, 0.0, 1.0, 1.0] && o == [1.0, 0.0, 1.0, 1.0];
    Ok(outcome(pass, format!("V = {v:?}, O = {o:?}")))
}

// ---------------------------------------------------------------- 2

/// Tensor with entries whose magnitude lies in `[lo, hi]`, random sign.
fn away_from_zero(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m: f32 = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `other` plus an offset of magnitude in `[gap, 1]`.
fn separated(other: &Tensor, seed: u64, gap: f32) -> Tensor {
    let offs = away_from_zero(other.shape(), seed, gap, 1.0);
    Tensor::from_fn(other.shape(), |k| other.data()[k] + offs.data()[k])
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(0.2..2.0))
}

/// Flow whose fractional parts stay clear of the bilinear kinks.
fn fractional_flow(shape: &[usize], seed: u64, max: f32) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-max..max).floor() + rng.gen_range(0.1..0.9))
}

/// Range values clear of the kink of `min(1, V)`.
fn range_values(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        if rng.gen_bool(0.5) {
            rng.gen_range(0.05..0.9)
        } else {
            rng.gen_range(1.1..2.5)
        }
    })
}

/// Smooth flow with non-vanishing first and second differences.
fn curved_flow(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b, c) = (rng.gen_range(0.2..0.4), rng.gen_range(0.1..0.3), rng.gen_range(0.05..0.15));
    Tensor::from_fn(&[n, 2, h, w], |k| {
        let (ch, y, x) = ((k / (h * w)) % 2, (k / w) % h, k % w);
        a * x as f32 + b * (y * y) as f32 + c * (x * x) as f32 + ch as f32 + rng.gen_range(-0.01..0.01)
    })
}

struct GradSuite {
    cases: usize,
    worst: (f32, String),
    failures: Vec<String>,
    /// Coordinates kept / sampled by the piecewise-smooth network cases.
    coverage: (usize, usize),
}

impl GradSuite {
    fn record(&mut self, name: String, err: Result<f32>) {
        self.cases += 1;
        match err {
            Ok(e) => {
                if e > self.worst.0 || !e.is_finite() {
                    self.worst = (e, name.clone());
                }
                if !(e < GRAD_TOL) {
                    self.failures.push(format!("{name}: {e:.2e}"));
                }
            }
            Err(e) => self.failures.push(format!("{name}: {e}")),
        }
    }

    fn check<F>(&mut self, name: String, f: F, inputs: &[Tensor], step: f32)
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        self.record(name, check_gradients(f, inputs, step));
    }
}

fn primitive_cases(s: &mut GradSuite, seed: u64) {
    let sh = [2, 3, 4];
    let a = uniform_tensor(&sh, seed);
    let b = uniform_tensor(&sh, seed + 1000);
    s.check(format!("add/{seed}"), |t, v| t.add(v[0], v[1]), &[a.clone(), b.clone()], 1e-3);
    s.check(format!("sub/{seed}"), |t, v| t.sub(v[0], v[1]), &[a.clone(), b.clone()], 1e-3);
    s.check(format!("mul/{seed}"), |t, v| t.mul(v[0], v[1]), &[a.clone(), b.clone()], 1e-3);
    s.check(
        format!("div/{seed}"),
        |t, v| t.div(v[0], v[1]),
        &[a.clone(), away_from_zero(&sh, seed + 1, 0.5, 2.0)],
        1e-3,
    );
    let c = separated(&a, seed + 2, 0.05);
    s.check(format!("min/{seed}"), |t, v| t.min(v[0], v[1]), &[a.clone(), c.clone()], 1e-3);
    s.check(format!("max/{seed}"), |t, v| t.max(v[0], v[1]), &[a.clone(), c], 1e-3);
    s.check(format!("sqrt/{seed}"), |t, v| t.sqrt(v[0]), &[positive(&sh, seed + 3)], 1e-3);
    s.check(format!("exp/{seed}"), |t, v| t.exp(v[0]), &[a.clone()], 1e-3);
    let nz = away_from_zero(&sh, seed + 4, 0.05, 1.0);
    s.check(format!("abs/{seed}"), |t, v| t.abs(v[0]), &[nz.clone()], 1e-3);
    s.check(format!("leaky_relu/{seed}"), |t, v| t.leaky_relu(v[0], 0.1), &[nz], 1e-3);
    s.check(
        format!("scalar_ops/{seed}"),
        |t, v| {
            let x = t.add_scalar(v[0], 0.3)?;
            let x = t.mul_scalar(x, -1.7)?;
            let x = t.div_scalar(x, 2.5)?;
            let x = t.sub_scalar(x, 0.2)?;
            t.neg(x)
        },
        &[a.clone()],
        1e-3,
    );
    // keep clear of both kinks, at 0 and at -0.5
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 5);
    let clampable = Tensor::from_fn(&sh, |_| match rng.gen_range(0..3) {
        0 => rng.gen_range(-1.0..-0.6),
        1 => rng.gen_range(-0.4..-0.05),
        _ => rng.gen_range(0.05..1.0),
    });
    s.check(
        format!("clamp_scalar/{seed}"),
        |t, v| {
            let x = t.min_scalar(v[0], 0.0)?;
            t.max_scalar(x, -0.5)
        },
        &[clampable],
        1e-3,
    );
    s.check(
        format!("reduce_sum/{seed}"),
        |t, v| {
            let r = t.reduce_sum(v[0], Some(&[1]))?;
            t.mul(r, r)
        },
        &[a.clone()],
        1e-3,
    );
    s.check(
        format!("mean_all/{seed}"),
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.mean_all(sq)
        },
        &[a.clone()],
        1e-3,
    );
    s.check(
        format!("shape_ops/{seed}"),
        |t, v| {
            let n = t.narrow(v[0], 2, 1, 2)?;
            let r = t.reshape(n, &[2, 3, 2, 1])?;
            let e = t.expand(r, &[2, 3, 2, 3])?;
            let c = t.concat(&[e, e], 1)?;
            t.mul(c, c)
        },
        &[a],
        1e-3,
    );
    s.check(
        format!("conv2d/{seed}"),
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        &[
            uniform_tensor(&[2, 2, 5, 5], seed + 6),
            uniform_tensor(&[3, 2, 3, 3], seed + 7),
            uniform_tensor(&[3], seed + 8),
        ],
        1e-3,
    );
    s.check(
        format!("conv_transpose2d/{seed}"),
        |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1),
        &[
            uniform_tensor(&[2, 3, 3, 3], seed + 9),
            uniform_tensor(&[3, 2, 4, 4], seed + 10),
            uniform_tensor(&[2], seed + 11),
        ],
        1e-3,
    );
    for dir in [Resample::DownAvg, Resample::UpBilinear] {
        s.check(
            format!("resample2x {dir:?}/{seed}"),
            |t, v| t.resample2x(v[0], dir),
            &[uniform_tensor(&[1, 2, 4, 6], seed + 12)],
            1e-3,
        );
    }
}

fn warp_cases(s: &mut GradSuite, seed: u64) -> Result<()> {
    let img = uniform_tensor(&[1, 2, 6, 6], seed + 20);
    let tgt = uniform_tensor(&[1, 2, 6, 6], seed + 21);
    let flow = fractional_flow(&[1, 2, 6, 6], seed + 22, 2.0);
    s.check(format!("range_map/{seed}"), |t, v| t.range_map(v[0]), &[flow.clone()], 1e-3);
    s.check(
        format!("occlusion_map/{seed}"),
        |t, v| t.occlusion_map(v[0]),
        &[range_values(&[1, 1, 6, 6], seed + 23)],
        1e-3,
    );
    s.check(
        format!("backward_warp/{seed}"),
        |t, v| t.backward_warp(v[0], v[1]),
        &[img.clone(), flow.clone()],
        1e-3,
    );
    let cands = search_candidates(&img, &tgt, &flow, 3)?;
    s.check(
        format!("enlarged_warp_frozen/{seed}"),
        |t, v| t.backward_warp_with_candidates(v[0], v[1], &cands),
        &[img, flow],
        1e-3,
    );
    Ok(())
}

fn loss_cases(s: &mut GradSuite, seed: u64) {
    s.check(
        format!("charbonnier/{seed}"),
        |t, v| charbonnier(t, v[0]),
        &[away_from_zero(&[2, 3, 3], seed + 30, 0.05, 1.0)],
        1e-3,
    );
    let target = uniform_tensor(&[1, 2, 5, 5], seed + 31);
    let occ = Tensor::from_fn(&[1, 1, 5, 5], |k| 0.2 + 0.03 * k as f32);
    s.check(
        format!("photometric_brightness/{seed}"),
        |t, v| {
            let tg = t.constant(target.clone());
            photometric_loss(t, v[0], tg, v[1], PhotometricMode::Brightness)
        },
        &[separated(&target, seed + 32, 0.05), occ.clone()],
        1e-3,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 33);
    let ramped = Tensor::from_fn(target.shape(), |k| {
        let (y, x) = ((k / 5) % 5, k % 5);
        target.data()[k] + 0.2 * x as f32 + 0.3 * y as f32 + rng.gen_range(-0.03..0.03)
    });
    s.check(
        format!("photometric_gradient/{seed}"),
        |t, v| {
            let tg = t.constant(target.clone());
            photometric_loss(t, v[0], tg, v[1], PhotometricMode::Gradient)
        },
        &[ramped, occ],
        1e-3,
    );
    let flow = curved_flow(1, 5, 5, seed + 34);
    let img = uniform_tensor(&[1, 3, 5, 5], seed + 35);
    for order in [1u8, 2] {
        s.check(
            format!("smoothness{order}/{seed}"),
            |t, v| {
                let i = t.constant(img.clone());
                smoothness_loss(t, v[0], i, order, 10.0)
            },
            &[flow.clone()],
            1e-2,
        );
    }
    let losses = uniform_tensor(&[4], seed + 36);
    s.check(
        format!("multiscale/{seed}"),
        |t, v| {
            let parts: Vec<Var> = (0..4).map(|k| t.narrow(v[0], 0, k, 1)).collect::<Result<_>>()?;
            multiscale_loss(t, &parts, &ScaleSchedule::default(), 0.3)
        },
        &[losses],
        1e-3,
    );
}

/// Symmetric multi-scale objective of a small network with every parameter
/// tensor as a gradient-checked input. Uses the differentiable occlusion
/// map and plain bilinear warping, whose forward pass is the function the
/// analytic gradient differentiates. The activation slope is 1: with a
/// leaky kink some of the many pre-activations always sit within one
/// finite-difference step of zero, which breaks the numeric side, not the
/// analytic one. The activation itself is checked among the primitives.
///
/// The loss is still only piecewise smooth (bilinear cell edges, the range
/// map splat, `min(1, V)`), so coordinates whose finite differences show a
/// kink inside the stencil are skipped. At least a quarter of the sampled
/// coordinates must survive.
fn network_case(s: &mut GradSuite, seed: u64) -> Result<()> {
    let net = NetConfig {
        num_scales: 2,
        base_channels: 4,
        leaky_slope: 1.0,
        ..Default::default()
    };
    let mut params = NetworkParams::init(&net, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 40);
    for (name, t) in params.iter_mut() {
        // non-zero flow heads so the warps sit at fractional positions
        if name.starts_with("flow") {
            for x in t.data_mut() {
                *x = rng.gen_range(-0.3..0.3);
            }
        }
    }
    let names: Vec<String> = params.iter().map(|(k, _)| k.to_string()).collect();
    let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let shapes = ShapesConfig {
        width: 16,
        height: 16,
        max_displacement: 2,
        background_displacement: 2,
        ..Default::default()
    };
    let sample = generate_sample(&shapes, seed + 41)?;
    let (i1, i2) = (sample.i1.reshape(&[1, 3, 16, 16])?, sample.i2.reshape(&[1, 3, 16, 16])?);
    let opts = LossOptions {
        radius: 0,
        occlusion: OcclusionHandling::Differentiable,
        ..Default::default()
    };
    let objective = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let pv: ParamVars = names.iter().cloned().zip(v.iter().copied()).collect();
        let a = t.constant(i1.clone());
        let b = t.constant(i2.clone());
        let p1 = image_pyramid(t, a, net.num_scales)?;
        let p2 = image_pyramid(t, b, net.num_scales)?;
        let (f12, f21) = bidirectional_flow(t, &pv, &net, &p1, &p2)?;
        let mut per_scale = Vec::new();
        for k in 0..net.num_scales {
            let level = net.num_scales - k;
            let fwd = total_loss(t, p1[level], p2[level], f12[k], f21[k], &opts)?;
            let bwd = total_loss(t, p2[level], p1[level], f21[k], f12[k], &opts)?;
            let both = t.add(fwd.total, bwd.total)?;
            per_scale.push(t.mul_scalar(both, 0.5)?);
        }
        multiscale_loss(t, &per_scale, &ScaleSchedule::default(), 0.3)
    };
    let name = format!("network_loss/{seed}");
    match check_gradients_smooth(objective, &tensors, 3e-4, 3, seed) {
        Ok(c) => {
            s.coverage.0 += c.kept;
            s.coverage.1 += c.sampled;
            if c.kept * 4 < c.sampled {
                s.cases += 1;
                s.failures.push(format!("{name}: only {}/{} coordinates usable", c.kept, c.sampled));
            } else {
                s.record(name, Ok(c.error));
            }
        }
        Err(e) => s.record(name, Err(e)),
    }
    Ok(())
}

fn gradient_suite() -> Result<Outcome> {
    let start = Instant::now();
    let mut s = GradSuite {
        cases: 0,
        worst: (0.0, String::new()),
        failures: Vec::new(),
        coverage: (0, 0),
    };
    for seed in 0..4 {
        primitive_cases(&mut s, seed);
    }
    for seed in 0..8 {
        warp_cases(&mut s, seed)?;
        loss_cases(&mut s, seed);
    }
    for seed in 0..4 {
        network_case(&mut s, seed)?;
    }
    let secs = start.elapsed().as_secs_f32();
    let pass = s.failures.is_empty() && s.cases >= 100 && secs < 300.0;
    let mut detail = format!(
        "{} cases, worst relative error {:.2e} ({}), network coordinates kept {}/{}, {secs:.1}s",
        s.cases, s.worst.0, s.worst.1, s.coverage.0, s.coverage.1
    );
    if !s.failures.is_empty() {
        detail.push_str(&format!("; failing: {}", s.failures.join(", ")));
    }
    Ok(outcome(pass, detail))
}

// ---------------------------------------------------------------- 3

fn conservation() -> Result<Outcome> {
    let (w, h) = (16usize, 16usize);
    let mut worst = 0.0f32;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // every target lands in [0, w-1] × [0, h-1], so no weight is dropped
        let flow = FlowField::from_fn(w, h, |x, y| {
            let tx = rng.gen_range(0.0..(w - 1) as f32);
            let ty = rng.gen_range(0.0..(h - 1) as f32);
            (tx - x as f32, ty - y as f32)
        });
        let total: f64 = range_map_of(&flow)?.iter().map(|&v| f64::from(v)).sum();
        worst = worst.max((total - (w * h) as f64).abs() as f32);
    }
    Ok(outcome(worst <= 1e-4, format!("50 flows, max |ΣV − 256| = {worst:.2e}")))
}

// ---------------------------------------------------------------- 4

fn identity_and_reconstruction() -> Result<Outcome> {
    let img = uniform_tensor(&[2, 3, 9, 7], 5);
    let mut tape = Tape::new();
    let i = tape.constant(img.clone());
    let z = tape.constant(Tensor::zeros(&[2, 2, 9, 7]));
    let out = tape.backward_warp(i, z)?;
    let identity = tape
        .value(out)
        .data()
        .iter()
        .zip(img.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    let config = ShapesConfig::default();
    let mut worst = 0.0f32;
    let mut checked = 0usize;
    for seed in 0..40u64 {
        let s = generate_sample(&config, seed)?;
        let (c, h, w) = (s.i1.shape()[0], s.i1.shape()[1], s.i1.shape()[2]);
        let gt = s.gt_flow.as_ref().expect("generated samples carry gt");
        let occ = s.gt_occ.as_ref().expect("generated samples carry gt");
        let mut tape = Tape::new();
        let i2 = tape.constant(s.i2.reshape(&[1, c, h, w])?);
        let f = tape.constant(gt.to_tensor().reshape(&[1, 2, h, w])?);
        let warped = tape.backward_warp(i2, f)?;
        let warped = tape.value(warped).data();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if occ.get(x, y) == 1.0 {
                        let k = ch * h * w + y * w + x;
                        worst = worst.max((warped[k] - s.i1.data()[k]).abs());
                        checked += 1;
                    }
                }
            }
        }
    }
    let pass = identity && worst <= 1e-4;
    Ok(outcome(
        pass,
        format!("zero-flow warp bitwise identical: {identity}; 40 samples, {checked} visible values, max error {worst:.2e}"),
    ))
}

// ---------------------------------------------------------------- 5

fn format_round_trips() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut flo_exact = true;
    let mut kitti_worst = 0.0f32;
    for _ in 0..20 {
        let (w, h) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let flow = FlowField::from_fn(w, h, |_, _| (rng.gen_range(-300.0..300.0), rng.gen_range(-300.0..300.0)));
        let mut buf = Vec::new();
        write_flo(&mut buf, &flow)?;
        let back = read_flo(Cursor::new(&buf))?;
        flo_exact &= back.width() == w
            && back.height() == h
            && back
                .u()
                .iter()
                .chain(back.v())
                .zip(flow.u().iter().chain(flow.v()))
                .all(|(a, b)| a.to_bits() == b.to_bits());

        let valid: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.8)).collect();
        let mut png = Vec::new();
        write_kitti_png(&mut png, &flow, &valid)?;
        let (kf, kv) = read_kitti_png(Cursor::new(&png))?;
        if kv != valid {
            kitti_worst = f32::INFINITY;
        }
        for (k, &ok) in valid.iter().enumerate() {
            if ok {
                kitti_worst = kitti_worst
                    .max((kf.u()[k] - flow.u()[k]).abs())
                    .max((kf.v()[k] - flow.v()[k]).abs());
            }
        }
    }

    let net = NetConfig::default();
    let mut state = TrainState::new(&net, 3)?;
    for (_, t) in state.adam.m.iter_mut() {
        for x in t.data_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
    }
    state.adam.t = 12_345_678;
    state.step = 16_777_300;
    let mut bytes = Vec::new();
    state.write(&mut bytes)?;
    let restored = TrainState::read(Cursor::new(&bytes), &net)?;
    let mut again = Vec::new();
    restored.write(&mut again)?;
    let named = read_checkpoint(Cursor::new(&bytes))?;
    let mut raw = Vec::new();
    write_checkpoint(&mut raw, named.iter().map(|(k, t)| (k.as_str(), t)))?;
    let ckpt_exact = restored == state && again == bytes && raw == bytes;

    let pass = flo_exact && kitti_worst <= 1.0 / 128.0 && ckpt_exact;
    Ok(outcome(
        pass,
        format!(
            ".flo bit-exact: {flo_exact}; KITTI max error {kitti_worst:.5} px; checkpoint bit-exact: {ckpt_exact}"
        ),
    ))
}

// ---------------------------------------------------------------- 6, 7, 8

struct RunResult {
    epe: f32,
    f_measure: Option<f32>,
    block_losses: Vec<f32>,
    secs: f32,
    params: NetworkParams,
}

fn train_run(cfg: &TrainConfig, net: &NetConfig, source: &DataSource, eval: &[Sample]) -> Result<RunResult> {
    let start = Instant::now();
    let mut state = TrainState::new(net, cfg.seed)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    train(cfg, net, source, &[], &mut state, |r, _| {
        losses.push(r.loss);
        Ok(())
    })?;
    let secs = start.elapsed().as_secs_f32();
    let rep = evaluate(&state.params, net, eval, cfg.equalize)?;
    let block_losses = losses
        .chunks(100)
        .take(5)
        .map(|c| c.iter().sum::<f32>() / c.len() as f32)
        .collect();
    Ok(RunResult {
        epe: rep.epe,
        f_measure: rep.f_measure,
        block_losses,
        secs,
        params: state.params,
    })
}

fn mean(xs: impl IntoIterator<Item = f32>) -> f32 {
    let v: Vec<f32> = xs.into_iter().collect();
    v.iter().sum::<f32>() / v.len().max(1) as f32
}

fn fmt_list(xs: impl IntoIterator<Item = f32>, prec: usize) -> String {
    xs.into_iter().map(|x| format!("{x:.prec$}")).collect::<Vec<_>>().join(" ")
}

struct Learning {
    baseline: f32,
    occluded: f32,
    default: Vec<RunResult>,
    /// Ablation rows, cumulative: the plain network, then occlusion
    /// handling, then enlarged search.
    plain: Vec<RunResult>,
    occlusion: Vec<RunResult>,
    enlarged: Vec<RunResult>,
    steps: usize,
    net: NetConfig,
}

fn run_learning() -> Result<Learning> {
    let net = NetConfig::default();
    let shapes = ShapesConfig::default();
    let source = DataSource::Synthetic(shapes);
    let mut base = TrainConfig {
        eval_samples: HELD_OUT,
        ..Default::default()
    };
    if let Some(steps) = std::env::var("FF_ACCEPT_STEPS").ok().and_then(|v| v.parse().ok()) {
        base.steps = steps;
    }
    let eval = eval_set(&base, &source)?;
    let baseline = zero_flow_baseline(&eval)?.epe;
    let occluded = mean(eval.iter().map(|s| s.gt_occ.as_ref().expect("gt").occluded_fraction()));

    let arm = |label: &str, tweak: &dyn Fn(&mut TrainConfig, &mut NetConfig)| -> Result<Vec<RunResult>> {
        SEEDS
            .iter()
            .map(|&seed| {
                let mut cfg = TrainConfig { seed, ..base.clone() };
                let mut net = net.clone();
                tweak(&mut cfg, &mut net);
                let r = train_run(&cfg, &net, &source, &eval)?;
                eprintln!(
                    "  {label} seed {seed}: epe {:.3} ({:.3} of baseline) F {:?} in {:.0}s",
                    r.epe,
                    r.epe / baseline,
                    r.f_measure,
                    r.secs
                );
                Ok(r)
            })
            .collect()
    };
    // no occlusion handling, plain bilinear warp, no warped decoder inputs,
    // no contrast enhancement
    let plain_setup = |c: &mut TrainConfig, n: &mut NetConfig| {
        c.occlusion = OcclusionHandling::Off;
        c.radius = 0;
        c.equalize = false;
        n.warped_inputs = false;
    };
    let default = arm("default", &|_, _| {})?;
    let plain = arm("plain", &plain_setup)?;
    let occlusion = arm("plain + occlusion", &|c, n| {
        plain_setup(c, n);
        c.occlusion = base.occlusion;
    })?;
    let enlarged = arm("plain + occlusion + radius 4", &|c, n| {
        plain_setup(c, n);
        c.occlusion = base.occlusion;
        c.radius = base.radius;
    })?;
    Ok(Learning {
        baseline,
        occluded,
        default,
        plain,
        occlusion,
        enlarged,
        steps: base.steps,
        net,
    })
}

fn desk_scale_learning(l: &Learning) -> Outcome {
    let ratios: Vec<f32> = l.default.iter().map(|r| r.epe / l.baseline).collect();
    let good = l
        .default
        .iter()
        .zip(&ratios)
        .filter(|(r, &q)| q < 0.5 && r.secs < 45.0 * 60.0)
        .count();
    outcome(
        good >= 3,
        format!(
            "{} steps, zero-flow EPE {:.3}; EPE per seed [{}], ratio [{}], minutes [{}]; {good}/4 under 50%",
            l.steps,
            l.baseline,
            fmt_list(l.default.iter().map(|r| r.epe), 3),
            fmt_list(ratios, 3),
            fmt_list(l.default.iter().map(|r| r.secs / 60.0), 1),
        ),
    )
}

fn ablation_trends(l: &Learning) -> Outcome {
    let plain = mean(l.plain.iter().map(|r| r.epe));
    let occ = mean(l.occlusion.iter().map(|r| r.epe));
    let enl = mean(l.enlarged.iter().map(|r| r.epe));
    let pass = l.occluded >= 0.15 && occ < plain && enl < occ;
    outcome(
        pass,
        format!(
            "occluded {:.1}%; seed-mean EPE plain {plain:.3} [{}], + occlusion {occ:.3} [{}], + radius 4 {enl:.3} [{}]",
            100.0 * l.occluded,
            fmt_list(l.plain.iter().map(|r| r.epe), 3),
            fmt_list(l.occlusion.iter().map(|r| r.epe), 3),
            fmt_list(l.enlarged.iter().map(|r| r.epe), 3),
        ),
    )
}

fn occlusion_detection(l: &Learning) -> Outcome {
    let fs: Vec<f32> = l.default.iter().map(|r| r.f_measure.unwrap_or(0.0)).collect();
    let m = mean(fs.iter().copied());
    outcome(
        m >= 0.6,
        format!("max F-measure per seed [{}], mean {m:.3}", fmt_list(fs, 3)),
    )
}

fn loss_decrease(l: &Learning) -> Outcome {
    let mono = l
        .default
        .iter()
        .filter(|r| r.block_losses.windows(2).all(|w| w[1] <= w[0]))
        .count();
    let blocks: Vec<String> = l
        .default
        .iter()
        .map(|r| format!("[{}]", fmt_list(r.block_losses.iter().copied(), 4)))
        .collect();
    outcome(
        mono >= 3,
        format!("100-step mean loss over the first 500 steps: {}; {mono}/4 non-increasing", blocks.join(" ")),
    )
}

fn identical_inputs(l: &Learning) -> Result<Outcome> {
    let params = &l.default[0].params;
    let mut worst = 0.0f32;
    for seed in 0..8u64 {
        let s = generate_sample(&ShapesConfig::default(), EVAL_PROBE + seed)?;
        let x = flowforge::traineval::preprocess(&s.i1, true)?;
        let x = flowforge::data::as_batch(&x)?;
        let flow = predict(params, &l.net, &x, &x)?.remove(0);
        worst = worst.max(mean(flow.magnitude()));
    }
    Ok(outcome(worst < 0.5, format!("largest mean |flow| on I1 == I2 over 8 pairs: {worst:.3} px")))
}

const EVAL_PROBE: u64 = (1 << 62) + (1 << 40);

// ---------------------------------------------------------------- 9

fn metric_cases() -> Result<Outcome> {
    let gt = FlowField::from_fn(6, 4, |x, y| (x as f32 * 0.5, -(y as f32)));
    let shifted = |du: f32, dv: f32| FlowField::from_fn(6, 4, |x, y| {
        let (u, v) = gt.get(x, y);
        (u + du, v + dv)
    });
    let mut checks = Vec::new();
    checks.push(("epe(gt, gt) = 0", epe(&gt, &gt, None)? == 0.0));
    checks.push(("uniform (3,4) error = 5", epe(&shifted(3.0, 4.0), &gt, None)? == 5.0));
    let half: Vec<bool> = (0..24).map(|k| k % 2 == 0).collect();
    let mixed = FlowField::from_fn(6, 4, |x, y| {
        let (u, v) = gt.get(x, y);
        if (y * 6 + x) % 2 == 0 {
            (u + 1.0, v)
        } else {
            (u + 7.0, v)
        }
    });
    checks.push(("masked mean over half", epe(&mixed, &gt, Some(&half))? == 1.0));
    checks.push(("fl_all perfect = 0%", fl_all(&gt, &gt, None)? == 0.0));
    let ten = FlowField::from_fn(6, 4, |_, _| (6.0, 8.0));
    let ten_off = FlowField::from_fn(6, 4, |_, _| (9.0, 12.0));
    checks.push(("fl_all 5px on 10px gt = 100%", fl_all(&ten_off, &ten, None)? == 100.0));
    checks.push(("fl_all 2.9px = 0%", fl_all(&shifted(2.9, 0.0), &gt, None)? == 0.0));
    checks.push(("empty mask rejected", epe(&gt, &gt, Some(&[false; 24])).is_err()));
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    Ok(outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} cases exact", checks.len())
        } else {
            format!("failing: {}", failed.join(", "))
        },
    ))
}

fn main() -> ExitCode {
    let mut all = true;
    all &= report("1", "fig3-oracle", fig3_oracle());
    all &= report("2", "gradient-suite", gradient_suite());
    all &= report("3", "range-map-conservation", conservation());
    all &= report("4", "identity-reconstruction", identity_and_reconstruction());
    all &= report("5", "format-round-trips", format_round_trips());
    match run_learning() {
        Ok(l) => {
            all &= report("6", "desk-scale-learning", Ok(desk_scale_learning(&l)));
            all &= report("7", "ablation-trends", Ok(ablation_trends(&l)));
            all &= report("8", "occlusion-detection", Ok(occlusion_detection(&l)));
            // properties outside the numbered criteria; reported, not gating
            report("property", "early-loss-decrease", Ok(loss_decrease(&l)));
            report("property", "identical-inputs-near-zero-flow", identical_inputs(&l));
        }
        Err(e) => {
            for (id, name) in [("6", "desk-scale-learning"), ("7", "ablation-trends"), ("8", "occlusion-detection")] {
                report(id, name, Err(flowforge::FlowError::InvalidArgument(format!("training failed: {e}"))));
            }
            all = false;
        }
    }
    all &= report("9", "metric-cases", metric_cases());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
