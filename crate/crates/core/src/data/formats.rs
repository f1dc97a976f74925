//! `.flo`, KITTI 16-bit PNG, 8-bit image PNG and dataset manifests.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::OcclusionMap;
use crate::error::{invalid, FlowError, Result};
use crate::tensor::Tensor;
use crate::warp::FlowField;

/// Middlebury tag: `202021.25` as little-endian `f32` reads `"PIEH"`.
pub const FLO_MAGIC: f32 = 202021.25;

const KITTI_SCALE: f64 = 64.0;
const KITTI_OFFSET: f64 = 32768.0;

fn format_err(msg: impl Into<String>) -> FlowError {
    FlowError::Format(msg.into())
}

pub fn write_flo<W: Write>(mut w: W, flow: &FlowField) -> Result<()> {
    if !flow.is_finite() {
        return Err(FlowError::NonFinite("write_flo"));
    }
    let (width, height) = (flow.width(), flow.height());
    let mut buf = Vec::with_capacity(12 + 8 * width * height);
    buf.extend(FLO_MAGIC.to_le_bytes());
    buf.extend((width as i32).to_le_bytes());
    buf.extend((height as i32).to_le_bytes());
    for (u, v) in flow.u().iter().zip(flow.v()) {
        buf.extend(u.to_le_bytes());
        buf.extend(v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_flo<R: Read>(mut r: R) -> Result<FlowField> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(format_err("truncated .flo header"));
    }
    let word = |i: usize| -> [u8; 4] { bytes[4 * i..4 * i + 4].try_into().expect("4 bytes") };
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return Err(format_err("bad .flo magic"));
    }
    let width = i32::from_le_bytes(word(1));
    let height = i32::from_le_bytes(word(2));
    if width < 0 || height < 0 {
        return Err(format_err(format!("bad .flo size {width}×{height}")));
    }
    let (width, height) = (width as usize, height as usize);
    let n = width
        .checked_mul(height)
        .ok_or_else(|| format_err("bad .flo size"))?;
    if bytes.len() != 12 + 8 * n {
        return Err(format_err(format!(
            ".flo of {width}×{height} needs {} bytes, got {}",
            12 + 8 * n,
            bytes.len()
        )));
    }
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for p in 0..n {
        u.push(f32::from_le_bytes(word(3 + 2 * p)));
        v.push(f32::from_le_bytes(word(4 + 2 * p)));
    }
    FlowField::from_planes(width, height, &u, &v)
}

pub fn save_flo(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    write_flo(BufWriter::new(File::create(path)?), flow)
}

pub fn load_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    read_flo(BufReader::new(File::open(path)?))
}

fn png_err(e: impl std::fmt::Display) -> FlowError {
    format_err(format!("png: {e}"))
}

fn write_png<W: Write>(w: W, width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(data).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

/// Decoded PNG: width, height, samples per pixel, bit depth, raw bytes.
fn decode_png<R: Read>(r: R) -> Result<(usize, usize, usize, png::BitDepth, Vec<u8>)> {
    let mut dec = png::Decoder::new(r);
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(png_err)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    buf.truncate(info.buffer_size());
    Ok((
        info.width as usize,
        info.height as usize,
        info.color_type.samples(),
        info.bit_depth,
        buf,
    ))
}

/// 16-bit RGB: `R = u`, `G = v` stored as `round(f·64 + 2¹⁵)`, `B` = validity.
pub fn write_kitti_png<W: Write>(w: W, flow: &FlowField, valid: &[bool]) -> Result<()> {
    let n = flow.width() * flow.height();
    if valid.len() != n {
        return Err(invalid(format!("validity mask has {} entries, flow has {n}", valid.len())));
    }
    let mut data = Vec::with_capacity(6 * n);
    for p in 0..n {
        for f in [flow.u()[p], flow.v()[p]] {
            if !(f.abs() < 512.0) {
                return Err(invalid(format!("flow component {f} outside (-512, 512)")));
            }
            let q = (f64::from(f) * KITTI_SCALE + KITTI_OFFSET).round() as u16;
            data.extend(q.to_be_bytes());
        }
        data.extend(u16::from(valid[p]).to_be_bytes());
    }
    write_png(w, flow.width(), flow.height(), png::ColorType::Rgb, png::BitDepth::Sixteen, &data)
}

pub fn read_kitti_png<R: Read>(r: R) -> Result<(FlowField, Vec<bool>)> {
    let (width, height, samples, depth, buf) = decode_png(r)?;
    if depth != png::BitDepth::Sixteen || samples != 3 {
        return Err(format_err("KITTI flow PNG must be 16-bit RGB"));
    }
    let n = width * height;
    let word = |i: usize| u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]);
    let decode = |q: u16| ((f64::from(q) - KITTI_OFFSET) / KITTI_SCALE) as f32;
    let u: Vec<f32> = (0..n).map(|p| decode(word(3 * p))).collect();
    let v: Vec<f32> = (0..n).map(|p| decode(word(3 * p + 1))).collect();
    let valid = (0..n).map(|p| word(3 * p + 2) != 0).collect();
    Ok((FlowField::from_planes(width, height, &u, &v)?, valid))
}

pub fn save_kitti_png(path: impl AsRef<Path>, flow: &FlowField, valid: &[bool]) -> Result<()> {
    write_kitti_png(BufWriter::new(File::create(path)?), flow, valid)
}

pub fn load_kitti_png(path: impl AsRef<Path>) -> Result<(FlowField, Vec<bool>)> {
    read_kitti_png(BufReader::new(File::open(path)?))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit PNG from a `[C, H, W]` image with 1 (grey) or 3 (RGB) channels.
pub fn write_image_png<W: Write>(w: W, image: &Tensor) -> Result<()> {
    let (c, h, wd) = match image.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(invalid(format!("expected [C, H, W] image, got {s:?}"))),
    };
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(invalid(format!("cannot store {c}-channel image as PNG"))),
    };
    let plane = h * wd;
    let mut data = Vec::with_capacity(c * plane);
    for p in 0..plane {
        for ch in 0..c {
            data.push(to_u8(image.data()[ch * plane + p]));
        }
    }
    write_png(w, wd, h, color, png::BitDepth::Eight, &data)
}

/// Reads a PNG as a `[C, H, W]` image in `[0, 1]`; alpha is dropped.
pub fn read_image_png<R: Read>(r: R) -> Result<Tensor> {
    let (width, height, samples, depth, buf) = decode_png(r)?;
    let (bytes, max) = match depth {
        png::BitDepth::Eight => (1, 255.0),
        png::BitDepth::Sixteen => (2, 65535.0),
        _ => return Err(format_err("unsupported PNG bit depth")),
    };
    let channels = match samples {
        1 | 2 => 1,
        _ => 3,
    };
    let plane = width * height;
    let sample = |i: usize| -> f32 {
        if bytes == 1 {
            f32::from(buf[i])
        } else {
            f32::from(u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]))
        }
    };
    Ok(Tensor::from_fn(&[channels, height, width], |i| {
        let (c, p) = (i / plane, i % plane);
        sample(p * samples + c) / max
    }))
}

pub fn save_image_png(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    write_image_png(BufWriter::new(File::create(path)?), image)
}

pub fn load_image_png(path: impl AsRef<Path>) -> Result<Tensor> {
    read_image_png(BufReader::new(File::open(path)?))
}

/// Grey 8-bit PNG, 255 for visible and 0 for occluded.
pub fn write_occlusion_png<W: Write>(w: W, occ: &OcclusionMap) -> Result<()> {
    let image = Tensor::new(&[1, occ.height(), occ.width()], occ.data().to_vec())?;
    write_image_png(w, &image)
}

pub fn read_occlusion_png<R: Read>(r: R) -> Result<OcclusionMap> {
    let image = read_image_png(r)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = image.data()[..h * w].to_vec();
    OcclusionMap::new(w, h, plane)
}

pub fn save_occlusion_png(path: impl AsRef<Path>, occ: &OcclusionMap) -> Result<()> {
    write_occlusion_png(BufWriter::new(File::create(path)?), occ)
}

pub fn load_occlusion_png(path: impl AsRef<Path>) -> Result<OcclusionMap> {
    read_occlusion_png(BufReader::new(File::open(path)?))
}

/// One line of a dataset manifest: `I1 I2 [flow [occ]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub i1: PathBuf,
    pub i2: PathBuf,
    pub flow: Option<PathBuf>,
    pub occ: Option<PathBuf>,
}

/// Parses a manifest; relative paths are resolved against `base`. Blank
/// lines and lines starting with `#` are skipped.
pub fn read_manifest<R: Read>(mut r: R, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<PathBuf> = line.split_whitespace().map(|f| base.join(f)).collect();
        if !(2..=4).contains(&fields.len()) {
            return Err(format_err(format!(
                "manifest line {}: expected 2 to 4 paths, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let mut it = fields.into_iter();
        out.push(ManifestEntry {
            i1: it.next().expect("checked"),
            i2: it.next().expect("checked"),
            flow: it.next(),
            occ: it.next(),
        });
    }
    Ok(out)
}

pub fn write_manifest<W: Write>(mut w: W, entries: &[ManifestEntry]) -> Result<()> {
    for e in entries {
        let mut fields = vec![&e.i1, &e.i2];
        fields.extend(e.flow.iter());
        if e.flow.is_some() {
            fields.extend(e.occ.iter());
        }
        let line: Vec<String> = fields.iter().map(|p| p.display().to_string()).collect();
        if line.iter().any(|f| f.contains(char::is_whitespace)) {
            return Err(invalid("manifest paths must not contain whitespace"));
        }
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}
