use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use flowforge::data::{
    flow_to_color, generate_batch, load_flo, load_image_png, load_occlusion_png, read_manifest, save_flo,
    save_image_png, save_occlusion_png, write_manifest, ManifestEntry, OcclusionMap, Sample,
};
use flowforge::net::{predict, predict_bidirectional, NetworkParams};
use flowforge::tensor::read_checkpoint;
use flowforge::traineval::{eval_set, predict_samples, preprocess, score, train_until, DataSource, TrainState};
use flowforge::warp::{occlusion_map_of, FlowField};
use flowforge::{FlowError, Tensor};
use log::info;
use serde_json::json;

use crate::config::RunConfig;
use crate::CliError;

const GEN_CHUNK: usize = 64;

pub fn gen_data(cfg: &RunConfig, out: &Path, count: usize, seed: u64) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(count);
    for start in (0..count).step_by(GEN_CHUNK) {
        let n = GEN_CHUNK.min(count - start);
        let batch = generate_batch(&cfg.data, seed.wrapping_add(start as u64), n)?;
        for (k, s) in batch.iter().enumerate() {
            let i = start + k;
            let names = [
                format!("{i:06}_img1.png"),
                format!("{i:06}_img2.png"),
                format!("{i:06}_flow.flo"),
                format!("{i:06}_occ.png"),
            ];
            save_image_png(out.join(&names[0]), &s.i1)?;
            save_image_png(out.join(&names[1]), &s.i2)?;
            save_flo(out.join(&names[2]), s.gt_flow.as_ref().expect("generated samples carry gt"))?;
            save_occlusion_png(out.join(&names[3]), s.gt_occ.as_ref().expect("generated samples carry gt"))?;
            let [a, b, f, o] = names.map(PathBuf::from);
            entries.push(ManifestEntry {
                i1: a,
                i2: b,
                flow: Some(f),
                occ: Some(o),
            });
        }
    }
    write_manifest(BufWriter::new(File::create(out.join("manifest.txt"))?), &entries)?;
    info!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn load_entries(manifest: &Path) -> Result<Vec<ManifestEntry>, CliError> {
    let base = manifest.parent().unwrap_or(Path::new(""));
    Ok(read_manifest(BufReader::new(File::open(manifest)?), base)?)
}

fn load_sample(e: &ManifestEntry, index: usize) -> Result<Sample, CliError> {
    let i1 = load_image_png(&e.i1)?;
    let i2 = load_image_png(&e.i2)?;
    if i1.shape() != i2.shape() {
        return Err(FlowError::InvalidArgument(format!(
            "{} and {} differ in size",
            e.i1.display(),
            e.i2.display()
        ))
        .into());
    }
    Ok(Sample {
        i1,
        i2,
        gt_flow: e.flow.as_ref().map(load_flo).transpose()?,
        gt_occ: e.occ.as_ref().map(load_occlusion_png).transpose()?,
        gt_flow_backward: None,
        seed: index as u64,
    })
}

fn load_samples(manifest: &Path) -> Result<Vec<Sample>, CliError> {
    load_entries(manifest)?
        .iter()
        .enumerate()
        .map(|(i, e)| load_sample(e, i))
        .collect()
}

/// Writes through a temporary file so an interrupted run keeps the old checkpoint.
fn save_state(state: &TrainState, path: &Path) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        state.write(&mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn train(
    cfg: &RunConfig,
    data: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
    log_path: Option<&Path>,
    until: Option<usize>,
) -> Result<(), CliError> {
    let source = match data {
        Some(m) => DataSource::Samples(load_samples(m)?),
        None => DataSource::Synthetic(cfg.data.clone()),
    };
    let eval = eval_set(&cfg.train, &source)?;
    let mut state = match resume {
        Some(p) => TrainState::read(BufReader::new(File::open(p)?), &cfg.net)?,
        None => TrainState::new(&cfg.net, cfg.train.seed)?,
    };
    if state.step >= cfg.train.steps {
        info!("checkpoint is at step {}, nothing to do", state.step);
    }
    let mut sink: Box<dyn Write> = match log_path {
        Some(p) => {
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(resume.is_some())
                .truncate(resume.is_none())
                .open(p)?;
            Box::new(BufWriter::new(f))
        }
        None => Box::new(std::io::stdout()),
    };
    let every = cfg.train.log_every;
    let total = cfg.train.steps;
    let end = until.unwrap_or(total).min(total);
    train_until(&cfg.train, &cfg.net, &source, &eval, &mut state, end, |rec, st| {
        if rec.step % every == 0 || rec.step == end {
            writeln!(sink, "{rec}")?;
            sink.flush()?;
            info!("step {}/{total} loss {:.5}", rec.step, rec.loss);
            save_state(st, out).map_err(|e| FlowError::Checkpoint(e.to_string()))?;
        }
        Ok(())
    })?;
    save_state(&state, out)?;
    Ok(())
}

fn load_params(cfg: &RunConfig, checkpoint: &Path) -> Result<NetworkParams, CliError> {
    let named = read_checkpoint(BufReader::new(File::open(checkpoint)?))?;
    Ok(NetworkParams::from_named(&cfg.net, &named)?)
}

fn network_input(cfg: &RunConfig, image: &Tensor) -> Result<Tensor, CliError> {
    if image.shape()[0] != cfg.net.input_channels {
        return Err(FlowError::InvalidArgument(format!(
            "image has {} channels, network expects {}",
            image.shape()[0],
            cfg.net.input_channels
        ))
        .into());
    }
    Ok(flowforge::data::as_batch(&preprocess(image, cfg.train.equalize)?)?)
}

pub fn infer(
    cfg: &RunConfig,
    checkpoint: &Path,
    i1: &Path,
    i2: &Path,
    out: &Path,
    viz: Option<&Path>,
    occ: Option<&Path>,
) -> Result<(), CliError> {
    let params = load_params(cfg, checkpoint)?;
    let a = load_image_png(i1)?;
    let b = load_image_png(i2)?;
    if a.shape() != b.shape() {
        return Err(FlowError::InvalidArgument("input images differ in size".into()).into());
    }
    let a = network_input(cfg, &a)?;
    let b = network_input(cfg, &b)?;
    let flow = if let Some(occ_path) = occ {
        let (mut fwd, mut bwd) = predict_bidirectional(&params, &cfg.net, &a, &b)?;
        let backward = bwd.remove(0);
        let map = OcclusionMap::new(backward.width(), backward.height(), occlusion_map_of(&backward)?)?;
        save_occlusion_png(occ_path, &map)?;
        fwd.remove(0)
    } else {
        predict(&params, &cfg.net, &a, &b)?.remove(0)
    };
    save_flo(out, &flow)?;
    if let Some(v) = viz {
        save_image_png(v, &flow_to_color(&flow, None))?;
    }
    Ok(())
}

fn predictions_from_dir(dir: &Path, count: usize) -> Result<Vec<(FlowField, Option<OcclusionMap>)>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == "flo"))
        .collect();
    files.sort();
    if files.len() != count {
        return Err(FlowError::InvalidArgument(format!(
            "{} predictions in {} but {count} ground-truth samples",
            files.len(),
            dir.display()
        ))
        .into());
    }
    files
        .iter()
        .map(|f| {
            let stem = f.file_stem().unwrap_or_default().to_string_lossy();
            let occ_path = f.with_file_name(format!("{stem}_occ.png"));
            let occ = if occ_path.exists() {
                Some(load_occlusion_png(&occ_path)?)
            } else {
                None
            };
            Ok((load_flo(f)?, occ))
        })
        .collect()
}

fn fmt_opt(v: Option<f32>) -> String {
    v.map_or_else(|| "nan".to_string(), |f| format!("{f:.4}"))
}

pub fn eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    pred_dir: Option<&Path>,
    gt: &Path,
    json_lines: bool,
) -> Result<(), CliError> {
    let samples = load_samples(gt)?;
    let preds = match (checkpoint, pred_dir) {
        (Some(c), _) => {
            let params = load_params(cfg, c)?;
            predict_samples(&params, &cfg.net, &samples, cfg.train.equalize)?
                .into_iter()
                .map(|(f, o)| (f, Some(o)))
                .collect()
        }
        (None, Some(d)) => predictions_from_dir(d, samples.len())?,
        (None, None) => return Err(FlowError::InvalidArgument("need --checkpoint or --pred-dir".into()).into()),
    };
    let report = score(&preds, &samples)?;
    let mut out = std::io::stdout().lock();
    for (i, s) in report.samples.iter().enumerate() {
        if json_lines {
            writeln!(out, "{}", json!({"sample": i, "epe": s.epe, "fl_all": s.fl_all, "f_measure": s.f_measure}))?;
        } else {
            writeln!(
                out,
                "sample {i} epe {:.4} fl_all {:.2} f_measure {}",
                s.epe,
                s.fl_all,
                fmt_opt(s.f_measure)
            )?;
        }
    }
    if json_lines {
        writeln!(
            out,
            "{}",
            json!({"summary": true, "count": report.samples.len(), "epe": report.epe, "fl_all": report.fl_all, "f_measure": report.f_measure})
        )?;
    } else {
        writeln!(
            out,
            "mean count {} epe {:.4} fl_all {:.2} f_measure {}",
            report.samples.len(),
            report.epe,
            report.fl_all,
            fmt_opt(report.f_measure)
        )?;
    }
    Ok(())
}

pub fn viz(flow: &Path, out: &Path, max_mag: Option<f32>) -> Result<(), CliError> {
    let f = load_flo(flow)?;
    save_image_png(out, &flow_to_color(&f, max_mag))?;
    Ok(())
}
