//! Sectioned `key = value` run configuration.
//!
//! ```text
//! # comment
//! [data]
//! width = 64
//! [train]
//! steps = 2000
//! ```

use std::fmt::Write as _;
use std::str::FromStr;

use flowforge::data::{BackgroundMode, ShapesConfig};
use flowforge::loss::{LossWeights, OcclusionHandling};
use flowforge::net::NetConfig;
use flowforge::traineval::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {value:?} ({msg})")]
    BadValue { key: String, value: String, msg: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: ShapesConfig,
    /// Base seed of generated datasets (`gen-data`).
    pub data_seed: u64,
    pub net: NetConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: ShapesConfig::default(),
            data_seed: 0,
            net: NetConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        msg: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            msg: "expected a boolean".into(),
        }),
    }
}

pub fn parse_occlusion(key: &str, value: &str) -> Result<OcclusionHandling, ConfigError> {
    match value {
        "off" => Ok(OcclusionHandling::Off),
        "on" | "detached" => Ok(OcclusionHandling::Detached),
        "differentiable" => Ok(OcclusionHandling::Differentiable),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            msg: "expected off, on, detached or differentiable".into(),
        }),
    }
}

fn occlusion_name(o: OcclusionHandling) -> &'static str {
    match o {
        OcclusionHandling::Off => "off",
        OcclusionHandling::Detached => "detached",
        OcclusionHandling::Differentiable => "differentiable",
    }
}

impl RunConfig {
    /// Parses a config file on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line: i + 1,
                    msg: format!("unterminated section header {line:?}"),
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            if section.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: "key outside of any section".into(),
                });
            }
            cfg.set(&format!("{section}.{}", key.trim()), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets `section.key` to `value`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let d = &mut self.data;
        let n = &mut self.net;
        let t = &mut self.train;
        match key {
            "data.width" => d.width = parse(key, value)?,
            "data.height" => d.height = parse(key, value)?,
            "data.channels" => d.channels = parse(key, value)?,
            "data.min_shapes" => d.min_shapes = parse(key, value)?,
            "data.max_shapes" => d.max_shapes = parse(key, value)?,
            "data.max_displacement" => d.max_displacement = parse(key, value)?,
            "data.background_displacement" => d.background_displacement = parse(key, value)?,
            "data.background" => {
                d.background = match value {
                    "textured" => BackgroundMode::Textured,
                    "flat" => BackgroundMode::Flat,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            msg: "expected textured or flat".into(),
                        })
                    }
                }
            }
            "data.noise" => d.noise = parse(key, value)?,
            "data.seed" => self.data_seed = parse(key, value)?,
            "net.num_scales" => n.num_scales = parse(key, value)?,
            "net.base_channels" => n.base_channels = parse(key, value)?,
            "net.leaky_slope" => n.leaky_slope = parse(key, value)?,
            "net.warped_inputs" => n.warped_inputs = parse_bool(key, value)?,
            "train.steps" => t.steps = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.learning_rate" => t.learning_rate = parse(key, value)?,
            "train.beta1" => t.adam.beta1 = parse(key, value)?,
            "train.beta2" => t.adam.beta2 = parse(key, value)?,
            "train.eps" => t.adam.eps = parse(key, value)?,
            "train.radius" => t.radius = parse(key, value)?,
            "train.occlusion" => t.occlusion = parse_occlusion(key, value)?,
            "train.hflip" => t.hflip = parse_bool(key, value)?,
            "train.vflip" => t.vflip = parse_bool(key, value)?,
            "train.equalize" => t.equalize = parse_bool(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.log_every" => t.log_every = parse(key, value)?,
            "train.eval_samples" => t.eval_samples = parse(key, value)?,
            "train.schedule_finest" => t.schedule.finest = parse(key, value)?,
            "train.schedule_ratio" => t.schedule.ratio = parse(key, value)?,
            "train.schedule_ramp_end" => t.schedule.ramp_end = parse(key, value)?,
            "loss.preset" => {
                t.weights = LossWeights::preset(value).ok_or_else(|| ConfigError::BadValue {
                    key: key.into(),
                    value: value.into(),
                    msg: "expected chairs, sintel or kitti".into(),
                })?
            }
            "loss.brightness" => t.weights.brightness = parse(key, value)?,
            "loss.gradient" => t.weights.gradient = parse(key, value)?,
            "loss.smooth1" => t.weights.smooth1 = parse(key, value)?,
            "loss.smooth2" => t.weights.smooth2 = parse(key, value)?,
            "loss.alpha" => t.weights.alpha = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Applies `section.key=value` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: 0,
                msg: format!("override {o:?} is not key=value"),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Checks cross-field consistency after all overrides.
    pub fn validate(&mut self) -> Result<(), ConfigError> {
        self.net.input_channels = self.data.channels;
        self.net.enlarged_radius = self.train.radius;
        let invalid = |e: flowforge::FlowError| ConfigError::Invalid(e.to_string());
        self.data.validate().map_err(invalid)?;
        self.net.validate().map_err(invalid)?;
        self.net.check_dims(self.data.height, self.data.width).map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        Ok(())
    }

    /// The full configuration in file syntax.
    pub fn to_text(&self) -> String {
        let (d, n, t) = (&self.data, &self.net, &self.train);
        let mut s = String::new();
        let _ = writeln!(s, "[data]");
        let _ = writeln!(s, "width = {}\nheight = {}\nchannels = {}", d.width, d.height, d.channels);
        let _ = writeln!(s, "min_shapes = {}\nmax_shapes = {}", d.min_shapes, d.max_shapes);
        let _ = writeln!(
            s,
            "max_displacement = {}\nbackground_displacement = {}",
            d.max_displacement, d.background_displacement
        );
        let bg = match d.background {
            BackgroundMode::Textured => "textured",
            BackgroundMode::Flat => "flat",
        };
        let _ = writeln!(s, "background = {bg}\nnoise = {}\nseed = {}", d.noise, self.data_seed);
        let _ = writeln!(s, "\n[net]");
        let _ = writeln!(
            s,
            "num_scales = {}\nbase_channels = {}\nleaky_slope = {}\nwarped_inputs = {}",
            n.num_scales, n.base_channels, n.leaky_slope, n.warped_inputs
        );
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(
            s,
            "steps = {}\nbatch_size = {}\nlearning_rate = {}",
            t.steps, t.batch_size, t.learning_rate
        );
        let _ = writeln!(s, "beta1 = {}\nbeta2 = {}\neps = {}", t.adam.beta1, t.adam.beta2, t.adam.eps);
        let _ = writeln!(s, "radius = {}\nocclusion = {}", t.radius, occlusion_name(t.occlusion));
        let _ = writeln!(s, "hflip = {}\nvflip = {}\nequalize = {}", t.hflip, t.vflip, t.equalize);
        let _ = writeln!(
            s,
            "seed = {}\nlog_every = {}\neval_samples = {}",
            t.seed, t.log_every, t.eval_samples
        );
        let _ = writeln!(
            s,
            "schedule_finest = {}\nschedule_ratio = {}\nschedule_ramp_end = {}",
            t.schedule.finest, t.schedule.ratio, t.schedule.ramp_end
        );
        let w = t.weights;
        let _ = writeln!(s, "\n[loss]");
        let _ = writeln!(
            s,
            "brightness = {}\ngradient = {}\nsmooth1 = {}\nsmooth2 = {}\nalpha = {}",
            w.brightness, w.gradient, w.smooth1, w.smooth2, w.alpha
        );
        s
    }
}
