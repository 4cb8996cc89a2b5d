//! Flat `key = value` configuration files.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored. Every
//! field of [`TrainConfig`] and [`SyntheticSpec`] is addressable; unknown or
//! repeated keys and unparsable values are errors carrying the line number.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::stde::StdeOptions;
use crate::synthetic::SyntheticSpec;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KvEntry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse_kv(text: &str) -> Result<Vec<KvEntry>> {
    let mut out: Vec<KvEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(Error::Config {
                line,
                detail: format!("expected key = value, got {content:?}"),
            });
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config {
                line,
                detail: "empty key".into(),
            });
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::Config {
                line,
                detail: format!("duplicate key {key:?} (first set on line {})", prev.line),
            });
        }
        out.push(KvEntry {
            line,
            key: key.to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

/// Parses `key=value` command-line overrides; the line number is the argument position.
pub fn parse_overrides(pairs: &[String]) -> Result<Vec<KvEntry>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (k, v) = p.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                detail: format!("override {p:?} is not key=value"),
            })?;
            Ok(KvEntry {
                line: i + 1,
                key: k.trim().to_string(),
                value: v.trim().to_string(),
            })
        })
        .collect()
}

fn parse_value<T: FromStr>(e: &KvEntry) -> Result<T>
where
    T::Err: Display,
{
    e.value.parse().map_err(|err| Error::Config {
        line: e.line,
        detail: format!("{}: cannot parse {:?}: {err}", e.key, e.value),
    })
}

fn parse_bool(e: &KvEntry) -> Result<bool> {
    match e.value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config {
            line: e.line,
            detail: format!("{}: expected a boolean, got {:?}", e.key, e.value),
        }),
    }
}

fn parse_list(e: &KvEntry) -> Result<Vec<usize>> {
    if e.value.is_empty() {
        return Ok(Vec::new());
    }
    e.value
        .split(',')
        .map(|part| {
            part.trim().parse().map_err(|err| Error::Config {
                line: e.line,
                detail: format!("{}: bad list item {part:?}: {err}", e.key),
            })
        })
        .collect()
}

/// `a-b` inclusive ranges and single frames, comma separated.
fn parse_frames(e: &KvEntry) -> Result<Vec<usize>> {
    let bad = |detail: String| Error::Config { line: e.line, detail };
    let mut frames = Vec::new();
    for part in e.value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (lo, hi) = match part.split_once('-') {
            Some((a, b)) => (a.trim(), b.trim()),
            None => (part, part),
        };
        let lo: usize = lo.parse().map_err(|err| bad(format!("{}: bad frame {lo:?}: {err}", e.key)))?;
        let hi: usize = hi.parse().map_err(|err| bad(format!("{}: bad frame {hi:?}: {err}", e.key)))?;
        if hi < lo {
            return Err(bad(format!("{}: empty range {part:?}", e.key)));
        }
        frames.extend(lo..=hi);
    }
    frames.sort_unstable();
    frames.dedup();
    Ok(frames)
}

fn format_frames(frames: &[usize]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < frames.len() {
        let mut j = i;
        while j + 1 < frames.len() && frames[j + 1] == frames[j] + 1 {
            j += 1;
        }
        parts.push(if i == j {
            frames[i].to_string()
        } else {
            format!("{}-{}", frames[i], frames[j])
        });
        i = j + 1;
    }
    parts.join(",")
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn unknown(e: &KvEntry) -> Error {
    Error::Config {
        line: e.line,
        detail: format!("unknown key {:?}", e.key),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Epoch budget.
    pub epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Samples per clip at evaluation.
    pub s_m: usize,
    /// Samples per clip during validation.
    pub val_s_m: usize,
    pub seed: u64,
    /// Use the literal decreasing orientation of the logistic remap.
    pub decreasing_remap: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 200,
            patience: 30,
            grad_clip: 5.0,
            s_m: 8,
            val_s_m: 1,
            seed: 0,
            decreasing_remap: false,
        }
    }
}

impl TrainConfig {
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&parse_kv(text)?)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_text(&text)
    }

    pub fn apply(&mut self, entries: &[KvEntry]) -> Result<()> {
        for e in entries {
            let m = &mut self.model;
            match e.key.as_str() {
                "batch_size" => self.batch_size = parse_value(e)?,
                "lr" => self.lr = parse_value(e)?,
                "weight_decay" => self.weight_decay = parse_value(e)?,
                "beta1" => self.beta1 = parse_value(e)?,
                "beta2" => self.beta2 = parse_value(e)?,
                "adam_eps" => self.adam_eps = parse_value(e)?,
                "epochs" => self.epochs = parse_value(e)?,
                "patience" => self.patience = parse_value(e)?,
                "grad_clip" => self.grad_clip = parse_value(e)?,
                "s_m" => self.s_m = parse_value(e)?,
                "val_s_m" => self.val_s_m = parse_value(e)?,
                "seed" => self.seed = parse_value(e)?,
                "decreasing_remap" => self.decreasing_remap = parse_bool(e)?,
                "level_channels" => m.level_channels = parse_list(e)?,
                "multilevel" => m.stde.multilevel = parse_bool(e)?,
                "temporal_diff" => m.stde.temporal_diff = parse_bool(e)?,
                "head_on_primary" => m.stde.head_on_primary = parse_bool(e)?,
                "stde_hidden" => m.stde_hidden = parse_value(e)?,
                "channels" => m.channels = parse_value(e)?,
                "heads" => m.heads = parse_value(e)?,
                "ff_width" => m.ff_width = parse_value(e)?,
                "tct_hidden" => m.tct_hidden = parse_value(e)?,
                "pure_encoder" => m.pure_encoder = parse_bool(e)?,
                "zero_token_target" => m.zero_token_target = parse_bool(e)?,
                "use_tct" => m.use_tct = parse_bool(e)?,
                "s0" => m.s0 = parse_value(e)?,
                _ => return Err(unknown(e)),
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 || self.s_m == 0 || self.val_s_m == 0 {
            return bad("batch_size, epochs, patience, s_m and val_s_m must be positive".into());
        }
        for (name, v) in [("lr", self.lr), ("weight_decay", self.weight_decay), ("grad_clip", self.grad_clip)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        self.model.validate()
    }

    /// Canonical text form; parsing it back yields an identical config.
    pub fn to_kv_text(&self) -> String {
        let m = &self.model;
        let s: &StdeOptions = &m.stde;
        let rows: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("epochs", self.epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("s_m", self.s_m.to_string()),
            ("val_s_m", self.val_s_m.to_string()),
            ("decreasing_remap", self.decreasing_remap.to_string()),
            ("level_channels", join(&m.level_channels)),
            ("multilevel", s.multilevel.to_string()),
            ("temporal_diff", s.temporal_diff.to_string()),
            ("head_on_primary", s.head_on_primary.to_string()),
            ("stde_hidden", m.stde_hidden.to_string()),
            ("channels", m.channels.to_string()),
            ("heads", m.heads.to_string()),
            ("ff_width", m.ff_width.to_string()),
            ("tct_hidden", m.tct_hidden.to_string()),
            ("pure_encoder", m.pure_encoder.to_string()),
            ("zero_token_target", m.zero_token_target.to_string()),
            ("use_tct", m.use_tct.to_string()),
            ("s0", m.s0.to_string()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn apply_synthetic(spec: &mut SyntheticSpec, entries: &[KvEntry]) -> Result<()> {
    for e in entries {
        match e.key.as_str() {
            "n_frames" => spec.n_frames = parse_value(e)?,
            "channels" => spec.channels = parse_list(e)?,
            "spatial_hw" => {
                spec.spatial_hw = if e.value.eq_ignore_ascii_case("none") {
                    None
                } else {
                    let (h, w) = e.value.split_once('x').ok_or_else(|| Error::Config {
                        line: e.line,
                        detail: format!("spatial_hw: expected HxW or none, got {:?}", e.value),
                    })?;
                    let h = KvEntry { value: h.trim().into(), ..e.clone() };
                    let w = KvEntry { value: w.trim().into(), ..e.clone() };
                    Some((parse_value(&h)?, parse_value(&w)?))
                }
            }
            "theme_vector_dim" => spec.theme_vector_dim = parse_value(e)?,
            "theme_topics" => spec.theme_topics = parse_value(e)?,
            "distortion_burst_rate" => spec.distortion_burst_rate = parse_value(e)?,
            "burst_rate_spread" => spec.burst_rate_spread = parse_value(e)?,
            "burst_len" => spec.burst_len = parse_value(e)?,
            "burst_amplitude" => spec.burst_amplitude = parse_value(e)?,
            "flicker_floor" => spec.flicker_floor = parse_value(e)?,
            "clip_offset" => spec.clip_offset = parse_value(e)?,
            "theme_segments" => spec.theme_segments = parse_frames(e)?,
            "theme_fraction" => spec.theme_fraction = parse_value(e)?,
            "theme_block" => spec.theme_block = parse_value(e)?,
            "importance_floor" => spec.importance_floor = parse_value(e)?,
            "noise_scale" => spec.noise_scale = parse_value(e)?,
            "world_seed" => spec.world_seed = parse_value(e)?,
            _ => return Err(unknown(e)),
        }
    }
    spec.validate()
}

pub fn synthetic_from_kv_text(text: &str) -> Result<SyntheticSpec> {
    let mut spec = SyntheticSpec::default();
    apply_synthetic(&mut spec, &parse_kv(text)?)?;
    Ok(spec)
}

pub fn synthetic_to_kv_text(spec: &SyntheticSpec) -> String {
    let hw = match spec.spatial_hw {
        Some((h, w)) => format!("{h}x{w}"),
        None => "none".into(),
    };
    let rows = [
        ("n_frames", spec.n_frames.to_string()),
        ("channels", join(&spec.channels)),
        ("spatial_hw", hw),
        ("theme_vector_dim", spec.theme_vector_dim.to_string()),
        ("theme_topics", spec.theme_topics.to_string()),
        ("distortion_burst_rate", spec.distortion_burst_rate.to_string()),
        ("burst_rate_spread", spec.burst_rate_spread.to_string()),
        ("burst_len", spec.burst_len.to_string()),
        ("burst_amplitude", spec.burst_amplitude.to_string()),
        ("flicker_floor", spec.flicker_floor.to_string()),
        ("clip_offset", spec.clip_offset.to_string()),
        ("theme_segments", format_frames(&spec.theme_segments)),
        ("theme_fraction", spec.theme_fraction.to_string()),
        ("theme_block", spec.theme_block.to_string()),
        ("importance_floor", spec.importance_floor.to_string()),
        ("noise_scale", spec.noise_scale.to_string()),
        ("world_seed", spec.world_seed.to_string()),
    ];
    rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
