//! Seeded synthetic feature clips with planted quality structure.
//!
//! Each clip mixes two effects into its per-level features:
//!
//! * **Distortion bursts.** Runs of `burst_len` frames flicker along a fixed
//!   per-level direction with alternating sign, producing large frame-to-frame
//!   jumps on top of a per-clip static offset. Low levels carry the flicker
//!   strongly, the top level not at all by default.
//! * **Theme relevance.** A clip-level unit theme vector θ is shown on the
//!   theme frames; the other frames show unrelated distractor content. Frame
//!   importance is `floor + max(0, cos(cᵢ, θ))`. High levels carry content
//!   strongly, low levels weakly.
//!
//! The label is `mos = 5 − 4·clamp(Σ impᵢ·burstᵢ / Σ impᵢ, 0, 1)`, so predicting
//! it well needs both a per-frame distortion detector and a content-aware
//! weighting of frames. The projection matrices that turn latent content into
//! features are drawn from `world_seed` and shared by every clip.

use crate::error::{Error, Result};
use crate::features::{FeatureClip, LevelBlock};
use crate::rng::SplitMix64;

pub const BASE_QUALITY: f64 = 5.0;
pub const QUALITY_SPAN: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_frames: usize,
    /// Channel width per level; the level count is its length.
    pub channels: Vec<usize>,
    /// When set, every level but the last is stored as an `h × w` spatial map.
    pub spatial_hw: Option<(usize, usize)>,
    pub theme_vector_dim: usize,
    /// 0: every clip draws a random theme and random distractors. `K ≥ 2`:
    /// theme and distractors are drawn from `K` orthonormal topics (the first
    /// latent axes), so a frame is relevant iff it shows the clip's theme topic.
    pub theme_topics: usize,
    /// Mean per-block burst probability.
    pub distortion_burst_rate: f64,
    /// Each clip draws its burst probability uniformly from
    /// `rate·[1 − spread, 1 + spread]`. Small spreads keep clip-level burst
    /// counts similar, so *where* bursts land (theme or not) drives the label.
    pub burst_rate_spread: f64,
    pub burst_len: usize,
    pub burst_amplitude: f64,
    /// Flicker gain of the top level; level `l` of `L` gets
    /// `flicker_floor + 1 − (l+1)/L`.
    pub flicker_floor: f64,
    /// Each clip adds a static offset `U(−1, 1)·clip_offset·burst_amplitude`
    /// along every level's flicker direction, so a single frame's offset says
    /// little and bursts show mainly as frame-to-frame jumps.
    pub clip_offset: f64,
    /// Explicit theme frames. Empty means a random `theme_fraction` of
    /// `theme_block`-frame blocks per clip.
    pub theme_segments: Vec<usize>,
    pub theme_fraction: f64,
    pub theme_block: usize,
    pub importance_floor: f64,
    pub noise_scale: f64,
    pub world_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_frames: 64,
            channels: vec![8, 8, 16, 16],
            spatial_hw: Some((2, 2)),
            theme_vector_dim: 8,
            theme_topics: 4,
            distortion_burst_rate: 0.3,
            burst_rate_spread: 0.5,
            burst_len: 4,
            burst_amplitude: 2.0,
            flicker_floor: 0.0,
            clip_offset: 1.0,
            theme_segments: Vec::new(),
            theme_fraction: 0.5,
            theme_block: 8,
            importance_floor: 0.05,
            noise_scale: 0.05,
            world_seed: 0x00D1_5C0F,
        }
    }
}

impl SyntheticSpec {
    /// Channel widths of a four-stage tiny hierarchical vision backbone.
    pub fn backbone_widths() -> Vec<usize> {
        vec![96, 192, 384, 768]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n_frames == 0 {
            return bad("n_frames must be positive".into());
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!("channels {:?} must be nonempty and positive", self.channels));
        }
        if let Some((h, w)) = self.spatial_hw {
            if h == 0 || w == 0 {
                return bad("spatial map must be at least 1×1".into());
            }
        }
        if self.theme_topics == 1 || self.theme_topics > self.theme_vector_dim {
            return bad(format!(
                "theme_topics {} must be 0 or in [2, theme_vector_dim = {}]",
                self.theme_topics, self.theme_vector_dim
            ));
        }
        if !(0.0..=1.0).contains(&self.burst_rate_spread) {
            return bad(format!("burst_rate_spread {} not in [0,1]", self.burst_rate_spread));
        }
        if self.flicker_floor < 0.0 || self.clip_offset < 0.0 {
            return bad(format!(
                "flicker_floor {} and clip_offset {} must be non-negative",
                self.flicker_floor, self.clip_offset
            ));
        }
        if self.theme_vector_dim == 0 {
            return bad("theme_vector_dim must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.distortion_burst_rate) {
            return bad(format!("distortion_burst_rate {} not in [0,1]", self.distortion_burst_rate));
        }
        if !(self.theme_fraction > 0.0 && self.theme_fraction <= 1.0) {
            return bad(format!("theme_fraction {} not in (0,1]", self.theme_fraction));
        }
        if self.burst_len == 0 || self.theme_block == 0 {
            return bad("burst_len and theme_block must be positive".into());
        }
        if let Some(&f) = self.theme_segments.iter().find(|&&f| f >= self.n_frames) {
            return bad(format!("theme frame {f} outside [0, {})", self.n_frames));
        }
        for (name, v) in [
            ("burst_amplitude", self.burst_amplitude),
            ("importance_floor", self.importance_floor),
            ("noise_scale", self.noise_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if self.importance_floor == 0.0 && self.theme_segments.is_empty() && self.theme_fraction == 0.0 {
            return bad("importance would be identically zero".into());
        }
        Ok(())
    }
}

/// Ground truth recorded alongside each synthetic clip.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTruth {
    pub burst: Vec<bool>,
    pub importance: Vec<f64>,
    pub theme: Vec<bool>,
    pub burst_rate: f64,
}

impl SyntheticTruth {
    pub fn burst_count(&self) -> usize {
        self.burst.iter().filter(|&&b| b).count()
    }

    /// Importance-weighted burst fraction.
    pub fn weighted_burst_fraction(&self) -> f64 {
        let total: f64 = self.importance.iter().sum();
        let hit: f64 = self
            .importance
            .iter()
            .zip(&self.burst)
            .filter(|(_, &b)| b)
            .map(|(w, _)| w)
            .sum();
        if total > 0.0 {
            hit / total
        } else {
            0.0
        }
    }

    pub fn mos(&self) -> f64 {
        BASE_QUALITY - QUALITY_SPAN * self.weighted_burst_fraction().clamp(0.0, 1.0)
    }
}

struct World {
    /// Per level: `theme_dim × c` content projection.
    content: Vec<Vec<f64>>,
    /// Per level: unit flicker direction.
    flicker: Vec<Vec<f64>>,
    content_gain: Vec<f64>,
    flicker_gain: Vec<f64>,
    /// Per spatial level: zero-mean `h·w × c` pattern.
    pattern: Vec<Vec<f64>>,
}

impl World {
    fn new(spec: &SyntheticSpec) -> Self {
        let mut rng = SplitMix64::new(spec.world_seed);
        let levels = spec.channels.len();
        let dim = spec.theme_vector_dim;
        let mut world = World {
            content: Vec::new(),
            flicker: Vec::new(),
            content_gain: Vec::new(),
            flicker_gain: Vec::new(),
            pattern: Vec::new(),
        };
        for (l, &c) in spec.channels.iter().enumerate() {
            let depth = (l + 1) as f64 / levels as f64;
            world.content_gain.push(depth);
            world.flicker_gain.push(spec.flicker_floor + 1.0 - depth);
            let scale = 1.0 / (dim as f64).sqrt();
            world
                .content
                .push((0..dim * c).map(|_| rng.normal() * scale * 2.0).collect());
            world.flicker.push(rng.unit_vector(c));
            let positions = spec.spatial_hw.map_or(1, |(h, w)| h * w);
            let mut pattern: Vec<f64> = (0..positions * c).map(|_| 0.5 * rng.normal()).collect();
            for ch in 0..c {
                let mean = (0..positions).map(|p| pattern[p * c + ch]).sum::<f64>() / positions as f64;
                for p in 0..positions {
                    pattern[p * c + ch] -= mean;
                }
            }
            world.pattern.push(pattern);
        }
        world
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Generates one clip, its mos and the ground-truth sidecar; deterministic in `(spec, seed)`.
pub fn generate_synthetic_clip(
    spec: &SyntheticSpec,
    seed: u64,
    source_id: &str,
) -> Result<(FeatureClip, f64, SyntheticTruth)> {
    spec.validate()?;
    let world = World::new(spec);
    let n = spec.n_frames;
    let dim = spec.theme_vector_dim;
    let mut rng = SplitMix64::new(seed);

    let topic = |j: usize| -> Vec<f64> { (0..dim).map(|d| if d == j { 1.0 } else { 0.0 }).collect() };
    let theme_topic = if spec.theme_topics > 0 { rng.below(spec.theme_topics as u64) as usize } else { 0 };
    let theme_vec = if spec.theme_topics > 0 { topic(theme_topic) } else { rng.unit_vector(dim) };

    let mut theme = vec![false; n];
    if spec.theme_segments.is_empty() {
        let blocks = n.div_ceil(spec.theme_block);
        let wanted = ((spec.theme_fraction * blocks as f64).round() as usize).clamp(1, blocks);
        let mut order: Vec<usize> = (0..blocks).collect();
        rng.shuffle(&mut order);
        for &b in &order[..wanted] {
            for f in b * spec.theme_block..((b + 1) * spec.theme_block).min(n) {
                theme[f] = true;
            }
        }
    } else {
        for &f in &spec.theme_segments {
            theme[f] = true;
        }
    }

    // one distractor per theme block position, so off-theme runs stay coherent
    let mut content = Vec::with_capacity(n);
    let mut distractor: Option<(usize, Vec<f64>)> = None;
    for (f, &on_theme) in theme.iter().enumerate() {
        let base = if on_theme {
            theme_vec.clone()
        } else {
            let block = f / spec.theme_block;
            match &distractor {
                Some((b, v)) if *b == block => v.clone(),
                _ => {
                    let v = if spec.theme_topics > 0 {
                        let other = rng.below(spec.theme_topics as u64 - 1) as usize;
                        topic(if other >= theme_topic { other + 1 } else { other })
                    } else {
                        rng.unit_vector(dim)
                    };
                    distractor = Some((block, v.clone()));
                    v
                }
            }
        };
        let c: Vec<f64> = base.iter().map(|x| x + spec.noise_scale * rng.normal()).collect();
        content.push(c);
    }

    let spread = spec.burst_rate_spread;
    let burst_rate = (spec.distortion_burst_rate * (1.0 - spread + 2.0 * spread * rng.uniform())).min(1.0);
    let mut burst = vec![false; n];
    for start in (0..n).step_by(spec.burst_len) {
        if rng.bernoulli(burst_rate) {
            for b in burst.iter_mut().skip(start).take(spec.burst_len) {
                *b = true;
            }
        }
    }

    let importance: Vec<f64> = content
        .iter()
        .map(|c| {
            let norm = dot(c, c).sqrt();
            let cos = if norm > 0.0 { dot(c, &theme_vec) / norm } else { 0.0 };
            spec.importance_floor + cos.max(0.0)
        })
        .collect();

    let offset = spec.clip_offset * spec.burst_amplitude * (2.0 * rng.uniform() - 1.0);
    let mut levels = Vec::with_capacity(spec.channels.len());
    let last = spec.channels.len() - 1;
    for (l, &ch) in spec.channels.iter().enumerate() {
        let mut pooled = vec![0.0f64; n * ch];
        for f in 0..n {
            let flick = offset
                + if burst[f] {
                    spec.burst_amplitude * if f % 2 == 0 { 1.0 } else { -1.0 }
                } else {
                    0.0
                };
            for k in 0..ch {
                let mut x = 0.0;
                for d in 0..dim {
                    x += content[f][d] * world.content[l][d * ch + k];
                }
                x = world.content_gain[l] * x + world.flicker_gain[l] * flick * world.flicker[l][k];
                pooled[f * ch + k] = x + spec.noise_scale * rng.normal();
            }
        }
        let block = match spec.spatial_hw {
            Some((h, w)) if l < last => {
                let positions = h * w;
                let mut data = Vec::with_capacity(n * positions * ch);
                for f in 0..n {
                    for p in 0..positions {
                        for k in 0..ch {
                            data.push((pooled[f * ch + k] + world.pattern[l][p * ch + k]) as f32);
                        }
                    }
                }
                LevelBlock::Spatial {
                    height: h,
                    width: w,
                    channels: ch,
                    data,
                }
            }
            _ => LevelBlock::Pooled {
                channels: ch,
                data: pooled.iter().map(|&x| x as f32).collect(),
            },
        };
        levels.push(block);
    }

    let truth = SyntheticTruth {
        burst,
        importance,
        theme,
        burst_rate,
    };
    let mos = truth.mos();
    let clip = FeatureClip::new(n, levels, source_id)?;
    Ok((clip, mos, truth))
}

/// One generated corpus member.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub video_id: String,
    pub clip: FeatureClip,
    pub mos: f64,
    pub truth: SyntheticTruth,
}

const CORPUS_STREAM: u64 = 0xC0_4F05;

pub fn corpus_video_id(index: usize) -> String {
    format!("clip_{index:05}")
}

/// Generates `count` clips; clip `i` uses a seed derived from `(seed, i)`, so
/// any prefix of a larger corpus is identical to a smaller one.
pub fn generate_corpus(spec: &SyntheticSpec, count: usize, seed: u64) -> Result<Vec<CorpusItem>> {
    spec.validate()?;
    let root = SplitMix64::new(seed).split(CORPUS_STREAM);
    crate::par::map_range(count, |i| {
        let id = corpus_video_id(i);
        let clip_seed = root.split(i as u64).next_u64();
        let (clip, mos, truth) = generate_synthetic_clip(spec, clip_seed, &id)?;
        Ok(CorpusItem {
            video_id: id,
            clip,
            mos,
            truth,
        })
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::global_average_pool;

    #[test]
    fn clean_static_clip_has_base_quality() {
        let spec = SyntheticSpec {
            distortion_burst_rate: 0.0,
            noise_scale: 0.0,
            theme_fraction: 1.0,
            ..SyntheticSpec::default()
        };
        let (clip, mos, truth) = generate_synthetic_clip(&spec, 3, "c").unwrap();
        assert_eq!(mos, BASE_QUALITY);
        assert_eq!(truth.burst_count(), 0);
        for level in clip.levels() {
            let pooled = global_average_pool(level, clip.n_frames());
            for f in 1..clip.n_frames() {
                assert_eq!(pooled.row_slice(f), pooled.row_slice(0));
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic_clip(&spec, 10, "a").unwrap();
        let b = generate_synthetic_clip(&spec, 10, "a").unwrap();
        let c = generate_synthetic_clip(&spec, 11, "a").unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn mos_matches_closed_form_from_sidecar() {
        let spec = SyntheticSpec::default();
        for seed in 0..50 {
            let (_, mos, truth) = generate_synthetic_clip(&spec, seed, "x").unwrap();
            let num: f64 = (0..spec.n_frames)
                .map(|i| if truth.burst[i] { truth.importance[i] } else { 0.0 })
                .sum();
            let den: f64 = truth.importance.iter().sum();
            let oracle = 5.0 - 4.0 * (num / den).clamp(0.0, 1.0);
            assert!((mos - oracle).abs() < 1e-12);
            assert!((1.0..=5.0).contains(&mos));
        }
    }

    #[test]
    fn burst_count_correlates_negatively_with_mos() {
        let spec = SyntheticSpec::default();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for seed in 0..1000 {
            let (_, mos, truth) = generate_synthetic_clip(&spec, seed, "x").unwrap();
            xs.push(truth.burst_count() as f64);
            ys.push(mos);
        }
        let r = crate::metrics::plcc(&xs, &ys).unwrap();
        assert!(r < -0.5, "pearson {r}");
    }

    #[test]
    fn theme_frames_are_more_important() {
        let spec = SyntheticSpec::default();
        let (_, _, truth) = generate_synthetic_clip(&spec, 1, "x").unwrap();
        let mean = |on: bool| {
            let v: Vec<f64> = (0..spec.n_frames)
                .filter(|&i| truth.theme[i] == on)
                .map(|i| truth.importance[i])
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(true) > mean(false) + 0.3);
        assert_eq!(truth.theme.iter().filter(|&&t| t).count(), 32);
    }

    #[test]
    fn topic_themes_separate_importance_exactly() {
        let spec = SyntheticSpec {
            noise_scale: 0.0,
            ..SyntheticSpec::default()
        };
        for seed in 0..20 {
            let (_, _, truth) = generate_synthetic_clip(&spec, seed, "x").unwrap();
            for (i, &w) in truth.importance.iter().enumerate() {
                let expected = spec.importance_floor + if truth.theme[i] { 1.0 } else { 0.0 };
                assert_eq!(w, expected, "seed {seed} frame {i}");
            }
        }
    }

    #[test]
    fn zero_spread_keeps_the_nominal_rate() {
        let spec = SyntheticSpec {
            burst_rate_spread: 0.0,
            ..SyntheticSpec::default()
        };
        for seed in 0..10 {
            let (_, _, truth) = generate_synthetic_clip(&spec, seed, "x").unwrap();
            assert_eq!(truth.burst_rate, spec.distortion_burst_rate);
        }
        let spread = SyntheticSpec::default();
        let rates: Vec<f64> = (0..200)
            .map(|seed| generate_synthetic_clip(&spread, seed, "x").unwrap().2.burst_rate)
            .collect();
        let lo = spread.distortion_burst_rate * (1.0 - spread.burst_rate_spread);
        let hi = spread.distortion_burst_rate * (1.0 + spread.burst_rate_spread);
        assert!(rates.iter().all(|r| (lo..=hi).contains(r)));
        assert!(rates.iter().any(|&r| r < 0.2) && rates.iter().any(|&r| r > 0.4));
    }

    #[test]
    fn explicit_theme_segments() {
        let spec = SyntheticSpec {
            theme_segments: vec![0, 1, 2],
            ..SyntheticSpec::default()
        };
        let (_, _, truth) = generate_synthetic_clip(&spec, 2, "x").unwrap();
        assert_eq!(truth.theme.iter().filter(|&&t| t).count(), 3);
        assert!(truth.theme[0] && truth.theme[2] && !truth.theme[3]);
    }

    #[test]
    fn corpus_prefixes_agree() {
        let spec = SyntheticSpec {
            n_frames: 8,
            ..SyntheticSpec::default()
        };
        let small = generate_corpus(&spec, 3, 4).unwrap();
        let large = generate_corpus(&spec, 5, 4).unwrap();
        assert_eq!(small[..], large[..3]);
        assert_eq!(large[4].video_id, "clip_00004");
        assert_ne!(large[0].clip, large[1].clip);
        assert!(generate_corpus(&spec, 0, 4).unwrap().is_empty());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            SyntheticSpec {
                n_frames: 0,
                ..SyntheticSpec::default()
            },
            SyntheticSpec {
                distortion_burst_rate: 1.5,
                ..SyntheticSpec::default()
            },
            SyntheticSpec {
                theme_segments: vec![64],
                ..SyntheticSpec::default()
            },
            SyntheticSpec {
                channels: vec![4, 0],
                ..SyntheticSpec::default()
            },
            SyntheticSpec {
                theme_topics: 1,
                ..SyntheticSpec::default()
            },
            SyntheticSpec {
                theme_topics: 9,
                ..SyntheticSpec::default()
            },
            SyntheticSpec {
                burst_rate_spread: 1.5,
                ..SyntheticSpec::default()
            },
        ];
        for spec in bad {
            assert!(generate_synthetic_clip(&spec, 0, "x").is_err(), "{spec:?}");
        }
    }
}
