//! The full quality model: distortion head, temporal transformer and aggregation.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::features::FeatureClip;
use crate::params::{Bound, ParamStore};
use crate::quality::aggregate_quality_var;
use crate::rng::SplitMix64;
use crate::stde::{clip_tokens, frame_quality_head, ClipTokens, DistortionHead, StdeOptions};
use crate::tct::{tct_forward_vars, tsf_sample, TctConfig, TctIds, TsfSelection};
use crate::tensor::Tensor;

/// Key of the parameter-initialization stream under the run seed.
pub const INIT_STREAM: u64 = 0x1417;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channel width of every backbone level, in order.
    pub level_channels: Vec<usize>,
    pub stde: StdeOptions,
    /// Hidden width of the distortion head.
    pub stde_hidden: usize,
    /// Reduced transformer width `C`.
    pub channels: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub tct_hidden: usize,
    pub pure_encoder: bool,
    pub zero_token_target: bool,
    /// Without the transformer every sampled frame has weight zero.
    pub use_tct: bool,
    /// Number of temporal segments sampled per forward pass.
    pub s0: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            level_channels: vec![8, 8, 16, 16],
            stde: StdeOptions::default(),
            stde_hidden: 32,
            channels: 32,
            heads: 4,
            ff_width: 128,
            tct_hidden: 32,
            pure_encoder: false,
            zero_token_target: false,
            use_tct: true,
            s0: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.level_channels.is_empty() || self.level_channels.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "level channels must be non-empty and positive, got {:?}",
                self.level_channels
            )));
        }
        if self.stde_hidden == 0 || self.s0 == 0 {
            return Err(Error::InvalidParameter("stde_hidden and s0 must be positive".into()));
        }
        self.tct_config().validate()
    }

    pub fn tct_config(&self) -> TctConfig {
        TctConfig {
            input_width: self.stde.token_width(&self.level_channels),
            channels: self.channels,
            heads: self.heads,
            ff_width: self.ff_width,
            head_hidden: self.tct_hidden,
            pure_encoder: self.pure_encoder,
            zero_token_target: self.zero_token_target,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub head: DistortionHead,
    pub tct: Option<TctIds>,
}

/// Everything one sampled forward pass produces.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub selection: TsfSelection,
    /// Distortion quality of each selected frame.
    pub d: Vec<f64>,
    /// Attention weight of each selected frame (zeros without the transformer).
    pub w: Vec<f64>,
    pub m_qk: Option<Tensor>,
    pub q: f64,
}

struct Graph {
    q: Var,
    d: Var,
    w: Option<Var>,
    m_qk: Option<Tensor>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed).split(INIT_STREAM);
        let mut store = ParamStore::new();
        let head = DistortionHead::new(
            &mut store,
            config.stde.head_width(&config.level_channels),
            config.stde_hidden,
            &mut rng,
        );
        let tct = if config.use_tct {
            Some(TctIds::new(&mut store, config.tct_config(), &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            head,
            tct,
        })
    }

    /// Pools and concatenates a clip's features into model tokens.
    pub fn prepare(&self, clip: &FeatureClip) -> Result<ClipTokens> {
        let channels = clip.channels();
        if channels != self.config.level_channels {
            return Err(Error::Malformed {
                path: clip.source_id().into(),
                detail: format!(
                    "level channels {channels:?} do not match the model's {:?}",
                    self.config.level_channels
                ),
            });
        }
        clip_tokens(clip, self.config.stde)
    }

    pub fn sample_selection(&self, n_frames: usize, rng: &mut SplitMix64) -> Result<TsfSelection> {
        tsf_sample(n_frames, self.config.s0, rng)
    }

    fn graph(&self, tape: &mut Tape, p: &Bound, tokens: &ClipTokens, selection: &TsfSelection) -> Result<Graph> {
        let head_in = tape.constant(tokens.head.gather_rows(&selection.indices)?);
        let d = frame_quality_head(tape, p, &self.head, head_in)?;
        let (w, m_qk) = match &self.tct {
            Some(ids) => {
                let x = tape.constant(tokens.tct.clone());
                let out = tct_forward_vars(tape, p, ids, x, selection)?;
                (Some(out.decoder.w), out.decoder.m_qk)
            }
            None => (None, None),
        };
        let q = aggregate_quality_var(tape, d, w)?;
        Ok(Graph { q, d, w, m_qk })
    }

    pub fn forward_sample(&self, tokens: &ClipTokens, selection: &TsfSelection) -> Result<SampleOutput> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let g = self.graph(&mut tape, &p, tokens, selection)?;
        let d = tape.value(g.d).data().to_vec();
        let w = match g.w {
            Some(w) => tape.value(w).data().to_vec(),
            None => vec![0.0; d.len()],
        };
        let q = tape.value(g.q).item();
        if !q.is_finite() {
            return Err(Error::Numerical(format!("non-finite quality {q}")));
        }
        Ok(SampleOutput {
            selection: selection.clone(),
            d,
            w,
            m_qk: g.m_qk,
            q,
        })
    }

    /// Raw quality of one sample and its gradient for every parameter, in store order.
    pub fn sample_gradient(&self, tokens: &ClipTokens, selection: &TsfSelection) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, true);
        let g = self.graph(&mut tape, &p, tokens, selection)?;
        let q = tape.value(g.q).item();
        if !q.is_finite() {
            return Err(Error::Numerical(format!("non-finite quality {q}")));
        }
        let grads = tape.backward(g.q)?;
        Ok((q, self.store.collect_grads(&p, &grads)))
    }

    /// Builds the scalar quality on a caller's tape, with the given bound
    /// parameters and token inputs (used by gradient checks).
    pub fn quality_var(&self, tape: &mut Tape, p: &Bound, tct_tokens: Var, head_tokens: Var, selection: &TsfSelection) -> Result<Var> {
        let head_in = tape.gather_rows(head_tokens, &selection.indices)?;
        let d = frame_quality_head(tape, p, &self.head, head_in)?;
        let w = match &self.tct {
            Some(ids) => Some(tct_forward_vars(tape, p, ids, tct_tokens, selection)?.decoder.w),
            None => None,
        };
        aggregate_quality_var(tape, d, w)
    }
}

/// `s_m` independent selections drawn from `rng`, each evaluated once.
pub fn multi_sample(model: &Model, tokens: &ClipTokens, s_m: usize, rng: &mut SplitMix64) -> Result<Vec<SampleOutput>> {
    if s_m == 0 {
        return Err(Error::InvalidParameter("s_m must be at least 1".into()));
    }
    let n = tokens.tct.rows();
    (0..s_m)
        .map(|_| {
            let sel = model.sample_selection(n, rng)?;
            model.forward_sample(tokens, &sel)
        })
        .collect()
}

/// Mean raw quality over `s_m` samples, with the individual samples.
pub fn multi_sample_predict(model: &Model, tokens: &ClipTokens, s_m: usize, rng: &mut SplitMix64) -> Result<(f64, Vec<f64>)> {
    let per: Vec<f64> = multi_sample(model, tokens, s_m, rng)?.iter().map(|s| s.q).collect();
    Ok((per.iter().sum::<f64>() / per.len() as f64, per))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_STEP};
    use crate::synthetic::{generate_synthetic_clip, SyntheticSpec};

    fn small_config() -> ModelConfig {
        ModelConfig {
            level_channels: vec![8, 8, 16, 16],
            stde_hidden: 8,
            channels: 8,
            heads: 2,
            ff_width: 16,
            tct_hidden: 8,
            s0: 8,
            ..ModelConfig::default()
        }
    }

    fn clip(seed: u64) -> FeatureClip {
        generate_synthetic_clip(&SyntheticSpec::default(), seed, "c").unwrap().0
    }

    #[test]
    fn forward_matches_aggregation_of_parts() {
        let model = Model::new(small_config(), 1).unwrap();
        let tokens = model.prepare(&clip(2)).unwrap();
        let sel = model.sample_selection(64, &mut SplitMix64::new(3)).unwrap();
        let out = model.forward_sample(&tokens, &sel).unwrap();
        assert_eq!(out.d.len(), 8);
        assert_eq!(out.w.len(), 8);
        let q = crate::quality::aggregate_quality(&out.d, &out.w).unwrap();
        assert_eq!(out.q, q);
        let (q2, grads) = model.sample_gradient(&tokens, &sel).unwrap();
        assert_eq!(q2, q);
        assert_eq!(grads.len(), model.store.len());
    }

    #[test]
    fn seed_controls_initialization() {
        let a = Model::new(small_config(), 1).unwrap();
        let b = Model::new(small_config(), 1).unwrap();
        let c = Model::new(small_config(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let cfg = ModelConfig {
            level_channels: vec![8, 8],
            ..small_config()
        };
        let model = Model::new(cfg, 1).unwrap();
        assert!(matches!(model.prepare(&clip(1)), Err(Error::Malformed { .. })));
    }

    #[test]
    fn without_transformer_q_is_mean_distortion() {
        let cfg = ModelConfig {
            use_tct: false,
            ..small_config()
        };
        let model = Model::new(cfg, 4).unwrap();
        assert!(model.tct.is_none());
        let tokens = model.prepare(&clip(5)).unwrap();
        let sel = model.sample_selection(64, &mut SplitMix64::new(6)).unwrap();
        let out = model.forward_sample(&tokens, &sel).unwrap();
        assert!(out.w.iter().all(|&w| w == 0.0));
        assert!((out.q - out.d.iter().sum::<f64>() / 8.0).abs() < 1e-12);
    }

    #[test]
    fn multi_sample_basics() {
        let cfg = ModelConfig {
            s0: 64,
            ..small_config()
        };
        let model = Model::new(cfg, 7).unwrap();
        let tokens = model.prepare(&clip(8)).unwrap();
        let (q, per) = multi_sample_predict(&model, &tokens, 4, &mut SplitMix64::new(1)).unwrap();
        assert!(per.iter().all(|&v| v == per[0]));
        assert_eq!(q, per[0]);

        let model = Model::new(small_config(), 7).unwrap();
        let (q1, _) = multi_sample_predict(&model, &tokens, 1, &mut SplitMix64::new(9)).unwrap();
        let sel = model.sample_selection(64, &mut SplitMix64::new(9)).unwrap();
        assert_eq!(q1, model.forward_sample(&tokens, &sel).unwrap().q);
        let a = multi_sample_predict(&model, &tokens, 5, &mut SplitMix64::new(10)).unwrap();
        let b = multi_sample_predict(&model, &tokens, 5, &mut SplitMix64::new(10)).unwrap();
        assert_eq!(a, b);
        assert!(multi_sample_predict(&model, &tokens, 0, &mut SplitMix64::new(10)).is_err());
    }

    #[test]
    fn full_model_passes_grad_check_on_inputs() {
        for seed in 0..4 {
            let model = Model::new(small_config(), seed).unwrap();
            let tokens = model.prepare(&clip(seed + 20)).unwrap();
            let sel = model.sample_selection(64, &mut SplitMix64::new(seed)).unwrap();
            let report = grad_check(
                |tape, v| {
                    let p = model.store.bind(tape, false);
                    model.quality_var(tape, &p, v[0], v[1], &sel)
                },
                &[tokens.tct.clone(), tokens.head.clone()],
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }
}
