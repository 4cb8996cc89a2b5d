//! Spatial-temporal distortion extraction on ingested backbone features.
//!
//! Per frame: pool every level spatially, concatenate the levels into a
//! primary token `Tᵢ`, append the forward difference `Tᵢ − Tᵢ₊₁` (zero for the
//! last frame), and map each token to a distortion quality `dᵢ` with a
//! two-layer GELU MLP.

use std::ops::Range;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::features::{global_average_pool, FeatureClip};
use crate::params::{Bound, LinearIds, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PrimaryTokens {
    /// `N × C_T`
    pub tokens: Tensor,
    pub level_offsets: Vec<Range<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StdeTokens {
    /// `N × 2·C_T`, primary channels first.
    pub tokens: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StdeOptions {
    /// Use every backbone level; otherwise only the last one.
    pub multilevel: bool,
    /// Append temporal differences; otherwise tokens are the primary tokens alone.
    pub temporal_diff: bool,
    /// Feed the distortion head the primary tokens instead of the difference-augmented ones.
    pub head_on_primary: bool,
}

impl Default for StdeOptions {
    fn default() -> Self {
        Self {
            multilevel: true,
            temporal_diff: true,
            head_on_primary: false,
        }
    }
}

impl StdeOptions {
    pub fn primary_width(&self, channels: &[usize]) -> usize {
        if self.multilevel {
            channels.iter().sum()
        } else {
            channels.last().copied().unwrap_or(0)
        }
    }

    /// Width of the tokens handed to the temporal transformer.
    pub fn token_width(&self, channels: &[usize]) -> usize {
        let c = self.primary_width(channels);
        if self.temporal_diff {
            2 * c
        } else {
            c
        }
    }

    pub fn head_width(&self, channels: &[usize]) -> usize {
        if self.head_on_primary {
            self.primary_width(channels)
        } else {
            self.token_width(channels)
        }
    }
}

pub fn concat_multilevel(pooled: &[Tensor]) -> Result<PrimaryTokens> {
    let refs: Vec<&Tensor> = pooled.iter().collect();
    let tokens = Tensor::concat_cols(&refs)?;
    let mut level_offsets = Vec::with_capacity(pooled.len());
    let mut start = 0;
    for p in pooled {
        level_offsets.push(start..start + p.cols());
        start += p.cols();
    }
    Ok(PrimaryTokens { tokens, level_offsets })
}

pub fn primary_tokens(clip: &FeatureClip, multilevel: bool) -> Result<PrimaryTokens> {
    let n = clip.n_frames();
    let levels = clip.levels();
    let used = if multilevel { levels } else { &levels[levels.len() - 1..] };
    let pooled: Vec<Tensor> = used.iter().map(|l| global_average_pool(l, n)).collect();
    concat_multilevel(&pooled)
}

pub fn temporal_difference(t: &PrimaryTokens) -> StdeTokens {
    let x = &t.tokens;
    let (n, c) = (x.rows(), x.cols());
    let mut data = Vec::with_capacity(n * 2 * c);
    for i in 0..n {
        let row = x.row_slice(i);
        data.extend_from_slice(row);
        if i + 1 < n {
            let next = x.row_slice(i + 1);
            data.extend(row.iter().zip(next).map(|(a, b)| a - b));
        } else {
            data.extend(std::iter::repeat_n(0.0, c));
        }
    }
    StdeTokens {
        tokens: Tensor::matrix(n, 2 * c, data).expect("sizes computed above"),
    }
}

/// Differentiable form of [`temporal_difference`] on an `N × C` tape value.
pub fn temporal_difference_var(tape: &mut Tape, tokens: Var) -> Result<Var> {
    let n = tape.value(tokens).rows();
    let next: Vec<usize> = (0..n).map(|i| (i + 1).min(n - 1)).collect();
    let shifted = tape.gather_rows(tokens, &next)?;
    // last row is T_{N-1} - T_{N-1}, exactly zero
    let diff = tape.sub(tokens, shifted)?;
    tape.concat_cols(&[tokens, diff])
}

/// Tokens for the transformer and for the distortion head of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipTokens {
    pub tct: Tensor,
    pub head: Tensor,
}

pub fn clip_tokens(clip: &FeatureClip, opts: StdeOptions) -> Result<ClipTokens> {
    let primary = primary_tokens(clip, opts.multilevel)?;
    let tct = if opts.temporal_diff {
        temporal_difference(&primary).tokens
    } else {
        primary.tokens.clone()
    };
    let head = if opts.head_on_primary { primary.tokens } else { tct.clone() };
    Ok(ClipTokens { tct, head })
}

/// Initial value of the output bias: frame scores start as positive qualities,
/// so `1 + w` in the aggregation starts out acting as a positive importance.
pub const FRAME_QUALITY_BIAS_INIT: f64 = 1.0;

/// Two-layer MLP producing one distortion quality per frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DistortionHead {
    pub l1: LinearIds,
    pub l2: LinearIds,
    pub input_width: usize,
    pub hidden: usize,
}

impl DistortionHead {
    pub fn new(store: &mut ParamStore, input_width: usize, hidden: usize, rng: &mut SplitMix64) -> Self {
        let l1 = store.linear("stde.l1", input_width, hidden, rng);
        let l2 = store.linear("stde.l2", hidden, 1, rng);
        *store.get_mut(l2.bias) = Tensor::full(&[1, 1], FRAME_QUALITY_BIAS_INIT);
        Self {
            l1,
            l2,
            input_width,
            hidden,
        }
    }
}

/// `dᵢ = l2(gelu(l1(tokenᵢ)))` for every row; returns `k × 1`.
pub fn frame_quality_head(tape: &mut Tape, p: &Bound, head: &DistortionHead, tokens: Var) -> Result<Var> {
    let width = tape.value(tokens).cols();
    if width != head.input_width {
        return Err(Error::shape(
            "frame_quality_head",
            tape.value(tokens).shape(),
            &[head.input_width, head.hidden],
        ));
    }
    let h = head.l1.apply(tape, p, tokens)?;
    let h = tape.gelu(h);
    head.l2.apply(tape, p, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::LevelBlock;
    use crate::gradcheck::{grad_check, DEFAULT_STEP};
    use crate::tensor::gelu;

    fn random(rng: &mut SplitMix64, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    fn primary(t: Tensor) -> PrimaryTokens {
        let c = t.cols();
        PrimaryTokens {
            tokens: t,
            level_offsets: vec![0..c],
        }
    }

    #[test]
    fn direct_evaluation() {
        let t = primary(Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap());
        let s = temporal_difference(&t);
        assert_eq!(s.tokens, Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.0]]).unwrap());
    }

    #[test]
    fn static_video_has_zero_differences() {
        let row = vec![0.3, -1.2, 4.0];
        let t = primary(Tensor::from_rows(&[row.clone(), row.clone(), row]).unwrap());
        let s = temporal_difference(&t);
        assert!((0..3).all(|i| s.tokens.row_slice(i)[3..].iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn single_frame_is_zero_padded() {
        let t = primary(Tensor::row(vec![2.0, 5.0]));
        assert_eq!(temporal_difference(&t).tokens.data(), &[2.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn matches_shift_subtract_oracle() {
        let mut rng = SplitMix64::new(4);
        let x = random(&mut rng, 6, 5);
        let s = temporal_difference(&primary(x.clone()));
        for i in 0..6 {
            for j in 0..5 {
                assert_eq!(s.tokens.get(i, j), x.get(i, j));
                let expected = if i < 5 { x.get(i, j) - x.get(i + 1, j) } else { 0.0 };
                assert_eq!(s.tokens.get(i, 5 + j), expected);
            }
        }
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let d = temporal_difference_var(&mut tape, v).unwrap();
        assert_eq!(tape.value(d), &s.tokens);
    }

    #[test]
    fn concat_offsets() {
        let a = Tensor::zeros(&[3, 2]);
        let b = Tensor::full(&[3, 3], 1.0);
        let p = concat_multilevel(&[a.clone(), b]).unwrap();
        assert_eq!(p.tokens.cols(), 5);
        assert_eq!(p.level_offsets, vec![0..2, 2..5]);
        assert_eq!(concat_multilevel(&[a.clone()]).unwrap().tokens, a);
        assert!(concat_multilevel(&[a, Tensor::zeros(&[2, 2])]).is_err());
    }

    #[test]
    fn multilevel_flag_keeps_last_level() {
        let clip = FeatureClip::new(
            2,
            vec![
                LevelBlock::Pooled {
                    channels: 1,
                    data: vec![1.0, 2.0],
                },
                LevelBlock::Pooled {
                    channels: 2,
                    data: vec![3.0, 4.0, 5.0, 6.0],
                },
            ],
            "c",
        )
        .unwrap();
        assert_eq!(primary_tokens(&clip, true).unwrap().tokens.cols(), 3);
        let last = primary_tokens(&clip, false).unwrap();
        assert_eq!(last.tokens.data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    fn head_with(store: &mut ParamStore, width: usize, hidden: usize, seed: u64) -> DistortionHead {
        DistortionHead::new(store, width, hidden, &mut SplitMix64::new(seed))
    }

    fn eval_head(store: &ParamStore, head: &DistortionHead, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let d = frame_quality_head(&mut tape, &p, head, xv).unwrap();
        tape.value(d).clone()
    }

    #[test]
    fn zero_head_gives_zero_quality() {
        let mut store = ParamStore::new();
        let head = head_with(&mut store, 4, 3, 1);
        for t in store.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let mut rng = SplitMix64::new(2);
        let d = eval_head(&store, &head, &random(&mut rng, 5, 4));
        assert!(d.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identical_frames_identical_quality_and_oracle() {
        let mut store = ParamStore::new();
        let head = head_with(&mut store, 4, 3, 7);
        let row = vec![0.5, -0.1, 2.0, 1.0];
        let same = Tensor::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let d = eval_head(&store, &head, &same);
        assert_eq!(d.data()[0], d.data()[1]);
        assert_eq!(d.data()[1], d.data()[2]);

        let mut rng = SplitMix64::new(8);
        let x = random(&mut rng, 3, 4);
        let d = eval_head(&store, &head, &x);
        let w1 = store.get(head.l1.weight);
        let b1 = store.get(head.l1.bias);
        let w2 = store.get(head.l2.weight);
        let b2 = store.get(head.l2.bias);
        for i in 0..3 {
            let mut out = b2.data()[0];
            for h in 0..3 {
                let mut z = b1.data()[h];
                for j in 0..4 {
                    z += x.get(i, j) * w1.get(j, h);
                }
                out += gelu(z) * w2.get(h, 0);
            }
            assert!((d.data()[i] - out).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mut store = ParamStore::new();
        let head = head_with(&mut store, 4, 3, 7);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[2, 5]));
        assert!(matches!(frame_quality_head(&mut tape, &p, &head, x), Err(Error::Shape { .. })));
    }

    #[test]
    fn permuting_frames_permutes_quality() {
        let mut store = ParamStore::new();
        let head = head_with(&mut store, 4, 6, 3);
        let mut rng = SplitMix64::new(9);
        let x = random(&mut rng, 5, 4);
        let perm = [3, 0, 4, 1, 2];
        let d = eval_head(&store, &head, &x);
        let dp = eval_head(&store, &head, &x.gather_rows(&perm).unwrap());
        for (k, &p) in perm.iter().enumerate() {
            assert_eq!(dp.data()[k], d.data()[p]);
        }
    }

    #[test]
    fn stde_path_passes_grad_check() {
        for seed in 0..5 {
            let mut rng = SplitMix64::new(seed);
            let mut store = ParamStore::new();
            let head = head_with(&mut store, 6, 4, seed + 100);
            let x = random(&mut rng, 4, 3);
            let r = random(&mut rng, 4, 1);
            let mut inputs = vec![x, r];
            inputs.extend(store.tensors().iter().cloned());
            let report = grad_check(
                |tape, v| {
                    let t = temporal_difference_var(tape, v[0])?;
                    let bound = Bound::from_vars(v[2..].to_vec());
                    let d = frame_quality_head(tape, &bound, &head, t)?;
                    let weighted = tape.mul(d, v[1])?;
                    Ok(tape.sum(weighted))
                },
                &inputs,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }
}
