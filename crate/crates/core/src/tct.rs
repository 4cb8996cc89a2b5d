//! Temporal content transformer.
//!
//! Samples one token per temporal segment, reduces channels, runs a four-layer
//! post-norm encoder with a long residual link, then a two-layer decoder whose
//! query is the average token. The last decoder layer's attention-weighted
//! values are broadcast onto the encoder output and mapped to one attention
//! weight `wᵢ` per sampled frame.
//!
//! There is no positional encoding, and every reduction over the token axis
//! uses [`order_free_sum`](crate::tensor::order_free_sum), so the whole module
//! is exactly equivariant to permutations of the sampled tokens.

use std::ops::Range;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, LayerNormIds, LinearIds, ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const ENCODER_DEPTH: usize = 4;
pub const DECODER_DEPTH: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TctConfig {
    /// Width of incoming tokens.
    pub input_width: usize,
    /// Reduced width `C`.
    pub channels: usize,
    pub heads: usize,
    /// Feed-forward width `F`.
    pub ff_width: usize,
    /// Hidden width of the weight head (`l3`).
    pub head_hidden: usize,
    /// Skip the decoder; weights come straight from the encoder output.
    pub pure_encoder: bool,
    /// Use a zero query token instead of the average token.
    pub zero_token_target: bool,
}

impl TctConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_width", self.input_width),
            ("channels", self.channels),
            ("heads", self.heads),
            ("ff_width", self.ff_width),
            ("head_hidden", self.head_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidParameter(format!("tct {name} must be positive")));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::InvalidParameter(format!(
                "tct channels {} not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TsfSelection {
    pub s0_effective: usize,
    pub indices: Vec<usize>,
}

impl TsfSelection {
    /// Every frame, in order.
    pub fn all(n_frames: usize) -> Self {
        Self {
            s0_effective: n_frames,
            indices: (0..n_frames).collect(),
        }
    }
}

/// Half-open frame range of segment `j` when `n` frames are cut into `s` segments.
pub fn segment_bounds(n: usize, s: usize, j: usize) -> Range<usize> {
    (j * n / s)..((j + 1) * n / s)
}

pub fn tsf_sample(n_frames: usize, s0: usize, rng: &mut SplitMix64) -> Result<TsfSelection> {
    if n_frames == 0 || s0 == 0 {
        return Err(Error::Contract(format!(
            "tsf_sample needs N >= 1 and S0 >= 1, got N={n_frames}, S0={s0}"
        )));
    }
    let s = s0.min(n_frames);
    let indices = (0..s)
        .map(|j| {
            let seg = segment_bounds(n_frames, s, j);
            let len = seg.end - seg.start;
            // unit segments consume no randomness
            if len == 1 {
                seg.start
            } else {
                seg.start + rng.below(len as u64) as usize
            }
        })
        .collect();
    Ok(TsfSelection { s0_effective: s, indices })
}

/// Key, query and value projections (`C × C`, no bias).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProjectionIds {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

impl ProjectionIds {
    fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut SplitMix64) -> Self {
        Self {
            query: store.uniform_matrix(format!("{name}.query"), c, c, rng),
            key: store.uniform_matrix(format!("{name}.key"), c, c, rng),
            value: store.uniform_matrix(format!("{name}.value"), c, c, rng),
        }
    }
}

/// One post-norm transformer layer: attention and feed-forward sublayers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayerIds {
    pub proj: ProjectionIds,
    pub output: ParamId,
    pub ff1: LinearIds,
    pub ff2: LinearIds,
    pub ln1: LayerNormIds,
    pub ln2: LayerNormIds,
}

impl AttentionLayerIds {
    fn new(store: &mut ParamStore, name: &str, cfg: &TctConfig, rng: &mut SplitMix64) -> Self {
        let c = cfg.channels;
        Self {
            proj: ProjectionIds::new(store, name, c, rng),
            output: store.uniform_matrix(format!("{name}.output"), c, c, rng),
            ff1: store.linear(&format!("{name}.ff1"), c, cfg.ff_width, rng),
            ff2: store.linear(&format!("{name}.ff2"), cfg.ff_width, c, rng),
            ln1: store.layer_norm(&format!("{name}.ln1"), c),
            ln2: store.layer_norm(&format!("{name}.ln2"), c),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderIds {
    /// First layer, refining the query token.
    pub refine: AttentionLayerIds,
    /// Last layer: only its attention map and values are used.
    pub last: ProjectionIds,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TctIds {
    pub config: TctConfig,
    pub reduce: LinearIds,
    pub encoder: Vec<AttentionLayerIds>,
    pub decoder: Option<DecoderIds>,
    pub l3: LinearIds,
    pub l4: LinearIds,
}

impl TctIds {
    pub fn new(store: &mut ParamStore, config: TctConfig, rng: &mut SplitMix64) -> Result<Self> {
        config.validate()?;
        let reduce = store.linear("tct.reduce", config.input_width, config.channels, rng);
        let encoder = (0..ENCODER_DEPTH)
            .map(|l| AttentionLayerIds::new(store, &format!("tct.encoder{l}"), &config, rng))
            .collect();
        let decoder = (!config.pure_encoder).then(|| DecoderIds {
            refine: AttentionLayerIds::new(store, "tct.decoder0", &config, rng),
            last: ProjectionIds::new(store, "tct.decoder1", config.channels, rng),
        });
        let l3 = store.linear("tct.l3", config.channels, config.head_hidden, rng);
        let l4 = store.linear("tct.l4", config.head_hidden, 1, rng);
        Ok(Self {
            config,
            reduce,
            encoder,
            decoder,
            l3,
            l4,
        })
    }
}

/// `tokens·W + b`, `k × C_in → k × C`.
pub fn channel_reduce(tape: &mut Tape, p: &Bound, ids: &TctIds, tokens: Var) -> Result<Var> {
    ids.reduce.apply(tape, p, tokens)
}

pub struct AttentionVars {
    /// Per-head attention maps, `k_q × k`.
    pub maps: Vec<Var>,
    /// Concatenated head outputs `m·V`, before any output projection.
    pub values: Var,
}

/// Multi-head scaled dot-product attention of `query_src` onto `kv_src`.
/// Heads split the `C` channels into equal slices; logits scale by `1/√(C/h)`.
pub fn multi_head_attention(
    tape: &mut Tape,
    p: &Bound,
    proj: &ProjectionIds,
    heads: usize,
    query_src: Var,
    kv_src: Var,
) -> Result<AttentionVars> {
    let c = tape.value(kv_src).cols();
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::InvalidParameter(format!("{c} channels not divisible by {heads} heads")));
    }
    let q = tape.matmul(query_src, p[proj.query])?;
    let k = tape.matmul(kv_src, p[proj.key])?;
    let v = tape.matmul(kv_src, p[proj.value])?;
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut maps = Vec::with_capacity(heads);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * d, (h + 1) * d);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale);
        let m = tape.softmax_rows(logits)?;
        outs.push(tape.matmul_order_free(m, vh)?);
        maps.push(m);
    }
    let values = tape.concat_cols(&outs)?;
    Ok(AttentionVars { maps, values })
}

/// Mean of per-head attention maps.
pub fn head_average(tape: &Tape, maps: &[Var]) -> Tensor {
    let mut acc = tape.value(maps[0]).clone();
    for &m in &maps[1..] {
        acc.add_assign(tape.value(m));
    }
    acc.scale_assign(1.0 / maps.len() as f64);
    acc
}

/// Self-attention sublayer output `(m·V)·P_O` plus the head-averaged map.
pub fn self_attention(tape: &mut Tape, p: &Bound, layer: &AttentionLayerIds, heads: usize, t: Var) -> Result<(Tensor, Var)> {
    let att = multi_head_attention(tape, p, &layer.proj, heads, t, t)?;
    let out = tape.matmul(att.values, p[layer.output])?;
    Ok((head_average(tape, &att.maps), out))
}

fn feed_forward(tape: &mut Tape, p: &Bound, layer: &AttentionLayerIds, x: Var) -> Result<Var> {
    let h = layer.ff1.apply(tape, p, x)?;
    let h = tape.gelu(h);
    layer.ff2.apply(tape, p, h)
}

/// `LN₂(a + FF(a))` with `a = LN₁(x + attention)`.
fn post_norm_block(tape: &mut Tape, p: &Bound, layer: &AttentionLayerIds, x: Var, attended: Var) -> Result<Var> {
    let a = tape.add(x, attended)?;
    let a = layer.ln1.apply(tape, p, a)?;
    let f = feed_forward(tape, p, layer, a)?;
    let y = tape.add(a, f)?;
    layer.ln2.apply(tape, p, y)
}

pub struct EncoderVars {
    /// Output of the layer stack, `Φ(T_pe)`.
    pub phi: Var,
    /// `Φ(T_pe) + T_pe`.
    pub t_en: Var,
    /// Head-averaged self-attention map of each layer.
    pub maps: Vec<Tensor>,
}

pub fn encoder_forward(tape: &mut Tape, p: &Bound, ids: &TctIds, t_pe: Var) -> Result<EncoderVars> {
    let heads = ids.config.heads;
    let mut x = t_pe;
    let mut maps = Vec::with_capacity(ids.encoder.len());
    for layer in &ids.encoder {
        let (m, att) = self_attention(tape, p, layer, heads, x)?;
        x = post_norm_block(tape, p, layer, x, att)?;
        maps.push(m);
    }
    let t_en = tape.add(x, t_pe)?;
    Ok(EncoderVars { phi: x, t_en, maps })
}

pub struct DecoderVars {
    /// Attention weights, `k × 1`.
    pub w: Var,
    /// Head-averaged last-layer cross attention `M_QK`, `1 × k`; absent for a pure encoder.
    pub m_qk: Option<Tensor>,
}

fn weight_head(tape: &mut Tape, p: &Bound, ids: &TctIds, x: Var) -> Result<Var> {
    let h = ids.l3.apply(tape, p, x)?;
    let h = tape.gelu(h);
    ids.l4.apply(tape, p, h)
}

pub fn decoder_forward(tape: &mut Tape, p: &Bound, ids: &TctIds, t_en: Var, t_pe: Var) -> Result<DecoderVars> {
    if tape.value(t_en).shape() != tape.value(t_pe).shape() {
        return Err(Error::shape("decoder_forward", tape.value(t_en).shape(), tape.value(t_pe).shape()));
    }
    let Some(dec) = &ids.decoder else {
        let w = weight_head(tape, p, ids, t_en)?;
        return Ok(DecoderVars { w, m_qk: None });
    };
    let heads = ids.config.heads;
    let query = if ids.config.zero_token_target {
        tape.constant(Tensor::zeros(&[1, tape.value(t_pe).cols()]))
    } else {
        tape.mean_axis(t_pe, 0)?
    };

    let att = multi_head_attention(tape, p, &dec.refine.proj, heads, query, t_en)?;
    let att = tape.matmul(att.values, p[dec.refine.output])?;
    let query = post_norm_block(tape, p, &dec.refine, query, att)?;

    let last = multi_head_attention(tape, p, &dec.last, heads, query, t_en)?;
    let fused = tape.add_row(t_en, last.values)?;
    let w = weight_head(tape, p, ids, fused)?;
    Ok(DecoderVars {
        w,
        m_qk: Some(head_average(tape, &last.maps)),
    })
}

pub struct TctVars {
    pub t_pe: Var,
    pub encoder: EncoderVars,
    pub decoder: DecoderVars,
}

/// Runs the transformer on the rows of `tokens` picked by `selection`.
pub fn tct_forward_vars(tape: &mut Tape, p: &Bound, ids: &TctIds, tokens: Var, selection: &TsfSelection) -> Result<TctVars> {
    let picked = tape.gather_rows(tokens, &selection.indices)?;
    let t_pe = channel_reduce(tape, p, ids, picked)?;
    let encoder = encoder_forward(tape, p, ids, t_pe)?;
    let decoder = decoder_forward(tape, p, ids, encoder.t_en, t_pe)?;
    Ok(TctVars { t_pe, encoder, decoder })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TctOutput {
    /// One weight per selected frame, aligned with `selection.indices`.
    pub weights: Vec<f64>,
    pub m_qk: Option<Tensor>,
    pub selection: TsfSelection,
}

/// Samples a selection and evaluates the transformer with fixed parameters.
pub fn tct_forward(store: &ParamStore, ids: &TctIds, tokens: &Tensor, s0: usize, rng: &mut SplitMix64) -> Result<TctOutput> {
    let selection = tsf_sample(tokens.rows(), s0, rng)?;
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let x = tape.constant(tokens.clone());
    let out = tct_forward_vars(&mut tape, &p, ids, x, &selection)?;
    Ok(TctOutput {
        weights: tape.value(out.decoder.w).data().to_vec(),
        m_qk: out.decoder.m_qk,
        selection,
    })
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Straight-line loop implementation of the transformer, used as a test oracle.

    use crate::tensor::gelu;

    pub type Mat = Vec<Vec<f64>>;

    pub fn mat(t: &crate::tensor::Tensor) -> Mat {
        (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
    }

    pub fn matmul(a: &Mat, b: &Mat) -> Mat {
        let (n, m, k) = (a.len(), b[0].len(), b.len());
        let mut out = vec![vec![0.0; m]; n];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    out[i][j] += a[i][p] * b[p][j];
                }
            }
        }
        out
    }

    pub fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
            .collect()
    }

    pub fn linear(x: &Mat, w: &Mat, b: &Mat) -> Mat {
        matmul(x, w)
            .into_iter()
            .map(|r| r.iter().zip(&b[0]).map(|(v, c)| v + c).collect())
            .collect()
    }

    pub fn layer_norm(x: &Mat, g: &Mat, b: &Mat) -> Mat {
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                r.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[0][j] + b[0][j])
                    .collect()
            })
            .collect()
    }

    pub fn gelu_mat(x: &Mat) -> Mat {
        x.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect()
    }

    /// Returns (per-head maps, concatenated m·V).
    pub fn attention(qs: &Mat, kvs: &Mat, pq: &Mat, pk: &Mat, pv: &Mat, heads: usize) -> (Vec<Mat>, Mat) {
        let q = matmul(qs, pq);
        let k = matmul(kvs, pk);
        let v = matmul(kvs, pv);
        let c = pq.len();
        let d = c / heads;
        let mut maps = Vec::new();
        let mut out = vec![vec![0.0; c]; q.len()];
        for h in 0..heads {
            let mut m = vec![vec![0.0; k.len()]; q.len()];
            for i in 0..q.len() {
                for j in 0..k.len() {
                    let dot: f64 = (h * d..(h + 1) * d).map(|c| q[i][c] * k[j][c]).sum();
                    m[i][j] = dot / (d as f64).sqrt();
                }
                let max = m[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = m[i].iter().map(|v| (v - max).exp()).sum();
                for j in 0..k.len() {
                    m[i][j] = (m[i][j] - max).exp() / z;
                }
                for c in h * d..(h + 1) * d {
                    out[i][c] = (0..k.len()).map(|j| m[i][j] * v[j][c]).sum();
                }
            }
            maps.push(m);
        }
        (maps, out)
    }
}
