//! Dense row-major `f64` tensors and the forward kernels the tape builds on.

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// 1×n matrix.
    pub fn row(values: Vec<f64>) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("Tensor::from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    /// Sum of all entries; independent of their order (see [`order_free_sum`]).
    pub fn sum(&self) -> f64 {
        order_free_sum(&mut self.data.clone())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn require_matrix(&self, op: &'static str) -> Result<()> {
        if self.is_matrix() {
            Ok(())
        } else {
            Err(Error::shape(op, &self.shape, &[]))
        }
    }

    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        self.require_matrix("matmul")?;
        b.require_matrix("matmul")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (b.shape[0], b.shape[1]);
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &b.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &b.data[p * n..(p + 1) * n];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Matrix product whose every entry is an [`order_free_sum`] of its terms,
    /// so permuting the contracted axis of both operands leaves it bit-identical.
    pub fn matmul_order_free(&self, b: &Tensor) -> Result<Tensor> {
        self.require_matrix("matmul")?;
        b.require_matrix("matmul")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (b.shape[0], b.shape[1]);
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &b.shape));
        }
        let mut out = vec![0.0; m * n];
        let mut terms = vec![0.0; k];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                for (p, t) in terms.iter_mut().enumerate() {
                    *t = a_row[p] * b.data[p * n + j];
                }
                out[i * n + j] = order_free_sum(&mut terms);
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        self.require_matrix("transpose")?;
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Numerically stable row-wise softmax (max subtraction).
    pub fn softmax_rows(&self) -> Result<Tensor> {
        self.require_matrix("softmax_rows")?;
        let c = self.shape[1];
        let mut out = self.data.clone();
        let mut scratch = Vec::with_capacity(c);
        for row in out.chunks_mut(c.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for x in row.iter_mut() {
                *x = (*x - max).exp();
            }
            scratch.clear();
            scratch.extend_from_slice(row);
            let total = order_free_sum(&mut scratch);
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn gelu(&self) -> Tensor {
        self.map(gelu)
    }

    /// Returns `(output, normalized, inv_std)`; the last two feed the backward rule.
    pub fn layer_norm_parts(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<(Tensor, Tensor, Vec<f64>)> {
        self.require_matrix("layer_norm")?;
        let (n, c) = (self.shape[0], self.shape[1]);
        if c == 0 {
            return Err(Error::Contract("layer_norm needs at least one channel".into()));
        }
        if gain.numel() != c || bias.numel() != c {
            return Err(Error::shape("layer_norm", &self.shape, gain.shape()));
        }
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = &self.data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gain.data[j] + bias.data[j];
            }
        }
        Ok((
            Tensor {
                shape: self.shape.clone(),
                data: out,
            },
            Tensor {
                shape: self.shape.clone(),
                data: xhat,
            },
            inv_std,
        ))
    }

    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        Ok(self.layer_norm_parts(gain, bias, eps)?.0)
    }

    /// Adds a 1×c row to every row of an n×c matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        self.require_matrix("add_row")?;
        let c = self.shape[1];
        if row.numel() != c {
            return Err(Error::shape("add_row", &self.shape, row.shape()));
        }
        let mut out = self.data.clone();
        for chunk in out.chunks_mut(c.max(1)) {
            for (o, r) in chunk.iter_mut().zip(&row.data) {
                *o += r;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        first.require_matrix("concat_cols")?;
        let n = first.shape[0];
        for p in parts {
            p.require_matrix("concat_cols")?;
            if p.shape[0] != n {
                return Err(Error::shape("concat_cols", &first.shape, &p.shape));
            }
        }
        let total: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(p.row_slice(i));
            }
        }
        Ok(Tensor {
            shape: vec![n, total],
            data,
        })
    }

    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor> {
        self.require_matrix("gather_rows")?;
        let (n, c) = (self.shape[0], self.shape[1]);
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= n {
                return Err(Error::Contract(format!("row index {i} out of range for {n} rows")));
            }
            data.extend_from_slice(self.row_slice(i));
        }
        Ok(Tensor {
            shape: vec![index.len(), c],
            data,
        })
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        self.require_matrix("slice_cols")?;
        if start > end || end > self.shape[1] {
            return Err(Error::shape("slice_cols", &self.shape, &[start, end]));
        }
        let mut data = Vec::with_capacity(self.shape[0] * (end - start));
        for i in 0..self.shape[0] {
            data.extend_from_slice(&self.row_slice(i)[start..end]);
        }
        Ok(Tensor {
            shape: vec![self.shape[0], end - start],
            data,
        })
    }

    /// Mean over `axis` of a matrix, keeping the reduced axis as size 1.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.require_matrix("mean_axis")?;
        let (n, c) = (self.shape[0], self.shape[1]);
        match axis {
            0 => {
                let mut column = vec![0.0; n];
                let out = (0..c)
                    .map(|j| {
                        for (i, x) in column.iter_mut().enumerate() {
                            *x = self.data[i * c + j];
                        }
                        order_free_sum(&mut column) / n as f64
                    })
                    .collect();
                Ok(Tensor {
                    shape: vec![1, c],
                    data: out,
                })
            }
            1 => {
                let out = (0..n)
                    .map(|i| order_free_sum(&mut self.row_slice(i).to_vec()) / c as f64)
                    .collect();
                Ok(Tensor {
                    shape: vec![n, 1],
                    data: out,
                })
            }
            _ => Err(Error::Contract(format!("mean_axis: axis {axis} on a matrix"))),
        }
    }
}

/// Sums `values` after sorting them by magnitude (ties broken by value), so the
/// result depends only on the multiset of terms, never on their order. Token
/// axis reductions use it to make the model exactly permutation-equivariant.
pub fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)));
    values.iter().sum()
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    if cfg!(feature = "planted-grad-bug") {
        normal_cdf(x)
    } else {
        normal_cdf(x) + x * normal_pdf(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_matrix(rng: &mut SplitMix64, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_annihilation() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
        let p = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let q = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(p.matmul(&q).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SplitMix64::new(11);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 2);
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.get(i, p) * b.get(p, j);
                }
                assert!((c.get(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let z = Tensor::zeros(&[2, 3]).softmax_rows().unwrap();
        assert!(z.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let r = Tensor::row(vec![1f64.ln(), 3f64.ln()]).softmax_rows().unwrap();
        assert!((r.data()[0] - 0.25).abs() < 1e-15 && (r.data()[1] - 0.75).abs() < 1e-15);
        let big = Tensor::row(vec![1000.0, 1000.0]).softmax_rows().unwrap();
        assert_eq!(big.data(), &[0.5, 0.5]);
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(40.0) - 40.0).abs() < 1e-12);
        assert!(gelu(-40.0).abs() < 1e-12);
        // erf(1/√2) by its Maclaurin series, summed to convergence.
        let z = 1.0 / std::f64::consts::SQRT_2;
        let mut term = z;
        let mut erf = 0.0;
        for n in 0..60 {
            erf += term / (2 * n + 1) as f64;
            term *= -z * z / (n + 1) as f64;
        }
        erf *= 2.0 / std::f64::consts::PI.sqrt();
        let oracle = 0.5 * (1.0 + erf);
        assert!((gelu(1.0) - oracle).abs() < 1e-10);
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::full(&[1, 3], 1.0);
        let b = Tensor::zeros(&[1, 3]);
        let c = Tensor::full(&[1, 3], 4.2).layer_norm(&g, &b, LAYER_NORM_EPS).unwrap();
        assert!(c.data().iter().all(|&x| x.abs() < 1e-9));

        let g2 = Tensor::full(&[1, 2], 1.0);
        let b2 = Tensor::zeros(&[1, 2]);
        let y = Tensor::row(vec![-1.0, 1.0]).layer_norm(&g2, &b2, LAYER_NORM_EPS).unwrap();
        let expected = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((y.data()[0] + expected).abs() < 1e-15);
        assert!((y.data()[1] - expected).abs() < 1e-15);

        let mut rng = SplitMix64::new(5);
        let x = random_matrix(&mut rng, 1, 7);
        let gain = random_matrix(&mut rng, 1, 7);
        let bias = random_matrix(&mut rng, 1, 7);
        let y = x.layer_norm(&gain, &bias, LAYER_NORM_EPS).unwrap();
        let row = x.data();
        let mean = row.iter().sum::<f64>() / 7.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        for j in 0..7 {
            let e = (row[j] - mean) / (var + LAYER_NORM_EPS).sqrt() * gain.data()[j] + bias.data()[j];
            assert!((y.data()[j] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_gather_slice() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = Tensor::concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.slice_cols(2, 3).unwrap(), b);
        assert_eq!(c.gather_rows(&[1, 1]).unwrap().data(), &[3.0, 4.0, 6.0, 3.0, 4.0, 6.0]);
        assert!(c.gather_rows(&[2]).is_err());
    }
}
