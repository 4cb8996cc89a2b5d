//! Flat named parameter storage shared by the model, optimizer and checkpoints.

use std::ops::Index;

use crate::autograd::{Gradients, Tape, Var};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Parameters of a store placed on a tape, indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    /// Wraps vars in store order; used when parameters are already on the tape.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// `x·W + b`, with `W` stored as `in × out` and `b` as `1 × out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearIds {
    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> crate::Result<Var> {
        tape.linear(x, p[self.weight], p[self.bias])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormIds {
    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> crate::Result<Var> {
        tape.layer_norm(x, p[self.gain], p[self.bias], crate::tensor::LAYER_NORM_EPS)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// `fan_in × fan_out` matrix, entries uniform in `±1/√fan_in`.
    pub fn uniform_matrix(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        let t = Tensor::matrix(fan_in, fan_out, data).expect("sizes match");
        self.add(name, t)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> LinearIds {
        LinearIds {
            weight: self.uniform_matrix(format!("{name}.weight"), fan_in, fan_out, rng),
            bias: self.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out])),
        }
    }

    pub fn layer_norm(&mut self, name: &str, width: usize) -> LayerNormIds {
        LayerNormIds {
            gain: self.add(format!("{name}.gain"), Tensor::full(&[1, width], 1.0)),
            bias: self.add(format!("{name}.bias"), Tensor::zeros(&[1, width])),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on the tape, as leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| {
                    if trainable {
                        tape.leaf(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect(),
        )
    }

    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Tensor> {
        bound.0.iter().map(|&v| grads.wrt(v)).collect()
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for x in t.data_mut() {
                *x = f64::from(*x as f32);
            }
        }
    }

    /// Replaces tensors by name; every name must already exist with the same shape.
    pub fn load_named(&mut self, named: Vec<(String, Tensor)>) -> crate::Result<()> {
        if named.len() != self.len() {
            return Err(crate::Error::Contract(format!(
                "expected {} parameters, got {}",
                self.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let i = self
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| crate::Error::Contract(format!("unknown parameter {name}")))?;
            if self.tensors[i].shape() != t.shape() {
                return Err(crate::Error::shape("load parameter", self.tensors[i].shape(), t.shape()));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = SplitMix64::new(1);
        let mut store = ParamStore::new();
        let lin = store.linear("l", 16, 4, &mut rng);
        let w = store.get(lin.weight);
        assert_eq!(w.shape(), &[16, 4]);
        assert!(w.data().iter().all(|x| x.abs() <= 0.25));
        assert!(store.get(lin.bias).data().iter().all(|&x| x == 0.0));
        let ln = store.layer_norm("n", 3);
        assert_eq!(store.get(ln.gain).data(), &[1.0, 1.0, 1.0]);
        assert_eq!(store.names(), &["l.weight", "l.bias", "n.gain", "n.bias"]);
    }

    #[test]
    fn load_named_checks_shapes() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[1, 2]));
        assert!(store.load_named(vec![("a".into(), Tensor::zeros(&[2, 1]))]).is_err());
        assert!(store.load_named(vec![("b".into(), Tensor::zeros(&[1, 2]))]).is_err());
        store.load_named(vec![("a".into(), Tensor::full(&[1, 2], 3.0))]).unwrap();
        assert_eq!(store.tensors()[0].data(), &[3.0, 3.0]);
    }
}
