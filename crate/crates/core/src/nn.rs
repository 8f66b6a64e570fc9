//! Fully connected networks and sinusoidal positional encoding on the tape.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `[in, out]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    /// He-uniform initialization with zero bias.
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / inputs.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w = (0..inputs * outputs).map(|_| T::lit(dist.sample(rng))).collect();
        Self {
            weight: Tensor::new(&[inputs, outputs], w).expect("shape"),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Stack of linear layers with ReLU between them and no activation after
/// the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// `sizes = [in, hidden.., out]`
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        Self {
            layers: sizes.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map(Linear::outputs).unwrap_or(0)
    }

    pub fn last_mut(&mut self) -> &mut Linear<T> {
        self.layers.last_mut().expect("non-empty")
    }

    /// Parameters in binding order: weight, bias per layer.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> MlpVars<'t, T> {
        let bind = |t: &Tensor<T>| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t.clone())
            }
        };
        MlpVars {
            layers: self.layers.iter().map(|l| (bind(&l.weight), bind(&l.bias))).collect(),
        }
    }

    /// Forward pass on a fresh tape without gradient tracking.
    pub fn eval(&self, input: Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let out = vars.forward(tape.constant(input))?;
        Ok((*out.value()).clone())
    }
}

/// An [`Mlp`] bound to a tape.
pub struct MlpVars<'t, T> {
    pub layers: Vec<(Var<'t, T>, Var<'t, T>)>,
}

impl<'t, T: Scalar> MlpVars<'t, T> {
    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>, AutodiffError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w)?.add(b)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    pub fn vars(&self) -> Vec<Var<'t, T>> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Width of `γ(x)` for `dim`-dimensional input and `bands` frequencies.
pub fn posenc_dim(dim: usize, bands: usize) -> usize {
    dim * (1 + 2 * bands)
}

/// `γ(x) = [x, sin(2⁰πx), cos(2⁰πx), …, sin(2^{L-1}πx), cos(2^{L-1}πx)]`
/// applied along the last axis.
pub fn posenc<'t, T: Scalar>(x: Var<'t, T>, bands: usize) -> Result<Var<'t, T>, AutodiffError> {
    let shape = x.shape();
    let axis = shape.len().saturating_sub(1);
    let mut parts = Vec::with_capacity(1 + 2 * bands);
    parts.push(x);
    let mut freq = T::PI();
    for _ in 0..bands {
        let s = x.scale(freq);
        parts.push(s.sin());
        parts.push(s.cos());
        freq = freq + freq;
    }
    x.tape().concat(&parts, axis)
}

/// Plain-value counterpart of [`posenc`] for one row.
pub fn posenc_values<T: Scalar>(x: &[T], bands: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(posenc_dim(x.len(), bands));
    out.extend_from_slice(x);
    let mut freq = T::PI();
    for _ in 0..bands {
        out.extend(x.iter().map(|&v| (v * freq).sin()));
        out.extend(x.iter().map(|&v| (v * freq).cos()));
        freq = freq + freq;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn posenc_matches_plain_values() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[2, 3], vec![0.1, -0.2, 0.3, 0.0, 0.5, 1.0]).unwrap());
        let y = posenc(x, 3).unwrap().value();
        assert_eq!(y.shape(), &[2, posenc_dim(3, 3)]);
        assert_eq!(y.row(0), posenc_values(&[0.1, -0.2, 0.3], 3).as_slice());
        assert_eq!(y.row(1), posenc_values(&[0.0, 0.5, 1.0], 3).as_slice());
    }

    #[test]
    fn mlp_shapes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::<f64>::new(&[5, 16, 16, 2], &mut rng);
        let out = mlp.eval(Tensor::zeros(&[7, 5])).unwrap();
        assert_eq!(out.shape(), &[7, 2]);
        assert_eq!(mlp.tensors().len(), 6);
    }
}
