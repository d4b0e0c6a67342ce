//! Embedding network: optional `ReLU` hidden layer, affine output to `d`
//! dimensions, and the class-center matrix `W` (`n × d`).
//!
//! Centers are stored unconstrained and normalized inside every forward pass
//! by the head.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numeric::Scalar;

/// Standard deviation of the initial center entries.
///
/// Centers are normalized in the forward pass, so their gradient scales as
/// `1 / ‖w‖` and the relative step per update as `1 / ‖w‖²`. Unit-variance
/// centers (`‖w‖ ≈ sqrt(d)`) take steps of roughly 10% of their norm at
/// `lr = 0.1, s = 32`, which drives centers and features into a degenerate
/// antipodal configuration within the first epoch.
pub const CENTER_INIT_STD: f64 = 4.0;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self · x + bias` for a matrix of shape `out × in`.
    fn affine(&self, bias: &Matrix<T>, x: &[T]) -> Vec<T> {
        (0..self.rows)
            .map(|o| {
                let mut acc = bias.data[o];
                for (w, &xi) in self.row(o).iter().zip(x) {
                    acc += *w * xi;
                }
                acc
            })
            .collect()
    }
}

/// Affine layer `y = W x + b` with `W: out × in` and `b: 1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T = f64> {
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Scalar> Dense<T> {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: Matrix::zeros(1, output),
        }
    }

    fn forward(&self, x: &[T]) -> Vec<T> {
        self.weight.affine(&self.bias, x)
    }

    fn map<U: Scalar>(&self, f: impl Fn(T) -> U + Copy) -> Dense<U> {
        Dense {
            weight: self.weight.map(f),
            bias: self.bias.map(f),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelShape {
    pub input_dim: usize,
    pub hidden_dim: Option<usize>,
    pub embed_dim: usize,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingModel<T = f64> {
    pub hidden: Option<Dense<T>>,
    pub output: Dense<T>,
    /// Class centers, one row per class.
    pub centers: Matrix<T>,
}

/// Intermediate activations of one forward pass, kept for backprop.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    hidden_pre: Option<Vec<f64>>,
    layer_input: Vec<f64>,
}

impl EmbeddingModel<f64> {
    /// Gaussian init: He scaling for the hidden layer, `1/sqrt(fan_in)` for
    /// the output layer, `N(0, CENTER_INIT_STD²)` centers, zero biases.
    pub fn new(shape: ModelShape, seed: u64) -> Result<Self> {
        if shape.input_dim == 0 || shape.embed_dim == 0 || shape.num_classes < 2 || shape.hidden_dim == Some(0) {
            return Err(Error::InvalidTrainConfig(format!("degenerate model shape {shape:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gaussian = |rows: usize, cols: usize, std: f64| {
            let data = (0..rows * cols)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Matrix { rows, cols, data }
        };
        let hidden = shape.hidden_dim.map(|h| Dense {
            weight: gaussian(h, shape.input_dim, (2.0 / shape.input_dim as f64).sqrt()),
            bias: Matrix::zeros(1, h),
        });
        let fan_in = shape.hidden_dim.unwrap_or(shape.input_dim);
        let output = Dense {
            weight: gaussian(shape.embed_dim, fan_in, (1.0 / fan_in as f64).sqrt()),
            bias: Matrix::zeros(1, shape.embed_dim),
        };
        let centers = gaussian(shape.num_classes, shape.embed_dim, CENTER_INIT_STD);
        Ok(Self {
            hidden,
            output,
            centers,
        })
    }

    pub fn forward_cached(&self, input: &[f64]) -> (Vec<f64>, ForwardCache) {
        let (hidden_pre, layer_input) = match &self.hidden {
            Some(h) => {
                let pre = h.forward(input);
                let act = pre.iter().map(|&v| v.max(0.0)).collect();
                (Some(pre), act)
            }
            None => (None, input.to_vec()),
        };
        let out = self.output.forward(&layer_input);
        (
            out,
            ForwardCache {
                hidden_pre,
                layer_input,
            },
        )
    }

    /// Accumulates parameter gradients for a batch given `∂L/∂embedding`
    /// per sample. Center gradients are left at zero; the head supplies them.
    pub fn backward(&self, inputs: &[&[f64]], caches: &[ForwardCache], grad_embed: &[Vec<f64>]) -> EmbeddingModel<f64> {
        let mut grads = self.zeros_like();
        for ((input, cache), g) in inputs.iter().zip(caches).zip(grad_embed) {
            let out_w = &mut grads.output.weight;
            for (o, &go) in g.iter().enumerate() {
                grads.output.bias.data[o] += go;
                for (w, &a) in out_w.row_mut(o).iter_mut().zip(&cache.layer_input) {
                    *w += go * a;
                }
            }
            if let (Some(hg), Some(pre)) = (grads.hidden.as_mut(), &cache.hidden_pre) {
                // ∂L/∂pre_h = [pre_h > 0] · Σ_o W_out[o, h] g_o
                for (h, &p) in pre.iter().enumerate() {
                    if p <= 0.0 {
                        continue;
                    }
                    let mut back = 0.0;
                    for (o, &go) in g.iter().enumerate() {
                        back += self.output.weight.row(o)[h] * go;
                    }
                    hg.bias.data[h] += back;
                    for (w, &x) in hg.weight.row_mut(h).iter_mut().zip(input.iter()) {
                        *w += back * x;
                    }
                }
            }
        }
        grads
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingModel<U> {
        self.map(U::from_f64)
    }
}

impl<T: Scalar> EmbeddingModel<T> {
    pub fn shape(&self) -> ModelShape {
        ModelShape {
            input_dim: self
                .hidden
                .as_ref()
                .map_or(self.output.weight.cols(), |h| h.weight.cols()),
            hidden_dim: self.hidden.as_ref().map(|h| h.weight.rows()),
            embed_dim: self.output.weight.rows(),
            num_classes: self.centers.rows(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let shape = self.shape();
        let fan_in = shape.hidden_dim.unwrap_or(shape.input_dim);
        Self {
            hidden: shape.hidden_dim.map(|h| Dense::zeros(shape.input_dim, h)),
            output: Dense::zeros(fan_in, shape.embed_dim),
            centers: Matrix::zeros(shape.num_classes, shape.embed_dim),
        }
    }

    /// Raw (unnormalized) embedding of one input.
    pub fn embed(&self, input: &[T]) -> Vec<T> {
        match &self.hidden {
            Some(h) => {
                let act: Vec<T> = h.forward(input).into_iter().map(|v| v.max(T::zero())).collect();
                self.output.forward(&act)
            }
            None => self.output.forward(input),
        }
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U + Copy) -> EmbeddingModel<U> {
        EmbeddingModel {
            hidden: self.hidden.as_ref().map(|h| h.map(f)),
            output: self.output.map(f),
            centers: self.centers.map(f),
        }
    }

    /// Named parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix<T>)> {
        let mut out = Vec::with_capacity(5);
        if let Some(h) = &self.hidden {
            out.push(("hidden.weight", &h.weight));
            out.push(("hidden.bias", &h.bias));
        }
        out.push(("output.weight", &self.output.weight));
        out.push(("output.bias", &self.output.bias));
        out.push(("centers", &self.centers));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix<T>)> {
        let mut out = Vec::with_capacity(5);
        if let Some(h) = &mut self.hidden {
            out.push(("hidden.weight", &mut h.weight));
            out.push(("hidden.bias", &mut h.bias));
        }
        out.push(("output.weight", &mut self.output.weight));
        out.push(("output.bias", &mut self.output.bias));
        out.push(("centers", &mut self.centers));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.as_slice().len()).sum()
    }

    /// Mutable reference to the `index`-th scalar parameter in
    /// [`tensors`](Self::tensors) order.
    pub fn parameter_mut(&mut self, mut index: usize) -> Option<&mut T> {
        for (_, t) in self.tensors_mut() {
            let len = t.as_slice().len();
            if index < len {
                return Some(&mut t.as_mut_slice()[index]);
            }
            index -= len;
        }
        None
    }

    /// Assembles a model from named tensors (checkpoint loading).
    pub fn from_tensors(tensors: Vec<(String, Matrix<T>)>) -> Result<Self> {
        let mut hidden_w = None;
        let mut hidden_b = None;
        let mut out_w = None;
        let mut out_b = None;
        let mut centers = None;
        for (name, m) in tensors {
            let slot = match name.as_str() {
                "hidden.weight" => &mut hidden_w,
                "hidden.bias" => &mut hidden_b,
                "output.weight" => &mut out_w,
                "output.bias" => &mut out_b,
                "centers" => &mut centers,
                other => return Err(Error::Parse(format!("unknown tensor '{other}'"))),
            };
            if slot.replace(m).is_some() {
                return Err(Error::Parse(format!("duplicate tensor '{name}'")));
            }
        }
        let missing = |n: &str| Error::Parse(format!("missing tensor '{n}'"));
        let hidden = match (hidden_w, hidden_b) {
            (Some(weight), Some(bias)) => Some(Dense { weight, bias }),
            (None, None) => None,
            _ => return Err(Error::Parse("incomplete hidden layer".into())),
        };
        let output = Dense {
            weight: out_w.ok_or_else(|| missing("output.weight"))?,
            bias: out_b.ok_or_else(|| missing("output.bias"))?,
        };
        let centers = centers.ok_or_else(|| missing("centers"))?;
        let model = Self {
            hidden,
            output,
            centers,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let fail = |what: &str| Err(Error::Parse(format!("inconsistent tensor shapes: {what}")));
        let fan_in = match &self.hidden {
            Some(h) => {
                if h.bias.shape() != (1, h.weight.rows()) {
                    return fail("hidden.bias");
                }
                h.weight.rows()
            }
            None => self.output.weight.cols(),
        };
        if self.output.weight.cols() != fan_in {
            return fail("output.weight");
        }
        if self.output.bias.shape() != (1, self.output.weight.rows()) {
            return fail("output.bias");
        }
        if self.centers.cols() != self.output.weight.rows() {
            return fail("centers");
        }
        Ok(())
    }
}
