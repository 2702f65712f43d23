//! Toy differentiable encoders.
//!
//! An [`Mlp`] is a stack of affine layers with `tanh` between them (never after
//! the last one). Encoders and the projection head both run an `Mlp` and then
//! L2-normalize each output row. Backward passes go through the normalization
//! Jacobian `(I - z zᵀ) / ‖u‖` and then the layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_rows, norm, EmbeddingBatch, Matrix};

/// One affine layer. `weight` is `fan_in x fan_out`, so a batch goes through
/// as `X · W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Encoder parameters: image and text towers are plain MLPs.
pub type EncoderParams = Mlp;

/// Gradients share the parameter layout.
pub type MlpGrads = Mlp;

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyInput);
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.fan_out() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {k}: bias length {} vs fan_out {}",
                    l.bias.len(),
                    l.fan_out()
                )));
            }
            if k > 0 && layers[k - 1].fan_out() != l.fan_in() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {k} expects {} inputs but layer {} produces {}",
                    l.fan_in(),
                    k - 1,
                    layers[k - 1].fan_out()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Zeroed copy with the same layout.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.fan_in(), l.fan_out()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.fan_in() * l.fan_out() + l.bias.len())
            .sum()
    }

    /// Parameters flattened layer by layer, weight before bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`Mlp::flatten`].
    pub fn load_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length");
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
    }

    /// Visits every parameter tensor mutably; the flag is true for weight
    /// matrices and false for biases.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&mut [f64], bool)) {
        for l in &mut self.layers {
            f(l.weight.data_mut(), true);
            f(&mut l.bias, false);
        }
    }

    pub fn for_each_tensor(&self, mut f: impl FnMut(&[f64], bool)) {
        for l in &self.layers {
            f(l.weight.data(), true);
            f(&l.bias, false);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    /// Forward pass without normalization. Returns the pre-normalization
    /// output and the input of every layer.
    fn forward(&self, x: &Matrix) -> Result<(Matrix, Vec<Matrix>)> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimMismatch(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let mut y = h.matmul(&l.weight)?;
            for r in 0..y.rows() {
                for (v, b) in y.row_mut(r).iter_mut().zip(&l.bias) {
                    *v += b;
                }
            }
            if k < last {
                y = y.map(f64::tanh);
            }
            inputs.push(h);
            h = y;
        }
        Ok((h, inputs))
    }

    /// Backward pass given the gradient w.r.t. the pre-normalization output.
    /// Returns parameter gradients and the gradient w.r.t. the network input.
    fn backward(&self, inputs: &[Matrix], grad_out: &Matrix) -> Result<(MlpGrads, Matrix)> {
        let mut grads = self.zeros_like();
        let mut g = grad_out.clone();
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            let x = &inputs[k];
            grads.layers[k].weight = x.t_matmul(&g)?;
            let gb = &mut grads.layers[k].bias;
            for r in 0..g.rows() {
                for (b, v) in gb.iter_mut().zip(g.row(r)) {
                    *b += v;
                }
            }
            let mut gx = g.matmul_t(&l.weight)?;
            if k > 0 {
                // x is tanh output of the previous layer: d tanh = 1 - a².
                for (gv, a) in gx.data_mut().iter_mut().zip(x.data()) {
                    *gv *= 1.0 - a * a;
                }
            }
            g = gx;
        }
        Ok((grads, g))
    }
}

fn glorot_layer(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Layer {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-a..a))
        .collect();
    Layer {
        weight: Matrix::new(fan_in, fan_out, data).expect("finite glorot weights"),
        bias: vec![0.0; fan_out],
    }
}

/// Seeded Glorot-uniform MLP with zero biases.
pub fn init_encoder(
    seed: u64,
    input_dim: usize,
    hidden_dims: &[usize],
    output_dim: usize,
) -> Result<EncoderParams> {
    if input_dim == 0 || output_dim == 0 || hidden_dims.contains(&0) {
        return Err(Error::InvalidParameter(
            "layer dimensions must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden_dims);
    dims.push(output_dim);
    let layers = dims
        .windows(2)
        .map(|w| glorot_layer(&mut rng, w[0], w[1]))
        .collect();
    Mlp::from_layers(layers)
}

/// Forward state kept for [`encoder_backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    norms: Vec<f64>,
    z: Matrix,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        &self.z
    }
}

fn normalize_with_cache(mlp: &Mlp, raw: &Matrix) -> Result<(EmbeddingBatch, ForwardCache)> {
    let (u, inputs) = mlp.forward(raw)?;
    let norms = (0..u.rows()).map(|i| norm(u.row(i))).collect();
    let z = l2_normalize_rows(&u)?;
    let cache = ForwardCache {
        inputs,
        norms,
        z: z.matrix().clone(),
    };
    Ok((z, cache))
}

/// Runs the network and normalizes each output row.
pub fn encode(params: &EncoderParams, raw: &Matrix) -> Result<(EmbeddingBatch, ForwardCache)> {
    if !raw.is_finite() {
        return Err(Error::NonFinite("encoder input".into()));
    }
    normalize_with_cache(params, raw)
}

fn normalization_backward(cache: &ForwardCache, grad_z: &Matrix) -> Result<Matrix> {
    if grad_z.shape() != cache.z.shape() {
        return Err(Error::ShapeMismatch(format!(
            "gradient {:?} vs output {:?}",
            grad_z.shape(),
            cache.z.shape()
        )));
    }
    let mut gu = grad_z.clone();
    for i in 0..gu.rows() {
        let z = cache.z.row(i);
        let proj: f64 = z.iter().zip(grad_z.row(i)).map(|(a, b)| a * b).sum();
        let n = cache.norms[i];
        for (g, zv) in gu.row_mut(i).iter_mut().zip(z) {
            *g = (*g - zv * proj) / n;
        }
    }
    Ok(gu)
}

/// Parameter gradients of a scalar objective given its gradient w.r.t. the
/// normalized embeddings.
pub fn encoder_backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    grad_z: &Matrix,
) -> Result<MlpGrads> {
    let gu = normalization_backward(cache, grad_z)?;
    Ok(params.backward(&cache.inputs, &gu)?.0)
}

/// Projection head used by the view-consistency loss: a two-layer `tanh`
/// perceptron whose output is re-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    mlp: Mlp,
}

impl ProjectionHead {
    /// `d -> hidden -> d`, Glorot-uniform.
    pub fn new(seed: u64, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            mlp: init_encoder(seed, dim, &[hidden], dim)?,
        })
    }

    /// Single identity layer; maps unit rows to themselves.
    pub fn identity(dim: usize) -> Self {
        Self {
            mlp: Mlp {
                layers: vec![Layer {
                    weight: Matrix::identity(dim),
                    bias: vec![0.0; dim],
                }],
            },
        }
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.input_dim() != mlp.output_dim() {
            return Err(Error::DimMismatch(format!(
                "projection head maps {} to {}",
                mlp.input_dim(),
                mlp.output_dim()
            )));
        }
        Ok(Self { mlp })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn dim(&self) -> usize {
        self.mlp.output_dim()
    }
}

pub fn project(
    head: &ProjectionHead,
    z: &EmbeddingBatch,
) -> Result<(EmbeddingBatch, ForwardCache)> {
    normalize_with_cache(&head.mlp, z.matrix())
}

/// Backward through [`project`]: head parameter gradients plus the gradient
/// w.r.t. the head input.
pub fn project_backward(
    head: &ProjectionHead,
    cache: &ForwardCache,
    grad_q: &Matrix,
) -> Result<(MlpGrads, Matrix)> {
    let gu = normalization_backward(cache, grad_q)?;
    head.mlp.backward(&cache.inputs, &gu)
}
