//! Feed-forward perceptrons with ReLU between layers, optional biases, and
//! inverted dropout on hidden activations.
//!
//! Parameters live in one flat buffer, layer by layer: the row-major weight
//! matrix `(out, in)` followed by the bias vector when present. Gradients use
//! the same layout, so optimizers and checkpoints can treat a network as a
//! single block of reals.

use rand::{Rng, RngCore};

use super::matrix::{axpy, dot, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerSpan {
    inp: usize,
    out: usize,
    weight: usize,
    bias: Option<usize>,
}

fn layout(dims: &[usize], bias: bool) -> (Vec<LayerSpan>, usize) {
    let mut spans = Vec::with_capacity(dims.len().saturating_sub(1));
    let mut off = 0;
    for w in dims.windows(2) {
        let (inp, out) = (w[0], w[1]);
        let weight = off;
        off += inp * out;
        let b = if bias {
            let b = off;
            off += out;
            Some(b)
        } else {
            None
        };
        spans.push(LayerSpan {
            inp,
            out,
            weight,
            bias: b,
        });
    }
    (spans, off)
}

#[derive(Debug, Clone)]
pub struct Mlp {
    dims: Vec<usize>,
    bias: bool,
    activation: Activation,
    dropout: f64,
    spans: Vec<LayerSpan>,
    params: Vec<f64>,
    version: u64,
}

/// Equality ignores the mutation counter used to reject stale caches.
impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.bias == other.bias
            && self.activation == other.activation
            && self.dropout == other.dropout
            && self.params == other.params
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct MlpCache {
    version: u64,
    input: Vec<f64>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
    /// Post-ReLU, post-dropout hidden outputs (inputs of the next layer).
    hidden: Vec<Vec<f64>>,
    /// Dropout multipliers per hidden layer (0 or `1/(1-rate)`), if sampled.
    masks: Vec<Option<Vec<f64>>>,
}

impl MlpCache {
    pub fn input(&self) -> &[f64] {
        &self.input
    }
}

/// Gradient with the same flat layout as [`Mlp::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub data: Vec<f64>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], bias: bool, dropout: f64, rng: &mut R) -> Result<Self> {
        let mut mlp = Self::zeros(dims, bias, dropout)?;
        for span in mlp.spans.clone() {
            let limit = (6.0 / (span.inp + span.out) as f64).sqrt();
            for w in &mut mlp.params[span.weight..span.weight + span.inp * span.out] {
                *w = rng.random_range(-limit..=limit);
            }
        }
        Ok(mlp)
    }

    pub fn zeros(dims: &[usize], bias: bool, dropout: f64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!(
                "perceptron dims must have at least two non-zero entries, got {dims:?}"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout rate {dropout} not in [0,1)")));
        }
        let (spans, len) = layout(dims, bias);
        Ok(Self {
            dims: dims.to_vec(),
            bias,
            activation: Activation::Relu,
            dropout,
            spans,
            params: vec![0.0; len],
            version: 0,
        })
    }

    pub fn from_params(dims: &[usize], bias: bool, dropout: f64, params: Vec<f64>) -> Result<Self> {
        let mut mlp = Self::zeros(dims, bias, dropout)?;
        if params.len() != mlp.params.len() {
            return Err(Error::Shape {
                context: "Mlp::from_params",
                expected: mlp.params.len(),
                got: params.len(),
            });
        }
        mlp.params = params;
        Ok(mlp)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.spans.len()
    }

    pub fn has_bias(&self) -> bool {
        self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access. Invalidates every cache produced so far.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn weight(&self, layer: usize) -> Matrix {
        let s = self.spans[layer];
        Matrix::from_vec(
            s.out,
            s.inp,
            self.params[s.weight..s.weight + s.inp * s.out].to_vec(),
        )
        .expect("layout is consistent")
    }

    pub fn bias(&self, layer: usize) -> Option<&[f64]> {
        let s = self.spans[layer];
        s.bias.map(|b| &self.params[b..b + s.out])
    }

    pub fn set_weight(&mut self, layer: usize, w: &Matrix) -> Result<()> {
        let s = self.spans[layer];
        if w.rows() != s.out || w.cols() != s.inp {
            return Err(Error::Shape {
                context: "Mlp::set_weight",
                expected: s.out * s.inp,
                got: w.rows() * w.cols(),
            });
        }
        self.params_mut()[s.weight..s.weight + s.inp * s.out].copy_from_slice(w.data());
        Ok(())
    }

    pub fn set_bias(&mut self, layer: usize, b: &[f64]) -> Result<()> {
        let s = self.spans[layer];
        let Some(off) = s.bias else {
            return Err(Error::Config("perceptron has no bias terms".into()));
        };
        if b.len() != s.out {
            return Err(Error::Shape {
                context: "Mlp::set_bias",
                expected: s.out,
                got: b.len(),
            });
        }
        self.params_mut()[off..off + s.out].copy_from_slice(b);
        Ok(())
    }

    /// Slice of a gradient buffer holding layer `layer`'s weight gradient.
    pub fn grad_weight<'g>(&self, grad: &'g MlpGrad, layer: usize) -> &'g [f64] {
        let s = self.spans[layer];
        &grad.data[s.weight..s.weight + s.inp * s.out]
    }

    pub fn grad_bias<'g>(&self, grad: &'g MlpGrad, layer: usize) -> Option<&'g [f64]> {
        let s = self.spans[layer];
        s.bias.map(|b| &grad.data[b..b + s.out])
    }

    pub fn zero_grad(&self) -> MlpGrad {
        MlpGrad {
            data: vec![0.0; self.params.len()],
        }
    }

    fn affine(&self, span: LayerSpan, x: &[f64]) -> Vec<f64> {
        let w = &self.params[span.weight..span.weight + span.inp * span.out];
        let mut out: Vec<f64> = w.chunks_exact(span.inp).map(|row| dot(row, x)).collect();
        if let Some(b) = span.bias {
            for (o, bi) in out.iter_mut().zip(&self.params[b..b + span.out]) {
                *o += bi;
            }
        }
        out
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.in_dim() {
            return Err(Error::Shape {
                context: "Mlp::forward",
                expected: self.in_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    /// Forward pass. With `train = Some(rng)`, dropout masks for every hidden
    /// layer are drawn from `rng` (one uniform per unit, in order); otherwise
    /// the network runs in evaluation mode and `rng` is never touched.
    pub fn forward(&self, input: &[f64], mut train: Option<&mut dyn RngCore>) -> Result<(Vec<f64>, MlpCache)> {
        self.check_input(input)?;
        let last = self.spans.len() - 1;
        let mut pre = Vec::with_capacity(last);
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(last);
        let mut masks = Vec::with_capacity(last);
        let mut out = Vec::new();
        for (l, &span) in self.spans.iter().enumerate() {
            let x = if l == 0 { input } else { &hidden[l - 1] };
            let z = self.affine(span, x);
            if l == last {
                out = z;
                break;
            }
            let mut a: Vec<f64> = z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
            let mask = match train.as_deref_mut() {
                Some(rng) if self.dropout > 0.0 => {
                    let keep = 1.0 / (1.0 - self.dropout);
                    let m: Vec<f64> = (0..a.len())
                        .map(|_| if rng.random::<f64>() >= self.dropout { keep } else { 0.0 })
                        .collect();
                    for (ai, mi) in a.iter_mut().zip(&m) {
                        *ai *= mi;
                    }
                    Some(m)
                }
                _ => None,
            };
            pre.push(z);
            hidden.push(a);
            masks.push(mask);
        }
        Ok((
            out,
            MlpCache {
                version: self.version,
                input: input.to_vec(),
                pre,
                hidden,
                masks,
            },
        ))
    }

    /// Evaluation-mode forward without a cache.
    pub fn infer(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let last = self.spans.len() - 1;
        let mut cur = input.to_vec();
        for (l, &span) in self.spans.iter().enumerate() {
            let mut z = self.affine(span, &cur);
            if l != last {
                for v in &mut z {
                    if *v <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            cur = z;
        }
        Ok(cur)
    }

    pub fn backward(&self, cache: &MlpCache, upstream: &[f64]) -> Result<(MlpGrad, Vec<f64>)> {
        let mut grad = self.zero_grad();
        let dx = self.backward_into(cache, upstream, &mut grad.data)?;
        Ok((grad, dx))
    }

    /// Accumulates parameter gradients into `grad` (flat layout) and returns
    /// the gradient with respect to the input.
    pub fn backward_into(&self, cache: &MlpCache, upstream: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
        if cache.version != self.version {
            return Err(Error::StaleCache {
                cache: cache.version,
                params: self.version,
            });
        }
        if upstream.len() != self.out_dim() {
            return Err(Error::Shape {
                context: "Mlp::backward",
                expected: self.out_dim(),
                got: upstream.len(),
            });
        }
        if grad.len() != self.params.len() {
            return Err(Error::Shape {
                context: "Mlp::backward gradient buffer",
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        let mut g = upstream.to_vec();
        for l in (0..self.spans.len()).rev() {
            let span = self.spans[l];
            let x: &[f64] = if l == 0 { &cache.input } else { &cache.hidden[l - 1] };
            let w = &self.params[span.weight..span.weight + span.inp * span.out];
            let gw = &mut grad[span.weight..span.weight + span.inp * span.out];
            for (r, &gr) in g.iter().enumerate() {
                if gr != 0.0 {
                    axpy(gr, x, &mut gw[r * span.inp..(r + 1) * span.inp]);
                }
            }
            if let Some(b) = span.bias {
                for (gb, gr) in grad[b..b + span.out].iter_mut().zip(&g) {
                    *gb += gr;
                }
            }
            let mut gx = vec![0.0; span.inp];
            for (r, &gr) in g.iter().enumerate() {
                if gr != 0.0 {
                    axpy(gr, &w[r * span.inp..(r + 1) * span.inp], &mut gx);
                }
            }
            if l > 0 {
                let z = &cache.pre[l - 1];
                if let Some(m) = &cache.masks[l - 1] {
                    for (gi, mi) in gx.iter_mut().zip(m) {
                        *gi *= mi;
                    }
                }
                for (gi, &zi) in gx.iter_mut().zip(z) {
                    if zi <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            g = gx;
        }
        Ok(g)
    }
}
