use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor2};
use crate::error::{Error, Result};

/// `x · tanh(softplus(x))`.
pub fn mish(x: f64) -> f64 {
    if x > 20.0 {
        return x;
    }
    // tanh(ln(1 + e^x)) = n / (n + 2) with n = e^x (e^x + 2)
    let e = x.exp();
    let n = e * (e + 2.0);
    x * n / (n + 2.0)
}

pub fn mish_grad(x: f64) -> f64 {
    if x > 20.0 {
        return 1.0;
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    let d = n + 2.0;
    let th = n / d;
    // (1 - th²) σ(x) = 4(n + 1)/d² · e/(1 + e)
    th + x * 4.0 * (n + 1.0) / (d * d) * e / (1.0 + e)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Mish,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Mish => mish(x),
            Activation::Identity => x,
        }
    }

    fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Mish => mish_grad(x),
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected network with Mish on hidden layers and a linear output.
///
/// All weights and biases live in one flat vector; layer `l` stores its
/// `widths[l] × widths[l+1]` weight block row-major, followed by its bias.
#[derive(Debug, Clone)]
pub struct Mlp {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
    /// Bumped on every parameter write so stale tapes can be detected.
    generation: u64,
}

/// Equal architecture and parameters; the tape generation is ignored.
impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.widths == other.widths
            && self.activations == other.activations
            && self.params == other.params
    }
}

/// Activations recorded by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    generation: u64,
    widths: Vec<usize>,
    /// Input to each layer (the network input first).
    inputs: Vec<Tensor2>,
    /// Pre-activation output of each layer.
    pre: Vec<Tensor2>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.inputs[0].rows()
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        let mut offset = 0;
        for l in 0..net.layers() {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut net.params[offset..offset + fan_in * fan_out] {
                *w = rng.random_range(-bound..bound);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!(
                "network widths must have at least two positive entries, got {widths:?}"
            )));
        }
        let layers = widths.len() - 1;
        let activations = (0..layers)
            .map(|l| {
                if l + 1 == layers {
                    Activation::Identity
                } else {
                    Activation::Mish
                }
            })
            .collect();
        let count = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            widths: widths.to_vec(),
            activations,
            params: vec![0.0; count],
            generation: 0,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access. Invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation = self.generation.wrapping_add(1);
        &mut self.params
    }

    /// Replaces all parameters with `values` of matching length.
    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                name: "mlp parameters".into(),
                expected: vec![self.params.len()],
                got: vec![values.len()],
            });
        }
        self.params_mut().copy_from_slice(values);
        Ok(())
    }

    /// `(weight, bias)` ranges of layer `l` within the flat parameter vector.
    pub fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let mut offset = 0;
        for w in self.widths.windows(2).take(l) {
            offset += w[0] * w[1] + w[1];
        }
        let (i, o) = (self.widths[l], self.widths[l + 1]);
        (offset..offset + i * o, offset + i * o..offset + i * o + o)
    }

    pub fn forward(&self, input: &Tensor2) -> Result<(Tensor2, Tape)> {
        if input.cols() != self.input_width() {
            return Err(Error::DimensionMismatch {
                expected: self.input_width(),
                got: input.cols(),
            });
        }
        let batch = input.rows();
        let mut inputs = Vec::with_capacity(self.layers());
        let mut pre = Vec::with_capacity(self.layers());
        let mut x = input.clone();
        for l in 0..self.layers() {
            let (wr, br) = self.layer_ranges(l);
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let mut z = Tensor2::zeros(batch, fan_out);
            let bias = &self.params[br];
            for r in 0..batch {
                z.row_mut(r).copy_from_slice(bias);
            }
            gemm(
                batch,
                fan_in,
                fan_out,
                x.data(),
                false,
                &self.params[wr],
                false,
                z.data_mut(),
                true,
            );
            let act = self.activations[l];
            let mut y = z.clone();
            if act != Activation::Identity {
                y.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            }
            inputs.push(x);
            pre.push(z);
            x = y;
        }
        let tape = Tape {
            generation: self.generation,
            widths: self.widths.clone(),
            inputs,
            pre,
        };
        Ok((x, tape))
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, input: &Tensor2) -> Result<Tensor2> {
        self.forward(input).map(|(out, _)| out)
    }

    /// Backpropagates `output_grad` through the recorded pass, returning
    /// parameter gradients (same layout as [`Mlp::params`]) and the gradient
    /// with respect to the input.
    pub fn backward(&self, tape: &Tape, output_grad: &Tensor2) -> Result<(Vec<f64>, Tensor2)> {
        let mut grads = vec![0.0; self.params.len()];
        let input_grad = self.backward_into(tape, output_grad, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// As [`Mlp::backward`], accumulating parameter gradients into `grads`.
    pub fn backward_into(
        &self,
        tape: &Tape,
        output_grad: &Tensor2,
        grads: &mut [f64],
    ) -> Result<Tensor2> {
        if tape.generation != self.generation || tape.widths != self.widths {
            return Err(Error::StaleTape);
        }
        if grads.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                name: "gradient buffer".into(),
                expected: vec![self.params.len()],
                got: vec![grads.len()],
            });
        }
        let batch = tape.batch();
        if output_grad.shape() != [batch, self.output_width()] {
            return Err(Error::ShapeMismatch {
                name: "output gradient".into(),
                expected: vec![batch, self.output_width()],
                got: output_grad.shape().to_vec(),
            });
        }
        let mut g = output_grad.clone();
        for l in (0..self.layers()).rev() {
            let act = self.activations[l];
            if act != Activation::Identity {
                for (gv, z) in g.data_mut().iter_mut().zip(tape.pre[l].data()) {
                    *gv *= act.grad(*z);
                }
            }
            let (wr, br) = self.layer_ranges(l);
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            // dW += xᵀ g
            gemm(
                fan_in,
                batch,
                fan_out,
                tape.inputs[l].data(),
                true,
                g.data(),
                false,
                &mut grads[wr.clone()],
                true,
            );
            let gb = &mut grads[br];
            for row in g.iter_rows() {
                for (b, v) in gb.iter_mut().zip(row) {
                    *b += v;
                }
            }
            // dx = g Wᵀ
            let mut dx = Tensor2::zeros(batch, fan_in);
            gemm(
                batch,
                fan_out,
                fan_in,
                g.data(),
                false,
                &self.params[wr],
                true,
                dx.data_mut(),
                false,
            );
            g = dx;
        }
        Ok(g)
    }
}

/// `target ← rate · source + (1 - rate) · target`, coordinate-wise.
pub fn polyak(target: &mut Mlp, source: &Mlp, rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "polyak rate must lie in (0, 1], got {rate}"
        )));
    }
    if target.widths != source.widths {
        return Err(Error::ShapeMismatch {
            name: "polyak networks".into(),
            expected: source.widths.clone(),
            got: target.widths.clone(),
        });
    }
    let keep = 1.0 - rate;
    for (t, s) in target.params_mut().iter_mut().zip(&source.params) {
        *t = rate * s + keep * *t;
    }
    Ok(())
}
