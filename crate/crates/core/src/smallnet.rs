//! Tiny multilayer perceptrons with hand-written reverse-mode derivatives.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::math::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation.
    fn deriv(self, pre: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out x in`
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// A fully connected network; hidden layers share one activation and the
/// output layer is affine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut RngStream) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Precondition("mlp needs at least two positive layer sizes".into()));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    w: DMatrix::from_fn(fan_out, fan_in, |_, _| rng.uniform_range(-bound, bound)),
                    b: DVector::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Precondition("mlp needs at least two positive layer sizes".into()));
        }
        let layers = sizes
            .windows(2)
            .map(|w| Layer { w: DMatrix::zeros(w[1], w[0]), b: DVector::zeros(w[1]) })
            .collect();
        Ok(Self { layers, activation })
    }

    /// Single affine layer `u -> w u + b`.
    pub fn linear(w: DMatrix<f64>, b: DVector<f64>) -> Self {
        Self { layers: vec![Layer { w, b }], activation: Activation::Tanh }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.w.nrows()));
        s
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Parameters flattened layer by layer: weights row-major, then bias.
    pub fn flat_params(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            for r in 0..l.w.nrows() {
                for c in 0..l.w.ncols() {
                    out.push(l.w[(r, c)]);
                }
            }
            out.extend(l.b.iter());
        }
        DVector::from_vec(out)
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("mlp flat params", self.param_count(), flat.len())?;
        let mut k = 0;
        for l in &mut self.layers {
            for r in 0..l.w.nrows() {
                for c in 0..l.w.ncols() {
                    l.w[(r, c)] = flat[k];
                    k += 1;
                }
            }
            for v in l.b.iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
        Ok(())
    }

    fn forward_trace(&self, u: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        // inputs[i] feeds layer i; pre[i] is that layer's pre-activation
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = u.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let z = &l.w * &h + &l.b;
            inputs.push(h);
            h = if i == last { z.clone() } else { z.map(|v| self.activation.apply(v)) };
            pre.push(z);
        }
        (inputs, pre)
    }

    pub fn forward(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("mlp input", self.input_dim(), u.len())?;
        Ok(self.forward_unchecked(u))
    }

    pub(crate) fn forward_unchecked(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut h = u.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.w * &h + &l.b;
            if i != last {
                z.apply(|v| *v = self.activation.apply(*v));
            }
            h = z;
        }
        h
    }

    /// Vector-Jacobian products: `cotangent^T dF/dparams` (flat layout) and
    /// `cotangent^T dF/du`.
    pub fn vjp(&self, u: &DVector<f64>, cotangent: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        check_dim("mlp input", self.input_dim(), u.len())?;
        check_dim("mlp cotangent", self.output_dim(), cotangent.len())?;
        Ok(self.vjp_unchecked(u, cotangent, true))
    }

    pub(crate) fn vjp_unchecked(
        &self,
        u: &DVector<f64>,
        cotangent: &DVector<f64>,
        want_params: bool,
    ) -> (DVector<f64>, DVector<f64>) {
        let (inputs, pre) = self.forward_trace(u);
        let n = self.layers.len();
        let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(if want_params { n } else { 0 });
        let mut delta = cotangent.clone();
        for i in (0..n).rev() {
            if i != n - 1 {
                for (d, z) in delta.iter_mut().zip(pre[i].iter()) {
                    *d *= self.activation.deriv(*z);
                }
            }
            if want_params {
                grads.push((&delta * inputs[i].transpose(), delta.clone()));
            }
            delta = self.layers[i].w.tr_mul(&delta);
        }
        let flat = if want_params {
            grads.reverse();
            let mut out = Vec::with_capacity(self.param_count());
            for (gw, gb) in &grads {
                for r in 0..gw.nrows() {
                    for c in 0..gw.ncols() {
                        out.push(gw[(r, c)]);
                    }
                }
                out.extend(gb.iter());
            }
            DVector::from_vec(out)
        } else {
            DVector::zeros(0)
        };
        (flat, delta)
    }

    /// Jacobian of the output w.r.t. the input.
    pub fn input_jacobian(&self, u: &DVector<f64>) -> DMatrix<f64> {
        let out = self.output_dim();
        let mut jac = DMatrix::zeros(out, self.input_dim());
        for r in 0..out {
            let mut e = DVector::zeros(out);
            e[r] = 1.0;
            let (_, g) = self.vjp_unchecked(u, &e, false);
            jac.row_mut(r).copy_from(&g.transpose());
        }
        jac
    }

    /// `params <- params - lr * grad`.
    pub fn sgd_step(&self, grad: &DVector<f64>, lr: f64) -> Result<Mlp> {
        check_dim("mlp gradient", self.param_count(), grad.len())?;
        let mut next = self.clone();
        let flat = self.flat_params() - grad * lr;
        next.set_flat_params(flat.as_slice())?;
        Ok(next)
    }
}
