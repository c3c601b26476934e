//! Batched dense layers with hand-derived reverse-mode gradients.
//!
//! This is the gradient engine shared by the radiance field and the pose
//! probe. Activations are row-major `(batch, features)` matrices; every
//! forward pass that will be differentiated keeps an [`MlpTrace`] holding the
//! input of each layer, and [`Mlp::backward`] walks the layers in reverse.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `(inputs, outputs)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Weights uniform in `[-bound, bound]`, biases zero.
    pub fn uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, bound: f64, rng: &mut R) -> Self {
        let weight = Array2::from_shape_simple_fn((inputs, outputs), || {
            bound * (2.0 * rng.random::<f64>() - 1.0)
        });
        Self {
            weight,
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight);
        z += &self.bias;
        z
    }
}

/// Multilayer perceptron: ReLU after every layer except the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Inputs of every layer, recorded during a differentiable forward pass.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    inputs: Vec<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrad {
    pub layers: Vec<DenseGrad>,
}

impl MlpTrace {
    /// Which hidden units were active, layer by layer. Two forward passes
    /// with equal patterns lie on the same linear piece of the network.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.inputs[1..]
            .iter()
            .flat_map(|a| a.iter().map(|&v| v > 0.0))
            .collect()
    }
}

impl MlpGrad {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| DenseGrad {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    /// Flat views in the same order as [`Mlp::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }
}

impl Mlp {
    /// Layer sizes `[in, hidden..., out]`. ReLU layers get He-uniform
    /// weights, the output layer LeCun-uniform weights; biases start at zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let gain = if k == last { 3.0 } else { 6.0 };
                Dense::uniform(w[0], w[1], (gain / w[0] as f64).sqrt(), rng)
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut a = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            relu_inplace(&mut a);
            a = layer.forward(a.view());
        }
        a
    }

    pub fn forward_traced(&self, x: Array2<f64>) -> (Array2<f64>, MlpTrace) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(a.view());
            inputs.push(a);
            if k + 1 < self.layers.len() {
                relu_inplace(&mut z);
            }
            a = z;
        }
        (a, MlpTrace { inputs })
    }

    /// Propagates `grad_out` (d loss / d output) back through the network.
    /// Returns d loss / d input and the parameter gradients.
    pub fn backward(&self, trace: &MlpTrace, grad_out: Array2<f64>) -> (Array2<f64>, MlpGrad) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut dz = grad_out;
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let a = &trace.inputs[k];
            let dw = a.t().dot(&dz);
            let db = dz.sum_axis(Axis(0));
            let mut da = dz.dot(&layer.weight.t());
            if k > 0 {
                // `a` is a ReLU output, positive exactly where the unit was active.
                ndarray::Zip::from(&mut da)
                    .and(a)
                    .for_each(|g, &x| {
                        if x <= 0.0 {
                            *g = 0.0;
                        }
                    });
            }
            grads.push(DenseGrad {
                weight: dw,
                bias: db,
            });
            dz = da;
        }
        grads.reverse();
        (dz, MlpGrad { layers: grads })
    }

    /// Flat mutable views: weight then bias, layer by layer.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
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

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    /// Independent dense-layer oracle: explicit triple loop.
    pub fn naive_forward(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for (k, l) in mlp.layers.iter().enumerate() {
            let mut z = vec![0.0; l.outputs()];
            for (o, zo) in z.iter_mut().enumerate() {
                let mut s = l.bias[o];
                for (i, ai) in a.iter().enumerate() {
                    s += ai * l.weight[[i, o]];
                }
                *zo = s;
            }
            if k + 1 < mlp.layers.len() {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = z;
        }
        a
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::naive_forward;
    use super::*;
    use crate::rng;

    #[test]
    fn forward_matches_naive_oracle() {
        let mut r = rng::stream(1, &[]);
        let mlp = Mlp::new(&[5, 7, 6, 3], &mut r);
        let x = Array2::from_shape_simple_fn((9, 5), || r.random::<f64>() * 2.0 - 1.0);
        let y = mlp.forward(x.view());
        let (y2, _) = mlp.forward_traced(x.clone());
        assert_eq!(y, y2);
        for (row, out) in x.rows().into_iter().zip(y.rows()) {
            let oracle = naive_forward(&mlp, row.as_slice().unwrap());
            for (a, b) in oracle.iter().zip(out) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng::stream(2, &[]);
        let mut mlp = Mlp::new(&[4, 8, 3], &mut r);
        let x = Array2::from_shape_simple_fn((6, 4), || r.random::<f64>() * 2.0 - 1.0);
        let target = Array2::from_shape_simple_fn((6, 3), || r.random::<f64>());
        let loss = |m: &Mlp| -> f64 {
            let y = m.forward(x.view());
            (&y - &target).mapv(|d| d * d).sum()
        };
        let (y, trace) = mlp.forward_traced(x.clone());
        let (_, grad) = mlp.backward(&trace, (&y - &target) * 2.0);
        let analytic: Vec<f64> = grad.slices().concat();
        let h = 1e-6;
        let mut k = 0;
        for s in 0..mlp.param_slices().len() {
            let len = mlp.param_slices()[s].len();
            for i in 0..len {
                let orig = mlp.param_slices()[s][i];
                mlp.param_slices_mut()[s][i] = orig + h;
                let lp = loss(&mlp);
                mlp.param_slices_mut()[s][i] = orig - h;
                let lm = loss(&mlp);
                mlp.param_slices_mut()[s][i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - analytic[k]).abs() <= 1e-6 * fd.abs().max(1.0),
                    "param {k}: fd {fd} vs {}",
                    analytic[k]
                );
                k += 1;
            }
        }
    }

    #[test]
    fn activations() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(100.0), 100.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
