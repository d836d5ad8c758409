use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Silu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Self::Relu => z.max(0.0),
            Self::Silu => z * sigmoid(z),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Self::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Silu => {
                let s = sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Self::Relu => 0,
            Self::Silu => 1,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Self::Relu),
            1 => Some(Self::Silu),
            _ => None,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn silu(z: f64) -> f64 {
    Activation::Silu.apply(z)
}

/// Affine layer `y = W x + b`, `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Layer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((output, input)),
            b: Array1::zeros(output),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }
}

/// Fully connected network. Hidden layers use `activation`, the output layer
/// is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    activation: Activation,
}

/// Gradients with the same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<Layer>,
}

impl Grads {
    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Output of a batched backward pass.
#[derive(Debug, Clone)]
pub struct BackwardPass {
    pub grads: Grads,
    /// Mean squared error over every output component of the batch.
    pub loss: f64,
    pub outputs: Array2<f64>,
}

impl Mlp {
    /// Builds a network from layer widths `dims = [in, h1, ..., out]`.
    /// Weights and biases are drawn from `U(−1/√fan_in, 1/√fan_in)`.
    pub fn new(dims: &[usize], activation: Activation, seed: u64) -> Self {
        assert!(dims.len() >= 2, "need at least input and output widths");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut layer = Layer::zeros(fan_in, fan_out);
                layer
                    .w
                    .mapv_inplace(|_| rng.random_range(-bound..bound));
                layer
                    .b
                    .mapv_inplace(|_| rng.random_range(-bound..bound));
                layer
            })
            .collect();
        Self { layers, activation }
    }

    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self, TrainError> {
        if layers.is_empty() {
            return Err(TrainError::Dimension("network has no layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(TrainError::Dimension(format!(
                    "layer {i} outputs {} but layer {} takes {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        if layers.iter().any(|l| l.b.len() != l.out_dim()) {
            return Err(TrainError::Dimension("bias length differs from layer width".into()));
        }
        Ok(Self { layers, activation })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let x = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        self.forward_batch(x).into_raw_vec_and_offset().0
    }

    /// Row-wise forward pass over a `batch × in_dim` matrix.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(x.ncols(), self.in_dim(), "input width");
        let last = self.layers.len() - 1;
        let mut a = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.w.t());
            z += &layer.b;
            if i < last {
                z.mapv_inplace(|v| self.activation.apply(v));
            }
            a = z;
        }
        a
    }

    /// Single-sample gradient of the mean squared error.
    pub fn backward(&self, x: &[f64], target: &[f64]) -> (Grads, f64) {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let tv = ArrayView2::from_shape((1, target.len()), target).expect("row vector");
        let pass = self.backward_batch(xv, tv);
        (pass.grads, pass.loss)
    }

    /// Exact gradients of `mean((f(X) − T)²)` over all batch rows and outputs.
    pub fn backward_batch(&self, x: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> BackwardPass {
        assert_eq!(x.nrows(), target.nrows(), "batch rows");
        assert_eq!(x.ncols(), self.in_dim(), "input width");
        assert_eq!(target.ncols(), self.out_dim(), "target width");
        let last = self.layers.len() - 1;

        // Keep pre-activations and activations of every layer.
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = acts[i].dot(&layer.w.t());
            z += &layer.b;
            let a = if i < last {
                z.mapv(|v| self.activation.apply(v))
            } else {
                z.clone()
            };
            pre.push(z);
            acts.push(a);
        }

        let outputs = acts.pop().unwrap();
        let diff = &outputs - &target;
        let n = diff.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let mut delta = diff * (2.0 / n);

        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let gw = delta.t().dot(&acts[i]);
            let gb = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].w);
                let act = self.activation;
                back.zip_mut_with(&pre[i - 1], |d, &z| *d *= act.derivative(z));
                delta = back;
            }
            grads.push(Layer { w: gw, b: gb });
        }
        grads.reverse();
        BackwardPass {
            grads: Grads { layers: grads },
            loss,
            outputs,
        }
    }

    pub(crate) fn params_iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()).copied())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_network_outputs_zero() {
        let layers = vec![Layer::zeros(3, 4), Layer::zeros(4, 2)];
        let m = Mlp::from_layers(layers, Activation::Relu).unwrap();
        assert_eq!(m.forward(&[1.0, -2.0, 5.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn single_affine_layer() {
        let mut l = Layer::zeros(1, 1);
        l.w[[0, 0]] = 2.0;
        l.b[0] = 1.0;
        let m = Mlp::from_layers(vec![l], Activation::Relu).unwrap();
        assert_eq!(m.forward(&[3.0]), vec![7.0]);
        // Output layer is linear: negative values pass through.
        assert_eq!(m.forward(&[-3.0]), vec![-5.0]);
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0), 0.0);
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((silu(1.0) - expected).abs() < 1e-15);
        assert!((silu(1.0) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!(sigmoid(-800.0).is_finite());
    }

    #[test]
    fn perfect_prediction_has_zero_gradient() {
        let m = Mlp::new(&[3, 5, 2], Activation::Silu, 4);
        let x = [0.3, -0.1, 0.8];
        let y = m.forward(&x);
        let (g, loss) = m.backward(&x, &y);
        assert_eq!(loss, 0.0);
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn duplicated_sample_keeps_mean_gradient() {
        let m = Mlp::new(&[2, 4, 3], Activation::Relu, 9);
        let x = [0.5, -1.5];
        let t = [1.0, 0.0, -1.0];
        let (g1, l1) = m.backward(&x, &t);
        let xs = Array2::from_shape_vec((2, 2), [x, x].concat()).unwrap();
        let ts = Array2::from_shape_vec((2, 3), [t, t].concat()).unwrap();
        let pass = m.backward_batch(xs.view(), ts.view());
        assert!((pass.loss - l1).abs() < 1e-15);
        for (a, b) in g1.layers.iter().zip(&pass.grads.layers) {
            for (p, q) in a.w.iter().zip(b.w.iter()) {
                assert!((p - q).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rejects_unchained_layers() {
        assert!(Mlp::from_layers(vec![Layer::zeros(3, 4), Layer::zeros(5, 2)], Activation::Relu).is_err());
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(
            Mlp::new(&[4, 8, 3], Activation::Silu, 1),
            Mlp::new(&[4, 8, 3], Activation::Silu, 1)
        );
        assert_ne!(
            Mlp::new(&[4, 8, 3], Activation::Silu, 1),
            Mlp::new(&[4, 8, 3], Activation::Silu, 2)
        );
        assert_eq!(Mlp::new(&[4, 8, 3], Activation::Silu, 1).dims(), vec![4, 8, 3]);
    }
}
