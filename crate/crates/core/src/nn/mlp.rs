use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::{NnError, Scalar};

/// Layer widths from input to output. Every layer but the last is followed by a ReLU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self, NnError> {
        if layer_sizes.len() < 2 {
            return Err(NnError::InvalidSpec(format!(
                "need at least input and output sizes, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(NnError::InvalidSpec(format!("zero-width layer in {layer_sizes:?}")));
        }
        Ok(Self { layer_sizes })
    }

    /// `input → hidden… → output`.
    pub fn with_hidden(input: usize, hidden: &[usize], output: usize) -> Result<Self, NnError> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self::new(sizes)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

impl TryFrom<Vec<usize>> for MlpSpec {
    type Error = NnError;
    fn try_from(v: Vec<usize>) -> Result<Self, NnError> {
        Self::new(v)
    }
}

impl From<MlpSpec> for Vec<usize> {
    fn from(s: MlpSpec) -> Vec<usize> {
        s.layer_sizes
    }
}

/// Weight matrix (`out × in`) and bias vector (`out`) of one dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }

    fn cast<U: Scalar>(&self) -> Layer<U> {
        Layer {
            weight: self.weight.mapv(|v| U::from_f64(v.to_f64())),
            bias: self.bias.mapv(|v| U::from_f64(v.to_f64())),
        }
    }
}

/// A fully connected ReLU network.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T = f32> {
    spec: MlpSpec,
    pub layers: Vec<Layer<T>>,
    seed: u64,
}

/// Per-layer intermediate values retained by a forward pass for backprop.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    /// Input to each layer (`batch × fan_in`).
    pub inputs: Vec<Array2<T>>,
    /// Pre-activation output of each layer (`batch × fan_out`).
    pub pre_activations: Vec<Array2<T>>,
}

/// Parameter gradients, shaped like the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// All gradient entries in checkpoint order (per layer: weights row-major, then bias).
    pub fn flatten(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn map(&self, f: impl Fn(T) -> T + Copy) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.mapv(f),
                    bias: l.bias.mapv(f),
                })
                .collect(),
        }
    }
}

fn relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

impl Mlp<f32> {
    /// Weights uniform in ±√(6/fan_in), biases zero; deterministic in `seed`.
    pub fn init(spec: &MlpSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .sizes()
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0f64 / fan_in as f64).sqrt() as f32;
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || dist.sample(&mut rng));
                Layer {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self {
            spec: spec.clone(),
            layers,
            seed,
        }
    }
}

impl<T: Scalar> Mlp<T> {
    /// Builds a model from explicit layers, checking them against `spec`.
    pub fn from_layers(spec: MlpSpec, layers: Vec<Layer<T>>, seed: u64) -> Result<Self, NnError> {
        if layers.len() != spec.layer_count() {
            return Err(NnError::InvalidSpec(format!(
                "{} layers for spec {:?}",
                layers.len(),
                spec.sizes()
            )));
        }
        for (k, (l, w)) in layers.iter().zip(spec.sizes().windows(2)).enumerate() {
            if l.weight.dim() != (w[1], w[0]) || l.bias.len() != w[1] {
                return Err(NnError::InvalidSpec(format!(
                    "layer {k} has weight {:?} and bias {}, spec wants ({}, {})",
                    l.weight.dim(),
                    l.bias.len(),
                    w[1],
                    w[0]
                )));
            }
        }
        let layers = layers
            .into_iter()
            .map(|l| Layer {
                weight: l.weight.as_standard_layout().into_owned(),
                bias: l.bias,
            })
            .collect();
        Ok(Self { spec, layers, seed })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Layer::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            spec: self.spec.clone(),
            layers: self.layers.iter().map(Layer::cast).collect(),
            seed: self.seed,
        }
    }

    /// All parameters in checkpoint order (per layer: weights row-major, then bias).
    pub fn flatten(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    /// Mutable access to one parameter by its position in [`Mlp::flatten`] order.
    pub fn param_mut(&mut self, mut index: usize) -> &mut T {
        for layer in &mut self.layers {
            let nw = layer.weight.len();
            if index < nw {
                return &mut layer.weight.as_slice_mut().expect("standard layout")[index];
            }
            index -= nw;
            if index < layer.bias.len() {
                return &mut layer.bias[index];
            }
            index -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }

    fn check_input(&self, cols: usize) -> Result<(), NnError> {
        if cols != self.spec.input_size() {
            return Err(NnError::DimensionMismatch {
                expected: self.spec.input_size(),
                found: cols,
            });
        }
        Ok(())
    }

    fn affine(layer: &Layer<T>, a: &ArrayView2<T>) -> Array2<T> {
        let mut z = a.dot(&layer.weight.t());
        z += &layer.bias;
        z
    }

    /// Batched forward pass (`batch × input` → `batch × output`) keeping a tape.
    pub fn forward_batch(&self, x: ArrayView2<T>) -> Result<(Array2<T>, Tape<T>), NnError> {
        self.check_input(x.ncols())?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = Self::affine(layer, &a.view());
            let next = if k < last { z.mapv(relu) } else { z.clone() };
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        Ok((
            a,
            Tape {
                inputs,
                pre_activations: pre,
            },
        ))
    }

    /// Batched inference without a tape.
    pub fn predict_batch(&self, x: ArrayView2<T>) -> Result<Array2<T>, NnError> {
        self.check_input(x.ncols())?;
        let mut a = Self::affine(&self.layers[0], &x);
        for layer in &self.layers[1..] {
            a.mapv_inplace(relu);
            a = Self::affine(layer, &a.view());
        }
        Ok(a)
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[T]) -> Result<(Vec<T>, Tape<T>), NnError> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let (out, tape) = self.forward_batch(view)?;
        Ok((out.into_raw_vec_and_offset().0, tape))
    }

    /// Single-sample inference.
    pub fn predict(&self, x: &[T]) -> Result<Vec<T>, NnError> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.predict_batch(view)?.into_raw_vec_and_offset().0)
    }

    /// Backpropagates `grad_output` (`batch × output`, dL/d output) through a tape.
    /// ReLU′(0) is taken as 0.
    pub fn backward(&self, tape: &Tape<T>, grad_output: ArrayView2<T>) -> Result<Gradients<T>, NnError> {
        let n = self.layers.len();
        if tape.inputs.len() != n || tape.pre_activations.len() != n {
            return Err(NnError::TapeMismatch(format!(
                "tape has {} layers, model has {n}",
                tape.inputs.len()
            )));
        }
        for (k, (inp, layer)) in tape.inputs.iter().zip(&self.layers).enumerate() {
            if inp.ncols() != layer.fan_in() || tape.pre_activations[k].ncols() != layer.fan_out() {
                return Err(NnError::TapeMismatch(format!("layer {k} widths differ")));
            }
        }
        let batch = tape.inputs[0].nrows();
        if grad_output.dim() != (batch, self.spec.output_size()) {
            return Err(NnError::TapeMismatch(format!(
                "grad_output is {:?}, expected ({batch}, {})",
                grad_output.dim(),
                self.spec.output_size()
            )));
        }

        let mut grads: Vec<Layer<T>> = Vec::with_capacity(n);
        let mut delta = grad_output.to_owned();
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            let weight = delta.t().dot(&tape.inputs[k]);
            let bias = delta.sum_axis(Axis(0));
            if k > 0 {
                let mut prev = delta.dot(&layer.weight);
                Zip::from(&mut prev)
                    .and(&tape.pre_activations[k - 1])
                    .for_each(|d, &z| {
                        if z <= T::zero() {
                            *d = T::zero();
                        }
                    });
                delta = prev;
            }
            grads.push(Layer { weight, bias });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    pub fn backward_one(&self, tape: &Tape<T>, grad_output: &[T]) -> Result<Gradients<T>, NnError> {
        let view = ArrayView2::from_shape((1, grad_output.len()), grad_output).map_err(|_| {
            NnError::TapeMismatch("grad_output shape".into())
        })?;
        self.backward(tape, view)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy(w: Vec<Array2<f64>>, b: Vec<Array1<f64>>) -> Mlp<f64> {
        let mut sizes = vec![w[0].ncols()];
        sizes.extend(w.iter().map(|w| w.nrows()));
        let layers = w
            .into_iter()
            .zip(b)
            .map(|(weight, bias)| Layer { weight, bias })
            .collect();
        Mlp::from_layers(MlpSpec::new(sizes).unwrap(), layers, 0).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3]).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1]).is_err());
        assert_eq!(MlpSpec::new(vec![2, 3, 1]).unwrap().param_count(), 2 * 3 + 3 + 3 + 1);
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let spec = MlpSpec::new(vec![2, 3, 1]).unwrap();
        let a = Mlp::init(&spec, 11);
        let b = Mlp::init(&spec, 11);
        assert_eq!(a, b);
        assert_ne!(a, Mlp::init(&spec, 12));
        assert_eq!(a.layers[0].weight.dim(), (3, 2));
        assert_eq!(a.layers[1].weight.dim(), (1, 3));
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
        let bound = (6.0f32 / 2.0).sqrt();
        assert!(a.layers[0].weight.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn zero_weights_output_bias() {
        let m = toy(
            vec![Array2::zeros((2, 3)), Array2::zeros((2, 2))],
            vec![array![1.0, 1.0], array![5.0, 7.0]],
        );
        // hidden = relu(1,1); output = 0·h + b
        assert_eq!(m.predict(&[9.0, -4.0, 2.0]).unwrap(), vec![5.0, 7.0]);
    }

    #[test]
    fn single_layer_affine() {
        let m = toy(vec![array![[2.0]]], vec![array![1.0]]);
        let (out, _) = m.forward(&[3.0]).unwrap();
        assert_eq!(out, vec![7.0]);
    }

    #[test]
    fn hidden_relu_by_hand() {
        let m = toy(
            vec![array![[1.0], [-1.0]], array![[1.0, 1.0]]],
            vec![array![0.0, 0.0], array![0.0]],
        );
        let (out, tape) = m.forward(&[-2.0]).unwrap();
        assert_eq!(tape.pre_activations[0], array![[-2.0, 2.0]]);
        assert_eq!(out, vec![2.0]);
    }

    #[test]
    fn forward_dimension_mismatch() {
        let m = Mlp::init(&MlpSpec::new(vec![3, 2]).unwrap(), 0);
        assert!(matches!(
            m.forward(&[1.0, 2.0]),
            Err(NnError::DimensionMismatch { expected: 3, found: 2 })
        ));
    }

    #[test]
    fn backward_by_hand() {
        let m = toy(vec![array![[2.0]]], vec![array![0.0]]);
        let (_, tape) = m.forward(&[3.0]).unwrap();
        let g = m.backward_one(&tape, &[1.0]).unwrap();
        assert_eq!(g.layers[0].weight, array![[3.0]]);
        assert_eq!(g.layers[0].bias, array![1.0]);

        let g0 = m.backward_one(&tape, &[0.0]).unwrap();
        assert!(g0.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        // pre-activation of the hidden unit is exactly 0
        let m = toy(vec![array![[1.0]], array![[1.0]]], vec![array![0.0], array![0.0]]);
        let (_, tape) = m.forward(&[0.0]).unwrap();
        let g = m.backward_one(&tape, &[1.0]).unwrap();
        assert_eq!(g.layers[0].weight, array![[0.0]]);
        assert_eq!(g.layers[0].bias, array![0.0]);
    }

    #[test]
    fn tape_mismatch_detected() {
        let a = Mlp::init(&MlpSpec::new(vec![2, 3, 1]).unwrap(), 0);
        let b = Mlp::init(&MlpSpec::new(vec![2, 4, 1]).unwrap(), 0);
        let (_, tape) = a.forward(&[1.0, 1.0]).unwrap();
        assert!(matches!(b.backward_one(&tape, &[1.0]), Err(NnError::TapeMismatch(_))));
    }

    #[test]
    fn batch_and_single_agree_on_shape() {
        let m = Mlp::init(&MlpSpec::new(vec![4, 8, 2]).unwrap(), 3);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i * 4 + j) as f32 * 0.1 - 1.0);
        let (out, _) = m.forward_batch(x.view()).unwrap();
        let pred = m.predict_batch(x.view()).unwrap();
        assert_eq!(out, pred);
        for i in 0..5 {
            let single = m.predict(x.row(i).as_slice().unwrap()).unwrap();
            for j in 0..2 {
                assert!((single[j] - out[[i, j]]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn param_mut_follows_flatten_order() {
        let mut m = Mlp::init(&MlpSpec::new(vec![2, 3, 1]).unwrap(), 1);
        let flat = m.flatten();
        for (i, &v) in flat.iter().enumerate() {
            assert_eq!(*m.param_mut(i), v);
        }
        *m.param_mut(8) = 42.0; // layer 0 holds 6 weights then 3 biases
        assert_eq!(m.layers[0].bias[2], 42.0);
    }
}
