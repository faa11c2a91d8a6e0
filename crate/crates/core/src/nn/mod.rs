//! Small dense multilayer perceptrons with exact reverse-mode gradients.
//!
//! Everything is batched: inputs are `(batch, features)` matrices and a forward pass
//! records a [`Tape`] of layer activations that [`Mlp::backward`] consumes. Losses
//! are composed outside this module by producing the gradient of the loss with
//! respect to the network output.

mod adam;
pub mod check;
pub mod checkpoint;

pub use adam::{adam_step, AdamConfig, AdamState};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(
        widths: Vec<usize>,
        activation: Activation,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "mlp widths must have >= 2 positive entries, got {widths:?}"
            )));
        }
        Ok(Self {
            widths,
            activation,
            output_activation,
        })
    }

    /// `input -> hidden... -> output` with ReLU hidden layers and identity output.
    pub fn relu(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self::new(widths, Activation::Relu, OutputActivation::Identity).expect("positive widths")
    }

    pub fn with_output_activation(mut self, out: OutputActivation) -> Self {
        self.output_activation = out;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }
}

/// One affine layer. `weight` is `(out, in)` so that `y = W x + b` for a column `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Parameters of an MLP, also used as the container for gradients and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<Layer>,
}

impl NetworkParams {
    /// He-style fan-in scaled uniform initialization with zero biases. Each layer draws
    /// from its own stream derived from `seed`.
    pub fn init(spec: &MlpSpec, seed: u64) -> Self {
        let n = spec.num_layers();
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
                let gain = if l + 1 == n { 3.0 } else { 6.0 };
                let bound = (gain / fan_in as f64).sqrt();
                let mut rng = rng_from_seed(derive_seed(seed, &["layer", &l.to_string()]));
                let weight =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
                Layer {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn shapes_match(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.shape() == b.weight.shape() && a.bias.shape() == b.bias.shape()
            })
    }

    pub fn matches_spec(&self, spec: &MlpSpec) -> bool {
        self.layers.len() == spec.num_layers()
            && self.layers.iter().enumerate().all(|(l, layer)| {
                layer.weight.shape() == [spec.widths[l + 1], spec.widths[l]]
                    && layer.bias.len() == spec.widths[l + 1]
            })
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.weight *= c;
            l.bias *= c;
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    /// Flattened view in layer order, weights (row-major) before biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.num_params());
        let mut it = values.iter();
        for l in &mut self.layers {
            l.weight
                .iter_mut()
                .chain(l.bias.iter_mut())
                .for_each(|v| *v = *it.next().unwrap());
        }
    }

    /// Rounds every value to the nearest 32-bit float, the checkpoint storage precision.
    pub fn round_to_f32(&mut self) {
        for l in &mut self.layers {
            l.weight
                .iter_mut()
                .chain(l.bias.iter_mut())
                .for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// Activations recorded by a forward pass. `acts[0]` is the input and `acts[L]` the output.
#[derive(Clone, Debug)]
pub struct Tape {
    acts: Vec<Array2<f64>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("tape has input and output")
    }

    /// Last hidden activation, if the network has one.
    pub fn penultimate(&self) -> Option<&Array2<f64>> {
        (self.acts.len() >= 3).then(|| &self.acts[self.acts.len() - 2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: NetworkParams,
}

impl Mlp {
    pub fn new(spec: MlpSpec, seed: u64) -> Self {
        let params = NetworkParams::init(&spec, seed);
        Self { spec, params }
    }

    pub fn from_parts(spec: MlpSpec, params: NetworkParams) -> Result<Self> {
        if !params.matches_spec(&spec) {
            return Err(Error::InvalidArgument(
                "parameters do not match mlp spec".into(),
            ));
        }
        Ok(Self { spec, params })
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        forward_params(&self.spec, &self.params, x)
    }

    pub fn forward_tape(&self, x: ArrayView2<f64>) -> Tape {
        forward_tape_params(&self.spec, &self.params, x)
    }

    /// Output together with the last hidden activation `zeta`, so that
    /// `output = zeta W_last^T + b_last` before any output activation.
    pub fn forward_with_features(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if self.spec.num_layers() < 2 {
            return Err(Error::NoPenultimateLayer);
        }
        let mut tape = self.forward_tape(x);
        let out = tape.acts.pop().expect("output");
        let zeta = tape.acts.pop().expect("penultimate");
        Ok((out, zeta))
    }

    /// Parameter gradient for the upstream gradient `grad_out` (same shape as the output).
    pub fn backward(&self, tape: &Tape, grad_out: Array2<f64>) -> NetworkParams {
        backprop(&self.spec, &self.params, tape, grad_out, None, true, false)
            .0
            .expect("params requested")
    }

    /// Parameter gradient plus gradient with respect to the network input.
    pub fn backward_with_input(
        &self,
        tape: &Tape,
        grad_out: Array2<f64>,
    ) -> (NetworkParams, Array2<f64>) {
        let (p, x) = backprop(&self.spec, &self.params, tape, grad_out, None, true, true);
        (p.expect("params requested"), x.expect("input requested"))
    }

    /// Output before the output activation (equal to the output for identity heads).
    pub fn output_preactivation(&self, tape: &Tape) -> Array2<f64> {
        affine(
            &tape.acts[tape.acts.len() - 2].view(),
            self.params.layers.last().expect("at least one layer"),
        )
    }

    /// Like [`Mlp::backward`], with an extra gradient applied directly to the output
    /// pre-activation (bypassing the output activation's derivative).
    pub fn backward_with_preactivation(
        &self,
        tape: &Tape,
        grad_out: Array2<f64>,
        grad_pre: &Array2<f64>,
    ) -> NetworkParams {
        backprop(
            &self.spec,
            &self.params,
            tape,
            grad_out,
            Some(grad_pre),
            true,
            false,
        )
        .0
        .expect("params requested")
    }

    /// Gradient with respect to the input only; parameters are treated as constants.
    pub fn input_grad(&self, tape: &Tape, grad_out: Array2<f64>) -> Array2<f64> {
        backprop(&self.spec, &self.params, tape, grad_out, None, false, true)
            .1
            .expect("input requested")
    }
}

fn check_input(spec: &MlpSpec, x: &ArrayView2<f64>) {
    assert_eq!(
        x.ncols(),
        spec.input_dim(),
        "mlp input has {} columns, spec expects {}",
        x.ncols(),
        spec.input_dim()
    );
}

fn affine(x: &ArrayView2<f64>, layer: &Layer) -> Array2<f64> {
    let mut z = x.dot(&layer.weight.t());
    z += &layer.bias;
    z
}

fn activate(z: &mut Array2<f64>, act: Activation) {
    match act {
        Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
        Activation::Tanh => z.mapv_inplace(f64::tanh),
    }
}

fn activate_output(z: &mut Array2<f64>, act: OutputActivation) {
    if act == OutputActivation::Tanh {
        z.mapv_inplace(f64::tanh);
    }
}

pub fn forward_params(spec: &MlpSpec, params: &NetworkParams, x: ArrayView2<f64>) -> Array2<f64> {
    check_input(spec, &x);
    let n = params.layers.len();
    let mut h = affine(&x, &params.layers[0]);
    for l in 1..n {
        activate(&mut h, spec.activation);
        h = affine(&h.view(), &params.layers[l]);
    }
    activate_output(&mut h, spec.output_activation);
    h
}

fn forward_tape_params(spec: &MlpSpec, params: &NetworkParams, x: ArrayView2<f64>) -> Tape {
    check_input(spec, &x);
    let n = params.layers.len();
    let mut acts = Vec::with_capacity(n + 1);
    acts.push(x.to_owned());
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = affine(&acts[l].view(), layer);
        if l + 1 == n {
            activate_output(&mut z, spec.output_activation);
        } else {
            activate(&mut z, spec.activation);
        }
        acts.push(z);
    }
    Tape { acts }
}

fn backprop(
    spec: &MlpSpec,
    params: &NetworkParams,
    tape: &Tape,
    mut delta: Array2<f64>,
    pre_output_grad: Option<&Array2<f64>>,
    want_params: bool,
    want_input: bool,
) -> (Option<NetworkParams>, Option<Array2<f64>>) {
    let n = params.layers.len();
    assert_eq!(
        delta.shape(),
        tape.output().shape(),
        "upstream gradient shape"
    );
    if spec.output_activation == OutputActivation::Tanh {
        Zip::from(&mut delta)
            .and(tape.output())
            .for_each(|d, &y| *d *= 1.0 - y * y);
    }
    if let Some(g) = pre_output_grad {
        delta += g;
    }
    let mut grads: Vec<Option<Layer>> = vec![None; n];
    let mut input_grad = None;
    for l in (0..n).rev() {
        let input = &tape.acts[l];
        if want_params {
            grads[l] = Some(Layer {
                weight: delta.t().dot(input),
                bias: delta.sum_axis(Axis(0)),
            });
        }
        if l == 0 && !want_input {
            break;
        }
        let mut upstream = delta.dot(&params.layers[l].weight);
        if l == 0 {
            input_grad = Some(upstream);
            break;
        }
        match spec.activation {
            Activation::Relu => Zip::from(&mut upstream).and(input).for_each(|d, &a| {
                if a <= 0.0 {
                    *d = 0.0
                }
            }),
            Activation::Tanh => Zip::from(&mut upstream)
                .and(input)
                .for_each(|d, &a| *d *= 1.0 - a * a),
        }
        delta = upstream;
    }
    let params = want_params.then(|| NetworkParams {
        layers: grads
            .into_iter()
            .map(|g| g.expect("every layer visited"))
            .collect(),
    });
    (params, input_grad)
}

fn as_row(input: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, input.len()), input).expect("contiguous slice")
}

/// Single-vector forward pass with shape checking.
pub fn mlp_forward(spec: &MlpSpec, params: &NetworkParams, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != spec.input_dim() {
        return Err(Error::ShapeMismatch {
            expected: spec.input_dim(),
            got: input.len(),
        });
    }
    if !params.matches_spec(spec) {
        return Err(Error::InvalidArgument(
            "parameters do not match mlp spec".into(),
        ));
    }
    Ok(forward_params(spec, params, as_row(input))
        .into_raw_vec_and_offset()
        .0)
}

/// Single-vector forward pass returning `(output, penultimate activation)`.
pub fn mlp_forward_with_features(
    spec: &MlpSpec,
    params: &NetworkParams,
    input: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if input.len() != spec.input_dim() {
        return Err(Error::ShapeMismatch {
            expected: spec.input_dim(),
            got: input.len(),
        });
    }
    let mlp = Mlp::from_parts(spec.clone(), params.clone())?;
    let (out, zeta) = mlp.forward_with_features(as_row(input))?;
    Ok((
        out.into_raw_vec_and_offset().0,
        zeta.into_raw_vec_and_offset().0,
    ))
}

/// A scalar loss defined on the output of a single network.
pub trait OutputLoss {
    /// Loss value (a minibatch mean) and its gradient with respect to `output`.
    fn value_and_grad(&self, output: &Array2<f64>) -> (f64, Array2<f64>);
}

/// Mean squared error toward fixed targets, `mean_b sum_j (y_bj - t_bj)^2`.
pub struct SquaredError<'a> {
    pub targets: ArrayView2<'a, f64>,
}

impl OutputLoss for SquaredError<'_> {
    fn value_and_grad(&self, output: &Array2<f64>) -> (f64, Array2<f64>) {
        let b = output.nrows() as f64;
        let diff = output - &self.targets;
        let value = diff.iter().map(|d| d * d).sum::<f64>() / b;
        (value, diff * (2.0 / b))
    }
}

/// Exact gradient of a single-network loss over a minibatch of inputs.
pub fn grad(
    mlp: &Mlp,
    loss: &impl OutputLoss,
    inputs: ArrayView2<f64>,
) -> Result<(f64, NetworkParams)> {
    let tape = mlp.forward_tape(inputs);
    let (value, g) = loss.value_and_grad(tape.output());
    if !value.is_finite() {
        return Err(Error::NumericalFailure(format!(
            "loss evaluated to {value}"
        )));
    }
    Ok((value, mlp.backward(&tape, g)))
}

/// `target <- (1 - coeff) * target + coeff * online`, elementwise.
pub fn polyak_update(target: &mut NetworkParams, online: &NetworkParams, coeff: f64) {
    debug_assert!(target.shapes_match(online));
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        Zip::from(&mut t.weight)
            .and(&o.weight)
            .for_each(|t, &o| *t += coeff * (o - *t));
        Zip::from(&mut t.bias)
            .and(&o.bias)
            .for_each(|t, &o| *t += coeff * (o - *t));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_mlp(widths: &[usize], act: Activation, seed: u64) -> Mlp {
        let spec = MlpSpec::new(widths.to_vec(), act, OutputActivation::Identity).unwrap();
        let mut mlp = Mlp::new(spec, seed);
        // non-zero biases so the checks exercise them
        let mut rng = rng_from_seed(seed ^ 0xb1a5);
        for l in &mut mlp.params.layers {
            l.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        mlp
    }

    /// Straightforward per-sample evaluation with explicit loops.
    fn naive_forward(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let n = mlp.params.layers.len();
        for (l, layer) in mlp.params.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.bias.len()];
            for (o, v) in next.iter_mut().enumerate() {
                *v = layer.bias[o]
                    + (0..h.len())
                        .map(|i| layer.weight[[o, i]] * h[i])
                        .sum::<f64>();
                if l + 1 < n {
                    *v = match mlp.spec.activation {
                        Activation::Relu => v.max(0.0),
                        Activation::Tanh => v.tanh(),
                    };
                }
            }
            h = next;
        }
        h
    }

    #[test]
    fn identity_network_returns_input() {
        let spec = MlpSpec::new(vec![3, 3], Activation::Relu, OutputActivation::Identity).unwrap();
        let params = NetworkParams {
            layers: vec![Layer {
                weight: Array2::eye(3),
                bias: Array1::zeros(3),
            }],
        };
        let out = mlp_forward(&spec, &params, &[-1.0, 0.5, 2.0]).unwrap();
        assert_eq!(out, vec![-1.0, 0.5, 2.0]);
    }

    #[test]
    fn relu_hidden_layer_clamps_negatives() {
        let spec =
            MlpSpec::new(vec![2, 2, 2], Activation::Relu, OutputActivation::Identity).unwrap();
        let eye = Layer {
            weight: Array2::eye(2),
            bias: Array1::zeros(2),
        };
        let params = NetworkParams {
            layers: vec![eye.clone(), eye],
        };
        let (out, zeta) = mlp_forward_with_features(&spec, &params, &[-1.0, 2.0]).unwrap();
        assert_eq!(zeta, vec![0.0, 2.0]);
        assert_eq!(out, vec![0.0, 2.0]);
    }

    #[test]
    fn forward_matches_naive_reevaluation() {
        for act in [Activation::Relu, Activation::Tanh] {
            let mlp = random_mlp(&[4, 7, 5, 3], act, 11);
            let mut rng = rng_from_seed(3);
            let x = Array2::from_shape_fn((9, 4), |_| rng.random_range(-2.0..2.0));
            let out = mlp.forward(x.view());
            for (b, row) in x.rows().into_iter().enumerate() {
                let naive = naive_forward(&mlp, row.as_slice().unwrap());
                for (j, v) in naive.iter().enumerate() {
                    assert!((out[[b, j]] - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mlp = random_mlp(&[3, 4, 1], Activation::Relu, 0);
        let err = mlp_forward(&mlp.spec, &mlp.params, &[1.0, 2.0]).unwrap_err();
        assert!(matches!(
            err,
            Error::ShapeMismatch {
                expected: 3,
                got: 2
            }
        ));
    }

    #[test]
    fn features_reconstruct_output() {
        let mlp = random_mlp(&[5, 16, 16, 4], Activation::Relu, 5);
        let mut rng = rng_from_seed(9);
        let x = Array2::from_shape_fn((32, 5), |_| rng.random_range(-1.0..1.0));
        let (out, zeta) = mlp.forward_with_features(x.view()).unwrap();
        let last = mlp.params.layers.last().unwrap();
        let rebuilt = zeta.dot(&last.weight.t()) + &last.bias;
        let err = (&rebuilt - &out).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-12, "reconstruction error {err}");
    }

    #[test]
    fn no_hidden_layer_has_no_features() {
        let mlp = random_mlp(&[3, 2], Activation::Relu, 1);
        let x = Array2::zeros((1, 3));
        assert!(matches!(
            mlp.forward_with_features(x.view()),
            Err(Error::NoPenultimateLayer)
        ));
    }

    #[test]
    fn zero_network_at_target_has_zero_gradient() {
        let spec = MlpSpec::relu(3, &[4], 1);
        let mut mlp = Mlp::new(spec, 0);
        mlp.params = mlp.params.zeros_like();
        let x = Array2::zeros((5, 3));
        let t = Array2::zeros((5, 1));
        let (v, g) = grad(&mlp, &SquaredError { targets: t.view() }, x.view()).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_central_differences() {
        for act in [Activation::Relu, Activation::Tanh] {
            for seed in 0..5 {
                let mut mlp = random_mlp(&[3, 8, 6, 2], act, seed);
                mlp.spec.output_activation = if seed % 2 == 0 {
                    OutputActivation::Tanh
                } else {
                    OutputActivation::Identity
                };
                let mut rng = rng_from_seed(seed + 100);
                let x = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
                let t = Array2::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0));
                let loss = SquaredError { targets: t.view() };
                let (_, g) = grad(&mlp, &loss, x.view()).unwrap();
                let fd = check::central_difference(&mlp.params, 1e-5, |p| {
                    let y = forward_params(&mlp.spec, p, x.view());
                    loss.value_and_grad(&y).0
                });
                let err = check::max_relative_error(&g.to_flat(), &fd.to_flat());
                assert!(err < 1e-4, "act {act:?} seed {seed}: rel err {err}");
            }
        }
    }

    #[test]
    fn input_gradient_matches_central_differences() {
        let mlp = random_mlp(&[4, 8, 1], Activation::Tanh, 2);
        let x = array![[0.3, -0.2, 0.9, 0.1], [-0.5, 0.4, 0.0, 0.7]];
        let tape = mlp.forward_tape(x.view());
        let gx = mlp.input_grad(&tape, Array2::ones((2, 1)));
        let h = 1e-5;
        for b in 0..2 {
            for i in 0..4 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[[b, i]] += h;
                xm[[b, i]] -= h;
                let fd = (mlp.forward(xp.view()).sum() - mlp.forward(xm.view()).sum()) / (2.0 * h);
                assert!((fd - gx[[b, i]]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn gradient_is_linear_in_loss_scale() {
        struct Scaled<'a>(SquaredError<'a>, f64);
        impl OutputLoss for Scaled<'_> {
            fn value_and_grad(&self, y: &Array2<f64>) -> (f64, Array2<f64>) {
                let (v, g) = self.0.value_and_grad(y);
                (v * self.1, g * self.1)
            }
        }
        let mlp = random_mlp(&[2, 5, 1], Activation::Relu, 4);
        let x = array![[0.1, 0.2], [0.5, -0.3], [-0.7, 0.9]];
        let t = array![[1.0], [0.0], [-1.0]];
        let (_, g1) = grad(&mlp, &SquaredError { targets: t.view() }, x.view()).unwrap();
        let (_, g3) = grad(
            &mlp,
            &Scaled(SquaredError { targets: t.view() }, 3.0),
            x.view(),
        )
        .unwrap();
        for (a, b) in g1.to_flat().iter().zip(g3.to_flat()) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_loss_is_numerical_failure() {
        let mlp = random_mlp(&[1, 3, 1], Activation::Relu, 0);
        let x = array![[0.5]];
        let t = array![[f64::NAN]];
        let r = grad(&mlp, &SquaredError { targets: t.view() }, x.view());
        assert!(matches!(r, Err(Error::NumericalFailure(_))));
    }

    #[test]
    fn polyak_fixed_point_and_step() {
        let mlp = random_mlp(&[2, 3, 1], Activation::Relu, 0);
        let mut target = mlp.params.clone();
        polyak_update(&mut target, &mlp.params, 0.3);
        assert_eq!(target, mlp.params);

        let mut t = mlp.params.zeros_like();
        let mut ones = mlp.params.zeros_like();
        ones.set_flat(&vec![1.0; ones.num_params()]);
        polyak_update(&mut t, &ones, 0.01);
        assert!(t.to_flat().iter().all(|&v| (v - 0.01).abs() < 1e-15));
    }

    #[test]
    fn polyak_contracts_geometrically() {
        let online = random_mlp(&[3, 4, 2], Activation::Relu, 1).params;
        let mut target = random_mlp(&[3, 4, 2], Activation::Relu, 2).params;
        let gap0: Vec<f64> = target
            .to_flat()
            .iter()
            .zip(online.to_flat())
            .map(|(t, o)| t - o)
            .collect();
        let rho = 0.05;
        for _ in 0..200 {
            polyak_update(&mut target, &online, rho);
        }
        let factor = (1.0 - rho).powi(200);
        for ((t, o), g0) in target.to_flat().iter().zip(online.to_flat()).zip(gap0) {
            assert!(((t - o) - factor * g0).abs() < 1e-10);
        }
    }
}
