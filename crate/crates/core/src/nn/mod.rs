//! Fully-connected ReLU chart networks with hand-written reverse-mode
//! gradients, Jacobians and an Adam optimizer.
//!
//! A chart maps a parametric point `v` in the unit square to a point in
//! space. Every layer is affine; all but the last are followed by a ReLU,
//! so the chart is continuous and piecewise linear in `v`.

mod adam;
mod serialize;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use serialize::{read_chartnet, write_chartnet, CHARTNET_MAGIC};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Layer sizes used for full reconstructions.
pub const DEFAULT_CHART_LAYERS: [usize; 6] = [2, 128, 256, 512, 512, 3];

/// A chart must have this many parameters per scalar constraint (3 per
/// fitted point) before it is considered overparametrized.
pub const OVERPARAMETRIZATION_FACTOR: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayerSpec {
    sizes: Vec<usize>,
}

impl LayerSpec {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::invalid(
                "a network needs at least an input and an output size",
            ));
        }
        if sizes.contains(&0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        Ok(Self { sizes })
    }

    /// A spec usable as a chart: 2 inputs, 3 outputs.
    pub fn chart(sizes: Vec<usize>) -> Result<Self> {
        let spec = Self::new(sizes)?;
        if spec.sizes[0] != 2 || *spec.sizes.last().unwrap() != 3 {
            return Err(Error::invalid(format!(
                "chart networks map 2 -> 3, got layer sizes {:?}",
                spec.sizes
            )));
        }
        Ok(spec)
    }

    pub fn default_chart() -> Self {
        Self {
            sizes: DEFAULT_CHART_LAYERS.to_vec(),
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Total number of weights and biases.
    pub fn parameter_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }
}

/// Weights (`out x in`) and bias of one affine layer. Also used for
/// gradients and optimizer moments, which share the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.weights.dim() == other.weights.dim() && self.bias.len() == other.bias.len()
    }
}

/// Parameter-shaped gradient of a scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub layers: Vec<Dense>,
}

impl Gradient {
    pub fn zeros(spec: &LayerSpec) -> Self {
        Self {
            layers: spec
                .sizes
                .windows(2)
                .map(|w| Dense::zeros(w[0], w[1]))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradient) -> Result<()> {
        if !shapes_match(&self.layers, &other.layers) {
            return Err(Error::ShapeMismatch("gradient shapes differ".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights *= factor;
            l.bias *= factor;
        }
    }

    /// Parameters in storage order: per layer, row-major weights then bias.
    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|x| x.is_finite()))
    }
}

fn shapes_match(a: &[Dense], b: &[Dense]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same_shape(y))
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.weights.iter());
        out.extend(l.bias.iter());
    }
    out
}

/// A chart network `φ(·; θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartNet {
    spec: LayerSpec,
    layers: Vec<Dense>,
}

/// Pre-activations recorded by a batched forward pass.
struct Tape {
    /// `inputs[l]` is the input to layer `l` (`n x fan_in`).
    inputs: Vec<Array2<f64>>,
    /// `pre[l]` is the affine output of layer `l` before the ReLU.
    pre: Vec<Array2<f64>>,
}

impl ChartNet {
    /// Uniform fan-in initialization `U(-sqrt(6/fan_in), sqrt(6/fan_in))`
    /// with zero biases, deterministic in `seed`.
    pub fn init(spec: LayerSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let weights = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                    rng.random_range(-bound..=bound)
                });
                Dense {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self { spec, layers }
    }

    /// Initializes a chart network, rejecting specs that are not `2 -> 3`.
    pub fn init_chart(spec: LayerSpec, seed: u64) -> Result<Self> {
        let spec = LayerSpec::chart(spec.sizes)?;
        Ok(Self::init(spec, seed))
    }

    pub fn from_layers(spec: LayerSpec, layers: Vec<Dense>) -> Result<Self> {
        let expected = Gradient::zeros(&spec);
        if !shapes_match(&expected.layers, &layers) {
            return Err(Error::ShapeMismatch(format!(
                "layers do not conform to sizes {:?}",
                spec.sizes
            )));
        }
        if !layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|x| x.is_finite()))
        {
            return Err(Error::invalid("network parameters must be finite"));
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.spec.parameter_count()
    }

    /// Errors unless `T >= 10 * 3n` for a fit of `n` points.
    pub fn check_overparametrized(&self, n: usize) -> Result<()> {
        let needed = OVERPARAMETRIZATION_FACTOR * 3 * n;
        if self.parameter_count() < needed {
            return Err(Error::invalid(format!(
                "network with {} parameters is too small to fit {n} points (needs {needed})",
                self.parameter_count()
            )));
        }
        Ok(())
    }

    pub fn flat_params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                values.len(),
                self.parameter_count()
            )));
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    /// Evaluates the network at a single input.
    pub fn forward(&self, v: [f64; 2]) -> [f64; 3] {
        let mut a = v.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.bias.to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = layer.weights.row(o);
                *zo += row.iter().zip(&a).map(|(w, x)| w * x).sum::<f64>();
            }
            if l != last {
                z.iter_mut().for_each(|x| *x = x.max(0.0));
            }
            a = z;
        }
        let mut out = [0.0; 3];
        for (o, x) in out.iter_mut().zip(a) {
            *o = x;
        }
        out
    }

    /// Evaluates the network on every row of `inputs` (`n x 2`).
    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut a = inputs.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weights.t());
            z += &layer.bias;
            if l != last {
                z.mapv_inplace(|x| x.max(0.0));
            }
            a = z;
        }
        a
    }

    fn forward_tape(&self, inputs: ArrayView2<f64>) -> (Array2<f64>, Tape) {
        let last = self.layers.len() - 1;
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut a = inputs.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weights.t());
            z += &layer.bias;
            tape.inputs.push(a);
            if l != last {
                a = z.mapv(|x| x.max(0.0));
                tape.pre.push(z);
            } else {
                a = z.clone();
                tape.pre.push(z);
            }
        }
        (a, tape)
    }

    /// Reverse-mode gradient of `Σ_k ⟨output_grads[k], φ(inputs[k])⟩` with
    /// respect to all parameters. `output_grads` holds `∂loss/∂φ(v_k)` per row.
    /// The ReLU derivative at exactly zero is taken to be zero.
    pub fn backward(
        &self,
        inputs: ArrayView2<f64>,
        output_grads: ArrayView2<f64>,
    ) -> Result<Gradient> {
        let (_, tape) = self.forward_tape(inputs);
        self.backward_from_tape(&tape, output_grads)
    }

    /// Forward pass on `inputs`, then `grad_fn(outputs) -> (loss, ∂loss/∂outputs)`,
    /// then the parameter gradient. Saves a second forward pass.
    pub fn loss_and_gradient<F>(
        &self,
        inputs: ArrayView2<f64>,
        grad_fn: F,
    ) -> Result<(f64, Gradient)>
    where
        F: FnOnce(&Array2<f64>) -> Result<(f64, Array2<f64>)>,
    {
        let (out, tape) = self.forward_tape(inputs);
        let (loss, og) = grad_fn(&out)?;
        let g = self.backward_from_tape(&tape, og.view())?;
        Ok((loss, g))
    }

    fn backward_from_tape(&self, tape: &Tape, output_grads: ArrayView2<f64>) -> Result<Gradient> {
        let n = tape.inputs[0].nrows();
        if n == 0 {
            return Err(Error::invalid("backward needs a non-empty batch"));
        }
        if output_grads.dim() != (n, self.spec.output_dim()) {
            return Err(Error::ShapeMismatch(format!(
                "output gradients have shape {:?}, expected ({n}, {})",
                output_grads.dim(),
                self.spec.output_dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = output_grads.to_owned();
        for l in (0..self.layers.len()).rev() {
            let gw = delta.t().dot(&tape.inputs[l]);
            let gb = delta.sum_axis(Axis(0));
            grads.push(Dense {
                weights: gw,
                bias: gb,
            });
            if l > 0 {
                let mut prev = delta.dot(&self.layers[l].weights);
                Zip::from(&mut prev)
                    .and(&tape.pre[l - 1])
                    .for_each(|d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
                delta = prev;
            }
        }
        grads.reverse();
        Ok(Gradient { layers: grads })
    }

    /// Exact Jacobian `∂φ/∂v` (3 x 2, column `k` is `∂φ/∂v_k`).
    ///
    /// On a ReLU boundary each column is the one-sided derivative in the
    /// positive `v_k` direction.
    pub fn jacobian(&self, v: [f64; 2]) -> [[f64; 2]; 3] {
        let last = self.layers.len() - 1;
        let mut a = v.to_vec();
        // tangents[k] = ∂a/∂v_k
        let mut tangents = [vec![1.0, 0.0], vec![0.0, 1.0]];
        for (l, layer) in self.layers.iter().enumerate() {
            let fan_out = layer.bias.len();
            let mut z = layer.bias.to_vec();
            let mut dz = [vec![0.0; fan_out], vec![0.0; fan_out]];
            for o in 0..fan_out {
                let row = layer.weights.row(o);
                z[o] += row.iter().zip(&a).map(|(w, x)| w * x).sum::<f64>();
                for k in 0..2 {
                    dz[k][o] = row.iter().zip(&tangents[k]).map(|(w, x)| w * x).sum();
                }
            }
            if l != last {
                for k in 0..2 {
                    for o in 0..fan_out {
                        let active = z[o] > 0.0 || (z[o] == 0.0 && dz[k][o] > 0.0);
                        if !active {
                            dz[k][o] = 0.0;
                        }
                    }
                }
                z.iter_mut().for_each(|x| *x = x.max(0.0));
            }
            a = z;
            tangents = dz;
        }
        let mut j = [[0.0; 2]; 3];
        for (r, row) in j.iter_mut().enumerate() {
            for (k, entry) in row.iter_mut().enumerate() {
                *entry = tangents[k][r];
            }
        }
        j
    }

    /// Unit normal `∂φ/∂u × ∂φ/∂v`, or `None` when the Jacobian is
    /// (numerically) rank deficient.
    pub fn normal(&self, v: [f64; 2]) -> Option<[f64; 3]> {
        let (n, area) = normal_and_area(&self.jacobian(v));
        if area > 0.0 {
            Some(n)
        } else {
            None
        }
    }
}

/// Unit normal and area element of a 3 x 2 Jacobian. Returns a zero area
/// when the columns are degenerate relative to their lengths.
pub fn normal_and_area(j: &[[f64; 2]; 3]) -> ([f64; 3], f64) {
    let du = nalgebra::Vector3::new(j[0][0], j[1][0], j[2][0]);
    let dv = nalgebra::Vector3::new(j[0][1], j[1][1], j[2][1]);
    let c = du.cross(&dv);
    let area = c.norm();
    let scale = du.norm() * dv.norm();
    if !(scale > 0.0) || !(area > 1e-12 * scale) || !area.is_finite() {
        return ([0.0; 3], 0.0);
    }
    let n = c / area;
    ([n.x, n.y, n.z], area)
}

/// Rows of an `n x 2` array from parametric samples.
pub fn samples_to_array(samples: &[[f64; 2]]) -> Array2<f64> {
    let mut a = Array2::zeros((samples.len(), 2));
    for (i, s) in samples.iter().enumerate() {
        a.slice_mut(s![i, ..]).assign(&ndarray::arr1(s));
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn identity_embedding() -> ChartNet {
        let spec = LayerSpec::chart(vec![2, 3]).unwrap();
        ChartNet::from_layers(
            spec,
            vec![Dense {
                weights: arr2(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]),
                bias: Array1::zeros(3),
            }],
        )
        .unwrap()
    }

    /// Independent layer-by-layer recurrence over plain vectors.
    fn oracle_forward(net: &ChartNet, v: [f64; 2]) -> Vec<f64> {
        let mut a = v.to_vec();
        let n = net.layers().len();
        for (l, layer) in net.layers().iter().enumerate() {
            let (rows, cols) = layer.weights.dim();
            let mut z = vec![0.0; rows];
            for r in 0..rows {
                let mut acc = layer.bias[r];
                for c in 0..cols {
                    acc += layer.weights[[r, c]] * a[c];
                }
                z[r] = if l + 1 < n && acc < 0.0 { 0.0 } else { acc };
            }
            a = z;
        }
        a
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let spec = LayerSpec::chart(vec![2, 3]).unwrap();
        let a = ChartNet::init(spec.clone(), 42);
        let b = ChartNet::init(spec, 42);
        assert_eq!(a, b);
        assert_eq!(a.layers()[0].weights.len(), 6);
        assert!(a.layers()[0].bias.iter().all(|&x| x == 0.0));
        let bound = 3f64.sqrt();
        assert!(a.layers()[0].weights.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn default_parameter_count() {
        assert_eq!(LayerSpec::default_chart().parameter_count(), 429_187);
        let s = LayerSpec::chart(vec![2, 64, 128, 128, 3]).unwrap();
        assert_eq!(s.parameter_count(), 25_411);
    }

    #[test]
    fn chart_spec_validation() {
        assert!(LayerSpec::chart(vec![3, 8, 3]).is_err());
        assert!(LayerSpec::chart(vec![2, 8, 2]).is_err());
        assert!(LayerSpec::new(vec![2]).is_err());
        assert!(LayerSpec::new(vec![2, 0, 3]).is_err());
        assert!(ChartNet::init_chart(LayerSpec::new(vec![3, 3]).unwrap(), 0).is_err());
    }

    #[test]
    fn overparametrization_check() {
        let net = ChartNet::init(LayerSpec::chart(vec![2, 64, 128, 128, 3]).unwrap(), 0);
        assert!(net.check_overparametrized(500).is_ok());
        assert!(net.check_overparametrized(1000).is_err());
    }

    #[test]
    fn identity_embedding_forward_and_jacobian() {
        let net = identity_embedding();
        assert_eq!(net.forward([0.5, 0.25]), [0.5, 0.25, 0.0]);
        assert_eq!(
            net.jacobian([0.3, 0.9]),
            [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]
        );
        let n = net.normal([0.3, 0.9]).unwrap();
        assert_eq!(n, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_weights_give_constant_output() {
        let spec = LayerSpec::chart(vec![2, 4, 3]).unwrap();
        let mut net = ChartNet::init(spec, 1);
        for l in net.layers_mut() {
            l.weights.fill(0.0);
        }
        net.layers_mut()[1].bias = ndarray::arr1(&[1.0, 2.0, 3.0]);
        for v in [[0.0, 0.0], [0.7, 0.1], [5.0, -3.0]] {
            assert_eq!(net.forward(v), [1.0, 2.0, 3.0]);
        }
        assert_eq!(net.jacobian([0.2, 0.2]), [[0.0; 2]; 3]);
        assert!(net.normal([0.2, 0.2]).is_none());
    }

    #[test]
    fn forward_matches_oracle_and_batch() {
        let spec = LayerSpec::chart(vec![2, 16, 32, 8, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..5 {
            let mut net = ChartNet::init(spec.clone(), seed);
            for l in net.layers_mut() {
                l.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            }
            let vs: Vec<[f64; 2]> = (0..20).map(|_| [rng.random(), rng.random()]).collect();
            let batch = net.forward_batch(samples_to_array(&vs).view());
            for (k, v) in vs.iter().enumerate() {
                let o = oracle_forward(&net, *v);
                let f = net.forward(*v);
                for d in 0..3 {
                    assert!((f[d] - o[d]).abs() <= 1e-12 * o[d].abs().max(1.0));
                    assert!((batch[[k, d]] - o[d]).abs() <= 1e-12 * o[d].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn single_layer_gradient_closed_form() {
        // loss = ||W v - x||^2, dL/dW = 2 (W v - x) v^T
        let spec = LayerSpec::chart(vec![2, 3]).unwrap();
        let net = ChartNet::init(spec, 9);
        let v = [0.3, -0.7];
        let x = [1.0, 2.0, -1.0];
        let y = net.forward(v);
        let r: Vec<f64> = (0..3).map(|d| 2.0 * (y[d] - x[d])).collect();
        let g = net
            .backward(
                samples_to_array(&[v]).view(),
                Array2::from_shape_vec((1, 3), r.clone()).unwrap().view(),
            )
            .unwrap();
        for o in 0..3 {
            for i in 0..2 {
                assert!((g.layers[0].weights[[o, i]] - r[o] * v[i]).abs() < 1e-15);
            }
            assert!((g.layers[0].bias[o] - r[o]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_residuals_give_zero_gradient() {
        let net = ChartNet::init(LayerSpec::chart(vec![2, 8, 3]).unwrap(), 2);
        let g = net
            .backward(
                samples_to_array(&[[0.1, 0.2], [0.5, 0.5]]).view(),
                Array2::zeros((2, 3)).view(),
            )
            .unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn backward_rejects_bad_shapes() {
        let net = ChartNet::init(LayerSpec::chart(vec![2, 8, 3]).unwrap(), 2);
        let inputs = samples_to_array(&[[0.1, 0.2]]);
        assert!(net
            .backward(inputs.view(), Array2::zeros((2, 3)).view())
            .is_err());
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(net
            .backward(empty.view(), Array2::zeros((0, 3)).view())
            .is_err());
    }

    #[test]
    fn piecewise_affine_along_small_segments() {
        let net = ChartNet::init(LayerSpec::chart(vec![2, 32, 32, 3]).unwrap(), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut checked = 0;
        for _ in 0..100 {
            let v = [rng.random::<f64>(), rng.random::<f64>()];
            let d = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let t = 1e-7;
            let at = |s: f64| net.forward([v[0] + s * d[0], v[1] + s * d[1]]);
            let (f0, f1, f2) = (at(0.0), at(t), at(2.0 * t));
            // second difference vanishes inside one activation region
            let second: f64 = (0..3).map(|k| (f2[k] - 2.0 * f1[k] + f0[k]).abs()).sum();
            if second < 1e-12 {
                checked += 1;
            }
        }
        assert!(checked >= 95, "only {checked} segments were affine");
    }

    #[test]
    fn flat_params_round_trip() {
        let mut net = ChartNet::init(LayerSpec::chart(vec![2, 5, 3]).unwrap(), 4);
        let mut p = net.flat_params();
        p[3] = 0.125;
        net.set_flat_params(&p).unwrap();
        assert_eq!(net.flat_params(), p);
        assert!(net.set_flat_params(&p[1..]).is_err());
    }
}
