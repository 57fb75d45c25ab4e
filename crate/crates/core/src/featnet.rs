//! Fully-connected feature extractor.
//!
//! Each domain has its own branch (`branch_x`, `branch_y`); both feed one
//! shared trunk with tied weights. The trunk output is optionally
//! L2-normalized and becomes the feature `f1(x)` or `f2(y)` consumed by the
//! similarity layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::simcore::{Matrix, Vector};
use crate::{Domain, Error, Result};

/// Init std for every layer except the last one of the trunk.
pub const HIDDEN_INIT_STD: f64 = 0.01;
/// Init std for the final layer of the trunk.
pub const FINAL_INIT_STD: f64 = 0.001;
/// Below this pre-normalization norm the output is left unnormalized.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec {
            in_dim,
            out_dim,
            activation,
        }
    }
}

/// Layer layout of a [`FeatureNet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetShape {
    pub branch_x: Vec<LayerSpec>,
    pub branch_y: Vec<LayerSpec>,
    pub shared: Vec<LayerSpec>,
    pub normalize_output: bool,
}

impl NetShape {
    /// One ReLU layer per branch, then a ReLU and an identity trunk layer.
    pub fn desk(input_x: usize, input_y: usize, branch_out: usize, hidden: usize, r: usize) -> Self {
        NetShape {
            branch_x: vec![LayerSpec::new(input_x, branch_out, Activation::Relu)],
            branch_y: vec![LayerSpec::new(input_y, branch_out, Activation::Relu)],
            shared: vec![
                LayerSpec::new(branch_out, hidden, Activation::Relu),
                LayerSpec::new(hidden, r, Activation::Identity),
            ],
            normalize_output: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shared.is_empty() {
            return Err(Error::param("shared", "trunk needs at least one layer"));
        }
        for (name, layers) in [
            ("branch_x", &self.branch_x),
            ("branch_y", &self.branch_y),
            ("shared", &self.shared),
        ] {
            for (k, l) in layers.iter().enumerate() {
                if l.in_dim == 0 || l.out_dim == 0 {
                    return Err(Error::param(
                        format!("{name}[{k}]"),
                        "layer dimensions must be positive",
                    ));
                }
                if k > 0 && layers[k - 1].out_dim != l.in_dim {
                    return Err(Error::dim(
                        format!("{name}[{k}].in_dim"),
                        layers[k - 1].out_dim,
                        l.in_dim,
                    ));
                }
            }
        }
        let trunk_in = self.shared[0].in_dim;
        for (name, layers) in [("branch_x", &self.branch_x), ("branch_y", &self.branch_y)] {
            if let Some(last) = layers.last() {
                if last.out_dim != trunk_in {
                    return Err(Error::dim(format!("{name} output"), trunk_in, last.out_dim));
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self, domain: Domain) -> usize {
        let branch = match domain {
            Domain::X => &self.branch_x,
            Domain::Y => &self.branch_y,
        };
        branch
            .first()
            .or(self.shared.first())
            .map_or(0, |l| l.in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.shared.last().map_or(0, |l| l.out_dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out_dim × in_dim`.
    pub w: Matrix,
    pub b: Vector,
    pub activation: Activation,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        LayerSpec::new(self.w.ncols(), self.w.nrows(), self.activation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNet {
    pub branch_x: Vec<Layer>,
    pub branch_y: Vec<Layer>,
    pub shared: Vec<Layer>,
    pub normalize_output: bool,
}

/// Activations recorded by [`forward`], consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    domain: Domain,
    /// Input of every layer along the path (branch, then trunk).
    inputs: Vec<Vector>,
    /// Pre-activation of every layer along the path.
    pre: Vec<Vector>,
    /// Trunk output before normalization.
    raw_out: Vector,
    normalized: bool,
}

impl Tape {
    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// Whether perturbing any single parameter by up to `step` keeps every
    /// ReLU unit on this path on the same side of zero. Uses a first-order
    /// bound on the pre-activation change, widened by `safety`.
    pub fn relu_stable(&self, net: &FeatureNet, step: f64, safety: f64) -> bool {
        let mut carried = 0.0;
        for ((layer, input), pre) in net
            .branch(self.domain)
            .iter()
            .chain(net.shared.iter())
            .zip(&self.inputs)
            .zip(&self.pre)
        {
            let row_sum = layer
                .w
                .row_iter()
                .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
                .fold(0.0, f64::max);
            let own = step * input.amax().max(1.0);
            let bound = own + row_sum * carried;
            if layer.activation == Activation::Relu && pre.iter().any(|v| v.abs() < safety * bound) {
                return false;
            }
            carried = bound;
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub w: Matrix,
    pub b: Vector,
}

/// Gradient with the same layout as a [`FeatureNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetGradients {
    pub branch_x: Vec<LayerGrad>,
    pub branch_y: Vec<LayerGrad>,
    pub shared: Vec<LayerGrad>,
}

fn zero_grads(layers: &[Layer]) -> Vec<LayerGrad> {
    layers
        .iter()
        .map(|l| LayerGrad {
            w: Matrix::zeros(l.w.nrows(), l.w.ncols()),
            b: Vector::zeros(l.b.len()),
        })
        .collect()
}

impl NetGradients {
    pub fn zeros_like(net: &FeatureNet) -> Self {
        NetGradients {
            branch_x: zero_grads(&net.branch_x),
            branch_y: zero_grads(&net.branch_y),
            shared: zero_grads(&net.shared),
        }
    }

    fn groups(&self) -> [&Vec<LayerGrad>; 3] {
        [&self.branch_x, &self.branch_y, &self.shared]
    }

    /// Same order as [`FeatureNet::param_slices`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.groups()
            .into_iter()
            .flatten()
            .flat_map(|g| [g.w.as_slice(), g.b.as_slice()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        [&mut self.branch_x, &mut self.branch_y, &mut self.shared]
            .into_iter()
            .flatten()
            .flat_map(|g| [g.w.as_mut_slice(), g.b.as_mut_slice()])
            .collect()
    }

    pub fn add_assign(&mut self, other: &NetGradients) -> Result<()> {
        let mine = self.slices_mut();
        let theirs = other.slices();
        if mine.len() != theirs.len() {
            return Err(Error::dim("net gradient tensors", mine.len(), theirs.len()));
        }
        for (a, b) in mine.into_iter().zip(theirs) {
            if a.len() != b.len() {
                return Err(Error::dim("net gradient tensor", a.len(), b.len()));
            }
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }
}

impl FeatureNet {
    pub fn from_layers(
        branch_x: Vec<Layer>,
        branch_y: Vec<Layer>,
        shared: Vec<Layer>,
        normalize_output: bool,
    ) -> Result<Self> {
        let net = FeatureNet {
            branch_x,
            branch_y,
            shared,
            normalize_output,
        };
        net.shape().validate()?;
        for layer in net.layers() {
            if layer.b.len() != layer.w.nrows() {
                return Err(Error::dim("bias", layer.w.nrows(), layer.b.len()));
            }
            if !layer.w.iter().chain(layer.b.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFinite("feature net weights".into()));
            }
        }
        Ok(net)
    }

    pub fn shape(&self) -> NetShape {
        let specs = |ls: &[Layer]| ls.iter().map(Layer::spec).collect();
        NetShape {
            branch_x: specs(&self.branch_x),
            branch_y: specs(&self.branch_y),
            shared: specs(&self.shared),
            normalize_output: self.normalize_output,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.shared.last().map_or(0, |l| l.w.nrows())
    }

    pub fn input_dim(&self, domain: Domain) -> usize {
        self.shape().input_dim(domain)
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.branch_x
            .iter()
            .chain(self.branch_y.iter())
            .chain(self.shared.iter())
    }

    fn branch(&self, domain: Domain) -> &[Layer] {
        match domain {
            Domain::X => &self.branch_x,
            Domain::Y => &self.branch_y,
        }
    }

    /// Sum of squares of every weight and bias.
    pub fn norm_squared(&self) -> f64 {
        self.layers()
            .map(|l| l.w.norm_squared() + l.b.norm_squared())
            .sum()
    }

    /// Parameters as slices: per layer `w` then `b`; `branch_x`, `branch_y`, `shared`.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| [l.w.as_slice(), l.b.as_slice()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.branch_x
            .iter_mut()
            .chain(self.branch_y.iter_mut())
            .chain(self.shared.iter_mut())
            .flat_map(|l| [l.w.as_mut_slice(), l.b.as_mut_slice()])
            .collect()
    }
}

/// Zero-mean Gaussian weights, zero biases. Deterministic per seed.
pub fn init_weights(shape: &NetShape, seed: u64) -> Result<FeatureNet> {
    shape.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = Normal::new(0.0, HIDDEN_INIT_STD).expect("valid std");
    let last = Normal::new(0.0, FINAL_INIT_STD).expect("valid std");
    let n_shared = shape.shared.len();

    let mut build = |specs: &[LayerSpec], final_group: bool| -> Vec<Layer> {
        specs
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let dist = if final_group && k + 1 == n_shared {
                    &last
                } else {
                    &hidden
                };
                Layer {
                    w: Matrix::from_fn(s.out_dim, s.in_dim, |_, _| dist.sample(&mut rng)),
                    b: Vector::zeros(s.out_dim),
                    activation: s.activation,
                }
            })
            .collect()
    };
    let branch_x = build(&shape.branch_x, false);
    let branch_y = build(&shape.branch_y, false);
    let shared = build(&shape.shared, true);
    Ok(FeatureNet {
        branch_x,
        branch_y,
        shared,
        normalize_output: shape.normalize_output,
    })
}

/// Computes `shared(branch_domain(raw))`, normalized when enabled.
pub fn forward(net: &FeatureNet, raw: &Vector, domain: Domain) -> Result<(Vector, Tape)> {
    let expected = net.input_dim(domain);
    if raw.len() != expected {
        return Err(Error::dim(format!("raw input ({domain})"), expected, raw.len()));
    }
    let path = net.branch(domain).iter().chain(net.shared.iter());
    let mut inputs = Vec::new();
    let mut pre = Vec::new();
    let mut h = raw.clone();
    for layer in path {
        let a = &layer.w * &h + &layer.b;
        let out = match layer.activation {
            Activation::Relu => a.map(|v| v.max(0.0)),
            Activation::Identity => a.clone(),
        };
        inputs.push(std::mem::replace(&mut h, out));
        pre.push(a);
    }
    let norm = h.norm();
    let normalized = net.normalize_output && norm > NORM_EPS;
    let feature = if normalized { &h / norm } else { h.clone() };
    Ok((
        feature,
        Tape {
            domain,
            inputs,
            pre,
            raw_out: h,
            normalized,
        },
    ))
}

/// Gradients of `grad_feature · feature` with respect to every weight and
/// bias of `net`, and with respect to the raw input.
pub fn backward(net: &FeatureNet, tape: &Tape, grad_feature: &Vector) -> Result<(NetGradients, Vector)> {
    let mut grads = NetGradients::zeros_like(net);
    let input_grad = backward_into(net, tape, grad_feature, &mut grads)?;
    Ok((grads, input_grad))
}

/// Like [`backward`] but accumulates into `grads`.
pub fn backward_into(
    net: &FeatureNet,
    tape: &Tape,
    grad_feature: &Vector,
    grads: &mut NetGradients,
) -> Result<Vector> {
    let branch = net.branch(tape.domain);
    let n_path = branch.len() + net.shared.len();
    if tape.inputs.len() != n_path || tape.pre.len() != n_path {
        return Err(Error::dim("tape layers", n_path, tape.inputs.len()));
    }
    if tape.raw_out.len() != net.output_dim() {
        return Err(Error::dim("tape output", net.output_dim(), tape.raw_out.len()));
    }
    if grad_feature.len() != net.output_dim() {
        return Err(Error::dim("grad_feature", net.output_dim(), grad_feature.len()));
    }

    let mut g = if tape.normalized {
        // d(z/‖z‖) = (I − ŷŷᵀ)/‖z‖
        let norm = tape.raw_out.norm();
        let y = &tape.raw_out / norm;
        (grad_feature - &y * y.dot(grad_feature)) / norm
    } else {
        grad_feature.clone()
    };

    let branch_grads = match tape.domain {
        Domain::X => &mut grads.branch_x,
        Domain::Y => &mut grads.branch_y,
    };
    let layers = branch.iter().zip(branch_grads.iter_mut()).chain(
        net.shared.iter().zip(grads.shared.iter_mut()),
    );
    let steps: Vec<_> = layers.collect();
    for (k, (layer, lg)) in steps.into_iter().enumerate().rev() {
        let input = &tape.inputs[k];
        let pre = &tape.pre[k];
        if input.len() != layer.w.ncols() || pre.len() != layer.w.nrows() {
            return Err(Error::dim("tape layer", layer.w.ncols(), input.len()));
        }
        if layer.activation == Activation::Relu {
            g.iter_mut()
                .zip(pre.iter())
                .for_each(|(gi, &a)| {
                    if a <= 0.0 {
                        *gi = 0.0;
                    }
                });
        }
        lg.w.ger(1.0, &g, input, 1.0);
        lg.b += &g;
        g = layer.w.tr_mul(&g);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_shape() -> NetShape {
        NetShape::desk(5, 4, 6, 5, 3)
    }

    fn rand_net(seed: u64, shape: &NetShape) -> FeatureNet {
        // Larger weights than the default init so every path carries signal.
        let mut net = init_weights(shape, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        for s in net.param_slices_mut() {
            s.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        net
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vector {
        Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_weights(&small_shape(), 42).unwrap();
        let b = init_weights(&small_shape(), 42).unwrap();
        assert_eq!(a, b);
        let c = init_weights(&small_shape(), 43).unwrap();
        assert_ne!(a.shared[0].w, c.shared[0].w);
        assert!(a.param_slices().iter().skip(1).step_by(2).all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn init_std_matches_layer_role() {
        let shape = NetShape {
            branch_x: vec![LayerSpec::new(100, 100, Activation::Relu)],
            branch_y: vec![LayerSpec::new(100, 100, Activation::Relu)],
            shared: vec![
                LayerSpec::new(100, 100, Activation::Relu),
                LayerSpec::new(100, 100, Activation::Identity),
            ],
            normalize_output: true,
        };
        let net = init_weights(&shape, 5).unwrap();
        let std = |m: &Matrix| {
            let n = m.len() as f64;
            let mean = m.sum() / n;
            (m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        let hidden = std(&net.shared[0].w);
        assert!((hidden - 0.01).abs() < 0.001, "hidden std {hidden}");
        let branch = std(&net.branch_x[0].w);
        assert!((branch - 0.01).abs() < 0.001, "branch std {branch}");
        let last = std(&net.shared[1].w);
        assert!((last - 0.001).abs() < 0.0001, "final std {last}");
    }

    #[test]
    fn init_rejects_zero_dimension() {
        let mut shape = small_shape();
        shape.branch_x[0].out_dim = 0;
        assert!(init_weights(&shape, 1).is_err());
        let mut shape = small_shape();
        shape.branch_y[0].out_dim = 7;
        assert!(matches!(init_weights(&shape, 1), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn zero_net_gives_zero_feature() {
        let mut net = init_weights(&small_shape(), 1).unwrap();
        for s in net.param_slices_mut() {
            s.fill(0.0);
        }
        let (f, _) = forward(&net, &Vector::from_element(5, 1.0), Domain::X).unwrap();
        assert_eq!(f, Vector::zeros(3));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = Layer {
            w: Matrix::identity(3, 3),
            b: Vector::zeros(3),
            activation: Activation::Identity,
        };
        let net = FeatureNet::from_layers(vec![], vec![], vec![layer], false).unwrap();
        let raw = Vector::from_column_slice(&[1.5, -2.0, 0.25]);
        assert_eq!(forward(&net, &raw, Domain::Y).unwrap().0, raw);
    }

    #[test]
    fn forward_output_has_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..10 {
            let net = rand_net(seed, &small_shape());
            for domain in [Domain::X, Domain::Y] {
                let raw = rand_vec(&mut rng, net.input_dim(domain));
                let (f, _) = forward(&net, &raw, domain).unwrap();
                assert!((f.norm() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let net = init_weights(&small_shape(), 1).unwrap();
        assert!(forward(&net, &Vector::zeros(4), Domain::X).is_err());
        assert!(forward(&net, &Vector::zeros(4), Domain::Y).is_ok());
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let net = rand_net(2, &small_shape());
        let (_, tape) = forward(&net, &Vector::from_element(5, 0.3), Domain::X).unwrap();
        let (g, gin) = backward(&net, &tape, &Vector::zeros(3)).unwrap();
        assert_eq!(g, NetGradients::zeros_like(&net));
        assert_eq!(gin, Vector::zeros(5));
    }

    #[test]
    fn single_linear_layer_gradient_is_outer_product() {
        let w = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        let layer = Layer {
            w: w.clone(),
            b: Vector::zeros(2),
            activation: Activation::Identity,
        };
        let net = FeatureNet::from_layers(vec![], vec![], vec![layer], false).unwrap();
        let x = Vector::from_column_slice(&[0.5, -1.0, 2.0]);
        let u = Vector::from_column_slice(&[3.0, -2.0]);
        let (_, tape) = forward(&net, &x, Domain::X).unwrap();
        let (g, gin) = backward(&net, &tape, &u).unwrap();
        assert_eq!(g.shared[0].w, &u * x.transpose());
        assert_eq!(g.shared[0].b, u);
        assert_eq!(gin, w.transpose() * Vector::from_column_slice(&[3.0, -2.0]));
    }

    #[test]
    fn stale_tape_is_rejected() {
        let net = rand_net(1, &small_shape());
        let other = rand_net(1, &NetShape::desk(5, 4, 6, 5, 2));
        let (_, tape) = forward(&other, &Vector::from_element(5, 1.0), Domain::X).unwrap();
        assert!(backward(&net, &tape, &Vector::zeros(3)).is_err());
    }

    /// Central differences of `u · forward(net, raw)` for every parameter.
    #[test]
    fn backward_matches_finite_differences() {
        let step = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        for seed in 0..6 {
            let net = rand_net(seed, &small_shape());
            for domain in [Domain::X, Domain::Y] {
                let raw = rand_vec(&mut rng, net.input_dim(domain));
                let u = rand_vec(&mut rng, 3);
                let (_, tape) = forward(&net, &raw, domain).unwrap();
                let (g, _) = backward(&net, &tape, &u).unwrap();
                let near_kink = tape
                    .pre
                    .iter()
                    .any(|p| p.iter().any(|v| v.abs() < 1e-4));
                if near_kink {
                    continue;
                }
                let analytic: Vec<f64> = g.slices().concat();
                let mut probe = net.clone();
                let mut idx = 0;
                let n_slices = probe.param_slices().len();
                for s in 0..n_slices {
                    let len = probe.param_slices()[s].len();
                    for k in 0..len {
                        let orig = probe.param_slices()[s][k];
                        probe.param_slices_mut()[s][k] = orig + step;
                        let plus = forward(&probe, &raw, domain).unwrap().0.dot(&u);
                        probe.param_slices_mut()[s][k] = orig - step;
                        let minus = forward(&probe, &raw, domain).unwrap().0.dot(&u);
                        probe.param_slices_mut()[s][k] = orig;
                        let numeric = (plus - minus) / (2.0 * step);
                        let a = analytic[idx];
                        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                        assert!(rel <= 1e-6, "param {s}/{k}: {a} vs {numeric}");
                        idx += 1;
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 0);
    }
}
