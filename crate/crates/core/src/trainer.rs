//! Hinge-loss training of the feature net and similarity components.
//!
//! A training pair `(x, y)` carries `ell = -1` when both samples share a
//! class and `+1` otherwise; its loss is `max(0, 1 − ell·S(x, y))`.
//!
//! Gradients are computed per sample: every distinct sample in a batch is
//! forwarded and projected once, the derivative of the loss with respect to
//! its projected components is summed over the active pairs it belongs to,
//! and that cotangent is then pushed back through the similarity layer and the
//! feature net. [`pair_gradient_oracle`] computes the same quantity pair by
//! pair and exists for cross-checking.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::featnet::{self, FeatureNet, NetGradients, NetShape, Tape};
use crate::simcore::{self, ProjectedComponents, SimilarityComponents, Vector};
use crate::{Domain, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub domain: Domain,
    pub class_id: u32,
    pub raw: Vector,
}

/// Indices into a sample slice: `i` is the x-domain sample, `j` the y-domain one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairLabel {
    pub i: usize,
    pub j: usize,
    /// −1 for same class, +1 otherwise.
    pub ell: i8,
}

impl PairLabel {
    pub fn new(samples: &[Sample], i: usize, j: usize) -> Result<Self> {
        let (x, y) = (sample_at(samples, i)?, sample_at(samples, j)?);
        let ell = if x.class_id == y.class_id { -1 } else { 1 };
        let pair = PairLabel { i, j, ell };
        pair.validate(samples)?;
        Ok(pair)
    }

    pub fn validate(&self, samples: &[Sample]) -> Result<()> {
        let (x, y) = (sample_at(samples, self.i)?, sample_at(samples, self.j)?);
        if x.domain != Domain::X || y.domain != Domain::Y {
            return Err(Error::param(
                "pair",
                format!("({}, {}) is not an (X, Y) pair", self.i, self.j),
            ));
        }
        let expected = if x.class_id == y.class_id { -1 } else { 1 };
        if self.ell != expected {
            return Err(Error::param(
                "pair",
                format!("label {} inconsistent with classes of ({}, {})", self.ell, self.i, self.j),
            ));
        }
        Ok(())
    }

    fn sign(&self) -> f64 {
        f64::from(self.ell)
    }
}

fn sample_at(samples: &[Sample], idx: usize) -> Result<&Sample> {
    samples.get(idx).ok_or(Error::IndexOutOfRange {
        what: "samples".into(),
        index: idx,
        len: samples.len(),
    })
}

/// Per-round pair generation: `k_hat` classes, `o1` x-samples and `o2`
/// y-samples per class, `pairs_per_anchor` pairs per selected x-sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchScheme {
    pub k_hat: usize,
    pub o1: usize,
    pub o2: usize,
    pub pairs_per_anchor: usize,
    pub positive_fraction: f64,
}

impl Default for BatchScheme {
    fn default() -> Self {
        BatchScheme {
            k_hat: 10,
            o1: 2,
            o2: 2,
            pairs_per_anchor: 8,
            positive_fraction: 0.5,
        }
    }
}

impl BatchScheme {
    /// 60 classes × 80 pairs = 4800 pairs per round.
    pub fn reid_preset() -> Self {
        BatchScheme {
            k_hat: 60,
            o1: 1,
            o2: 1,
            pairs_per_anchor: 80,
            positive_fraction: 0.5,
        }
    }

    /// 20 classes × 60 pairs = 1200 pairs per round.
    pub fn still_video_preset() -> Self {
        BatchScheme {
            k_hat: 20,
            o1: 1,
            o2: 1,
            pairs_per_anchor: 60,
            positive_fraction: 0.5,
        }
    }

    pub fn pairs_per_batch(&self) -> usize {
        self.k_hat * self.o1 * self.pairs_per_anchor
    }

    pub fn positives_per_anchor(&self) -> usize {
        (self.positive_fraction * self.pairs_per_anchor as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("k_hat", self.k_hat),
            ("o1", self.o1),
            ("o2", self.o2),
            ("pairs_per_anchor", self.pairs_per_anchor),
        ] {
            if v == 0 {
                return Err(Error::param(name, "must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::param("positive_fraction", "must lie in [0, 1]"));
        }
        let pos = self.positive_fraction * self.pairs_per_anchor as f64;
        if (pos - pos.round()).abs() > 1e-9 {
            return Err(Error::param(
                "positive_fraction",
                format!(
                    "positive_fraction × pairs_per_anchor = {pos} is not an integer"
                ),
            ));
        }
        Ok(())
    }
}

/// Which parameterization of the similarity layer is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    /// Full generalized measure.
    #[default]
    Generalized,
    /// `d = e = 0`, `L_Cx ≡ L_A`, `L_Cy ≡ L_B`: squared distance `‖L_A f1 − L_B f2‖² + f`.
    AffineEuclidean,
    /// `L_A = L_B = 0`: affine inner product only.
    AffineCosine,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Generalized => "generalized",
            Variant::AffineEuclidean => "euclidean",
            Variant::AffineCosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "generalized" => Some(Variant::Generalized),
            "euclidean" => Some(Variant::AffineEuclidean),
            "cosine" => Some(Variant::AffineCosine),
            _ => None,
        }
    }

    pub fn constrain_phi(self, phi: &mut SimilarityComponents) {
        match self {
            Variant::Generalized => {}
            Variant::AffineEuclidean => {
                phi.l_cx = phi.l_a.clone();
                phi.l_cy = phi.l_b.clone();
                phi.d.fill(0.0);
                phi.e.fill(0.0);
            }
            Variant::AffineCosine => {
                phi.l_a.fill(0.0);
                phi.l_b.fill(0.0);
            }
        }
    }

    /// Projects a free gradient onto the variant's parameter subspace.
    pub fn constrain_gradient(self, g: &mut SimilarityComponents) {
        match self {
            Variant::Generalized => {}
            Variant::AffineEuclidean => {
                g.l_a += &g.l_cx;
                g.l_b += &g.l_cy;
                g.l_cx = g.l_a.clone();
                g.l_cy = g.l_b.clone();
                g.d.fill(0.0);
                g.e.fill(0.0);
            }
            Variant::AffineCosine => {
                g.l_a.fill(0.0);
                g.l_b.fill(0.0);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Weight on `‖W‖²`.
    pub reg_w: f64,
    /// Weight on `‖Φ‖²`.
    pub reg_phi: f64,
    pub iterations: usize,
    pub seed: u64,
    pub scheme: BatchScheme,
    /// Fixed bias of the similarity measure.
    pub f: f64,
    pub variant: Variant,
    /// Std of the Gaussian perturbation added to the identity init of Φ.
    pub phi_init_noise: f64,
    /// Caps each tensor's training update at this fraction of the tensor's
    /// L2 norm (floored at [`STEP_NORM_FLOOR`]); 0 disables. Plain
    /// [`sgd_step`] ignores it.
    pub max_step_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            reg_w: 1e-3,
            reg_phi: 1e-4,
            iterations: 2000,
            seed: 1,
            scheme: BatchScheme::default(),
            f: simcore::DEFAULT_F,
            variant: Variant::Generalized,
            phi_init_noise: 0.01,
            max_step_ratio: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate", "must be > 0"));
        }
        if !(self.reg_w >= 0.0) {
            return Err(Error::param("reg_w", "must be >= 0"));
        }
        if !(self.reg_phi >= 0.0) {
            return Err(Error::param("reg_phi", "must be >= 0"));
        }
        if !self.f.is_finite() {
            return Err(Error::param("f", "must be finite"));
        }
        if !(self.phi_init_noise >= 0.0) {
            return Err(Error::param("phi_init_noise", "must be >= 0"));
        }
        if !(self.max_step_ratio >= 0.0 && self.max_step_ratio.is_finite()) {
            return Err(Error::param("max_step_ratio", "must be finite and >= 0"));
        }
        self.scheme.validate()
    }
}

/// `Ω = (W, Φ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub net: FeatureNet,
    pub phi: SimilarityComponents,
}

impl ModelState {
    pub fn new(net: FeatureNet, phi: SimilarityComponents) -> Result<Self> {
        phi.validate()?;
        if net.output_dim() != phi.dim() {
            return Err(Error::dim("phi", net.output_dim(), phi.dim()));
        }
        Ok(ModelState { net, phi })
    }

    /// Fresh model: Gaussian feature net, identity-plus-noise similarity factors.
    pub fn init(shape: &NetShape, cfg: &TrainConfig) -> Result<Self> {
        let net = featnet::init_weights(shape, cfg.seed)?;
        let r = shape.output_dim();
        let mut phi = SimilarityComponents::identity(r, cfg.f);
        if cfg.phi_init_noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
            let noise = Normal::new(0.0, cfg.phi_init_noise)
                .map_err(|e| Error::param("phi_init_noise", e.to_string()))?;
            for s in phi.trainable_slices_mut().into_iter().take(4) {
                s.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
        }
        cfg.variant.constrain_phi(&mut phi);
        ModelState::new(net, phi)
    }

    pub fn feature(&self, sample: &Sample) -> Result<Vector> {
        Ok(featnet::forward(&self.net, &sample.raw, sample.domain)?.0)
    }

    pub fn project(&self, sample: &Sample) -> Result<ProjectedComponents> {
        let feature = self.feature(sample)?;
        simcore::project_components(&self.phi, &feature, sample.domain)
    }

    /// Score of an x-domain and a y-domain sample.
    pub fn score(&self, x: &Sample, y: &Sample) -> Result<f64> {
        if x.domain != Domain::X || y.domain != Domain::Y {
            return Err(Error::param("score", "expects an X sample then a Y sample"));
        }
        simcore::score_factorized(&self.phi, &self.feature(x)?, &self.feature(y)?)
    }

    /// Every trainable parameter: feature net slices, then `l_a, l_b, l_cx, l_cy, d, e`.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.net.param_slices_mut();
        out.extend(self.phi.trainable_slices_mut());
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.net.param_slices();
        out.extend(self.phi.trainable_slices());
        out
    }
}

/// Gradient with respect to `Ω`; `phi.f` is unused.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub net: NetGradients,
    pub phi: SimilarityComponents,
}

impl Gradients {
    pub fn zeros_like(state: &ModelState) -> Self {
        Gradients {
            net: NetGradients::zeros_like(&state.net),
            phi: SimilarityComponents::zeros(state.phi.dim(), 0.0),
        }
    }

    /// Same order as [`ModelState::param_slices`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.net.slices();
        out.extend(self.phi.trainable_slices());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.net.slices_mut();
        out.extend(self.phi.trainable_slices_mut());
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn scale(&mut self, k: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= k);
        }
    }
}

pub fn hinge_loss(score: f64, ell: i8) -> f64 {
    (1.0 - f64::from(ell) * score).max(0.0)
}

fn regularizer(state: &ModelState, cfg: &TrainConfig) -> f64 {
    cfg.reg_w * state.net.norm_squared() + cfg.reg_phi * state.phi.trainable_norm_sq()
}

/// Summed hinge loss over `pairs` plus `reg_w·‖W‖² + reg_phi·‖Φ‖²`.
pub fn objective(
    state: &ModelState,
    pairs: &[PairLabel],
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        p.validate(samples)?;
        total += hinge_loss(state.score(&samples[p.i], &samples[p.j])?, p.ell);
    }
    Ok(total + regularizer(state, cfg))
}

/// Draws one batch of labelled pairs. Deterministic for a fixed seed.
pub fn generate_batch(samples: &[Sample], scheme: &BatchScheme, seed: u64) -> Result<Vec<PairLabel>> {
    scheme.validate()?;
    let n_pos = scheme.positives_per_anchor();
    let n_neg = scheme.pairs_per_anchor - n_pos;
    if n_neg > 0 && scheme.k_hat < 2 {
        return Err(Error::Batch("negative pairs need k_hat >= 2".into()));
    }

    let mut by_class: BTreeMap<u32, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (idx, s) in samples.iter().enumerate() {
        let entry = by_class.entry(s.class_id).or_default();
        match s.domain {
            Domain::X => entry.0.push(idx),
            Domain::Y => entry.1.push(idx),
        }
    }
    let eligible: Vec<(&u32, &(Vec<usize>, Vec<usize>))> = by_class
        .iter()
        .filter(|(_, (xs, ys))| xs.len() >= scheme.o1 && ys.len() >= scheme.o2)
        .collect();
    if eligible.len() < scheme.k_hat {
        return Err(Error::Batch(format!(
            "need {} classes with >= {} X and >= {} Y samples, dataset has {} ({} classes total)",
            scheme.k_hat,
            scheme.o1,
            scheme.o2,
            eligible.len(),
            by_class.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<_> = eligible
        .choose_multiple(&mut rng, scheme.k_hat)
        .map(|(_, (xs, ys))| {
            let xs: Vec<usize> = xs.choose_multiple(&mut rng, scheme.o1).copied().collect();
            let ys: Vec<usize> = ys.choose_multiple(&mut rng, scheme.o2).copied().collect();
            (xs, ys)
        })
        .collect();

    let mut pairs = Vec::with_capacity(scheme.pairs_per_batch());
    for (c, (xs, ys)) in chosen.iter().enumerate() {
        for &i in xs {
            for _ in 0..n_pos {
                let j = *ys.choose(&mut rng).expect("o2 > 0");
                pairs.push(PairLabel { i, j, ell: -1 });
            }
            for _ in 0..n_neg {
                let mut other = rng.gen_range(0..chosen.len() - 1);
                if other >= c {
                    other += 1;
                }
                let j = *chosen[other].1.choose(&mut rng).expect("o2 > 0");
                pairs.push(PairLabel { i, j, ell: 1 });
            }
        }
    }
    Ok(pairs)
}

/// Forward state of every distinct sample referenced by a batch.
#[derive(Debug, Clone)]
pub struct SampleActivation {
    pub feature: Vector,
    pub tape: Tape,
    pub projected: ProjectedComponents,
}

/// Per-sample derivatives of the batch loss with respect to the projected
/// components, plus the activations they were computed from.
#[derive(Debug, Clone)]
pub struct SampleCotangents {
    /// Keyed by sample index; each sample is forwarded once.
    pub activations: BTreeMap<usize, SampleActivation>,
    pub cotangents: BTreeMap<usize, Vector>,
    /// Summed hinge loss of the batch.
    pub loss: f64,
}

/// Forwards and projects every sample in `pairs`, then accumulates for each
/// sample `−2·ell·(P1ᵀP1 z̃ − P2ᵀP2 z̃' + p3)` over its active partners `z̃'`
/// (pairs with `ell·S < 1`).
pub fn sample_activation_gradients(
    state: &ModelState,
    pairs: &[PairLabel],
    samples: &[Sample],
) -> Result<SampleCotangents> {
    let mut activations = BTreeMap::new();
    for p in pairs {
        p.validate(samples)?;
        for idx in [p.i, p.j] {
            if let std::collections::btree_map::Entry::Vacant(slot) = activations.entry(idx) {
                let s = &samples[idx];
                let (feature, tape) = featnet::forward(&state.net, &s.raw, s.domain)?;
                let projected = simcore::project_components(&state.phi, &feature, s.domain)?;
                slot.insert(SampleActivation {
                    feature,
                    tape,
                    projected,
                });
            }
        }
    }

    // Partner sets: (partner index, label) of every active pair a sample is in.
    let mut partners: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    let mut loss = 0.0;
    for p in pairs {
        let s = simcore::score_projected(
            &activations[&p.i].projected,
            &activations[&p.j].projected,
            state.phi.f,
        )?;
        loss += hinge_loss(s, p.ell);
        if p.sign() * s < 1.0 {
            partners.entry(p.i).or_default().push((p.j, p.sign()));
            partners.entry(p.j).or_default().push((p.i, p.sign()));
        }
    }

    let r = state.phi.dim();
    let mut cotangents = BTreeMap::new();
    for (&idx, act) in &activations {
        let mut g = Vector::zeros(2 * r + 1);
        for &(partner, ell) in partners.get(&idx).map(Vec::as_slice).unwrap_or(&[]) {
            let own = &act.projected;
            let other = &activations[&partner].projected;
            for k in 0..r {
                g[k] -= 2.0 * ell * own.quadratic()[k];
                g[r + k] += 2.0 * ell * other.cross()[k];
            }
            g[2 * r] -= 2.0 * ell;
        }
        cotangents.insert(idx, g);
    }
    Ok(SampleCotangents {
        activations,
        cotangents,
        loss,
    })
}

/// Gradient of the summed (unregularized) hinge loss via per-sample
/// cotangents. Returns `(loss, gradient)`.
pub fn sample_gradient(
    state: &ModelState,
    pairs: &[PairLabel],
    samples: &[Sample],
) -> Result<(f64, Gradients)> {
    let sc = sample_activation_gradients(state, pairs, samples)?;
    let r = state.phi.dim();
    let mut grads = Gradients::zeros_like(state);
    for (idx, g) in &sc.cotangents {
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let act = &sc.activations[idx];
        let fx = &act.feature;
        let g_quad = g.rows(0, r).into_owned();
        let g_cross = g.rows(r, r).into_owned();
        let g_lin = g[2 * r];
        let phi = &state.phi;
        let (l, l_c, shift) = match samples[*idx].domain {
            Domain::X => (&phi.l_a, &phi.l_cx, &phi.d),
            Domain::Y => (&phi.l_b, &phi.l_cy, &phi.e),
        };
        let (gl, gl_c, gshift) = match samples[*idx].domain {
            Domain::X => (&mut grads.phi.l_a, &mut grads.phi.l_cx, &mut grads.phi.d),
            Domain::Y => (&mut grads.phi.l_b, &mut grads.phi.l_cy, &mut grads.phi.e),
        };
        gl.ger(1.0, &g_quad, fx, 1.0);
        gl_c.ger(1.0, &g_cross, fx, 1.0);
        gshift.axpy(g_lin, fx, 1.0);
        let g_feature = l.tr_mul(&g_quad) + l_c.tr_mul(&g_cross) + shift * g_lin;
        featnet::backward_into(&state.net, &act.tape, &g_feature, &mut grads.net)?;
    }
    Ok((sc.loss, grads))
}

/// Reference gradient of the summed hinge loss, computed pair by pair from the
/// factorized form with both samples re-forwarded for every pair.
pub fn pair_gradient_oracle(
    state: &ModelState,
    pairs: &[PairLabel],
    samples: &[Sample],
) -> Result<Gradients> {
    let phi = &state.phi;
    let mut grads = Gradients::zeros_like(state);
    for p in pairs {
        p.validate(samples)?;
        let (x, y) = (&samples[p.i], &samples[p.j]);
        let (fx, tape_x) = featnet::forward(&state.net, &x.raw, Domain::X)?;
        let (fy, tape_y) = featnet::forward(&state.net, &y.raw, Domain::Y)?;
        let s = simcore::score_factorized(phi, &fx, &fy)?;
        if p.sign() * s >= 1.0 {
            continue;
        }
        // d(1 − ell·S) = −ell·dS
        let c = -p.sign();
        let ax = &phi.l_a * &fx;
        let by = &phi.l_b * &fy;
        let cx = &phi.l_cx * &fx;
        let cy = &phi.l_cy * &fy;
        grads.phi.l_a.ger(2.0 * c, &ax, &fx, 1.0);
        grads.phi.l_b.ger(2.0 * c, &by, &fy, 1.0);
        grads.phi.l_cx.ger(-2.0 * c, &cy, &fx, 1.0);
        grads.phi.l_cy.ger(-2.0 * c, &cx, &fy, 1.0);
        grads.phi.d.axpy(2.0 * c, &fx, 1.0);
        grads.phi.e.axpy(2.0 * c, &fy, 1.0);
        let dfx = (phi.l_a.tr_mul(&ax) + &phi.d - phi.l_cx.tr_mul(&cy)) * (2.0 * c);
        let dfy = (phi.l_b.tr_mul(&by) + &phi.e - phi.l_cy.tr_mul(&cx)) * (2.0 * c);
        featnet::backward_into(&state.net, &tape_x, &dfx, &mut grads.net)?;
        featnet::backward_into(&state.net, &tape_y, &dfy, &mut grads.net)?;
    }
    Ok(grads)
}

/// Gradient of [`objective`]: loss gradient plus `2·reg·θ`.
pub fn objective_gradient(
    state: &ModelState,
    pairs: &[PairLabel],
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<Gradients> {
    let (_, mut grads) = sample_gradient(state, pairs, samples)?;
    add_regularizer_gradient(&mut grads, state, cfg);
    Ok(grads)
}

fn add_regularizer_gradient(grads: &mut Gradients, state: &ModelState, cfg: &TrainConfig) {
    let n_net = state.net.param_slices().len();
    for (k, (g, p)) in grads
        .slices_mut()
        .into_iter()
        .zip(state.param_slices())
        .enumerate()
    {
        let reg = if k < n_net { cfg.reg_w } else { cfg.reg_phi };
        if reg != 0.0 {
            g.iter_mut().zip(p).for_each(|(gv, pv)| *gv += 2.0 * reg * pv);
        }
    }
}

fn check_gradient_shape(state: &ModelState, grads: &Gradients) -> Result<()> {
    let ps = state.param_slices();
    let gs = grads.slices();
    if ps.len() != gs.len() {
        return Err(Error::dim("gradient tensors", ps.len(), gs.len()));
    }
    for (k, (p, g)) in ps.iter().zip(&gs).enumerate() {
        if p.len() != g.len() {
            return Err(Error::dim(format!("gradient tensor {k}"), p.len(), g.len()));
        }
    }
    Ok(())
}

/// `Ω ← Ω − α·(∂loss + ∂Ψ)` in place; `f` is left unchanged.
pub fn apply_sgd(state: &mut ModelState, grads: &Gradients, cfg: &TrainConfig) -> Result<()> {
    update(state, grads, cfg, 0.0)
}

/// Lower bound on the tensor norm used by the step cap, so zero-initialized
/// biases can still move.
pub const STEP_NORM_FLOOR: f64 = 1e-3;

/// [`apply_sgd`] with each tensor's step `α(g + 2cθ)` shrunk to at most
/// `cfg.max_step_ratio · max(‖θ‖, STEP_NORM_FLOOR)`.
pub fn apply_capped_sgd(state: &mut ModelState, grads: &Gradients, cfg: &TrainConfig) -> Result<()> {
    update(state, grads, cfg, cfg.max_step_ratio)
}

fn update(state: &mut ModelState, grads: &Gradients, cfg: &TrainConfig, ratio: f64) -> Result<()> {
    check_gradient_shape(state, grads)?;
    let n_net = state.net.param_slices().len();
    for (k, (p, g)) in state
        .param_slices_mut()
        .into_iter()
        .zip(grads.slices())
        .enumerate()
    {
        let reg = if k < n_net { cfg.reg_w } else { cfg.reg_phi };
        let mut lr = cfg.learning_rate;
        if ratio > 0.0 {
            let step = lr * norm(p.iter().zip(g).map(|(pv, gv)| gv + 2.0 * reg * pv));
            let cap = ratio * norm(p.iter().copied()).max(STEP_NORM_FLOOR);
            if step > cap {
                lr *= cap / step;
            }
        }
        p.iter_mut()
            .zip(g)
            .for_each(|(pv, gv)| *pv -= lr * (gv + 2.0 * reg * *pv));
    }
    Ok(())
}

fn norm(values: impl Iterator<Item = f64>) -> f64 {
    values.map(|v| v * v).sum::<f64>().sqrt()
}

pub fn sgd_step(state: &ModelState, grads: &Gradients, cfg: &TrainConfig) -> Result<ModelState> {
    let mut next = state.clone();
    apply_sgd(&mut next, grads, cfg)?;
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    /// Mean hinge loss of each iteration's batch, before that iteration's update.
    pub loss_trace: Vec<f64>,
}

/// Runs `cfg.iterations` rounds of: sample pairs, forward, per-sample
/// cotangents, backprop, SGD update. Gradients are of the batch-mean loss.
pub fn train(samples: &[Sample], shape: &NetShape, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let state = ModelState::init(shape, cfg)?;
    train_from(state, samples, cfg)
}

pub fn train_from(mut state: ModelState, samples: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut loss_trace = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let pairs = generate_batch(samples, &cfg.scheme, batch_rng.next_u64())?;
        let (loss, mut grads) = sample_gradient(&state, &pairs, samples)?;
        let n = pairs.len() as f64;
        let mean = loss / n;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("batch loss at iteration {}", t + 1)));
        }
        grads.scale(1.0 / n);
        cfg.variant.constrain_gradient(&mut grads.phi);
        apply_capped_sgd(&mut state, &grads, cfg)?;
        if state.param_slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("parameters after iteration {}", t + 1)));
        }
        loss_trace.push(mean);
    }
    Ok(TrainOutcome { state, loss_trace })
}

/// `iter<TAB>mean_loss` lines, iterations numbered from 1.
pub fn format_loss_trace(trace: &[f64]) -> String {
    trace
        .iter()
        .enumerate()
        .map(|(k, v)| format!("{}\t{}\n", k + 1, crate::fmt_f64(*v)))
        .collect()
}

/// `|a − b| / max(|a|, |b|, 1)`: relative for large gradients, absolute near zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index into [`ModelState::param_slices`] order.
    pub argmax: usize,
    pub checked: usize,
    pub pairs_used: usize,
    pub pairs_excluded: usize,
}

/// Compares [`objective_gradient`] with central differences of [`objective`].
/// Pairs within `10·step` of the hinge kink, or with a sample whose ReLU
/// units could flip under a `step` perturbation (see [`Tape::relu_stable`],
/// safety 2), are dropped first.
pub fn finite_diff_check(
    state: &ModelState,
    pairs: &[PairLabel],
    samples: &[Sample],
    cfg: &TrainConfig,
    step: f64,
) -> Result<GradCheckReport> {
    finite_diff_check_with(state, pairs, samples, cfg, step, |_| {})
}

/// [`finite_diff_check`] with a hook that may tamper with the analytic
/// gradient before comparison (negative controls).
pub fn finite_diff_check_with(
    state: &ModelState,
    pairs: &[PairLabel],
    samples: &[Sample],
    cfg: &TrainConfig,
    step: f64,
    tamper: impl FnOnce(&mut Gradients),
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::param("step", "must be > 0"));
    }
    let mut kept = Vec::with_capacity(pairs.len());
    for p in pairs {
        p.validate(samples)?;
        let (fx, tx) = featnet::forward(&state.net, &samples[p.i].raw, Domain::X)?;
        let (fy, ty) = featnet::forward(&state.net, &samples[p.j].raw, Domain::Y)?;
        let s = simcore::score_factorized(&state.phi, &fx, &fy)?;
        let stable = tx.relu_stable(&state.net, step, 2.0) && ty.relu_stable(&state.net, step, 2.0);
        if (1.0 - p.sign() * s).abs() >= 10.0 * step && stable {
            kept.push(*p);
        }
    }

    let mut analytic = objective_gradient(state, &kept, samples, cfg)?;
    tamper(&mut analytic);
    let analytic = analytic.flatten();

    let mut probe = state.clone();
    let mut worst = (0.0_f64, 0_usize);
    let mut flat = 0;
    let n_slices = probe.param_slices().len();
    for s in 0..n_slices {
        let len = probe.param_slices()[s].len();
        for k in 0..len {
            let orig = probe.param_slices()[s][k];
            probe.param_slices_mut()[s][k] = orig + step;
            let plus = objective(&probe, &kept, samples, cfg)?;
            probe.param_slices_mut()[s][k] = orig - step;
            let minus = objective(&probe, &kept, samples, cfg)?;
            probe.param_slices_mut()[s][k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[flat], numeric);
            if err > worst.0 || err.is_nan() {
                worst = (err, flat);
            }
            flat += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        argmax: worst.1,
        checked: flat,
        pairs_used: kept.len(),
        pairs_excluded: pairs.len() - kept.len(),
    })
}
