//! Central finite-difference validation of every layer's backward pass.
//!
//! The probe loss is a +/-1-weighted sum of the layer output (the loss ops
//! are checked on their own scalar). The forward stays in 32-bit arithmetic;
//! only the final reduction accumulates in f64 to keep cancellation noise
//! out of the difference quotient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::Tape;
use super::{LayerSpec, ParamSet, Result, Tensor, TensorError};

/// Max over all parameters and inputs of
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8),
/// with the numeric side the central difference at `epsilon`.
pub fn finite_difference_check(spec: &LayerSpec, input: &Tensor, epsilon: f32) -> Result<f32> {
    finite_difference_check_seeded(spec, input, epsilon, 0)
}

/// As [`finite_difference_check`], with the seed for layer parameters, probe
/// weights, labels and loss targets made explicit.
pub fn finite_difference_check_seeded(
    spec: &LayerSpec,
    input: &Tensor,
    epsilon: f32,
    seed: u64,
) -> Result<f32> {
    if !(1e-4..=1e-2).contains(&epsilon) {
        return Err(TensorError::InvalidArgument(format!(
            "epsilon {epsilon} outside [1e-4, 1e-2]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    params.init_layer("layer", spec, &mut rng);
    let probe = Probe::new(spec, input, &mut rng)?;
    let (analytic_input, analytic_params) = analytic_gradients(&probe, &mut params, input)?;

    let eval = |params: &ParamSet, input: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.input(input.clone())?;
        let out = probe.apply(&mut tape, params, x)?;
        Ok(probe.loss(tape.value(out)))
    };

    let mut max_rel = 0.0f32;
    let mut consider = |analytic: f32, numeric: f32| {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    };

    // input elements
    let mut probe_input = input.clone();
    for i in 0..probe_input.numel() {
        let orig = probe_input.data()[i];
        probe_input.data_mut()[i] = orig + epsilon;
        let lp = eval(&params, &probe_input)?;
        probe_input.data_mut()[i] = orig - epsilon;
        let lm = eval(&params, &probe_input)?;
        probe_input.data_mut()[i] = orig;
        consider(analytic_input[i], ((lp - lm) / (2.0 * epsilon as f64)) as f32);
    }

    // parameter elements
    let names: Vec<String> = params.names().cloned().collect();
    for (name, analytic) in names.iter().zip(analytic_params.iter().map(|(_, g)| g)) {
        for i in 0..analytic.len() {
            let orig = params.get(name)?.value.data()[i];
            params.get_mut(name)?.value.data_mut()[i] = orig + epsilon;
            let lp = eval(&params, input)?;
            params.get_mut(name)?.value.data_mut()[i] = orig - epsilon;
            let lm = eval(&params, input)?;
            params.get_mut(name)?.value.data_mut()[i] = orig;
            consider(analytic[i], ((lp - lm) / (2.0 * epsilon as f64)) as f32);
        }
    }
    Ok(max_rel)
}

/// Smallest absolute analytic gradient over all inputs and parameters of the
/// probe instance that [`finite_difference_check_seeded`] would build for
/// this seed. The relative-error formula divides by the gradient magnitude,
/// so instances with near-zero true gradients measure rounding noise rather
/// than backward correctness; callers drawing random instances can use this
/// to skip ill-conditioned draws without ever looking at the numeric side.
pub fn min_abs_analytic_grad(spec: &LayerSpec, input: &Tensor, seed: u64) -> Result<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    params.init_layer("layer", spec, &mut rng);
    let probe = Probe::new(spec, input, &mut rng)?;
    let (gi, gp) = analytic_gradients(&probe, &mut params, input)?;
    // Exactly-zero gradients (relu's dead side, pool's non-argmax taps) are
    // exact on the numeric side too and never inflate the relative error.
    let mut min = f32::INFINITY;
    for g in gi.iter().chain(gp.iter().flat_map(|(_, g)| g.iter())) {
        if *g != 0.0 {
            min = min.min(g.abs());
        }
    }
    Ok(if min.is_finite() { min } else { 0.0 })
}

type ParamGrads = Vec<(String, Vec<f32>)>;

fn analytic_gradients(
    probe: &Probe,
    params: &mut ParamSet,
    input: &Tensor,
) -> Result<(Vec<f32>, ParamGrads)> {
    let mut tape = Tape::new();
    let x = tape.input(input.clone())?;
    let out = probe.apply(&mut tape, params, x)?;
    params.zero_grads();
    tape.backward_seeded(out, &probe.seed_grad(tape.value(out).numel()), params)?;
    let analytic_input = tape.grad(x).expect("input reachable from loss").to_vec();
    let analytic_params: ParamGrads = params
        .iter()
        .map(|(name, p)| {
            (
                name.clone(),
                p.value
                    .grad()
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; p.value.numel()]),
            )
        })
        .collect();
    Ok((analytic_input, analytic_params))
}

/// How the probed layer turns into a scalar loss.
struct Probe {
    spec: LayerSpec,
    weights: Vec<f32>,
    labels: Vec<usize>,
    target: Option<Tensor>,
}

impl Probe {
    fn new(spec: &LayerSpec, input: &Tensor, rng: &mut ChaCha8Rng) -> Result<Probe> {
        let mut probe = Probe {
            spec: spec.clone(),
            weights: Vec::new(),
            labels: Vec::new(),
            target: None,
        };
        match spec {
            LayerSpec::SoftmaxCrossEntropy => {
                let &[n, k] = input.shape() else {
                    return Err(TensorError::Shape(format!(
                        "softmax probe expects [N, K] logits, got {:?}",
                        input.shape()
                    )));
                };
                probe.labels = (0..n).map(|_| rng.random_range(0..k)).collect();
            }
            LayerSpec::EuclideanLoss => {
                let data = (0..input.numel())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect();
                probe.target = Some(Tensor::from_vec(input.shape(), data)?);
            }
            _ => {
                let mut t = Tape::new();
                let x = t.input(input.clone())?;
                let out = probe.apply_layer(&mut t, &probe_params(spec, rng), x)?;
                let numel = t.value(out).numel();
                // continuous magnitudes keep weighted sums of gradients from
                // cancelling exactly (a +/-1 pattern can zero a bias gradient
                // analytically while the f32 numeric side keeps a residue)
                probe.weights = (0..numel)
                    .map(|_| {
                        let mag = rng.random_range(0.5f32..1.5);
                        if rng.random::<bool>() {
                            mag
                        } else {
                            -mag
                        }
                    })
                    .collect();
            }
        }
        Ok(probe)
    }

    fn apply(&self, tape: &mut Tape, params: &ParamSet, x: super::NodeId) -> Result<super::NodeId> {
        match &self.spec {
            LayerSpec::SoftmaxCrossEntropy => tape.softmax_cross_entropy(x, &self.labels),
            LayerSpec::EuclideanLoss => {
                tape.euclidean_loss(x, self.target.as_ref().expect("target set"))
            }
            _ => self.apply_layer(tape, params, x),
        }
    }

    fn apply_layer(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: super::NodeId,
    ) -> Result<super::NodeId> {
        match &self.spec {
            // concat is exercised on two uses of the same input, which also
            // covers gradient accumulation across consumers
            LayerSpec::Concat => tape.concat(&[x, x]),
            spec => tape.layer(spec, params, spec.is_parametric().then_some("layer"), x),
        }
    }

    fn seed_grad(&self, numel: usize) -> Vec<f32> {
        if self.weights.is_empty() {
            vec![1.0; numel]
        } else {
            self.weights.clone()
        }
    }

    fn loss(&self, out: &Tensor) -> f64 {
        if self.weights.is_empty() {
            out.data().iter().map(|&v| v as f64).sum()
        } else {
            out.data()
                .iter()
                .zip(&self.weights)
                .map(|(&v, &w)| v as f64 * w as f64)
                .sum()
        }
    }
}

fn probe_params(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut params = ParamSet::new();
    params.init_layer("layer", spec, rng);
    params
}
