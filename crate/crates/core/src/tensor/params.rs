//! Named parameter storage and the SGD-with-momentum update.

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LayerSpec, Result, Tensor, TensorError};

/// One trainable tensor plus its momentum velocity buffer. The gradient
/// lives inside `value` (see [`Tensor::grad`]).
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub velocity: Vec<f32>,
    pub frozen: bool,
}

impl Param {
    fn new(value: Tensor) -> Param {
        let n = value.numel();
        Param {
            value,
            velocity: vec![0.0; n],
            frozen: false,
        }
    }
}

/// Ordered map from parameter name to [`Param`]. Layer parameters are named
/// `<layer>.w` / `<layer>.b`; shared layers appear exactly once and every
/// consumer accumulates into the same gradient buffer.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.params.insert(name.to_string(), Param::new(value));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Create `<prefix>.w` and `<prefix>.b` for a parametric layer.
    /// Weights are drawn from normal(0, sqrt(2/fan_in)); biases start at 0.
    pub fn init_layer(&mut self, prefix: &str, spec: &LayerSpec, rng: &mut ChaCha8Rng) {
        let Some((w_shape, b_shape)) = spec.param_shapes() else {
            return;
        };
        let fan_in = spec.fan_in().expect("parametric layers define fan-in");
        let std = (2.0 / fan_in as f32).sqrt();
        let normal = Normal::new(0.0f32, std).expect("positive std");
        let w_len: usize = w_shape.iter().product();
        let data: Vec<f32> = (0..w_len).map(|_| normal.sample(rng)).collect();
        self.insert(
            &format!("{prefix}.w"),
            Tensor::from_vec(&w_shape, data).expect("consistent init shape"),
        );
        self.insert(&format!("{prefix}.b"), Tensor::zeros(&b_shape));
    }

    /// Mark every parameter whose name starts with `prefix` as frozen (or
    /// unfrozen). Frozen parameters receive no gradient and are skipped by
    /// the optimizer.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.value.zero_grad();
        }
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.value.clear_grad();
        }
    }

    /// Copy parameter values (not velocities) from `src` for every name in
    /// `names`, checking shapes. On mismatch returns the full list of
    /// offending layers.
    pub fn copy_values_from(&mut self, src: &ParamSet, names: &[String]) -> Result<()> {
        let mut mismatched = Vec::new();
        for name in names {
            let from = src.get(name)?;
            let to = self.get(name)?;
            if from.value.shape() != to.value.shape() {
                mismatched.push(format!(
                    "{name}: {:?} vs {:?}",
                    from.value.shape(),
                    to.value.shape()
                ));
            }
        }
        if !mismatched.is_empty() {
            return Err(TensorError::Shape(format!(
                "parameter transfer mismatch: {}",
                mismatched.join(", ")
            )));
        }
        for name in names {
            let data = src.get(name)?.value.clone();
            let dst = self.get_mut(name)?;
            dst.value = data;
            dst.value.clear_grad();
        }
        Ok(())
    }
}

/// v <- momentum*v + grad; p <- p - lr*v; gradients are zeroed after the
/// step. An unfrozen parameter without a gradient is an error naming it;
/// frozen parameters are skipped.
pub fn sgd_momentum_step(params: &mut ParamSet, lr: f32, momentum: f32) -> Result<()> {
    for (name, p) in params.params.iter_mut() {
        if p.frozen {
            continue;
        }
        let Some(grad) = p.value.grad() else {
            return Err(TensorError::MissingGradient(name.clone()));
        };
        debug_assert_eq!(grad.len(), p.velocity.len());
        let grad = grad.to_vec();
        let data = p.value.data_mut();
        for i in 0..data.len() {
            p.velocity[i] = momentum * p.velocity[i] + grad[i];
            data[i] -= lr * p.velocity[i];
        }
        p.value.zero_grad();
    }
    Ok(())
}
