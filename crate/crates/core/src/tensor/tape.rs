//! Define-by-run graph. A [`Tape`] records one forward pass and is replayed
//! in reverse by [`Tape::backward`]; it is rebuilt for every batch.

use super::layers::{self, ConvGeom, LayerSpec};
use super::{ParamSet, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum LayerCache {
    None,
    /// Max-pool argmax indices within each channel plane.
    PoolArgmax(Vec<u32>),
    /// conv2d im2col buffer, reused for the weight gradient.
    Cols(Vec<f32>),
}

enum Op {
    Input,
    Layer {
        spec: LayerSpec,
        param: Option<String>,
        input: NodeId,
        cache: LayerCache,
    },
    Concat {
        inputs: Vec<NodeId>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    EuclideanLoss {
        input: NodeId,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the recorded loss w.r.t. a node, available after
    /// [`Tape::backward`]. `None` if no gradient reached the node.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Register a leaf tensor. Non-finite inputs are rejected.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        value.check_finite("tape input")?;
        Ok(self.push(value, Op::Input))
    }

    /// Apply a single-input layer. `param` names the `<layer>` prefix whose
    /// `.w`/`.b` tensors live in `params`; it is required exactly when the
    /// layer kind is parametric.
    pub fn layer(
        &mut self,
        spec: &LayerSpec,
        params: &ParamSet,
        param: Option<&str>,
        input: NodeId,
    ) -> Result<NodeId> {
        let x = &self.nodes[input.0].value;
        // no finiteness asserts on activations: diverging training runs rely
        // on the loss turning NaN so the trainer can abort with the last
        // good checkpoint
        let (value, cache) = match spec {
            LayerSpec::Conv2d { .. } => {
                let (w, b) = layer_params(spec, params, param)?;
                let g = ConvGeom::for_conv(spec, x.shape())?;
                let (out, cols) = layers::conv2d_forward(&g, x, w, b);
                (out, LayerCache::Cols(cols))
            }
            LayerSpec::TransposedConv2d { .. } => {
                let (w, b) = layer_params(spec, params, param)?;
                let g = ConvGeom::for_conv(spec, x.shape())?;
                (layers::deconv2d_forward(&g, x, w, b), LayerCache::None)
            }
            LayerSpec::MaxPool { kernel, stride } => {
                let (value, argmax) = layers::maxpool_forward(x, *kernel, *stride)?;
                (value, LayerCache::PoolArgmax(argmax))
            }
            LayerSpec::Relu => (layers::relu_forward(x), LayerCache::None),
            LayerSpec::FullyConnected { in_dim, out_dim } => {
                spec.out_shape(x.shape())?;
                let (w, b) = layer_params(spec, params, param)?;
                let n = x.shape()[0];
                let flat = x.clone().reshaped(&[n, *in_dim])?;
                (layers::fc_forward(&flat, w, b, *in_dim, *out_dim), LayerCache::None)
            }
            LayerSpec::Concat | LayerSpec::SoftmaxCrossEntropy | LayerSpec::EuclideanLoss => {
                return Err(TensorError::InvalidArgument(format!(
                    "{spec:?} takes multiple operands; use the dedicated tape method"
                )));
            }
        };
        Ok(self.push(
            value,
            Op::Layer {
                spec: spec.clone(),
                param: param.map(str::to_string),
                input,
                cache,
            },
        ))
    }

    /// Concatenate along the feature dimension: inputs [N, ..] become
    /// [N, sum of flattened feature dims].
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(TensorError::InvalidArgument("concat of nothing".into()));
        }
        let n = self.nodes[inputs[0].0].value.shape()[0];
        let mut total = 0usize;
        for &id in inputs {
            let s = self.nodes[id.0].value.shape();
            if s[0] != n {
                return Err(TensorError::Shape(format!(
                    "concat batch mismatch: {} vs {}",
                    s[0], n
                )));
            }
            total += s.iter().skip(1).product::<usize>();
        }
        let mut out = Tensor::zeros(&[n, total]);
        {
            let od = out.data_mut();
            let mut offset = 0usize;
            for &id in inputs {
                let v = &self.nodes[id.0].value;
                let d = v.numel() / n;
                for ni in 0..n {
                    od[ni * total + offset..ni * total + offset + d]
                        .copy_from_slice(&v.data()[ni * d..(ni + 1) * d]);
                }
                offset += d;
            }
        }
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy over the batch: logits [N, K], one class
    /// label per row.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let v = &self.nodes[logits.0].value;
        let &[n, k] = v.shape() else {
            return Err(TensorError::Shape(format!(
                "softmax-cross-entropy expects [N, K] logits, got {:?}",
                v.shape()
            )));
        };
        if labels.len() != n {
            return Err(TensorError::Shape(format!(
                "{} labels for {} logit rows",
                labels.len(),
                n
            )));
        }
        let mut probs = vec![0.0f32; n * k];
        let mut loss = 0.0f32;
        for i in 0..n {
            if labels[i] >= k {
                return Err(TensorError::InvalidArgument(format!(
                    "label {} out of range for {} classes",
                    labels[i], k
                )));
            }
            let row = &v.data()[i * k..(i + 1) * k];
            if !row.iter().all(|x| x.is_finite()) {
                // surface divergence instead of laundering it through max()
                loss = f32::NAN;
                continue;
            }
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for j in 0..k {
                let e = (row[j] - max).exp();
                probs[i * k + j] = e;
                sum += e;
            }
            for j in 0..k {
                probs[i * k + j] /= sum;
            }
            loss -= probs[i * k + labels[i]].max(f32::MIN_POSITIVE).ln();
        }
        loss /= n as f32;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// 0.5 * ||x - target||^2 summed over all elements.
    pub fn euclidean_loss(&mut self, input: NodeId, target: &Tensor) -> Result<NodeId> {
        let v = &self.nodes[input.0].value;
        if v.shape() != target.shape() {
            return Err(TensorError::Shape(format!(
                "euclidean-loss shapes differ: {:?} vs {:?}",
                v.shape(),
                target.shape()
            )));
        }
        let loss = 0.5
            * v.data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f32>();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::EuclideanLoss {
                input,
                target: target.clone(),
            },
        ))
    }

    /// Reverse pass from a scalar loss node, seeding with 1.0. Populates
    /// gradients for every parameter and input on the path.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamSet) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::BackwardBeforeForward);
        }
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.backward_seeded(loss, &[1.0], params)
    }

    /// Reverse pass from an arbitrary node with a caller-supplied upstream
    /// gradient (used by losses whose gradient is shaped externally, e.g.
    /// the reweighted heatmap loss).
    pub fn backward_seeded(
        &mut self,
        node: NodeId,
        seed: &[f32],
        params: &mut ParamSet,
    ) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::BackwardBeforeForward);
        }
        if seed.len() != self.nodes[node.0].value.numel() {
            return Err(TensorError::Shape(format!(
                "seed gradient has {} elements, node has {}",
                seed.len(),
                self.nodes[node.0].value.numel()
            )));
        }
        self.grads = self.nodes.iter().map(|_| None).collect();
        self.grads[node.0] = Some(seed.to_vec());
        for idx in (0..=node.0).rev() {
            let Some(dout) = self.grads[idx].take() else {
                continue;
            };
            self.step_backward(idx, &dout, params)?;
            self.grads[idx] = Some(dout);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Vec<f32> {
        let numel = self.nodes[id.0].value.numel();
        self.grads[id.0].get_or_insert_with(|| vec![0.0; numel])
    }

    fn step_backward(&mut self, idx: usize, dout: &[f32], params: &mut ParamSet) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Input => Ok(()),
            Op::Layer {
                spec,
                param,
                input,
                ..
            } => {
                let spec = spec.clone();
                let param = param.clone();
                let input = *input;
                match &spec {
                    LayerSpec::Relu => {
                        let out = self.nodes[idx].value.clone();
                        let dx = self.grad_buf(input);
                        layers::relu_backward(&out, dout, dx);
                        Ok(())
                    }
                    LayerSpec::MaxPool { .. } => {
                        let Op::Layer {
                            cache: LayerCache::PoolArgmax(argmax),
                            ..
                        } = &self.nodes[idx].op
                        else {
                            unreachable!("pool recorded its argmax");
                        };
                        let argmax = argmax.clone();
                        let in_shape = self.nodes[input.0].value.shape().to_vec();
                        let out_shape = self.nodes[idx].value.shape().to_vec();
                        let dx = self.grad_buf(input);
                        layers::maxpool_backward(&in_shape, &out_shape, &argmax, dout, dx);
                        Ok(())
                    }
                    LayerSpec::Conv2d { .. } | LayerSpec::TransposedConv2d { .. } => {
                        let name = param.as_deref().expect("parametric layer recorded name");
                        let numel = self.nodes[input.0].value.numel();
                        let g = ConvGeom::for_conv(&spec, self.nodes[input.0].value.shape())?;
                        let is_conv = matches!(spec, LayerSpec::Conv2d { .. });
                        // frozen parameters receive no gradient at all
                        if !params.get(&format!("{name}.w"))?.frozen {
                            let mut dw = params.get_mut(&format!("{name}.w"))?.value.take_grad();
                            let mut db = params.get_mut(&format!("{name}.b"))?.value.take_grad();
                            if is_conv {
                                // borrow the forward's im2col buffer in place
                                let Op::Layer {
                                    cache: LayerCache::Cols(cols),
                                    ..
                                } = &self.nodes[idx].op
                                else {
                                    unreachable!("conv recorded its cols");
                                };
                                layers::conv2d_backward_params(&g, cols, dout, &mut dw, &mut db);
                            } else {
                                let x = &self.nodes[input.0].value;
                                layers::deconv2d_backward_params(&g, x, dout, &mut dw, &mut db);
                            }
                            params.get_mut(&format!("{name}.w"))?.value.put_grad(dw);
                            params.get_mut(&format!("{name}.b"))?.value.put_grad(db);
                        }
                        let mut dx = vec![0.0f32; numel];
                        {
                            let w = params.tensor(&format!("{name}.w"))?;
                            if is_conv {
                                layers::conv2d_backward_input(&g, w, dout, &mut dx);
                            } else {
                                layers::deconv2d_backward_input(&g, w, dout, &mut dx);
                            }
                        }
                        let dxbuf = self.grad_buf(input);
                        for (d, v) in dxbuf.iter_mut().zip(dx) {
                            *d += v;
                        }
                        Ok(())
                    }
                    LayerSpec::FullyConnected { in_dim, out_dim } => {
                        let name = param.as_deref().expect("parametric layer recorded name");
                        let n = self.nodes[input.0].value.shape()[0];
                        if !params.get(&format!("{name}.w"))?.frozen {
                            let mut dw = params.get_mut(&format!("{name}.w"))?.value.take_grad();
                            let mut db = params.get_mut(&format!("{name}.b"))?.value.take_grad();
                            {
                                // the fc kernels only read the flat view
                                let x = &self.nodes[input.0].value;
                                layers::fc_backward_params_flat(
                                    x.data(),
                                    n,
                                    *in_dim,
                                    *out_dim,
                                    dout,
                                    &mut dw,
                                    &mut db,
                                );
                            }
                            params.get_mut(&format!("{name}.w"))?.value.put_grad(dw);
                            params.get_mut(&format!("{name}.b"))?.value.put_grad(db);
                        }
                        let mut dx = vec![0.0f32; n * *in_dim];
                        {
                            let w = params.tensor(&format!("{name}.w"))?;
                            layers::fc_backward_input(w, n, *in_dim, *out_dim, dout, &mut dx);
                        }
                        let dxbuf = self.grad_buf(input);
                        for (d, v) in dxbuf.iter_mut().zip(dx) {
                            *d += v;
                        }
                        Ok(())
                    }
                    _ => unreachable!("multi-operand layer recorded as single-input"),
                }
            }
            Op::Concat { inputs } => {
                let inputs = inputs.clone();
                let n = self.nodes[idx].value.shape()[0];
                let total = self.nodes[idx].value.numel() / n;
                let mut offset = 0usize;
                for id in inputs {
                    let d = self.nodes[id.0].value.numel() / n;
                    let dx = self.grad_buf(id);
                    for ni in 0..n {
                        for i in 0..d {
                            dx[ni * d + i] += dout[ni * total + offset + i];
                        }
                    }
                    offset += d;
                }
                Ok(())
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let logits = *logits;
                let labels = labels.clone();
                let probs = probs.clone();
                let n = labels.len();
                let k = probs.len() / n;
                let scale = dout[0] / n as f32;
                let dx = self.grad_buf(logits);
                for i in 0..n {
                    for j in 0..k {
                        let indicator = if j == labels[i] { 1.0 } else { 0.0 };
                        dx[i * k + j] += scale * (probs[i * k + j] - indicator);
                    }
                }
                Ok(())
            }
            Op::EuclideanLoss { input, target } => {
                let input = *input;
                let target = target.clone();
                let x = self.nodes[input.0].value.clone();
                let scale = dout[0];
                let dx = self.grad_buf(input);
                for i in 0..x.numel() {
                    dx[i] += scale * (x.data()[i] - target.data()[i]);
                }
                Ok(())
            }
        }
    }
}

fn layer_params<'p>(
    spec: &LayerSpec,
    params: &'p ParamSet,
    name: Option<&str>,
) -> Result<(&'p Tensor, &'p Tensor)> {
    let name = name.ok_or_else(|| {
        TensorError::InvalidArgument(format!("{spec:?} is parametric and needs a parameter name"))
    })?;
    let w = params.tensor(&format!("{name}.w"))?;
    let b = params.tensor(&format!("{name}.b"))?;
    if let Some((w_shape, b_shape)) = spec.param_shapes() {
        if w.shape() != w_shape.as_slice() {
            return Err(TensorError::ParamShape {
                name: format!("{name}.w"),
                expected: w_shape,
                actual: w.shape().to_vec(),
            });
        }
        if b.shape() != b_shape.as_slice() {
            return Err(TensorError::ParamShape {
                name: format!("{name}.b"),
                expected: b_shape,
                actual: b.shape().to_vec(),
            });
        }
    }
    Ok((w, b))
}

/// Stateless single-layer forward: builds a one-node tape internally.
pub fn forward(
    spec: &LayerSpec,
    params: &ParamSet,
    param: Option<&str>,
    input: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.input(input.clone())?;
    let y = tape.layer(spec, params, param, x)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_ce_uniform_logits_is_ln2() {
        let mut tape = Tape::new();
        let logits = tape
            .input(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap())
            .unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        let v = tape.value(loss).data()[0];
        assert!((v - std::f32::consts::LN_2).abs() < 1e-6, "loss={v}");
    }

    #[test]
    fn euclidean_loss_at_minimum_has_zero_gradient() {
        let mut params = ParamSet::new();
        let mut tape = Tape::new();
        let t = Tensor::from_vec(&[2, 3], vec![1.0, -1.0, 2.0, 0.0, 0.5, 3.0]).unwrap();
        let x = tape.input(t.clone()).unwrap();
        let loss = tape.euclidean_loss(x, &t).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
        tape.backward(loss, &mut params).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let mut params = ParamSet::new();
        let mut tape = Tape::new();
        let err = tape.backward(NodeId(0), &mut params).unwrap_err();
        assert!(matches!(err, TensorError::BackwardBeforeForward));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut params = ParamSet::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 2])).unwrap();
        let err = tape.backward(x, &mut params).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss(_)));
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut tape = Tape::new();
        let mut t = Tensor::zeros(&[3]);
        t.data_mut()[1] = f32::INFINITY;
        assert!(matches!(
            tape.input(t),
            Err(TensorError::NonFinite(_))
        ));
    }

    #[test]
    fn shared_fc_layer_sums_gradients_of_both_uses() {
        // Two forward passes through the same fully-connected layer; the
        // summed loss must produce a parameter gradient equal to the sum of
        // the two single-pass gradients.
        let spec = LayerSpec::FullyConnected { in_dim: 4, out_dim: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamSet::new();
        params.init_layer("fc", &spec, &mut rng);

        let xa = Tensor::from_vec(&[1, 4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let xb = Tensor::from_vec(&[1, 4], vec![-0.75, 0.1, 0.0, 1.5]).unwrap();
        let target = Tensor::zeros(&[1, 3]);

        let grad_for = |inputs: &[&Tensor], params: &mut ParamSet| -> Vec<f32> {
            params.zero_grads();
            let mut tape = Tape::new();
            let mut losses = Vec::new();
            for x in inputs {
                let xi = tape.input((*x).clone()).unwrap();
                let y = tape.layer(&spec, params, Some("fc"), xi).unwrap();
                losses.push(tape.euclidean_loss(y, &target).unwrap());
            }
            // sum the single-sample losses by seeding each backward pass
            for l in losses {
                tape.backward_seeded(l, &[1.0], params).unwrap();
            }
            params.tensor("fc.w").unwrap().grad().unwrap().to_vec()
        };

        let ga = grad_for(&[&xa], &mut params);
        let gb = grad_for(&[&xb], &mut params);
        let gab = grad_for(&[&xa, &xb], &mut params);
        for i in 0..ga.len() {
            let sum = ga[i] + gb[i];
            let rel = (gab[i] - sum).abs() / sum.abs().max(1e-6);
            assert!(rel < 1e-6, "at {i}: {} vs {}", gab[i], sum);
        }
    }

    #[test]
    fn fc_grad_w_is_outer_product_for_sum_loss() {
        // y = Wx, loss = sum(y): grad W = outer(1, x)
        let spec = LayerSpec::FullyConnected { in_dim: 3, out_dim: 2 };
        let mut params = ParamSet::new();
        params.insert("fc.w", Tensor::zeros(&[2, 3]));
        params.insert("fc.b", Tensor::zeros(&[2]));
        let mut tape = Tape::new();
        let x = tape
            .input(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let y = tape.layer(&spec, &params, Some("fc"), x).unwrap();
        tape.backward_seeded(y, &[1.0, 1.0], &mut params).unwrap();
        let gw = params.tensor("fc.w").unwrap().grad().unwrap();
        assert_eq!(gw, &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }
}
