use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, PaddingMode, Tensor};

use super::params::ModelParams;

/// Handle to a node recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A scalar objective over one tensor, evaluated together with its
/// gradient.
pub trait ScalarLoss: Send + Sync {
    fn evaluate(&self, input: &Tensor) -> Result<(f64, Vec<f64>)>;
}

#[derive(Clone)]
enum Op {
    Constant,
    Param(String),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        pad: PaddingMode,
        cols: Vec<f64>,
    },
    LeakyRelu {
        input: NodeId,
        slope: f64,
    },
    Axpy {
        a: f64,
        x: NodeId,
        y: NodeId,
    },
    AvgPool2 {
        input: NodeId,
    },
    SumSquares {
        input: NodeId,
    },
    Loss {
        input: NodeId,
        loss: Arc<dyn ScalarLoss>,
        grad: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Axpy { .. } => "axpy",
            Op::AvgPool2 { .. } => "avg_pool2",
            Op::SumSquares { .. } => "sum_squares",
            Op::Loss { .. } => "loss",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of a forward computation. Nodes only reference
/// earlier nodes, so the graph is acyclic by construction and the reverse
/// sweep is a single backwards pass over the node list.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("node {} not on this tape", id.0)))
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op_kind(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.kind()
    }

    /// Records a constant input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    /// Records a parameter leaf. Reuse the returned id wherever the
    /// parameter appears so its gradient accumulates across every use.
    pub fn param(&mut self, params: &ModelParams, name: &str) -> Result<NodeId> {
        let value = params.require(name)?.clone();
        Ok(self.push(Op::Param(name.to_string()), value))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        pad: PaddingMode,
    ) -> Result<NodeId> {
        self.check(input)?;
        self.check(weight)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        let (value, cols) = tensor::conv2d_with_cols(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            pad,
        )?;
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
                cols,
            },
            value,
        ))
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> Result<NodeId> {
        self.check(input)?;
        let value = tensor::leaky_relu(self.value(input), slope)?;
        Ok(self.push(Op::LeakyRelu { input, slope }, value))
    }

    /// `a * x + y`.
    pub fn axpy(&mut self, a: f64, x: NodeId, y: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(y)?;
        let value = tensor::axpy(a, self.value(x), self.value(y))?;
        Ok(self.push(Op::Axpy { a, x, y }, value))
    }

    pub fn avg_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let value = tensor::avg_pool2(self.value(input))?;
        Ok(self.push(Op::AvgPool2 { input }, value))
    }

    /// `Σ x²` as a one-element tensor.
    pub fn sum_squares(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let s = self.value(input).data().iter().map(|v| v * v).sum();
        Ok(self.push(Op::SumSquares { input }, Tensor::new(vec![1], vec![s])?))
    }

    pub fn loss(&mut self, input: NodeId, loss: Arc<dyn ScalarLoss>) -> Result<NodeId> {
        self.check(input)?;
        let (value, grad) = loss.evaluate(self.value(input))?;
        if !value.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        Ok(self.push(
            Op::Loss { input, loss, grad },
            Tensor::new(vec![1], vec![value])?,
        ))
    }

    /// Recomputes every node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Constant | Op::Param(_) => node.value.clone(),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    pad,
                    ..
                } => {
                    tensor::conv2d_with_cols(
                        &values[input.0],
                        &values[weight.0],
                        bias.map(|b| &values[b.0]),
                        *pad,
                    )?
                    .0
                }
                Op::LeakyRelu { input, slope } => tensor::leaky_relu(&values[input.0], *slope)?,
                Op::Axpy { a, x, y } => tensor::axpy(*a, &values[x.0], &values[y.0])?,
                Op::AvgPool2 { input } => tensor::avg_pool2(&values[input.0])?,
                Op::SumSquares { input } => {
                    let s = values[input.0].data().iter().map(|v| v * v).sum();
                    Tensor::new(vec![1], vec![s])?
                }
                Op::Loss { input, loss, .. } => {
                    Tensor::new(vec![1], vec![loss.evaluate(&values[input.0])?.0])?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse sweep from a scalar node. Returns one gradient per entry of
    /// `params`; parameters the loss does not touch get zeros.
    pub fn backward(&self, loss: NodeId, params: &ModelParams) -> Result<ModelParams> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, node has shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut grads = params.zeros_like();

        fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
            match slot {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
                None => *slot = Some(g.to_vec()),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => {
                    let t = grads.require(name)?;
                    let summed: Vec<f64> = t.data().iter().zip(&g).map(|(a, b)| a + b).collect();
                    let shape = t.shape().to_vec();
                    grads.set(name, Tensor::new(shape, summed)?)?;
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    pad,
                    cols,
                } => {
                    let geom = ConvGeometry::new(self.value(*input), self.value(*weight))?;
                    let need_input = !matches!(self.nodes[input.0].op, Op::Constant);
                    let cg = tensor::conv2d_backward(
                        cols,
                        self.value(*weight),
                        &geom,
                        &g,
                        *pad,
                        need_input,
                    );
                    if need_input {
                        accumulate(&mut adj[input.0], &cg.input);
                    }
                    accumulate(&mut adj[weight.0], &cg.weights);
                    if let Some(b) = bias {
                        accumulate(&mut adj[b.0], &cg.bias);
                    }
                }
                Op::LeakyRelu { input, slope } => {
                    let x = self.value(*input).data();
                    let gi: Vec<f64> = x
                        .iter()
                        .zip(&g)
                        .map(|(&xv, &gv)| if xv > 0.0 { gv } else { slope * gv })
                        .collect();
                    accumulate(&mut adj[input.0], &gi);
                }
                Op::Axpy { a, x, y } => {
                    let gx: Vec<f64> = g.iter().map(|v| a * v).collect();
                    accumulate(&mut adj[x.0], &gx);
                    accumulate(&mut adj[y.0], &g);
                }
                Op::AvgPool2 { input } => {
                    let (c, h, w) = self.value(*input).dims3()?;
                    accumulate(&mut adj[input.0], &tensor::avg_pool2_backward(&g, c, h, w));
                }
                Op::SumSquares { input } => {
                    let gi: Vec<f64> =
                        self.value(*input).data().iter().map(|v| 2.0 * v * g[0]).collect();
                    accumulate(&mut adj[input.0], &gi);
                }
                Op::Loss { input, grad, .. } => {
                    let gi: Vec<f64> = grad.iter().map(|v| v * g[0]).collect();
                    accumulate(&mut adj[input.0], &gi);
                }
            }
        }
        Ok(grads)
    }

    /// Activation sign pattern of every leaky node's input, used to detect
    /// finite-difference probes that straddle a kink.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::LeakyRelu { input, .. } = node.op {
                out.extend(self.value(input).data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Smallest absolute pre-activation across all leaky nodes.
    pub fn min_kink_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for node in &self.nodes {
            if let Op::LeakyRelu { input, .. } = node.op {
                for &v in self.value(input).data() {
                    best = best.min(v.abs());
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traingraph::finite_diff_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn quadratic_gradient_is_two_p() {
        let mut params = ModelParams::new();
        let p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        params.insert("p", p.clone()).unwrap();
        params.insert("unused", Tensor::ones(&[2]).unwrap()).unwrap();
        let mut tape = GradTape::new();
        let node = tape.param(&params, "p").unwrap();
        let loss = tape.sum_squares(node).unwrap();
        let g = tape.backward(loss, &params).unwrap();
        assert_eq!(g.get("p").unwrap().data(), &[2.0, -4.0, 1.0]);
        assert_eq!(g.get("unused").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let params = ModelParams::new();
        let mut tape = GradTape::new();
        let c = tape.constant(Tensor::ones(&[2]).unwrap());
        assert!(tape.backward(c, &params).is_err());
    }

    fn small_network(params: &ModelParams, x: &Tensor, tape: &mut GradTape) -> Result<NodeId> {
        let xin = tape.constant(x.clone());
        let w1 = tape.param(params, "w1")?;
        let b1 = tape.param(params, "b1")?;
        let w2 = tape.param(params, "w2")?;
        let h = tape.conv2d(xin, w1, Some(b1), PaddingMode::Zero)?;
        let a = tape.leaky_relu(h, 0.1)?;
        let p = tape.avg_pool2(a)?;
        let y = tape.conv2d(p, w2, None, PaddingMode::Circular)?;
        let r = tape.axpy(0.7, y, p)?;
        tape.sum_squares(r)
    }

    fn build_params(rng: &mut ChaCha8Rng) -> ModelParams {
        let mut params = ModelParams::new();
        params.insert("w1", random(&[3, 2, 3, 3], rng)).unwrap();
        params.insert("b1", random(&[3], rng)).unwrap();
        params.insert("w2", random(&[3, 3, 3, 3], rng)).unwrap();
        params
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let params = build_params(&mut rng);
        let x = random(&[2, 6, 6], &mut rng);
        let mut tape = GradTape::new();
        let loss = small_network(&params, &x, &mut tape).unwrap();
        let grads = tape.backward(loss, &params).unwrap();
        let pattern = tape.kink_pattern();
        let eval = |p: &ModelParams| -> Result<f64> {
            let mut t = GradTape::new();
            let l = small_network(p, &x, &mut t)?;
            Ok(t.value(l).data()[0])
        };
        let h = 1e-4;
        let mut checked = 0;
        for (name, t) in params.iter() {
            for idx in 0..t.len() {
                // Skip probes whose perturbation flips an activation.
                let flips = [h, -h].iter().any(|&d| {
                    let p = params.perturbed(name, idx, d).unwrap();
                    let mut tp = GradTape::new();
                    small_network(&p, &x, &mut tp).unwrap();
                    tp.kink_pattern() != pattern
                });
                if flips {
                    continue;
                }
                let fd = finite_diff_grad(eval, &params, name, idx, h).unwrap();
                let ad = grads.get(name).unwrap().data()[idx];
                let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{idx}]: fd {fd} ad {ad}");
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn replay_reproduces_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let params = build_params(&mut rng);
        let x = random(&[2, 6, 6], &mut rng);
        let mut tape = GradTape::new();
        small_network(&params, &x, &mut tape).unwrap();
        let replayed = tape.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v, tape.value(NodeId(i)));
        }
    }

    #[test]
    fn shared_parameter_accumulates() {
        // loss = Σ (w ⊗ (w ⊗ x))² with a 1x1 scalar filter: d/dw = 4 w³ Σx².
        let mut params = ModelParams::new();
        params.insert("w", Tensor::full(&[1, 1, 1, 1], 0.5).unwrap()).unwrap();
        let x = Tensor::from_fn(&[1, 2, 2], |i| i as f64).unwrap();
        let mut tape = GradTape::new();
        let xin = tape.constant(x.clone());
        let w = tape.param(&params, "w").unwrap();
        let a = tape.conv2d(xin, w, None, PaddingMode::Zero).unwrap();
        let b = tape.conv2d(a, w, None, PaddingMode::Zero).unwrap();
        let l = tape.sum_squares(b).unwrap();
        let g = tape.backward(l, &params).unwrap();
        let sx2: f64 = x.data().iter().map(|v| v * v).sum();
        assert!((g.get("w").unwrap().data()[0] - 4.0 * 0.125 * sx2).abs() < 1e-12);
    }
}
