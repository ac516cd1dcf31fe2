use rand::Rng;

use super::AgentError;
use crate::io::NamedArray;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerShape {
    inputs: usize,
    outputs: usize,
    /// Offset of the row-major weights in the flat parameter vector; the
    /// bias follows directly.
    offset: usize,
}

impl LayerShape {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    fn bias(&self) -> std::ops::Range<usize> {
        let b = self.offset + self.inputs * self.outputs;
        b..b + self.outputs
    }

    fn end(&self) -> usize {
        self.bias().end
    }
}

/// Fully connected trunk with ReLU activations feeding a scalar value head
/// and a per-action advantage head, combined as `V + A - mean(A)`.
///
/// All parameters live in one flat vector so that optimizers, target syncs
/// and finite-difference checks can treat the network as a point in R^n.
#[derive(Debug, Clone, PartialEq)]
pub struct DuelingQNet {
    trunk: Vec<LayerShape>,
    value: LayerShape,
    advantage: LayerShape,
    params: Vec<f64>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input followed by each trunk layer's post-ReLU output.
    activations: Vec<Vec<f64>>,
    value: f64,
    advantage: Vec<f64>,
}

impl ForwardCache {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn advantage(&self) -> &[f64] {
        &self.advantage
    }

    pub fn q_values(&self) -> Vec<f64> {
        dueling_combine(self.value, &self.advantage)
    }
}

/// Q(a) = V + A(a) - mean(A).
pub fn dueling_combine(value: f64, advantage: &[f64]) -> Vec<f64> {
    let mean = advantage.iter().sum::<f64>() / advantage.len() as f64;
    advantage.iter().map(|a| value + (a - mean)).collect()
}

fn dense(params: &[f64], l: &LayerShape, x: &[f64]) -> Vec<f64> {
    let w = &params[l.weights()];
    let b = &params[l.bias()];
    (0..l.outputs)
        .map(|o| {
            let row = &w[o * l.inputs..(o + 1) * l.inputs];
            b[o] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
        })
        .collect()
}

/// Accumulates the parameter gradient of a dense layer and returns the
/// gradient with respect to its input.
fn dense_backward(
    params: &[f64],
    grad: &mut [f64],
    l: &LayerShape,
    x: &[f64],
    dy: &[f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; l.inputs];
    let w = &params[l.weights()];
    let wo = l.weights().start;
    let bo = l.bias().start;
    for (o, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        grad[bo + o] += d;
        let row = &w[o * l.inputs..(o + 1) * l.inputs];
        let grow = &mut grad[wo + o * l.inputs..wo + (o + 1) * l.inputs];
        for i in 0..l.inputs {
            grow[i] += d * x[i];
            dx[i] += d * row[i];
        }
    }
    dx
}

impl DuelingQNet {
    /// Glorot-uniform weights and zero biases drawn from `seed`.
    pub fn new(inputs: usize, hidden: &[usize], actions: usize, seed: u64) -> Self {
        let mut net = Self::zeros(inputs, hidden, actions);
        let mut rng = seed::rng(seed);
        let layers: Vec<LayerShape> = net
            .trunk
            .iter()
            .chain([&net.value, &net.advantage])
            .copied()
            .collect();
        for l in layers {
            let limit = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
            for p in &mut net.params[l.weights()] {
                *p = rng.gen_range(-limit..=limit);
            }
        }
        net
    }

    pub fn zeros(inputs: usize, hidden: &[usize], actions: usize) -> Self {
        let mut offset = 0;
        let mut prev = inputs;
        let mut trunk = Vec::with_capacity(hidden.len());
        for &h in hidden {
            let l = LayerShape {
                inputs: prev,
                outputs: h,
                offset,
            };
            offset = l.end();
            prev = h;
            trunk.push(l);
        }
        let value = LayerShape {
            inputs: prev,
            outputs: 1,
            offset,
        };
        let advantage = LayerShape {
            inputs: prev,
            outputs: actions,
            offset: value.end(),
        };
        let params = vec![0.0; advantage.end()];
        Self {
            trunk,
            value,
            advantage,
            params,
        }
    }

    pub fn input_len(&self) -> usize {
        self.trunk.first().unwrap_or(&self.value).inputs
    }

    pub fn actions(&self) -> usize {
        self.advantage.outputs
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.trunk.iter().map(|l| l.outputs).collect()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Range of the advantage-head bias inside [`Self::params`].
    pub fn advantage_bias_range(&self) -> std::ops::Range<usize> {
        self.advantage.bias()
    }

    fn check_input(&self, state: &[f64]) -> Result<(), AgentError> {
        if state.len() != self.input_len() {
            return Err(AgentError::DimensionMismatch {
                expected: self.input_len(),
                got: state.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, state: &[f64]) -> Result<ForwardCache, AgentError> {
        self.check_input(state)?;
        let mut activations = vec![state.to_vec()];
        for l in &self.trunk {
            let mut h = dense(&self.params, l, activations.last().unwrap());
            for v in &mut h {
                *v = v.max(0.0);
            }
            activations.push(h);
        }
        let top = activations.last().unwrap();
        let value = dense(&self.params, &self.value, top)[0];
        let advantage = dense(&self.params, &self.advantage, top);
        Ok(ForwardCache {
            activations,
            value,
            advantage,
        })
    }

    pub fn q_values(&self, state: &[f64]) -> Result<Vec<f64>, AgentError> {
        Ok(self.forward(state)?.q_values())
    }

    /// Adds to `grad` the gradient of a loss whose derivative with respect to
    /// the Q outputs of this forward pass is `dq`.
    pub fn backward(&self, cache: &ForwardCache, dq: &[f64], grad: &mut [f64]) {
        let n = dq.len() as f64;
        let total: f64 = dq.iter().sum();
        let dv = [total];
        let da: Vec<f64> = dq.iter().map(|g| g - total / n).collect();
        let top = cache.activations.last().unwrap();
        let mut dh = dense_backward(&self.params, grad, &self.value, top, &dv);
        let dh_adv = dense_backward(&self.params, grad, &self.advantage, top, &da);
        for (a, b) in dh.iter_mut().zip(dh_adv) {
            *a += b;
        }
        for (i, l) in self.trunk.iter().enumerate().rev() {
            let out = &cache.activations[i + 1];
            for (d, &o) in dh.iter_mut().zip(out) {
                if o <= 0.0 {
                    *d = 0.0;
                }
            }
            dh = dense_backward(&self.params, grad, l, &cache.activations[i], &dh);
        }
    }

    /// Copies another network's parameters bit for bit.
    pub fn copy_from(&mut self, other: &Self) -> Result<(), AgentError> {
        if self.trunk != other.trunk
            || self.value != other.value
            || self.advantage != other.advantage
        {
            return Err(AgentError::ShapeMismatch);
        }
        self.params.copy_from_slice(&other.params);
        Ok(())
    }

    pub fn to_arrays(&self, prefix: &str) -> Vec<NamedArray> {
        let mut out = Vec::new();
        let named = self
            .trunk
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("{prefix}trunk{i}"), l))
            .chain([
                (format!("{prefix}value"), &self.value),
                (format!("{prefix}advantage"), &self.advantage),
            ]);
        for (name, l) in named {
            out.push(NamedArray::matrix(
                &format!("{name}.weight"),
                l.outputs,
                l.inputs,
                self.params[l.weights()].iter().map(|&v| v as f32).collect(),
            ));
            out.push(NamedArray::vector(
                &format!("{name}.bias"),
                self.params[l.bias()].iter().map(|&v| v as f32).collect(),
            ));
        }
        out
    }

    /// Fills this network's parameters from arrays written by
    /// [`Self::to_arrays`] with the same prefix and shape.
    pub fn load_arrays(&mut self, arrays: &[NamedArray], prefix: &str) -> Result<(), AgentError> {
        let layers: Vec<(String, LayerShape)> = self
            .trunk
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("{prefix}trunk{i}"), *l))
            .chain([
                (format!("{prefix}value"), self.value),
                (format!("{prefix}advantage"), self.advantage),
            ])
            .collect();
        for (name, l) in layers {
            let w = crate::io::find_array(arrays, &format!("{name}.weight"))?;
            let b = crate::io::find_array(arrays, &format!("{name}.bias"))?;
            if w.values.len() != l.inputs * l.outputs || b.values.len() != l.outputs {
                return Err(AgentError::ShapeMismatch);
            }
            for (p, &v) in self.params[l.weights()].iter_mut().zip(&w.values) {
                *p = v as f64;
            }
            for (p, &v) in self.params[l.bias()].iter_mut().zip(&b.values) {
                *p = v as f64;
            }
        }
        Ok(())
    }
}
