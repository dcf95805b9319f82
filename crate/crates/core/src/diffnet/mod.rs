//! Small fixed-architecture 3D networks with hand-derived gradients and Adam.
//!
//! A [`Network`] is a static [`Graph`] of layers plus a flat parameter vector.
//! Inference is a pure function of the parameters, so one network can serve
//! many threads; training accumulates per-sample gradients computed from
//! [`Network::trace`] / [`Network::backprop`] and applies [`Network::adam_step`].

mod arch;
mod checkpoint;
mod gemm;
mod graph;
pub mod layers;
mod tensor;

pub use arch::{ArchKind, ArchSpec};
pub use checkpoint::{read_net, write_net, NetCodec};
pub use graph::{Graph, GraphBuilder, Node, Op, Tape};
pub use tensor::TensorGrid;

use crate::error::{Error, Result};

/// Scalar type of the network core.
#[cfg(not(feature = "double"))]
pub type Real = f32;
#[cfg(feature = "double")]
pub type Real = f64;

pub const TIME_EMBED_DIM: usize = 64;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Iterations (codec/denoiser) or epochs (classifier).
    pub budget: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, batch_size: 4, budget: 100, patience: 5, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::InvalidArgument(
                "train config needs lr > 0, batch_size >= 1 and patience >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Real>,
    pub v: Vec<Real>,
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: ArchSpec,
    graph: Graph,
    params: Vec<Real>,
    grads: Vec<Real>,
    adam: AdamState,
    tape: Option<Tape>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.graph == other.graph && self.params == other.params && self.adam == other.adam
    }
}

impl Network {
    /// Build from a graph with seeded random initialisation.
    pub fn from_graph(spec: ArchSpec, graph: Graph, seed: u64) -> Result<Self> {
        graph.validate()?;
        let params = graph::init_params(&graph, &mut crate::rng::seeded(seed));
        Self::with_params(spec, graph, params)
    }

    pub fn with_params(spec: ArchSpec, graph: Graph, params: Vec<Real>) -> Result<Self> {
        graph.validate()?;
        let n = graph.param_count();
        if params.len() != n {
            return Err(Error::Shape(format!("expected {n} parameters, got {}", params.len())));
        }
        Ok(Self {
            spec,
            graph,
            grads: vec![0.0; n],
            adam: AdamState::zeros(n),
            params,
            tape: None,
        })
    }

    pub fn build(spec: ArchSpec, seed: u64) -> Result<Self> {
        let graph = spec.graph()?;
        Self::from_graph(spec, graph, seed)
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn params(&self) -> &[Real] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Real] {
        &mut self.params
    }

    pub fn grads(&self) -> &[Real] {
        &self.grads
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn set_adam(&mut self, adam: AdamState) -> Result<()> {
        if adam.m.len() != self.params.len() || adam.v.len() != self.params.len() {
            return Err(Error::Shape("adam state size mismatch".into()));
        }
        self.adam = adam;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn in_channels(&self) -> usize {
        self.graph.in_channels
    }

    /// Pure inference.
    pub fn forward(&self, input: &TensorGrid, t: Option<usize>) -> Result<TensorGrid> {
        Ok(self.trace(input, t)?.into_output())
    }

    /// Per-sample inference over a batch; samples never interact.
    pub fn forward_batch(&self, inputs: &[TensorGrid], t: Option<usize>) -> Result<Vec<TensorGrid>> {
        crate::par::map(inputs, |x| self.forward(x, t)).into_iter().collect()
    }

    /// Forward pass retaining activations for [`Network::backprop`].
    pub fn trace(&self, input: &TensorGrid, t: Option<usize>) -> Result<Tape> {
        graph::trace(&self.graph, &self.params, input, t)
    }

    /// Reverse pass for a retained tape; parameter gradients are added to `grads`.
    pub fn backprop(&self, tape: &Tape, out_grad: &TensorGrid, grads: &mut [Real]) -> Result<TensorGrid> {
        if grads.len() != self.params.len() {
            return Err(Error::Shape("gradient buffer size mismatch".into()));
        }
        graph::backprop(&self.graph, &self.params, tape, out_grad, grads)
    }

    /// Forward pass that keeps its activations inside the network for a
    /// subsequent [`Network::backward`].
    pub fn forward_train(&mut self, input: &TensorGrid, t: Option<usize>) -> Result<TensorGrid> {
        let tape = self.trace(input, t)?;
        let out = tape.output().clone();
        self.tape = Some(tape);
        Ok(out)
    }

    /// Accumulate parameter gradients for the retained forward pass and return
    /// the input gradient. The tape stays, so the call is repeatable.
    pub fn backward(&mut self, out_grad: &TensorGrid) -> Result<TensorGrid> {
        let tape = self.tape.take().ok_or_else(|| Error::State("backward called without a retained forward pass".into()))?;
        let mut grads = std::mem::take(&mut self.grads);
        let r = graph::backprop(&self.graph, &self.params, &tape, out_grad, &mut grads);
        self.grads = grads;
        self.tape = Some(tape);
        r
    }

    pub fn accumulate(&mut self, g: &[Real]) {
        self.grads.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }

    pub fn scale_grads(&mut self, k: Real) {
        self.grads.iter_mut().for_each(|g| *g *= k);
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// One Adam update from the accumulated gradients, which are then cleared.
    pub fn adam_step(&mut self, cfg: &TrainConfig) {
        adam_update(&mut self.params, &mut self.grads, &mut self.adam, cfg.learning_rate);
        self.tape = None;
    }
}

/// Adam update of `params` from `grads` (cleared afterwards). Shared by
/// networks and by parameter blocks that live outside a graph (codebooks).
pub fn adam_update(params: &mut [Real], grads: &mut [Real], state: &mut AdamState, lr: f64) {
    assert!(params.len() == grads.len() && state.m.len() == params.len() && state.v.len() == params.len());
    state.step += 1;
    let t = state.step.min(i32::MAX as u64) as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads.iter_mut()).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        let gf = *g as f64;
        let mf = ADAM_BETA1 * *m as f64 + (1.0 - ADAM_BETA1) * gf;
        let vf = ADAM_BETA2 * *v as f64 + (1.0 - ADAM_BETA2) * gf * gf;
        *m = mf as Real;
        *v = vf as Real;
        let update = lr * (mf / bc1) / ((vf / bc2).sqrt() + ADAM_EPS);
        *p = (*p as f64 - update) as Real;
        *g = 0.0;
    }
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// Elementwise sum of per-sample gradient buffers.
pub fn sum_grads(parts: Vec<Vec<Real>>, n: usize) -> Vec<Real> {
    let mut acc = vec![0.0 as Real; n];
    for g in parts {
        acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    acc
}

#[cfg(test)]
mod tests;
