//! Static layer graphs: a topologically ordered node list where each node reads
//! earlier nodes. Skip connections are `Add` nodes.

use super::layers::{self, GroupStats};
use super::tensor::TensorGrid;
use super::{Real, TIME_EMBED_DIM};
use crate::error::{Error, Result};
use crate::rng::Rng;
use rand::Rng as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Input,
    /// Replicate-padded 3D convolution, kernel 1 or 3, stride 1 or 2.
    Conv { cin: usize, cout: usize, kernel: usize, stride: usize },
    GroupNorm { channels: usize, groups: usize },
    Silu,
    /// Nearest-neighbour x2 upsampling.
    Upsample,
    Add,
    /// Adds a learned projection of the timestep embedding to each channel.
    TimeBias { channels: usize },
    GlobalPool,
    Dense { inputs: usize, outputs: usize },
}

impl Op {
    pub fn param_count(&self) -> usize {
        match *self {
            Op::Conv { cin, cout, kernel, .. } => cout * cin * kernel.pow(3) + cout,
            Op::GroupNorm { channels, .. } => 2 * channels,
            Op::TimeBias { channels } => channels * TIME_EMBED_DIM + channels,
            Op::Dense { inputs, outputs } => outputs * inputs + outputs,
            _ => 0,
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Input => 0,
            Op::Add => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<usize>,
    pub param_offset: usize,
    /// Initialise this node's weights to zero (output heads).
    pub zero_init: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    pub in_channels: usize,
    pub nodes: Vec<Node>,
}

impl Graph {
    pub fn param_count(&self) -> usize {
        self.nodes.iter().map(|n| n.op.param_count()).sum()
    }

    pub fn needs_time(&self) -> bool {
        self.nodes.iter().any(|n| matches!(n.op, Op::TimeBias { .. }))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("graph: {m}")));
        if self.nodes.is_empty() || self.nodes[0].op != Op::Input {
            return bad("node 0 must be the input".into());
        }
        let mut offset = 0;
        for (i, n) in self.nodes.iter().enumerate() {
            if n.inputs.len() != n.op.arity() || n.inputs.iter().any(|&j| j >= i) {
                return bad(format!("node {i} has invalid inputs {:?}", n.inputs));
            }
            if i > 0 && n.op == Op::Input {
                return bad(format!("node {i}: only node 0 may be an input"));
            }
            if n.param_offset != offset {
                return bad(format!("node {i} parameter offset mismatch"));
            }
            match n.op {
                Op::Conv { cin, cout, kernel, stride } => {
                    if cin == 0 || cout == 0 || !matches!(kernel, 1 | 3) || !matches!(stride, 1 | 2) {
                        return bad(format!("node {i}: unsupported conv {:?}", n.op));
                    }
                }
                Op::GroupNorm { channels, groups } => {
                    if groups == 0 || channels % groups != 0 {
                        return bad(format!("node {i}: groups must divide channels"));
                    }
                }
                _ => {}
            }
            offset += n.op.param_count();
        }
        Ok(())
    }
}

/// Incremental graph construction. Each method returns the new node id.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    graph: Graph,
    offset: usize,
    channels: Vec<usize>,
}

impl GraphBuilder {
    pub fn new(in_channels: usize) -> Self {
        let input = Node { op: Op::Input, inputs: vec![], param_offset: 0, zero_init: false };
        Self { graph: Graph { in_channels, nodes: vec![input] }, offset: 0, channels: vec![in_channels] }
    }

    pub fn input(&self) -> usize {
        0
    }

    pub fn channels(&self, id: usize) -> usize {
        self.channels[id]
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, channels: usize, zero_init: bool) -> usize {
        let node = Node { op, inputs, param_offset: self.offset, zero_init };
        self.offset += op.param_count();
        self.graph.nodes.push(node);
        self.channels.push(channels);
        self.graph.nodes.len() - 1
    }

    pub fn conv(&mut self, x: usize, cout: usize, kernel: usize, stride: usize) -> usize {
        let cin = self.channels[x];
        self.push(Op::Conv { cin, cout, kernel, stride }, vec![x], cout, false)
    }

    pub fn conv_zero(&mut self, x: usize, cout: usize, kernel: usize) -> usize {
        let cin = self.channels[x];
        self.push(Op::Conv { cin, cout, kernel, stride: 1 }, vec![x], cout, true)
    }

    pub fn group_norm(&mut self, x: usize) -> usize {
        let c = self.channels[x];
        self.push(Op::GroupNorm { channels: c, groups: layers::default_groups(c) }, vec![x], c, false)
    }

    pub fn silu(&mut self, x: usize) -> usize {
        let c = self.channels[x];
        self.push(Op::Silu, vec![x], c, false)
    }

    pub fn upsample(&mut self, x: usize) -> usize {
        let c = self.channels[x];
        self.push(Op::Upsample, vec![x], c, false)
    }

    pub fn add(&mut self, a: usize, b: usize) -> usize {
        let c = self.channels[a];
        assert_eq!(c, self.channels[b], "add: channel mismatch");
        self.push(Op::Add, vec![a, b], c, false)
    }

    pub fn time_bias(&mut self, x: usize) -> usize {
        let c = self.channels[x];
        self.push(Op::TimeBias { channels: c }, vec![x], c, false)
    }

    pub fn global_pool(&mut self, x: usize) -> usize {
        let c = self.channels[x];
        self.push(Op::GlobalPool, vec![x], c, false)
    }

    pub fn dense(&mut self, x: usize, outputs: usize, zero_init: bool) -> usize {
        let inputs = self.channels[x];
        self.push(Op::Dense { inputs, outputs }, vec![x], outputs, zero_init)
    }

    /// GroupNorm then SiLU.
    pub fn norm_act(&mut self, x: usize) -> usize {
        let n = self.group_norm(x);
        self.silu(n)
    }

    /// Residual block: `x + conv(act(time(norm(conv(act(norm(x)))))))`.
    /// The time shift sits after the second norm so normalization cannot cancel it.
    pub fn res_block(&mut self, x: usize, timed: bool) -> usize {
        let c = self.channels[x];
        let h = self.norm_act(x);
        let h = self.conv(h, c, 3, 1);
        let mut h = self.group_norm(h);
        if timed {
            h = self.time_bias(h);
        }
        let h = self.silu(h);
        let h = self.conv(h, c, 3, 1);
        self.add(x, h)
    }

    /// The graph output is the last node added.
    pub fn finish(self) -> Graph {
        self.graph
    }
}

/// Retained activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    values: Vec<TensorGrid>,
    stats: Vec<Option<GroupStats>>,
    emb: Option<Vec<Real>>,
}

impl Tape {
    pub fn output(&self) -> &TensorGrid {
        self.values.last().expect("tape has an output")
    }

    pub fn into_output(mut self) -> TensorGrid {
        self.values.pop().expect("tape has an output")
    }
}

pub(crate) fn init_params(graph: &Graph, rng: &mut Rng) -> Vec<Real> {
    let mut p = vec![0.0 as Real; graph.param_count()];
    let uniform = |slice: &mut [Real], bound: f64, rng: &mut Rng| {
        for v in slice.iter_mut() {
            *v = rng.gen_range(-bound..bound) as Real;
        }
    };
    for n in &graph.nodes {
        let o = n.param_offset;
        match n.op {
            Op::Conv { cin, cout, kernel, .. } => {
                let nw = cout * cin * kernel.pow(3);
                if !n.zero_init {
                    let fan_in = (cin * kernel.pow(3)) as f64;
                    uniform(&mut p[o..o + nw], (3.0 / fan_in).sqrt(), rng);
                }
            }
            Op::GroupNorm { channels, .. } => p[o..o + channels].fill(1.0),
            Op::TimeBias { channels } => {
                uniform(&mut p[o..o + channels * TIME_EMBED_DIM], (1.0 / TIME_EMBED_DIM as f64).sqrt(), rng);
            }
            Op::Dense { inputs, outputs } => {
                if !n.zero_init {
                    uniform(&mut p[o..o + inputs * outputs], (1.0 / inputs as f64).sqrt(), rng);
                }
            }
            _ => {}
        }
    }
    p
}

fn shape_err(i: usize, msg: String) -> Error {
    Error::Shape(format!("node {i}: {msg}"))
}

/// Forward evaluation retaining every activation.
pub fn trace(graph: &Graph, params: &[Real], input: &TensorGrid, t: Option<usize>) -> Result<Tape> {
    if input.channels() != graph.in_channels {
        return Err(Error::Shape(format!(
            "network expects {} input channels, got {}",
            graph.in_channels,
            input.channels()
        )));
    }
    let emb = if graph.needs_time() {
        match t {
            Some(t) => Some(layers::timestep_embedding(t)),
            None => return Err(Error::InvalidArgument("network is time-conditioned but no timestep was given".into())),
        }
    } else {
        None
    };
    let mut values: Vec<TensorGrid> = Vec::with_capacity(graph.nodes.len());
    let mut stats = Vec::with_capacity(graph.nodes.len());
    for (i, n) in graph.nodes.iter().enumerate() {
        let pp = &params[n.param_offset..n.param_offset + n.op.param_count()];
        let (out, st) = match n.op {
            Op::Input => (input.clone(), None),
            Op::Conv { cin, cout, kernel, stride } => {
                let x = &values[n.inputs[0]];
                if x.channels() != cin {
                    return Err(shape_err(i, format!("conv expects {cin} channels, got {}", x.channels())));
                }
                if stride == 2 && x.spatial().iter().any(|d| d % 2 != 0) {
                    return Err(shape_err(i, format!("stride-2 conv needs even extents, got {:?}", x.spatial())));
                }
                let nw = cout * cin * kernel.pow(3);
                (layers::conv_forward(x, &pp[..nw], &pp[nw..], cout, kernel, stride), None)
            }
            Op::GroupNorm { channels, groups } => {
                let x = &values[n.inputs[0]];
                if x.channels() != channels {
                    return Err(shape_err(i, format!("group norm expects {channels} channels")));
                }
                let (y, s) = layers::group_norm_forward(x, groups, &pp[..channels], &pp[channels..]);
                (y, Some(s))
            }
            Op::Silu => (layers::silu_forward(&values[n.inputs[0]]), None),
            Op::Upsample => (layers::upsample_forward(&values[n.inputs[0]]), None),
            Op::Add => {
                let (a, b) = (&values[n.inputs[0]], &values[n.inputs[1]]);
                (a.zip_map(b, |x, y| x + y).map_err(|e| shape_err(i, e.to_string()))?, None)
            }
            Op::TimeBias { channels } => {
                let x = &values[n.inputs[0]];
                if x.channels() != channels {
                    return Err(shape_err(i, format!("time bias expects {channels} channels")));
                }
                let shift = layers::time_shift(&pp[..channels * TIME_EMBED_DIM], &pp[channels * TIME_EMBED_DIM..], emb.as_deref().unwrap());
                let mut y = x.clone();
                for (c, s) in shift.iter().enumerate() {
                    y.channel_mut(c).iter_mut().for_each(|v| *v += s);
                }
                (y, None)
            }
            Op::GlobalPool => (layers::global_pool_forward(&values[n.inputs[0]]), None),
            Op::Dense { inputs, outputs } => {
                let x = &values[n.inputs[0]];
                if x.len() != inputs {
                    return Err(shape_err(i, format!("dense expects {inputs} inputs, got {}", x.len())));
                }
                (layers::dense_forward(x, &pp[..inputs * outputs], &pp[inputs * outputs..], outputs), None)
            }
        };
        values.push(out);
        stats.push(st);
    }
    Ok(Tape { values, stats, emb })
}

/// Reverse pass. Parameter gradients are added into `grads`; returns the
/// gradient with respect to the network input.
pub fn backprop(graph: &Graph, params: &[Real], tape: &Tape, out_grad: &TensorGrid, grads: &mut [Real]) -> Result<TensorGrid> {
    if tape.values.len() != graph.nodes.len() {
        return Err(Error::State("tape does not belong to this network".into()));
    }
    out_grad.check_same(tape.output())?;
    let mut g: Vec<Option<TensorGrid>> = vec![None; graph.nodes.len()];
    *g.last_mut().unwrap() = Some(out_grad.clone());
    let acc = |g: &mut Vec<Option<TensorGrid>>, j: usize, d: TensorGrid| match &mut g[j] {
        Some(e) => e.add_assign(&d),
        slot @ None => *slot = Some(d),
    };
    for i in (1..graph.nodes.len()).rev() {
        let Some(gy) = g[i].take() else { continue };
        let n = &graph.nodes[i];
        let pc = n.op.param_count();
        let pp = &params[n.param_offset..n.param_offset + pc];
        let gp = &mut grads[n.param_offset..n.param_offset + pc];
        match n.op {
            Op::Input => unreachable!(),
            Op::Conv { cin, cout, kernel, stride } => {
                let nw = cout * cin * kernel.pow(3);
                let (gw, gb) = gp.split_at_mut(nw);
                let gx = layers::conv_backward(&tape.values[n.inputs[0]], &pp[..nw], &gy, kernel, stride, gw, gb);
                acc(&mut g, n.inputs[0], gx);
            }
            Op::GroupNorm { channels, .. } => {
                let (gg, gb) = gp.split_at_mut(channels);
                let st = tape.stats[i].as_ref().unwrap();
                let gx = layers::group_norm_backward(&tape.values[n.inputs[0]], st, &pp[..channels], &gy, gg, gb);
                acc(&mut g, n.inputs[0], gx);
            }
            Op::Silu => acc(&mut g, n.inputs[0], layers::silu_backward(&tape.values[n.inputs[0]], &gy)),
            Op::Upsample => {
                let shape = tape.values[n.inputs[0]].shape();
                acc(&mut g, n.inputs[0], layers::upsample_backward(shape, &gy));
            }
            Op::Add => {
                acc(&mut g, n.inputs[0], gy.clone());
                acc(&mut g, n.inputs[1], gy);
            }
            Op::TimeBias { channels } => {
                let emb = tape.emb.as_ref().unwrap();
                let (gw, gb) = gp.split_at_mut(channels * TIME_EMBED_DIM);
                for c in 0..channels {
                    let s: Real = gy.channel(c).iter().sum();
                    gb[c] += s;
                    for (k, e) in emb.iter().enumerate() {
                        gw[c * TIME_EMBED_DIM + k] += s * e;
                    }
                }
                acc(&mut g, n.inputs[0], gy);
            }
            Op::GlobalPool => {
                let shape = tape.values[n.inputs[0]].shape();
                acc(&mut g, n.inputs[0], layers::global_pool_backward(shape, &gy));
            }
            Op::Dense { inputs, .. } => {
                let x = &tape.values[n.inputs[0]];
                let nw = gy.len() * inputs;
                let (gw, gb) = gp.split_at_mut(nw);
                let gx = layers::dense_backward(x, &pp[..nw], &gy, gw, gb);
                acc(&mut g, n.inputs[0], gx);
            }
        }
    }
    Ok(g[0].take().unwrap_or_else(|| TensorGrid::zeros(tape.values[0].shape())))
}
