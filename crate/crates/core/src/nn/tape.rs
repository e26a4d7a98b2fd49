//! Recording tape for reverse-mode differentiation.
//!
//! A [`Tape`] borrows the model's [`ParamStore`] for the duration of one
//! forward/backward step. Losses are evaluated outside the tape and enter
//! [`Tape::backward`] as seed gradients on output nodes.

use std::collections::HashMap;

use super::conv;
use super::ops::{self, BnStats};
use super::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm momentum for running statistics.
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    ConvT2 {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    BnTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: BnStats,
    },
    BnEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        rmean: ParamId,
        rvar: ParamId,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Crop {
        x: NodeId,
        origin: [usize; 3],
    },
    RoiAlign {
        x: NodeId,
        boxes: Vec<[f32; 6]>,
        out: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv { .. } => "conv3d",
            Op::ConvT2 { .. } => "conv_transpose3d",
            Op::BnTrain { .. } | Op::BnEval { .. } => "batch_norm",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Concat(_) => "concat",
            Op::Crop { .. } => "crop",
            Op::RoiAlign { .. } => "roi_align",
            Op::Linear { .. } => "linear",
        }
    }
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Pending running-statistic update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub id: ParamId,
    pub value: Tensor,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    mode: Mode,
    stat_updates: Vec<StatUpdate>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    pub params: HashMap<ParamId, Tensor>,
    pub inputs: HashMap<NodeId, Tensor>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore, mode: Mode) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            mode,
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            Op::Conv { x, w, b, .. } | Op::ConvT2 { x, w, b } => {
                self.nodes[*x].needs_grad || self.nodes[*w].needs_grad || b.is_some_and(|b| self.nodes[b].needs_grad)
            }
            Op::BnTrain { .. } | Op::BnEval { .. } => true,
            Op::Relu(x) | Op::Crop { x, .. } | Op::RoiAlign { x, .. } => self.nodes[*x].needs_grad,
            Op::Add(a, b) => self.nodes[*a].needs_grad || self.nodes[*b].needs_grad,
            Op::Concat(xs) => xs.iter().any(|&x| self.nodes[x].needs_grad),
            Op::Linear { .. } => true,
        };
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    /// An input whose gradient is reported in [`Gradients::inputs`].
    pub fn input_with_grad(&mut self, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Input);
        self.nodes[id].needs_grad = true;
        id
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let n = self.nodes.len() - 1;
        self.param_nodes.insert(id, n);
        n
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id];
        match node.op {
            Op::Param(p) => self.params.get(p),
            _ => node.value.as_ref().expect("node value"),
        }
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id].op.name()
    }

    /// Direct inputs of a node, for wiring introspection.
    pub fn inputs_of(&self, id: NodeId) -> Vec<NodeId> {
        match &self.nodes[id].op {
            Op::Input | Op::Param(_) => vec![],
            Op::Conv { x, w, b, .. } | Op::ConvT2 { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BnTrain { x, gamma, beta, .. } | Op::BnEval { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu(x) | Op::Crop { x, .. } | Op::RoiAlign { x, .. } => vec![*x],
            Op::Add(a, b) => vec![*a, *b],
            Op::Concat(xs) => xs.clone(),
            Op::Linear { x, w, b } => vec![*x, *w, *b],
        }
    }

    pub fn conv3d(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>, stride: usize, pad: usize) -> NodeId {
        let wn = self.param(w);
        let bn = b.map(|b| self.param(b));
        let y = conv::conv3d_forward(self.value(x), self.value(wn), bn.map(|b| self.value(b)), stride, pad);
        self.push(y, Op::Conv { x, w: wn, b: bn, stride, pad })
    }

    pub fn conv_transpose2(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> NodeId {
        let wn = self.param(w);
        let bn = b.map(|b| self.param(b));
        let y = conv::conv_transpose2_forward(self.value(x), self.value(wn), bn.map(|b| self.value(b)));
        self.push(y, Op::ConvT2 { x, w: wn, b: bn })
    }

    pub fn batch_norm(&mut self, x: NodeId, gamma: ParamId, beta: ParamId, rmean: ParamId, rvar: ParamId) -> NodeId {
        let g = self.param(gamma);
        let b = self.param(beta);
        match self.mode {
            Mode::Train => {
                let (y, stats) = ops::batch_norm_train(self.value(x), self.value(g), self.value(b));
                let blend = |old: &Tensor, new: &[f32]| {
                    let v = old
                        .data()
                        .iter()
                        .zip(new)
                        .map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n)
                        .collect();
                    Tensor::from_vec(old.shape(), v)
                };
                let m = blend(self.params.get(rmean), &stats.mean);
                let v = blend(self.params.get(rvar), &stats.var_unbiased);
                self.stat_updates.push(StatUpdate { id: rmean, value: m });
                self.stat_updates.push(StatUpdate { id: rvar, value: v });
                self.push(y, Op::BnTrain { x, gamma: g, beta: b, stats })
            }
            Mode::Eval => {
                let y = ops::batch_norm_eval(
                    self.value(x),
                    self.value(g),
                    self.value(b),
                    self.params.get(rmean),
                    self.params.get(rvar),
                );
                self.push(y, Op::BnEval { x, gamma: g, beta: b, rmean, rvar })
            }
        }
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push(y, Op::Add(a, b))
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        let vals: Vec<&Tensor> = xs.iter().map(|&x| self.value(x)).collect();
        let y = ops::concat_channels(&vals);
        self.push(y, Op::Concat(xs.to_vec()))
    }

    pub fn crop(&mut self, x: NodeId, origin: [usize; 3], size: [usize; 3]) -> NodeId {
        let y = ops::crop(self.value(x), origin, size);
        self.push(y, Op::Crop { x, origin })
    }

    /// Align-style ROI pooling; boxes in feature-cell units. Output `[n, C·out³]`.
    pub fn roi_align(&mut self, x: NodeId, boxes: Vec<[f32; 6]>, out: usize) -> NodeId {
        let xv = self.value(x);
        let (c, d, h, w) = xv.dims4();
        let data = ops::roi_align_forward(xv.data(), c, [d, h, w], &boxes, out);
        let y = Tensor::from_vec(&[boxes.len(), c * out * out * out], data);
        self.push(y, Op::RoiAlign { x, boxes, out })
    }

    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let wn = self.param(w);
        let bn = self.param(b);
        let y = ops::linear(self.value(x), self.value(wn), self.value(bn));
        self.push(y, Op::Linear { x, w: wn, b: bn })
    }

    /// Running-statistic updates recorded by training-mode batch norms.
    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Back-propagates seed gradients (`dL/d node`) through the tape.
    pub fn backward(&self, seeds: Vec<(NodeId, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            assert_eq!(g.shape(), self.value(id).shape(), "seed shape for node {id}");
            accumulate(&mut grads, id, g);
        }
        let mut out = Gradients::default();
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let need = |n: NodeId| self.nodes[n].needs_grad;
            match &node.op {
                Op::Input => {
                    out.inputs.insert(id, g);
                }
                Op::Param(p) => {
                    out.params.insert(*p, g);
                }
                Op::Conv { x, w, b, stride, pad } => {
                    let (dx, dw, db) =
                        conv::conv3d_backward(self.value(*x), self.value(*w), &g, *stride, *pad, need(*x));
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    accumulate(&mut grads, *w, dw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::ConvT2 { x, w, b } => {
                    let (dx, dw, db) = conv::conv_transpose2_backward(self.value(*x), self.value(*w), &g, need(*x));
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    accumulate(&mut grads, *w, dw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::BnTrain { x, gamma, beta, stats } => {
                    let (dx, dg, db) = ops::batch_norm_train_backward(self.value(*x), self.value(*gamma), stats, &g);
                    if need(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    accumulate(&mut grads, *gamma, dg);
                    accumulate(&mut grads, *beta, db);
                }
                Op::BnEval { x, gamma, beta, rmean, rvar } => {
                    let (dx, dg, db) = ops::batch_norm_eval_backward(
                        self.value(*x),
                        self.value(*gamma),
                        self.params.get(*rmean),
                        self.params.get(*rvar),
                        &g,
                    );
                    if need(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    accumulate(&mut grads, *gamma, dg);
                    accumulate(&mut grads, *beta, db);
                }
                Op::Relu(x) => {
                    let dx = ops::relu_backward(self.value(id), &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    if need(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if need(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Concat(xs) => {
                    let sp = g.spatial();
                    let n = sp[0] * sp[1] * sp[2];
                    let mut offset = 0;
                    for &x in xs {
                        let c = self.value(x).dims4().0;
                        if need(x) {
                            let part = g.data()[offset * n..(offset + c) * n].to_vec();
                            accumulate(&mut grads, x, Tensor::from_vec(&[c, sp[0], sp[1], sp[2]], part));
                        }
                        offset += c;
                    }
                }
                Op::Crop { x, origin } => {
                    let dx = ops::crop_backward(self.value(*x).shape(), *origin, &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::RoiAlign { x, boxes, out } => {
                    let xv = self.value(*x);
                    let (c, d, h, w) = xv.dims4();
                    let df = ops::roi_align_backward(c, [d, h, w], boxes, *out, g.data());
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), df));
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), &g, need(*x));
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{ParamBuilder, ParamKind};

    #[test]
    fn gradients_reach_parameters_through_a_small_graph() {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 1);
        let w = b.he_normal("w", &[2, 1, 3, 3, 3], 27);
        let bias = b.constant("b", &[2], 0.1, ParamKind::Bias);
        let g = b.constant("g", &[2], 1.0, ParamKind::NormScale);
        let be = b.constant("be", &[2], 0.0, ParamKind::NormShift);
        let rm = b.constant("rm", &[2], 0.0, ParamKind::RunningStat);
        let rv = b.constant("rv", &[2], 1.0, ParamKind::RunningStat);
        let mut tape = Tape::new(&store, Mode::Train);
        let xv: Vec<f32> = (0..64).map(|i| (i as f32 * 0.37).sin()).collect();
        let x = tape.input_with_grad(Tensor::from_vec(&[1, 4, 4, 4], xv));
        let y = tape.conv3d(x, w, Some(bias), 1, 1);
        let y = tape.batch_norm(y, g, be, rm, rv);
        let y = tape.relu(y);
        let z = tape.add(y, y);
        let seed = Tensor::full(tape.value(z).shape(), 1.0);
        let grads = tape.backward(vec![(z, seed)]);
        for id in [w, bias, g, be] {
            assert!(grads.params.contains_key(&id), "missing grad for {}", store.name(id));
        }
        assert!(grads.inputs.contains_key(&x));
        assert!(!grads.params.contains_key(&rm));
        assert_eq!(tape.stat_updates.len(), 2);
    }
}
