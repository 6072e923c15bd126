//! Layer graph with hand-derived forward and backward passes.
//!
//! Node 0 is always the graph input and the last node produces the logits,
//! shaped `(N, classes, 1, 1)`. Every other node lists the indices of the
//! nodes it consumes; indices always point backwards, so the node order is a
//! valid evaluation order.

use std::collections::BTreeSet;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BatchNormLayer, Compactor, ConvLayer, Mode};
use crate::scalar::Scalar;
use crate::tensor::{conv2d, conv2d_backward, conv_out_size, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Input { channels: usize, height: usize, width: usize },
    Conv(ConvLayer<T>),
    BatchNorm(BatchNormLayer<T>),
    Compactor(Compactor<T>),
    Relu,
    GlobalAvgPool,
    Add,
    /// Fully-connected classifier, stored as a 1×1 conv over pooled features.
    Linear(ConvLayer<T>),
}

impl<T> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Input { .. } => "input",
            Layer::Conv(_) => "conv",
            Layer::BatchNorm(_) => "bn",
            Layer::Compactor(_) => "compactor",
            Layer::Relu => "relu",
            Layer::GlobalAvgPool => "gap",
            Layer::Add => "add",
            Layer::Linear(_) => "linear",
        }
    }

    /// Conv or linear parameters, when the layer has a kernel.
    pub fn conv(&self) -> Option<&ConvLayer<T>> {
        match self {
            Layer::Conv(c) | Layer::Linear(c) => Some(c),
            _ => None,
        }
    }

    pub fn conv_mut(&mut self) -> Option<&mut ConvLayer<T>> {
        match self {
            Layer::Conv(c) | Layer::Linear(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node<T> {
    pub name: String,
    pub layer: Layer<T>,
    pub inputs: Vec<usize>,
}

/// A prunable conv-BN pair and the conv that consumes its channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub conv: usize,
    pub bn: usize,
    pub compactor: Option<usize>,
    pub successor: usize,
}

impl Target {
    /// Last node of the prunable sequence (compactor if present, else BN).
    pub fn tail(&self) -> usize {
        self.compactor.unwrap_or(self.bn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamKind {
    Kernel,
    Bias,
    Gamma,
    Beta,
    Compactor,
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamKind::Kernel => "kernel",
            ParamKind::Bias => "bias",
            ParamKind::Gamma => "gamma",
            ParamKind::Beta => "beta",
            ParamKind::Compactor => "q",
        })
    }
}

/// Mutable view of one trainable tensor and its gradient buffer.
pub struct ParamMut<'a, T> {
    pub node: usize,
    pub kind: ParamKind,
    pub name: String,
    pub value: &'a mut [T],
    pub grad: &'a mut [T],
}

#[derive(Debug, Clone)]
struct BnStats<T> {
    mean: Vec<T>,
    var: Vec<T>,
    inv_std: Vec<T>,
}

/// Activations recorded by [`ModelGraph::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub mode: Mode,
    values: Vec<Tensor4<T>>,
    bn: Vec<Option<BnStats<T>>>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn logits(&self) -> &Tensor4<T> {
        self.values.last().expect("graph has nodes")
    }

    pub fn value(&self, node: usize) -> &Tensor4<T> {
        &self.values[node]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    /// Mean softmax cross-entropy over the batch.
    pub loss: T,
    /// Number of samples whose argmax logit equals the label.
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T> {
    pub arch: String,
    pub nodes: Vec<Node<T>>,
    pub targets: Vec<Target>,
}

impl<T: Scalar> ModelGraph<T> {
    pub fn new(arch: impl Into<String>, channels: usize, height: usize, width: usize) -> Self {
        Self {
            arch: arch.into(),
            nodes: vec![Node {
                name: "input".into(),
                layer: Layer::Input {
                    channels,
                    height,
                    width,
                },
                inputs: vec![],
            }],
            targets: vec![],
        }
    }

    /// Appends a node and returns its index.
    pub fn push(&mut self, name: impl Into<String>, layer: Layer<T>, inputs: &[usize]) -> usize {
        self.nodes.push(Node {
            name: name.into(),
            layer,
            inputs: inputs.to_vec(),
        });
        self.nodes.len() - 1
    }

    pub fn input_dims(&self) -> [usize; 3] {
        match self.nodes[0].layer {
            Layer::Input {
                channels,
                height,
                width,
            } => [channels, height, width],
            _ => unreachable!("node 0 is always the input"),
        }
    }

    pub fn output(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn num_classes(&self) -> usize {
        self.shapes().map(|s| s[self.output()][0]).unwrap_or(0)
    }

    pub fn compactors(&self) -> impl Iterator<Item = &Compactor<T>> {
        self.targets.iter().filter_map(|t| match t.compactor {
            Some(i) => match &self.nodes[i].layer {
                Layer::Compactor(c) => Some(c),
                _ => None,
            },
            None => None,
        })
    }

    pub fn has_compactors(&self) -> bool {
        self.nodes
            .iter()
            .any(|n| matches!(n.layer, Layer::Compactor(_)))
    }

    pub fn compactor_mut(&mut self, target: usize) -> Option<&mut Compactor<T>> {
        let idx = self.targets.get(target)?.compactor?;
        match &mut self.nodes[idx].layer {
            Layer::Compactor(c) => Some(c),
            _ => None,
        }
    }

    pub fn compactor(&self, target: usize) -> Option<&Compactor<T>> {
        let idx = self.targets.get(target)?.compactor?;
        match &self.nodes[idx].layer {
            Layer::Compactor(c) => Some(c),
            _ => None,
        }
    }

    pub fn conv(&self, node: usize) -> Option<&ConvLayer<T>> {
        self.nodes.get(node)?.layer.conv()
    }

    pub fn conv_mut(&mut self, node: usize) -> Option<&mut ConvLayer<T>> {
        self.nodes.get_mut(node)?.layer.conv_mut()
    }

    pub fn bn(&self, node: usize) -> Option<&BatchNormLayer<T>> {
        match &self.nodes.get(node)?.layer {
            Layer::BatchNorm(b) => Some(b),
            _ => None,
        }
    }

    pub fn bn_mut(&mut self, node: usize) -> Option<&mut BatchNormLayer<T>> {
        match &mut self.nodes.get_mut(node)?.layer {
            Layer::BatchNorm(b) => Some(b),
            _ => None,
        }
    }

    /// Consumers of every node.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for &j in &n.inputs {
                out[j].push(i);
            }
        }
        out
    }

    fn node_err(&self, node: usize, message: impl Into<String>) -> Error {
        Error::Node {
            node,
            name: self.nodes[node].name.clone(),
            message: message.into(),
        }
    }

    /// Per-sample output shape `(C, H, W)` of every node.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shapes: Vec<[usize; 3]> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let ins: Vec<[usize; 3]> = node.inputs.iter().map(|&j| shapes[j]).collect();
            let expect_inputs = match node.layer {
                Layer::Input { .. } => 0,
                Layer::Add => 2,
                _ => 1,
            };
            if ins.len() != expect_inputs || node.inputs.iter().any(|&j| j >= i) {
                return Err(self.node_err(i, format!("expected {expect_inputs} earlier inputs, got {:?}", node.inputs)));
            }
            let s = match &node.layer {
                Layer::Input {
                    channels,
                    height,
                    width,
                } => [*channels, *height, *width],
                Layer::Conv(c) | Layer::Linear(c) => {
                    let [ci, h, w] = ins[0];
                    if ci != c.in_channels() {
                        return Err(self.node_err(i, format!("input channels {ci} vs kernel {:?}", c.kernel.dims())));
                    }
                    let k = c.kernel_size();
                    match (
                        conv_out_size(h, k, c.stride, c.padding),
                        conv_out_size(w, k, c.stride, c.padding),
                    ) {
                        (Some(oh), Some(ow)) => [c.out_channels(), oh, ow],
                        _ => return Err(self.node_err(i, format!("kernel {k} does not fit input {h}x{w}"))),
                    }
                }
                Layer::BatchNorm(b) => {
                    if ins[0][0] != b.channels() {
                        return Err(self.node_err(i, format!("{} channels into BN of width {}", ins[0][0], b.channels())));
                    }
                    ins[0]
                }
                Layer::Compactor(c) => {
                    if ins[0][0] != c.channels() {
                        return Err(self.node_err(i, format!("{} channels into compactor of width {}", ins[0][0], c.channels())));
                    }
                    ins[0]
                }
                Layer::Relu => ins[0],
                Layer::GlobalAvgPool => [ins[0][0], 1, 1],
                Layer::Add => {
                    if ins[0] != ins[1] {
                        return Err(self.node_err(i, format!("residual add of {:?} and {:?}", ins[0], ins[1])));
                    }
                    ins[0]
                }
            };
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Checks structural invariants, including the target-layer rules.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() || !matches!(self.nodes[0].layer, Layer::Input { .. }) {
            return Err(Error::InvalidArgument("graph must start with an input node".into()));
        }
        if self.nodes[1..].iter().any(|n| matches!(n.layer, Layer::Input { .. })) {
            return Err(Error::InvalidArgument("only node 0 may be an input".into()));
        }
        self.shapes()?;
        let consumers = self.consumers();
        for (ti, t) in self.targets.iter().enumerate() {
            let conv = self
                .conv(t.conv)
                .filter(|_| matches!(self.nodes[t.conv].layer, Layer::Conv(_)))
                .ok_or_else(|| self.node_err(t.conv, format!("target {ti} is not a conv")))?;
            if self.bn(t.bn).is_none() || self.nodes[t.bn].inputs != [t.conv] {
                return Err(self.node_err(t.bn, format!("target {ti} must be conv followed by BN")));
            }
            if conv.bias.is_some() {
                return Err(self.node_err(t.conv, "target conv must not carry a bias"));
            }
            if consumers[t.conv] != [t.bn] {
                return Err(self.node_err(t.conv, "target conv output must feed only its BN"));
            }
            if let Some(c) = t.compactor {
                if !matches!(self.nodes[c].layer, Layer::Compactor(_)) || self.nodes[c].inputs != [t.bn] {
                    return Err(self.node_err(c, format!("target {ti} compactor must follow its BN")));
                }
            }
            if !matches!(self.nodes.get(t.successor).map(|n| &n.layer), Some(Layer::Conv(_))) {
                return Err(self.node_err(t.conv, format!("target {ti} successor {} is not a conv", t.successor)));
            }
            // Channels of the target must reach exactly the successor through
            // channel-wise ops only.
            let mut frontier = vec![t.tail()];
            let mut reached = BTreeSet::new();
            while let Some(n) = frontier.pop() {
                for &c in &consumers[n] {
                    match &self.nodes[c].layer {
                        Layer::Relu => frontier.push(c),
                        Layer::Conv(_) => {
                            reached.insert(c);
                        }
                        Layer::Compactor(_) if Some(c) == t.compactor => frontier.push(c),
                        other => {
                            return Err(self.node_err(
                                c,
                                format!("target {ti} output reaches a {} before its successor", other.kind()),
                            ))
                        }
                    }
                }
            }
            if reached.into_iter().collect::<Vec<_>>() != [t.successor] {
                return Err(self.node_err(t.conv, format!("target {ti} output must feed only conv {}", t.successor)));
            }
        }
        Ok(())
    }

    /// Inserts `node` directly after `after`, rewiring all of `after`'s
    /// consumers to read from the new node. Returns the new node's index.
    pub fn insert_after(&mut self, after: usize, name: impl Into<String>, layer: Layer<T>) -> usize {
        let at = after + 1;
        let shift = |i: usize| if i >= at { i + 1 } else { i };
        for n in &mut self.nodes {
            for inp in &mut n.inputs {
                *inp = shift(*inp);
            }
        }
        for t in &mut self.targets {
            t.conv = shift(t.conv);
            t.bn = shift(t.bn);
            t.compactor = t.compactor.map(shift);
            t.successor = shift(t.successor);
        }
        for n in &mut self.nodes {
            if let Layer::Compactor(c) = &mut n.layer {
                c.owner = shift(c.owner);
            }
        }
        for n in &mut self.nodes {
            for inp in &mut n.inputs {
                if *inp == after {
                    *inp = at;
                }
            }
        }
        self.nodes.insert(
            at,
            Node {
                name: name.into(),
                layer,
                inputs: vec![after],
            },
        );
        at
    }

    /// Removes a single-input node, rewiring its consumers to its input.
    pub fn remove_node(&mut self, idx: usize) {
        assert!(idx > 0 && self.nodes[idx].inputs.len() == 1, "only single-input nodes can be removed");
        let src = self.nodes[idx].inputs[0];
        self.nodes.remove(idx);
        let remap = |i: usize| match i.cmp(&idx) {
            std::cmp::Ordering::Less => i,
            std::cmp::Ordering::Equal => src,
            std::cmp::Ordering::Greater => i - 1,
        };
        for n in &mut self.nodes {
            for inp in &mut n.inputs {
                *inp = remap(*inp);
            }
            if let Layer::Compactor(c) = &mut n.layer {
                c.owner = remap(c.owner);
            }
        }
        for t in &mut self.targets {
            t.conv = remap(t.conv);
            t.bn = remap(t.bn);
            t.compactor = t.compactor.map(remap);
            t.successor = remap(t.successor);
        }
    }

    fn forward_values(&self, x: &Tensor4<T>, mode: Mode) -> Result<ForwardPass<T>> {
        let [c, h, w] = self.input_dims();
        let [_, xc, xh, xw] = x.dims();
        if [xc, xh, xw] != [c, h, w] {
            return Err(self.node_err(0, format!("batch dims {:?} do not match input {:?}", x.dims(), [c, h, w])));
        }
        let mut values: Vec<Tensor4<T>> = Vec::with_capacity(self.nodes.len());
        let mut bn = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let wrap = |e: Error| self.node_err(i, e.to_string());
            let out = match &node.layer {
                Layer::Input { .. } => x.clone(),
                Layer::Conv(cv) | Layer::Linear(cv) => conv2d(
                    &values[node.inputs[0]],
                    &cv.kernel,
                    cv.bias.as_deref(),
                    cv.stride,
                    cv.padding,
                )
                .map_err(wrap)?,
                Layer::Compactor(cp) => conv2d(&values[node.inputs[0]], &cp.q, None, 1, 0).map_err(wrap)?,
                Layer::BatchNorm(b) => {
                    let input = &values[node.inputs[0]];
                    if input.dims()[1] != b.channels() {
                        return Err(self.node_err(i, format!("{:?} into BN of width {}", input.dims(), b.channels())));
                    }
                    let stats = match mode {
                        Mode::Train => batch_stats(input, b.eps),
                        Mode::Eval => {
                            let eps = T::lit(b.eps);
                            BnStats {
                                mean: b.running_mean.clone(),
                                var: b.running_var.clone(),
                                inv_std: b.running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
                            }
                        }
                    };
                    let out = bn_apply(input, &stats, &b.gamma, &b.beta);
                    bn[i] = Some(stats);
                    out
                }
                Layer::Relu => values[node.inputs[0]].map(|v| if v > T::zero() { v } else { T::zero() }),
                Layer::GlobalAvgPool => {
                    let input = &values[node.inputs[0]];
                    let [n, ch, hh, ww] = input.dims();
                    let inv = T::one() / T::lit((hh * ww) as f64);
                    let data = input
                        .data()
                        .chunks(hh * ww)
                        .map(|p| p.iter().copied().sum::<T>() * inv)
                        .collect();
                    Tensor4::from_vec([n, ch, 1, 1], data)?
                }
                Layer::Add => values[node.inputs[0]]
                    .add(&values[node.inputs[1]])
                    .map_err(wrap)?,
            };
            values.push(out);
        }
        Ok(ForwardPass { mode, values, bn })
    }

    /// Runs the graph. Train mode normalizes with batch statistics and
    /// updates the BN running statistics.
    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<ForwardPass<T>> {
        let pass = self.forward_values(x, mode)?;
        if mode == Mode::Train {
            for (node, stats) in self.nodes.iter_mut().zip(&pass.bn) {
                if let (Layer::BatchNorm(b), Some(s)) = (&mut node.layer, stats) {
                    let m = T::lit(b.momentum);
                    for j in 0..b.channels() {
                        b.running_mean[j] = (T::one() - m) * b.running_mean[j] + m * s.mean[j];
                        b.running_var[j] = (T::one() - m) * b.running_var[j] + m * s.var[j];
                    }
                }
            }
        }
        Ok(pass)
    }

    /// Eval-mode logits without touching any state.
    pub fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut pass = self.forward_values(x, Mode::Eval)?;
        Ok(pass.values.pop().expect("graph has nodes"))
    }

    /// Softmax cross-entropy loss and gradients for every trainable
    /// parameter, accumulated into the gradient buffers.
    pub fn backward(&mut self, pass: &ForwardPass<T>, labels: &[usize]) -> Result<LossOutput<T>> {
        self.backward_scaled(pass, labels, T::one())
    }

    /// As [`ModelGraph::backward`] for the objective `scale · loss`.
    pub fn backward_scaled(&mut self, pass: &ForwardPass<T>, labels: &[usize], scale: T) -> Result<LossOutput<T>> {
        let logits = pass.logits();
        let (loss, correct, grad_logits) = softmax_cross_entropy(logits, labels, scale)?;
        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Tensor4<T>>> = vec![None; n_nodes];
        grads[n_nodes - 1] = Some(grad_logits);

        fn accumulate<T: Scalar>(slot: &mut Option<Tensor4<T>>, g: Tensor4<T>) {
            match slot {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => *slot = Some(g),
            }
        }

        for i in (1..n_nodes).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let inputs = self.nodes[i].inputs.clone();
            let src = inputs[0];
            let need_input = src != 0;
            let x = &pass.values[src];
            match &mut self.nodes[i].layer {
                Layer::Input { .. } => {}
                Layer::Conv(cv) | Layer::Linear(cv) => {
                    let g = conv2d_backward(x, &cv.kernel, &gy, cv.stride, cv.padding, need_input)?;
                    add_into(cv.grad_kernel.data_mut(), g.kernel.data());
                    if let Some(gb) = cv.grad_bias.as_mut() {
                        add_into(gb, &g.bias);
                    }
                    if let Some(gi) = g.input {
                        accumulate(&mut grads[src], gi);
                    }
                }
                Layer::Compactor(cp) => {
                    let g = conv2d_backward(x, &cp.q, &gy, 1, 0, need_input)?;
                    add_into(cp.grad.data_mut(), g.kernel.data());
                    if let Some(gi) = g.input {
                        accumulate(&mut grads[src], gi);
                    }
                }
                Layer::BatchNorm(b) => {
                    let stats = pass.bn[i].as_ref().expect("BN stats recorded");
                    let gi = bn_backward(x, &gy, stats, b, pass.mode);
                    if need_input {
                        accumulate(&mut grads[src], gi);
                    }
                }
                Layer::Relu => {
                    if need_input {
                        let data = x
                            .data()
                            .iter()
                            .zip(gy.data())
                            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                            .collect();
                        accumulate(&mut grads[src], Tensor4::from_vec(x.dims(), data)?);
                    }
                }
                Layer::GlobalAvgPool => {
                    if need_input {
                        let [n, c, h, w] = x.dims();
                        let inv = T::one() / T::lit((h * w) as f64);
                        let mut gi = Tensor4::zeros([n, c, h, w]);
                        for (plane, &g) in gi.data_mut().chunks_mut(h * w).zip(gy.data()) {
                            plane.fill(g * inv);
                        }
                        accumulate(&mut grads[src], gi);
                    }
                }
                Layer::Add => {
                    for &s in &inputs {
                        if s != 0 {
                            accumulate(&mut grads[s], gy.clone());
                        }
                    }
                }
            }
        }
        Ok(LossOutput { loss, correct })
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            match &mut n.layer {
                Layer::Conv(c) | Layer::Linear(c) => c.zero_grad(),
                Layer::BatchNorm(b) => b.zero_grad(),
                Layer::Compactor(c) => c.zero_grad(),
                _ => {}
            }
        }
    }

    /// Every trainable tensor, in node order.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        for (i, n) in self.nodes.iter_mut().enumerate() {
            let name = n.name.as_str();
            let mk = |kind, value, grad| param_mut(i, name, kind, value, grad);
            match &mut n.layer {
                Layer::Conv(c) | Layer::Linear(c) => {
                    out.push(mk(ParamKind::Kernel, c.kernel.data_mut(), c.grad_kernel.data_mut()));
                    if let (Some(b), Some(g)) = (c.bias.as_mut(), c.grad_bias.as_mut()) {
                        out.push(mk(ParamKind::Bias, b, g));
                    }
                }
                Layer::BatchNorm(b) => {
                    out.push(mk(ParamKind::Gamma, &mut b.gamma, &mut b.grad_gamma));
                    out.push(mk(ParamKind::Beta, &mut b.beta, &mut b.grad_beta));
                }
                Layer::Compactor(c) => {
                    out.push(mk(ParamKind::Compactor, c.q.data_mut(), c.grad.data_mut()));
                }
                _ => {}
            }
        }
        out
    }

    /// Snapshot of every parameter value keyed by name.
    pub fn param_values(&mut self) -> Vec<(String, ParamKind, Vec<T>)> {
        self.params_mut()
            .into_iter()
            .map(|p| (p.name, p.kind, p.value.to_vec()))
            .collect()
    }

    /// Eval-mode predictions for a batch.
    pub fn predict(&self, x: &Tensor4<T>) -> Result<Vec<usize>> {
        let logits = self.infer(x)?;
        Ok(argmax_rows(&logits))
    }

    /// Number of correct eval-mode predictions, batches sharded over threads.
    pub fn count_correct(&self, batches: &[(Tensor4<T>, Vec<usize>)]) -> Result<usize> {
        batches
            .par_iter()
            .map(|(x, y)| {
                let pred = self.predict(x)?;
                Ok(pred.iter().zip(y).filter(|(a, b)| a == b).count())
            })
            .collect::<Result<Vec<_>>>()
            .map(|v| v.into_iter().sum())
    }
}

pub(crate) fn argmax_rows<T: Scalar>(logits: &Tensor4<T>) -> Vec<usize> {
    let k = logits.row_len();
    logits
        .data()
        .chunks(k.max(1))
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn add_into<T: Scalar>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn batch_stats<T: Scalar>(x: &Tensor4<T>, eps: f64) -> BnStats<T> {
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let count = T::lit((n * hw) as f64);
    let eps = T::lit(eps);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    for j in 0..c {
        let plane = |i: usize| &x.data()[(i * c + j) * hw..(i * c + j + 1) * hw];
        let m = (0..n).map(|i| plane(i).iter().copied().sum::<T>()).sum::<T>() / count;
        let v = (0..n)
            .map(|i| plane(i).iter().map(|&v| (v - m) * (v - m)).sum::<T>())
            .sum::<T>()
            / count;
        mean[j] = m;
        var[j] = v;
        inv_std[j] = T::one() / (v + eps).sqrt();
    }
    BnStats { mean, var, inv_std }
}

fn bn_apply<T: Scalar>(x: &Tensor4<T>, s: &BnStats<T>, gamma: &[T], beta: &[T]) -> Tensor4<T> {
    let [_, c, h, w] = x.dims();
    let hw = h * w;
    let mut out = x.clone();
    for (p, plane) in out.data_mut().chunks_mut(hw.max(1)).enumerate() {
        let j = p % c;
        let scale = gamma[j] * s.inv_std[j];
        let shift = beta[j] - s.mean[j] * scale;
        for v in plane {
            *v = *v * scale + shift;
        }
    }
    out
}

fn bn_backward<T: Scalar>(
    x: &Tensor4<T>,
    gy: &Tensor4<T>,
    s: &BnStats<T>,
    b: &mut BatchNormLayer<T>,
    mode: Mode,
) -> Tensor4<T> {
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let count = T::lit((n * hw) as f64);
    let mut gi = Tensor4::zeros(x.dims());
    for j in 0..c {
        let idx = |i: usize| (i * c + j) * hw..(i * c + j + 1) * hw;
        let (mut dgamma, mut dbeta) = (T::zero(), T::zero());
        for i in 0..n {
            for (&xv, &g) in x.data()[idx(i)].iter().zip(&gy.data()[idx(i)]) {
                dgamma += g * (xv - s.mean[j]) * s.inv_std[j];
                dbeta += g;
            }
        }
        b.grad_gamma[j] += dgamma;
        b.grad_beta[j] += dbeta;
        let k = b.gamma[j] * s.inv_std[j];
        for i in 0..n {
            let r = idx(i);
            let (xs, gs) = (&x.data()[r.clone()], &gy.data()[r.clone()]);
            for ((dst, &xv), &g) in gi.data_mut()[r].iter_mut().zip(xs).zip(gs) {
                *dst = match mode {
                    Mode::Eval => g * k,
                    Mode::Train => {
                        let xhat = (xv - s.mean[j]) * s.inv_std[j];
                        k / count * (count * g - dbeta - xhat * dgamma)
                    }
                };
            }
        }
    }
    gi
}

/// Mean cross-entropy, correct count, and `scale · ∂loss/∂logits`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor4<T>,
    labels: &[usize],
    scale: T,
) -> Result<(T, usize, Tensor4<T>)> {
    let n = logits.dims()[0];
    let k = logits.row_len();
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
    }
    let inv_n = T::one() / T::lit(n as f64);
    let mut grad = Tensor4::zeros(logits.dims());
    let mut loss = T::zero();
    let mut correct = 0;
    for (i, (row, &y)) in logits.data().chunks(k).zip(labels).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        loss += (z.ln() + max - row[y]) * inv_n;
        let mut best = 0;
        for j in 0..k {
            if row[j] > row[best] {
                best = j;
            }
            let p = exps[j] / z;
            let t = if j == y { T::one() } else { T::zero() };
            grad.data_mut()[i * k + j] = (p - t) * inv_n * scale;
        }
        correct += usize::from(best == y);
    }
    Ok((loss * scale, correct, grad))
}

fn param_mut<'a, T>(node: usize, name: &str, kind: ParamKind, value: &'a mut [T], grad: &'a mut [T]) -> ParamMut<'a, T> {
    ParamMut {
        node,
        kind,
        name: format!("{name}.{kind}"),
        value,
        grad,
    }
}
