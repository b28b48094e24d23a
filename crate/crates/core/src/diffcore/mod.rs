//! Minimal differentiable computation: a static graph over a fixed op set,
//! exact reverse-mode gradients w.r.t. a flat parameter vector, finite
//! difference verification, and the Adam update rule.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use adam::AdamState;
pub use gradcheck::{fd_compare, fd_validity_margin, grad_check, GradCheckReport};
pub use params::{InitKind, Params, Segment, SegmentTable};
pub use tensor::{Real, Tensor};

use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("graph input {index}: expected dims {expected:?}, got {got:?}")]
    InputDims { index: usize, expected: Vec<usize>, got: Vec<usize> },
    #[error("expected {expected} graph inputs, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("non-finite value in output of node {node} ({op})")]
    NonFinite { node: NodeId, op: String },
    #[error("non-finite gradient")]
    NonFiniteGrad,
    #[error("backward needs a single scalar output, graph has {outputs} outputs, dims {dims:?}")]
    NonScalarOutput { outputs: usize, dims: Vec<usize> },
    #[error("parameter length {got} does not match graph ({expected})")]
    ParamLen { expected: usize, got: usize },
}

/// The fixed operation set. Parameters enter through `Param` leaves, so every
/// op's adjoint w.r.t. its tensor inputs is all the executor needs.
#[derive(Clone, Debug)]
pub enum OpKind {
    Input { index: usize },
    Param { segment: usize },
    Conv2d { stride: usize },
    BiasAdd,
    Relu,
    Sigmoid,
    Upsample2x,
    Concat,
    Add,
    Mul,
    AffineScalar { scale: f64, shift: f64 },
    LogClamped { eps: f64 },
    Mean,
    Resample,
    BendingEnergy,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Input { .. } => "input",
            OpKind::Param { .. } => "param",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::BiasAdd => "bias_add",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Upsample2x => "upsample2x",
            OpKind::Concat => "concat",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::AffineScalar { .. } => "affine_scalar",
            OpKind::LogClamped { .. } => "log_clamped",
            OpKind::Mean => "mean",
            OpKind::Resample => "resample",
            OpKind::BendingEnergy => "bending_energy",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: OpKind,
    pub inputs: Vec<NodeId>,
}

/// Static acyclic graph in topological order (node inputs always precede it).
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    dims: Vec<Vec<usize>>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
    segments: SegmentTable,
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn segments(&self) -> &SegmentTable {
        &self.segments
    }

    pub fn param_len(&self) -> usize {
        self.segments.total_len()
    }

    pub fn node_dims(&self, id: NodeId) -> &[usize] {
        &self.dims[id]
    }

    pub fn input_count(&self) -> usize {
        self.inputs.len()
    }

    pub fn output_ids(&self) -> &[NodeId] {
        &self.outputs
    }

    fn check_inputs<T: Real>(&self, params: &Params<T>, inputs: &[Tensor<T>]) -> Result<(), DiffError> {
        if inputs.len() != self.inputs.len() {
            return Err(DiffError::InputCount { expected: self.inputs.len(), got: inputs.len() });
        }
        for (i, t) in inputs.iter().enumerate() {
            let expect = &self.dims[self.inputs[i]];
            if t.dims() != expect.as_slice() {
                return Err(DiffError::InputDims {
                    index: i,
                    expected: expect.clone(),
                    got: t.dims().to_vec(),
                });
            }
        }
        if params.len() != self.param_len() {
            return Err(DiffError::ParamLen { expected: self.param_len(), got: params.len() });
        }
        Ok(())
    }

    /// Evaluate every node in order and return the designated outputs.
    pub fn forward<T: Real>(
        &self,
        params: &Params<T>,
        inputs: &[Tensor<T>],
    ) -> Result<Vec<Tensor<T>>, DiffError> {
        let values = self.forward_values(params, inputs)?;
        Ok(self.outputs.iter().map(|id| values[*id].clone()).collect())
    }

    /// Scalar loss value; requires a single `[1]` output.
    pub fn forward_scalar<T: Real>(
        &self,
        params: &Params<T>,
        inputs: &[Tensor<T>],
    ) -> Result<T, DiffError> {
        self.require_scalar_output()?;
        let values = self.forward_values(params, inputs)?;
        Ok(values[self.outputs[0]].item())
    }

    /// Evaluate and return every node's value, in node order. Used by
    /// instrumentation such as the finite-difference validity probe.
    pub fn forward_nodes<T: Real>(
        &self,
        params: &Params<T>,
        inputs: &[Tensor<T>],
    ) -> Result<Vec<Tensor<T>>, DiffError> {
        self.forward_values(params, inputs)
    }

    fn require_scalar_output(&self) -> Result<(), DiffError> {
        if self.outputs.len() != 1 || self.dims[self.outputs[0]] != vec![1] {
            return Err(DiffError::NonScalarOutput {
                outputs: self.outputs.len(),
                dims: self.dims[self.outputs[0]].clone(),
            });
        }
        Ok(())
    }

    fn forward_values<T: Real>(
        &self,
        params: &Params<T>,
        inputs: &[Tensor<T>],
    ) -> Result<Vec<Tensor<T>>, DiffError> {
        self.check_inputs(params, inputs)?;
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let get = |k: usize| &values[node.inputs[k]];
            let out = match &node.op {
                OpKind::Input { index } => inputs[*index].clone(),
                OpKind::Param { segment } => {
                    let seg = self.segments.get(*segment);
                    Tensor::from_vec(
                        seg.dims.clone(),
                        params.values[seg.offset..seg.offset + seg.len].to_vec(),
                    )
                }
                OpKind::Conv2d { stride } => kernels::conv2d_forward(get(0), get(1), *stride),
                OpKind::BiasAdd => kernels::bias_add_forward(get(0), get(1)),
                OpKind::Relu => kernels::relu_forward(get(0)),
                OpKind::Sigmoid => kernels::sigmoid_forward(get(0)),
                OpKind::Upsample2x => kernels::upsample2x_forward(get(0)),
                OpKind::Concat => kernels::concat_forward(get(0), get(1)),
                OpKind::Add => {
                    let mut out = get(0).clone();
                    for (o, b) in out.data_mut().iter_mut().zip(get(1).data()) {
                        *o = *o + *b;
                    }
                    out
                }
                OpKind::Mul => {
                    let mut out = get(0).clone();
                    for (o, b) in out.data_mut().iter_mut().zip(get(1).data()) {
                        *o = *o * *b;
                    }
                    out
                }
                OpKind::AffineScalar { scale, shift } => {
                    let (a, b) = (T::of_f64(*scale), T::of_f64(*shift));
                    let mut out = get(0).clone();
                    for o in out.data_mut() {
                        *o = a * *o + b;
                    }
                    out
                }
                OpKind::LogClamped { eps } => kernels::log_clamped_forward(get(0), *eps),
                OpKind::Mean => kernels::mean_forward(get(0)),
                OpKind::Resample => kernels::resample_forward(get(0), get(1)),
                OpKind::BendingEnergy => kernels::bending_energy_forward(get(0)),
            };
            if !out.all_finite() {
                return Err(DiffError::NonFinite { node: id, op: node.op.name().to_string() });
            }
            values.push(out);
        }
        Ok(values)
    }

    /// Exact reverse-mode gradient of the scalar output w.r.t. the flat
    /// parameter vector. Returns the loss value alongside.
    pub fn backward<T: Real>(
        &self,
        params: &Params<T>,
        inputs: &[Tensor<T>],
    ) -> Result<(T, Vec<T>), DiffError> {
        self.require_scalar_output()?;
        let values = self.forward_values(params, inputs)?;
        let loss = values[self.outputs[0]].item();

        let mut adjoints: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        adjoints[self.outputs[0]] = Some(Tensor::scalar(T::one()));
        let mut grad = vec![T::zero(); self.param_len()];

        for id in (0..self.nodes.len()).rev() {
            let Some(adj) = adjoints[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                OpKind::Input { .. } => {}
                OpKind::Param { segment } => {
                    let seg = self.segments.get(*segment);
                    for (g, a) in grad[seg.offset..seg.offset + seg.len].iter_mut().zip(adj.data())
                    {
                        *g = *g + *a;
                    }
                }
                OpKind::Conv2d { stride } => {
                    let x = &values[node.inputs[0]];
                    let w = &values[node.inputs[1]];
                    let mut gx = Self::adj_buffer(&mut adjoints, node.inputs[0], x.dims());
                    let mut gw = Self::adj_buffer(&mut adjoints, node.inputs[1], w.dims());
                    kernels::conv2d_backward(x, w, *stride, &adj, &mut gx, &mut gw);
                    adjoints[node.inputs[0]] = Some(gx);
                    adjoints[node.inputs[1]] = Some(gw);
                }
                OpKind::BiasAdd => {
                    let x = &values[node.inputs[0]];
                    let (c, h, w) = x.chw();
                    let mut gx = Self::adj_buffer(&mut adjoints, node.inputs[0], x.dims());
                    let mut gb =
                        Self::adj_buffer(&mut adjoints, node.inputs[1], &[c]);
                    kernels::bias_add_backward(c, h * w, &adj, &mut gx, &mut gb);
                    adjoints[node.inputs[0]] = Some(gx);
                    adjoints[node.inputs[1]] = Some(gb);
                }
                OpKind::Relu => {
                    let x = &values[node.inputs[0]];
                    let mut gx = Self::adj_buffer(&mut adjoints, node.inputs[0], x.dims());
                    kernels::relu_backward(x, &adj, &mut gx);
                    adjoints[node.inputs[0]] = Some(gx);
                }
                OpKind::Sigmoid => {
                    let y = &values[id];
                    let mut gx = Self::adj_buffer(&mut adjoints, node.inputs[0], y.dims());
                    kernels::sigmoid_backward(y, &adj, &mut gx);
                    adjoints[node.inputs[0]] = Some(gx);
                }
                OpKind::Upsample2x => {
                    let x = &values[node.inputs[0]];
                    let mut gx = Self::adj_buffer(&mut adjoints, node.inputs[0], x.dims());
                    kernels::upsample2x_backward(&adj, &mut gx);
                    adjoints[node.inputs[0]] = Some(gx);
                }
                OpKind::Concat => {
                    let a = &values[node.inputs[0]];
                    let b = &values[node.inputs[1]];
                    let na = a.numel();
                    let mut ga = Self::adj_buffer(&mut adjoints, node.inputs[0], a.dims());
                    let mut gb = Self::adj_buffer(&mut adjoints, node.inputs[1], b.dims());
                    for (g, d) in ga.data_mut().iter_mut().zip(&adj.data()[..na]) {
                        *g = *g + *d;
                    }
                    for (g, d) in gb.data_mut().iter_mut().zip(&adj.data()[na..]) {
                        *g = *g + *d;
                    }
                    adjoints[node.inputs[0]] = Some(ga);
                    adjoints[node.inputs[1]] = Some(gb);
                }
                OpKind::Add => {
                    for k in 0..2 {
                        let dims = values[node.inputs[k]].dims().to_vec();
                        let mut g = Self::adj_buffer(&mut adjoints, node.inputs[k], &dims);
                        for (gv, d) in g.data_mut().iter_mut().zip(adj.data()) {
                            *gv = *gv + *d;
                        }
                        adjoints[node.inputs[k]] = Some(g);
                    }
                }
                OpKind::Mul => {
                    for k in 0..2 {
                        let other = &values[node.inputs[1 - k]];
                        let dims = values[node.inputs[k]].dims().to_vec();
                        let mut g = Self::adj_buffer(&mut adjoints, node.inputs[k], &dims);
                        for ((gv, d), o) in
                            g.data_mut().iter_mut().zip(adj.data()).zip(other.data())
                        {
                            *gv = *gv + *d * *o;
                        }
                        adjoints[node.inputs[k]] = Some(g);
                    }
                }
                OpKind::AffineScalar { scale, .. } => {
                    let a = T::of_f64(*scale);
                    let dims = values[node.inputs[0]].dims().to_vec();
                    let mut g = Self::adj_buffer(&mut adjoints, node.inputs[0], &dims);
                    for (gv, d) in g.data_mut().iter_mut().zip(adj.data()) {
                        *gv = *gv + a * *d;
                    }
                    adjoints[node.inputs[0]] = Some(g);
                }
                OpKind::LogClamped { eps } => {
                    let x = &values[node.inputs[0]];
                    let mut gx = Self::adj_buffer(&mut adjoints, node.inputs[0], x.dims());
                    kernels::log_clamped_backward(x, *eps, &adj, &mut gx);
                    adjoints[node.inputs[0]] = Some(gx);
                }
                OpKind::Mean => {
                    let x = &values[node.inputs[0]];
                    let mut gx = Self::adj_buffer(&mut adjoints, node.inputs[0], x.dims());
                    kernels::mean_backward(x.numel(), &adj, &mut gx);
                    adjoints[node.inputs[0]] = Some(gx);
                }
                OpKind::Resample => {
                    let src = &values[node.inputs[0]];
                    let ddf = &values[node.inputs[1]];
                    let mut gs = Self::adj_buffer(&mut adjoints, node.inputs[0], src.dims());
                    let mut gd = Self::adj_buffer(&mut adjoints, node.inputs[1], ddf.dims());
                    kernels::resample_backward(src, ddf, &adj, &mut gs, &mut gd);
                    adjoints[node.inputs[0]] = Some(gs);
                    adjoints[node.inputs[1]] = Some(gd);
                }
                OpKind::BendingEnergy => {
                    let ddf = &values[node.inputs[0]];
                    let mut gd = Self::adj_buffer(&mut adjoints, node.inputs[0], ddf.dims());
                    kernels::bending_energy_backward(ddf, &adj, &mut gd);
                    adjoints[node.inputs[0]] = Some(gd);
                }
            }
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(DiffError::NonFiniteGrad);
        }
        Ok((loss, grad))
    }

    fn adj_buffer<T: Real>(
        adjoints: &mut [Option<Tensor<T>>],
        id: NodeId,
        dims: &[usize],
    ) -> Tensor<T> {
        adjoints[id].take().unwrap_or_else(|| Tensor::zeros(dims.to_vec()))
    }
}

/// Builds graphs with eager shape checking; construction mistakes panic
/// because they are programmer errors, not runtime conditions.
#[derive(Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    dims: Vec<Vec<usize>>,
    inputs: Vec<NodeId>,
    segments: SegmentTable,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: OpKind, inputs: Vec<NodeId>, dims: Vec<usize>) -> NodeId {
        for i in &inputs {
            assert!(*i < self.nodes.len(), "node input out of order");
        }
        self.nodes.push(Node { op, inputs });
        self.dims.push(dims);
        self.nodes.len() - 1
    }

    pub fn input(&mut self, dims: Vec<usize>) -> NodeId {
        let index = self.inputs.len();
        let id = self.push(OpKind::Input { index }, vec![], dims);
        self.inputs.push(id);
        id
    }

    pub fn param(&mut self, name: &str, dims: Vec<usize>, init: InitKind) -> NodeId {
        let segment = self.segments.push(name, dims.clone(), init);
        self.push(OpKind::Param { segment }, vec![], dims)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize) -> NodeId {
        let (xc, h, win) = chw(&self.dims[x]);
        let wd = self.dims[w].clone();
        assert_eq!(wd.len(), 4, "conv weights must be 4-d");
        assert_eq!(wd[1], xc, "conv in-channel mismatch: weight {wd:?}, input c={xc}");
        assert_eq!(wd[2] % 2, 1, "odd kernels only");
        let ho = kernels::conv_out_extent(h, wd[2], stride);
        let wo = kernels::conv_out_extent(win, wd[3], stride);
        self.push(OpKind::Conv2d { stride }, vec![x, w], vec![wd[0], ho, wo])
    }

    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (c, h, w) = chw(&self.dims[x]);
        assert_eq!(self.dims[b], vec![c], "bias dims mismatch");
        self.push(OpKind::BiasAdd, vec![x, b], vec![c, h, w])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let d = self.dims[x].clone();
        self.push(OpKind::Relu, vec![x], d)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let d = self.dims[x].clone();
        self.push(OpKind::Sigmoid, vec![x], d)
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = chw(&self.dims[x]);
        self.push(OpKind::Upsample2x, vec![x], vec![c, 2 * h, 2 * w])
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ca, h, w) = chw(&self.dims[a]);
        let (cb, hb, wb) = chw(&self.dims[b]);
        assert_eq!((h, w), (hb, wb), "concat spatial dims mismatch");
        self.push(OpKind::Concat, vec![a, b], vec![ca + cb, h, w])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.dims[a], self.dims[b], "add dims mismatch");
        let d = self.dims[a].clone();
        self.push(OpKind::Add, vec![a, b], d)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.dims[a], self.dims[b], "mul dims mismatch");
        let d = self.dims[a].clone();
        self.push(OpKind::Mul, vec![a, b], d)
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let d = self.dims[x].clone();
        self.push(OpKind::AffineScalar { scale, shift }, vec![x], d)
    }

    pub fn log_clamped(&mut self, x: NodeId, eps: f64) -> NodeId {
        assert!(eps > 0.0 && eps < 0.5, "clamp eps must be in (0, 0.5)");
        let d = self.dims[x].clone();
        self.push(OpKind::LogClamped { eps }, vec![x], d)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::Mean, vec![x], vec![1])
    }

    pub fn resample(&mut self, src: NodeId, ddf: NodeId) -> NodeId {
        let (c, _, _) = chw(&self.dims[src]);
        let (d, h, w) = chw(&self.dims[ddf]);
        assert_eq!(d, 2, "ddf must have 2 channels");
        self.push(OpKind::Resample, vec![src, ddf], vec![c, h, w])
    }

    pub fn bending_energy(&mut self, ddf: NodeId) -> NodeId {
        let (_, h, w) = chw(&self.dims[ddf]);
        assert!(h >= 3 && w >= 3, "bending energy needs >= 3 extent per dim");
        self.push(OpKind::BendingEnergy, vec![ddf], vec![1])
    }

    pub fn finish(self, outputs: Vec<NodeId>) -> Graph {
        assert!(!outputs.is_empty(), "graph needs at least one output");
        Graph {
            nodes: self.nodes,
            dims: self.dims,
            inputs: self.inputs,
            outputs,
            segments: self.segments,
        }
    }
}

fn chw(dims: &[usize]) -> (usize, usize, usize) {
    assert_eq!(dims.len(), 3, "expected [c,h,w], got {dims:?}");
    (dims[0], dims[1], dims[2])
}
