//! Reverse-mode differentiation over small dense computation graphs.
//!
//! A [`Graph`] is declared once (inputs, parameters, operations, output) and
//! then evaluated many times. Every node value is a 2-D array whose rows are
//! batch entries; reductions produce a `1 x 1` array. Parameters live inside
//! the graph and stay fixed until rebound, so a graph built for one network
//! can be reused for every state of an episode.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input {
        slot: usize,
    },
    Param {
        slot: usize,
    },
    Const(Array2<T>),
    /// `x · wᵀ + b`, with `w: out x in` and `b: 1 x out`.
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Tanh(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    /// `Σ (a - b)²` over every element.
    SquaredError(NodeId, NodeId),
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    cols: usize,
    on_input_path: bool,
    on_param_path: bool,
}

/// Gradient of the seeded output.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<T> {
    /// Adjoint of input slot 0, flattened row-major.
    pub wrt_inputs: Vec<T>,
    /// Parameter adjoints concatenated in declaration order, each row-major.
    pub wrt_params: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Targets {
    All,
    InputsOnly,
}

#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    inputs: Vec<(NodeId, usize)>,
    params: Vec<(NodeId, Array2<T>)>,
    output: Option<NodeId>,
    values: Vec<Array2<T>>,
    adjoints: Vec<Array2<T>>,
    forwarded: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            inputs: Vec::new(),
            params: Vec::new(),
            output: None,
            values: Vec::new(),
            adjoints: Vec::new(),
            forwarded: false,
        }
    }

    fn push(&mut self, op: Op<T>, cols: usize) -> NodeId {
        let deps: Vec<NodeId> = match &op {
            Op::Input { .. } | Op::Param { .. } | Op::Const(_) => Vec::new(),
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Scale(a, _)
            | Op::Sum(a) => vec![*a],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::SquaredError(a, b) => {
                vec![*a, *b]
            }
        };
        let on_input_path =
            matches!(op, Op::Input { .. }) || deps.iter().any(|d| self.nodes[d.0].on_input_path);
        let on_param_path =
            matches!(op, Op::Param { .. }) || deps.iter().any(|d| self.nodes[d.0].on_param_path);
        self.nodes.push(Node {
            op,
            cols,
            on_input_path,
            on_param_path,
        });
        self.forwarded = false;
        NodeId(self.nodes.len() - 1)
    }

    fn cols(&self, id: NodeId) -> usize {
        self.nodes[id.0].cols
    }

    /// Declares a data input with `cols` columns. Inputs are bound
    /// positionally at [`Graph::forward`].
    pub fn input(&mut self, cols: usize) -> NodeId {
        let slot = self.inputs.len();
        let id = self.push(Op::Input { slot }, cols);
        self.inputs.push((id, cols));
        id
    }

    pub fn param(&mut self, value: Array2<T>) -> NodeId {
        let slot = self.params.len();
        let id = self.push(Op::Param { slot }, value.ncols());
        self.params.push((id, value));
        id
    }

    pub fn constant(&mut self, value: Array2<T>) -> NodeId {
        let cols = value.ncols();
        self.push(Op::Const(value), cols)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let w_shape = self.param_shape(w);
        assert_eq!(self.cols(x), w_shape.1, "affine: input width");
        assert_eq!(self.cols(b), w_shape.0, "affine: bias width");
        self.push(Op::Affine { x, w, b }, w_shape.0)
    }

    fn param_shape(&self, id: NodeId) -> (usize, usize) {
        match &self.nodes[id.0].op {
            Op::Param { slot } => self.params[*slot].1.dim(),
            Op::Const(v) => v.dim(),
            _ => panic!("affine weights must be a parameter or constant"),
        }
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let c = self.cols(a);
        self.push(Op::Tanh(a), c)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let c = self.cols(a);
        self.push(Op::Relu(a), c)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let c = self.cols(a);
        self.push(Op::Softplus(a), c)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let c = self.cols(a);
        self.push(Op::Sigmoid(a), c)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let c = self.cols(a);
        self.push(Op::Log(a), c)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let c = self.cols(a);
        self.push(Op::Exp(a), c)
    }

    /// Elementwise sum; `b` may be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let c = self.binary_cols(a, b);
        self.push(Op::Add(a, b), c)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let c = self.binary_cols(a, b);
        self.push(Op::Sub(a, b), c)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let c = self.binary_cols(a, b);
        self.push(Op::Mul(a, b), c)
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let c = self.cols(a);
        self.push(Op::Scale(a, factor), c)
    }

    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_cols(a, b);
        self.push(Op::SquaredError(a, b), 1)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), 1)
    }

    fn binary_cols(&self, a: NodeId, b: NodeId) -> usize {
        let (ca, cb) = (self.cols(a), self.cols(b));
        assert_eq!(ca, cb, "elementwise op: column mismatch");
        ca
    }

    pub fn set_output(&mut self, id: NodeId) {
        assert!(id.0 < self.nodes.len());
        self.output = Some(id);
        self.forwarded = false;
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn num_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn input_cols(&self, slot: usize) -> usize {
        self.inputs[slot].1
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn param_value(&self, id: NodeId) -> Option<&Array2<T>> {
        match self.nodes.get(id.0).map(|n| &n.op) {
            Some(Op::Param { slot }) => Some(&self.params[*slot].1),
            _ => None,
        }
    }

    /// Parameters flattened in declaration order.
    pub fn params_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, v) in &self.params {
            out.extend(v.iter().copied());
        }
        out
    }

    /// Rebinds every parameter from a flat vector in declaration order.
    pub fn set_params_flat(&mut self, flat: &[T]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(Error::DimensionMismatch {
                context: "graph parameters",
                expected: n,
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        for (_, v) in &mut self.params {
            let len = v.len();
            for (dst, src) in v.iter_mut().zip(&flat[offset..offset + len]) {
                *dst = *src;
            }
            offset += len;
        }
        self.forwarded = false;
        Ok(())
    }

    /// Evaluates every node. `inputs[k]` binds input slot `k`.
    pub fn forward(&mut self, inputs: &[ArrayView2<'_, T>]) -> Result<&Array2<T>> {
        let out = self
            .output
            .ok_or_else(|| Error::InvalidGraph("no output node".into()))?;
        if inputs.len() != self.inputs.len() {
            return Err(Error::DimensionMismatch {
                context: "graph input count",
                expected: self.inputs.len(),
                actual: inputs.len(),
            });
        }
        for (x, (_, cols)) in inputs.iter().zip(&self.inputs) {
            if x.ncols() != *cols {
                return Err(Error::DimensionMismatch {
                    context: "graph input width",
                    expected: *cols,
                    actual: x.ncols(),
                });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("graph input"));
            }
        }

        self.forwarded = false;
        let mut values: Vec<Array2<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Input { slot } => inputs[*slot].to_owned(),
                Op::Param { slot } => self.params[*slot].1.clone(),
                Op::Const(c) => c.clone(),
                Op::Affine { x, w, b } => {
                    let mut y = values[x.0].dot(&values[w.0].t());
                    y += &values[b.0];
                    y
                }
                Op::Tanh(a) => values[a.0].mapv(|v| v.tanh()),
                Op::Relu(a) => values[a.0].mapv(|v| v.max(T::zero())),
                Op::Softplus(a) => values[a.0].mapv(scalar::softplus),
                Op::Sigmoid(a) => values[a.0].mapv(scalar::sigmoid),
                Op::Log(a) => values[a.0].mapv(|v| v.ln()),
                Op::Exp(a) => values[a.0].mapv(|v| v.exp()),
                Op::Add(a, b) => {
                    check_broadcast(&values[a.0], &values[b.0])?;
                    &values[a.0] + &values[b.0]
                }
                Op::Sub(a, b) => {
                    check_broadcast(&values[a.0], &values[b.0])?;
                    &values[a.0] - &values[b.0]
                }
                Op::Mul(a, b) => {
                    check_broadcast(&values[a.0], &values[b.0])?;
                    &values[a.0] * &values[b.0]
                }
                Op::Scale(a, c) => values[a.0].mapv(|v| v * *c),
                Op::SquaredError(a, b) => {
                    check_broadcast(&values[a.0], &values[b.0])?;
                    let d = &values[a.0] - &values[b.0];
                    let s = d.iter().fold(T::zero(), |acc, &e| acc + e * e);
                    Array2::from_elem((1, 1), s)
                }
                Op::Sum(a) => Array2::from_elem((1, 1), values[a.0].sum()),
            };
            values.push(v);
        }
        self.values = values;
        self.forwarded = true;
        Ok(&self.values[out.0])
    }

    /// Single-row convenience wrapper for graphs with one input.
    pub fn forward_vec(&mut self, x: &[T]) -> Result<Vec<T>> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.forward(&[view])?.iter().copied().collect())
    }

    pub fn value(&self, id: NodeId) -> Option<&Array2<T>> {
        if self.forwarded {
            self.values.get(id.0)
        } else {
            None
        }
    }

    /// Adjoint of a node from the most recent backward pass.
    pub fn adjoint(&self, id: NodeId) -> Option<&Array2<T>> {
        self.adjoints.get(id.0)
    }

    /// Propagates `seed` (shaped like the output) back to inputs and parameters.
    pub fn backward(&mut self, seed: ArrayView2<'_, T>) -> Result<Gradient<T>> {
        self.propagate(seed, Targets::All)?;
        let wrt_inputs = self.input_adjoint_flat(0);
        let mut wrt_params = Vec::with_capacity(self.num_params());
        for (id, _) in &self.params {
            wrt_params.extend(self.adjoints[id.0].iter().copied());
        }
        if wrt_params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter gradient"));
        }
        Ok(Gradient {
            wrt_inputs,
            wrt_params,
        })
    }

    /// Like [`Graph::backward`] but skips parameter adjoints entirely.
    pub fn input_gradient(&mut self, seed: ArrayView2<'_, T>) -> Result<Vec<T>> {
        self.propagate(seed, Targets::InputsOnly)?;
        Ok(self.input_adjoint_flat(0))
    }

    /// Flattened adjoint of input slot `slot` from the last backward pass.
    pub fn input_adjoint(&self, slot: usize) -> Option<Vec<T>> {
        let (id, _) = self.inputs.get(slot)?;
        self.adjoints.get(id.0).map(|a| a.iter().copied().collect())
    }

    fn input_adjoint_flat(&self, slot: usize) -> Vec<T> {
        match self.inputs.get(slot) {
            Some((id, _)) => self.adjoints[id.0].iter().copied().collect(),
            None => Vec::new(),
        }
    }

    fn propagate(&mut self, seed: ArrayView2<'_, T>, targets: Targets) -> Result<()> {
        if !self.forwarded {
            return Err(Error::BackwardBeforeForward);
        }
        let out = self.output.expect("forwarded graphs have an output");
        if seed.dim() != self.values[out.0].dim() {
            return Err(Error::DimensionMismatch {
                context: "backward seed",
                expected: self.values[out.0].len(),
                actual: seed.len(),
            });
        }
        if seed.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("backward seed"));
        }

        let wanted = |n: &Node<T>| match targets {
            Targets::All => n.on_input_path || n.on_param_path,
            Targets::InputsOnly => n.on_input_path,
        };

        let mut adj: Vec<Array2<T>> = self.values.iter().map(|v| Array2::zeros(v.dim())).collect();
        adj[out.0] += &seed;

        for i in (0..=out.0).rev() {
            if !wanted(&self.nodes[i]) {
                continue;
            }
            let g = std::mem::replace(&mut adj[i], Array2::zeros((0, 0)));
            let vals = &self.values;
            let need = |id: &NodeId| wanted(&self.nodes[id.0]);
            match &self.nodes[i].op {
                Op::Input { .. } | Op::Param { .. } | Op::Const(_) => {}
                Op::Affine { x, w, b } => {
                    if need(x) {
                        adj[x.0] += &g.dot(&vals[w.0]);
                    }
                    if need(w) {
                        adj[w.0] += &g.t().dot(&vals[x.0]);
                    }
                    if need(b) {
                        adj[b.0] += &g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    }
                }
                Op::Tanh(a) => {
                    let y = &vals[i];
                    adj[a.0].zip_mut_with(&(&g * &y.mapv(|v| T::one() - v * v)), |d, s| *d += *s);
                }
                Op::Relu(a) => {
                    let x = &vals[a.0];
                    ndarray::Zip::from(&mut adj[a.0])
                        .and(&g)
                        .and(x)
                        .for_each(|d, &gv, &xv| {
                            if xv > T::zero() {
                                *d += gv
                            }
                        });
                }
                Op::Softplus(a) => {
                    let x = &vals[a.0];
                    ndarray::Zip::from(&mut adj[a.0])
                        .and(&g)
                        .and(x)
                        .for_each(|d, &gv, &xv| *d += gv * scalar::sigmoid(xv));
                }
                Op::Sigmoid(a) => {
                    let y = &vals[i];
                    ndarray::Zip::from(&mut adj[a.0])
                        .and(&g)
                        .and(y)
                        .for_each(|d, &gv, &yv| *d += gv * yv * (T::one() - yv));
                }
                Op::Log(a) => {
                    let x = &vals[a.0];
                    ndarray::Zip::from(&mut adj[a.0])
                        .and(&g)
                        .and(x)
                        .for_each(|d, &gv, &xv| *d += gv / xv);
                }
                Op::Exp(a) => {
                    let y = &vals[i];
                    ndarray::Zip::from(&mut adj[a.0])
                        .and(&g)
                        .and(y)
                        .for_each(|d, &gv, &yv| *d += gv * yv);
                }
                Op::Add(a, b) => {
                    if need(a) {
                        adj[a.0] += &g;
                    }
                    if need(b) {
                        accumulate_broadcast(&mut adj[b.0], &g, T::one());
                    }
                }
                Op::Sub(a, b) => {
                    if need(a) {
                        adj[a.0] += &g;
                    }
                    if need(b) {
                        accumulate_broadcast(&mut adj[b.0], &g, -T::one());
                    }
                }
                Op::Mul(a, b) => {
                    if need(a) {
                        adj[a.0] += &(&g * &vals[b.0]);
                    }
                    if need(b) {
                        let gb = &g * &vals[a.0];
                        accumulate_broadcast(&mut adj[b.0], &gb, T::one());
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    adj[a.0].zip_mut_with(&g, |d, &gv| *d += gv * c);
                }
                Op::SquaredError(a, b) => {
                    let two_g = T::lit(2.0) * g[[0, 0]];
                    let diff = (&vals[a.0] - &vals[b.0]).mapv(|v| v * two_g);
                    if need(a) {
                        adj[a.0] += &diff;
                    }
                    if need(b) {
                        accumulate_broadcast(&mut adj[b.0], &diff, -T::one());
                    }
                }
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    adj[a.0].mapv_inplace(|d| d + s);
                }
            }
            adj[i] = g;
        }
        self.adjoints = adj;
        Ok(())
    }
}

fn check_broadcast<T>(a: &Array2<T>, b: &Array2<T>) -> Result<()> {
    if a.ncols() != b.ncols() || (a.nrows() != b.nrows() && b.nrows() != 1) {
        return Err(Error::DimensionMismatch {
            context: "elementwise operands",
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

fn accumulate_broadcast<T: Scalar>(dst: &mut Array2<T>, g: &Array2<T>, sign: T) {
    if dst.nrows() == g.nrows() {
        dst.zip_mut_with(g, |d, &v| *d += sign * v);
    } else {
        let summed = g.sum_axis(Axis(0));
        for (d, &v) in dst.row_mut(0).iter_mut().zip(summed.iter()) {
            *d += sign * v;
        }
    }
}

/// Central-difference estimate of `∂⟨seed, output⟩ / ∂input₀` for a
/// single-row input. Other input slots are held at `extra`. Uses forward
/// evaluations only.
pub fn finite_diff_oracle_with<T: Scalar>(
    graph: &mut Graph<T>,
    input: &[T],
    extra: &[ArrayView2<'_, T>],
    seed: Option<&Array2<T>>,
    h: T,
) -> Result<Vec<T>> {
    assert!(h > T::zero(), "finite difference step must be positive");
    let mut x = input.to_vec();
    let eval = |g: &mut Graph<T>, x: &[T]| -> Result<T> {
        let row = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let mut views = vec![row];
        views.extend(extra.iter().cloned());
        let out = g.forward(&views)?;
        Ok(match seed {
            Some(s) => out.iter().zip(s.iter()).map(|(&o, &w)| o * w).sum(),
            None => out.sum(),
        })
    };
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = eval(graph, &x)?;
        x[i] = orig - h;
        let down = eval(graph, &x)?;
        x[i] = orig;
        grad.push((up - down) / (T::lit(2.0) * h));
    }
    Ok(grad)
}

/// Central-difference input gradient of the summed output of a one-input graph.
pub fn finite_diff_oracle<T: Scalar>(graph: &mut Graph<T>, input: &[T], h: T) -> Result<Vec<T>> {
    finite_diff_oracle_with(graph, input, &[], None, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn square_graph() -> Graph<f64> {
        let mut g = Graph::new();
        let x = g.input(1);
        let y = g.mul(x, x);
        g.set_output(y);
        g
    }

    #[test]
    fn tanh_of_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.input(1);
        let y = g.tanh(x);
        g.set_output(y);
        assert_eq!(g.forward_vec(&[0.0]).unwrap(), vec![0.0]);
        let grad = g.backward(array![[1.0]].view()).unwrap();
        assert_eq!(grad.wrt_inputs, vec![1.0]);
    }

    #[test]
    fn identity_affine() {
        let mut g = Graph::<f64>::new();
        let x = g.input(2);
        let w = g.param(array![[1.0, 0.0], [0.0, 1.0]]);
        let b = g.param(array![[0.0, 0.0]]);
        let y = g.affine(x, w, b);
        g.set_output(y);
        assert_eq!(g.forward_vec(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn two_layer_hand_evaluation() {
        // y = w2 · tanh(W1 x + b1) + b2
        let mut g = Graph::<f64>::new();
        let x = g.input(2);
        let w1 = g.param(array![[0.5, -0.25], [0.1, 0.2]]);
        let b1 = g.param(array![[0.1, -0.1]]);
        let w2 = g.param(array![[1.5, -2.0]]);
        let b2 = g.param(array![[0.3]]);
        let h = g.affine(x, w1, b1);
        let h = g.tanh(h);
        let y = g.affine(h, w2, b2);
        g.set_output(y);
        let out = g.forward_vec(&[1.0, 2.0]).unwrap();
        // hidden pre-activations: 0.5 - 0.5 + 0.1 = 0.1 ; 0.1 + 0.4 - 0.1 = 0.4
        let expected = 1.5 * 0.1f64.tanh() - 2.0 * 0.4f64.tanh() + 0.3;
        assert!((out[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn square_derivative() {
        let mut g = square_graph();
        g.forward_vec(&[3.0]).unwrap();
        let grad = g.backward(array![[1.0]].view()).unwrap();
        assert_eq!(grad.wrt_inputs, vec![6.0]);
        let fd = finite_diff_oracle(&mut g, &[3.0], 1e-4).unwrap();
        assert!((fd[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn sum_oracle_is_all_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.input(4);
        let s = g.sum(x);
        g.set_output(s);
        let fd = finite_diff_oracle(&mut g, &[0.3, -7.0, 2.0, 1e3], 1e-4).unwrap();
        for v in fd {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_before_forward_is_rejected() {
        let mut g = square_graph();
        assert!(matches!(
            g.backward(array![[1.0]].view()),
            Err(Error::BackwardBeforeForward)
        ));
    }

    #[test]
    fn input_width_is_checked() {
        let mut g = square_graph();
        assert!(matches!(
            g.forward_vec(&[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            g.forward_vec(&[f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn seed_shape_is_checked() {
        let mut g = square_graph();
        g.forward_vec(&[1.0]).unwrap();
        assert!(g.backward(array![[1.0, 1.0]].view()).is_err());
    }

    #[test]
    fn broadcast_row_gradient_sums_over_batch() {
        let mut g = Graph::<f64>::new();
        let x = g.input(2);
        let w = g.param(array![[2.0, 3.0]]);
        let y = g.mul(x, w);
        let s = g.sum(y);
        g.set_output(s);
        let batch = array![[1.0, 2.0], [3.0, 4.0]];
        g.forward(&[batch.view()]).unwrap();
        let grad = g.backward(array![[1.0]].view()).unwrap();
        assert_eq!(grad.wrt_params, vec![4.0, 6.0]);
        assert_eq!(grad.wrt_inputs, vec![2.0, 3.0, 2.0, 3.0]);
    }

    #[test]
    fn elementwise_primitives_match_finite_differences() {
        let x0 = [0.7, -0.4, 1.3];
        type Build = fn(&mut Graph<f64>, NodeId) -> NodeId;
        let cases: Vec<(&str, Build)> = vec![
            ("tanh", |g, x| g.tanh(x)),
            ("relu", |g, x| g.relu(x)),
            ("softplus", |g, x| g.softplus(x)),
            ("sigmoid", |g, x| g.sigmoid(x)),
            ("exp", |g, x| g.exp(x)),
            ("log", |g, x| {
                let e = g.exp(x);
                g.log(e)
            }),
            ("scale", |g, x| g.scale(x, -2.5)),
            ("sub", |g, x| {
                let t = g.tanh(x);
                g.sub(t, x)
            }),
            ("sqerr", |g, x| {
                let c = g.constant(array![[0.1, 0.2, 0.3]]);
                g.squared_error(x, c)
            }),
        ];
        for (name, build) in cases {
            let mut g = Graph::<f64>::new();
            let x = g.input(3);
            let y = build(&mut g, x);
            let s = g.sum(y);
            g.set_output(s);
            g.forward_vec(&x0).unwrap();
            let grad = g.backward(array![[1.0]].view()).unwrap();
            let fd = finite_diff_oracle(&mut g, &x0, 1e-5).unwrap();
            for (a, b) in grad.wrt_inputs.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-7, "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn inputs_only_matches_full_backward() {
        let mut g = Graph::<f64>::new();
        let x = g.input(2);
        let w = g.param(array![[0.3, -0.2], [0.5, 0.9], [1.0, 0.1]]);
        let b = g.param(array![[0.0, 0.1, -0.1]]);
        let h = g.affine(x, w, b);
        let h = g.tanh(h);
        let s = g.sum(h);
        g.set_output(s);
        g.forward_vec(&[0.4, -1.1]).unwrap();
        let full = g.backward(array![[1.0]].view()).unwrap();
        let only = g.input_gradient(array![[1.0]].view()).unwrap();
        assert_eq!(full.wrt_inputs, only);
        assert_eq!(full.wrt_params.len(), 9);
    }
}
