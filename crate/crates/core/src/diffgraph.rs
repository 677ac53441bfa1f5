//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is an append-only arena of nodes. Children always precede
//! their parents, so node order is a topological order and the graph is
//! acyclic by construction. Shapes are checked when a node is created.
//! Values are computed lazily by [`Graph::evaluate`] and gradients by
//! [`Graph::gradient`].
//!
//! Batches are carried as matrix rows: a batch of `k` vectors of dimension
//! `n` is a `k x n` matrix, and an affine layer is `x W + 1 b`.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Value = Array2<f64>;
pub type Shape = (usize, usize);
pub type Bindings = HashMap<String, Value>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("input `{0}` is not bound")]
    MissingBinding(String),
    #[error("value for `{name}` has shape {got:?}, graph expects {expected:?}")]
    BindingShape {
        name: String,
        expected: Shape,
        got: Shape,
    },
    #[error("parameter `{0}` not found in store")]
    UnknownParameter(String),
    #[error("gradient root must have shape (1, 1), got {0:?}")]
    NonScalarRoot(Shape),
    #[error("no gradient supplied for parameter `{0}`")]
    MissingGradient(String),
    #[error("diverged: value {value} exceeds bound {bound}")]
    Divergence { value: f64, bound: f64 },
    #[error("concat of zero operands")]
    EmptyConcat,
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Expr(usize);

impl Expr {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConcatAxis {
    /// Stack vertically (more rows).
    Rows,
    /// Stack horizontally (more columns).
    Cols,
}

#[derive(Debug, Clone)]
pub enum Op {
    Constant(Value),
    Parameter(String),
    Input(String),
    Add,
    MatMul,
    Hadamard,
    Concat(ConcatAxis),
    Relu,
    Tanh,
    /// Sum of all entries, shape (1, 1).
    Sum,
    Square,
    Scale(f64),
    /// Identity in value, zero in gradient.
    Detach,
    Transpose,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub children: Vec<Expr>,
    pub shape: Shape,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Expr>,
    inputs: HashMap<String, Expr>,
    guards: Vec<(Expr, f64)>,
}

fn shape_of(v: &Value) -> Shape {
    v.dim()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, e: Expr) -> &Node {
        &self.nodes[e.0]
    }

    pub fn shape(&self, e: Expr) -> Shape {
        self.nodes[e.0].shape
    }

    fn push(&mut self, op: Op, children: Vec<Expr>, shape: Shape) -> Expr {
        self.nodes.push(Node {
            op,
            children,
            shape,
        });
        Expr(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Value) -> Expr {
        let shape = shape_of(&value);
        self.push(Op::Constant(value), Vec::new(), shape)
    }

    pub fn constant_row(&mut self, row: &[f64]) -> Expr {
        self.constant(Value::from_shape_vec((1, row.len()), row.to_vec()).expect("row shape"))
    }

    pub fn filled(&mut self, shape: Shape, value: f64) -> Expr {
        self.constant(Value::from_elem(shape, value))
    }

    /// Parameter node. Repeated requests for the same name return the same node.
    pub fn parameter(&mut self, name: &str, shape: Shape) -> Result<Expr> {
        if let Some(&e) = self.params.get(name) {
            let have = self.shape(e);
            if have != shape {
                return Err(GraphError::BindingShape {
                    name: name.to_string(),
                    expected: have,
                    got: shape,
                });
            }
            return Ok(e);
        }
        let e = self.push(Op::Parameter(name.to_string()), Vec::new(), shape);
        self.params.insert(name.to_string(), e);
        Ok(e)
    }

    pub fn input(&mut self, name: &str, shape: Shape) -> Result<Expr> {
        if let Some(&e) = self.inputs.get(name) {
            let have = self.shape(e);
            if have != shape {
                return Err(GraphError::BindingShape {
                    name: name.to_string(),
                    expected: have,
                    got: shape,
                });
            }
            return Ok(e);
        }
        let e = self.push(Op::Input(name.to_string()), Vec::new(), shape);
        self.inputs.insert(name.to_string(), e);
        Ok(e)
    }

    pub fn add(&mut self, a: Expr, b: Expr) -> Result<Expr> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(GraphError::Shape {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(self.push(Op::Add, vec![a, b], sa))
    }

    pub fn matmul(&mut self, a: Expr, b: Expr) -> Result<Expr> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(GraphError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(self.push(Op::MatMul, vec![a, b], (sa.0, sb.1)))
    }

    pub fn hadamard(&mut self, a: Expr, b: Expr) -> Result<Expr> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(GraphError::Shape {
                op: "hadamard",
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(self.push(Op::Hadamard, vec![a, b], sa))
    }

    pub fn concat(&mut self, parts: &[Expr], axis: ConcatAxis) -> Result<Expr> {
        let first = *parts.first().ok_or(GraphError::EmptyConcat)?;
        let s0 = self.shape(first);
        let mut total = 0;
        for &p in parts {
            let sp = self.shape(p);
            let ok = match axis {
                ConcatAxis::Cols => sp.0 == s0.0,
                ConcatAxis::Rows => sp.1 == s0.1,
            };
            if !ok {
                return Err(GraphError::Shape {
                    op: "concat",
                    lhs: s0,
                    rhs: sp,
                });
            }
            total += match axis {
                ConcatAxis::Cols => sp.1,
                ConcatAxis::Rows => sp.0,
            };
        }
        if parts.len() == 1 {
            return Ok(first);
        }
        let shape = match axis {
            ConcatAxis::Cols => (s0.0, total),
            ConcatAxis::Rows => (total, s0.1),
        };
        Ok(self.push(Op::Concat(axis), parts.to_vec(), shape))
    }

    pub fn hcat(&mut self, parts: &[Expr]) -> Result<Expr> {
        self.concat(parts, ConcatAxis::Cols)
    }

    pub fn vcat(&mut self, parts: &[Expr]) -> Result<Expr> {
        self.concat(parts, ConcatAxis::Rows)
    }

    fn unary(&mut self, op: Op, a: Expr) -> Expr {
        let s = self.shape(a);
        self.push(op, vec![a], s)
    }

    pub fn relu(&mut self, a: Expr) -> Expr {
        self.unary(Op::Relu, a)
    }

    pub fn tanh(&mut self, a: Expr) -> Expr {
        self.unary(Op::Tanh, a)
    }

    pub fn square(&mut self, a: Expr) -> Expr {
        self.unary(Op::Square, a)
    }

    pub fn scale(&mut self, a: Expr, c: f64) -> Expr {
        self.unary(Op::Scale(c), a)
    }

    pub fn detach(&mut self, a: Expr) -> Expr {
        self.unary(Op::Detach, a)
    }

    pub fn sum(&mut self, a: Expr) -> Expr {
        self.push(Op::Sum, vec![a], (1, 1))
    }

    pub fn transpose(&mut self, a: Expr) -> Expr {
        let (r, c) = self.shape(a);
        self.push(Op::Transpose, vec![a], (c, r))
    }

    // Compositions of the primitives above.

    pub fn neg(&mut self, a: Expr) -> Expr {
        self.scale(a, -1.0)
    }

    pub fn sub(&mut self, a: Expr, b: Expr) -> Result<Expr> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    /// Repeats a `1 x c` row `rows` times.
    pub fn broadcast_rows(&mut self, row: Expr, rows: usize) -> Result<Expr> {
        let ones = self.filled((rows, 1), 1.0);
        self.matmul(ones, row)
    }

    /// Repeats a `r x 1` column `cols` times.
    pub fn broadcast_cols(&mut self, col: Expr, cols: usize) -> Result<Expr> {
        let ones = self.filled((1, cols), 1.0);
        self.matmul(col, ones)
    }

    /// Per-row sums, shape `r x 1`.
    pub fn row_sums(&mut self, a: Expr) -> Result<Expr> {
        let ones = self.filled((self.shape(a).1, 1), 1.0);
        self.matmul(a, ones)
    }

    /// Per-row dot products of two equally shaped matrices, shape `r x 1`.
    pub fn row_dot(&mut self, a: Expr, b: Expr) -> Result<Expr> {
        let h = self.hadamard(a, b)?;
        self.row_sums(h)
    }

    pub fn mean(&mut self, a: Expr) -> Expr {
        let (r, c) = self.shape(a);
        let s = self.sum(a);
        self.scale(s, 1.0 / (r * c) as f64)
    }

    /// Columns `[start, start + width)` of `a`, via a constant selector.
    pub fn columns(&mut self, a: Expr, start: usize, width: usize) -> Result<Expr> {
        let cols = self.shape(a).1;
        if start + width > cols {
            return Err(GraphError::Shape {
                op: "columns",
                lhs: self.shape(a),
                rhs: (start, width),
            });
        }
        let mut sel = Value::zeros((cols, width));
        for j in 0..width {
            sel[[start + j, j]] = 1.0;
        }
        let sel = self.constant(sel);
        self.matmul(a, sel)
    }

    /// Fails evaluation with [`GraphError::Divergence`] if any entry of `e`
    /// exceeds `bound` in magnitude or is not finite.
    pub fn guard(&mut self, e: Expr, bound: f64) {
        self.guards.push((e, bound));
    }

    fn reachable(&self, roots: &[Expr]) -> Vec<bool> {
        let top = roots.iter().map(|r| r.0).max().unwrap_or(0);
        let mut seen = vec![false; top + 1];
        for r in roots {
            seen[r.0] = true;
        }
        for i in (0..=top).rev() {
            if seen[i] {
                for c in &self.nodes[i].children {
                    seen[c.0] = true;
                }
            }
        }
        seen
    }

    fn forward<'a>(
        &'a self,
        roots: &[Expr],
        store: &'a ParamStore,
        bindings: &'a Bindings,
    ) -> Result<Vec<Option<Cow<'a, Value>>>> {
        let live = self.reachable(roots);
        let root = Expr(live.len() - 1);
        let mut guard_at: HashMap<usize, f64> = HashMap::new();
        for &(e, b) in &self.guards {
            if e.0 <= root.0 && live[e.0] {
                let entry = guard_at.entry(e.0).or_insert(b);
                *entry = entry.min(b);
            }
        }
        let mut vals: Vec<Option<Cow<'a, Value>>> = Vec::with_capacity(root.0 + 1);
        for i in 0..=root.0 {
            if !live[i] {
                vals.push(None);
                continue;
            }
            let node = &self.nodes[i];
            let get = |k: usize| -> &Value { vals[node.children[k].0].as_deref().expect("child") };
            let v: Cow<'a, Value> = match &node.op {
                Op::Constant(v) => Cow::Borrowed(v),
                Op::Parameter(name) => {
                    let v = store.value(name)?;
                    check_shape(name, node.shape, v)?;
                    Cow::Borrowed(v)
                }
                Op::Input(name) => {
                    let v = bindings
                        .get(name)
                        .ok_or_else(|| GraphError::MissingBinding(name.clone()))?;
                    check_shape(name, node.shape, v)?;
                    Cow::Borrowed(v)
                }
                Op::Add => Cow::Owned(get(0) + get(1)),
                Op::MatMul => Cow::Owned(get(0).dot(get(1))),
                Op::Hadamard => Cow::Owned(get(0) * get(1)),
                Op::Concat(axis) => {
                    let views: Vec<_> = node
                        .children
                        .iter()
                        .map(|c| vals[c.0].as_deref().expect("child").view())
                        .collect();
                    let ax = match axis {
                        ConcatAxis::Rows => Axis(0),
                        ConcatAxis::Cols => Axis(1),
                    };
                    Cow::Owned(concatenate(ax, &views).expect("shapes checked at construction"))
                }
                Op::Relu => Cow::Owned(get(0).mapv(|x| if x > 0.0 { x } else { 0.0 })),
                Op::Tanh => Cow::Owned(get(0).mapv(f64::tanh)),
                Op::Sum => Cow::Owned(Value::from_elem((1, 1), pairwise_sum(get(0)))),
                Op::Square => Cow::Owned(get(0).mapv(|x| x * x)),
                Op::Scale(c) => {
                    let c = *c;
                    Cow::Owned(get(0).mapv(|x| c * x))
                }
                Op::Detach => match vals[node.children[0].0].as_ref().expect("child") {
                    Cow::Borrowed(v) => Cow::Borrowed(*v),
                    Cow::Owned(v) => Cow::Owned(v.clone()),
                },
                Op::Transpose => Cow::Owned(get(0).t().to_owned()),
            };
            if let Some(&bound) = guard_at.get(&i) {
                for &x in v.iter() {
                    if !x.is_finite() || x.abs() > bound {
                        return Err(GraphError::Divergence { value: x, bound });
                    }
                }
            }
            vals.push(Some(v));
        }
        Ok(vals)
    }

    pub fn evaluate(&self, root: Expr, store: &ParamStore, bindings: &Bindings) -> Result<Value> {
        let mut vals = self.forward(&[root], store, bindings)?;
        Ok(vals[root.0].take().expect("root evaluated").into_owned())
    }

    /// Evaluates several roots sharing one forward pass.
    pub fn evaluate_many(
        &self,
        roots: &[Expr],
        store: &ParamStore,
        bindings: &Bindings,
    ) -> Result<Vec<Value>> {
        if roots.is_empty() {
            return Ok(Vec::new());
        }
        let vals = self.forward(roots, store, bindings)?;
        Ok(roots
            .iter()
            .map(|r| vals[r.0].as_deref().expect("root").clone())
            .collect())
    }

    pub fn gradient(&self, root: Expr, store: &ParamStore, bindings: &Bindings) -> Result<Gradients> {
        Ok(self.value_and_gradient(root, store, bindings)?.1)
    }

    /// Scalar value of `root` and the gradient of every parameter in `store`.
    /// Parameters the root does not depend on get zero gradients.
    pub fn value_and_gradient(
        &self,
        root: Expr,
        store: &ParamStore,
        bindings: &Bindings,
    ) -> Result<(f64, Gradients)> {
        let (value, grads, _) = self.value_and_gradient_with(root, &[], store, bindings)?;
        Ok((value, grads))
    }

    /// Like [`Graph::value_and_gradient`], also returning the values of
    /// `extras` (nodes of the same graph) from the shared forward pass.
    pub fn value_and_gradient_with(
        &self,
        root: Expr,
        extras: &[Expr],
        store: &ParamStore,
        bindings: &Bindings,
    ) -> Result<(f64, Gradients, Vec<Value>)> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(GraphError::NonScalarRoot(shape));
        }
        if let Some(e) = extras.iter().find(|e| e.0 > root.0) {
            return Err(GraphError::Shape {
                op: "extra node after root",
                lhs: (e.0, 0),
                rhs: (root.0, 0),
            });
        }
        let mut roots = vec![root];
        roots.extend_from_slice(extras);
        let vals = self.forward(&roots, store, bindings)?;
        let extra_values: Vec<Value> = extras
            .iter()
            .map(|e| vals[e.0].as_deref().expect("extra").clone())
            .collect();
        let n = root.0 + 1;

        // Nodes that lead to a parameter without crossing a detach.
        let mut needs = vec![false; n];
        for i in 0..n {
            if vals[i].is_none() {
                continue;
            }
            let node = &self.nodes[i];
            needs[i] = match node.op {
                Op::Parameter(_) => true,
                Op::Detach | Op::Constant(_) | Op::Input(_) => false,
                _ => node.children.iter().any(|c| needs[c.0]),
            };
        }

        let mut grads: Vec<Option<Value>> = vec![None; n];
        grads[root.0] = Some(Value::from_elem((1, 1), 1.0));
        let value = vals[root.0].as_deref().expect("root")[[0, 0]];
        let mut out = Gradients::zeros_like(store);

        for i in (0..n).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |k: usize| -> &Value { vals[node.children[k].0].as_deref().expect("child") };
            let ch = &node.children;
            match &node.op {
                Op::Parameter(name) => {
                    let slot = out.0.get_mut(name).ok_or_else(|| GraphError::UnknownParameter(name.clone()))?;
                    *slot += &g;
                }
                Op::Constant(_) | Op::Input(_) | Op::Detach => {}
                Op::Add => {
                    if needs[ch[0].0] {
                        accumulate(&mut grads[ch[0].0], Cow::Borrowed(&g));
                    }
                    if needs[ch[1].0] {
                        accumulate(&mut grads[ch[1].0], Cow::Owned(g));
                    }
                }
                Op::MatMul => {
                    if needs[ch[0].0] {
                        let ga = g.dot(&val(1).t());
                        accumulate(&mut grads[ch[0].0], Cow::Owned(ga));
                    }
                    if needs[ch[1].0] {
                        let gb = val(0).t().dot(&g);
                        accumulate(&mut grads[ch[1].0], Cow::Owned(gb));
                    }
                }
                Op::Hadamard => {
                    if needs[ch[0].0] {
                        accumulate(&mut grads[ch[0].0], Cow::Owned(&g * val(1)));
                    }
                    if needs[ch[1].0] {
                        accumulate(&mut grads[ch[1].0], Cow::Owned(&g * val(0)));
                    }
                }
                Op::Concat(axis) => {
                    let mut offset = 0;
                    for c in ch {
                        let (r, cc) = self.shape(*c);
                        let width = if *axis == ConcatAxis::Cols { cc } else { r };
                        if needs[c.0] {
                            let part = match axis {
                                ConcatAxis::Cols => g.slice(s![.., offset..offset + width]).to_owned(),
                                ConcatAxis::Rows => g.slice(s![offset..offset + width, ..]).to_owned(),
                            };
                            accumulate(&mut grads[c.0], Cow::Owned(part));
                        }
                        offset += width;
                    }
                }
                Op::Relu => {
                    let mut ga = g;
                    ndarray::Zip::from(&mut ga).and(val(0)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    accumulate(&mut grads[ch[0].0], Cow::Owned(ga));
                }
                Op::Tanh => {
                    let y = vals[i].as_deref().expect("tanh value");
                    let mut ga = g;
                    ndarray::Zip::from(&mut ga).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                    accumulate(&mut grads[ch[0].0], Cow::Owned(ga));
                }
                Op::Sum => {
                    let ga = Value::from_elem(self.shape(ch[0]), g[[0, 0]]);
                    accumulate(&mut grads[ch[0].0], Cow::Owned(ga));
                }
                Op::Square => {
                    let mut ga = g;
                    ndarray::Zip::from(&mut ga).and(val(0)).for_each(|d, &x| *d *= 2.0 * x);
                    accumulate(&mut grads[ch[0].0], Cow::Owned(ga));
                }
                Op::Scale(c) => {
                    let c = *c;
                    accumulate(&mut grads[ch[0].0], Cow::Owned(g.mapv(|x| c * x)));
                }
                Op::Transpose => {
                    accumulate(&mut grads[ch[0].0], Cow::Owned(g.t().to_owned()));
                }
            }
        }
        Ok((value, out, extra_values))
    }
}

fn check_shape(name: &str, expected: Shape, v: &Value) -> Result<()> {
    let got = shape_of(v);
    if got != expected {
        return Err(GraphError::BindingShape {
            name: name.to_string(),
            expected,
            got,
        });
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Value>, g: Cow<'_, Value>) {
    match slot {
        Some(acc) => *acc += g.as_ref(),
        None => *slot = Some(g.into_owned()),
    }
}

/// Pairwise summation over the entries in logical (row-major) order.
pub fn pairwise_sum(v: &Value) -> f64 {
    fn rec(xs: &[f64]) -> f64 {
        if xs.len() <= 8 {
            return xs.iter().sum();
        }
        let mid = xs.len() / 2;
        rec(&xs[..mid]) + rec(&xs[mid..])
    }
    match v.as_slice() {
        Some(xs) => rec(xs),
        None => rec(&v.iter().copied().collect::<Vec<_>>()),
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub BTreeMap<String, Value>);

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients(
            store
                .params
                .iter()
                .map(|(k, p)| (k.clone(), Value::zeros(p.value.dim())))
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.0.get(name)
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Value,
    first_moment: Value,
    second_moment: Value,
}

impl Param {
    pub fn new(value: Value) -> Self {
        let dim = value.dim();
        Self {
            value,
            first_moment: Value::zeros(dim),
            second_moment: Value::zeros(dim),
        }
    }
}

/// Named parameters plus Adam state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Value) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn value(&self, name: &str) -> Result<&Value> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| GraphError::UnknownParameter(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Value> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| GraphError::UnknownParameter(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Moves every parameter of `other` into `self`.
    pub fn merge(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// One bias-corrected Adam update.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        for (name, p) in &self.params {
            let g = grads
                .get(name)
                .ok_or_else(|| GraphError::MissingGradient(name.clone()))?;
            if g.dim() != p.value.dim() {
                return Err(GraphError::BindingShape {
                    name: name.clone(),
                    expected: p.value.dim(),
                    got: g.dim(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in self.params.iter_mut() {
            let g = &grads.0[name];
            ndarray::Zip::from(&mut p.value)
                .and(&mut p.first_moment)
                .and(&mut p.second_moment)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                });
        }
        Ok(())
    }
}

/// Serialized form of a single matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Value> for MatrixData {
    fn from(v: &Value) -> Self {
        MatrixData {
            rows: v.nrows(),
            cols: v.ncols(),
            data: v.iter().copied().collect(),
        }
    }
}

impl TryFrom<MatrixData> for Value {
    type Error = GraphError;

    fn try_from(m: MatrixData) -> Result<Self> {
        let got = (m.data.len(), 1);
        Value::from_shape_vec((m.rows, m.cols), m.data).map_err(|_| GraphError::BindingShape {
            name: "matrix".into(),
            expected: (m.rows, m.cols),
            got,
        })
    }
}

impl Serialize for ParamStore {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let map: BTreeMap<&str, MatrixData> = self
            .params
            .iter()
            .map(|(k, p)| (k.as_str(), MatrixData::from(&p.value)))
            .collect();
        map.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ParamStore {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, MatrixData>::deserialize(deserializer)?;
        let mut store = ParamStore::new();
        for (k, m) in map {
            let v = Value::try_from(m).map_err(serde::de::Error::custom)?;
            store.insert(k, v);
        }
        Ok(store)
    }
}
