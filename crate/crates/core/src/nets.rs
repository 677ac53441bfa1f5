//! Parameterized models built as graphs over [`crate::diffgraph`].
//!
//! Every network owns a parameter-name prefix and reads its weights from a
//! shared [`ParamStore`]. Building a network into a graph never touches the
//! store; values are resolved at evaluation time.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffgraph::{Expr, Graph, GraphError, ParamStore, Value};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("input gradient needs smooth activations, found {0:?}")]
    UnsupportedActivation(Activation),
    #[error("input gradient needs a scalar-output network, output width is {0}")]
    NonScalarOutput(usize),
    #[error("camera index {index} outside 1..={count}")]
    CameraIndex { index: usize, count: usize },
    #[error("invalid network spec: {0}")]
    Spec(String),
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Expr) -> Expr {
        match self {
            Activation::None => x,
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
        }
    }
}

/// Whether a network's parameters receive gradient in a given graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    Trainable,
    /// Parameters enter the graph through `detach`; inputs still get gradient.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Layer widths including input and output, e.g. `[4, 8, 1]`.
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, hidden: Activation, output: Activation) -> Self {
        Self {
            widths,
            hidden,
            output,
        }
    }

    /// Input width, hidden widths, output width.
    pub fn tanh(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self::new(widths, Activation::Tanh, Activation::None)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(NetError::Spec("an MLP needs at least one layer".into()));
        }
        if self.widths.contains(&0) {
            return Err(NetError::Spec("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Standalone initialization of an MLP under the prefix `mlp`.
pub fn init(spec: &MlpSpec, seed: u64) -> Result<ParamStore> {
    let mlp = Mlp::new("mlp", spec.clone())?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mlp.init_into(&mut store, &mut rng);
    Ok(store)
}

fn uniform_matrix(rng: &mut impl Rng, shape: (usize, usize), bound: f64) -> Value {
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-bound..=bound))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub prefix: String,
    pub spec: MlpSpec,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            prefix: prefix.into(),
            spec,
        })
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.w{}", self.prefix, layer)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.b{}", self.prefix, layer)
    }

    fn shapes(&self, layer: usize) -> ((usize, usize), (usize, usize)) {
        let (i, o) = (self.spec.widths[layer], self.spec.widths[layer + 1]);
        ((i, o), (1, o))
    }

    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init_into(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in 0..self.spec.layer_count() {
            let (ws, bs) = self.shapes(l);
            let bound = 1.0 / (ws.0 as f64).sqrt();
            store.insert(self.weight_name(l), uniform_matrix(rng, ws, bound));
            store.insert(self.bias_name(l), uniform_matrix(rng, bs, bound));
        }
    }

    fn param(&self, g: &mut Graph, name: &str, shape: (usize, usize), mode: ParamMode) -> Result<Expr> {
        let p = g.parameter(name, shape)?;
        Ok(match mode {
            ParamMode::Trainable => p,
            ParamMode::Frozen => g.detach(p),
        })
    }

    /// Post-activation outputs of every layer (index 0 is the first hidden layer).
    fn activations(&self, g: &mut Graph, x: Expr, mode: ParamMode) -> Result<Vec<Expr>> {
        let rows = g.shape(x).0;
        let mut a = x;
        let mut outs = Vec::with_capacity(self.spec.layer_count());
        let last = self.spec.layer_count() - 1;
        for l in 0..=last {
            let (ws, bs) = self.shapes(l);
            let w = self.param(g, &self.weight_name(l), ws, mode)?;
            let b = self.param(g, &self.bias_name(l), bs, mode)?;
            let xw = g.matmul(a, w)?;
            let bias = g.broadcast_rows(b, rows)?;
            let z = g.add(xw, bias)?;
            let act = if l == last { self.spec.output } else { self.spec.hidden };
            a = act.apply(g, z);
            outs.push(a);
        }
        Ok(outs)
    }

    pub fn forward(&self, g: &mut Graph, x: Expr, mode: ParamMode) -> Result<Expr> {
        Ok(*self.activations(g, x, mode)?.last().expect("at least one layer"))
    }

    /// Output together with a graph for d(output)/d(input), row by row.
    ///
    /// The gradient is assembled from primitive ops, so it can itself be
    /// differentiated with respect to the parameters.
    pub fn forward_with_input_gradient(&self, g: &mut Graph, x: Expr, mode: ParamMode) -> Result<(Expr, Expr)> {
        for act in [self.spec.hidden, self.spec.output] {
            if act == Activation::Relu {
                return Err(NetError::UnsupportedActivation(act));
            }
        }
        if self.spec.output_dim() != 1 {
            return Err(NetError::NonScalarOutput(self.spec.output_dim()));
        }
        let rows = g.shape(x).0;
        let acts = self.activations(g, x, mode)?;
        let last = acts.len() - 1;

        let derivative = |g: &mut Graph, act: Activation, a: Expr| -> Result<Expr> {
            let shape = g.shape(a);
            let ones = g.filled(shape, 1.0);
            Ok(match act {
                Activation::None => ones,
                Activation::Tanh => {
                    let sq = g.square(a);
                    g.sub(ones, sq)?
                }
                Activation::Relu => unreachable!("rejected above"),
            })
        };

        let mut delta = derivative(g, self.spec.output, acts[last])?;
        for l in (0..=last).rev() {
            let (ws, _) = self.shapes(l);
            let w = self.param(g, &self.weight_name(l), ws, mode)?;
            let wt = g.transpose(w);
            let back = g.matmul(delta, wt)?;
            if l == 0 {
                delta = back;
            } else {
                let d = derivative(g, self.spec.hidden, acts[l - 1])?;
                delta = g.hadamard(back, d)?;
            }
        }
        debug_assert_eq!(g.shape(delta), (rows, self.spec.input_dim()));
        Ok((acts[last], delta))
    }

    pub fn input_gradient(&self, g: &mut Graph, x: Expr) -> Result<Expr> {
        Ok(self.forward_with_input_gradient(g, x, ParamMode::Trainable)?.1)
    }
}

/// One-hot camera code; `index` is 1-based.
pub fn position_encode(index: usize, count: usize) -> Result<Vec<f64>> {
    if index == 0 || index > count {
        return Err(NetError::CameraIndex { index, count });
    }
    let mut code = vec![0.0; count];
    code[index - 1] = 1.0;
    Ok(code)
}

/// Scalar barrier `B(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierNetwork {
    pub mlp: Mlp,
}

impl BarrierNetwork {
    pub fn new(input_dim: usize, hidden: &[usize]) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new("barrier", MlpSpec::tanh(input_dim, hidden, 1))?,
        })
    }

    pub fn from_spec(spec: MlpSpec) -> Result<Self> {
        if spec.output_dim() != 1 {
            return Err(NetError::NonScalarOutput(spec.output_dim()));
        }
        Ok(Self {
            mlp: Mlp::new("barrier", spec)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, z: Expr, mode: ParamMode) -> Result<Expr> {
        self.mlp.forward(g, z, mode)
    }

    pub fn forward_with_gradient(&self, g: &mut Graph, z: Expr, mode: ParamMode) -> Result<(Expr, Expr)> {
        self.mlp.forward_with_input_gradient(g, z, mode)
    }
}

/// `x_dot = f(x) + G(x) u`, with `G` stored row-major as an `n * m` output.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlAffineDynamics {
    pub f: Mlp,
    pub g: Mlp,
    pub state_dim: usize,
    pub control_dim: usize,
}

impl ControlAffineDynamics {
    pub fn new(state_dim: usize, control_dim: usize, hidden: &[usize]) -> Result<Self> {
        Ok(Self {
            f: Mlp::new("dyn.f", MlpSpec::tanh(state_dim, hidden, state_dim))?,
            g: Mlp::new("dyn.g", MlpSpec::tanh(state_dim, hidden, state_dim * control_dim))?,
            state_dim,
            control_dim,
        })
    }

    pub fn from_specs(f: MlpSpec, g: MlpSpec) -> Result<Self> {
        let n = f.input_dim();
        if f.output_dim() != n || g.input_dim() != n || g.output_dim() % n != 0 {
            return Err(NetError::Spec("inconsistent control-affine dimensions".into()));
        }
        let m = g.output_dim() / n;
        Ok(Self {
            f: Mlp::new("dyn.f", f)?,
            g: Mlp::new("dyn.g", g)?,
            state_dim: n,
            control_dim: m,
        })
    }

    pub fn init_into(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.f.init_into(store, rng);
        self.g.init_into(store, rng);
    }

    pub fn drift(&self, g: &mut Graph, x: Expr, mode: ParamMode) -> Result<Expr> {
        self.f.forward(g, x, mode)
    }

    /// `G(x)` flattened row-major, shape `rows x (n * m)`.
    pub fn input_matrix(&self, g: &mut Graph, x: Expr, mode: ParamMode) -> Result<Expr> {
        self.g.forward(g, x, mode)
    }

    /// Row-wise `G(x) u` from the flattened `G`.
    pub fn apply_input(&self, g: &mut Graph, gflat: Expr, u: Expr) -> Result<Expr> {
        let (n, m) = (self.state_dim, self.control_dim);
        let mut tile = Value::zeros((m, n * m));
        let mut gather = Value::zeros((n * m, n));
        for k in 0..n {
            for j in 0..m {
                tile[[j, k * m + j]] = 1.0;
                gather[[k * m + j, k]] = 1.0;
            }
        }
        let tile = g.constant(tile);
        let gather = g.constant(gather);
        let ut = g.matmul(u, tile)?;
        let prod = g.hadamard(gflat, ut)?;
        Ok(g.matmul(prod, gather)?)
    }

    pub fn vector_field(&self, g: &mut Graph, x: Expr, u: Expr, mode: ParamMode) -> Result<Expr> {
        let f = self.drift(g, x, mode)?;
        let gf = self.input_matrix(g, x, mode)?;
        let gu = self.apply_input(g, gf, u)?;
        Ok(g.add(f, gu)?)
    }
}

/// Discrete residual model `f(x, u)` with `x_next = x + f(x, u) dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDynamics {
    pub net: Mlp,
    pub state_dim: usize,
    pub control_dim: usize,
}

impl ResidualDynamics {
    pub fn new(state_dim: usize, control_dim: usize, hidden: &[usize]) -> Result<Self> {
        Ok(Self {
            net: Mlp::new("dyn.r", MlpSpec::tanh(state_dim + control_dim, hidden, state_dim))?,
            state_dim,
            control_dim,
        })
    }

    pub fn from_spec(spec: MlpSpec, control_dim: usize) -> Result<Self> {
        let n = spec.output_dim();
        if spec.input_dim() != n + control_dim {
            return Err(NetError::Spec("residual input must be state + control".into()));
        }
        Ok(Self {
            net: Mlp::new("dyn.r", spec)?,
            state_dim: n,
            control_dim,
        })
    }

    pub fn rate(&self, g: &mut Graph, x: Expr, u: Expr, mode: ParamMode) -> Result<Expr> {
        let xu = g.hcat(&[x, u])?;
        self.net.forward(g, xu, mode)
    }
}

/// State-conditioned hyperplane `a(x)^T u = b(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperplaneNetwork {
    pub a: Mlp,
    pub b: Mlp,
    pub control_dim: usize,
}

impl HyperplaneNetwork {
    pub fn new(input_dim: usize, control_dim: usize, hidden: &[usize]) -> Result<Self> {
        Ok(Self {
            a: Mlp::new("hyper.a", MlpSpec::tanh(input_dim, hidden, control_dim))?,
            b: Mlp::new("hyper.b", MlpSpec::tanh(input_dim, hidden, 1))?,
            control_dim,
        })
    }

    pub fn from_specs(a: MlpSpec, b: MlpSpec) -> Result<Self> {
        if a.input_dim() != b.input_dim() || b.output_dim() != 1 {
            return Err(NetError::Spec("hyperplane heads disagree".into()));
        }
        let m = a.output_dim();
        Ok(Self {
            a: Mlp::new("hyper.a", a)?,
            b: Mlp::new("hyper.b", b)?,
            control_dim: m,
        })
    }

    pub fn init_into(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.a.init_into(store, rng);
        self.b.init_into(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, x: Expr, mode: ParamMode) -> Result<(Expr, Expr)> {
        Ok((self.a.forward(g, x, mode)?, self.b.forward(g, x, mode)?))
    }

    /// Row-wise `a(x)^T u - b(x)`.
    pub fn margin(&self, g: &mut Graph, x: Expr, u: Expr, mode: ParamMode) -> Result<Expr> {
        let (a, b) = self.forward(g, x, mode)?;
        let au = g.row_dot(a, u)?;
        Ok(g.sub(au, b)?)
    }
}

/// Attention-weighted sum over views annotated with their one-hot position.
///
/// `score_i = W_i (h_i || pos(i))` and the output is `sum_i score_i (h_i || pos(i))`.
/// Scores are used as raw weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionLayer {
    pub prefix: String,
    pub views: usize,
    pub input_dim: usize,
}

impl FusionLayer {
    pub fn new(prefix: impl Into<String>, views: usize, input_dim: usize) -> Result<Self> {
        if views == 0 || input_dim == 0 {
            return Err(NetError::Spec("fusion needs at least one view of positive width".into()));
        }
        Ok(Self {
            prefix: prefix.into(),
            views,
            input_dim,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.input_dim + self.views
    }

    pub fn weight_name(&self, view: usize) -> String {
        format!("{}.w{}", self.prefix, view)
    }

    pub fn init_into(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let d = self.output_dim();
        let bound = 1.0 / (d as f64).sqrt();
        for i in 1..=self.views {
            store.insert(self.weight_name(i), uniform_matrix(rng, (d, 1), bound));
        }
    }

    fn weight(&self, g: &mut Graph, view: usize, mode: ParamMode) -> Result<Expr> {
        let w = g.parameter(&self.weight_name(view), (self.output_dim(), 1))?;
        Ok(match mode {
            ParamMode::Trainable => w,
            ParamMode::Frozen => g.detach(w),
        })
    }

    fn annotate(&self, g: &mut Graph, h: Expr, view: usize) -> Result<Expr> {
        let rows = g.shape(h).0;
        let code = position_encode(view, self.views)?;
        let code = g.constant_row(&code);
        let codes = g.broadcast_rows(code, rows)?;
        Ok(g.hcat(&[h, codes])?)
    }

    fn check_inputs(&self, g: &Graph, inputs: &[Expr]) -> Result<()> {
        if inputs.len() != self.views {
            return Err(NetError::Spec(format!(
                "fusion expects {} views, got {}",
                self.views,
                inputs.len()
            )));
        }
        for &h in inputs {
            let s = g.shape(h);
            if s.1 != self.input_dim {
                return Err(GraphError::Shape {
                    op: "fuse",
                    lhs: (s.0, self.input_dim),
                    rhs: s,
                }
                .into());
            }
        }
        Ok(())
    }

    /// Per-view scores, each `rows x 1`.
    pub fn scores(&self, g: &mut Graph, inputs: &[Expr], mode: ParamMode) -> Result<Vec<Expr>> {
        self.check_inputs(g, inputs)?;
        let mut out = Vec::with_capacity(self.views);
        for (k, &h) in inputs.iter().enumerate() {
            let hp = self.annotate(g, h, k + 1)?;
            let w = self.weight(g, k + 1, mode)?;
            out.push(g.matmul(hp, w)?);
        }
        Ok(out)
    }

    pub fn fuse(&self, g: &mut Graph, inputs: &[Expr], mode: ParamMode) -> Result<Expr> {
        Ok(self.fuse_with_tangent(g, inputs, None, mode)?.0)
    }

    /// Fused output and, when input tangents are given, its directional
    /// derivative along them.
    pub fn fuse_with_tangent(
        &self,
        g: &mut Graph,
        inputs: &[Expr],
        tangents: Option<&[Expr]>,
        mode: ParamMode,
    ) -> Result<(Expr, Option<Expr>)> {
        self.check_inputs(g, inputs)?;
        let d = self.output_dim();
        let mut acc: Option<Expr> = None;
        let mut dacc: Option<Expr> = None;
        for (k, &h) in inputs.iter().enumerate() {
            let hp = self.annotate(g, h, k + 1)?;
            let w = self.weight(g, k + 1, mode)?;
            let score = g.matmul(hp, w)?;
            let sb = g.broadcast_cols(score, d)?;
            let term = g.hadamard(sb, hp)?;
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
            if let Some(ts) = tangents {
                let rows = g.shape(ts[k]).0;
                let pad = g.filled((rows, self.views), 0.0);
                let dhp = g.hcat(&[ts[k], pad])?;
                let dscore = g.matmul(dhp, w)?;
                let dsb = g.broadcast_cols(dscore, d)?;
                let t1 = g.hadamard(dsb, hp)?;
                let t2 = g.hadamard(sb, dhp)?;
                let dterm = g.add(t1, t2)?;
                dacc = Some(match dacc {
                    Some(a) => g.add(a, dterm)?,
                    None => dterm,
                });
            }
        }
        Ok((acc.expect("views >= 1"), dacc))
    }
}

/// Recurrent state map `x_t = MLP(h*_t, x_{t-1}, u_{t-1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEncoder {
    pub mlp: Mlp,
    pub input_dim: usize,
    pub state_dim: usize,
    pub control_dim: usize,
}

impl StateEncoder {
    pub fn new(input_dim: usize, state_dim: usize, control_dim: usize, hidden: &[usize]) -> Result<Self> {
        Self::from_spec(
            MlpSpec::tanh(input_dim + state_dim + control_dim, hidden, state_dim),
            input_dim,
            control_dim,
        )
    }

    pub fn from_spec(spec: MlpSpec, input_dim: usize, control_dim: usize) -> Result<Self> {
        let n = spec.output_dim();
        if spec.input_dim() != input_dim + n + control_dim {
            return Err(NetError::Spec("encoder input must be features + state + control".into()));
        }
        Ok(Self {
            mlp: Mlp::new("encoder", spec)?,
            input_dim,
            state_dim: n,
            control_dim,
        })
    }

    pub fn encode(&self, g: &mut Graph, h: Expr, x_prev: Expr, u_prev: Expr, mode: ParamMode) -> Result<Expr> {
        let cat = g.hcat(&[h, x_prev, u_prev])?;
        let s = g.shape(cat);
        if s.1 != self.mlp.spec.input_dim() {
            return Err(GraphError::Shape {
                op: "encode_state",
                lhs: (s.0, self.mlp.spec.input_dim()),
                rhs: s,
            }
            .into());
        }
        self.mlp.forward(g, cat, mode)
    }

    /// States for a window, starting from `x_{-1} = 0` and `u_{-1} = u_0`.
    pub fn encode_sequence(&self, g: &mut Graph, inputs: &[Expr], controls: &[Expr], mode: ParamMode) -> Result<Vec<Expr>> {
        let Some(&u0) = controls.first() else {
            return Ok(Vec::new());
        };
        let rows = g.shape(u0).0;
        let mut x = g.filled((rows, self.state_dim), 0.0);
        let mut u_prev = u0;
        let mut states = Vec::with_capacity(inputs.len());
        for (t, &h) in inputs.iter().enumerate() {
            x = self.encode(g, h, x, u_prev, mode)?;
            states.push(x);
            u_prev = controls[t];
        }
        Ok(states)
    }
}
