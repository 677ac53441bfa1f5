//! Reverse-mode gradients against central finite differences.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visf_core::diffgraph::{Bindings, ConcatAxis, Expr, Graph, ParamStore, Value};
use visf_core::nets::{Activation, Mlp, MlpSpec, ParamMode};

const STEP: f64 = 1e-6;
const REL_TOL: f64 = 1e-4;
const SEEDS: u64 = 100;

fn random(rng: &mut impl Rng, shape: (usize, usize)) -> Value {
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-1.5..1.5))
}

/// Entries kept away from the relu kink so the difference quotient is clean.
fn away_from_zero(rng: &mut impl Rng, shape: (usize, usize)) -> Value {
    Array2::from_shape_simple_fn(shape, || {
        let v: f64 = rng.gen_range(0.05..1.5);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn dims(rng: &mut impl Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5))
}

/// Reduces `e` to a scalar with fixed random weights so every entry matters.
fn weighted_sum(g: &mut Graph, e: Expr, rng: &mut impl Rng) -> Expr {
    let w = random(rng, g.shape(e));
    let w = g.constant(w);
    let h = g.hadamard(e, w).unwrap();
    g.sum(h)
}

/// Largest relative error between the analytic gradient and central
/// differences over every parameter entry in `store`.
fn max_rel_error(g: &Graph, root: Expr, store: &ParamStore) -> f64 {
    let bindings = Bindings::new();
    let grads = g.gradient(root, store, &bindings).unwrap();
    let mut worst: f64 = 0.0;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let shape = store.value(&name).unwrap().dim();
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let mut s = store.clone();
                s.value_mut(&name).unwrap()[[i, j]] += STEP;
                let up = g.evaluate(root, &s, &bindings).unwrap()[[0, 0]];
                s.value_mut(&name).unwrap()[[i, j]] -= 2.0 * STEP;
                let down = g.evaluate(root, &s, &bindings).unwrap()[[0, 0]];
                let fd = (up - down) / (2.0 * STEP);
                let an = grads.get(&name).unwrap()[[i, j]];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
    }
    worst
}

type Builder = fn(&mut Graph, &mut ParamStore, &mut ChaCha8Rng) -> Expr;

fn param(g: &mut Graph, store: &mut ParamStore, name: &str, v: Value) -> Expr {
    let e = g.parameter(name, v.dim()).unwrap();
    store.insert(name, v);
    e
}

fn build_add(g: &mut Graph, s: &mut ParamStore, r: &mut ChaCha8Rng) -> Expr {
    let d = dims(r);
    let a = param(g, s, "a", random(r, d));
    let b = param(g, s, "b", random(r, d));
    g.add(a, b).unwrap()
}

fn build_matmul(g: &mut Graph, s: &mut ParamStore, r: &mut ChaCha8Rng) -> Expr {
    let (m, k) = dims(r);
    let n = r.gen_range(1..5);
    let a = param(g, s, "a", random(r, (m, k)));
    let b = param(g, s, "b", random(r, (k, n)));
    g.matmul(a, b).unwrap()
}

fn build_hadamard(g: &mut Graph, s: &mut ParamStore, r: &mut ChaCha8Rng) -> Expr {
    let d = dims(r);
    let a = param(g, s, "a", random(r, d));
    let b = param(g, s, "b", random(r, d));
    g.hadamard(a, b).unwrap()
}

fn build_concat_rows(g: &mut Graph, s: &mut ParamStore, r: &mut ChaCha8Rng) -> Expr {
    let c = r.gen_range(1..5);
    let (ra, rb) = (r.gen_range(1..4), r.gen_range(1..4));
    let a = param(g, s, "a", random(r, (ra, c)));
    let b = param(g, s, "b", random(r, (rb, c)));
    g.concat(&[a, b, a], ConcatAxis::Rows).unwrap()
}

fn build_concat_cols(g: &mut Graph, s: &mut ParamStore, r: &mut ChaCha8Rng) -> Expr {
    let rows = r.gen_range(1..5);
    let (ca, cb) = (r.gen_range(1..4), r.gen_range(1..4));
    let a = param(g, s, "a", random(r, (rows, ca)));
    let b = param(g, s, "b", random(r, (rows, cb)));
    g.concat(&[b, a], ConcatAxis::Cols).unwrap()
}

fn build_relu(g: &mut Graph, s: &mut ParamStore, r: &mut ChaCha8Rng) -> Expr {
    let d = dims(r);
    let a = param(g, s, "a", away_from_zero(r, d));
    g.relu(a)
}

fn build_tanh(g: &mut Graph, s: &mut ParamStore, r: &mut ChaCha8Rng) -> Expr {
    let d = dims(r);
    let a = param(g, s, "a", random(r, d));
    g.tanh(a)
}

fn build_sum(g: &mut Graph, s: &mut ParamStore, r: &mut ChaCha8Rng) -> Expr {
    let d = dims(r);
    let a = param(g, s, "a", random(r, d));
    let t = g.tanh(a);
    let total = g.sum(t);
    g.square(total)
}

fn build_square(g: &mut Graph, s: &mut ParamStore, r: &mut ChaCha8Rng) -> Expr {
    let d = dims(r);
    let a = param(g, s, "a", random(r, d));
    g.square(a)
}

fn build_scale(g: &mut Graph, s: &mut ParamStore, r: &mut ChaCha8Rng) -> Expr {
    let d = dims(r);
    let a = param(g, s, "a", random(r, d));
    let c = r.gen_range(-3.0..3.0);
    g.scale(a, c)
}

fn build_transpose(g: &mut Graph, s: &mut ParamStore, r: &mut ChaCha8Rng) -> Expr {
    let d = dims(r);
    let a = param(g, s, "a", random(r, d));
    let t = g.transpose(a);
    g.matmul(t, a).unwrap()
}

fn build_derived(g: &mut Graph, s: &mut ParamStore, r: &mut ChaCha8Rng) -> Expr {
    let (rows, cols) = (r.gen_range(1..5), r.gen_range(2..6));
    let a = param(g, s, "a", random(r, (rows, cols)));
    let b = param(g, s, "b", random(r, (rows, cols)));
    let bias = param(g, s, "c", random(r, (1, cols)));
    let dot = g.row_dot(a, b).unwrap();
    let wide = g.broadcast_cols(dot, cols).unwrap();
    let rowb = g.broadcast_rows(bias, rows).unwrap();
    let d = g.sub(wide, rowb).unwrap();
    let picked = g.columns(d, 1, cols - 1).unwrap();
    let sums = g.row_sums(picked).unwrap();
    let m = g.mean(sums);
    let t = g.tanh(m);
    let back = g.broadcast_rows(t, rows).unwrap();
    g.hcat(&[back, sums]).unwrap()
}

const BUILDERS: [(&str, Builder); 12] = [
    ("add", build_add),
    ("matmul", build_matmul),
    ("hadamard", build_hadamard),
    ("concat rows", build_concat_rows),
    ("concat cols", build_concat_cols),
    ("relu", build_relu),
    ("tanh", build_tanh),
    ("sum", build_sum),
    ("square", build_square),
    ("scale", build_scale),
    ("transpose", build_transpose),
    ("derived", build_derived),
];

#[test]
fn primitive_gradients_match_central_differences() {
    for (name, build) in BUILDERS {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let mut store = ParamStore::new();
            let e = build(&mut g, &mut store, &mut rng);
            let root = weighted_sum(&mut g, e, &mut rng);
            let err = max_rel_error(&g, root, &store);
            assert!(err < REL_TOL, "{name} seed {seed}: relative error {err:e}");
        }
    }
}

fn random_mlp(rng: &mut ChaCha8Rng, input: usize) -> (Mlp, ParamStore) {
    let hidden: Vec<usize> = (0..rng.gen_range(1..3)).map(|_| rng.gen_range(2..6)).collect();
    let spec = MlpSpec::new(
        std::iter::once(input).chain(hidden).chain(std::iter::once(1)).collect(),
        Activation::Tanh,
        if rng.gen_bool(0.5) { Activation::None } else { Activation::Tanh },
    );
    let mlp = Mlp::new("net", spec).unwrap();
    let mut store = ParamStore::new();
    mlp.init_into(&mut store, rng);
    (mlp, store)
}

#[test]
fn input_gradient_graph_matches_differences_of_output() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (rows, n) = (rng.gen_range(1..4), rng.gen_range(1..5));
        let (mlp, mut store) = random_mlp(&mut rng, n);
        let mut g = Graph::new();
        let x = param(&mut g, &mut store, "x", random(&mut rng, (rows, n)));
        let (y, dy) = mlp.forward_with_input_gradient(&mut g, x, ParamMode::Trainable).unwrap();
        let grad = g.evaluate(dy, &store, &Bindings::new()).unwrap();

        // Row i of the output depends only on row i of the input.
        for i in 0..rows {
            for j in 0..n {
                let mut s = store.clone();
                s.value_mut("x").unwrap()[[i, j]] += STEP;
                let up = g.evaluate(y, &s, &Bindings::new()).unwrap()[[i, 0]];
                s.value_mut("x").unwrap()[[i, j]] -= 2.0 * STEP;
                let down = g.evaluate(y, &s, &Bindings::new()).unwrap()[[i, 0]];
                let fd = (up - down) / (2.0 * STEP);
                let rel = (grad[[i, j]] - fd).abs() / grad[[i, j]].abs().max(fd.abs()).max(1e-3);
                assert!(rel < REL_TOL, "seed {seed} entry ({i},{j}): {rel:e}");
            }
        }
    }
}

#[test]
fn input_gradient_graph_is_itself_differentiable() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (rows, n) = (rng.gen_range(1..4), rng.gen_range(1..5));
        let (mlp, mut store) = random_mlp(&mut rng, n);
        let mut g = Graph::new();
        let x = param(&mut g, &mut store, "x", random(&mut rng, (rows, n)));
        let (y, dy) = mlp.forward_with_input_gradient(&mut g, x, ParamMode::Trainable).unwrap();
        // Something shaped like a Lie derivative plus a barrier term.
        let v = random(&mut rng, (rows, n));
        let v = g.constant(v);
        let lie = g.row_dot(dy, v).unwrap();
        let both = g.add(lie, y).unwrap();
        let root = weighted_sum(&mut g, both, &mut rng);
        let err = max_rel_error(&g, root, &store);
        assert!(err < REL_TOL, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn detach_is_identity_in_value_and_zero_in_gradient() {
    for (name, build) in BUILDERS {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let mut store = ParamStore::new();
            let e = build(&mut g, &mut store, &mut rng);
            let d = g.detach(e);
            let b = Bindings::new();
            assert_eq!(g.evaluate(e, &store, &b).unwrap(), g.evaluate(d, &store, &b).unwrap(), "{name} {seed}");

            let w = random(&mut rng, g.shape(e));
            let w = g.constant(w);
            let through_detach = g.hadamard(d, w).unwrap();
            let root = g.sum(through_detach);
            let grads = g.gradient(root, &store, &b).unwrap();
            for (pname, gv) in &grads.0 {
                assert!(gv.iter().all(|&v| v == 0.0), "{name} seed {seed}: {pname} got gradient");
            }

            // Adding a detached copy leaves the gradient unchanged.
            let plain = g.hadamard(e, w).unwrap();
            let plain_root = g.sum(plain);
            let mixed = g.add(plain, through_detach).unwrap();
            let mixed_root = g.sum(mixed);
            let ga = g.gradient(plain_root, &store, &b).unwrap();
            let gb = g.gradient(mixed_root, &store, &b).unwrap();
            assert_eq!(ga, gb, "{name} seed {seed}");
        }
    }
}

/// A detached factor behaves like a constant frozen at its current value,
/// so the reference is the same expression with that constant spliced in.
#[test]
fn detached_factor_differentiates_like_a_constant() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let d = dims(&mut rng);
        let av = random(&mut rng, d);
        let w = random(&mut rng, d);

        let mut g = Graph::new();
        let mut store = ParamStore::new();
        let a = param(&mut g, &mut store, "a", av.clone());
        let sq = g.square(a);
        let frozen = g.detach(sq);
        let t = g.tanh(a);
        let h = g.hadamard(frozen, t).unwrap();
        let wc = g.constant(w.clone());
        let hw = g.hadamard(h, wc).unwrap();
        let root = g.sum(hw);

        let mut twin = Graph::new();
        let a2 = twin.parameter("a", d).unwrap();
        let fixed = twin.constant(av.mapv(|v| v * v));
        let t2 = twin.tanh(a2);
        let h2 = twin.hadamard(fixed, t2).unwrap();
        let wc2 = twin.constant(w);
        let hw2 = twin.hadamard(h2, wc2).unwrap();
        let root2 = twin.sum(hw2);

        let b = Bindings::new();
        assert_eq!(g.evaluate(root, &store, &b).unwrap(), twin.evaluate(root2, &store, &b).unwrap());
        let err = max_rel_error(&twin, root2, &store);
        assert!(err < REL_TOL, "seed {seed}: twin relative error {err:e}");
        assert_eq!(g.gradient(root, &store, &b).unwrap(), twin.gradient(root2, &store, &b).unwrap(), "seed {seed}");
    }
}

#[test]
fn frozen_parameters_pass_gradient_to_inputs_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mlp, mut store) = random_mlp(&mut rng, 3);
    let mut g = Graph::new();
    let x = param(&mut g, &mut store, "x", random(&mut rng, (2, 3)));
    let y = mlp.forward(&mut g, x, ParamMode::Frozen).unwrap();
    let root = g.sum(y);
    let grads = g.gradient(root, &store, &Bindings::new()).unwrap();
    for (name, gv) in &grads.0 {
        let zero = gv.iter().all(|&v| v == 0.0);
        assert_eq!(zero, name != "x", "{name}");
    }
}
