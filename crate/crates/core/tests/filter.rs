//! QP filter against a brute-force grid, its invariances, a hand-written
//! barrier on a double integrator, and the model-side constraints.

use ndarray::array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visf_core::diffgraph::ParamStore;
use visf_core::filter::{cbf_halfspace, dh_halfspace, qp_filter, ControlBox, FilterStatus, Halfspace, TOLERANCE};
use visf_core::nets::{Activation, BarrierNetwork, ControlAffineDynamics, HyperplaneNetwork, MlpSpec};

const GRID: f64 = 0.01;

struct Instance {
    h: Halfspace,
    u_ref: Vec<f64>,
    bounds: ControlBox,
}

fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let lower: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..0.0)).collect();
    let upper: Vec<f64> = lower.iter().map(|l| l + rng.gen_range(0.2..3.0)).collect();
    let a: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let b = rng.gen_range(-3.0..3.0);
    let u_ref = (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect();
    Instance {
        h: Halfspace::new(a, b),
        u_ref,
        bounds: ControlBox::new(lower, upper).unwrap(),
    }
}

fn dist(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

/// Closest feasible grid point, if any grid point is feasible.
fn grid_optimum(inst: &Instance) -> Option<(Vec<f64>, f64)> {
    let (lo, hi) = (&inst.bounds.lower, &inst.bounds.upper);
    let steps = |j: usize| ((hi[j] - lo[j]) / GRID).floor() as usize;
    let mut best: Option<(Vec<f64>, f64)> = None;
    for i in 0..=steps(0) {
        for k in 0..=steps(1) {
            let p = vec![lo[0] + i as f64 * GRID, lo[1] + k as f64 * GRID];
            if inst.h.margin(&p) < 0.0 {
                continue;
            }
            let d = dist(&p, &inst.u_ref);
            if best.as_ref().is_none_or(|(_, bd)| d < *bd) {
                best = Some((p, d));
            }
        }
    }
    best
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn matches_grid_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut solved = 0;
    for n in 0..1000 {
        let inst = instance(&mut rng);
        let d = qp_filter(&inst.h, &inst.u_ref, &inst.bounds).unwrap();
        let grid = grid_optimum(&inst);
        if d.status == FilterStatus::Infeasible {
            // Nothing in the box satisfies the constraint, so no grid point can.
            assert!(grid.is_none(), "instance {n} reported infeasible");
            continue;
        }
        solved += 1;
        assert!(inst.bounds.contains(&d.u_out), "instance {n}");
        assert!(d.constraint_margin >= -TOLERANCE * norm(&inst.h.a).max(1.0), "instance {n}");
        let mine = dist(&d.u_out, &inst.u_ref);
        if let Some((_, best)) = grid {
            assert!(mine <= best + 0.02, "instance {n}: {mine} vs grid {best}");
            // The grid is feasible too, so it cannot beat the exact solution.
            assert!(mine <= best + 1e-9, "instance {n}: grid point closer ({best} < {mine})");
        }
    }
    assert!(solved > 500, "only {solved} feasible instances");
}

#[test]
fn idempotent_on_its_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let inst = instance(&mut rng);
        let first = qp_filter(&inst.h, &inst.u_ref, &inst.bounds).unwrap();
        if first.status == FilterStatus::Infeasible {
            continue;
        }
        let second = qp_filter(&inst.h, &first.u_out, &inst.bounds).unwrap();
        assert_eq!(second.u_out, first.u_out);
        assert!(!second.modified);
    }
}

#[test]
fn positive_scaling_leaves_the_argmin_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let inst = instance(&mut rng);
        let base = qp_filter(&inst.h, &inst.u_ref, &inst.bounds).unwrap();
        // Powers of two scale the inputs exactly, so the output is bitwise equal.
        for c in [0.125, 2.0, 1024.0] {
            let scaled = Halfspace::new(inst.h.a.iter().map(|v| v * c).collect(), inst.h.b * c);
            let d = qp_filter(&scaled, &inst.u_ref, &inst.bounds).unwrap();
            assert_eq!(d.u_out, base.u_out);
            assert_eq!(d.status, base.status);
        }
        // Other factors round the inputs themselves; the argmin moves by rounding only.
        let c = rng.gen_range(0.01..100.0);
        let scaled = Halfspace::new(inst.h.a.iter().map(|v| v * c).collect(), inst.h.b * c);
        let d = qp_filter(&scaled, &inst.u_ref, &inst.bounds).unwrap();
        assert!(dist(&d.u_out, &base.u_out) < 1e-9);
    }
}

const U_MAX: f64 = 1.0;
const DT: f64 = 0.01;

/// Stopping-distance barrier for a cart approaching a wall at 0 from the right.
fn wall_barrier(pos: f64, vel: f64) -> f64 {
    pos - vel * vel / (2.0 * U_MAX)
}

/// Sampled-data barrier condition `B(x+) - B(x) >= -alpha dt B(x)` under a
/// held control. With `k = u / u_max`, exactly
/// `B(x+) - B(x) = v dt (1 - k) + u_max dt^2 (k - k^2) / 2`, and `k - k^2 >= k - 1`
/// on the box, which leaves the affine constraint
/// `(1 - k)(v dt - u_max dt^2 / 2) >= -alpha dt B`. Full braking always satisfies it.
fn wall_constraint(pos: f64, vel: f64, alpha: f64) -> Halfspace {
    let c = vel * DT - 0.5 * U_MAX * DT * DT;
    Halfspace::new(vec![-c / U_MAX], -c - alpha * DT * wall_barrier(pos, vel))
}

#[test]
fn double_integrator_stays_off_the_wall() {
    let bounds = ControlBox::symmetric(1, U_MAX).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut violations = 0;
    let mut interventions = 0;
    for _ in 0..1000 {
        let alpha = rng.gen_range(0.5..5.0);
        let (mut pos, mut vel) = loop {
            let p: f64 = rng.gen_range(0.0..4.0);
            let v: f64 = rng.gen_range(-3.0..3.0);
            if wall_barrier(p, v) >= 0.0 {
                break (p, v);
            }
        };
        // A reference that mostly pushes toward the wall.
        let bias = rng.gen_range(-1.5..0.5);
        for _ in 0..200 {
            let u_ref = [bias + rng.gen_range(-0.5..0.5)];
            let d = qp_filter(&wall_constraint(pos, vel, alpha), &u_ref, &bounds).unwrap();
            interventions += usize::from(d.modified);
            let u = d.u_out[0];
            pos += vel * DT + 0.5 * u * DT * DT;
            vel += u * DT;
            if pos < 0.0 {
                violations += 1;
                break;
            }
        }
    }
    assert!(interventions > 1000, "the filter barely acted ({interventions})");
    assert_eq!(violations, 0);
}

#[test]
fn cbf_constraint_example() {
    // B(x) = x_1, f = 0, G = I, gamma = id, at x = [2, 0].
    let barrier = BarrierNetwork::from_spec(MlpSpec::new(vec![2, 1], Activation::Tanh, Activation::None)).unwrap();
    let dynm = ControlAffineDynamics::from_specs(
        MlpSpec::new(vec![2, 2], Activation::Tanh, Activation::None),
        MlpSpec::new(vec![2, 4], Activation::Tanh, Activation::None),
    )
    .unwrap();
    let mut p = ParamStore::new();
    p.insert("barrier.w0", array![[1.0], [0.0]]);
    p.insert("barrier.b0", array![[0.0]]);
    p.insert("dyn.f.w0", array![[0.0, 0.0], [0.0, 0.0]]);
    p.insert("dyn.f.b0", array![[0.0, 0.0]]);
    p.insert("dyn.g.w0", ndarray::Array2::zeros((2, 4)));
    p.insert("dyn.g.b0", array![[1.0, 0.0, 0.0, 1.0]]);
    let h = cbf_halfspace(&barrier, &dynm, &p, &[2.0, 0.0], 1.0).unwrap();
    assert_eq!(h, Halfspace::new(vec![1.0, 0.0], -2.0));
}

#[test]
fn dh_constraint_is_a_passthrough() {
    let hp = HyperplaneNetwork::from_specs(
        MlpSpec::new(vec![3, 2], Activation::Tanh, Activation::None),
        MlpSpec::new(vec![3, 1], Activation::Tanh, Activation::None),
    )
    .unwrap();
    let mut p = ParamStore::new();
    p.insert("hyper.a.w0", ndarray::Array2::zeros((3, 2)));
    p.insert("hyper.a.b0", array![[0.0, 1.0]]);
    p.insert("hyper.b.w0", ndarray::Array2::zeros((3, 1)));
    p.insert("hyper.b.b0", array![[0.0]]);
    let h = dh_halfspace(&hp, &p, &[0.3, -1.0, 7.0]).unwrap();
    assert_eq!(h, Halfspace::new(vec![0.0, 1.0], 0.0));
}
