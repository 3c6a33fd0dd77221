//! Finite-difference checks of the hand-written cell backward passes,
//! unrolled over a few steps so the recurrent carries are exercised too.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stlstm::cells::{CellParams, CellState, ConstraintTarget, GateAblation, StepCache, StepInput, Variant};
use stlstm::numkit::ParamSet;
use stlstm::optim::{fd_check, relative_error, FdConfig};

const N_I: usize = 3;
const N_C: usize = 4;
const STEPS: usize = 4;

struct Fixture {
    xs: Vec<Vec<f64>>,
    intervals: Vec<(f64, f64)>,
    /// loss weights on every h_t and on the final carried c
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let xs = (0..STEPS).map(|_| v(N_I)).collect();
    let a = (0..STEPS).map(|_| v(N_C)).collect();
    let b = v(N_C);
    let intervals = (0..STEPS)
        .map(|t| (0.3 + 0.7 * t as f64, 1.5 - 0.3 * t as f64))
        .collect();
    Fixture { xs, intervals, a, b }
}

fn params(variant: Variant, seed: u64) -> CellParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = CellParams::init(variant, N_I, N_C, ConstraintTarget::Interval, &mut rng);
    for t in p.tensors_mut() {
        if t.name.starts_with("b_") {
            for v in t.data.iter_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    p
}

fn forward(p: &CellParams, fx: &Fixture, abl: GateAblation, dt_shift: f64) -> (f64, Vec<StepCache>) {
    let mut state = CellState::zeros(N_C);
    let mut caches = Vec::new();
    let mut loss = 0.0;
    for t in 0..STEPS {
        let (dt, dd) = fx.intervals[t];
        let input = StepInput {
            x: &fx.xs[t],
            dt: dt + if t == 1 { dt_shift } else { 0.0 },
            dd,
        };
        let (next, cache) = p.step(&input, &state, abl).unwrap();
        loss += next.h.iter().zip(&fx.a[t]).map(|(h, a)| h * a).sum::<f64>();
        caches.push(cache);
        state = next;
    }
    loss += state.c.iter().zip(&fx.b).map(|(c, b)| c * b).sum::<f64>();
    (loss, caches)
}

fn backward(p: &CellParams, fx: &Fixture, caches: &[StepCache]) -> (CellParams, Vec<f64>) {
    let mut grads = p.zeros_like();
    let mut dh = vec![0.0; N_C];
    let mut dc = fx.b.clone();
    let mut ddt = vec![0.0; STEPS];
    for t in (0..STEPS).rev() {
        let gh: Vec<f64> = dh.iter().zip(&fx.a[t]).map(|(x, y)| x + y).collect();
        let ig = p.backward_into(&caches[t], &gh, &dc, &mut grads).unwrap();
        dh = ig.h_prev.into_inner();
        dc = ig.c_prev.into_inner();
        ddt[t] = ig.dt;
    }
    (grads, ddt)
}

fn check(variant: Variant, abl: GateAblation, seed: u64) {
    let p = params(variant, seed);
    let fx = fixture(seed + 100);
    let (_, caches) = forward(&p, &fx, abl, 0.0);
    let (grads, ddt) = backward(&p, &fx, &caches);
    let report = fd_check(
        |q: &CellParams| forward(q, &fx, abl, 0.0).0,
        &p,
        &grads,
        FdConfig::default(),
    )
    .unwrap();
    assert!(
        report.passed(),
        "{variant} {} worst {:?} rel {:e}",
        abl.label(),
        report.worst,
        report.max_rel_error
    );
    assert_eq!(report.checked, p.num_params());

    let eps = 1e-5;
    let numeric = (forward(&p, &fx, abl, eps).0 - forward(&p, &fx, abl, -eps).0) / (2.0 * eps);
    assert!(
        relative_error(ddt[1], numeric) < 1e-4,
        "dΔt analytic {} numeric {numeric}",
        ddt[1]
    );
}

#[test]
fn lstm_gradients() {
    for seed in 0..3 {
        check(Variant::Lstm, GateAblation::NONE, seed);
    }
}

#[test]
fn st_lstm_gradients() {
    for seed in 0..3 {
        check(Variant::StLstm, GateAblation::NONE, seed);
    }
}

#[test]
fn st_clstm_gradients() {
    for seed in 0..3 {
        check(Variant::StClstm, GateAblation::NONE, seed);
    }
}

#[test]
fn ablated_gradients() {
    for variant in [Variant::StLstm, Variant::StClstm] {
        for abl in [
            GateAblation::TIME_ONLY,
            GateAblation::DISTANCE_ONLY,
            GateAblation::SHORT_TERM_ONLY,
            GateAblation::LONG_TERM_ONLY,
            GateAblation::ALL,
        ] {
            check(variant, abl, 7);
        }
    }
}

#[test]
fn input_gradient_matches_fd() {
    // gradient w.r.t. the embedded input of the first step
    for variant in Variant::ALL {
        let p = params(variant, 11);
        let fx = fixture(12);
        let (_, caches) = forward(&p, &fx, GateAblation::NONE, 0.0);
        let mut grads = p.zeros_like();
        let mut dh = vec![0.0; N_C];
        let mut dc = fx.b.clone();
        let mut dx0 = Vec::new();
        for t in (0..STEPS).rev() {
            let gh: Vec<f64> = dh.iter().zip(&fx.a[t]).map(|(x, y)| x + y).collect();
            let ig = p.backward_into(&caches[t], &gh, &dc, &mut grads).unwrap();
            dh = ig.h_prev.into_inner();
            dc = ig.c_prev.into_inner();
            if t == 0 {
                dx0 = ig.x.into_inner();
            }
        }
        for (k, &analytic) in dx0.iter().enumerate() {
            let eps = 1e-5;
            let mut plus = fixture(12);
            plus.xs[0][k] += eps;
            let mut minus = fixture(12);
            minus.xs[0][k] -= eps;
            let numeric = (forward(&p, &plus, GateAblation::NONE, 0.0).0
                - forward(&p, &minus, GateAblation::NONE, 0.0).0)
                / (2.0 * eps);
            assert!(relative_error(analytic, numeric) < 1e-4, "{variant} dx[{k}]");
        }
    }
}
