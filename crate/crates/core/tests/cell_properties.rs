use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stlstm::cells::{CellParams, CellState, ConstraintTarget, GateAblation, StepInput, Variant};
use stlstm::numkit::ParamSet;
use stlstm::optim::{project, ConstraintSet};

const N_I: usize = 3;
const N_C: usize = 4;

fn random_params(variant: Variant, rng: &mut ChaCha8Rng, scale: f64) -> CellParams {
    let mut p = CellParams::zeros(variant, N_I, N_C);
    for t in p.tensors_mut() {
        for v in t.data.iter_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
    p
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_state(rng: &mut ChaCha8Rng) -> CellState {
    let mut s = CellState::zeros(N_C);
    for v in s.h.iter_mut().chain(s.c.iter_mut()) {
        *v = rng.gen_range(-1.0..1.0);
    }
    s
}

proptest! {
    #[test]
    // Intervals stay moderate: the output gate sees Δt·W_to directly, and
    // σ rounds to exactly 0 or 1 in f64 once its argument passes ~37.
    fn gate_activations_lie_in_open_unit_interval(
        seed in 0u64..10_000,
        variant_idx in 0usize..3,
        dt in 0.0f64..24.0,
        dd in 0.0f64..20.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(Variant::ALL[variant_idx], &mut rng, 0.5);
        let x = random_vec(&mut rng, N_I);
        let prev = random_state(&mut rng);
        let (_, cache) = p.step(&StepInput { x: &x, dt, dd }, &prev, GateAblation::NONE).unwrap();
        let g = cache.gates();
        let all = [Some(g.i), g.f, Some(g.o), g.t1, g.t2, g.d1, g.d2];
        for v in all.into_iter().flatten() {
            prop_assert!(v.iter().all(|&a| a > 0.0 && a < 1.0), "{v:?}");
        }
    }

    #[test]
    fn constrained_interval_gates_are_monotone(
        seed in 0u64..10_000,
        clstm in any::<bool>(),
        a in 0.0f64..100.0,
        b in 0.0f64..100.0,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let variant = if clstm { Variant::StClstm } else { Variant::StLstm };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = random_params(variant, &mut rng, 2.0);
        project(&mut p, &ConstraintSet::new(ConstraintTarget::Interval.tensor_names())).unwrap();
        let x = random_vec(&mut rng, N_I);
        let prev = random_state(&mut rng);
        let gates = |dt: f64, dd: f64| p.step(&StepInput { x: &x, dt, dd }, &prev, GateAblation::NONE).unwrap().1.gates();
        let (t_lo, t_hi) = (gates(lo, 1.0).t1.unwrap(), gates(hi, 1.0).t1.unwrap());
        let (d_lo, d_hi) = (gates(1.0, lo).d1.unwrap(), gates(1.0, hi).d1.unwrap());
        prop_assert!(t_lo.iter().zip(t_hi.iter()).all(|(x, y)| x >= y));
        prop_assert!(d_lo.iter().zip(d_hi.iter()).all(|(x, y)| x >= y));
    }
}

/// Per-step loss terms `a_t·h_t` of a 6-step unroll, with `edit` applied to
/// the state carried out of step `at`.
fn step_losses(p: &CellParams, seed: u64, at: usize, edit: impl Fn(&mut CellState)) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = CellState::zeros(N_C);
    let mut out = Vec::new();
    for t in 0..6 {
        let x = random_vec(&mut rng, N_I);
        let a = random_vec(&mut rng, N_C);
        let input = StepInput {
            x: &x,
            dt: 1.0 + t as f64,
            dd: 0.5 * t as f64,
        };
        let (mut next, _) = p.step(&input, &state, GateAblation::NONE).unwrap();
        if t == at {
            edit(&mut next);
        }
        out.push(next.h.iter().zip(&a).map(|(h, w)| h * w).sum::<f64>());
        state = next;
    }
    out
}

#[test]
fn long_term_state_only_reaches_later_steps() {
    for variant in Variant::ALL {
        let p = random_params(variant, &mut ChaCha8Rng::seed_from_u64(1), 0.8);
        let base = step_losses(&p, 9, 2, |_| {});
        let bumped = step_losses(&p, 9, 2, |s| s.c[1] += 1e-3);
        assert_eq!(base[..=2], bumped[..=2], "{variant}");
        assert!(base[3..].iter().zip(&bumped[3..]).all(|(x, y)| x != y), "{variant}");
    }
}

#[test]
fn short_term_state_only_reaches_its_own_step() {
    for variant in [Variant::StLstm, Variant::StClstm] {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(variant, &mut rng, 0.8);
        let x = random_vec(&mut rng, N_I);
        let prev = random_state(&mut rng);
        let (next, cache) = p
            .step(
                &StepInput {
                    x: &x,
                    dt: 3.0,
                    dd: 1.0,
                },
                &prev,
                GateAblation::NONE,
            )
            .unwrap();
        assert_ne!(next.c, next.c_hat, "{variant}");

        // h is read off the short-term state: h = o ⊙ tanh(ĉ)
        let o = cache.gates().o;
        let h_of = |c_hat: &[f64]| -> Vec<f64> { c_hat.iter().zip(o.iter()).map(|(c, o)| o * c.tanh()).collect() };
        assert_eq!(next.h.as_slice(), h_of(&next.c_hat).as_slice());
        let mut shifted = next.c_hat.clone();
        shifted[0] += 1e-3;
        assert_ne!(h_of(&shifted)[0], next.h[0]);

        // the carried ĉ is never read by the next step
        let base = step_losses(&p, 4, 2, |_| {});
        let bumped = step_losses(&p, 4, 2, |s| s.c_hat[0] += 1.0);
        assert_eq!(base, bumped, "{variant}");
    }
}
