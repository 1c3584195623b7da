mod common;

use common::{random_tensor, rng};
use modfuse_core::checkpoint::Checkpoint;
use modfuse_core::nn::ParamStore;
use modfuse_core::optim::{adamw_step, cosine_lr, poly_lr, AdamWState, Optimizer, ScheduleSpec, SgdState};
use proptest::prelude::*;
use rand::Rng;

fn store(seed: u64) -> ParamStore {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    s.add("a.w", random_tensor(&[3, 2], &mut r));
    s.add("a.b", random_tensor(&[3], &mut r));
    s.add("c", random_tensor(&[2, 2, 2], &mut r));
    s
}

fn randomise_grads(s: &mut ParamStore, r: &mut impl Rng, scale: f64) {
    for p in s.params_mut() {
        for g in p.grad.data_mut() {
            *g = r.random_range(-scale..scale);
        }
    }
}

#[test]
fn poly_matches_formula_at_quarter_points() {
    let s = ScheduleSpec::poly(1e-2, 200);
    for t in [0, 50, 100, 150, 200] {
        let expect = 1e-2 * (1.0 - t as f64 / 200.0).powf(0.9);
        assert!((poly_lr(t, &s).unwrap() - expect).abs() < 1e-12);
    }
    assert_eq!(poly_lr(0, &s).unwrap(), 1e-2);
    assert!((poly_lr(100, &s).unwrap() - 5.3589e-3).abs() < 5e-8);
}

#[test]
fn adamw_moments_stay_finite_over_long_runs() {
    let mut s = store(1);
    let mut state = AdamWState::new(&s, 0.01);
    let mut r = rng(2);
    for step in 0..1000 {
        let scale = if step % 97 == 0 { 1e3 } else { 1.0 };
        randomise_grads(&mut s, &mut r, scale);
        adamw_step(&mut s, &mut state, 1e-3);
    }
    for (m, v) in state.first_moments().iter().zip(state.second_moments()) {
        assert!(m.data().iter().all(|x| x.is_finite()));
        assert!(v.data().iter().all(|x| x.is_finite() && *x >= 0.0));
    }
    assert_eq!(state.step, 1000);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedules_strictly_decrease(eta0 in 1e-4f64..1.0, frac in 0.0f64..0.9, total in 1usize..400) {
        let poly = ScheduleSpec::poly(eta0, total);
        let cos = ScheduleSpec::cosine(eta0, total, eta0 * frac);
        for t in 0..total {
            prop_assert!(poly_lr(t + 1, &poly).unwrap() < poly_lr(t, &poly).unwrap());
            prop_assert!(cosine_lr(t + 1, &cos).unwrap() < cosine_lr(t, &cos).unwrap());
        }
        prop_assert!(poly_lr(total + 1, &poly).is_err());
        prop_assert!(cosine_lr(total + 1, &cos).is_err());
    }

    #[test]
    fn optimizer_state_round_trips_bit_exactly(seed in any::<u64>(), steps in 1usize..6, adam in any::<bool>()) {
        let mut s = store(seed);
        let mut opt = if adam {
            Optimizer::AdamW(AdamWState::new(&s, 0.05))
        } else {
            Optimizer::Sgd(SgdState::new(&s, 0.95, 3e-5).unwrap())
        };
        let mut r = rng(seed ^ 7);
        for _ in 0..steps {
            randomise_grads(&mut s, &mut r, 1.0);
            opt.step(&mut s, 0.01);
        }
        let mut ck = Checkpoint::new();
        opt.write_to(&mut ck, &s);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let restored = Optimizer::read_from(&back, &s).unwrap().unwrap();
        prop_assert_eq!(&restored, &opt);

        // identical continuation from the restored state
        let (mut s1, mut s2) = (s.clone(), s);
        let (mut o1, mut o2) = (opt, restored);
        randomise_grads(&mut s1, &mut r, 1.0);
        for (a, b) in s2.params_mut().iter_mut().zip(s1.params()) {
            a.grad = b.grad.clone();
        }
        o1.step(&mut s1, 0.01);
        o2.step(&mut s2, 0.01);
        prop_assert_eq!(s1, s2);
    }
}
