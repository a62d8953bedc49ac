use proptest::prelude::*;

use ctrl_rl::model::{linear_example, ActionSpace};
use ctrl_rl::policy::GibbsPolicy;
use ctrl_rl::qlearn::{example_q_family, mean_field_h_closed, tilt_variance, Schedule};
use ctrl_rl::regret::{accumulate, fit_exponent};
use ctrl_rl::value::ValueSurface;

fn quadrature_integral(space: ActionSpace, f: impl Fn(f64) -> f64) -> f64 {
    let m = space.quadrature_points();
    let h = space.spacing();
    (0..m)
        .map(|i| {
            let w = if i == 0 || i + 1 == m { 0.5 } else { 1.0 };
            w * f(space.node(i))
        })
        .sum::<f64>()
        * h
}

proptest! {
    #[test]
    fn gibbs_density_is_normalized(c0 in -50.0..50.0f64, c1 in -20.0..20.0f64, c2 in -20.0..20.0f64,
                                   lo in -3.0..0.0f64, width in 0.5..4.0f64) {
        let space = ActionSpace::new(lo, lo + width).unwrap();
        let g = move |a: f64| {
            let s = (a - lo) / width;
            (c0 + c1 * s + c2 * (6.0 * s).sin()).clamp(-50.0, 50.0)
        };
        let p = GibbsPolicy::state_independent(g, 1.0, space).unwrap();
        let mass = quadrature_integral(space, |a| p.density(0.0, 0.0, a).unwrap());
        prop_assert!((mass - 1.0).abs() <= 1e-8, "mass {mass}");
        let ent = p.stats(0.0, 0.0).unwrap().entropy;
        prop_assert!(ent <= width.ln() + 1e-8);
    }

    #[test]
    fn density_is_shift_invariant(phi in -10.0..10.0f64, c in -10.0..10.0f64, a in 0.0..=1.0f64) {
        let space = ActionSpace::new(0.0, 1.0).unwrap();
        let p = GibbsPolicy::state_independent(move |a| phi * a, 1.0, space).unwrap();
        let q = GibbsPolicy::state_independent(move |a| phi * a + c, 1.0, space).unwrap();
        let (dp, dq) = (p.density(0.0, 0.0, a).unwrap(), q.density(0.0, 0.0, a).unwrap());
        prop_assert!((dp - dq).abs() <= 1e-12 * dp.max(1.0));
    }

    #[test]
    fn closed_drift_is_odd(phi in -20.0..20.0f64, horizon in 0.1..5.0f64) {
        let sum = mean_field_h_closed(phi, horizon) + mean_field_h_closed(-phi, horizon);
        prop_assert!(sum.abs() <= 1e-12);
    }

    #[test]
    fn closed_drift_matches_variance_form(phi in -3.0..3.0f64, horizon in 0.1..5.0f64) {
        let h = mean_field_h_closed(phi, horizon);
        prop_assert!((h + 0.5 * phi * tilt_variance(phi) * horizon).abs() <= 1e-12 * horizon.max(1.0));
    }

    #[test]
    fn dissipative_near_zero(phi in -1.0..1.0f64) {
        prop_assert!(phi * mean_field_h_closed(phi, 1.0) <= -phi * phi / 48.0);
    }

    #[test]
    fn example_q_is_a_log_density(phi in -5.0..5.0f64) {
        let family = example_q_family(1.0);
        let space = ActionSpace::with_quadrature(0.0, 1.0, 65537).unwrap();
        let mass = quadrature_integral(space, |a| family.q(&[phi], 0.0, 0.0, a).exp());
        prop_assert!((mass - 1.0).abs() <= 1e-8, "mass {mass}");
    }

    #[test]
    fn schedule_is_positive_and_nonincreasing(a in 0.01..100.0f64, b in 0.0..100.0f64, nu in 0.05..=1.0f64) {
        let s = Schedule::new(a, b, nu).unwrap();
        let mut prev = f64::INFINITY;
        for n in 1..200 {
            let r = s.rate(n);
            prop_assert!(r > 0.0 && r <= prev);
            prev = r;
        }
        if nu >= 0.5 {
            let n = 1e12f64;
            prop_assert!((s.rate(n as usize) * n.powf(nu) / a - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn exponent_is_scale_invariant(p in 0.1..1.5f64, scale in 1e-3..1e3f64, noise in 0.0..0.3f64) {
        let cum: Vec<f64> = (1..=400)
            .map(|k| (k as f64).powf(p) * (1.0 + noise * ((k as f64).sin() * 0.5)))
            .collect();
        let scaled: Vec<f64> = cum.iter().map(|c| c * scale).collect();
        let (e1, _) = fit_exponent(&cum, (40, 400)).unwrap();
        let (e2, _) = fit_exponent(&scaled, (40, 400)).unwrap();
        prop_assert!((e1 - e2).abs() <= 1e-12);
    }

    #[test]
    fn accumulate_inverts_differences(steps in proptest::collection::vec(0.0..10.0f64, 1..200)) {
        let mut running = 0.0;
        let cum: Vec<f64> = steps.iter().map(|s| { running += s; running }).collect();
        let diffs: Vec<f64> = cum.iter().enumerate()
            .map(|(i, c)| if i == 0 { *c } else { c - cum[i - 1] })
            .collect();
        let back = accumulate(&diffs).unwrap();
        for (x, y) in back.iter().zip(&cum) {
            prop_assert!((x - y).abs() <= 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn affine_surfaces_have_exact_gradient(c in -5.0..5.0f64, k in -5.0..5.0f64, m in -5.0..5.0f64,
                                            t in 0.0..1.0f64, x in -2.0..2.0f64) {
        let ts: Vec<f64> = (0..=4).map(|i| i as f64 * 0.25).collect();
        let xs: Vec<f64> = (0..=16).map(|j| -2.0 + j as f64 * 0.25).collect();
        let s = ValueSurface::from_fn(ts, xs, |t, x| c + k * x + m * t).unwrap();
        prop_assert!((s.gradient(t, x).unwrap() - k).abs() <= 1e-10);
    }
}

#[test]
fn entropy_grows_with_temperature() {
    let space = ActionSpace::new(0.0, 1.0).unwrap();
    for phi in [-3.0, -1.0, 0.5, 2.0] {
        let mut prev = f64::NEG_INFINITY;
        for gamma in [0.25, 0.5, 1.0, 2.0, 4.0] {
            let p = GibbsPolicy::state_independent(move |a| phi * a, gamma, space).unwrap();
            let ent = p.stats(0.0, 0.0).unwrap().entropy;
            assert!(ent >= prev, "phi {phi} gamma {gamma}: {ent} < {prev}");
            prev = ent;
        }
    }
}

#[test]
fn lipschitz_quotient_of_linear_terminal_reward_is_one() {
    let spec = linear_example(1.0, 1.0).unwrap();
    let report = ctrl_rl::model::check_assumptions(&spec, 300, 21);
    assert!((report.max_lipschitz_quotient - 1.0).abs() <= 1e-12);
}
