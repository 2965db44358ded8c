use std::sync::{Arc, OnceLock};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pointbirth::field::{h_norm, FieldSample, RadialGrid, Semigroup, TestFunction};
use pointbirth::kernel::{heat_kernel, palpha_kernel, KernelParams, SpacePoint};
use pointbirth::loglaplace::{csb_step, elementary_bound};
use pointbirth::simulate::csb_sample;
use pointbirth::specfun::{k0_tilde, macdonald_k0};

fn point(d: usize, r: f64, c: f64) -> SpacePoint {
    SpacePoint::at_angle(d, r, c)
}

fn semigroup(d: usize) -> &'static Semigroup {
    static SG: [OnceLock<Semigroup>; 2] = [OnceLock::new(), OnceLock::new()];
    SG[d - 2].get_or_init(|| {
        let grid = Arc::new(RadialGrid::new(d, 192, 1e-3, 20.0).unwrap());
        Semigroup::new(KernelParams::new(d, 0.3).unwrap(), grid).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_is_symmetric(d in 2usize..=3, alpha in -1.0f64..2.0, t in 0.01f64..2.0,
                           a in 0.05f64..3.0, b in 0.05f64..3.0, c in -1.0f64..1.0) {
        let p = KernelParams::new(d, alpha).unwrap();
        let (x, y) = (SpacePoint::on_axis(d, a), point(d, b, c));
        let xy = palpha_kernel(&p, t, &x, &y).unwrap().value;
        let yx = palpha_kernel(&p, t, &y, &x).unwrap().value;
        prop_assert!((xy - yx).abs() <= 1e-10 * xy.abs().max(1e-300), "{xy} vs {yx}");
    }

    #[test]
    fn kernel_dominates_heat_and_decreases_in_alpha(d in 2usize..=3, alpha in -1.0f64..2.0, step in 0.01f64..2.0,
                                                  t in 0.01f64..2.0, a in 0.05f64..3.0, b in 0.05f64..3.0,
                                                  c in -1.0f64..1.0) {
        let (x, y) = (SpacePoint::on_axis(d, a), point(d, b, c));
        let lo = palpha_kernel(&KernelParams::new(d, alpha).unwrap(), t, &x, &y).unwrap();
        let hi = palpha_kernel(&KernelParams::new(d, alpha + step).unwrap(), t, &x, &y).unwrap();
        let heat = heat_kernel(d, t, &x, &y).unwrap();
        prop_assert!((lo.heat - heat).abs() <= 1e-12 * heat.max(1e-300));
        prop_assert!(lo.value >= heat * (1.0 - 1e-10), "P^alpha {} below heat {heat}", lo.value);
        prop_assert!(hi.value <= lo.value * (1.0 + 1e-10), "not decreasing: {} > {}", hi.value, lo.value);
    }

    #[test]
    fn csb_flow_is_a_contracting_semigroup(v in 0.0f64..50.0, s in 0.0f64..2.0, t in 0.0f64..2.0,
                                           eta in 0.0f64..3.0, beta in 0.05f64..=1.0, w in 0.0f64..50.0) {
        let one = csb_step(v, s + t, eta, beta);
        let two = csb_step(csb_step(v, s, eta, beta), t, eta, beta);
        prop_assert!((one - two).abs() <= 1e-12 * v.max(1.0));
        prop_assert!((0.0..=v).contains(&one));
        let (lo, hi) = if v <= w { (v, w) } else { (w, v) };
        prop_assert!(csb_step(lo, t, eta, beta) <= csb_step(hi, t, eta, beta) * (1.0 + 1e-14));
    }

    #[test]
    fn elementary_inequality_holds(a in -1e3f64..1e3, b in -1e3f64..1e3, beta in 0.0f64..=1.0) {
        let (lhs, rhs) = elementary_bound(a, b, beta);
        prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-300, "{lhs} > {rhs}");
    }

    #[test]
    fn h_norm_is_homogeneous(d in 2usize..=3, sigma in 0.2f64..3.0, c in 0.0f64..10.0, rho in 1.0f64..3.0) {
        let grid = semigroup(d).grid.clone();
        let f = TestFunction::gaussian(d, rho, 1.0, sigma).sample(&grid);
        let base = h_norm(&f, rho).unwrap();
        let scaled = h_norm(&f.map(|v| c * v), rho).unwrap();
        prop_assert!((scaled - c * base).abs() <= 1e-12 * (c * base).max(1e-300));
    }

    #[test]
    fn flow_is_positive_and_mass_ordered(d in 2usize..=3, t in 0.05f64..1.0, sigma in 0.2f64..2.0) {
        let sg = semigroup(d);
        let f = TestFunction::gaussian(d, 2.0, 1.0, sigma).sample(&sg.grid);
        let out = sg.apply(t, &f).unwrap();
        prop_assert!(out.values.iter().all(|v| *v >= -1e-12));
        let bigger = sg.apply(t, &f.map(|v| 2.0 * v)).unwrap();
        for (a, b) in out.values.iter().zip(&bigger.values) {
            prop_assert!((b - 2.0 * a).abs() <= 1e-12 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn k0_is_positive_and_decreasing(z in 1e-8f64..60.0, dz in 1e-3f64..5.0) {
        let (a, b) = (macdonald_k0(z).unwrap(), macdonald_k0(z + dz).unwrap());
        prop_assert!(a > 0.0 && b > 0.0 && b < a);
        let k = k0_tilde(z).unwrap();
        prop_assert!(k > 0.0 && k < 1.0);
    }

    #[test]
    fn csb_sample_is_reproducible_and_nonnegative(mass in 0.0f64..5.0, delta in 0.1f64..1.0,
                                                 eta in 0.5f64..2.0, beta in 0.5f64..=1.0, seed in any::<u64>()) {
        let a = csb_sample(mass, delta, eta, beta, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = csb_sample(mass, delta, eta, beta, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(a >= 0.0 && a.is_finite());
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn zero_field_stays_zero() {
    let sg = semigroup(3);
    let z = FieldSample::zeros(sg.grid.clone());
    assert_eq!(sg.apply(0.5, &z).unwrap().max_abs(), 0.0);
}
