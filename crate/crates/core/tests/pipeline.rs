//! End-to-end checks that run environment, tower, operators and limits together.

use proptest::prelude::*;

use rtower::env::{geo, gm3, gm3_irregular, validate_family, Environment, Family};
use rtower::limits::{variance, Fiber, MeasureKind};
use rtower::observable::Observable;
use rtower::ops::C64;
use rtower::tower::{enumerate_cylinders, RandomTower, CYLINDER_CAP};

fn system(model: (Family, Vec<f64>), seed: u64) -> RandomTower {
    let (fam, probs) = model;
    validate_family(&fam.symbols, &probs).expect("valid family");
    RandomTower::new(fam, Environment::new(seed, probs).unwrap()).unwrap()
}

fn cylinder_mgf(sys: &RandomTower, fiber: &Fiber, phi: &Observable, anchor: i64, n: usize, z: C64) -> C64 {
    let d = &fiber.density;
    enumerate_cylinders(sys, anchor, n, phi, Some(&|l, a| d.h_at(l, a)), CYLINDER_CAP)
        .unwrap()
        .iter()
        .map(|c| (z * c.birkhoff_sum).exp() * c.mass_mu)
        .sum()
}

#[test]
fn mgf_at_zero_is_one_and_slope_is_the_mean() {
    let phi = Observable::base_indicator();
    for model in [gm3(), gm3_irregular(), geo(0.5, 10)] {
        let sys = system(model, 11);
        let fiber = Fiber::new(&sys, &phi, 3, 1).unwrap();
        for n in [1, 5, 9] {
            let one = fiber.mgf(C64::new(0.0, 0.0), n, MeasureKind::Equivariant).unwrap();
            assert!((one.value() - C64::new(1.0, 0.0)).norm() < 1e-12);
            let h = 1e-5;
            let up = fiber.mgf(C64::new(h, 0.0), n, MeasureKind::Equivariant).unwrap().value().re;
            let dn = fiber.mgf(C64::new(-h, 0.0), n, MeasureKind::Equivariant).unwrap().value().re;
            let slope = (up - dn) / (2.0 * h);
            let d = &fiber.density;
            let mean: f64 = enumerate_cylinders(&sys, 3, n, &phi, Some(&|l, a| d.h_at(l, a)), CYLINDER_CAP)
                .unwrap()
                .iter()
                .map(|c| c.mass_mu * c.birkhoff_sum)
                .sum();
            assert!((slope - mean).abs() < 1e-8, "n={n}: {slope} vs {mean}");
        }
    }
}

#[test]
fn variance_estimators_agree_beyond_gm3() {
    let phi = Observable::base_indicator();
    for model in [gm3_irregular(), geo(0.5, 10)] {
        let sys = system(model, 5);
        let r = variance(&sys, 0, &phi, 10, 32).unwrap();
        assert!(!r.degenerate);
        assert!(r.max_relative_gap < 1e-4, "{}", r.max_relative_gap);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn operator_mgf_matches_cylinders(
        seed in 0u64..1000,
        anchor in -50i64..50,
        n in 1usize..7,
        re in -0.5f64..0.5,
        im in -0.5f64..0.5,
        values in prop::collection::vec(-1.0f64..1.0, 5),
    ) {
        let sys = system(gm3(), seed);
        let phi = Observable::atom_table(vec![values[..3].to_vec(), values[3..].to_vec()]);
        let fiber = Fiber::new(&sys, &phi, anchor, 1).unwrap();
        let z = C64::new(re, im);
        let op = fiber.mgf(z, n, MeasureKind::Equivariant).unwrap().value();
        let brute = cylinder_mgf(&sys, &fiber, &phi, anchor, n, z);
        prop_assert!((op - brute).norm() <= 1e-10 * brute.norm());
    }
}
