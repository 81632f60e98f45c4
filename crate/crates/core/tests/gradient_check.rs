mod common;

use common::{fd_relative_errors, negative_clamp_active, random_instance};
use simnl::classifier::{ResidualSet, Variant};
use simnl::train::{gradients, LossMode};

#[test]
fn ensemble_gradients_match_finite_differences() {
    for seed in 0..60 {
        let inst = random_instance(seed);
        let errs = fd_relative_errors(&inst, LossMode::EnsembleCe);
        for (b, e) in errs.iter().enumerate() {
            assert!(*e < 1e-4, "seed {seed} block {b}: {e:e}");
        }
    }
}

#[test]
fn negative_gradients_match_finite_differences() {
    let mut checked = 0;
    for seed in 0..80 {
        let inst = random_instance(seed);
        if negative_clamp_active(&inst) {
            continue;
        }
        let errs = fd_relative_errors(&inst, LossMode::NegativeCe);
        assert_eq!(errs[0], 0.0);
        assert_eq!(errs[2], 0.0);
        assert!(errs[1] < 1e-4 && errs[3] < 1e-4, "seed {seed}: {errs:?}");
        checked += 1;
    }
    assert!(checked >= 40, "only {checked} unclamped instances");
}

#[test]
fn gated_gradients_are_exact_zeros() {
    for seed in 0..20 {
        let mut inst = random_instance(seed);
        for v in Variant::ALL {
            let blocks = inst.res.blocks().map(|b| b.clone());
            let mut res = ResidualSet::zeros(inst.cache.num_classes, inst.cache.dim, v.enabled());
            for ((dst, src), on) in res.blocks_mut().into_iter().zip(&blocks).zip(v.enabled().as_array()) {
                if on {
                    *dst = src.clone();
                }
            }
            inst.res = res;
            let (_, g) = gradients(
                inst.f_v.view(),
                &inst.labels,
                &inst.cache,
                &inst.res,
                &inst.weighted,
                &inst.hp,
                LossMode::EnsembleCe,
            )
            .unwrap();
            for (blk, on) in g.blocks().iter().zip(v.enabled().as_array()) {
                if !on {
                    assert!(blk.iter().all(|&x| x == 0.0));
                }
            }
        }
    }
}
