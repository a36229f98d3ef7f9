//! Property suites over the public API: data splits, losses and the dual map.

use bayes_admm::harness::{gen_blobs, split, SplitKind, SplitPlan};
use bayes_admm::linalg::max_abs_vec;
use bayes_admm::losses::LossSpec;
use bayes_admm::FamilyDescriptor;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fd_grad(loss: &LossSpec, theta: &DVector<f64>) -> DVector<f64> {
    let h = 1e-6;
    DVector::from_fn(theta.len(), |i, _| {
        let mut p = theta.clone();
        let mut q = theta.clone();
        p[i] += h;
        q[i] -= h;
        (loss.value(&p).unwrap() - loss.value(&q).unwrap()) / (2.0 * h)
    })
}

fn random_logistic(seed: u64, n: usize, d: usize) -> LossSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
    let y = DVector::from_fn(n, |_, _| f64::from(rng.random_bool(0.5)));
    LossSpec::logistic(x, y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn splits_partition_the_examples(seed in 0u64..1000, k in 1usize..6, conc in 0.1f64..50.0) {
        let ds = gen_blobs(30, 4, 2, 2.0, seed).unwrap();
        let kinds = [
            SplitKind::Homogeneous,
            SplitKind::Dirichlet { concentration: conc },
        ];
        for kind in kinds {
            let plan = SplitPlan { kind, k, seed };
            match split(&ds, &plan) {
                Ok(shards) => {
                    let mut all: Vec<usize> = shards.into_iter().flatten().collect();
                    all.sort_unstable();
                    prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
                }
                Err(e) => prop_assert!(matches!(e, bayes_admm::Error::EmptyClient(_)), "{}", e),
            }
        }
    }

    #[test]
    fn logistic_gradient_matches_finite_differences(seed in 0u64..1000, d in 1usize..5) {
        let loss = random_logistic(seed, 12, d);
        let theta = DVector::from_fn(d, |i, _| (i as f64 - 1.0) * 0.3);
        let g = loss.grad(&theta).unwrap();
        prop_assert!(max_abs_vec(&(g - fd_grad(&loss, &theta))) < 1e-6);
    }

    #[test]
    fn dual_map_roundtrips(seed in 0u64..1000, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let prec = &a * a.transpose() + DMatrix::identity(d, d) * 0.5;
        let m = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
        for fam in [FamilyDescriptor::full(d), FamilyDescriptor::diag(d), FamilyDescriptor::isotropic(d)] {
            let lam = fam.from_mean_precision(m.clone(), &prec).unwrap();
            let back = fam.to_natural(&fam.to_expectation(&lam).unwrap()).unwrap();
            let scale = fam.natural_coords(&lam).unwrap().ambient_norm_inf().max(1.0);
            prop_assert!(fam.nat_sub(&back, &lam).unwrap().ambient_norm_inf() / scale < 1e-10);
        }
    }
}
