use proptest::prelude::*;

use super::mi::{dense_labels, discrete_mi, discretize};
use super::*;

fn latent_and_levels() -> impl Strategy<Value = (Vec<f64>, Vec<u16>)> {
    (2usize..80).prop_flat_map(|n| (prop::collection::vec(-5.0f64..5.0, n), prop::collection::vec(0u16..6, n)))
}

proptest! {
    #[test]
    fn mi_is_bounded((z, v) in latent_and_levels(), bins in 2usize..30) {
        let mi = mutual_info(&z, &v, bins).unwrap();
        let bound = (bins as f64).ln().min(entropy(&v));
        prop_assert!(mi >= 0.0);
        prop_assert!(mi <= bound + 1e-12, "{} > {}", mi, bound);
    }

    #[test]
    fn mi_is_symmetric((z, v) in latent_and_levels(), bins in 2usize..30) {
        if let Some(b) = discretize(&z, bins) {
            let (lv, k) = dense_labels(&v);
            let ab = discrete_mi(&b, bins, &lv, k);
            let ba = discrete_mi(&lv, k, &b, bins);
            prop_assert!((ab - ba).abs() < 1e-12);
        }
    }

    #[test]
    fn mig_is_permutation_invariant(
        seed in 0u64..1000,
        n in 10usize..60,
        perm_seed in 0u64..1000,
    ) {
        let mut rng = crate::rng::RngStream::new(seed);
        let nj = 5;
        let factors: Vec<Vec<u16>> = (0..n).map(|i| vec![(i % 2) as u16, (i % 3) as u16]).collect();
        let latents: Vec<Vec<f64>> = factors
            .iter()
            .map(|f| (0..nj).map(|j| if j < 2 { f[j] as f64 + 0.3 * rng.normal() } else { rng.normal() }).collect())
            .collect();
        let names = vec!["a".to_string(), "b".to_string()];
        let base = LatentFactorTable::new(latents.clone(), vec![0; nj], factors.clone(), names.clone(), DEFAULT_BINS).unwrap();
        let perm = crate::rng::RngStream::new(perm_seed).permutation(nj);
        let shuffled: Vec<Vec<f64>> = latents.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
        let other = LatentFactorTable::new(shuffled, vec![0; nj], factors, names, DEFAULT_BINS).unwrap();
        let (a, b) = (mig(&base).unwrap(), mig(&other).unwrap());
        prop_assert!((a.mig - b.mig).abs() < 1e-12);
        prop_assert!(a.mig >= 0.0 && a.mig <= 1.0 + 1e-12);
        let gap_mean: f64 = a.gaps.iter().flatten().sum::<f64>() / 2.0;
        prop_assert!((gap_mean - a.mig).abs() < 1e-12);
    }
}
