use proptest::prelude::*;

use symn_core::noise::{self, NoiseKind, NoiseSpec};
use symn_core::tensor::Tensor;

fn lengths_strategy() -> impl Strategy<Value = (Vec<usize>, usize, usize)> {
    (1usize..8, 1usize..6).prop_flat_map(|(max_len, dim)| {
        (prop::collection::vec(1..=max_len, 1..4), Just(max_len), Just(dim))
    })
}

proptest! {
    #[test]
    fn bernoulli_family_blocks_have_norm_alpha(
        (lengths, max_len, dim) in lengths_strategy(),
        alpha in 0.0f64..20.0,
        seed in any::<u64>(),
        symmetric in any::<bool>(),
    ) {
        let kind = if symmetric { NoiseKind::SymmetricBernoulli } else { NoiseKind::Bernoulli };
        let spec = NoiseSpec::new(kind, alpha, seed).unwrap();
        let eps = noise::sample_noise(&spec, lengths.len(), max_len, dim, 3).unwrap();
        prop_assert!(eps.values().data().iter().all(|&v| v == 1.0 || v == -1.0));
        let term = noise::scaled_noise(&eps, &lengths, alpha, 1.0).unwrap();
        for (b, block) in term.data().chunks(max_len * dim).enumerate() {
            let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - alpha).abs() <= 1e-12 * alpha.max(1.0), "row {} norm {}", b, norm);
            prop_assert!(block[lengths[b] * dim..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn uniform_support_and_padding(
        (lengths, max_len, dim) in lengths_strategy(),
        seed in any::<u64>(),
    ) {
        let spec = NoiseSpec::new(NoiseKind::Uniform, 5.0, seed).unwrap();
        let eps = noise::sample_noise(&spec, lengths.len(), max_len, dim, 0).unwrap();
        prop_assert!(eps.values().data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let term = noise::scaled_noise(&eps, &lengths, 5.0, 1.0).unwrap();
        for (b, block) in term.data().chunks(max_len * dim).enumerate() {
            prop_assert!(block[lengths[b] * dim..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn symmetric_halves_use_one_draw(
        (lengths, max_len, dim) in lengths_strategy(),
        seed in any::<u64>(),
    ) {
        let b = lengths.len();
        let spec = NoiseSpec::new(NoiseKind::SymmetricBernoulli, 5.0, seed).unwrap();
        let eps = noise::sample_noise(&spec, b, max_len, dim, 1).unwrap();
        let zero = Tensor::zeros(&[b, max_len, dim]);
        let both = noise::make_symmetric_batch(&zero, &eps, &lengths, 5.0).unwrap();
        let (plus, minus) = both.data().split_at(b * max_len * dim);
        for (p, m) in plus.iter().zip(minus) {
            if *p == 0.0 {
                prop_assert_eq!(*m, 0.0);
            } else {
                prop_assert_eq!(p.to_bits(), (-m).to_bits());
            }
        }
    }

    #[test]
    fn draws_are_fresh_per_step_and_stable_per_address(seed in any::<u64>(), step in 0u64..1000) {
        let spec = NoiseSpec::new(NoiseKind::Gaussian, 5.0, seed).unwrap();
        let a = noise::sample_noise(&spec, 2, 3, 4, step).unwrap();
        prop_assert_eq!(&a, &noise::sample_noise(&spec, 2, 3, 4, step).unwrap());
        prop_assert_ne!(&a, &noise::sample_noise(&spec, 2, 3, 4, step + 1).unwrap());
    }
}

#[test]
fn uniform_mean_square_norm_is_a_third_of_alpha_squared() {
    let alpha = 5.0;
    let spec = NoiseSpec::new(NoiseKind::Uniform, alpha, 17).unwrap();
    let (len, dim) = (6, 8);
    let mut total = 0.0;
    for step in 0..1000 {
        let eps = noise::sample_noise(&spec, 1, len, dim, step).unwrap();
        let term = noise::scaled_noise(&eps, &[len], alpha, 1.0).unwrap();
        total += term.data().iter().map(|v| v * v).sum::<f64>();
    }
    let mean = total / 1000.0;
    let expected = alpha * alpha / 3.0;
    assert!((mean - expected).abs() / expected < 0.05, "mean {mean} vs {expected}");
}
