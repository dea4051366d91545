use apa_core::backbone::{fused_cross_attention, init_params, UNetConfig, SITES};
use apa_core::conditioning::{encode_text, pool_features, AudioFeatures, POOLING_RATES};
use apa_core::diffusion::combine_guidance;
use apa_core::metrics::{chroma_similarity, feature_stats, frechet_distance, transfer_score};
use apa_core::synthdata::{ConditionTokens, Spectrogram, Task, Timbre, FRAMES, FREQ_BINS};
use apa_numerics::Tensor;
use proptest::prelude::*;

fn grid() -> impl Strategy<Value = Spectrogram> {
    // Sparse grids so that silent frames and disjoint chroma both occur.
    proptest::collection::vec(prop_oneof![3 => Just(0.0f32), 1 => 0.0f32..1.0], FREQ_BINS * FRAMES)
        .prop_map(|v| Spectrogram::from_values(v).unwrap())
}

fn features(max_len: usize, dim: usize) -> impl Strategy<Value = Tensor<f32>> {
    (1..=max_len).prop_flat_map(move |len| {
        proptest::collection::vec(-3.0f32..3.0, len * dim).prop_map(move |v| Tensor::new([len, dim], v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pooled_windows_stay_within_their_range(seq in features(70, 5), k in 0usize..4) {
        let omega = POOLING_RATES[k];
        let (len, dim) = seq.dims2().unwrap();
        let pooled = pool_features(&AudioFeatures::from_seq(seq.clone()).unwrap(), omega).unwrap();
        prop_assert_eq!(pooled.len(), len.div_ceil(omega));
        for w in 0..pooled.len() {
            for j in 0..dim {
                let col: Vec<f32> = (w * omega..((w + 1) * omega).min(len)).map(|r| seq.data()[r * dim + j]).collect();
                let lo = col.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = col.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let v = pooled.seq().data()[w * dim + j];
                prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
            }
        }
    }

    #[test]
    fn guidance_is_affine_in_lambda(
        p in proptest::collection::vec(-4.0f32..4.0, 12),
        n in proptest::collection::vec(-4.0f32..4.0, 12),
        lambda in 0.0f32..12.0,
    ) {
        let pt = Tensor::new([3, 4], p.clone()).unwrap();
        let nt = Tensor::new([3, 4], n.clone()).unwrap();
        let got = combine_guidance(&pt, &nt, lambda);
        for i in 0..12 {
            let expect = n[i] as f64 + lambda as f64 * (p[i] as f64 - n[i] as f64);
            prop_assert!((got.data()[i] as f64 - expect).abs() <= 1e-6 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn frechet_distance_is_symmetric_and_nonnegative(
        a in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 3), 2..12),
        b in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 3), 2..12),
    ) {
        let (sa, sb) = (feature_stats(&a).unwrap(), feature_stats(&b).unwrap());
        let ab = frechet_distance(&sa, &sb).unwrap();
        let ba = frechet_distance(&sb, &sa).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0));
    }

    #[test]
    fn scores_are_bounded_and_chroma_symmetric(x in grid(), y in grid(), class in 0usize..4) {
        let xy = chroma_similarity(&x, &y);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&xy));
        prop_assert!((xy - chroma_similarity(&y, &x)).abs() < 1e-12);
        let t = transfer_score(&x, Task::Timbre, class).unwrap();
        prop_assert!((0.0..=1.0).contains(&t));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fusion_is_affine_in_alpha(alpha in 0.0f32..3.0, site in 0usize..3, seed in 0u64..1000) {
        let (base, adapter) = init_params(&UNetConfig::default(), seed).unwrap();
        let enc = base.encoder().unwrap();
        let c_y = encode_text(&ConditionTokens::for_target(Task::Timbre, 1, Timbre::Dark).unwrap(), &enc).unwrap();
        let site = SITES[site];
        let width = base.config.site_channels(site);
        let z = Tensor::from_fn([6, width], |i| ((i as f32 + seed as f32) * 0.71).sin());
        let c_x = AudioFeatures::from_seq(Tensor::from_fn([9, base.config.audio_dim], |i| ((i * 7 + 3) as f32 * 0.13).cos())).unwrap();
        let at = |a: f32| fused_cross_attention(&z, site, &c_y, Some(&c_x), a, &base, Some(&adapter)).unwrap();
        let (f0, f1, fa) = (at(0.0), at(1.0), at(alpha));
        for i in 0..fa.numel() {
            let expect = f0.data()[i] as f64 + alpha as f64 * (f1.data()[i] as f64 - f0.data()[i] as f64);
            prop_assert!((fa.data()[i] as f64 - expect).abs() < 1e-5);
        }
    }
}
