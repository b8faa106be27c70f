//! Property tests for the core numeric invariants.

use proptest::prelude::*;

use repmobile::audio::augment::roll_by;
use repmobile::audio::{Waveform, SAMPLE_RATE};
use repmobile::data::{make_subsets, subsets::check_nesting, SampleMeta};
use repmobile::reparam::pad_kernel;
use repmobile::tensor::kernels::{self, ConvSpec};
use repmobile::tensor::Tensor;

fn small_tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    proptest::collection::vec(-1.0f64..1.0, n)
        .prop_map(move |data| Tensor::from_vec(&shape, data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear_in_its_input(
        x in small_tensor(vec![1, 2, 6, 6]),
        w in small_tensor(vec![3, 2, 3, 3]),
        alpha in -3.0f64..3.0,
    ) {
        let spec = ConvSpec::new((1, 1), (1, 1), 1);
        let scaled_first = kernels::conv2d(&kernels::scale(&x, alpha), &w, None, &spec).unwrap();
        let scaled_after = kernels::scale(&kernels::conv2d(&x, &w, None, &spec).unwrap(), alpha);
        let tol = 1e-5 * (1.0 + scaled_after.max_abs());
        prop_assert!(scaled_first.max_abs_diff(&scaled_after) <= tol);
    }

    #[test]
    fn softmax_rows_are_distributions(
        logits in small_tensor(vec![3, 7]),
        tau in 0.05f64..5.0,
    ) {
        let y = kernels::softmax_t(&logits, tau).unwrap();
        for row in y.data().chunks(7) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn kl_is_nonnegative(
        p_raw in proptest::collection::vec(0.01f64..1.0, 6),
        q_raw in proptest::collection::vec(0.01f64..1.0, 6),
    ) {
        let norm = |v: &[f64]| {
            let s: f64 = v.iter().sum();
            Tensor::from_vec(&[1, 6], v.iter().map(|x| x / s).collect()).unwrap()
        };
        let kl = kernels::kl_divergence(&norm(&p_raw), &norm(&q_raw)).unwrap();
        prop_assert!(kl >= -1e-9);
    }

    #[test]
    fn padded_kernels_convolve_identically(
        x in small_tensor(vec![1, 3, 7, 7]),
        w in small_tensor(vec![3, 1, 1, 3]),
    ) {
        let orig = kernels::conv2d(&x, &w, None, &ConvSpec::new((1, 1), (0, 1), 3)).unwrap();
        let padded = pad_kernel(&w, (3, 3)).unwrap();
        let alt = kernels::conv2d(&x, &padded, None, &ConvSpec::new((1, 1), (1, 1), 3)).unwrap();
        prop_assert!(orig.max_abs_diff(&alt) <= 1e-6);
    }

    #[test]
    fn roll_preserves_sample_multiset(
        samples in proptest::collection::vec(-0.9f32..0.9, 64..256),
        shift in -300i32..300,
    ) {
        let w = Waveform::new(samples.clone(), SAMPLE_RATE).unwrap();
        let rolled = roll_by(&w, shift);
        let mut a: Vec<_> = w.samples().to_vec();
        let mut b: Vec<_> = rolled.samples().to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn subsets_nest_for_arbitrary_strata(
        class_sizes in proptest::collection::vec(4usize..40, 2..6),
        seed in 0u64..1000,
    ) {
        let mut samples = Vec::new();
        let mut id = 0u64;
        for (class, &n) in class_sizes.iter().enumerate() {
            for j in 0..n {
                samples.push(SampleMeta {
                    id,
                    class: class as u32,
                    device: (j % 3) as u32,
                    seed: id,
                    file: String::new(),
                });
                id += 1;
            }
        }
        let fractions = [1.0, 0.5, 0.25, 0.1];
        let manifests = make_subsets(&samples, &fractions, seed).unwrap();
        prop_assert!(check_nesting(&manifests));
        // per-class counts equal round(f * n_c) for every manifest
        for m in &manifests {
            for (class, &n) in class_sizes.iter().enumerate() {
                let got = m.ids.iter()
                    .filter(|i| samples[**i as usize].class == class as u32)
                    .count();
                let want = (m.fraction * n as f64 + 0.5).floor() as usize;
                prop_assert_eq!(got, want.min(n));
            }
        }
    }
}
