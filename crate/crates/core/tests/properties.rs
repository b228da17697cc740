use proptest::prelude::*;

use hourglass_core::data::{edit_distance, read_features, write_features, Checkpoint};
use hourglass_core::frontends::video_downsample;
use hourglass_core::losses::window_mass;
use hourglass_core::numerics::RngStream;
use hourglass_core::upsampler::{alternate_indices, stage_ratios};
use hourglass_core::{HourglassModel, Mode, ModelConfig, Tensor};

proptest! {
    #[test]
    fn downsampling_keeps_every_dth_frame(n in 1usize..80, d in 1usize..7, seed in any::<u64>()) {
        let video = RngStream::new(seed).normal_tensor(&[n, 2, 2, 1], 1.0);
        let ds = video_downsample(&video, d).unwrap();
        let k = n.div_ceil(d);
        prop_assert_eq!(ds.kept.rows(), k);
        prop_assert_eq!(ds.retained.rows(), k * d);
        for i in 0..k * d {
            prop_assert_eq!(ds.retained.row(i), video.row(i.min(n - 1)));
        }
        for i in 0..k {
            prop_assert_eq!(ds.kept.row(i), video.row(i * d));
        }
    }

    #[test]
    fn stage_ratios_factor_the_downsampling(d in 1usize..40) {
        let r = stage_ratios(d);
        prop_assert_eq!(r.iter().product::<usize>(), d);
        prop_assert!(r.iter().all(|&x| x >= 2));
    }

    #[test]
    fn interleave_is_a_permutation(t in 0usize..20, r in 1usize..6) {
        let mut idx = alternate_indices(t, r);
        for k in 0..t {
            prop_assert_eq!(idx[k * r], k);
        }
        idx.sort_unstable();
        prop_assert_eq!(idx, (0..t * r).collect::<Vec<_>>());
    }

    #[test]
    fn edit_distance_is_a_bounded_symmetric_metric(
        a in prop::collection::vec(0usize..4, 0..8),
        b in prop::collection::vec(0usize..4, 0..8),
    ) {
        let d = edit_distance(&a, &b);
        prop_assert_eq!(d, edit_distance(&b, &a));
        prop_assert!(d <= a.len().max(b.len()));
        prop_assert!(d >= a.len().abs_diff(b.len()));
        prop_assert_eq!(d == 0, a == b);
    }

    #[test]
    fn window_mass_is_at_most_the_valid_rows(
        tq in 1usize..12, tk in 1usize..12, past in 0usize..4, future in 0usize..4, seed in any::<u64>(),
    ) {
        let mut rng = RngStream::new(seed);
        let mut data = Vec::with_capacity(tq * tk);
        for _ in 0..tq {
            let row: Vec<f64> = (0..tk).map(|_| rng.uniform() + 1e-3).collect();
            let z: f64 = row.iter().sum();
            data.extend(row.iter().map(|v| v / z));
        }
        let alpha = Tensor::new(vec![tq, tk], data).unwrap();
        let valid = rng.int_range(0, tq);
        let m = window_mass(&alpha, valid, past, future).unwrap();
        prop_assert!(m >= 0.0 && m <= valid as f64 + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn feature_files_round_trip(shape in prop::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
        let t = RngStream::new(seed).normal_tensor(&shape, 3.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.feat");
        write_features(&path, &t).unwrap();
        prop_assert_eq!(read_features(&path).unwrap(), t);
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), mode in 0usize..7) {
        let model = HourglassModel::new(Mode::ALL[mode].apply(&ModelConfig::tiny()), seed).unwrap();
        let ck = Checkpoint::from_model(&model, seed % 1000, None);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &ck);
        let restored = back.to_model().unwrap();
        prop_assert_eq!(restored.store().len(), model.store().len());
    }
}
