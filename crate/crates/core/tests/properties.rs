use focusfuse_core::focus::{confidence_map, pre_estimate};
use focusfuse_core::fusion::{fuse, normalize_weights, PARTITION_TOL};
use focusfuse_core::image::{
    decode_f32map, decode_gray, encode_f32map, encode_pgm, extract_patch, local_normalize,
};
use focusfuse_core::metrics::{ncie, psnr, q_g, q_nmi};
use focusfuse_core::{GrayImage, Patch32, QnnModel, WeightSigmoid};
use proptest::prelude::*;

fn image(w: usize, h: usize, lo: f64, hi: f64) -> impl Strategy<Value = GrayImage> {
    prop::collection::vec(lo..hi, w * h).prop_map(move |d| GrayImage::new(w, h, d).unwrap())
}

fn sized_images(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<GrayImage>> {
    (2usize..12, 2usize..12).prop_flat_map(move |(w, h)| prop::collection::vec(image(w, h, lo, hi), n))
}

fn integer_image(w: usize, h: usize) -> impl Strategy<Value = GrayImage> {
    prop::collection::vec(0u8..=255, w * h)
        .prop_map(move |d| GrayImage::new(w, h, d.into_iter().map(f64::from).collect()).unwrap())
}

fn triple() -> impl Strategy<Value = Vec<GrayImage>> {
    (4usize..20, 4usize..20).prop_flat_map(|(w, h)| prop::collection::vec(integer_image(w, h), 3))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn masks_partition_each_pixel(scores in (2usize..5).prop_flat_map(|n| sized_images(n, 0.0, 1.0))) {
        let masks = pre_estimate(&scores).unwrap();
        for i in 0..scores[0].len() {
            let sum: f64 = masks.iter().map(|m| m.data()[i]).sum();
            prop_assert_eq!(sum, 1.0);
        }
    }

    #[test]
    fn masks_follow_source_permutation(scores in sized_images(3, 0.0, 1.0)) {
        let masks = pre_estimate(&scores).unwrap();
        let rotated = vec![scores[2].clone(), scores[0].clone(), scores[1].clone()];
        let rmasks = pre_estimate(&rotated).unwrap();
        // Continuous random scores have no ties, so the winner moves with its source.
        prop_assert_eq!(&rmasks[0], &masks[2]);
        prop_assert_eq!(&rmasks[1], &masks[0]);
        prop_assert_eq!(&rmasks[2], &masks[1]);
    }

    #[test]
    fn masks_ignore_monotone_rescaling(scores in sized_images(3, 0.0, 1.0), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let warped: Vec<GrayImage> = scores.iter().map(|s| s.map(|v| (a * v + b).exp())).collect();
        prop_assert_eq!(pre_estimate(&scores).unwrap(), pre_estimate(&warped).unwrap());
    }

    #[test]
    fn confidence_takes_two_levels(scores in sized_images(2, 0.0, 1.0), thr in 0.0f64..1.0) {
        let c = confidence_map(&scores, thr).unwrap();
        prop_assert!(c.data().iter().all(|&v| v == 0.1 || v == 1.0));
    }

    #[test]
    fn weights_partition_unity(raw in (2usize..5).prop_flat_map(|n| sized_images(n, 0.0, 1.0))) {
        let w = normalize_weights(&raw, &WeightSigmoid::default()).unwrap();
        for i in 0..raw[0].len() {
            let sum: f64 = w.iter().map(|m| m.data()[i]).sum();
            prop_assert!((sum - 1.0).abs() <= PARTITION_TOL);
            prop_assert!(w.iter().all(|m| (0.0..=1.0).contains(&m.data()[i])));
        }
    }

    #[test]
    fn fusion_stays_within_sources(
        (pair, raw) in (2usize..12, 2usize..12).prop_flat_map(|(w, h)| (
            prop::collection::vec(image(w, h, 0.0, 255.0), 2),
            prop::collection::vec(image(w, h, 0.0, 1.0), 2),
        )),
    ) {
        let w = normalize_weights(&raw, &WeightSigmoid::default()).unwrap();
        let f = fuse(&pair, &w).unwrap();
        for i in 0..f.len() {
            let (a, b) = (pair[0].data()[i], pair[1].data()[i]);
            prop_assert!(f.data()[i] >= a.min(b) - 1e-9 && f.data()[i] <= a.max(b) + 1e-9);
        }
    }

    #[test]
    fn metrics_ignore_horizontal_flip(t in triple()) {
        let flipped: Vec<GrayImage> = t.iter().map(GrayImage::flip_horizontal).collect();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
        prop_assert!(close(q_g(&t[0], &t[1], &t[2]).unwrap(), q_g(&flipped[0], &flipped[1], &flipped[2]).unwrap()));
        prop_assert!(close(q_nmi(&t[0], &t[1], &t[2]).unwrap(), q_nmi(&flipped[0], &flipped[1], &flipped[2]).unwrap()));
        prop_assert!(close(ncie(&t[..2], &t[2]).unwrap(), ncie(&flipped[..2], &flipped[2]).unwrap()));
    }

    #[test]
    fn q_g_is_bounded_and_symmetric(t in triple()) {
        let q = q_g(&t[0], &t[1], &t[2]).unwrap();
        prop_assert!((0.0..=1.0).contains(&q));
        prop_assert!((q - q_g(&t[1], &t[0], &t[2]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn psnr_is_symmetric(t in triple()) {
        prop_assert_eq!(psnr(&t[0], &t[1]).unwrap(), psnr(&t[1], &t[0]).unwrap());
    }

    #[test]
    fn qnn_output_strictly_inside_unit_interval(
        values in prop::collection::vec(-1e3f64..1e3, 1024),
        seed in 0u64..1000,
    ) {
        let s = QnnModel::random(seed).forward(&Patch32::from_values(values).unwrap()).unwrap();
        prop_assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn patches_are_finite_everywhere(img in (1usize..40, 1usize..40).prop_flat_map(|(w, h)| image(w, h, 0.0, 255.0))) {
        let norm = local_normalize(&img, 7);
        for (x, y) in [(0, 0), (img.width() - 1, img.height() - 1), (img.width() / 2, img.height() / 2)] {
            let p = extract_patch(&norm, x, y).unwrap();
            prop_assert_eq!(p.values.len(), 1024);
            prop_assert!(p.values.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn pgm_round_trips_integer_images(img in (1usize..30, 1usize..30).prop_flat_map(|(w, h)| integer_image(w, h))) {
        prop_assert_eq!(decode_gray(&encode_pgm(&img)).unwrap(), img);
    }

    #[test]
    fn f32map_round_trips_f32_values(data in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..200)) {
        let img = GrayImage::new(data.len(), 1, data.iter().map(|v| f64::from(*v)).collect()).unwrap();
        prop_assert_eq!(decode_f32map(&encode_f32map(&img)).unwrap(), img);
    }
}
