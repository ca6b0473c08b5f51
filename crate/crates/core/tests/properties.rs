use std::path::Path;

use candle_core::Tensor;
use image::{GrayImage, Luma};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

use incontext::egn::{egn_training_step, generate_pose, EgnConfig, EgnModel, EgnVariant};
use incontext::frn::{blend_face, crop_face, identity_loss};
use incontext::losses::{fm_discriminator, grad_l1, hinge_d, l1, LossReport, LossWeights};
use incontext::mcrn::{composite, render, McrnConfig, McrnModel};
use incontext::metrics::{binary_iou, dpis, evaluate_directory, index_iou, ssim, DenseIndexMap, DpisMode, Pairing, SsimConfig};
use incontext::nn::{device, PerceptualExtractor};
use incontext::pipeline::insert::sample_inference_bbox;
use incontext::pipeline::train::{egn_example, mcrn_example};
use incontext::pipeline::{ingest, write_dataset};
use incontext::raster::BBox;
use incontext::semantic::{
    bbox_from_labels, face_hull_channel, is_code, reduce_labels, FaceChannel, LabelPalette, CODES,
};
use incontext::synthetic;

fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &device()).unwrap()
}

fn scalar(x: Tensor) -> f64 {
    x.to_scalar::<f64>().unwrap()
}

fn gray(w: u32, h: u32) -> impl Strategy<Value = GrayImage> {
    proptest::collection::vec(prop_oneof![2 => Just(0u8), 1 => Just(255u8)], (w * h) as usize)
        .prop_map(move |v| GrayImage::from_raw(w, h, v).unwrap())
}

fn dense(w: u32, h: u32, max: u8) -> impl Strategy<Value = DenseIndexMap> {
    proptest::collection::vec(prop_oneof![2 => Just(0u8), 3 => 1u8..=max], (w * h) as usize)
        .prop_map(move |v| DenseIndexMap::new(GrayImage::from_raw(w, h, v).unwrap()).unwrap())
}

fn plane(c: usize, h: usize, w: usize) -> impl Strategy<Value = Array3<f32>> {
    proptest::collection::vec(-1.0f32..1.0, c * h * w).prop_map(move |v| Array3::from_shape_vec((c, h, w), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reduce_is_idempotent_through_identity(raw in proptest::collection::vec(0u8..19, 64)) {
        let raw = GrayImage::from_raw(8, 8, raw).unwrap();
        let once = reduce_labels(&raw, &LabelPalette::default()).unwrap();
        prop_assert!(once.pixels().iter().all(|&v| is_code(v)));
        let twice = reduce_labels(once.pixels(), &LabelPalette::identity()).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn hull_channel_is_binary(sets in proptest::collection::vec(
        proptest::collection::vec((-4.0f32..28.0, -4.0f32..20.0).prop_map(|(x, y)| [x, y]), 0..7), 0..4)) {
        let f = face_hull_channel(&sets, 24, 16);
        prop_assert!(f.pixels().iter().all(|&v| v == 0 || v == 255));
    }

    #[test]
    fn label_box_is_tight(mask in gray(12, 9)) {
        match bbox_from_labels(&mask) {
            Err(_) => prop_assert!(mask.iter().all(|&v| v == 0)),
            Ok(c) => {
                let b = c.bbox;
                let on = |x: u32, y: u32| mask.get_pixel(x, y).0[0] != 0;
                for (x, y, v) in mask.enumerate_pixels() {
                    if v.0[0] != 0 {
                        prop_assert!(b.contains(x, y));
                    }
                }
                prop_assert!((b.x_min..=b.x_max).any(|x| on(x, b.y_min)));
                prop_assert!((b.x_min..=b.x_max).any(|x| on(x, b.y_max)));
                prop_assert!((b.y_min..=b.y_max).any(|y| on(b.x_min, y)));
                prop_assert!((b.y_min..=b.y_max).any(|y| on(b.x_max, y)));
            }
        }
    }

    #[test]
    fn l1_family_nonnegative_and_zero_on_equal(
        a in proptest::collection::vec(-2.0f64..2.0, 24),
        b in proptest::collection::vec(-2.0f64..2.0, 24),
    ) {
        let (a, b) = (t(a, &[2, 3, 4]), t(b, &[2, 3, 4]));
        prop_assert!(scalar(l1(&a, &b).unwrap()) >= 0.0);
        prop_assert_eq!(scalar(l1(&a, &a).unwrap()), 0.0);
        prop_assert!(scalar(grad_l1(&a, None).unwrap()) >= 0.0);
        prop_assert!(scalar(grad_l1(&a, Some(&b)).unwrap()) >= 0.0);
        prop_assert_eq!(scalar(grad_l1(&a, Some(&a)).unwrap()), 0.0);
        let bank = vec![vec![a.clone(), b.clone()]];
        prop_assert_eq!(scalar(fm_discriminator(&bank, &bank).unwrap()), 0.0);
        prop_assert!(scalar(fm_discriminator(&bank, &[vec![b.clone(), a.clone()]]).unwrap()) >= 0.0);
        prop_assert!(scalar(hinge_d(&[a.clone()], &[b.clone()]).unwrap()) >= 0.0);
    }

    #[test]
    fn identity_loss_symmetric_and_zero_iff_equal(
        a in proptest::collection::vec(-2.0f64..2.0, 6),
        b in proptest::collection::vec(-2.0f64..2.0, 6),
    ) {
        let equal = a == b;
        let (a, b) = (t(a, &[1, 6]), t(b, &[1, 6]));
        let ab = scalar(identity_loss(&a, &b).unwrap());
        prop_assert_eq!(ab, scalar(identity_loss(&b, &a).unwrap()));
        prop_assert_eq!(ab == 0.0, equal);
    }

    #[test]
    fn report_totals(c in proptest::collection::vec(-5.0f64..5.0, 10), w in proptest::collection::vec(0.0f64..10.0, 9)) {
        let weights = LossWeights {
            adversarial: w[0], fm_discriminator: w[1], fm_perceptual: w[2], mask_l1: w[3], mask_grad: w[4],
            recon_l1: w[5], recon_grad: w[6], pose_grad: w[7], face_identity: w[8],
        };
        let r = LossReport {
            adversarial_g: c[0], adversarial_d: c[1], fm_d: c[2], fm_perceptual: c[3], mask_l1: c[4],
            mask_grad: c[5], recon_l1: c[6], recon_grad: c[7], pose_grad: c[8], face_identity: c[9],
            ..Default::default()
        }
        .finalize(weights);
        let g = w[0] * c[0] + w[1] * c[2] + w[2] * c[3] + w[3] * c[4] + w[4] * c[5]
            + w[5] * c[6] + w[6] * c[7] + w[7] * c[8] + w[8] * c[9];
        prop_assert!((r.total_g - g).abs() <= 1e-12);
        prop_assert!((r.total_d - w[0] * c[1]).abs() <= 1e-12);
    }

    #[test]
    fn composite_is_local_and_convex(x in plane(3, 6, 7), z in plane(3, 6, 7), m in proptest::collection::vec(
        prop_oneof![Just(0.0f32), 0.0f32..1e-3, 0.0f32..=1.0, Just(1.0f32)], 42)) {
        let m = Array2::from_shape_vec((6, 7), m).unwrap();
        let o = composite(&x, &z, &m).unwrap();
        let spread = x.iter().zip(z.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        for ((c, i, j), &v) in o.indexed_iter() {
            let (xv, zv, mv) = (x[[c, i, j]], z[[c, i, j]], m[[i, j]]);
            prop_assert!(v >= xv.min(zv) - 1e-6 && v <= xv.max(zv) + 1e-6);
            if mv < 1e-3 {
                prop_assert!((v - xv).abs() <= 1e-3 * spread + 1e-7);
            }
        }
    }

    #[test]
    fn face_blend_touches_only_the_box(
        o in plane(3, 20, 24),
        (x0, y0, bw, bh) in (0u32..20, 0u32..16, 1u32..5, 1u32..5),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let bbox = BBox::new(x0, y0, x0 + bw - 1, y0 + bh - 1);
        let (h, w) = (bh as usize, bw as usize);
        let f = Array3::from_shape_fn((3, h, w), |_| rng.random_range(-1.0f32..1.0));
        let mf = Array2::from_shape_fn((h, w), |_| rng.random_range(0.0f32..=1.0));
        let out = blend_face(&o, &f, &mf, bbox).unwrap();
        for ((c, i, j), &v) in out.indexed_iter() {
            if !bbox.contains(j as u32, i as u32) {
                prop_assert_eq!(v.to_bits(), o[[c, i, j]].to_bits());
            }
        }
    }

    #[test]
    fn face_crop_stays_in_frame(mask in gray(16, 12), margin in 0.0f64..1.5) {
        let face = FaceChannel::new(mask.clone()).unwrap();
        let o = Array3::zeros((3, 12, 16));
        match crop_face(&o, &face, margin, 8) {
            Err(_) => prop_assert!(face.is_empty()),
            Ok(c) => {
                prop_assert!(c.bbox.fits(16, 12));
                prop_assert_eq!(c.pixels.dim(), (3, 8, 8));
                for (x, y, v) in mask.enumerate_pixels() {
                    if v.0[0] != 0 {
                        prop_assert!(c.bbox.contains(x, y));
                    }
                }
            }
        }
    }

    #[test]
    fn iou_range_and_symmetry(a in dense(6, 5, 6), b in dense(6, 5, 6)) {
        let ab = binary_iou(&a, &b).unwrap();
        prop_assert!(ab == -1.0 || (0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, binary_iou(&b, &a).unwrap());
        for k in 1..=6 {
            let v = index_iou(&a, &b, k).unwrap();
            prop_assert!(v == -1.0 || (0.0..=1.0).contains(&v));
            prop_assert_eq!(v, index_iou(&b, &a, k).unwrap());
        }
        let d = dpis(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn dpis_ignores_index_relabelling(a in dense(6, 5, 8), b in dense(6, 5, 8), perm in Just((1u8..=24).collect::<Vec<_>>()).prop_shuffle()) {
        let relabel = |m: &DenseIndexMap| {
            let mut g = m.pixels().clone();
            for p in g.pixels_mut() {
                if p.0[0] != 0 {
                    p.0[0] = perm[p.0[0] as usize - 1];
                }
            }
            DenseIndexMap::new(g).unwrap()
        };
        let before = dpis(&a, &b).unwrap();
        let after = dpis(&relabel(&a), &relabel(&b)).unwrap();
        prop_assert!((before - after).abs() <= 1e-12, "{} vs {}", before, after);
    }

    #[test]
    fn ssim_bounds(a in proptest::collection::vec(0.0f64..255.0, 3 * 12 * 12), b in proptest::collection::vec(0.0f64..255.0, 3 * 12 * 12)) {
        let a = Array3::from_shape_vec((3, 12, 12), a).unwrap();
        let b = Array3::from_shape_vec((3, 12, 12), b).unwrap();
        let v = ssim(&a, &b, SsimConfig::default()).unwrap();
        prop_assert!((-1.0..=1.0).contains(&v));
        prop_assert!((ssim(&a, &a, SsimConfig::default()).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sampled_box_in_frame(x0 in 0u32..40, y0 in 0u32..30, bw in 1u32..40, bh in 1u32..30, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let (fw, fh) = (48u32, 36u32);
        let mut reference = GrayImage::new(fw, fh);
        let b = BBox::new(x0, y0, (x0 + bw - 1).min(fw - 1), (y0 + bh - 1).min(fh - 1));
        for y in b.y_min..=b.y_max {
            for x in b.x_min..=b.x_max {
                reference.put_pixel(x, y, Luma([255]));
            }
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut unit = || rng.random::<f64>();
        let out = sample_inference_bbox(&reference, &mut unit).unwrap();
        prop_assert!(out.fits(fw, fh));
        prop_assert!(out.height() as f64 <= (b.height() as f64 * 1.1).ceil() + 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn identical_directories_score_one(maps in proptest::collection::vec(dense(8, 6, 5), 1..4)) {
        let dir = tempfile::tempdir().unwrap();
        let (gt, gen) = (dir.path().join("gt"), dir.path().join("gen"));
        for d in [&gt, &gen] {
            std::fs::create_dir_all(d).unwrap();
        }
        let maps: Vec<_> = maps.into_iter().filter(|m| m.pixels().iter().any(|&v| v != 0)).collect();
        prop_assume!(!maps.is_empty());
        for (i, m) in maps.iter().enumerate() {
            for d in [&gt, &gen] {
                m.pixels().save(Path::new(d).join(format!("{i:03}.png"))).unwrap();
            }
        }
        for mode in [DpisMode::PresentIndices, DpisMode::AllSlots] {
            let r = evaluate_directory(&gt, &gen, Pairing::ByName, mode).unwrap();
            prop_assert_eq!(r.dpbs.mean, Some(1.0));
            prop_assert_eq!(r.dpbs.sd, Some(0.0));
            if mode == DpisMode::PresentIndices {
                prop_assert_eq!(r.dpis.mean, Some(1.0));
                prop_assert_eq!(r.dpis.sd, Some(0.0));
            }
        }
    }
}

fn one_sample() -> (incontext::pipeline::DatasetIndex, incontext::pipeline::LoadedSample, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &[synthetic::random_scene(48, 48, 2, 21)]).unwrap();
    let index = ingest(dir.path()).unwrap();
    let loaded = index.load(0).unwrap();
    (index, loaded, dir)
}

#[test]
fn render_mask_and_image_ranges() {
    let (index, loaded, _dir) = one_sample();
    let model = McrnModel::new(
        McrnConfig {
            resolution: 32,
            decoder_stages: 3,
            ..McrnConfig::desk()
        },
        PerceptualExtractor::unavailable(),
    )
    .unwrap();
    for r in &index.mcrn_samples {
        let s = mcrn_example(&loaded, *r, 32).unwrap();
        let (z, m) = render(&model, &s.t, &s.p).unwrap();
        assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(z.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(render(&model, &s.t, &s.p).unwrap(), (z, m));
    }
}

#[test]
fn egn_outputs_valid_poses_and_steps_are_reproducible() {
    let (index, loaded, _dir) = one_sample();
    let cfg = EgnConfig {
        resolution: 32,
        ..EgnConfig::desk(EgnVariant::WithBbox)
    };
    let item = egn_example(&loaded, index.egn_samples[0], EgnVariant::WithBbox, 32).unwrap();
    let run = || {
        let mut m = EgnModel::new(cfg.clone()).unwrap();
        let reports: Vec<_> = (0..2).map(|_| egn_training_step(&mut m, std::slice::from_ref(&item)).unwrap()).collect();
        (reports, generate_pose(&m, &item.0).unwrap())
    };
    let (a, pose) = run();
    let (b, _) = run();
    assert_eq!(a, b);
    assert!(a.iter().all(|r| r.fm_perceptual == 0.0));
    assert!(pose.semantic.pixels().iter().all(|v| CODES.contains(v)));
    assert!(pose.face.pixels().iter().all(|&v| v == 0 || v == 255));
    assert_eq!(pose.dimensions(), (32, 32));
}
