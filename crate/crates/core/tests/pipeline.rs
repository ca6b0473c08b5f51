use std::path::Path;

use image::GrayImage;
use incontext::egn::EgnVariant;
use incontext::nn::AdamConfig;
use incontext::pipeline::dataset::SplitDoc;
use incontext::pipeline::train::{latest_checkpoint, read_log};
use incontext::pipeline::{
    ingest, insert_person, sample_inference_bbox, train, write_dataset, InsertionRequest, Models, Network, Preset,
    RunConfig,
};
use incontext::raster::{self, BBox};
use incontext::semantic::SceneParse;
use incontext::synthetic::{self, SyntheticScene};
use incontext::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn boxes(n: u32) -> Vec<BBox> {
    let slot = 64 / n;
    (0..n).map(|i| BBox::new(i * slot + 1, 18, i * slot + slot - 3, 61)).collect()
}

/// 5 images, 11 persons, 9 of them with faces; the last image has none.
fn fixture_scenes() -> Vec<SyntheticScene> {
    let faces: [&[bool]; 5] = [&[true, true, true], &[true, true], &[true, true], &[true, true], &[false, false]];
    faces
        .iter()
        .enumerate()
        .map(|(i, f)| synthetic::scene(64, 64, &boxes(f.len() as u32), f, i as u64))
        .collect()
}

fn fixture(dir: &Path) {
    write_dataset(dir, &fixture_scenes()).unwrap();
}

#[test]
fn ingest_counts_persons_and_faces() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let index = ingest(dir.path()).unwrap();
    assert_eq!(index.samples.len(), 5);
    assert_eq!(index.person_count(), 11);
    assert_eq!(index.egn_samples.len(), 9);
    assert_eq!(index.mcrn_samples.len(), 11);
    assert!(index.egn_samples.iter().all(|&(i, _)| i != 4));
    assert!(index.rejected.is_empty());
    assert_eq!(ingest(dir.path()).unwrap().hash(), index.hash());
}

#[test]
fn ingest_counts_rejects_without_failing() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    std::fs::write(dir.path().join("keypoints/scene_0002.json"), "not json").unwrap();
    GrayImage::new(8, 8).save(dir.path().join("images/orphan.png")).unwrap();
    let index = ingest(dir.path()).unwrap();
    assert_eq!(index.samples.len(), 4);
    assert_eq!(index.rejected.len(), 2);
}

#[test]
fn ingest_layout_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(ingest(dir.path()), Err(Error::MalformedLayout(_))));
    write_dataset(dir.path(), &[]).unwrap();
    assert!(matches!(ingest(dir.path()), Err(Error::EmptyDataset(_))));

    fixture(dir.path());
    let split = SplitDoc {
        train: vec!["scene_0000".into()],
        test: vec!["scene_0001".into()],
        identities: [
            ("scene_0000".to_string(), vec!["ann".to_string()]),
            ("scene_0001".to_string(), vec!["ann".to_string()]),
        ]
        .into(),
    };
    std::fs::write(dir.path().join("split.json"), serde_json::to_string(&split).unwrap()).unwrap();
    assert!(matches!(ingest(dir.path()), Err(Error::MalformedLayout(_))));
}

#[test]
fn held_out_construction_partitions_the_scene() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let index = ingest(dir.path()).unwrap();
    for &(i, k) in &index.egn_samples {
        let s = index.load(i).unwrap();
        let (w, h) = s.scene.dimensions();
        let rest: Vec<_> = s.scene.persons.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, p)| p.clone()).collect();
        let rest = SceneParse::compose(w, h, rest).unwrap();
        let target = s.scene.persons[k].mask();
        for ((o, r), t) in s.scene.semantic.pixels().iter().zip(rest.semantic.pixels().iter()).zip(target.iter()) {
            assert_eq!(*o != 0, *r != 0 || *t != 0);
        }
        assert_eq!(rest.persons.len() + 1, s.scene.persons.len());
    }
}

#[test]
fn bbox_sampler_statistics() {
    let (fw, fh) = (200u32, 120u32);
    let mut g = GrayImage::new(fw, fh);
    let reference = BBox::new(50, 30, 51, 89);
    raster::fill_rect(&mut g, reference, 255);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut bins = [0usize; 10];
    let n = 10_000;
    for _ in 0..n {
        let b = sample_inference_bbox(&g, &mut || rng.random::<f64>()).unwrap();
        assert!(b.fits(fw, fh));
        let scale = b.height() as f64 / reference.height() as f64;
        assert!((0.9 - 2.0 / 60.0..=1.1 + 2.0 / 60.0).contains(&scale), "{scale}");
        let cx = (b.x_min + b.x_max + 1) as f64 / 2.0;
        bins[((cx / fw as f64 * 10.0) as usize).min(9)] += 1;
    }
    let expected = n as f64 / 10.0;
    let chi2: f64 = bins.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 9 degrees of freedom, p = 0.001
    assert!(chi2 < 27.88, "chi2 {chi2}, bins {bins:?}");
}

fn tiny(network: Network) -> RunConfig {
    RunConfig {
        resolution: Some(32),
        checkpoint_every: 2,
        epochs: 1000,
        max_steps: Some(4),
        face_dim: 8,
        ..RunConfig::preset(network, Preset::Desk)
    }
}

#[test]
fn training_resumes_where_it_stopped() {
    let data = tempfile::tempdir().unwrap();
    write_dataset(data.path(), &[synthetic::random_scene(48, 48, 2, 3)]).unwrap();
    let index = ingest(data.path()).unwrap();

    let a = tempfile::tempdir().unwrap();
    let first = train(Network::Mcrn, &index, &tiny(Network::Mcrn), a.path()).unwrap();
    assert_eq!(first.last_step, 4);
    assert_eq!(latest_checkpoint(a.path(), Network::Mcrn).unwrap().unwrap().0, 4);
    assert!(a.path().join("mcrn-00000002.ckpt").is_file());
    let resumed = train(
        Network::Mcrn,
        &index,
        &RunConfig {
            max_steps: Some(6),
            ..tiny(Network::Mcrn)
        },
        a.path(),
    )
    .unwrap();
    assert_eq!(resumed.resumed_from, Some(4));
    let log = read_log(&resumed.log).unwrap();
    assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6]);

    let b = tempfile::tempdir().unwrap();
    let straight = train(
        Network::Mcrn,
        &index,
        &RunConfig {
            max_steps: Some(6),
            ..tiny(Network::Mcrn)
        },
        b.path(),
    )
    .unwrap();
    let log_b = read_log(&straight.log).unwrap();
    for (x, y) in log.iter().zip(&log_b) {
        assert_eq!(x.losses, y.losses, "step {}", x.step);
        assert_eq!(x.seed, y.seed);
    }
}

#[test]
fn pose_and_face_networks_train() {
    let data = tempfile::tempdir().unwrap();
    write_dataset(data.path(), &[synthetic::random_scene(48, 48, 2, 5)]).unwrap();
    let index = ingest(data.path()).unwrap();
    for net in [Network::Egn, Network::EgnPrime, Network::Frn] {
        let out = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            max_steps: Some(2),
            ..tiny(net)
        };
        let o = train(net, &index, &cfg, out.path()).unwrap();
        let log = read_log(&o.log).unwrap();
        assert_eq!(log.len(), 2, "{}", net.name());
        assert!(log.iter().all(|r| r.losses.values().all(|v| v.is_finite())));
        assert!(out.path().join(format!("{}.ckpt", net.name())).is_file());
    }
}

#[test]
fn non_finite_loss_saves_and_aborts() {
    let data = tempfile::tempdir().unwrap();
    write_dataset(data.path(), &[synthetic::random_scene(48, 48, 1, 6)]).unwrap();
    let index = ingest(data.path()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        adam: AdamConfig {
            lr: f64::NAN,
            ..AdamConfig::default()
        },
        ..tiny(Network::Mcrn)
    };
    let err = train(Network::Mcrn, &index, &cfg, out.path()).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let saved: Vec<_> = std::fs::read_dir(out.path())
        .unwrap()
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.starts_with("mcrn-nonfinite-"))
        .collect();
    assert_eq!(saved.len(), 1);
}

fn request(seed: u64, skip_frn: bool) -> InsertionRequest {
    let scene = synthetic::random_scene(64, 64, 2, 21);
    let target = synthetic::random_scene(48, 64, 1, 22);
    InsertionRequest {
        scene_image: scene.image.clone(),
        scene: scene.parse(),
        target_image: target.image.clone(),
        target_parse: target.persons[0].semantic.clone(),
        target_keypoints: target.persons[0].face_keypoints.clone(),
        bbox: Some(BBox::new(20, 10, 40, 60)),
        variant: EgnVariant::WithBbox,
        skip_frn,
        seed,
    }
}

#[test]
fn insertion_is_deterministic_and_skip_keeps_composite() {
    let models = Models::untrained(Preset::Desk, 3).unwrap();
    let req = request(9, false);
    let before = req.scene_image.clone();
    let a = insert_person(&models, &req).unwrap();
    let b = insert_person(&models, &req).unwrap();
    assert_eq!(a.w_image.as_raw(), b.w_image.as_raw());
    assert_eq!(a.o, b.o);
    assert_eq!(a.p.dimensions(), (64, 64));
    assert!(a.frn_applied);
    assert_eq!(req.scene_image, before);

    let r = insert_person(&models, &request(9, true)).unwrap();
    assert_eq!(r.w, r.o);
    assert_eq!(r.o, a.o);
    assert!(!r.frn_applied);
}

#[test]
fn insertion_rejects_bad_requests() {
    let models = Models::untrained(Preset::Desk, 3).unwrap();
    let mut req = request(1, true);
    req.bbox = Some(BBox::new(20, 10, 80, 60));
    assert!(matches!(insert_person(&models, &req), Err(Error::BoxOutOfFrame(..))));
    let mut req = request(1, true);
    req.variant = EgnVariant::WithoutBbox;
    assert!(matches!(insert_person(&models, &req), Err(Error::Config(_))));
}

#[test]
fn trained_checkpoints_load_for_inference() {
    let data = tempfile::tempdir().unwrap();
    write_dataset(data.path(), &[synthetic::random_scene(48, 48, 2, 8)]).unwrap();
    let index = ingest(data.path()).unwrap();
    let out = tempfile::tempdir().unwrap();
    for net in [Network::Egn, Network::Mcrn, Network::Frn] {
        let cfg = RunConfig {
            max_steps: Some(1),
            ..tiny(net)
        };
        train(net, &index, &cfg, out.path()).unwrap();
    }
    let models = Models::load(out.path(), index.palette.clone(), None).unwrap();
    assert!(models.egn.is_some() && models.egn_prime.is_none() && models.frn.is_some());
    assert_eq!(models.mcrn.resolution(), 32);
    assert!(Models::load(data.path(), index.palette.clone(), None).is_err());
}
