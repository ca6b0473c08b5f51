//! Procedural scenes of stylized people, used by tests, benchmarks and the
//! demo dataset.

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::raster::{fill_rect, BBox};
use crate::semantic::io::{KeypointDocument, PersonKeypoints};
use crate::semantic::{group, Keypoints, PersonParse, SceneParse, SemanticMap, CODES};

/// Raw parser ids used when painting raw parses, one per group, valid under
/// the default palette table.
pub const RAW_IDS: [u8; 8] = [0, 2, 3, 14, 4, 6, 12, 9];

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub image: RgbImage,
    pub persons: Vec<PersonParse>,
    /// Per-person raw parser label images.
    pub raw_parses: Vec<GrayImage>,
    pub keypoints: KeypointDocument,
}

impl SyntheticScene {
    pub fn parse(&self) -> SceneParse {
        let (w, h) = self.image.dimensions();
        SceneParse::compose(w, h, self.persons.clone()).expect("consistent sizes")
    }
}

fn frac_rect(b: BBox, x0: f64, y0: f64, x1: f64, y1: f64) -> Option<BBox> {
    let (w, h) = (b.width() as f64, b.height() as f64);
    let xa = b.x_min + (x0 * w).floor() as u32;
    let ya = b.y_min + (y0 * h).floor() as u32;
    let xb = (b.x_min + (x1 * w).ceil() as u32).saturating_sub(1).min(b.x_max);
    let yb = (b.y_min + (y1 * h).ceil() as u32).saturating_sub(1).min(b.y_max);
    (xa <= xb && ya <= yb).then(|| BBox::new(xa, ya, xb, yb))
}

/// Group layout of a standing figure inside its box, painted in order.
const LAYOUT: [(u8, [f64; 4]); 11] = [
    (group::HAIR, [0.30, 0.00, 0.70, 0.08]),
    (group::FACE, [0.33, 0.06, 0.67, 0.17]),
    (group::TORSO, [0.45, 0.17, 0.55, 0.20]),
    (group::UPPER_WEAR, [0.22, 0.19, 0.78, 0.50]),
    (group::TORSO, [0.06, 0.20, 0.22, 0.48]),
    (group::TORSO, [0.78, 0.20, 0.94, 0.48]),
    (group::LOWER_WEAR, [0.25, 0.50, 0.75, 0.75]),
    (group::LOWER_LIMBS, [0.28, 0.75, 0.46, 0.92]),
    (group::LOWER_LIMBS, [0.54, 0.75, 0.72, 0.92]),
    (group::SHOES, [0.25, 0.92, 0.47, 1.00]),
    (group::SHOES, [0.53, 0.92, 0.75, 1.00]),
];

/// Paints one person into `labels` (group indices) and returns its face
/// keypoints.
pub fn paint_person(labels: &mut GrayImage, b: BBox) -> Keypoints {
    for (g, [x0, y0, x1, y1]) in LAYOUT {
        if let Some(r) = frac_rect(b, x0, y0, x1, y1) {
            fill_rect(labels, r, g);
        }
    }
    let face = frac_rect(b, 0.33, 0.06, 0.67, 0.17).unwrap_or(b);
    let (cx, cy) = (
        (face.x_min + face.x_max) as f32 / 2.0,
        (face.y_min + face.y_max) as f32 / 2.0,
    );
    vec![
        [face.x_min as f32 + 1.0, face.y_min as f32 + 1.0],
        [face.x_max as f32 - 1.0, face.y_min as f32 + 1.0],
        [face.x_max as f32 - 1.0, face.y_max as f32 - 1.0],
        [face.x_min as f32 + 1.0, face.y_max as f32 - 1.0],
        [cx, cy],
    ]
}

fn part_colors(rng: &mut ChaCha8Rng) -> [[u8; 3]; 8] {
    let mut out = [[0u8; 3]; 8];
    for c in out.iter_mut().skip(1) {
        *c = [rng.random_range(20..236), rng.random_range(20..236), rng.random_range(20..236)];
    }
    out[group::FACE as usize] = [224, 172, 140];
    out[group::TORSO as usize] = [214, 160, 130];
    out[group::LOWER_LIMBS as usize] = [210, 158, 128];
    out
}

/// `boxes` are person boxes painted back to front; `faces[i]` controls
/// whether person `i` gets facial keypoints.
pub fn scene(width: u32, height: u32, boxes: &[BBox], faces: &[bool], seed: u64) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tint: [u8; 3] = [rng.random_range(40..120), rng.random_range(60..140), rng.random_range(80..160)];
    let mut image = RgbImage::from_fn(width, height, |x, y| {
        image::Rgb([
            tint[0].saturating_add((x * 60 / width.max(1)) as u8),
            tint[1].saturating_add((y * 60 / height.max(1)) as u8),
            tint[2],
        ])
    });
    let mut persons = Vec::with_capacity(boxes.len());
    let mut raw_parses = Vec::with_capacity(boxes.len());
    let mut keypoints = KeypointDocument { persons: Vec::new() };
    for (i, &b) in boxes.iter().enumerate() {
        let colors = part_colors(&mut rng);
        let mut labels = GrayImage::new(width, height);
        let kp = paint_person(&mut labels, b);
        let codes = GrayImage::from_fn(width, height, |x, y| image::Luma([CODES[labels.get_pixel(x, y).0[0] as usize]]));
        let raw = GrayImage::from_fn(width, height, |x, y| image::Luma([RAW_IDS[labels.get_pixel(x, y).0[0] as usize]]));
        for (x, y, g) in labels.enumerate_pixels() {
            if g.0[0] != 0 {
                image.put_pixel(x, y, image::Rgb(colors[g.0[0] as usize]));
            }
        }
        let has_face = faces.get(i).copied().unwrap_or(true);
        keypoints.persons.push(PersonKeypoints {
            face_keypoints: if has_face { kp.clone() } else { Vec::new() },
        });
        persons.push(PersonParse::new(
            SemanticMap::new(codes).expect("palette codes"),
            has_face.then_some(kp),
        ));
        raw_parses.push(raw);
    }
    SyntheticScene {
        image,
        persons,
        raw_parses,
        keypoints,
    }
}

/// A scene with `count` non-overlapping people of similar height.
pub fn random_scene(width: u32, height: u32, count: usize, seed: u64) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let slot = width / count.max(1) as u32;
    let boxes: Vec<BBox> = (0..count as u32)
        .map(|i| {
            let h = (height as f64 * rng.random_range(0.6..0.85)) as u32;
            let w = ((h as f64 * 0.4) as u32).min(slot.saturating_sub(2)).max(4);
            let x = i * slot + rng.random_range(0..=slot.saturating_sub(w + 1).max(0));
            let y = height - h - rng.random_range(0..=(height - h) / 4);
            BBox::new(x, y, x + w - 1, y + h - 1)
        })
        .collect();
    scene(width, height, &boxes, &vec![true; count], seed)
}
