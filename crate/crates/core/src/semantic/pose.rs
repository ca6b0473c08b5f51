use image::GrayImage;
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::raster;
use crate::semantic::{group, FaceChannel, SemanticMap, CODES};

/// Two-channel pose map of a single person.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersonPose {
    pub semantic: SemanticMap,
    pub face: FaceChannel,
}

impl PersonPose {
    pub fn new(semantic: SemanticMap, face: FaceChannel) -> Result<Self> {
        if semantic.dimensions() != face.pixels().dimensions() {
            return Err(Error::shape(format!(
                "semantic {:?} vs face {:?}",
                semantic.dimensions(),
                face.pixels().dimensions()
            )));
        }
        Ok(Self { semantic, face })
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.semantic.dimensions()
    }

    pub fn resize(&self, width: u32, height: u32) -> Self {
        Self {
            semantic: self.semantic.resize(width, height),
            face: self.face.resize(width, height),
        }
    }

    /// Whether the face support lies within the face-labelled region grown
    /// by `dilation` pixels.
    pub fn face_within_face_region(&self, dilation: u32) -> bool {
        let region = raster::dilate(&self.semantic.group_mask(group::FACE), dilation);
        self.face
            .pixels()
            .as_raw()
            .iter()
            .zip(region.as_raw())
            .all(|(&f, &r)| f == 0 || r != 0)
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.pixels().as_raw().iter().all(|&v| v == 0)
    }
}

/// Nonzero support of the semantic channel (p^b), values {0,1}.
pub fn binarize_pose(p: &PersonPose) -> GrayImage {
    let s = p.semantic.pixels();
    GrayImage::from_fn(s.width(), s.height(), |x, y| {
        image::Luma([(s.get_pixel(x, y).0[0] != 0) as u8])
    })
}

/// Maps an 8-bit value onto the [-1, 1] tensor range.
pub fn code_to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn unit_to_code(v: f32) -> f64 {
    (v as f64 + 1.0) * 127.5
}

/// Nearest palette code to a continuous 0..255 value. Ties (within 1e-4 of a
/// code unit, which absorbs float round-off from the range mapping) go to the
/// lower code.
pub fn nearest_code(value: f64) -> u8 {
    const TIE: f64 = 1e-4;
    let mut best = CODES[0];
    let mut best_d = (value - best as f64).abs();
    for &c in &CODES[1..] {
        let d = (value - c as f64).abs();
        if d < best_d - TIE {
            best = c;
            best_d = d;
        }
    }
    best
}

/// Pose as a 2xHxW tensor in [-1, 1].
pub fn encode_pose(p: &PersonPose) -> Array3<f32> {
    let (w, h) = p.dimensions();
    let mut out = Array3::<f32>::zeros((2, h as usize, w as usize));
    for (x, y, v) in p.semantic.pixels().enumerate_pixels() {
        out[[0, y as usize, x as usize]] = code_to_unit(v.0[0]);
    }
    for (x, y, v) in p.face.pixels().enumerate_pixels() {
        out[[1, y as usize, x as usize]] = code_to_unit(v.0[0]);
    }
    out
}

/// Snaps raw generator output (2xHxW in [-1, 1]) onto a valid pose: channel 0
/// to the nearest palette code, channel 1 thresholded at 0.
pub fn discretize_pose(raw: &Array3<f32>) -> Result<PersonPose> {
    let (c, h, w) = raw.dim();
    if c != 2 {
        return Err(Error::ChannelMismatch { expected: 2, actual: c });
    }
    let semantic = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([nearest_code(unit_to_code(raw[[0, y as usize, x as usize]]))])
    });
    let face = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if raw[[1, y as usize, x as usize]] > 0.0 { 255 } else { 0 }])
    });
    Ok(PersonPose {
        semantic: SemanticMap::from_codes_unchecked(semantic),
        face: FaceChannel::new(face)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn raw_from(ch0: &[f32], ch1: &[f32], w: usize) -> Array3<f32> {
        let h = ch0.len() / w;
        let mut a = Array3::zeros((2, h, w));
        for i in 0..ch0.len() {
            a[[0, i / w, i % w]] = ch0[i];
            a[[1, i / w, i % w]] = ch1[i];
        }
        a
    }

    #[test]
    fn exact_code_snaps_to_itself() {
        let p = discretize_pose(&raw_from(&[code_to_unit(72)], &[-1.0], 1)).unwrap();
        assert_eq!(p.semantic.pixels().get_pixel(0, 0).0[0], 72);
    }

    #[test]
    fn tie_goes_low() {
        let v = code_to_unit(54);
        let p = discretize_pose(&raw_from(&[v], &[-1.0], 1)).unwrap();
        assert_eq!(p.semantic.pixels().get_pixel(0, 0).0[0], 36);
        assert_eq!(nearest_code(54.0), 36);
        assert_eq!(nearest_code(54.01), 72);
    }

    #[test]
    fn random_raw_matches_exhaustive_nearest() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 400;
        let ch0: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
        let ch1: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
        let p = discretize_pose(&raw_from(&ch0, &ch1, 20)).unwrap();
        for (i, &v) in ch0.iter().enumerate() {
            let value = (v as f64 + 1.0) * 127.5;
            let dists: Vec<f64> = CODES.iter().map(|&c| (value - c as f64).abs()).collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let got = p.semantic.pixels().get_pixel((i % 20) as u32, (i / 20) as u32).0[0];
            assert!(CODES.contains(&got));
            assert!((dists[(got / 36) as usize] - min).abs() < 1e-3);
            let f = p.face.pixels().get_pixel((i % 20) as u32, (i / 20) as u32).0[0];
            assert_eq!(f, if ch1[i] > 0.0 { 255 } else { 0 });
        }
    }

    #[test]
    fn binarize_support() {
        let s = GrayImage::from_raw(3, 1, vec![0, 36, 252]).unwrap();
        let p = PersonPose::new(SemanticMap::new(s).unwrap(), FaceChannel::empty(3, 1)).unwrap();
        assert_eq!(binarize_pose(&p).as_raw(), &vec![0, 1, 1]);
    }

    #[test]
    fn face_containment() {
        let mut s = GrayImage::new(8, 8);
        s.put_pixel(3, 3, image::Luma([72]));
        let mut f = GrayImage::new(8, 8);
        f.put_pixel(4, 4, image::Luma([255]));
        let p = PersonPose::new(SemanticMap::new(s).unwrap(), FaceChannel::new(f).unwrap()).unwrap();
        assert!(!p.face_within_face_region(0));
        assert!(p.face_within_face_region(1));
    }

    fn arb_pose() -> impl Strategy<Value = PersonPose> {
        (1u32..12, 1u32..12).prop_flat_map(|(w, h)| {
            let n = (w * h) as usize;
            (
                proptest::collection::vec(0usize..8, n),
                proptest::collection::vec(any::<bool>(), n),
            )
                .prop_map(move |(g, f)| {
                    let s = GrayImage::from_raw(w, h, g.iter().map(|&k| CODES[k]).collect()).unwrap();
                    let f = GrayImage::from_raw(w, h, f.iter().map(|&b| if b { 255 } else { 0 }).collect()).unwrap();
                    PersonPose::new(SemanticMap::new(s).unwrap(), FaceChannel::new(f).unwrap()).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn encode_discretize_round_trip(p in arb_pose()) {
            prop_assert_eq!(discretize_pose(&encode_pose(&p)).unwrap(), p);
        }

        #[test]
        fn binarization_ignores_which_code(p in arb_pose()) {
            let b = binarize_pose(&p);
            for (bv, sv) in b.as_raw().iter().zip(p.semantic.pixels().as_raw()) {
                prop_assert_eq!(*bv, (*sv != 0) as u8);
            }
        }
    }
}
