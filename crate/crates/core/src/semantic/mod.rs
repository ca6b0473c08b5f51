//! Semantic maps, binary face/box channels, scene parses and appearance
//! tensors. Every other module consumes these types.

mod appearance;
pub mod io;
mod palette;
mod pose;

use image::GrayImage;

pub use appearance::{
    build_appearance_tensor, masked_part_crop, part_masks_from_semantic, AppearanceTensor, Part,
    PartMasks, APPEARANCE_SIZE, PART_COUNT,
};
pub use palette::{group, group_of_code, is_code, reduce_labels, LabelPalette, CODES, GROUP_COUNT, GROUP_NAMES};
pub use pose::{binarize_pose, code_to_unit, discretize_pose, encode_pose, nearest_code, unit_to_code, PersonPose};

use crate::error::{Error, Result};
use crate::raster::{self, BBox};

/// Single-channel map whose pixels are palette codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMap(GrayImage);

impl SemanticMap {
    pub fn new(pixels: GrayImage) -> Result<Self> {
        if let Some((x, y, p)) = pixels.enumerate_pixels().find(|(_, _, p)| !is_code(p.0[0])) {
            return Err(Error::NotAPaletteCode { x, y, value: p.0[0] });
        }
        Ok(Self(pixels))
    }

    pub(crate) fn from_codes_unchecked(pixels: GrayImage) -> Self {
        Self(pixels)
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self(GrayImage::new(width, height))
    }

    pub fn pixels(&self) -> &GrayImage {
        &self.0
    }

    pub fn into_inner(self) -> GrayImage {
        self.0
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.0.dimensions()
    }

    pub fn resize(&self, width: u32, height: u32) -> Self {
        Self(raster::resize_nearest(&self.0, width, height))
    }

    /// Support of one label group as a {0,255} mask.
    pub fn group_mask(&self, group: u8) -> GrayImage {
        let code = CODES[group as usize];
        GrayImage::from_fn(self.0.width(), self.0.height(), |x, y| {
            image::Luma([if self.0.get_pixel(x, y).0[0] == code { 255 } else { 0 }])
        })
    }
}

fn check_binary(pixels: &GrayImage) -> Result<()> {
    match pixels.enumerate_pixels().find(|(_, _, p)| p.0[0] != 0 && p.0[0] != 255) {
        Some((x, y, p)) => Err(Error::NotBinary { x, y, value: p.0[0] }),
        None => Ok(()),
    }
}

/// Filled convex hulls of facial keypoints, values in {0,255}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaceChannel {
    pixels: GrayImage,
    /// Keypoint sets that were skipped for having fewer than three
    /// non-collinear points.
    pub skipped: usize,
}

impl FaceChannel {
    pub fn new(pixels: GrayImage) -> Result<Self> {
        check_binary(&pixels)?;
        Ok(Self { pixels, skipped: 0 })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            pixels: GrayImage::new(width, height),
            skipped: 0,
        }
    }

    pub fn pixels(&self) -> &GrayImage {
        &self.pixels
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.as_raw().iter().all(|&v| v == 0)
    }

    pub fn resize(&self, width: u32, height: u32) -> Self {
        Self {
            pixels: raster::resize_nearest(&self.pixels, width, height),
            skipped: self.skipped,
        }
    }

    /// Pixelwise union with another channel of the same size.
    pub fn union(&self, other: &FaceChannel) -> FaceChannel {
        let pixels = GrayImage::from_fn(self.pixels.width(), self.pixels.height(), |x, y| {
            image::Luma([self.pixels.get_pixel(x, y).0[0].max(other.pixels.get_pixel(x, y).0[0])])
        });
        FaceChannel {
            pixels,
            skipped: self.skipped + other.skipped,
        }
    }
}

pub type Keypoints = Vec<[f32; 2]>;

/// Rasterizes one filled convex hull per keypoint set.
pub fn face_hull_channel(keypoint_sets: &[Keypoints], width: u32, height: u32) -> FaceChannel {
    let mut pixels = GrayImage::new(width, height);
    let mut skipped = 0;
    for set in keypoint_sets {
        let pts: Vec<(f64, f64)> = set
            .iter()
            .map(|p| {
                (
                    (p[0] as f64).clamp(0.0, (width - 1) as f64),
                    (p[1] as f64).clamp(0.0, (height - 1) as f64),
                )
            })
            .collect();
        let hull = raster::convex_hull(&pts);
        if hull.len() < 3 {
            skipped += 1;
            log::warn!("skipping face keypoint set with {} usable points", hull.len());
            continue;
        }
        raster::fill_convex_polygon(&mut pixels, &hull, 255);
    }
    FaceChannel { pixels, skipped }
}

/// Binary rectangle channel with its box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BBoxChannel {
    pixels: GrayImage,
    pub bbox: BBox,
}

impl BBoxChannel {
    pub fn from_box(bbox: BBox, width: u32, height: u32) -> Result<Self> {
        if !bbox.fits(width, height) {
            return Err(Error::BoxOutOfFrame(bbox.as_array(), width, height));
        }
        let mut pixels = GrayImage::new(width, height);
        raster::fill_rect(&mut pixels, bbox, 255);
        Ok(Self { pixels, bbox })
    }

    pub fn pixels(&self) -> &GrayImage {
        &self.pixels
    }

    /// Nearest-neighbour resize. A box too thin to survive sampling collapses
    /// onto the pixel containing its center.
    pub fn resize(&self, width: u32, height: u32) -> Self {
        let pixels = raster::resize_nearest(&self.pixels, width, height);
        match raster::tight_bbox(&pixels) {
            Some(bbox) => Self { pixels, bbox },
            None => {
                let (sw, sh) = self.pixels.dimensions();
                let b = self.bbox;
                let cx = ((b.x_min + b.x_max) as f64 / 2.0 + 0.5) * width as f64 / sw as f64;
                let cy = ((b.y_min + b.y_max) as f64 / 2.0 + 0.5) * height as f64 / sh as f64;
                let x = (cx as u32).min(width - 1);
                let y = (cy as u32).min(height - 1);
                Self::from_box(BBox::new(x, y, x, y), width, height).expect("inside frame")
            }
        }
    }
}

pub fn bbox_from_labels(person_mask: &GrayImage) -> Result<BBoxChannel> {
    let bbox = raster::tight_bbox(person_mask).ok_or(Error::EmptyPerson)?;
    BBoxChannel::from_box(bbox, person_mask.width(), person_mask.height())
}

/// One person inside a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonParse {
    pub semantic: SemanticMap,
    pub face_keypoints: Option<Keypoints>,
}

impl PersonParse {
    pub fn new(semantic: SemanticMap, face_keypoints: Option<Keypoints>) -> Self {
        Self {
            semantic,
            face_keypoints,
        }
    }

    pub fn map(&self) -> &SemanticMap {
        &self.semantic
    }

    pub fn mask(&self) -> GrayImage {
        let m = self.map().pixels();
        GrayImage::from_fn(m.width(), m.height(), |x, y| {
            image::Luma([if m.get_pixel(x, y).0[0] != 0 { 255 } else { 0 }])
        })
    }

    pub fn has_face(&self) -> bool {
        self.face_keypoints.as_ref().is_some_and(|k| k.len() >= 3)
    }
}

/// Multi-person scene encoding: shared semantic and face channels, an
/// optional box channel, and the per-person parses they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParse {
    pub semantic: SemanticMap,
    pub face: FaceChannel,
    pub bbox: Option<BBoxChannel>,
    pub persons: Vec<PersonParse>,
}

impl SceneParse {
    /// Paints persons in order (later persons over earlier ones) and
    /// rasterizes all detected faces into the shared face channel.
    pub fn compose(width: u32, height: u32, persons: Vec<PersonParse>) -> Result<Self> {
        Self::compose_excluding(width, height, persons, None)
    }

    pub(crate) fn compose_excluding(
        width: u32,
        height: u32,
        persons: Vec<PersonParse>,
        excluded: Option<usize>,
    ) -> Result<Self> {
        let mut semantic = GrayImage::new(width, height);
        let mut faces = Vec::new();
        for (i, p) in persons.iter().enumerate() {
            if p.map().dimensions() != (width, height) {
                return Err(Error::shape(format!(
                    "person {i} is {:?}, scene is {width}x{height}",
                    p.map().dimensions()
                )));
            }
            if Some(i) == excluded {
                continue;
            }
            for (o, &v) in semantic.iter_mut().zip(p.map().pixels().as_raw()) {
                if v != 0 {
                    *o = v;
                }
            }
            if let Some(k) = &p.face_keypoints {
                faces.push(k.clone());
            }
        }
        Ok(Self {
            semantic: SemanticMap(semantic),
            face: face_hull_channel(&faces, width, height),
            bbox: None,
            persons,
        })
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.semantic.dimensions()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::count_nonzero;

    #[test]
    fn empty_keypoints_give_empty_channel() {
        let f = face_hull_channel(&[], 16, 16);
        assert!(f.is_empty());
        assert_eq!(f.skipped, 0);
    }

    #[test]
    fn right_triangle_matches_scanline_fill() {
        let tri = vec![[2.0, 3.0], [12.0, 3.0], [2.0, 13.0]];
        let f = face_hull_channel(&[tri], 16, 16);
        // scanline oracle: row y spans x in [2, 2 + (13 - y)]
        let mut expected = 0;
        for y in 0..16i32 {
            if (3..=13).contains(&y) {
                expected += (13 - y) + 1;
            }
        }
        assert_eq!(count_nonzero(f.pixels()), expected as usize);
        for (x, y, p) in f.pixels().enumerate_pixels() {
            let inside = y >= 3 && y <= 13 && x >= 2 && (x as i32) <= 2 + (13 - y as i32);
            assert_eq!(p.0[0] == 255, inside, "({x},{y})");
        }
    }

    #[test]
    fn two_squares_do_not_bleed() {
        let a = vec![[1.0, 1.0], [4.0, 1.0], [4.0, 4.0], [1.0, 4.0]];
        let b = vec![[9.0, 8.0], [13.0, 8.0], [13.0, 12.0], [9.0, 12.0]];
        let f = face_hull_channel(&[a, b], 16, 16);
        for (x, y, p) in f.pixels().enumerate_pixels() {
            let in_a = (1..=4).contains(&x) && (1..=4).contains(&y);
            let in_b = (9..=13).contains(&x) && (8..=12).contains(&y);
            assert_eq!(p.0[0] == 255, in_a || in_b, "({x},{y})");
            assert!(p.0[0] == 0 || p.0[0] == 255);
        }
    }

    #[test]
    fn short_sets_are_skipped_with_count() {
        let f = face_hull_channel(&[vec![[1.0, 1.0], [3.0, 3.0]], vec![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]], 8, 8);
        assert_eq!(f.skipped, 2);
        assert!(f.is_empty());
    }

    #[test]
    fn single_pixel_box() {
        let mut m = GrayImage::new(16, 16);
        m.put_pixel(5, 9, image::Luma([255]));
        assert_eq!(bbox_from_labels(&m).unwrap().bbox, BBox::new(5, 9, 5, 9));
    }

    #[test]
    fn l_shaped_box() {
        let mut m = GrayImage::new(16, 16);
        for y in 2..=10 {
            m.put_pixel(4, y, image::Luma([255]));
        }
        for x in 4..=7 {
            m.put_pixel(x, 10, image::Luma([255]));
        }
        // scan-all-pixels oracle
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for (x, y, p) in m.enumerate_pixels() {
            if p.0[0] != 0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
        let b = bbox_from_labels(&m).unwrap();
        assert_eq!(b.bbox, BBox::new(x0, y0, x1, y1));
        assert_eq!(b.bbox, BBox::new(4, 2, 7, 10));
        assert_eq!(count_nonzero(b.pixels()), 4 * 9);
    }

    #[test]
    fn full_frame_box() {
        let m = GrayImage::from_pixel(368, 368, image::Luma([1]));
        assert_eq!(bbox_from_labels(&m).unwrap().bbox, BBox::new(0, 0, 367, 367));
    }

    #[test]
    fn empty_mask_is_an_error() {
        assert!(matches!(bbox_from_labels(&GrayImage::new(4, 4)), Err(Error::EmptyPerson)));
    }

    #[test]
    fn compose_paints_in_order() {
        let mut a = GrayImage::new(4, 4);
        a.put_pixel(1, 1, image::Luma([36]));
        a.put_pixel(2, 2, image::Luma([36]));
        let mut b = GrayImage::new(4, 4);
        b.put_pixel(2, 2, image::Luma([144]));
        let scene = SceneParse::compose(
            4,
            4,
            vec![
                PersonParse::new(SemanticMap::new(a).unwrap(), None),
                PersonParse::new(SemanticMap::new(b).unwrap(), None),
            ],
        )
        .unwrap();
        assert_eq!(scene.semantic.pixels().get_pixel(1, 1).0[0], 36);
        assert_eq!(scene.semantic.pixels().get_pixel(2, 2).0[0], 144);
    }
}
