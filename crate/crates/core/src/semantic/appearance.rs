use image::{imageops, GrayImage, Rgb32FImage, RgbImage};
use ndarray::{s, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster;
use crate::semantic::{code_to_unit, group, SemanticMap};

pub const PART_COUNT: usize = 6;
pub const APPEARANCE_SIZE: u32 = 128;

/// Appearance slots, in tensor order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Hair,
    Face,
    UpperWear,
    LowerWear,
    Skin,
    Shoes,
}

impl Part {
    pub const ALL: [Part; PART_COUNT] = [
        Part::Hair,
        Part::Face,
        Part::UpperWear,
        Part::LowerWear,
        Part::Skin,
        Part::Shoes,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Label groups folded into this slot.
    pub fn groups(self) -> &'static [u8] {
        match self {
            Part::Hair => &[group::HAIR],
            Part::Face => &[group::FACE],
            Part::UpperWear => &[group::UPPER_WEAR],
            Part::LowerWear => &[group::LOWER_WEAR],
            Part::Skin => &[group::TORSO, group::LOWER_LIMBS],
            Part::Shoes => &[group::SHOES],
        }
    }
}

/// Per-part binary masks aligned with a person image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartMasks {
    pub masks: [GrayImage; PART_COUNT],
}

impl PartMasks {
    pub fn get(&self, part: Part) -> &GrayImage {
        &self.masks[part.index()]
    }

    pub fn is_present(&self, part: Part) -> bool {
        self.get(part).as_raw().iter().any(|&v| v != 0)
    }
}

pub fn part_masks_from_semantic(map: &SemanticMap) -> PartMasks {
    let masks = Part::ALL.map(|part| {
        let mut m = GrayImage::new(map.dimensions().0, map.dimensions().1);
        for &g in part.groups() {
            for (o, &v) in m.iter_mut().zip(map.group_mask(g).as_raw()) {
                *o |= v;
            }
        }
        m
    });
    PartMasks { masks }
}

/// 6x3x128x128 stack of masked part crops in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceTensor {
    pub parts: Array4<f32>,
    pub present: [bool; PART_COUNT],
}

impl AppearanceTensor {
    pub fn zeros() -> Self {
        let s = APPEARANCE_SIZE as usize;
        Self {
            parts: Array4::zeros((PART_COUNT, 3, s, s)),
            present: [false; PART_COUNT],
        }
    }

    /// Copies one slot from `other`.
    pub fn replace_slot(&mut self, other: &AppearanceTensor, part: Part) {
        let i = part.index();
        self.parts.slice_mut(s![i, .., .., ..]).assign(&other.parts.slice(s![i, .., .., ..]));
        self.present[i] = other.present[i];
    }

    /// Whether slot `part` holds the same data in both tensors.
    pub fn slot_eq(&self, other: &AppearanceTensor, part: Part) -> bool {
        let i = part.index();
        self.present[i] == other.present[i]
            && self.parts.slice(s![i, .., .., ..]) == other.parts.slice(s![i, .., .., ..])
    }

    /// Flattened in (part, channel, y, x) order.
    pub fn as_slice(&self) -> &[f32] {
        self.parts.as_slice().expect("standard layout")
    }
}

/// Minimal-bbox crop of the part with non-part pixels zeroed, and the
/// matching crop of the mask. `None` when the mask is empty.
pub fn masked_part_crop(image: &RgbImage, mask: &GrayImage) -> Option<(RgbImage, GrayImage)> {
    let b = raster::tight_bbox(mask)?;
    let crop = RgbImage::from_fn(b.width(), b.height(), |x, y| {
        let (sx, sy) = (b.x_min + x, b.y_min + y);
        if mask.get_pixel(sx, sy).0[0] != 0 {
            *image.get_pixel(sx, sy)
        } else {
            image::Rgb([0, 0, 0])
        }
    });
    let mcrop = GrayImage::from_fn(b.width(), b.height(), |x, y| {
        let v = mask.get_pixel(b.x_min + x, b.y_min + y).0[0];
        image::Luma([if v != 0 { 255 } else { 0 }])
    });
    Some((crop, mcrop))
}

pub fn build_appearance_tensor(image: &RgbImage, masks: &PartMasks) -> Result<AppearanceTensor> {
    let size = APPEARANCE_SIZE;
    let mut out = AppearanceTensor::zeros();
    for part in Part::ALL {
        let mask = masks.get(part);
        if mask.dimensions() != image.dimensions() {
            return Err(Error::shape(format!(
                "{part:?} mask {:?} vs image {:?}",
                mask.dimensions(),
                image.dimensions()
            )));
        }
        let Some((crop, mcrop)) = masked_part_crop(image, mask) else {
            continue;
        };
        // Normalize inside the part only so that non-part pixels stay 0.
        let unit = Rgb32FImage::from_fn(crop.width(), crop.height(), |x, y| {
            if mcrop.get_pixel(x, y).0[0] != 0 {
                image::Rgb(crop.get_pixel(x, y).0.map(code_to_unit))
            } else {
                image::Rgb([0.0; 3])
            }
        });
        let resized = if unit.dimensions() == (size, size) {
            unit
        } else {
            imageops::resize(&unit, size, size, imageops::FilterType::Triangle)
        };
        let rmask = raster::resize_nearest(&mcrop, size, size);
        let i = part.index();
        for (x, y, p) in resized.enumerate_pixels() {
            if rmask.get_pixel(x, y).0[0] == 0 {
                continue;
            }
            for c in 0..3 {
                out.parts[[i, c, y as usize, x as usize]] = p.0[c];
            }
        }
        out.present[i] = true;
    }
    if !out.present.iter().any(|&p| p) {
        return Err(Error::DegenerateTarget);
    }
    Ok(out)
}
