//! On-disk formats: 8-bit PNG channels and the keypoint JSON document.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semantic::{FaceChannel, Keypoints, SemanticMap};

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| Error::from(e).at(path))?;
    Ok(img.to_luma8())
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::from(e).at(path))?;
    Ok(img.to_rgb8())
}

pub fn write_gray(path: &Path, img: &GrayImage) -> Result<()> {
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::from(e).at(path))
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::from(e).at(path))
}

pub fn read_semantic(path: &Path) -> Result<SemanticMap> {
    SemanticMap::new(read_gray(path)?).map_err(|e| e.at(path))
}

pub fn read_binary_channel(path: &Path) -> Result<FaceChannel> {
    FaceChannel::new(read_gray(path)?).map_err(|e| e.at(path))
}

pub fn gray_to_png(img: &GrayImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn rgb_to_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn gray_from_png(bytes: &[u8]) -> Result<GrayImage> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8())
}

pub fn rgb_from_png(bytes: &[u8]) -> Result<RgbImage> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KeypointDocument {
    pub persons: Vec<PersonKeypoints>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PersonKeypoints {
    #[serde(default)]
    pub face_keypoints: Vec<[f32; 2]>,
}

impl KeypointDocument {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
        serde_json::from_str(&text).map_err(|e| Error::from(e).at(path))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::from(e).at(path))
    }

    /// Per-person keypoints; persons without a usable set map to `None`.
    pub fn face_sets(&self) -> Vec<Option<Keypoints>> {
        self.persons
            .iter()
            .map(|p| (p.face_keypoints.len() >= 3).then(|| p.face_keypoints.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantic::CODES;

    #[test]
    fn semantic_png_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::from_fn(13, 9, |x, y| image::Luma([CODES[((x + 3 * y) % 8) as usize]]));
        let path = dir.path().join("s.png");
        write_gray(&path, &img).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = read_semantic(&path).unwrap();
        assert_eq!(back.pixels(), &img);
        write_gray(&path, back.pixels()).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn invalid_code_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        write_gray(&path, &GrayImage::from_pixel(2, 2, image::Luma([37]))).unwrap();
        assert!(read_semantic(&path).is_err());
        assert!(read_binary_channel(&path).is_err());
    }

    #[test]
    fn keypoint_json() {
        let doc: KeypointDocument =
            serde_json::from_str(r#"{"persons":[{"face_keypoints":[[1,2],[3,4],[5,1]]},{"face_keypoints":[]},{}]}"#)
                .unwrap();
        let sets = doc.face_sets();
        assert_eq!(sets.len(), 3);
        assert_eq!(sets[0].as_ref().unwrap()[1], [3.0, 4.0]);
        assert!(sets[1].is_none() && sets[2].is_none());
    }
}
