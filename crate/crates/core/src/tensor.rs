//! Conversions between images, ndarray buffers and candle tensors.
//! Tensor values live in [-1, 1]; 8-bit images in 0..=255.

use candle_core::{DType, Tensor};
use image::{imageops, GrayImage, ImageBuffer, Luma, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::nn::device;
use crate::semantic::code_to_unit;

pub fn gray_to_unit(img: &GrayImage) -> Array2<f32> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| code_to_unit(img.get_pixel(x as u32, y as u32).0[0]))
}

pub fn rgb_to_unit(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        code_to_unit(img.get_pixel(x as u32, y as u32).0[c])
    })
}

fn unit_to_u8(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn unit_to_rgb(a: &Array3<f32>) -> Result<RgbImage> {
    let (c, h, w) = a.dim();
    if c != 3 {
        return Err(Error::ChannelMismatch { expected: 3, actual: c });
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([unit_to_u8(a[[0, y, x]]), unit_to_u8(a[[1, y, x]]), unit_to_u8(a[[2, y, x]])])
    }))
}

/// [0, 1] mask to 8-bit.
pub fn mask_to_gray(a: &Array2<f32>) -> GrayImage {
    let (h, w) = a.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(a[[y as usize, x as usize]] as f64 * 255.0).round().clamp(0.0, 255.0) as u8])
    })
}

pub fn array3_to_tensor(a: &Array3<f32>) -> Result<Tensor> {
    let (c, h, w) = a.dim();
    let data: Vec<f32> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, (c, h, w), &device())?)
}

pub fn array2_to_tensor(a: &Array2<f32>) -> Result<Tensor> {
    let (h, w) = a.dim();
    let data: Vec<f32> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, (1, h, w), &device())?)
}

/// `(C, H, W)` or `(1, C, H, W)` tensor to an f32 array.
pub fn tensor_to_array3(t: &Tensor) -> Result<Array3<f32>> {
    let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
    let (c, h, w) = t.dims3()?;
    let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(Array3::from_shape_vec((c, h, w), data).map_err(|e| Error::shape(e.to_string()))?)
}

pub fn tensor_to_array2(t: &Tensor) -> Result<Array2<f32>> {
    let a = tensor_to_array3(t)?;
    let (c, h, w) = a.dim();
    if c != 1 {
        return Err(Error::ChannelMismatch { expected: 1, actual: c });
    }
    Ok(a.into_shape_with_order((h, w)).map_err(|e| Error::shape(e.to_string()))?)
}

/// Bilinear resize of every plane of a `(C, H, W)` array.
pub fn resize_planes(a: &Array3<f32>, width: u32, height: u32) -> Array3<f32> {
    let (c, h, w) = a.dim();
    if (w as u32, h as u32) == (width, height) {
        return a.clone();
    }
    let mut out = Array3::zeros((c, height as usize, width as usize));
    for ch in 0..c {
        let plane: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([a[[ch, y as usize, x as usize]]]));
        let r = imageops::resize(&plane, width, height, imageops::FilterType::Triangle);
        for (x, y, v) in r.enumerate_pixels() {
            out[[ch, y as usize, x as usize]] = v.0[0];
        }
    }
    out
}

/// Stacks equally shaped `(C, H, W)` tensors into a batch.
pub fn batch(items: &[Tensor]) -> Result<Tensor> {
    if items.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    Ok(Tensor::stack(items, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_round_trip_is_exact() {
        let img = RgbImage::from_fn(7, 5, |x, y| image::Rgb([(x * 30) as u8, (y * 50) as u8, 255]));
        let back = unit_to_rgb(&rgb_to_unit(&img)).unwrap();
        assert_eq!(back, img);
        let t = array3_to_tensor(&rgb_to_unit(&img)).unwrap();
        assert_eq!(tensor_to_array3(&t).unwrap(), rgb_to_unit(&img));
    }
}
