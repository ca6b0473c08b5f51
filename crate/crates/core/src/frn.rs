//! Face refinement: crop the face of the composite, re-render it conditioned
//! on the target's identity descriptor and blend it back with its own mask.

use std::collections::HashMap;
use std::sync::Arc;

use candle_core::{DType, Tensor};
use ndarray::{s, Array2, Array3};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, scalar, LossReport, LossWeights};
use crate::nn::{
    self, instance_norm, lrelu, AdamConfig, Conv2d, DiscriminatorBank, DiscriminatorConfig, FaceEmbedder, Linear,
    Optimized, Params, StubFaceEmbedder,
};
use crate::raster::{self, BBox};
use crate::semantic::FaceChannel;
use crate::tensor::{array3_to_tensor, batch, resize_planes, tensor_to_array2, tensor_to_array3};

pub const DEFAULT_MARGIN: f64 = 0.3;
pub const FACE_SIZE: u32 = 128;

/// Face region of an image resized to a square working size.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceCrop {
    /// `3 x F x F` in [-1, 1].
    pub pixels: Array3<f32>,
    /// Source rectangle, inclusive, clipped to the frame.
    pub bbox: BBox,
    pub margin: f64,
}

impl FaceCrop {
    pub fn size(&self) -> u32 {
        self.pixels.dim().1 as u32
    }
}

/// Tight box of `face` grown by `margin` of its width and height (split
/// evenly between the two sides) and clipped to a `width x height` frame.
pub fn face_box(face: &FaceChannel, margin: f64) -> Result<BBox> {
    let b = raster::tight_bbox(face.pixels()).ok_or(Error::NoFace)?;
    let (fw, fh) = face.pixels().dimensions();
    let grow = |lo: u32, hi: u32, extent: u32, limit: u32| {
        let extra = (extent as f64 * margin).round().max(0.0) as u32;
        let before = extra / 2;
        let after = extra - before;
        (lo.saturating_sub(before), (hi + after).min(limit - 1))
    };
    let (x0, x1) = grow(b.x_min, b.x_max, b.width(), fw);
    let (y0, y1) = grow(b.y_min, b.y_max, b.height(), fh);
    Ok(BBox::new(x0, y0, x1, y1))
}

/// `o` is `3 x H x W`; the face channel must have the same size.
pub fn crop_face(o: &Array3<f32>, face: &FaceChannel, margin: f64, size: u32) -> Result<FaceCrop> {
    let (_, h, w) = o.dim();
    if face.pixels().dimensions() != (w as u32, h as u32) {
        return Err(Error::shape(format!("image {w}x{h} vs face channel {:?}", face.pixels().dimensions())));
    }
    let b = face_box(face, margin)?;
    let region = o
        .slice(s![.., b.y_min as usize..=b.y_max as usize, b.x_min as usize..=b.x_max as usize])
        .to_owned();
    Ok(FaceCrop {
        pixels: resize_planes(&region, size, size),
        bbox: b,
        margin,
    })
}

/// Identity embedding of a face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceDescriptor {
    pub vector: Vec<f32>,
}

impl FaceDescriptor {
    pub fn new(vector: Vec<f32>) -> Result<Self> {
        if let Some(v) = vector.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("descriptor entry {v}")));
        }
        Ok(Self { vector })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Optional face-recognition backend.
#[derive(Clone)]
pub struct FaceRecognizer {
    backend: Option<Arc<dyn FaceEmbedder>>,
}

impl FaceRecognizer {
    pub fn new(backend: Arc<dyn FaceEmbedder>) -> Self {
        Self { backend: Some(backend) }
    }

    pub fn unavailable() -> Self {
        Self { backend: None }
    }

    pub fn desk_stub(seed: u64, dim: usize) -> Result<Self> {
        Ok(Self::new(Arc::new(StubFaceEmbedder::new(seed, dim)?)))
    }

    pub fn backend(&self) -> Result<&dyn FaceEmbedder> {
        self.backend.as_deref().ok_or(Error::BackendMissing("face recognition"))
    }

    pub fn dim(&self) -> Result<usize> {
        Ok(self.backend()?.dim())
    }
}

pub fn embed_face(crop: &FaceCrop, recognizer: &FaceRecognizer) -> Result<FaceDescriptor> {
    let backend = recognizer.backend()?;
    let x = array3_to_tensor(&crop.pixels)?.unsqueeze(0)?;
    let e = backend.embed(&x)?.squeeze(0)?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    if e.len() != backend.dim() {
        return Err(Error::DescriptorDim {
            expected: backend.dim(),
            actual: e.len(),
        });
    }
    FaceDescriptor::new(e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrnConfig {
    pub face_size: u32,
    pub margin: f64,
    pub descriptor_dim: usize,
    pub base_latent: usize,
    pub widths: Vec<usize>,
    /// Train against a patch discriminator on (input, output) crops.
    pub adversarial: bool,
    pub discriminator: DiscriminatorConfig,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl FrnConfig {
    pub fn full(descriptor_dim: usize) -> Self {
        Self {
            face_size: FACE_SIZE,
            margin: DEFAULT_MARGIN,
            descriptor_dim,
            base_latent: 512,
            widths: vec![64, 128, 256, 512],
            adversarial: true,
            discriminator: DiscriminatorConfig::full(),
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }

    pub fn desk(descriptor_dim: usize) -> Self {
        Self {
            face_size: 64,
            base_latent: 64,
            widths: vec![16, 32, 32, 64],
            discriminator: DiscriminatorConfig::desk(),
            ..Self::full(descriptor_dim)
        }
    }

    pub fn latent_width(&self) -> usize {
        self.base_latent + self.descriptor_dim
    }
}

/// Encoder-decoder with the identity descriptor appended to the bottleneck
/// latent.
pub struct FrnNet {
    down: Vec<Conv2d>,
    fc_in: Linear,
    fc_out: Linear,
    up: Vec<Conv2d>,
    head_f: Conv2d,
    head_m: Conv2d,
    side: usize,
    bottleneck: usize,
    descriptor_dim: usize,
}

impl FrnNet {
    fn new(p: &mut Params, cfg: &FrnConfig) -> Result<Self> {
        let levels = cfg.widths.len();
        let size = cfg.face_size as usize;
        if levels == 0 || size % (1 << levels) != 0 {
            return Err(Error::Config(format!("face size {size} not divisible by 2^{levels}")));
        }
        let side = size >> levels;
        let mut down = Vec::with_capacity(levels);
        let mut c = 3;
        for (i, &w) in cfg.widths.iter().enumerate() {
            down.push(Conv2d::new(p, &format!("down{i}"), c, w, 4, 2, 1)?);
            c = w;
        }
        let bottleneck = c;
        let flat = bottleneck * side * side;
        let fc_in = Linear::new(p, "fc_in", flat, cfg.base_latent)?;
        let fc_out = Linear::new(p, "fc_out", cfg.latent_width(), flat)?;
        let mut up = Vec::with_capacity(levels);
        for i in (0..levels).rev() {
            let out = if i == 0 { cfg.widths[0] } else { cfg.widths[i - 1] };
            up.push(Conv2d::new(p, &format!("up{i}"), c, out, 3, 1, 1)?);
            c = out;
        }
        let net = Self {
            down,
            fc_in,
            fc_out,
            up,
            head_f: Conv2d::new(p, "head_f", c, 3, 3, 1, 1)?,
            head_m: Conv2d::new(p, "head_m", c, 1, 3, 1, 1)?,
            side,
            bottleneck,
            descriptor_dim: cfg.descriptor_dim,
        };
        if net.latent_width() != cfg.base_latent + cfg.descriptor_dim {
            return Err(Error::Config("latent width mismatch".into()));
        }
        Ok(net)
    }

    pub fn latent_width(&self) -> usize {
        self.fc_out.in_features
    }

    /// `x`: `[N, 3, F, F]`, `desc`: `[N, D]`.
    pub fn forward(&self, x: &Tensor, desc: &Tensor) -> Result<(Tensor, Tensor)> {
        let d = desc.dim(1)?;
        if d != self.descriptor_dim {
            return Err(Error::DescriptorDim {
                expected: self.descriptor_dim,
                actual: d,
            });
        }
        let mut h = x.clone();
        for c in &self.down {
            h = lrelu(&instance_norm(&c.forward(&h)?)?)?;
        }
        let n = h.dim(0)?;
        let latent = lrelu(&self.fc_in.forward(&h.flatten_from(1)?)?)?;
        let joint = Tensor::cat(&[&latent, &desc.to_dtype(latent.dtype())?], 1)?;
        let mut h = lrelu(&self.fc_out.forward(&joint)?)?.reshape((n, self.bottleneck, self.side, self.side))?;
        for c in &self.up {
            let (_, _, hh, ww) = h.dims4()?;
            h = lrelu(&instance_norm(&c.forward(&h.upsample_nearest2d(hh * 2, ww * 2)?)?)?)?;
        }
        let f = self.head_f.forward(&h)?.tanh()?;
        let m = candle_nn::ops::sigmoid(&self.head_m.forward(&h)?)?;
        Ok((f, m))
    }
}

pub struct FrnModel {
    pub config: FrnConfig,
    pub net: FrnNet,
    pub bank: Option<DiscriminatorBank>,
    pub g: Optimized,
    pub d: Option<Optimized>,
    pub step: u64,
}

impl FrnModel {
    pub fn new(config: FrnConfig) -> Result<Self> {
        let mut gp = Params::new(config.seed, DType::F32);
        let net = gp.scope("g", |p| FrnNet::new(p, &config))?;
        let (bank, d) = if config.adversarial {
            let mut dp = Params::new(config.seed.wrapping_add(1), DType::F32);
            let bank = dp.scope("d", |p| DiscriminatorBank::new(p, 6, config.discriminator.clone()))?;
            (Some(bank), Some(Optimized::new(dp, config.adam)?))
        } else {
            (None, None)
        };
        Ok(Self {
            g: Optimized::new(gp, config.adam)?,
            d,
            bank,
            config,
            net,
            step: 0,
        })
    }

    pub fn state(&self) -> HashMap<String, Tensor> {
        let mut s = self.g.state("g");
        if let Some(d) = &self.d {
            s.extend(d.state("d"));
        }
        s
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, step: u64) -> Result<()> {
        self.g.load_state(tensors, "g", step)?;
        if let Some(d) = &mut self.d {
            d.load_state(tensors, "d", step)?;
        }
        self.step = step;
        Ok(())
    }
}

fn descriptor_tensor(desc: &FaceDescriptor) -> Result<Tensor> {
    Ok(Tensor::from_slice(&desc.vector, (1, desc.dim()), &nn::device())?)
}

/// Refined face `f` and its mask, both at the crop's size.
pub fn refine(model: &FrnModel, face_in: &FaceCrop, desc: &FaceDescriptor) -> Result<(Array3<f32>, Array2<f32>)> {
    if desc.dim() != model.config.descriptor_dim {
        return Err(Error::DescriptorDim {
            expected: model.config.descriptor_dim,
            actual: desc.dim(),
        });
    }
    if face_in.size() != model.config.face_size {
        return Err(Error::ResolutionMismatch {
            expected: model.config.face_size,
            actual: face_in.size(),
        });
    }
    let x = array3_to_tensor(&face_in.pixels)?.unsqueeze(0)?;
    let (f, m) = model.net.forward(&x, &descriptor_tensor(desc)?)?;
    Ok((tensor_to_array3(&f)?, tensor_to_array2(&m)?))
}

/// Resizes a refined face and mask from crop size back to `bbox` size.
pub fn to_box_size(f: &Array3<f32>, mf: &Array2<f32>, bbox: BBox) -> (Array3<f32>, Array2<f32>) {
    let (w, h) = (bbox.width(), bbox.height());
    let f = resize_planes(f, w, h);
    let m = resize_planes(&mf.clone().insert_axis(ndarray::Axis(0)), w, h)
        .index_axis(ndarray::Axis(0), 0)
        .mapv(|v| v.clamp(0.0, 1.0));
    (f, m)
}

/// `w = o * (1 - m^f) + f * m^f` inside `bbox`, `w = o` elsewhere. `f` and
/// `mf` are box-sized.
pub fn blend_face<T: Float>(o: &Array3<T>, f: &Array3<T>, mf: &Array2<T>, bbox: BBox) -> Result<Array3<T>> {
    let (c, h, w) = o.dim();
    if !bbox.fits(w as u32, h as u32) {
        return Err(Error::BoxOutOfFrame(bbox.as_array(), w as u32, h as u32));
    }
    let (bw, bh) = (bbox.width() as usize, bbox.height() as usize);
    if f.dim() != (c, bh, bw) || mf.dim() != (bh, bw) {
        return Err(Error::shape(format!("face {:?} / mask {:?} vs box {bw}x{bh}", f.dim(), mf.dim())));
    }
    if let Some(&bad) = mf.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(Error::MaskOutOfRange(bad.to_f64().unwrap_or(f64::NAN)));
    }
    let mut out = o.clone();
    let (x0, y0) = (bbox.x_min as usize, bbox.y_min as usize);
    for ch in 0..c {
        for y in 0..bh {
            for x in 0..bw {
                let m = mf[[y, x]];
                let ov = o[[ch, y0 + y, x0 + x]];
                let fv = f[[ch, y, x]];
                out[[ch, y0 + y, x0 + x]] = if m == T::zero() {
                    ov
                } else if m == T::one() {
                    fv
                } else {
                    ov * (T::one() - m) + fv * m
                };
            }
        }
    }
    Ok(out)
}

/// Crop, refine and blend back in one call.
pub fn refine_in_place(
    model: &FrnModel,
    o: &Array3<f32>,
    face: &FaceChannel,
    desc: &FaceDescriptor,
) -> Result<Array3<f32>> {
    let crop = crop_face(o, face, model.config.margin, model.config.face_size)?;
    let (f, mf) = refine(model, &crop, desc)?;
    let (f, mf) = to_box_size(&f, &mf, crop.bbox);
    blend_face(o, &f, &mf, crop.bbox)
}

/// Mean absolute difference between two embeddings.
pub fn identity_loss(e_f: &Tensor, e_fy: &Tensor) -> Result<Tensor> {
    losses::l1(e_f, e_fy)
}

/// Identity loss through `embedder`; the target side is treated as constant.
pub fn frn_identity_loss(f: &Tensor, f_y: &Tensor, embedder: &dyn FaceEmbedder) -> Result<Tensor> {
    identity_loss(&embedder.embed(f)?, &embedder.embed(f_y)?.detach())
}

/// One face-refinement training example.
#[derive(Debug, Clone)]
pub struct FrnSample {
    /// Crop of the composite being refined.
    pub face_in: FaceCrop,
    /// Crop of the target person's own face.
    pub target: FaceCrop,
    pub descriptor: FaceDescriptor,
}

/// Losses of one batch: identity, reconstruction of the blended crop,
/// mask smoothness and, when enabled, the adversarial terms. Returns the
/// report with the generator and discriminator objectives.
pub fn frn_training_loss(
    model: &FrnModel,
    recognizer: &FaceRecognizer,
    samples: &[FrnSample],
) -> Result<(LossReport, Tensor, Option<Tensor>)> {
    if samples.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    let embedder = recognizer.backend()?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ds = Vec::new();
    for s in samples {
        if s.descriptor.dim() != model.config.descriptor_dim {
            return Err(Error::DescriptorDim {
                expected: model.config.descriptor_dim,
                actual: s.descriptor.dim(),
            });
        }
        xs.push(array3_to_tensor(&s.face_in.pixels)?);
        ys.push(array3_to_tensor(&s.target.pixels)?);
        ds.push(Tensor::from_slice(&s.descriptor.vector, s.descriptor.dim(), &nn::device())?);
    }
    let (x, y) = (batch(&xs)?, batch(&ys)?);
    let desc = Tensor::stack(&ds, 0)?;
    let (f, mf) = model.net.forward(&x, &desc)?;
    let wcrop = (x.broadcast_mul(&mf.affine(-1.0, 1.0)?)? + f.broadcast_mul(&mf)?)?;

    let w = model.config.weights;
    let ident = frn_identity_loss(&f, &y, embedder)?;
    let recon_l1 = losses::l1(&wcrop, &y)?;
    let mask_grad = losses::grad_l1(&mf, None)?;
    let mut total_g = ((&ident * w.face_identity)? + (&recon_l1 * w.recon_l1)? + (&mask_grad * w.mask_grad)?)?;
    let mut report = LossReport {
        face_identity: scalar(&ident)?,
        recon_l1: scalar(&recon_l1)?,
        mask_grad: scalar(&mask_grad)?,
        ..Default::default()
    };
    let mut total_d = None;
    let mut weights = LossWeights {
        adversarial: 0.0,
        fm_discriminator: 0.0,
        fm_perceptual: 0.0,
        mask_l1: 0.0,
        recon_grad: 0.0,
        pose_grad: 0.0,
        ..w
    };
    if let Some(bank) = &model.bank {
        let acts_real = bank.forward(&Tensor::cat(&[&x, &y], 1)?)?;
        let acts_fake = bank.forward(&Tensor::cat(&[&x, &wcrop], 1)?)?;
        let adv_g = losses::hinge_g(&nn::scores(&acts_fake))?;
        let fm_d = losses::fm_discriminator(&nn::features(&acts_real), &nn::features(&acts_fake))?;
        total_g = ((total_g + (&adv_g * w.adversarial)?)? + (&fm_d * w.fm_discriminator)?)?;
        let acts_fake_d = bank.forward(&Tensor::cat(&[&x, &wcrop.detach()], 1)?)?;
        let adv_d = losses::hinge_d(&nn::scores(&acts_real), &nn::scores(&acts_fake_d))?;
        report.adversarial_g = scalar(&adv_g)?;
        report.fm_d = scalar(&fm_d)?;
        report.adversarial_d = scalar(&adv_d)?;
        weights.adversarial = w.adversarial;
        weights.fm_discriminator = w.fm_discriminator;
        total_d = Some((adv_d * w.adversarial)?);
    }
    let report = report.finalize(weights);
    report.check_finite()?;
    Ok((report, total_g, total_d))
}

pub fn frn_training_step(model: &mut FrnModel, recognizer: &FaceRecognizer, samples: &[FrnSample]) -> Result<LossReport> {
    let (report, total_g, total_d) = frn_training_loss(model, recognizer, samples)?;
    model.g.step(&total_g)?;
    if let (Some(d), Some(loss)) = (&mut model.d, total_d) {
        d.step(&loss)?;
    }
    model.step += 1;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::GrayImage;

    fn square_face(w: u32, h: u32, b: BBox) -> FaceChannel {
        let mut img = GrayImage::new(w, h);
        raster::fill_rect(&mut img, b, 255);
        FaceChannel::new(img).unwrap()
    }

    #[test]
    fn margin_arithmetic() {
        let face = square_face(200, 200, BBox::new(80, 80, 119, 119));
        let b = face_box(&face, 0.3).unwrap();
        assert_eq!(b.width(), 52);
        assert_eq!((b.x_min, b.x_max), (74, 125));
        let edge = square_face(50, 50, BBox::new(0, 30, 20, 49));
        let b = face_box(&edge, 0.3).unwrap();
        assert!(b.fits(50, 50));
        assert_eq!((b.x_min, b.y_max), (0, 49));
        assert!(matches!(face_box(&FaceChannel::empty(8, 8), 0.3), Err(Error::NoFace)));
    }

    #[test]
    fn crop_without_margin_is_the_square() {
        let o = Array3::from_shape_fn((3, 32, 32), |(c, y, x)| (c * 1000 + y * 32 + x) as f32 / 4000.0);
        let face = square_face(32, 32, BBox::new(8, 8, 23, 23));
        let crop = crop_face(&o, &face, 0.0, 16).unwrap();
        assert_eq!(crop.pixels, o.slice(s![.., 8..24, 8..24]).to_owned());
    }

    #[test]
    fn latent_width_includes_descriptor() {
        let m = FrnModel::new(FrnConfig::desk(16)).unwrap();
        assert_eq!(m.net.latent_width(), 64 + 16);
        let crop = FaceCrop {
            pixels: Array3::zeros((3, 64, 64)),
            bbox: BBox::new(0, 0, 63, 63),
            margin: 0.0,
        };
        let bad = FaceDescriptor::new(vec![0.0; 8]).unwrap();
        assert!(matches!(refine(&m, &crop, &bad), Err(Error::DescriptorDim { .. })));
        let (f, mf) = refine(&m, &crop, &FaceDescriptor::new(vec![0.5; 16]).unwrap()).unwrap();
        assert_eq!(f.dim(), (3, 64, 64));
        assert!(mf.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn identity_loss_by_hand() {
        let dev = nn::device();
        let a = Tensor::new(&[[1.0f64, -2.0, 0.5, 3.0]], &dev).unwrap();
        let b = Tensor::new(&[[0.0f64, 2.0, 0.5, 1.0]], &dev).unwrap();
        let v = scalar(&identity_loss(&a, &b).unwrap()).unwrap();
        assert!((v - (1.0 + 4.0 + 0.0 + 2.0) / 4.0).abs() < 1e-15);
        assert_eq!(scalar(&identity_loss(&a, &a).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn blend_outside_box_untouched() {
        let o = Array3::from_shape_fn((3, 10, 12), |(c, y, x)| (c + y * 7 + x) as f64 * 0.01);
        let b = BBox::new(3, 2, 7, 5);
        let f = Array3::from_elem((3, 4, 5), 9.0);
        let mf = Array2::from_shape_fn((4, 5), |(y, x)| ((y * 5 + x) % 3) as f64 / 2.0);
        let w = blend_face(&o, &f, &mf, b).unwrap();
        for ((c, y, x), &v) in w.indexed_iter() {
            if !b.contains(x as u32, y as u32) {
                assert_eq!(v.to_bits(), o[[c, y, x]].to_bits());
            }
        }
        assert!(matches!(
            blend_face(&o, &f, &mf, BBox::new(9, 2, 13, 5)),
            Err(Error::BoxOutOfFrame(..))
        ));
    }
}
