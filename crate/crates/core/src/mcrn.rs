//! Conditioned renderer: a segmented appearance encoder feeding a decoder
//! modulated by the pose map, producing a person image and a blending mask.

use std::collections::HashMap;

use candle_core::{DType, Tensor};
use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3, Zip};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, scalar, LossReport, LossWeights};
use crate::nn::{
    self, instance_norm, lrelu, AdamConfig, Conv2d, DiscriminatorBank, DiscriminatorConfig, Linear, Optimized,
    Params, PerceptualExtractor, Spade,
};
use crate::semantic::{
    binarize_pose, build_appearance_tensor, encode_pose, part_masks_from_semantic, AppearanceTensor, Part,
    PersonPose, SemanticMap, APPEARANCE_SIZE, PART_COUNT,
};
use crate::tensor::{array3_to_tensor, batch, tensor_to_array2, tensor_to_array3};

pub const LATENT_DIM: usize = 256;
pub const BOTTLENECK_SIDE: usize = 4;
pub const ENCODER_STAGES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McrnConfig {
    pub resolution: u32,
    pub decoder_stages: usize,
    pub bottleneck_channels: usize,
    pub encoder_widths: [usize; ENCODER_STAGES],
    pub min_decoder_width: usize,
    pub spade_hidden: usize,
    pub discriminator: DiscriminatorConfig,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl McrnConfig {
    pub fn full() -> Self {
        Self {
            resolution: 512,
            decoder_stages: 7,
            bottleneck_channels: 1024,
            encoder_widths: [64, 128, 256, 512, 512],
            min_decoder_width: 32,
            spade_hidden: 128,
            discriminator: DiscriminatorConfig::full(),
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        Self {
            resolution: 128,
            decoder_stages: 5,
            bottleneck_channels: 128,
            encoder_widths: [16, 32, 64, 64, 64],
            min_decoder_width: 16,
            spade_hidden: 32,
            discriminator: DiscriminatorConfig::desk(),
            ..Self::full()
        }
    }

    fn decoder_width(&self, stage: usize) -> usize {
        (self.bottleneck_channels >> stage).max(self.min_decoder_width)
    }
}

struct DecoderStage {
    spade: Spade,
    conv: Conv2d,
}

/// Generator half of the renderer.
pub struct McrnNet {
    encoder: Vec<Conv2d>,
    fc_latent: Linear,
    fc_bottleneck: Linear,
    stages: Vec<DecoderStage>,
    head_z: Conv2d,
    head_m: Conv2d,
    bottleneck_channels: usize,
}

impl McrnNet {
    fn new(p: &mut Params, cfg: &McrnConfig) -> Result<Self> {
        let mut encoder = Vec::with_capacity(ENCODER_STAGES);
        let mut c_in = 3 * PART_COUNT;
        for (i, &w) in cfg.encoder_widths.iter().enumerate() {
            encoder.push(Conv2d::new(p, &format!("enc{i}"), c_in, w, 4, 2, 1)?);
            c_in = w;
        }
        let side = APPEARANCE_SIZE as usize >> ENCODER_STAGES;
        let fc_latent = Linear::new(p, "fc_latent", c_in * side * side, LATENT_DIM)?;
        let fc_bottleneck = Linear::new(
            p,
            "fc_bottleneck",
            LATENT_DIM,
            BOTTLENECK_SIDE * BOTTLENECK_SIDE * cfg.bottleneck_channels,
        )?;
        let mut stages = Vec::with_capacity(cfg.decoder_stages);
        for k in 0..cfg.decoder_stages {
            let (ci, co) = (cfg.decoder_width(k), cfg.decoder_width(k + 1));
            stages.push(p.scope(format!("dec{k}"), |p| {
                Ok(DecoderStage {
                    spade: Spade::new(p, "spade", ci, 2, cfg.spade_hidden)?,
                    conv: Conv2d::new(p, "conv", ci, co, 3, 1, 1)?,
                })
            })?);
        }
        let c_out = cfg.decoder_width(cfg.decoder_stages);
        let net = Self {
            encoder,
            fc_latent,
            fc_bottleneck,
            stages,
            head_z: Conv2d::new(p, "head_z", c_out, 3, 3, 1, 1)?,
            head_m: Conv2d::new(p, "head_m", c_out, 1, 3, 1, 1)?,
            bottleneck_channels: cfg.bottleneck_channels,
        };
        net.check_structure(cfg)?;
        Ok(net)
    }

    fn check_structure(&self, cfg: &McrnConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.fc_latent.out_features != LATENT_DIM || self.fc_bottleneck.in_features != LATENT_DIM {
            return fail(format!("latent size {} != {LATENT_DIM}", self.fc_latent.out_features));
        }
        if self.fc_bottleneck.out_features != BOTTLENECK_SIDE * BOTTLENECK_SIDE * cfg.bottleneck_channels {
            return fail("bottleneck reshape does not match".into());
        }
        if self.stages.len() != cfg.decoder_stages {
            return fail(format!("{} decoder stages, expected {}", self.stages.len(), cfg.decoder_stages));
        }
        if (BOTTLENECK_SIDE << cfg.decoder_stages) as u32 != cfg.resolution {
            return fail(format!(
                "{} stages from {BOTTLENECK_SIDE}x{BOTTLENECK_SIDE} do not reach {}",
                cfg.decoder_stages, cfg.resolution
            ));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.fc_latent.out_features
    }

    pub fn bottleneck_shape(&self) -> [usize; 3] {
        [self.bottleneck_channels, BOTTLENECK_SIDE, BOTTLENECK_SIDE]
    }

    pub fn decoder_stages(&self) -> usize {
        self.stages.len()
    }

    /// `t`: `[N, 18, 128, 128]` -> `[N, 256]`.
    pub fn encode(&self, t: &Tensor) -> Result<Tensor> {
        let mut h = t.clone();
        for c in &self.encoder {
            h = lrelu(&instance_norm(&c.forward(&h)?)?)?;
        }
        lrelu(&self.fc_latent.forward(&h.flatten_from(1)?)?)
    }

    /// Returns `z` in (-1, 1) and `m` in (0, 1); `p` is `[N, 2, S, S]`.
    pub fn forward(&self, t: &Tensor, p: &Tensor) -> Result<(Tensor, Tensor)> {
        let latent = self.encode(t)?;
        let n = latent.dim(0)?;
        let mut h = self
            .fc_bottleneck
            .forward(&latent)?
            .reshape((n, self.bottleneck_channels, BOTTLENECK_SIDE, BOTTLENECK_SIDE))?;
        for stage in &self.stages {
            let (_, _, hh, ww) = h.dims4()?;
            h = h.upsample_nearest2d(hh * 2, ww * 2)?;
            let cond = p.upsample_nearest2d(hh * 2, ww * 2)?;
            h = stage.conv.forward(&lrelu(&stage.spade.forward(&h, &cond)?)?)?;
        }
        let z = self.head_z.forward(&h)?.tanh()?;
        let m = candle_nn::ops::sigmoid(&self.head_m.forward(&h)?)?;
        Ok((z, m))
    }
}

pub struct McrnModel {
    pub config: McrnConfig,
    pub net: McrnNet,
    pub bank: DiscriminatorBank,
    pub perceptual: PerceptualExtractor,
    pub g: Optimized,
    pub d: Optimized,
    pub step: u64,
}

/// Discriminator input channels: appearance stack, pose, masked image.
pub const MCRN_DISCRIMINATOR_CHANNELS: usize = 3 * PART_COUNT + 2 + 3;

impl McrnModel {
    pub fn new(config: McrnConfig, perceptual: PerceptualExtractor) -> Result<Self> {
        let mut gp = Params::new(config.seed, DType::F32);
        let net = gp.scope("g", |p| McrnNet::new(p, &config))?;
        let mut dp = Params::new(config.seed.wrapping_add(1), DType::F32);
        let bank = dp.scope("d", |p| {
            DiscriminatorBank::new(p, MCRN_DISCRIMINATOR_CHANNELS, config.discriminator.clone())
        })?;
        Ok(Self {
            g: Optimized::new(gp, config.adam)?,
            d: Optimized::new(dp, config.adam)?,
            config,
            net,
            bank,
            perceptual,
            step: 0,
        })
    }

    pub fn resolution(&self) -> u32 {
        self.config.resolution
    }

    fn check_pose(&self, p: &PersonPose) -> Result<()> {
        let r = self.config.resolution;
        if p.dimensions() != (r, r) {
            return Err(Error::ResolutionMismatch {
                expected: r,
                actual: p.dimensions().0,
            });
        }
        Ok(())
    }

    pub fn state(&self) -> HashMap<String, Tensor> {
        let mut s = self.g.state("g");
        s.extend(self.d.state("d"));
        s
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, step: u64) -> Result<()> {
        self.g.load_state(tensors, "g", step)?;
        self.d.load_state(tensors, "d", step)?;
        self.step = step;
        Ok(())
    }
}

/// `[18, 128, 128]` tensor of the appearance stack.
pub fn appearance_to_tensor(t: &AppearanceTensor) -> Result<Tensor> {
    let s = APPEARANCE_SIZE as usize;
    Ok(Tensor::from_slice(t.as_slice(), (3 * PART_COUNT, s, s), &nn::device())?)
}

/// Rendered person and mask, plus the composite when a scene was given.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderResult {
    pub z: Array3<f32>,
    pub m: Array2<f32>,
    pub o: Option<Array3<f32>>,
}

pub fn render(model: &McrnModel, t: &AppearanceTensor, p: &PersonPose) -> Result<(Array3<f32>, Array2<f32>)> {
    model.check_pose(p)?;
    let tt = appearance_to_tensor(t)?.unsqueeze(0)?;
    let pt = array3_to_tensor(&encode_pose(p))?.unsqueeze(0)?;
    let (z, m) = model.net.forward(&tt, &pt)?;
    Ok((tensor_to_array3(&z)?, tensor_to_array2(&m)?))
}

/// `x * (1 - m) + z * m` per pixel; `m` broadcasts over channels. Entries
/// with `m` exactly 0 or 1 copy the source value.
pub fn composite<T: Float>(x: &Array3<T>, z: &Array3<T>, m: &Array2<T>) -> Result<Array3<T>> {
    let (c, h, w) = x.dim();
    if z.dim() != (c, h, w) || m.dim() != (h, w) {
        return Err(Error::shape(format!("x {:?}, z {:?}, m {:?}", x.dim(), z.dim(), m.dim())));
    }
    if let Some(&bad) = m.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(Error::MaskOutOfRange(bad.to_f64().unwrap_or(f64::NAN)));
    }
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        Zip::from(out.index_axis_mut(ndarray::Axis(0), ch))
            .and(x.index_axis(ndarray::Axis(0), ch))
            .and(z.index_axis(ndarray::Axis(0), ch))
            .and(m)
            .for_each(|o, &xv, &zv, &mv| {
                *o = if mv == T::zero() {
                    xv
                } else if mv == T::one() {
                    zv
                } else {
                    xv * (T::one() - mv) + zv * mv
                };
            });
    }
    Ok(out)
}

/// Mean absolute difference over the channels of pixels inside `pb`.
pub fn masked_l1(a: &Array3<f32>, b: &Array3<f32>, pb: &GrayImage) -> Result<f64> {
    let (c, h, w) = a.dim();
    if b.dim() != a.dim() || pb.dimensions() != (w as u32, h as u32) {
        return Err(Error::shape(format!("{:?} vs {:?} vs {:?}", a.dim(), b.dim(), pb.dimensions())));
    }
    let (mut sum, mut count) = (0.0f64, 0usize);
    for (x, y, v) in pb.enumerate_pixels() {
        if v.0[0] == 0 {
            continue;
        }
        count += c;
        for ch in 0..c {
            sum += (a[[ch, y as usize, x as usize]] - b[[ch, y as usize, x as usize]]).abs() as f64;
        }
    }
    if count == 0 {
        return Err(Error::EmptyPerson);
    }
    Ok(sum / count as f64)
}

/// One renderer training example at the model's resolution.
#[derive(Debug, Clone)]
pub struct McrnSample {
    /// Scene image, `3 x S x S` in [-1, 1].
    pub x: Array3<f32>,
    pub t: AppearanceTensor,
    pub p: PersonPose,
}

fn pb_tensor(p: &PersonPose) -> Result<Tensor> {
    let b = binarize_pose(p);
    let (w, h) = b.dimensions();
    let data: Vec<f32> = b.as_raw().iter().map(|&v| v as f32).collect();
    Ok(Tensor::from_vec(data, (1, h as usize, w as usize), &nn::device())?)
}

/// One generator and one discriminator update.
pub fn mcrn_training_step(model: &mut McrnModel, samples: &[McrnSample]) -> Result<LossReport> {
    if samples.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    let r = model.config.resolution as usize;
    let (mut xs, mut ts, mut ps, mut pbs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in samples {
        model.check_pose(&s.p)?;
        if s.x.dim() != (3, r, r) {
            return Err(Error::shape(format!("scene {:?}, expected (3, {r}, {r})", s.x.dim())));
        }
        xs.push(array3_to_tensor(&s.x)?);
        ts.push(appearance_to_tensor(&s.t)?);
        ps.push(array3_to_tensor(&encode_pose(&s.p))?);
        pbs.push(pb_tensor(&s.p)?);
    }
    let (x, t, p, pb) = (batch(&xs)?, batch(&ts)?, batch(&ps)?, batch(&pbs)?);

    let (z, m) = model.net.forward(&t, &p)?;
    let o = (x.broadcast_mul(&m.affine(-1.0, 1.0)?)? + z.broadcast_mul(&m)?)?;
    let zb = z.broadcast_mul(&pb)?;
    let xb = x.broadcast_mul(&pb)?;

    let t_full = if t.dim(2)? == r { t.clone() } else { t.upsample_nearest2d(r, r)? };
    let cond = Tensor::cat(&[&t_full, &p], 1)?;
    let real_in = Tensor::cat(&[&cond, &xb], 1)?;
    let acts_real = model.bank.forward(&real_in)?;
    let acts_fake = model.bank.forward(&Tensor::cat(&[&cond, &zb], 1)?)?;

    let w = model.config.weights;
    let adv_g = losses::hinge_g(&nn::scores(&acts_fake))?;
    let fm_d = losses::fm_discriminator(&nn::features(&acts_real), &nn::features(&acts_fake))?;
    let zero = || Tensor::zeros((), DType::F32, &nn::device());
    let fm_p = if w.fm_perceptual != 0.0 {
        losses::fm_perceptual(&x, &o, &model.perceptual)?
    } else {
        zero()?
    };
    let mask_l1 = losses::l1(&m, &pb)?;
    let mask_grad = losses::grad_l1(&m, None)?;
    let recon_l1 = losses::l1(&zb, &xb)?;
    let recon_grad = losses::grad_l1(&zb, Some(&xb))?;
    let total_g = [
        (&adv_g, w.adversarial),
        (&fm_d, w.fm_discriminator),
        (&fm_p, w.fm_perceptual),
        (&mask_l1, w.mask_l1),
        (&mask_grad, w.mask_grad),
        (&recon_l1, w.recon_l1),
        (&recon_grad, w.recon_grad),
    ]
    .into_iter()
    .try_fold(zero()?, |acc, (term, k)| Ok::<_, Error>((acc + (term * k)?)?))?;

    let acts_fake_d = model.bank.forward(&Tensor::cat(&[&cond, &zb.detach()], 1)?)?;
    let adv_d = losses::hinge_d(&nn::scores(&acts_real), &nn::scores(&acts_fake_d))?;
    let total_d = (&adv_d * w.adversarial)?;

    let report = LossReport {
        adversarial_g: scalar(&adv_g)?,
        adversarial_d: scalar(&adv_d)?,
        fm_d: scalar(&fm_d)?,
        fm_perceptual: scalar(&fm_p)?,
        mask_l1: scalar(&mask_l1)?,
        mask_grad: scalar(&mask_grad)?,
        recon_l1: scalar(&recon_l1)?,
        recon_grad: scalar(&recon_grad)?,
        ..Default::default()
    }
    .finalize(w);
    report.check_finite()?;

    model.g.step(&total_g)?;
    model.d.step(&total_d)?;
    model.step += 1;
    Ok(report)
}

/// Appearance tensor of the scene person with the listed slots taken from
/// the donor.
pub fn replace_component(
    person_image: &RgbImage,
    person_parse: &SemanticMap,
    donor_image: &RgbImage,
    donor_parse: &SemanticMap,
    parts: &[Part],
) -> Result<AppearanceTensor> {
    let mut t = build_appearance_tensor(person_image, &part_masks_from_semantic(person_parse))?;
    if parts.is_empty() {
        return Ok(t);
    }
    let donor_masks = part_masks_from_semantic(donor_parse);
    if let Some(&missing) = parts.iter().find(|&&part| !donor_masks.is_present(part)) {
        return Err(Error::PartMissing(missing));
    }
    let donor = build_appearance_tensor(donor_image, &donor_masks)?;
    for &part in parts {
        t.replace_slot(&donor, part);
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_structure() {
        let m = McrnModel::new(McrnConfig::desk(), PerceptualExtractor::unavailable()).unwrap();
        assert_eq!(m.net.latent_dim(), 256);
        assert_eq!(m.net.decoder_stages(), 5);
        assert_eq!(m.net.bottleneck_shape(), [128, 4, 4]);
    }

    #[test]
    fn stage_count_must_reach_resolution() {
        let cfg = McrnConfig {
            decoder_stages: 4,
            ..McrnConfig::desk()
        };
        assert!(matches!(
            McrnModel::new(cfg, PerceptualExtractor::unavailable()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn composite_examples() {
        let x = Array3::from_elem((3, 4, 4), 0.2f64);
        let z = Array3::from_elem((3, 4, 4), 0.6f64);
        let half = composite(&x, &z, &Array2::from_elem((4, 4), 0.5)).unwrap();
        assert!(half.iter().all(|&v| (v - 0.4).abs() <= 1e-12));
        assert_eq!(composite(&x, &z, &Array2::zeros((4, 4))).unwrap(), x);
        assert_eq!(composite(&x, &z, &Array2::ones((4, 4))).unwrap(), z);
        assert!(matches!(
            composite(&x, &z, &Array2::from_elem((4, 4), 1.5)),
            Err(Error::MaskOutOfRange(_))
        ));
    }
}
