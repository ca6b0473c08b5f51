//! Pose-map generation in scene context.
//!
//! The generator maps a scene encoding (semantic codes, face hulls and,
//! for the boxed variant, a target box) to the two-channel pose of a new
//! person. Training holds one person out of a real scene and asks the
//! generator to restore it.

use std::collections::HashMap;

use candle_core::{DType, Tensor};
use image::GrayImage;
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, scalar, LossReport, LossWeights};
use crate::nn::{
    self, AdamConfig, DiscriminatorBank, DiscriminatorConfig, GeneratorConfig, GlobalGenerator, Optimized, Params,
};
use crate::raster::{self, BBox};
use crate::semantic::{
    bbox_from_labels, discretize_pose, encode_pose, face_hull_channel, BBoxChannel, PersonPose,
    SceneParse,
};
use crate::tensor::{array3_to_tensor, batch, gray_to_unit, tensor_to_array3};

pub const EGN_RESOLUTION: u32 = 368;
pub const DESK_EGN_RESOLUTION: u32 = 96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EgnVariant {
    /// Scene semantic, face and box channels.
    WithBbox,
    /// Scene semantic and face channels only.
    WithoutBbox,
    /// Source semantic map with source and target skeleton rasters.
    PoseTransfer,
}

impl EgnVariant {
    pub fn input_channels(self) -> usize {
        match self {
            EgnVariant::WithBbox | EgnVariant::PoseTransfer => 3,
            EgnVariant::WithoutBbox => 2,
        }
    }

    /// Checkpoint tag.
    pub fn network_name(self) -> &'static str {
        match self {
            EgnVariant::WithBbox => "egn",
            EgnVariant::WithoutBbox => "egn-prime",
            EgnVariant::PoseTransfer => "pose-transfer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BBoxMode {
    /// Tight box of the held-out person.
    TrainTight,
    /// Caller-provided box in scene pixel coordinates.
    InferenceSampled(BBox),
    /// No box channel.
    None,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub scene_id: String,
    pub heldout: Option<usize>,
}

/// `C x R x R` generator input in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct EgnInput {
    pub tensor: Array3<f32>,
    pub variant: EgnVariant,
    pub provenance: Provenance,
}

impl EgnInput {
    pub fn resolution(&self) -> u32 {
        self.tensor.dim().1 as u32
    }

    pub fn channels(&self) -> usize {
        self.tensor.dim().0
    }
}

fn stack_channels(channels: &[Array2<f32>]) -> Array3<f32> {
    let (h, w) = channels[0].dim();
    let mut out = Array3::zeros((channels.len(), h, w));
    for (i, c) in channels.iter().enumerate() {
        out.slice_mut(s![i, .., ..]).assign(c);
    }
    out
}

fn heldout_person(scene: &SceneParse, heldout: usize) -> Result<&crate::semantic::PersonParse> {
    let person = scene
        .persons
        .get(heldout)
        .ok_or_else(|| Error::SampleRejected(format!("no person {heldout} in scene of {}", scene.persons.len())))?;
    if !person.has_face() {
        return Err(Error::SampleRejected(format!("person {heldout} has no detected facial keypoints")));
    }
    if raster::count_nonzero(person.map().pixels()) == 0 {
        return Err(Error::SampleRejected(format!("person {heldout} has an empty mask")));
    }
    Ok(person)
}

/// Encodes a scene for the generator. With `heldout`, the scene channels
/// are recomposed without that person.
pub fn build_egn_input(
    scene: &SceneParse,
    scene_id: &str,
    heldout: Option<usize>,
    bbox_mode: BBoxMode,
    resolution: u32,
) -> Result<EgnInput> {
    let (w, h) = scene.dimensions();
    let (semantic, face) = match heldout {
        Some(i) => {
            heldout_person(scene, i)?;
            let rest = SceneParse::compose_excluding(w, h, scene.persons.clone(), Some(i))?;
            (rest.semantic, rest.face)
        }
        None => (scene.semantic.clone(), scene.face.clone()),
    };
    let bbox = match bbox_mode {
        BBoxMode::TrainTight => {
            let i = heldout.ok_or_else(|| Error::Config("tight box mode needs a held-out person".into()))?;
            Some(bbox_from_labels(&scene.persons[i].mask())?)
        }
        BBoxMode::InferenceSampled(b) => Some(BBoxChannel::from_box(b, w, h)?),
        BBoxMode::None => None,
    };
    let mut channels = vec![
        gray_to_unit(semantic.resize(resolution, resolution).pixels()),
        gray_to_unit(face.resize(resolution, resolution).pixels()),
    ];
    let variant = match &bbox {
        Some(b) => {
            channels.push(gray_to_unit(b.resize(resolution, resolution).pixels()));
            EgnVariant::WithBbox
        }
        None => EgnVariant::WithoutBbox,
    };
    Ok(EgnInput {
        tensor: stack_channels(&channels),
        variant,
        provenance: Provenance {
            scene_id: scene_id.to_string(),
            heldout,
        },
    })
}

/// Ground-truth pose of the held-out person at the generator resolution.
pub fn heldout_target(scene: &SceneParse, heldout: usize, resolution: u32) -> Result<PersonPose> {
    let person = heldout_person(scene, heldout)?;
    let (w, h) = scene.dimensions();
    let keypoints = person.face_keypoints.clone().unwrap_or_default();
    let face = face_hull_channel(&[keypoints], w, h);
    Ok(PersonPose::new(person.semantic.clone(), face)?.resize(resolution, resolution))
}

/// Limb list of the 18-joint body keypoint layout.
pub const BODY18_EDGES: [(usize, usize); 17] = [
    (1, 2),
    (1, 5),
    (2, 3),
    (3, 4),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (1, 11),
    (11, 12),
    (12, 13),
    (1, 0),
    (0, 14),
    (14, 16),
    (0, 15),
    (15, 17),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkeletonKind {
    Stick,
    Dense,
}

/// Body pose representation used by the pose-transfer variant.
#[derive(Debug, Clone, PartialEq)]
pub enum Skeleton {
    /// Joint positions in a `width x height` frame; missing joints are `None`.
    Stick {
        width: u32,
        height: u32,
        joints: Vec<Option<[f32; 2]>>,
        edges: Vec<(usize, usize)>,
    },
    /// Body-part index image, values 0..=24.
    Dense(GrayImage),
}

impl Skeleton {
    pub fn kind(&self) -> SkeletonKind {
        match self {
            Skeleton::Stick { .. } => SkeletonKind::Stick,
            Skeleton::Dense(_) => SkeletonKind::Dense,
        }
    }

    /// Limbs drawn as 255 on 0, rasterized directly at the output size.
    pub fn stick_raster(&self, out_w: u32, out_h: u32) -> Option<GrayImage> {
        let Skeleton::Stick {
            width,
            height,
            joints,
            edges,
        } = self
        else {
            return None;
        };
        let sx = out_w as f64 / *width as f64;
        let sy = out_h as f64 / *height as f64;
        let at = |i: usize| -> Option<(i64, i64)> {
            let p = joints.get(i).copied().flatten()?;
            Some(((p[0] as f64 * sx).floor() as i64, (p[1] as f64 * sy).floor() as i64))
        };
        let mut img = GrayImage::new(out_w, out_h);
        for &(a, b) in edges {
            if let (Some(pa), Some(pb)) = (at(a), at(b)) {
                raster::draw_line(&mut img, pa, pb, 255);
            }
        }
        Some(img)
    }

    fn unit_raster(&self, size: u32) -> Result<Array2<f32>> {
        match self {
            Skeleton::Stick { .. } => Ok(gray_to_unit(&self.stick_raster(size, size).expect("stick"))),
            Skeleton::Dense(img) => {
                if let Some(&v) = img.as_raw().iter().find(|&&v| v > 24) {
                    return Err(Error::IndexOutOfRange(v));
                }
                let r = raster::resize_nearest(img, size, size);
                Ok(Array2::from_shape_fn((size as usize, size as usize), |(y, x)| {
                    r.get_pixel(x as u32, y as u32).0[0] as f32 / 12.0 - 1.0
                }))
            }
        }
    }
}

/// `[source semantic, source skeleton, target skeleton]` input.
pub fn build_pose_transfer_input(
    source: &SceneParse,
    source_skeleton: &Skeleton,
    target_skeleton: &Skeleton,
    resolution: u32,
) -> Result<EgnInput> {
    if source_skeleton.kind() != target_skeleton.kind() {
        return Err(Error::MixedSkeletonKinds);
    }
    let channels = [
        gray_to_unit(source.semantic.resize(resolution, resolution).pixels()),
        source_skeleton.unit_raster(resolution)?,
        target_skeleton.unit_raster(resolution)?,
    ];
    Ok(EgnInput {
        tensor: stack_channels(&channels),
        variant: EgnVariant::PoseTransfer,
        provenance: Provenance::default(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgnConfig {
    pub variant: EgnVariant,
    pub resolution: u32,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl EgnConfig {
    pub fn full(variant: EgnVariant) -> Self {
        Self {
            variant,
            resolution: EGN_RESOLUTION,
            generator: GeneratorConfig::full(),
            discriminator: DiscriminatorConfig::full(),
            weights: LossWeights::pose_generator(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }

    pub fn desk(variant: EgnVariant) -> Self {
        Self {
            resolution: DESK_EGN_RESOLUTION,
            generator: GeneratorConfig::desk(),
            discriminator: DiscriminatorConfig::desk(),
            ..Self::full(variant)
        }
    }
}

pub struct EgnModel {
    pub config: EgnConfig,
    pub generator: GlobalGenerator,
    pub bank: DiscriminatorBank,
    pub g: Optimized,
    pub d: Optimized,
    pub step: u64,
}

impl EgnModel {
    /// The classifier feature-matching weight is forced to zero.
    pub fn new(mut config: EgnConfig) -> Result<Self> {
        config.weights.fm_perceptual = 0.0;
        let r = config.resolution as usize;
        let factor = 1usize << config.generator.downsamples;
        if r % factor != 0 {
            return Err(Error::Config(format!("resolution {r} not divisible by {factor}")));
        }
        let c = config.variant.input_channels();
        let mut gp = Params::new(config.seed, DType::F32);
        let generator = gp.scope("g", |p| GlobalGenerator::new(p, c, 2, config.generator))?;
        let mut dp = Params::new(config.seed.wrapping_add(1), DType::F32);
        let bank = dp.scope("d", |p| DiscriminatorBank::new(p, c + 2, config.discriminator.clone()))?;
        Ok(Self {
            g: Optimized::new(gp, config.adam)?,
            d: Optimized::new(dp, config.adam)?,
            config,
            generator,
            bank,
            step: 0,
        })
    }

    fn check_input(&self, input: &EgnInput) -> Result<()> {
        if input.variant != self.config.variant {
            return Err(Error::ChannelMismatch {
                expected: self.config.variant.input_channels(),
                actual: input.channels(),
            });
        }
        if input.channels() != self.config.variant.input_channels() {
            return Err(Error::ChannelMismatch {
                expected: self.config.variant.input_channels(),
                actual: input.channels(),
            });
        }
        let (_, h, w) = input.tensor.dim();
        if h as u32 != self.config.resolution || w as u32 != self.config.resolution {
            return Err(Error::ResolutionMismatch {
                expected: self.config.resolution,
                actual: h as u32,
            });
        }
        Ok(())
    }

    /// Continuous `2 x R x R` output in [-1, 1].
    pub fn generate_raw(&self, input: &EgnInput) -> Result<Array3<f32>> {
        self.check_input(input)?;
        let x = array3_to_tensor(&input.tensor)?.unsqueeze(0)?;
        tensor_to_array3(&self.generator.forward(&x)?)
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

/// Generated pose snapped onto palette codes and a binary face channel.
pub fn generate_pose(model: &EgnModel, input: &EgnInput) -> Result<PersonPose> {
    discretize_pose(&model.generate_raw(input)?)
}

/// One generator and one discriminator update on `batch`.
pub fn egn_training_step(model: &mut EgnModel, batch_items: &[(EgnInput, PersonPose)]) -> Result<LossReport> {
    if batch_items.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    let r = model.config.resolution;
    let mut xs = Vec::with_capacity(batch_items.len());
    let mut ps = Vec::with_capacity(batch_items.len());
    for (input, target) in batch_items {
        model.check_input(input)?;
        if target.dimensions() != (r, r) {
            return Err(Error::ResolutionMismatch {
                expected: r,
                actual: target.dimensions().0,
            });
        }
        xs.push(array3_to_tensor(&input.tensor)?);
        ps.push(array3_to_tensor(&encode_pose(target))?);
    }
    let x = batch(&xs)?;
    let real = batch(&ps)?;
    let fake = model.generator.forward(&x)?;

    let w = model.config.weights;
    let real_in = Tensor::cat(&[&x, &real], 1)?;
    let acts_real = model.bank.forward(&real_in)?;
    let acts_fake = model.bank.forward(&Tensor::cat(&[&x, &fake], 1)?)?;
    let adv_g = losses::hinge_g(&nn::scores(&acts_fake))?;
    let fm_d = losses::fm_discriminator(&nn::features(&acts_real), &nn::features(&acts_fake))?;
    let pose_grad = losses::grad_l1(&fake.narrow(1, 0, 1)?, None)?;
    let total_g = ((&adv_g * w.adversarial)? + (&fm_d * w.fm_discriminator)? + (&pose_grad * w.pose_grad)?)?;

    let acts_fake_d = model.bank.forward(&Tensor::cat(&[&x, &fake.detach()], 1)?)?;
    let adv_d = losses::hinge_d(&nn::scores(&acts_real), &nn::scores(&acts_fake_d))?;
    let total_d = (&adv_d * w.adversarial)?;

    let report = LossReport {
        adversarial_g: scalar(&adv_g)?,
        adversarial_d: scalar(&adv_d)?,
        fm_d: scalar(&fm_d)?,
        pose_grad: scalar(&pose_grad)?,
        ..Default::default()
    }
    .finalize(w);
    report.check_finite()?;

    model.g.step(&total_g)?;
    model.d.step(&total_d)?;
    model.step += 1;
    Ok(report)
}

/// IoU of the nonzero supports of two poses' semantic channels.
pub fn pose_iou(a: &PersonPose, b: &PersonPose) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.semantic.pixels().as_raw().iter().zip(b.semantic.pixels().as_raw()) {
        let (x, y) = (x != 0, y != 0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
