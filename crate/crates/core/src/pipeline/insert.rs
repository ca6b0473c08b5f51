//! Full insertion chain: pose generation, rendering, compositing and face
//! refinement.

use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::egn::{build_egn_input, generate_pose, BBoxMode, EgnConfig, EgnModel, EgnVariant};
use crate::error::{Error, Result};
use crate::frn::{crop_face, embed_face, refine_in_place, FaceRecognizer, FrnConfig, FrnModel};
use crate::mcrn::{composite, render, McrnConfig, McrnModel};
use crate::nn::PerceptualExtractor;
use crate::raster::{self, BBox};
use crate::semantic::{
    build_appearance_tensor, face_hull_channel, part_masks_from_semantic, AppearanceTensor, FaceChannel, Keypoints,
    LabelPalette, PersonPose, SceneParse, SemanticMap,
};
use crate::tensor::{resize_planes, rgb_to_unit, unit_to_rgb};

use super::config::{Network, Preset, RunConfig};
use super::train::stub_recognizer;

/// Re-samples allowed after an empty generation.
pub const MAX_RETRIES: usize = 3;
/// Relative spread of the sampled height and vertical position.
pub const SCALE_SPREAD: f64 = 0.1;

/// Samples a box for a new person from a reference person's mask: height
/// and width scaled by one draw, the vertical center by another (both in
/// `[0.9, 1.1]`), the horizontal center uniform across the frame. `unit`
/// yields values in `[0, 1)`.
pub fn sample_inference_bbox(reference: &GrayImage, unit: &mut dyn FnMut() -> f64) -> Result<BBox> {
    let r = raster::tight_bbox(reference).ok_or(Error::EmptyPerson)?;
    let (fw, fh) = (reference.width() as f64, reference.height() as f64);
    let scale = 1.0 + SCALE_SPREAD * (2.0 * unit() - 1.0);
    let shift = 1.0 + SCALE_SPREAD * (2.0 * unit() - 1.0);
    let cx = unit() * fw;

    let h = (r.height() as f64) * scale;
    let w = (r.width() as f64) * scale;
    let cy = ((r.y_min as f64 + r.y_max as f64 + 1.0) / 2.0 * shift).min(fh);

    let span = |c: f64, len: f64, limit: f64| {
        let lo = (c - len / 2.0).floor().clamp(0.0, limit - 1.0);
        let hi = ((c + len / 2.0).ceil() - 1.0).clamp(lo, limit - 1.0);
        (lo as u32, hi as u32)
    };
    let (x0, x1) = span(cx, w, fw);
    let (y0, y1) = span(cy, h, fh);
    Ok(BBox::new(x0, y0, x1, y1))
}

/// Loaded networks for inference.
pub struct Models {
    pub egn: Option<EgnModel>,
    pub egn_prime: Option<EgnModel>,
    pub mcrn: McrnModel,
    pub frn: Option<FrnModel>,
    pub recognizer: FaceRecognizer,
    pub palette: LabelPalette,
}

fn load_net(dir: &Path, network: Network) -> Result<Option<Checkpoint>> {
    let path = dir.join(format!("{}.ckpt", network.name()));
    if !path.is_file() {
        return Ok(None);
    }
    Checkpoint::load(&path).map(Some)
}

impl Models {
    /// Freshly initialized networks of a preset.
    pub fn untrained(preset: Preset, seed: u64) -> Result<Self> {
        let cfg = RunConfig {
            seed,
            ..RunConfig::preset(Network::Mcrn, preset)
        };
        let frn = FrnModel::new(cfg.frn_config())?;
        Ok(Self {
            egn: Some(EgnModel::new(cfg.egn_config(EgnVariant::WithBbox))?),
            egn_prime: Some(EgnModel::new(cfg.egn_config(EgnVariant::WithoutBbox))?),
            mcrn: McrnModel::new(cfg.mcrn_config(), PerceptualExtractor::unavailable())?,
            recognizer: stub_recognizer(seed, frn.config.descriptor_dim)?,
            frn: Some(frn),
            palette: LabelPalette::default(),
        })
    }

    /// Loads `<dir>/<network>.ckpt` files. The renderer is required; the
    /// others are optional. Every checkpoint must match `palette`.
    pub fn load(dir: &Path, palette: LabelPalette, recognizer: Option<FaceRecognizer>) -> Result<Self> {
        let hash = palette.hash();
        let mut egns = [None, None];
        for (slot, net) in egns.iter_mut().zip([Network::Egn, Network::EgnPrime]) {
            if let Some(c) = load_net(dir, net)? {
                let config: EgnConfig = serde_json::from_value(c.header.config.clone())?;
                c.expect(net.name(), config.resolution, &hash)?;
                let mut m = EgnModel::new(config)?;
                m.load_state(&c.tensors, c.header.step)?;
                *slot = Some(m);
            }
        }
        let c = load_net(dir, Network::Mcrn)?
            .ok_or_else(|| Error::Checkpoint(format!("no mcrn.ckpt in {}", dir.display())))?;
        let config: McrnConfig = serde_json::from_value(c.header.config.clone())?;
        c.expect("mcrn", config.resolution, &hash)?;
        let mut mcrn = McrnModel::new(config, PerceptualExtractor::unavailable())?;
        mcrn.load_state(&c.tensors, c.header.step)?;

        let (frn, stub) = match load_net(dir, Network::Frn)? {
            Some(c) => {
                let config: FrnConfig = serde_json::from_value(c.header.config.clone())?;
                c.expect("frn", config.face_size, &hash)?;
                let stub = stub_recognizer(c.header.seed, config.descriptor_dim)?;
                let mut m = FrnModel::new(config)?;
                m.load_state(&c.tensors, c.header.step)?;
                (Some(m), Some(stub))
            }
            None => (None, None),
        };
        let [egn, egn_prime] = egns;
        Ok(Self {
            egn,
            egn_prime,
            mcrn,
            frn,
            recognizer: recognizer.or(stub).unwrap_or_else(FaceRecognizer::unavailable),
            palette,
        })
    }

    pub fn pose_model(&self, variant: EgnVariant) -> Result<&EgnModel> {
        let m = match variant {
            EgnVariant::WithBbox => &self.egn,
            _ => &self.egn_prime,
        };
        m.as_ref()
            .ok_or_else(|| Error::Checkpoint(format!("{} is not loaded", variant.network_name())))
    }
}

#[derive(Debug, Clone)]
pub struct InsertionRequest {
    pub scene_image: RgbImage,
    pub scene: SceneParse,
    pub target_image: RgbImage,
    /// Group-code parse of the target person.
    pub target_parse: SemanticMap,
    pub target_keypoints: Option<Keypoints>,
    /// Where to place the person. Sampled from an existing person when
    /// absent and the box-conditioned generator is used.
    pub bbox: Option<BBox>,
    pub variant: EgnVariant,
    pub skip_frn: bool,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct InsertionResult {
    /// Generated pose at scene size.
    pub p: PersonPose,
    /// Rendered person and mask at renderer resolution.
    pub z: Array3<f32>,
    pub m: Array2<f32>,
    /// Composite at scene size, `3 x H x W` in [-1, 1].
    pub o: Array3<f32>,
    pub w: Array3<f32>,
    pub w_image: RgbImage,
    pub bbox: Option<BBox>,
    pub attempts: usize,
    pub frn_applied: bool,
}

fn upsample_mask(m: &Array2<f32>, width: u32, height: u32) -> Array2<f32> {
    resize_planes(&m.clone().insert_axis(Axis(0)), width, height)
        .index_axis(Axis(0), 0)
        .mapv(|v| v.clamp(0.0, 1.0))
}

/// Picks a reference person uniformly among nonempty ones and samples a box.
fn sampled_box(scene: &SceneParse, around: Option<BBox>, rng: &mut ChaCha8Rng) -> Result<BBox> {
    let (w, h) = scene.dimensions();
    let reference = match around {
        Some(b) => {
            let mut g = GrayImage::new(w, h);
            raster::fill_rect(&mut g, b, 255);
            g
        }
        None => {
            let people: Vec<GrayImage> = scene
                .persons
                .iter()
                .map(|p| p.mask())
                .filter(|m| raster::count_nonzero(m) > 0)
                .collect();
            if people.is_empty() {
                return Err(Error::EmptyPerson);
            }
            people[rng.random_range(0..people.len())].clone()
        }
    };
    sample_inference_bbox(&reference, &mut || rng.random::<f64>())
}

/// Renders `pose` with appearance `t` at the renderer's resolution and
/// composites the result over `scene`. Returns `(z, m, o)`; `o` has the
/// scene's size.
pub fn render_into(
    mcrn: &McrnModel,
    t: &AppearanceTensor,
    pose: &PersonPose,
    scene: &RgbImage,
) -> Result<(Array3<f32>, Array2<f32>, Array3<f32>)> {
    let s = mcrn.resolution();
    let (sw, sh) = scene.dimensions();
    let (z, m) = render(mcrn, t, &pose.resize(s, s))?;
    let o = composite(&rgb_to_unit(scene), &resize_planes(&z, sw, sh), &upsample_mask(&m, sw, sh))?;
    Ok((z, m, o))
}

/// Face refinement of composite `o` around `face`, conditioned on the
/// target person's own face.
pub fn refine_composite(
    models: &Models,
    o: &Array3<f32>,
    face: &FaceChannel,
    target_image: &RgbImage,
    target_keypoints: &Keypoints,
) -> Result<Array3<f32>> {
    let frn = models
        .frn
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("frn is not loaded".into()))?;
    let (tw, th) = target_image.dimensions();
    let target_face = face_hull_channel(std::slice::from_ref(target_keypoints), tw, th);
    let target = crop_face(&rgb_to_unit(target_image), &target_face, frn.config.margin, frn.config.face_size)?;
    let desc = embed_face(&target, &models.recognizer)?;
    refine_in_place(frn, o, face, &desc)
}

pub fn insert_person(models: &Models, req: &InsertionRequest) -> Result<InsertionResult> {
    let (sw, sh) = req.scene.dimensions();
    if req.scene_image.dimensions() != (sw, sh) {
        return Err(Error::shape(format!(
            "scene image {:?} vs parse {sw}x{sh}",
            req.scene_image.dimensions()
        )));
    }
    if let Some(b) = req.bbox {
        if !b.fits(sw, sh) {
            return Err(Error::BoxOutOfFrame(b.as_array(), sw, sh));
        }
        if req.variant != EgnVariant::WithBbox {
            return Err(Error::Config("a box needs the box-conditioned generator".into()));
        }
    }
    let egn = models.pose_model(req.variant)?;
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);

    let mut bbox = match (req.variant, req.bbox) {
        (EgnVariant::WithBbox, None) => Some(sampled_box(&req.scene, None, &mut rng)?),
        (_, b) => b,
    };
    let mut attempts = 0;
    let pose = loop {
        attempts += 1;
        let mode = bbox.map_or(BBoxMode::None, BBoxMode::InferenceSampled);
        let input = build_egn_input(&req.scene, "request", None, mode, egn.config.resolution)?;
        let p = generate_pose(egn, &input)?;
        if !p.is_empty() {
            break p;
        }
        let retries = attempts - 1;
        if bbox.is_none() || retries == MAX_RETRIES {
            return Err(Error::EmptyGeneration { retries });
        }
        log::debug!("empty generation, re-sampling box ({attempts})");
        bbox = Some(sampled_box(&req.scene, req.bbox, &mut rng)?);
    };

    let t = build_appearance_tensor(&req.target_image, &part_masks_from_semantic(&req.target_parse))?;
    let (z, m, o) = render_into(&models.mcrn, &t, &pose, &req.scene_image)?;
    let p = pose.resize(sw, sh);

    let mut frn_applied = false;
    let w = if req.skip_frn {
        o.clone()
    } else if p.face.is_empty() {
        log::warn!("generated pose has no face; skipping refinement");
        o.clone()
    } else {
        let kp = req.target_keypoints.as_ref().ok_or(Error::NoFace)?;
        frn_applied = true;
        refine_composite(models, &o, &p.face, &req.target_image, kp)?
    };
    Ok(InsertionResult {
        w_image: unit_to_rgb(&w)?,
        p,
        z,
        m,
        o,
        w,
        bbox,
        attempts,
        frn_applied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoint_draws_keep_the_reference_box() {
        let mut g = GrayImage::new(100, 80);
        raster::fill_rect(&mut g, BBox::new(10, 20, 29, 59), 255);
        let b = sample_inference_bbox(&g, &mut || 0.5).unwrap();
        assert_eq!((b.y_min, b.y_max), (20, 59));
        assert_eq!(b.width(), 20);
        assert_eq!((b.x_min, b.x_max), (40, 59));
    }

    #[test]
    fn edge_reference_is_clipped() {
        let mut g = GrayImage::new(50, 40);
        raster::fill_rect(&mut g, BBox::new(0, 10, 49, 39), 255);
        for u in [0.0, 0.999] {
            let b = sample_inference_bbox(&g, &mut || u).unwrap();
            assert!(b.fits(50, 40));
        }
        assert!(matches!(
            sample_inference_bbox(&GrayImage::new(4, 4), &mut || 0.5),
            Err(Error::EmptyPerson)
        ));
    }
}
