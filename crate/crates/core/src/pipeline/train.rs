//! Training loop shared by the four networks: seeded sampling, NDJSON loss
//! log, periodic checkpoints and resume.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use image::imageops;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::egn::{build_egn_input, egn_training_step, heldout_target, BBoxMode, EgnInput, EgnModel, EgnVariant};
use crate::error::{Error, Result};
use crate::frn::{crop_face, embed_face, frn_training_step, FaceCrop, FaceRecognizer, FrnModel, FrnSample};
use crate::losses::LossReport;
use crate::mcrn::{mcrn_training_step, McrnModel, McrnSample};
use crate::nn::{PerceptualExtractor, VggFeatures, VGG_TAPS};
use crate::semantic::{build_appearance_tensor, face_hull_channel, part_masks_from_semantic, PersonPose};
use crate::tensor::{resize_planes, rgb_to_unit};

use super::config::{Network, RunConfig};
use super::dataset::{DatasetIndex, LoadedSample, PersonRef};

/// Pose-generation training pair for person `r` held out of its scene.
pub fn egn_example(s: &LoadedSample, r: PersonRef, variant: EgnVariant, resolution: u32) -> Result<(EgnInput, PersonPose)> {
    let mode = match variant {
        EgnVariant::WithBbox => BBoxMode::TrainTight,
        _ => BBoxMode::None,
    };
    let input = build_egn_input(&s.scene, &format!("{}", r.0), Some(r.1), mode, resolution)?;
    Ok((input, heldout_target(&s.scene, r.1, resolution)?))
}

/// Pose of one person with its own face hull, at the image's size.
pub fn person_pose(s: &LoadedSample, person: usize) -> Result<PersonPose> {
    let p = &s.scene.persons[person];
    let (w, h) = s.scene.dimensions();
    let kp: Vec<_> = p.face_keypoints.iter().cloned().collect();
    PersonPose::new(p.semantic.clone(), face_hull_channel(&kp, w, h))
}

/// Renderer training example: the scene is stretched to `S x S`.
pub fn mcrn_example(s: &LoadedSample, r: PersonRef, resolution: u32) -> Result<McrnSample> {
    let person = &s.scene.persons[r.1];
    let t = build_appearance_tensor(&s.image, &part_masks_from_semantic(person.map()))?;
    let x = imageops::resize(&s.image, resolution, resolution, imageops::FilterType::Triangle);
    Ok(McrnSample {
        x: rgb_to_unit(&x),
        t,
        p: person_pose(s, r.1)?.resize(resolution, resolution),
    })
}

/// Face refinement example: the input is a detail-degraded copy of the
/// person's own face crop, the target is the crop itself.
pub fn frn_example(s: &LoadedSample, r: PersonRef, margin: f64, size: u32, recognizer: &FaceRecognizer) -> Result<FrnSample> {
    let pose = person_pose(s, r.1)?;
    let x = rgb_to_unit(&s.image);
    let target = crop_face(&x, &pose.face, margin, size)?;
    let low = resize_planes(&target.pixels, (size / 4).max(1), (size / 4).max(1));
    let face_in = FaceCrop {
        pixels: resize_planes(&low, size, size),
        ..target.clone()
    };
    let descriptor = embed_face(&target, recognizer)?;
    Ok(FrnSample {
        face_in,
        target,
        descriptor,
    })
}

/// Seeded stand-in face backend derived from a run seed; inference
/// rebuilds the same one from a checkpoint header.
pub fn stub_recognizer(run_seed: u64, dim: usize) -> Result<FaceRecognizer> {
    FaceRecognizer::desk_stub(run_seed.wrapping_add(7), dim)
}

/// A network under training together with what it needs to take a step.
pub enum Trainee {
    Egn(EgnModel),
    Mcrn(McrnModel),
    Frn(FrnModel, FaceRecognizer),
}

impl Trainee {
    pub fn new(network: Network, cfg: &RunConfig) -> Result<Self> {
        Ok(match network {
            Network::Egn | Network::EgnPrime => {
                Trainee::Egn(EgnModel::new(cfg.egn_config(network.egn_variant().expect("pose network")))?)
            }
            Network::Mcrn => Trainee::Mcrn(McrnModel::new(cfg.mcrn_config(), perceptual_for(cfg)?)?),
            Network::Frn => Trainee::Frn(
                FrnModel::new(cfg.frn_config())?,
                stub_recognizer(cfg.seed, cfg.face_dim)?,
            ),
        })
    }

    pub fn resolution(&self) -> u32 {
        match self {
            Trainee::Egn(m) => m.config.resolution,
            Trainee::Mcrn(m) => m.config.resolution,
            Trainee::Frn(m, _) => m.config.face_size,
        }
    }

    pub fn config_json(&self) -> Result<serde_json::Value> {
        Ok(match self {
            Trainee::Egn(m) => serde_json::to_value(&m.config)?,
            Trainee::Mcrn(m) => serde_json::to_value(&m.config)?,
            Trainee::Frn(m, _) => serde_json::to_value(&m.config)?,
        })
    }

    pub fn state(&self) -> HashMap<String, Tensor> {
        match self {
            Trainee::Egn(m) => m.state(),
            Trainee::Mcrn(m) => m.state(),
            Trainee::Frn(m, _) => m.state(),
        }
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, step: u64) -> Result<()> {
        match self {
            Trainee::Egn(m) => m.load_state(tensors, step),
            Trainee::Mcrn(m) => m.load_state(tensors, step),
            Trainee::Frn(m, _) => m.load_state(tensors, step),
        }
    }

    fn lr(&self) -> f64 {
        match self {
            Trainee::Egn(m) => m.config.adam.lr,
            Trainee::Mcrn(m) => m.config.adam.lr,
            Trainee::Frn(m, _) => m.config.adam.lr,
        }
    }

    fn step(&mut self, samples: &[&LoadedSample], refs: &[PersonRef]) -> Result<LossReport> {
        let r = self.resolution();
        match self {
            Trainee::Egn(m) => {
                let items = samples
                    .iter()
                    .zip(refs)
                    .map(|(s, &pr)| egn_example(s, pr, m.config.variant, r))
                    .collect::<Result<Vec<_>>>()?;
                egn_training_step(m, &items)
            }
            Trainee::Mcrn(m) => {
                let items = samples
                    .iter()
                    .zip(refs)
                    .map(|(s, &pr)| mcrn_example(s, pr, r))
                    .collect::<Result<Vec<_>>>()?;
                mcrn_training_step(m, &items)
            }
            Trainee::Frn(m, rec) => {
                let items = samples
                    .iter()
                    .zip(refs)
                    .map(|(s, &pr)| frn_example(s, pr, m.config.margin, r, rec))
                    .collect::<Result<Vec<_>>>()?;
                frn_training_step(m, rec, &items)
            }
        }
    }
}

fn perceptual_for(cfg: &RunConfig) -> Result<PerceptualExtractor> {
    match &cfg.perceptual_weights {
        Some(path) => Ok(PerceptualExtractor::new(
            std::sync::Arc::new(VggFeatures::load(path)?),
            VGG_TAPS.len(),
        )),
        None => PerceptualExtractor::desk_stub(cfg.seed.wrapping_add(11)),
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub network: String,
    pub seed: u64,
    pub lr: f64,
    pub losses: std::collections::BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub network: Network,
    pub last_step: u64,
    pub resumed_from: Option<u64>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub final_report: Option<LossReport>,
}

pub fn checkpoint_path(out_dir: &Path, network: Network, step: u64) -> PathBuf {
    out_dir.join(format!("{}-{step:08}.ckpt", network.name()))
}

pub fn log_path(out_dir: &Path, network: Network) -> PathBuf {
    out_dir.join(format!("{}-log.ndjson", network.name()))
}

/// Highest-step periodic checkpoint of `network` in `out_dir`.
pub fn latest_checkpoint(out_dir: &Path, network: Network) -> Result<Option<(u64, PathBuf)>> {
    let prefix = format!("{}-", network.name());
    if !out_dir.is_dir() {
        return Ok(None);
    }
    let mut best = None;
    for entry in std::fs::read_dir(out_dir).map_err(|e| Error::from(e).at(out_dir))? {
        let p = entry.map_err(|e| Error::from(e).at(out_dir))?.path();
        let step = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix(&prefix)?.strip_suffix(".ckpt")?.parse::<u64>().ok());
        if let Some(s) = step {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, p));
            }
        }
    }
    Ok(best)
}

/// Drops log records past `step` left behind by an interrupted run.
fn truncate_log(log: &Path, step: u64) -> Result<()> {
    if !log.is_file() {
        return Ok(());
    }
    let f = std::fs::File::open(log).map_err(|e| Error::from(e).at(log))?;
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::from(e).at(log))?;
        let rec: LogRecord = serde_json::from_str(&line).map_err(|e| Error::from(e).at(log))?;
        if rec.step <= step {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    std::fs::write(log, kept).map_err(|e| Error::from(e).at(log))
}

fn save(trainee: &Trainee, network: Network, index: &DatasetIndex, cfg: &RunConfig, step: u64, rng: &ChaCha8Rng, path: &Path) -> Result<()> {
    Checkpoint {
        header: CheckpointHeader {
            network: network.name().into(),
            resolution: trainee.resolution(),
            palette_hash: index.palette.hash(),
            step,
            seed: cfg.seed,
            rng_word_pos: rng.get_word_pos(),
            config: trainee.config_json()?,
        },
        tensors: trainee.state(),
    }
    .save(path)
}

/// Trains `network` on `index`, writing `<network>-log.ndjson`, periodic
/// `<network>-<step>.ckpt` files and `<network>.ckpt` (the latest state)
/// into `out_dir`. With `cfg.resume`, continues after the newest
/// checkpoint found there.
pub fn train(network: Network, index: &DatasetIndex, cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    let pool: &[PersonRef] = match network {
        Network::Mcrn => &index.mcrn_samples,
        _ => &index.egn_samples,
    };
    if pool.is_empty() {
        return Err(Error::EmptyDataset(index.root.clone()));
    }
    if cfg.batch_size == 0 || cfg.checkpoint_every == 0 {
        return Err(Error::Config("batch size and checkpoint cadence must be positive".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::from(e).at(out_dir))?;
    let log_path = log_path(out_dir, network);
    let final_path = out_dir.join(format!("{}.ckpt", network.name()));

    let mut trainee = Trainee::new(network, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut start = 1;
    let mut resumed_from = None;
    match latest_checkpoint(out_dir, network)? {
        Some((k, path)) if cfg.resume => {
            let ckpt = Checkpoint::load(&path)?;
            ckpt.expect(network.name(), trainee.resolution(), &index.palette.hash())?;
            trainee.load_state(&ckpt.tensors, k)?;
            rng.set_word_pos(ckpt.header.rng_word_pos);
            truncate_log(&log_path, k)?;
            start = k + 1;
            resumed_from = Some(k);
        }
        _ => {
            if log_path.exists() {
                std::fs::remove_file(&log_path).map_err(|e| Error::from(e).at(&log_path))?;
            }
        }
    }

    let per_epoch = pool.len().div_ceil(cfg.batch_size) as u64;
    let mut total = cfg.epochs * per_epoch;
    if let Some(m) = cfg.max_steps {
        total = total.min(m);
    }
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::from(e).at(&log_path))?;
    let mut cache: HashMap<usize, LoadedSample> = HashMap::new();
    let mut last = None;
    for step in start..=total {
        let refs: Vec<PersonRef> = (0..cfg.batch_size).map(|_| pool[rng.random_range(0..pool.len())]).collect();
        if cache.len() > 256 {
            cache.clear();
        }
        for r in &refs {
            if !cache.contains_key(&r.0) {
                cache.insert(r.0, index.load(r.0)?);
            }
        }
        let samples: Vec<&LoadedSample> = refs.iter().map(|r| &cache[&r.0]).collect();
        let report = match trainee.step(&samples, &refs) {
            Ok(r) => r,
            Err(e @ Error::NonFinite(_)) => {
                save(&trainee, network, index, cfg, step - 1, &rng, &out_dir.join(format!("{}-nonfinite-{step:08}.ckpt", network.name())))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let rec = LogRecord {
            step,
            network: network.name().into(),
            seed: cfg.seed,
            lr: trainee.lr(),
            losses: report.components().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        };
        writeln!(log, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::from(e).at(&log_path))?;
        log::debug!("{} step {step}: total_g {:.4}", network.name(), report.total_g);
        if step % cfg.checkpoint_every == 0 || step == total {
            save(&trainee, network, index, cfg, step, &rng, &checkpoint_path(out_dir, network, step))?;
        }
        last = Some(report);
    }
    let last_step = total.max(start.saturating_sub(1));
    save(&trainee, network, index, cfg, last_step, &rng, &final_path)?;
    Ok(TrainOutcome {
        network,
        last_step,
        resumed_from,
        checkpoint: final_path,
        log: log_path,
        final_report: last,
    })
}

/// Reads every record of a loss log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::from(e).at(path)))
        .collect()
}
