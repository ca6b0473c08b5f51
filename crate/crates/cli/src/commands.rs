use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use incontext::egn::EgnVariant;
use incontext::metrics::{evaluate_directory, DpisMode, Pairing};
use incontext::pipeline::{ingest, insert_person, train, write_dataset, InsertionRequest, Models, Network, Preset, RunConfig};
use incontext::raster::BBox;
use incontext::semantic::io::{read_gray, read_rgb, write_gray, write_rgb, KeypointDocument};
use incontext::semantic::{reduce_labels, LabelPalette, PersonParse, SceneParse};
use incontext::synthetic;
use incontext::tensor::{mask_to_gray, unit_to_rgb};

use crate::service;

#[derive(Debug, Parser)]
#[command(name = "incontext", version, about = "Person insertion: training, inference, metrics and local service")]
pub struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Index a dataset directory and report its sample counts.
    Ingest {
        #[arg(long)]
        data: PathBuf,
        /// Write the full index as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one network on an ingested dataset.
    Train {
        #[arg(long)]
        net: Network,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON run config; missing fields take the desk preset defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Insert the target person into a scene.
    Insert(InsertArgs),
    /// Dense-pose similarity between two folders of index maps.
    Metrics {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        /// Pair files by sorted position instead of by name.
        #[arg(long)]
        by_order: bool,
        #[arg(long, value_enum, default_value_t = ModeArg::PresentIndices)]
        mode: ModeArg,
        #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
        report: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the local HTTP service.
    Serve {
        #[arg(long, default_value_t = 8321)]
        port: u16,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long, default_value_t = service::DEFAULT_QUEUE_DEPTH)]
        queue: usize,
    },
    /// Write a small synthetic dataset plus a scene and target for `insert`.
    DemoData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        images: usize,
        #[arg(long, default_value_t = 96)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    PresentIndices,
    AllSlots,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Directory with `<network>.ckpt` files.
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
    /// Use freshly initialized desk-size networks instead of checkpoints.
    #[arg(long, conflicts_with = "checkpoints")]
    pub untrained: bool,
    /// Raw-label palette JSON; the built-in table otherwise.
    #[arg(long)]
    pub palette: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct InsertArgs {
    /// Person folder: image.png, parsing_<k>.png, keypoints.json.
    #[arg(long)]
    pub scene: PathBuf,
    /// Person folder; person 0 is inserted.
    #[arg(long)]
    pub target: PathBuf,
    /// Placement box `x,y,w,h`.
    #[arg(long, value_parser = parse_bbox)]
    pub bbox: Option<BBox>,
    /// Use the generator without a box channel.
    #[arg(long, conflicts_with = "bbox")]
    pub no_bbox: bool,
    #[arg(long)]
    pub skip_frn: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub models: ModelArgs,
}

pub fn parse_bbox(s: &str) -> std::result::Result<BBox, String> {
    let v: Vec<u32> = s
        .split(',')
        .map(|p| p.trim().parse::<u32>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [x, y, w, h] if w > 0 && h > 0 => Ok(BBox::new(x, y, x + w - 1, y + h - 1)),
        _ => Err("expected x,y,w,h with positive width and height".into()),
    }
}

fn palette(path: Option<&Path>) -> Result<LabelPalette> {
    Ok(match path {
        Some(p) => LabelPalette::from_json(&std::fs::read_to_string(p).with_context(|| p.display().to_string())?)?,
        None => LabelPalette::default(),
    })
}

impl ModelArgs {
    pub fn load(&self) -> Result<Models> {
        let palette = palette(self.palette.as_deref())?;
        match (&self.checkpoints, self.untrained) {
            (Some(dir), _) => Ok(Models::load(dir, palette, None)?),
            (None, true) => Ok(Models {
                palette,
                ..Models::untrained(Preset::Desk, self.model_seed)?
            }),
            (None, false) => bail!("pass --checkpoints DIR or --untrained"),
        }
    }
}

/// Image, parses and keypoints of a person folder.
pub struct PersonFolder {
    pub image: image::RgbImage,
    pub scene: SceneParse,
}

pub fn read_person_folder(dir: &Path, palette: &LabelPalette) -> Result<PersonFolder> {
    let image = read_rgb(&dir.join("image.png"))?;
    let (w, h) = image.dimensions();
    let kp_path = dir.join("keypoints.json");
    let faces = if kp_path.is_file() {
        KeypointDocument::read(&kp_path)?.face_sets()
    } else {
        Vec::new()
    };
    let mut persons = Vec::new();
    for k in 0.. {
        let path = dir.join(format!("parsing_{k}.png"));
        if !path.is_file() {
            break;
        }
        let map = reduce_labels(&read_gray(&path)?, palette)?;
        persons.push(PersonParse::new(map, faces.get(k).cloned().flatten()));
    }
    Ok(PersonFolder {
        scene: SceneParse::compose(w, h, persons)?,
        image,
    })
}

pub fn write_person_folder(dir: &Path, scene: &synthetic::SyntheticScene) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_rgb(&dir.join("image.png"), &scene.image)?;
    for (k, raw) in scene.raw_parses.iter().enumerate() {
        write_gray(&dir.join(format!("parsing_{k}.png")), raw)?;
    }
    scene.keypoints.write(&dir.join("keypoints.json"))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct IngestSummary {
    samples: usize,
    persons: usize,
    egn_samples: usize,
    mcrn_samples: usize,
    rejected: usize,
    hash: String,
}

#[derive(Debug, Serialize)]
struct InsertSummary {
    bbox: Option<[u32; 4]>,
    attempts: usize,
    frn_applied: bool,
}

pub fn insert(args: &InsertArgs) -> Result<()> {
    let models = args.models.load()?;
    let scene = read_person_folder(&args.scene, &models.palette)?;
    let target = read_person_folder(&args.target, &models.palette)?;
    let person = target.scene.persons.first().context("target folder has no parsing_0.png")?;
    let req = InsertionRequest {
        scene_image: scene.image,
        scene: scene.scene,
        target_image: target.image,
        target_parse: person.semantic.clone(),
        target_keypoints: person.face_keypoints.clone(),
        bbox: args.bbox,
        variant: if args.no_bbox { EgnVariant::WithoutBbox } else { EgnVariant::WithBbox },
        skip_frn: args.skip_frn,
        seed: args.seed,
    };
    let r = insert_person(&models, &req)?;
    let out = &args.out;
    std::fs::create_dir_all(out)?;
    write_gray(&out.join("p_semantic.png"), r.p.semantic.pixels())?;
    write_gray(&out.join("p_face.png"), r.p.face.pixels())?;
    write_rgb(&out.join("z.png"), &unit_to_rgb(&r.z)?)?;
    write_gray(&out.join("m.png"), &mask_to_gray(&r.m))?;
    write_rgb(&out.join("o.png"), &unit_to_rgb(&r.o)?)?;
    write_rgb(&out.join("w.png"), &r.w_image)?;
    let summary = InsertSummary {
        bbox: r.bbox.map(|b| [b.x_min, b.y_min, b.width(), b.height()]),
        attempts: r.attempts,
        frn_applied: r.frn_applied,
    };
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { data, out } => {
            let index = ingest(&data)?;
            for r in &index.rejected {
                log::warn!("rejected {}: {}", r.id, r.reason);
            }
            if let Some(out) = out {
                std::fs::write(&out, serde_json::to_string_pretty(&index)?)?;
            }
            let summary = IngestSummary {
                samples: index.samples.len(),
                persons: index.person_count(),
                egn_samples: index.egn_samples.len(),
                mcrn_samples: index.mcrn_samples.len(),
                rejected: index.rejected.len(),
                hash: index.hash(),
            };
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Train {
            net,
            data,
            out,
            config,
            max_steps,
            seed,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::read(net, &p)?,
                None => RunConfig::preset(net, Preset::Desk),
            };
            if max_steps.is_some() {
                cfg.max_steps = max_steps;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let index = ingest(&data)?;
            let outcome = train(net, &index, &cfg, &out)?;
            println!("{}", serde_json::to_string(&outcome)?);
        }
        Command::Insert(args) => insert(&args)?,
        Command::Metrics {
            gt,
            gen,
            by_order,
            mode,
            report,
            out,
        } => {
            let pairing = if by_order { Pairing::ByOrder } else { Pairing::ByName };
            let mode = match mode {
                ModeArg::PresentIndices => DpisMode::PresentIndices,
                ModeArg::AllSlots => DpisMode::AllSlots,
            };
            let r = evaluate_directory(&gt, &gen, pairing, mode)?;
            let text = match report {
                ReportFormat::Json => r.to_json()?,
                ReportFormat::Csv => r.to_csv()?,
            };
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => println!("{text}"),
            }
        }
        Command::Serve { port, models, queue } => {
            let models = models.load()?;
            tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()?
                .block_on(service::serve(models, port, queue))?;
        }
        Command::DemoData {
            out,
            images,
            size,
            seed,
        } => {
            let scenes: Vec<_> = (0..images)
                .map(|i| synthetic::random_scene(size, size, 1 + i % 3, seed.wrapping_add(i as u64)))
                .collect();
            write_dataset(&out.join("dataset"), &scenes)?;
            write_person_folder(&out.join("scene"), &synthetic::random_scene(size, size, 2, seed ^ 0xa5))?;
            write_person_folder(&out.join("target"), &synthetic::random_scene(size / 2, size, 1, seed ^ 0x5a))?;
            println!("wrote {} scenes to {}", images, out.display());
        }
    }
    Ok(())
}
