//! Dataset directory layout and ingestion.
//!
//! ```text
//! root/
//!   layout.json              {"format": "incontext-dataset", "version": 1}
//!   palette.json             optional raw-label table, {"<raw id>": group}
//!   split.json               optional {"train": [id], "test": [id], "identities": {id: [name]}}
//!   images/<id>.png          RGB scene
//!   parsing/<id>_<k>.png     raw parser labels of person k (k = 0, 1, ...)
//!   keypoints/<id>.json      {"persons": [{"face_keypoints": [[x, y], ...]}]}, person order = k
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster;
use crate::semantic::io::{read_gray, read_rgb, KeypointDocument};
use crate::semantic::{reduce_labels, LabelPalette, PersonParse, SceneParse};

pub const LAYOUT_FORMAT: &str = "incontext-dataset";
pub const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutDoc {
    pub format: String,
    pub version: u32,
}

impl Default for LayoutDoc {
    fn default() -> Self {
        Self {
            format: LAYOUT_FORMAT.into(),
            version: LAYOUT_VERSION,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDoc {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
    /// Person identities per image id.
    #[serde(default)]
    pub identities: BTreeMap<String, Vec<String>>,
}

/// Paths are relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub image: PathBuf,
    pub parses: Vec<PathBuf>,
    pub keypoints: PathBuf,
    pub faces: Vec<bool>,
}

/// (sample index, person index).
pub type PersonRef = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub palette: LabelPalette,
    pub samples: Vec<SampleEntry>,
    /// One entry per person with facial keypoints, used as the held-out
    /// target of a pose-generation sample.
    pub egn_samples: Vec<PersonRef>,
    /// One entry per person with a nonempty parse.
    pub mcrn_samples: Vec<PersonRef>,
    pub split: Option<SplitDoc>,
    pub rejected: Vec<Rejection>,
}

/// A sample loaded into memory.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub image: RgbImage,
    pub scene: SceneParse,
}

impl DatasetIndex {
    /// Digest of everything except the absolute root.
    pub fn hash(&self) -> String {
        let doc = serde_json::json!({
            "palette": self.palette,
            "samples": self.samples,
            "egn": self.egn_samples,
            "mcrn": self.mcrn_samples,
            "split": self.split,
            "rejected": self.rejected,
        });
        hex::encode(Sha256::digest(doc.to_string().as_bytes()))
    }

    pub fn load(&self, sample: usize) -> Result<LoadedSample> {
        let e = self
            .samples
            .get(sample)
            .ok_or_else(|| Error::Config(format!("sample {sample} out of range")))?;
        load_entry(&self.root, e, &self.palette)
    }

    pub fn person_count(&self) -> usize {
        self.samples.iter().map(|s| s.parses.len()).sum()
    }
}

fn load_entry(root: &Path, e: &SampleEntry, palette: &LabelPalette) -> Result<LoadedSample> {
    let image = read_rgb(&root.join(&e.image))?;
    let (w, h) = image.dimensions();
    let kp = KeypointDocument::read(&root.join(&e.keypoints))?;
    if kp.persons.len() != e.parses.len() {
        return Err(Error::MalformedLayout(format!(
            "{}: {} parses but {} keypoint entries",
            e.id,
            e.parses.len(),
            kp.persons.len()
        )));
    }
    let faces = kp.face_sets();
    let mut persons = Vec::with_capacity(e.parses.len());
    for (k, p) in e.parses.iter().enumerate() {
        let path = root.join(p);
        let map = reduce_labels(&read_gray(&path)?, palette).map_err(|err| err.at(&path))?;
        if map.dimensions() != (w, h) {
            return Err(Error::shape(format!("{}: parse {k} is {:?}, image is {w}x{h}", e.id, map.dimensions())));
        }
        persons.push(PersonParse::new(map, faces[k].clone()));
    }
    let scene = SceneParse::compose(w, h, persons)?;
    Ok(LoadedSample { image, scene })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
    serde_json::from_str(&text).map_err(|e| Error::from(e).at(path))
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::from(e).at(dir))? {
        let p = entry.map_err(|e| Error::from(e).at(dir))?.path();
        if p.extension().is_some_and(|x| x == "png") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Parse files of `id`, ordered by person index.
fn person_parses(parsing: &Path, id: &str, all: &[PathBuf]) -> Vec<PathBuf> {
    let prefix = format!("{id}_");
    let mut found: Vec<(usize, PathBuf)> = all
        .iter()
        .filter_map(|p| {
            let stem = p.file_stem()?.to_str()?;
            let k = stem.strip_prefix(&prefix)?.parse().ok()?;
            Some((k, PathBuf::from("parsing").join(p.strip_prefix(parsing).ok()?)))
        })
        .collect();
    found.sort();
    found.into_iter().map(|(_, p)| p).collect()
}

fn check_split(split: &SplitDoc) -> Result<()> {
    let ids = |list: &[String]| -> BTreeSet<String> {
        list.iter()
            .flat_map(|id| split.identities.get(id).cloned().unwrap_or_default())
            .collect()
    };
    let (train, test) = (ids(&split.train), ids(&split.test));
    if let Some(shared) = train.intersection(&test).next() {
        return Err(Error::MalformedLayout(format!("identity {shared:?} appears in both splits")));
    }
    Ok(())
}

pub fn ingest(root: &Path) -> Result<DatasetIndex> {
    let layout_path = root.join("layout.json");
    if !layout_path.is_file() {
        return Err(Error::MalformedLayout(format!("{} is missing", layout_path.display())));
    }
    let layout: LayoutDoc = read_json(&layout_path)?;
    if layout.format != LAYOUT_FORMAT || layout.version != LAYOUT_VERSION {
        return Err(Error::MalformedLayout(format!(
            "unsupported layout {} v{}",
            layout.format, layout.version
        )));
    }
    let palette_path = root.join("palette.json");
    let palette = if palette_path.is_file() {
        let text = std::fs::read_to_string(&palette_path).map_err(|e| Error::from(e).at(&palette_path))?;
        LabelPalette::from_json(&text).map_err(|e| e.at(&palette_path))?
    } else {
        LabelPalette::default()
    };
    let split_path = root.join("split.json");
    let split = if split_path.is_file() {
        let s: SplitDoc = read_json(&split_path)?;
        check_split(&s)?;
        Some(s)
    } else {
        None
    };
    for dir in ["images", "parsing", "keypoints"] {
        if !root.join(dir).is_dir() {
            return Err(Error::MalformedLayout(format!("missing {dir}/ directory")));
        }
    }
    let images = sorted_pngs(&root.join("images"))?;
    let parses = sorted_pngs(&root.join("parsing"))?;

    let mut samples = Vec::new();
    let mut rejected = Vec::new();
    for img in &images {
        let id = img.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let entry = SampleEntry {
            id: id.clone(),
            image: PathBuf::from("images").join(format!("{id}.png")),
            parses: person_parses(&root.join("parsing"), &id, &parses),
            keypoints: PathBuf::from("keypoints").join(format!("{id}.json")),
            faces: Vec::new(),
        };
        if entry.parses.is_empty() {
            rejected.push(Rejection {
                id,
                reason: "no person parses".into(),
            });
            continue;
        }
        match load_entry(root, &entry, &palette) {
            Ok(loaded) => {
                let faces = loaded.scene.persons.iter().map(|p| p.has_face()).collect();
                samples.push(SampleEntry { faces, ..entry });
            }
            Err(e) => rejected.push(Rejection {
                id,
                reason: e.to_string(),
            }),
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    let mut egn_samples = Vec::new();
    let mut mcrn_samples = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let loaded = load_entry(root, s, &palette)?;
        for (k, person) in loaded.scene.persons.iter().enumerate() {
            if raster::count_nonzero(person.map().pixels()) == 0 {
                continue;
            }
            mcrn_samples.push((i, k));
            if s.faces[k] {
                egn_samples.push((i, k));
            }
        }
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        palette,
        samples,
        egn_samples,
        mcrn_samples,
        split,
        rejected,
    })
}

/// Writes scenes in the dataset layout, ids `scene_0000`, ...
pub fn write_dataset(root: &Path, scenes: &[crate::synthetic::SyntheticScene]) -> Result<Vec<String>> {
    for dir in ["images", "parsing", "keypoints"] {
        std::fs::create_dir_all(root.join(dir)).map_err(|e| Error::from(e).at(root.join(dir)))?;
    }
    let layout = root.join("layout.json");
    std::fs::write(&layout, serde_json::to_string_pretty(&LayoutDoc::default())?)
        .map_err(|e| Error::from(e).at(&layout))?;
    let mut ids = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let id = format!("scene_{i:04}");
        crate::semantic::io::write_rgb(&root.join("images").join(format!("{id}.png")), &s.image)?;
        for (k, raw) in s.raw_parses.iter().enumerate() {
            crate::semantic::io::write_gray(&root.join("parsing").join(format!("{id}_{k}.png")), raw)?;
        }
        s.keypoints.write(&root.join("keypoints").join(format!("{id}.json")))?;
        ids.push(id);
    }
    Ok(ids)
}
