use std::collections::BTreeMap;

use image::GrayImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::semantic::SemanticMap;

pub const GROUP_COUNT: usize = 8;

/// Code value of each label group, `k * 36`.
pub const CODES: [u8; GROUP_COUNT] = [0, 36, 72, 108, 144, 180, 216, 252];

pub const GROUP_NAMES: [&str; GROUP_COUNT] = [
    "background",
    "hair",
    "face",
    "torso/upper-limbs",
    "upper-body wear",
    "lower-body wear",
    "lower limbs",
    "shoes",
];

pub mod group {
    pub const BACKGROUND: u8 = 0;
    pub const HAIR: u8 = 1;
    pub const FACE: u8 = 2;
    pub const TORSO: u8 = 3;
    pub const UPPER_WEAR: u8 = 4;
    pub const LOWER_WEAR: u8 = 5;
    pub const LOWER_LIMBS: u8 = 6;
    pub const SHOES: u8 = 7;
}

pub fn is_code(v: u8) -> bool {
    v % 36 == 0 && v <= 252
}

pub fn group_of_code(v: u8) -> Option<u8> {
    is_code(v).then_some(v / 36)
}

/// Maps raw human-parser label ids onto the eight label groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPalette {
    source_map: BTreeMap<u8, u8>,
}

impl Default for LabelPalette {
    /// Multi-Human-Parsing (v1) label set:
    /// 0 background, 1 hat, 2 hair, 3 sunglasses, 4 upper-clothes, 5 skirt,
    /// 6 pants, 7 dress, 8 belt, 9/10 shoes, 11 face, 12/13 legs, 14/15 arms,
    /// 16 bag, 17 scarf, 18 torso-skin.
    fn default() -> Self {
        use group::*;
        let table = [
            (0, BACKGROUND),
            (1, HAIR),
            (2, HAIR),
            (3, FACE),
            (4, UPPER_WEAR),
            (5, LOWER_WEAR),
            (6, LOWER_WEAR),
            (7, UPPER_WEAR),
            (8, LOWER_WEAR),
            (9, SHOES),
            (10, SHOES),
            (11, FACE),
            (12, LOWER_LIMBS),
            (13, LOWER_LIMBS),
            (14, TORSO),
            (15, TORSO),
            (16, UPPER_WEAR),
            (17, UPPER_WEAR),
            (18, TORSO),
        ];
        Self {
            source_map: table.into_iter().collect(),
        }
    }
}

impl LabelPalette {
    pub fn new(source_map: BTreeMap<u8, u8>) -> Result<Self> {
        if let Some((raw, g)) = source_map.iter().find(|(_, &g)| g as usize >= GROUP_COUNT) {
            return Err(Error::Config(format!("raw label {raw} maps to invalid group {g}")));
        }
        Ok(Self { source_map })
    }

    /// Palette whose source ids are the eight codes themselves.
    pub fn identity() -> Self {
        Self {
            source_map: CODES.iter().enumerate().map(|(g, &c)| (c, g as u8)).collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, u8> = serde_json::from_str(text)?;
        let mut map = BTreeMap::new();
        for (k, v) in raw {
            let id: u8 = k
                .parse()
                .map_err(|_| Error::Config(format!("invalid raw label id {k:?}")))?;
            map.insert(id, v);
        }
        Self::new(map)
    }

    pub fn group(&self, raw: u8) -> Result<u8> {
        self.source_map.get(&raw).copied().ok_or(Error::UnknownLabel(raw))
    }

    pub fn code(&self, raw: u8) -> Result<u8> {
        Ok(CODES[self.group(raw)? as usize])
    }

    pub fn source_map(&self) -> &BTreeMap<u8, u8> {
        &self.source_map
    }

    /// Stable digest of the mapping, used to tag checkpoints.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.source_map {
            h.update([*k, *v]);
        }
        hex::encode(&h.finalize()[..8])
    }
}

pub fn reduce_labels(raw: &GrayImage, palette: &LabelPalette) -> Result<SemanticMap> {
    let mut lut = [None; 256];
    for (id, slot) in lut.iter_mut().enumerate() {
        *slot = palette.code(id as u8).ok();
    }
    let mut out = GrayImage::new(raw.width(), raw.height());
    for (o, &r) in out.iter_mut().zip(raw.as_raw()) {
        *o = lut[r as usize].ok_or(Error::UnknownLabel(r))?;
    }
    Ok(SemanticMap::from_codes_unchecked(out))
}
