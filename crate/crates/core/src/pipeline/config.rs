use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::egn::{EgnConfig, EgnVariant};
use crate::error::{Error, Result};
use crate::frn::FrnConfig;
use crate::losses::LossWeights;
use crate::mcrn::McrnConfig;
use crate::nn::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Network {
    Egn,
    EgnPrime,
    Mcrn,
    Frn,
}

impl Network {
    pub const ALL: [Network; 4] = [Network::Egn, Network::EgnPrime, Network::Mcrn, Network::Frn];

    /// Name used in checkpoint headers and file names.
    pub fn name(self) -> &'static str {
        match self {
            Network::Egn => "egn",
            Network::EgnPrime => "egn-prime",
            Network::Mcrn => "mcrn",
            Network::Frn => "frn",
        }
    }

    pub fn egn_variant(self) -> Option<EgnVariant> {
        match self {
            Network::Egn => Some(EgnVariant::WithBbox),
            Network::EgnPrime => Some(EgnVariant::WithoutBbox),
            _ => None,
        }
    }
}

impl FromStr for Network {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Network::ALL
            .into_iter()
            .find(|n| n.name() == s || n.name().replace('-', "_") == s)
            .ok_or_else(|| Error::Config(format!("unknown network {s:?}")))
    }
}

/// Training run settings. Missing fields in a config file take the
/// preset's defaults for the chosen network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub epochs: u64,
    pub batch_size: usize,
    /// Stops after this many optimizer steps regardless of `epochs`.
    pub max_steps: Option<u64>,
    pub checkpoint_every: u64,
    pub weights: Option<LossWeights>,
    pub adam: AdamConfig,
    pub resolution: Option<u32>,
    /// Descriptor width of the face backend.
    pub face_dim: usize,
    /// Pretrained feature weights for the perceptual term; a seeded
    /// random stub is used when absent.
    pub perceptual_weights: Option<PathBuf>,
    pub resume: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Network::Mcrn, Preset::Desk)
    }
}

impl RunConfig {
    pub fn preset(network: Network, preset: Preset) -> Self {
        let (epochs, batch_size) = match (preset, network) {
            (Preset::Full, Network::Egn | Network::EgnPrime) => (300, 64),
            (Preset::Full, Network::Mcrn) => (200, 32),
            (Preset::Full, Network::Frn) => (100, 32),
            (Preset::Desk, _) => (2, 1),
        };
        Self {
            preset,
            seed: 0,
            epochs,
            batch_size,
            max_steps: None,
            checkpoint_every: if preset == Preset::Full { 1000 } else { 50 },
            weights: None,
            adam: AdamConfig::default(),
            resolution: None,
            face_dim: if preset == Preset::Full { 512 } else { 32 },
            perceptual_weights: None,
            resume: true,
        }
    }

    /// Reads a JSON config; fields not present keep the network's preset
    /// defaults (the preset itself defaults to desk).
    pub fn from_json(network: Network, text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let preset = match value.get("preset") {
            Some(p) => serde_json::from_value(p.clone())?,
            None => Preset::Desk,
        };
        let mut base = serde_json::to_value(Self::preset(network, preset))?;
        if let (Some(b), Some(v)) = (base.as_object_mut(), value.as_object()) {
            for (k, x) in v {
                b.insert(k.clone(), x.clone());
            }
        }
        Ok(serde_json::from_value(base)?)
    }

    pub fn read(network: Network, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
        Self::from_json(network, &text).map_err(|e| e.at(path))
    }

    pub fn egn_config(&self, variant: EgnVariant) -> EgnConfig {
        let mut c = match self.preset {
            Preset::Desk => EgnConfig::desk(variant),
            Preset::Full => EgnConfig::full(variant),
        };
        c.seed = self.seed;
        c.adam = self.adam;
        if let Some(w) = self.weights {
            c.weights = w;
        }
        if let Some(r) = self.resolution {
            c.resolution = r;
        }
        c
    }

    pub fn mcrn_config(&self) -> McrnConfig {
        let mut c = match self.preset {
            Preset::Desk => McrnConfig::desk(),
            Preset::Full => McrnConfig::full(),
        };
        c.seed = self.seed;
        c.adam = self.adam;
        if let Some(w) = self.weights {
            c.weights = w;
        }
        if let Some(r) = self.resolution {
            c.resolution = r;
            c.decoder_stages = (r / crate::mcrn::BOTTLENECK_SIDE as u32).max(1).ilog2() as usize;
        }
        c
    }

    pub fn frn_config(&self) -> FrnConfig {
        let mut c = match self.preset {
            Preset::Desk => FrnConfig::desk(self.face_dim),
            Preset::Full => FrnConfig::full(self.face_dim),
        };
        c.seed = self.seed;
        c.adam = self.adam;
        if let Some(w) = self.weights {
            c.weights = w;
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_preset_numbers() {
        let e = RunConfig::preset(Network::Egn, Preset::Full);
        assert_eq!((e.epochs, e.batch_size), (300, 64));
        let m = RunConfig::preset(Network::Mcrn, Preset::Full);
        assert_eq!((m.epochs, m.batch_size), (200, 32));
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_json(Network::Egn, r#"{"preset": "full", "seed": 5}"#).unwrap();
        assert_eq!((c.epochs, c.batch_size, c.seed), (300, 64, 5));
        let d = RunConfig::from_json(Network::Mcrn, r#"{"max_steps": 3}"#).unwrap();
        assert_eq!(d.preset, Preset::Desk);
        assert_eq!(d.max_steps, Some(3));
        assert!("egn_prime".parse::<Network>().is_ok());
    }
}
