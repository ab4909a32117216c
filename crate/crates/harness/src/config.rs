// SPDX-License-Identifier: Apache-2.0

//! Run configuration for the end-to-end head.

use std::path::{Path, PathBuf};

use seed_head::boxgeom::SceneExtent;
use seed_head::dga::{DEFAULT_GRID, DEFAULT_HEADS};
use seed_head::dqs::DqsConfig;
use seed_head::matcher::CostWeights;
use seed_head::params::ParamStore;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::json;
use crate::scene::GridSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Scores read from the scene's oracle tensor.
    #[default]
    Oracle,
    /// Scores from the (untrained) mask predictor.
    Predictor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgaShape {
    pub k: usize,
    pub heads: usize,
}

impl Default for DgaShape {
    fn default() -> Self {
        DgaShape {
            k: DEFAULT_GRID,
            heads: DEFAULT_HEADS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderShape {
    pub layers: usize,
    /// Self-attention heads.
    pub heads: usize,
    /// FFN width; `4·C` when absent.
    pub ffn_hidden: Option<usize>,
}

impl Default for DecoderShape {
    fn default() -> Self {
        DecoderShape {
            layers: seed_head::decoder::DEFAULT_LAYERS,
            heads: 4,
            ffn_hidden: None,
        }
    }
}

/// Box given to every coarse query before the DQS decoder layer refines it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorSpec {
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        AnchorSpec {
            z: 0.0,
            l: 4.0,
            w: 2.0,
            h: 1.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamSource {
    /// Seed for the deterministic initialization, used when `dir` is absent.
    pub seed: u64,
    /// Directory holding `manifest.json` and its BEVT1 tensors.
    pub dir: Option<PathBuf>,
    /// Tensor-name prefixes forced to zero.
    pub zero_prefixes: Vec<String>,
}

impl Default for ParamSource {
    fn default() -> Self {
        ParamSource {
            seed: 0,
            dir: None,
            zero_prefixes: Vec::new(),
        }
    }
}

impl ParamSource {
    pub fn store(&self, base: &Path) -> Result<ParamStore> {
        let mut store = match &self.dir {
            Some(dir) => ParamStore::load(base.join(dir))?,
            None => ParamStore::seeded(self.seed),
        };
        for p in &self.zero_prefixes {
            store = store.with_zeroed(p.clone());
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub map: GridSpec,
    pub dqs: DqsConfig,
    pub dga: DgaShape,
    pub decoder: DecoderShape,
    /// Hidden width of the mask predictor and query-embedding MLP; `C` when absent.
    pub mlp_hidden: Option<usize>,
    pub matching: CostWeights,
    pub extent: SceneExtent,
    pub anchor: AnchorSpec,
    pub mask_scores: MaskSource,
    pub params: ParamSource,
    /// Used when the command line gives no output directory.
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            map: GridSpec::default(),
            dqs: DqsConfig::default(),
            dga: DgaShape::default(),
            decoder: DecoderShape::default(),
            mlp_hidden: None,
            matching: CostWeights::default(),
            extent: SceneExtent {
                x: 64.0,
                y: 64.0,
                z: 6.0,
            },
            anchor: AnchorSpec::default(),
            mask_scores: MaskSource::default(),
            params: ParamSource::default(),
            output_dir: None,
        }
    }
}

fn positive(pointer: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(HarnessError::config(pointer, format!("must be positive, got {v}")))
    }
}

fn at_least_one(pointer: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(HarnessError::config(pointer, "must be >= 1"))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = json::parse(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = json::read(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn channels(&self) -> usize {
        self.map.channels
    }

    pub fn ffn_hidden(&self) -> usize {
        self.decoder.ffn_hidden.unwrap_or(4 * self.map.channels)
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_hidden.unwrap_or(self.map.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.map;
        at_least_one("/map/height", m.height)?;
        at_least_one("/map/width", m.width)?;
        positive("/map/cell_size", m.cell_size)?;
        if m.channels < 4 || m.channels % 2 != 0 {
            return Err(HarnessError::config("/map/channels", "must be even and >= 4"));
        }
        if let Some((field, msg)) = self.dqs.violation() {
            return Err(HarnessError::config(format!("/dqs/{field}"), msg));
        }
        at_least_one("/dga/k", self.dga.k)?;
        at_least_one("/dga/heads", self.dga.heads)?;
        if m.channels % self.dga.heads != 0 {
            return Err(HarnessError::config("/dga/heads", "must divide map.channels"));
        }
        at_least_one("/decoder/layers", self.decoder.layers)?;
        at_least_one("/decoder/heads", self.decoder.heads)?;
        if m.channels % self.decoder.heads != 0 {
            return Err(HarnessError::config("/decoder/heads", "must divide map.channels"));
        }
        if let Some(h) = self.decoder.ffn_hidden {
            at_least_one("/decoder/ffn_hidden", h)?;
        }
        if let Some(h) = self.mlp_hidden {
            at_least_one("/mlp_hidden", h)?;
        }
        if let Some((field, msg)) = self.matching.violation() {
            return Err(HarnessError::config(format!("/matching/{field}"), msg));
        }
        positive("/extent/x", self.extent.x)?;
        positive("/extent/y", self.extent.y)?;
        positive("/extent/z", self.extent.z)?;
        if !self.anchor.z.is_finite() {
            return Err(HarnessError::config("/anchor/z", "must be finite"));
        }
        positive("/anchor/l", self.anchor.l)?;
        positive("/anchor/w", self.anchor.w)?;
        positive("/anchor/h", self.anchor.h)?;
        Ok(())
    }
}
