//! Synthetic reference datasets, generated on demand from a seed.
//!
//! Two families: a 2-D Gaussian mixture with modes on a circle, and an 8x8
//! raster set mixing a checkerboard with soft blobs. No external data is
//! ever read.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng::CounterRng;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Equal-weight Gaussian modes spaced uniformly on a circle.
    GaussCircle {
        modes: usize,
        radius: f64,
        sigma: f64,
        /// Angular offset in radians; lets a source distribution sit between
        /// a target's modes for domain-shift experiments.
        #[serde(default)]
        rotation: f64,
    },
    /// 8x8 rasters: checkerboard phase plus a Gaussian blob, flattened to 64.
    Raster8 {
        #[serde(default = "default_blob_sigma")]
        blob_sigma: f64,
    },
}

fn default_blob_sigma() -> f64 {
    1.2
}

impl DatasetConfig {
    pub fn gauss8() -> Self {
        DatasetConfig::GaussCircle {
            modes: 8,
            radius: 4.0,
            sigma: 0.15,
            rotation: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetConfig::GaussCircle {
                modes,
                radius,
                sigma,
                ..
            } => {
                if *modes == 0 {
                    return Err(Error::Config("mixture needs at least one mode".into()));
                }
                if !(*radius >= 0.0 && *sigma > 0.0) {
                    return Err(Error::Config(
                        "mixture radius must be >= 0 and sigma > 0".into(),
                    ));
                }
            }
            DatasetConfig::Raster8 { blob_sigma } => {
                if *blob_sigma <= 0.0 {
                    return Err(Error::Config("blob sigma must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            DatasetConfig::GaussCircle { .. } => 2,
            DatasetConfig::Raster8 { .. } => 64,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetConfig::GaussCircle { modes, .. } => *modes,
            DatasetConfig::Raster8 { .. } => 2,
        }
    }
}

/// A batch of data vectors (one per column) with their class labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x0: Matrix,
    pub labels: Vec<usize>,
}

/// Draw `count` samples as columns.
pub fn sample_batch(cfg: &DatasetConfig, count: usize, rng: &mut CounterRng) -> Batch {
    match cfg {
        DatasetConfig::GaussCircle {
            modes,
            radius,
            sigma,
            rotation,
        } => {
            let mut x0 = Matrix::zeros(2, count);
            let mut labels = Vec::with_capacity(count);
            for s in 0..count {
                let mode = rng.range(*modes as u64) as usize;
                let angle = rotation + 2.0 * std::f64::consts::PI * mode as f64 / *modes as f64;
                x0.set(0, s, radius * angle.cos() + sigma * rng.normal());
                x0.set(1, s, radius * angle.sin() + sigma * rng.normal());
                labels.push(mode);
            }
            Batch { x0, labels }
        }
        DatasetConfig::Raster8 { blob_sigma } => {
            let mut x0 = Matrix::zeros(64, count);
            let mut labels = Vec::with_capacity(count);
            for s in 0..count {
                let phase = rng.range(2) as usize;
                let (cx, cy) = (rng.uniform(1.0, 6.0), rng.uniform(1.0, 6.0));
                for r in 0..8 {
                    for c in 0..8 {
                        let check = if ((r / 2 + c / 2) + phase).is_multiple_of(2) {
                            0.5
                        } else {
                            -0.5
                        };
                        let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                        let blob = (-d2 / (2.0 * blob_sigma * blob_sigma)).exp();
                        x0.set(r * 8 + c, s, check + blob + 0.02 * rng.normal());
                    }
                }
                labels.push(phase);
            }
            Batch { x0, labels }
        }
    }
}
