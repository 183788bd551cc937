//! Query regions: the whole image plus its five and nine crops.
//!
//! Geometry is integer-only apart from the ratio multiplications, which use
//! round-half-up; centering uses floor. Ordering is fixed:
//! five = `[top-left, top-right, bottom-left, bottom-right, center]`,
//! nine = 3x3 grid in row-major order.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::{math, Error, Result};

/// Minimum width and height accepted by [`generate_crops`].
pub const MIN_IMAGE_SIDE: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Original,
    Five,
    Nine,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Original, Granularity::Five, Granularity::Nine];

    pub fn crop_count(self) -> usize {
        match self {
            Granularity::Original => 1,
            Granularity::Five => 5,
            Granularity::Nine => 9,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Original => "original",
            Granularity::Five => "five",
            Granularity::Nine => "nine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.as_str() == s)
    }

    /// Index of the first crop of this granularity in the flat 0..15 order.
    pub fn offset(self) -> usize {
        match self {
            Granularity::Original => 0,
            Granularity::Five => 1,
            Granularity::Nine => 6,
        }
    }
}

/// Total number of crops across all granularities.
pub const TOTAL_CROPS: usize = 15;

/// Identifies crop `position` of a granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CropId {
    pub granularity: Granularity,
    pub position: u8,
}

impl CropId {
    pub fn new(granularity: Granularity, position: usize) -> Option<Self> {
        (position < granularity.crop_count()).then_some(Self { granularity, position: position as u8 })
    }

    /// Position in the flat order original, five[0..5], nine[0..9].
    pub fn flat_index(self) -> usize {
        self.granularity.offset() + self.position as usize
    }

    pub fn from_flat_index(index: usize) -> Option<Self> {
        Granularity::ALL
            .into_iter()
            .rev()
            .find(|g| index >= g.offset())
            .and_then(|g| Self::new(g, index - g.offset()))
    }
}

impl core::fmt::Display for CropId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}/{}", self.granularity.as_str(), self.position)
    }
}

/// All 15 crop ids in flat order.
pub fn all_crop_ids() -> impl Iterator<Item = CropId> {
    (0..TOTAL_CROPS).filter_map(CropId::from_flat_index)
}

/// Pixel rectangle; `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Region {
    pub fn contains(&self, px: u32, py: u32) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    pub five_ratio: f64,
    pub nine_ratio: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self { five_ratio: 0.6, nine_ratio: 0.5 }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        for r in [self.five_ratio, self.nine_ratio] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::InvalidCropRatio(r));
            }
        }
        Ok(())
    }
}

fn scaled(side: u32, ratio: f64) -> u32 {
    (math::round_half_up(ratio * f64::from(side)) as u32).clamp(1, side)
}

/// Generates the query regions of one granularity for a `width x height` image.
pub fn generate_crops(width: u32, height: u32, granularity: Granularity, config: &CropConfig) -> Result<Vec<(CropId, Region)>> {
    if width < MIN_IMAGE_SIDE || height < MIN_IMAGE_SIDE {
        return Err(Error::ImageTooSmall { width, height });
    }
    config.validate()?;
    let regions: Vec<Region> = match granularity {
        Granularity::Original => alloc::vec![Region { x: 0, y: 0, w: width, h: height }],
        Granularity::Five => {
            let w = scaled(width, config.five_ratio);
            let h = scaled(height, config.five_ratio);
            let (rx, by) = (width - w, height - h);
            alloc::vec![
                Region { x: 0, y: 0, w, h },
                Region { x: rx, y: 0, w, h },
                Region { x: 0, y: by, w, h },
                Region { x: rx, y: by, w, h },
                Region { x: rx / 2, y: by / 2, w, h },
            ]
        }
        Granularity::Nine => {
            let w = scaled(width, config.nine_ratio);
            let h = scaled(height, config.nine_ratio);
            let offset = |slack: u32, r: f64| math::round_half_up(r * f64::from(slack)) as u32;
            let mut out = Vec::with_capacity(9);
            for ry in [0.0, 0.5, 1.0] {
                for rx in [0.0, 0.5, 1.0] {
                    out.push(Region { x: offset(width - w, rx), y: offset(height - h, ry), w, h });
                }
            }
            out
        }
    };
    Ok(regions
        .into_iter()
        .enumerate()
        .map(|(j, r)| (CropId { granularity, position: j as u8 }, r))
        .collect())
}

/// All 15 crops in flat order.
pub fn generate_all_crops(width: u32, height: u32, config: &CropConfig) -> Result<Vec<(CropId, Region)>> {
    let mut out = Vec::with_capacity(TOTAL_CROPS);
    for g in Granularity::ALL {
        out.extend(generate_crops(width, height, g, config)?);
    }
    Ok(out)
}
