//! Raw data model: Bayer frames, packing, demosaicking, coordinate maps,
//! the synthetic misaligned-pair generator, augmentation and file formats.

mod augment;
mod coords;
pub mod io;
mod synth;

use serde::{Deserialize, Serialize};

pub use augment::{augment, augment_with, Dihedral};
pub use coords::{coordinate_map, CoordinateMap};
pub use synth::{
    generate_dataset, random_scene, synth_pair, vignette_gain, FlowKind, FlowSpec, GenParams, SceneStyle, SynthConfig,
    SyntheticPair,
};

use crate::error::{Error, Result};
use crate::tensor::{Image, Tensor};

/// Colour of one Bayer site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cfa {
    R,
    G,
    B,
}

impl Cfa {
    pub fn index(self) -> usize {
        match self {
            Cfa::R => 0,
            Cfa::G => 1,
            Cfa::B => 2,
        }
    }
}

/// 2×2 colour filter layout, named by its top-left, top-right, bottom-left,
/// bottom-right sites.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BayerPattern {
    #[default]
    #[serde(rename = "RGGB")]
    Rggb,
    #[serde(rename = "BGGR")]
    Bggr,
    #[serde(rename = "GRBG")]
    Grbg,
    #[serde(rename = "GBRG")]
    Gbrg,
}

impl BayerPattern {
    pub const ALL: [BayerPattern; 4] = [
        BayerPattern::Rggb,
        BayerPattern::Bggr,
        BayerPattern::Grbg,
        BayerPattern::Gbrg,
    ];

    /// Sites in row-major order within the 2×2 cell.
    pub fn cell(self) -> [Cfa; 4] {
        use Cfa::*;
        match self {
            BayerPattern::Rggb => [R, G, G, B],
            BayerPattern::Bggr => [B, G, G, R],
            BayerPattern::Grbg => [G, R, B, G],
            BayerPattern::Gbrg => [G, B, R, G],
        }
    }

    pub fn from_cell(cell: [Cfa; 4]) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.cell() == cell)
            .ok_or_else(|| Error::Metadata(format!("not a Bayer layout: {cell:?}")))
    }

    pub fn color_at(self, y: usize, x: usize) -> Cfa {
        self.cell()[(y % 2) * 2 + (x % 2)]
    }

    /// Cell offsets `(dy, dx)` of R, G-on-R-row, G-on-B-row, B.
    pub fn packing_offsets(self) -> [(usize, usize); 4] {
        let cell = self.cell();
        let pos = |c: Cfa| {
            let i = cell.iter().position(|&k| k == c).unwrap();
            (i / 2, i % 2)
        };
        let (ry, rx) = pos(Cfa::R);
        let (by, bx) = pos(Cfa::B);
        [(ry, rx), (ry, 1 - rx), (by, 1 - bx), (by, bx)]
    }

    pub fn name(self) -> &'static str {
        match self {
            BayerPattern::Rggb => "RGGB",
            BayerPattern::Bggr => "BGGR",
            BayerPattern::Grbg => "GRBG",
            BayerPattern::Gbrg => "GBRG",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Metadata(format!("unknown Bayer pattern {s:?}")))
    }
}

/// Single-plane 16-bit Bayer mosaic with its metadata.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawFrame {
    pub mosaic: Vec<u16>,
    pub height: usize,
    pub width: usize,
    pub bayer_pattern: BayerPattern,
    pub black_level: u32,
    pub white_level: u32,
}

impl RawFrame {
    pub fn new(
        mosaic: Vec<u16>,
        height: usize,
        width: usize,
        bayer_pattern: BayerPattern,
        black_level: u32,
        white_level: u32,
    ) -> Result<Self> {
        let f = Self {
            mosaic,
            height,
            width,
            bayer_pattern,
            black_level,
            white_level,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) || self.height == 0 || self.width == 0 {
            return Err(Error::dim(format!(
                "mosaic must have even, non-zero dimensions, got {}×{}",
                self.height, self.width
            )));
        }
        if self.mosaic.len() != self.height * self.width {
            return Err(Error::dim(format!(
                "mosaic has {} samples, expected {}",
                self.mosaic.len(),
                self.height * self.width
            )));
        }
        if self.black_level >= self.white_level || self.white_level > 65535 {
            return Err(Error::Metadata(format!(
                "need black < white <= 65535, got black={} white={}",
                self.black_level, self.white_level
            )));
        }
        Ok(())
    }

    pub fn at(&self, y: usize, x: usize) -> u16 {
        self.mosaic[y * self.width + x]
    }

    /// `(v − black) / (white − black)` clamped to `[0,1]`.
    pub fn normalized(&self, y: usize, x: usize) -> f32 {
        let (black, white) = (self.black_level as u64, self.white_level as u64);
        let v = (self.at(y, x) as u64).clamp(black, white) - black;
        (v as f64 / (white - black) as f64) as f32
    }
}

/// Pack a `2H×2W` mosaic into a `4×H×W` tensor ordered (R, G on the R row,
/// G on the B row, B) whatever the source pattern.
pub fn pack_bayer(raw: &RawFrame) -> Result<Image> {
    raw.validate()?;
    let (h, w) = (raw.height / 2, raw.width / 2);
    let offs = raw.bayer_pattern.packing_offsets();
    let mut out = Tensor::zeros(&[4, h, w]);
    for (c, &(dy, dx)) in offs.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                out.set3(c, y, x, raw.normalized(2 * y + dy, 2 * x + dx));
            }
        }
    }
    Ok(out)
}

/// Bilinear demosaicking to a pixel-aligned `3×2H×2W` image.
///
/// Each missing sample is the weighted mean of same-colour samples in the
/// 3×3 neighbourhood (weights 1 for edge neighbours, 1/2 along the diagonal
/// for R/B), renormalized over the samples that exist, so the result is exact
/// for constant colour planes including at the borders.
pub fn demosaic_simple(raw: &RawFrame) -> Result<Image> {
    raw.validate()?;
    let (h, w) = (raw.height, raw.width);
    let mut out = Tensor::zeros(&[3, h, w]);
    // quarter-unit weights, accumulated exactly in integers
    const WEIGHT: [[u64; 3]; 3] = [[1, 2, 1], [2, 4, 2], [1, 2, 1]];
    let (black, white) = (raw.black_level as u64, raw.white_level as u64);
    let level = |y: usize, x: usize| (raw.at(y, x) as u64).clamp(black, white) - black;
    for y in 0..h {
        for x in 0..w {
            let own = raw.bayer_pattern.color_at(y, x);
            for c in [Cfa::R, Cfa::G, Cfa::B] {
                if c == own {
                    out.set3(c.index(), y, x, raw.normalized(y, x));
                    continue;
                }
                let (mut num, mut den) = (0u64, 0u64);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                            continue;
                        }
                        let (yy, xx) = (yy as usize, xx as usize);
                        if raw.bayer_pattern.color_at(yy, xx) != c {
                            continue;
                        }
                        // G neighbours of a non-G site are never diagonal
                        let wgt = WEIGHT[(dy + 1) as usize][(dx + 1) as usize];
                        num += wgt * level(yy, xx);
                        den += wgt;
                    }
                }
                let v = if den > 0 {
                    (num as f64 / (den * (white - black)) as f64) as f32
                } else {
                    0.0
                };
                out.set3(c.index(), y, x, v);
            }
        }
    }
    Ok(out)
}
