//! On-disk formats: RAWP raw containers with JSON sidecars, 8-bit PNG, FLO2
//! flow files and the synthetic dataset directory layout.
//!
//! RAWP: `b"RAWP"`, version byte (1), little-endian `u32` height and width,
//! then `height·width` little-endian `u16` samples in row-major order.
//! FLO2: `b"FLO2"`, little-endian `u32` height and width, then `f32` `(u, v)`
//! pairs interleaved per pixel in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowalign::FlowField;
use crate::rawdata::{BayerPattern, GenParams, RawFrame, SyntheticPair};
use crate::tensor::{Image, Tensor};

const RAWP_MAGIC: &[u8; 4] = b"RAWP";
const RAWP_VERSION: u8 = 1;
const FLO2_MAGIC: &[u8; 4] = b"FLO2";

/// Sidecar metadata stored next to a `.rawp` file. In dataset directories the
/// same file also carries the generator parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawSidecar {
    pub bayer_pattern: BayerPattern,
    pub black_level: u32,
    pub white_level: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen_params: Option<GenParams>,
}

pub fn sidecar_path(rawp: &Path) -> PathBuf {
    rawp.with_extension("json")
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_rawp(path: &Path, raw: &RawFrame, gen_params: Option<&GenParams>) -> Result<()> {
    raw.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(RAWP_MAGIC)?;
    w.write_all(&[RAWP_VERSION])?;
    w.write_all(&(raw.height as u32).to_le_bytes())?;
    w.write_all(&(raw.width as u32).to_le_bytes())?;
    for v in &raw.mosaic {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    let side = RawSidecar {
        bayer_pattern: raw.bayer_pattern,
        black_level: raw.black_level,
        white_level: raw.white_level,
        gen_params: gen_params.cloned(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

/// Read a RAWP file and its sidecar. Returns the frame and any generator
/// parameters found in the sidecar.
pub fn read_rawp(path: &Path) -> Result<(RawFrame, Option<GenParams>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic[..4] != RAWP_MAGIC {
        return Err(Error::Format(format!("{}: not a RAWP file", path.display())));
    }
    if magic[4] != RAWP_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported RAWP version {}",
            path.display(),
            magic[4]
        )));
    }
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    let mut bytes = vec![0u8; h * w * 2];
    r.read_exact(&mut bytes)?;
    let mosaic = bytes
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    let side_path = sidecar_path(path);
    let side: RawSidecar = serde_json::from_str(
        &std::fs::read_to_string(&side_path)
            .map_err(|e| Error::Metadata(format!("missing sidecar {}: {e}", side_path.display())))?,
    )
    .map_err(|e| Error::Metadata(format!("bad sidecar {}: {e}", side_path.display())))?;
    let frame = RawFrame::new(mosaic, h, w, side.bayer_pattern, side.black_level, side.white_level)?;
    Ok((frame, side.gen_params))
}

/// Write a `3×H×W` (or `1×H×W`) image in `[0,1]` as 8-bit PNG using
/// `round(v·255)` with clamping.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let (c, h, w) = img.chw();
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::dim(format!("PNG export needs 1 or 3 channels, got {c}"))),
    };
    let mut bytes = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                bytes.push((img.at3(ch, y, x) * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Format(format!("png header: {e}")))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Format(format!("png data: {e}")))?;
    Ok(())
}

/// Read an 8-bit PNG into a `3×H×W` image with values `v/255`.
pub fn read_png(path: &Path) -> Result<Image> {
    let file = BufReader::new(File::open(path)?);
    let mut dec = png::Decoder::new(file);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = info.line_size;
    let samples = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => 3,
    };
    let mut img = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = &buf[y * stride + x * samples..];
            for c in 0..3 {
                let v = if samples < 3 { px[0] } else { px[c] };
                img.set3(c, y, x, v as f32 / 255.0);
            }
        }
    }
    Ok(img)
}

pub fn write_flo2(path: &Path, flow: &FlowField) -> Result<()> {
    let (h, w) = (flow.height(), flow.width());
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(FLO2_MAGIC)?;
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    for y in 0..h {
        for x in 0..w {
            out.write_all(&flow.u(y, x).to_le_bytes())?;
            out.write_all(&flow.v(y, x).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_flo2(path: &Path) -> Result<FlowField> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FLO2_MAGIC {
        return Err(Error::Format(format!("{}: not a FLO2 file", path.display())));
    }
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    let mut bytes = vec![0u8; h * w * 8];
    r.read_exact(&mut bytes)?;
    let vals: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    FlowField::new(Tensor::from_fn(&[2, h, w], |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        vals[2 * p + c]
    }))
}

/// File stem of pair `index` inside `<root>/pairs/`.
pub fn pair_stem(root: &Path, index: usize) -> PathBuf {
    root.join("pairs").join(format!("{index:04}"))
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Write pairs as `pairs/NNNN.{rawp,target.png,gt.png,flow.bin,json}`.
pub fn write_dataset(root: &Path, pairs: &[SyntheticPair]) -> Result<()> {
    std::fs::create_dir_all(root.join("pairs"))?;
    for (i, p) in pairs.iter().enumerate() {
        let stem = pair_stem(root, i);
        write_rawp(&with_suffix(&stem, ".rawp"), &p.raw, Some(&p.gen_params))?;
        write_png(&with_suffix(&stem, ".target.png"), &p.target)?;
        write_png(&with_suffix(&stem, ".gt.png"), &p.aligned_gt)?;
        write_flo2(&with_suffix(&stem, ".flow.bin"), &p.true_flow)?;
    }
    Ok(())
}

/// Load every pair of a dataset directory in index order.
pub fn read_dataset(root: &Path) -> Result<Vec<SyntheticPair>> {
    let mut pairs = Vec::new();
    for i in 0.. {
        let stem = pair_stem(root, i);
        let rawp = with_suffix(&stem, ".rawp");
        if !rawp.exists() {
            break;
        }
        let (raw, gen) = read_rawp(&rawp)?;
        pairs.push(SyntheticPair {
            raw,
            target: read_png(&with_suffix(&stem, ".target.png"))?,
            aligned_gt: read_png(&with_suffix(&stem, ".gt.png"))?,
            true_flow: read_flo2(&with_suffix(&stem, ".flow.bin"))?,
            gen_params: gen.unwrap_or_default(),
        });
    }
    if pairs.is_empty() {
        return Err(Error::Load {
            path: root.to_path_buf(),
            reason: "no pairs/0000.rawp found".into(),
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rawp_layout_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.rawp");
        let raw = RawFrame::new(vec![1, 2, 0x0304, 65535], 2, 2, BayerPattern::Bggr, 64, 1023).unwrap();
        write_rawp(&p, &raw, None).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(
            bytes,
            [b'R', b'A', b'W', b'P', 1, 2, 0, 0, 0, 2, 0, 0, 0, 1, 0, 2, 0, 4, 3, 255, 255]
        );
        let side: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.json")).unwrap()).unwrap();
        assert_eq!(side["bayer_pattern"], "BGGR");
        assert_eq!(side["black_level"], 64);
        let (back, gen) = read_rawp(&p).unwrap();
        assert_eq!(back, raw);
        assert!(gen.is_none());
    }

    #[test]
    fn flo2_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        let f = FlowField::from_fn(1, 2, |_, x| (x as f32, -1.5));
        write_flo2(&p, &f).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"FLO2");
        assert_eq!(&bytes[4..12], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(f32::from_le_bytes(bytes[12..16].try_into().unwrap()), 0.0);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), -1.5);
        assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), 1.0);
        assert_eq!(read_flo2(&p).unwrap(), f);
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(matches!(read_flo2(&p), Err(Error::Format(_))));
    }

    #[test]
    fn png_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.png");
        let img = Tensor::new(&[3, 1, 2], vec![0.0, 1.0, 0.5, -0.2, 0.1, 1.7]).unwrap();
        write_png(&p, &img).unwrap();
        let back = read_png(&p).unwrap();
        let expect = [0.0, 255.0, 128.0, 0.0, 26.0, 255.0].map(|v: f32| v / 255.0);
        assert_eq!(back.data(), &expect);
    }
}
