//! Binary container for per-pixel feature maps.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic  b"GFSS"
//! version u16
//! height  u32
//! width   u32
//! fdim    u32
//! height*width*fdim  f32 values, row-major over pixels
//! optional mask: height*width u16 class ids, 0xFFFF = ignore
//! ```
//!
//! Presence of the mask section is determined by the remaining payload
//! length, which must match exactly. Values are stored in 32 bits and widen
//! to f64 on read, so a write-read round trip of already-quantized data is
//! bit-exact.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use gfss_core::synth::FeatureMap;
use gfss_core::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"GFSS";
pub const VERSION: u16 = 1;

pub fn write_feature_map(path: &Path, map: &FeatureMap, mask: Option<&[u16]>) -> io::Result<()> {
    let pixels = map.height * map.width;
    let fdim = map.features.cols();
    if map.features.rows() != pixels {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!(
                "feature map has {} rows for {pixels} pixels",
                map.features.rows()
            ),
        ));
    }
    if let Some(m) = mask {
        if m.len() != pixels {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("mask has {} entries for {pixels} pixels", m.len()),
            ));
        }
    }

    let mut buf = Vec::with_capacity(14 + pixels * fdim * 4 + mask.map_or(0, |m| m.len() * 2));
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(map.height as u32).to_le_bytes());
    buf.extend_from_slice(&(map.width as u32).to_le_bytes());
    buf.extend_from_slice(&(fdim as u32).to_le_bytes());
    for &v in map.features.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(m) = mask {
        for &id in m {
            buf.extend_from_slice(&id.to_le_bytes());
        }
    }
    let mut file = File::create(path)?;
    file.write_all(&buf)
}

pub fn read_feature_map(path: &Path) -> io::Result<(FeatureMap, Option<Vec<u16>>)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    parse_feature_map(&bytes).map_err(|msg| {
        io::Error::new(
            io::ErrorKind::InvalidData,
            format!("{}: {msg}", path.display()),
        )
    })
}

fn parse_feature_map(bytes: &[u8]) -> Result<(FeatureMap, Option<Vec<u16>>), String> {
    if bytes.len() < 18 {
        return Err("file shorter than header".into());
    }
    if bytes[..4] != MAGIC {
        return Err("bad magic".into());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let height = read_u32(6);
    let width = read_u32(10);
    let fdim = read_u32(14);
    let pixels = height
        .checked_mul(width)
        .ok_or_else(|| "dimension overflow".to_string())?;
    if pixels == 0 || fdim == 0 {
        return Err("zero dimension".into());
    }

    let feature_bytes = pixels * fdim * 4;
    let body = &bytes[18..];
    let mask_bytes = match body.len().checked_sub(feature_bytes) {
        Some(0) => 0,
        Some(rest) if rest == pixels * 2 => rest,
        _ => {
            return Err(format!(
                "payload of {} bytes does not match {pixels} pixels x {fdim} features",
                body.len()
            ))
        }
    };

    let mut data = Vec::with_capacity(pixels * fdim);
    for chunk in body[..feature_bytes].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    let features = Tensor::new(pixels, fdim, data).map_err(|e| e.to_string())?;

    let mask = if mask_bytes > 0 {
        Some(
            body[feature_bytes..]
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    } else {
        None
    };
    Ok((
        FeatureMap {
            height,
            width,
            features,
        },
        mask,
    ))
}

/// Stores an arbitrary matrix (e.g. classifier weights) as a `rows x 1`
/// image with `cols` channels.
pub fn write_matrix(path: &Path, matrix: &Tensor) -> io::Result<()> {
    let map = FeatureMap {
        height: matrix.rows(),
        width: 1,
        features: matrix.clone(),
    };
    write_feature_map(path, &map, None)
}

pub fn read_matrix(path: &Path) -> io::Result<Tensor> {
    let (map, _) = read_feature_map(path)?;
    Ok(map.features)
}
