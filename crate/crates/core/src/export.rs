//! Attention-map export: 8-bit PGM images plus a JSON sidecar.
//!
//! All maps written in one call share a single min-max normalization, so
//! intensities are comparable across files. The sidecar records the raw
//! range: `value = min + byte / 255 · (max − min)`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AmdError, Result};
use crate::interpreter::AamStack;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub min: f64,
    pub max: f64,
    pub height: usize,
    pub width: usize,
    pub files: Vec<String>,
}

/// Binary PGM (P5), 8 bits per pixel.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(AmdError::Dimension(format!(
            "{} pixels for a {}×{} image",
            pixels.len(),
            width,
            height
        )));
    }
    let mut buf = format!("P5\n{} {}\n255\n", width, height).into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf)?;
    Ok(())
}

/// Maps a value into `0..=255` given the shared range.
pub fn quantize(v: f64, min: f64, max: f64) -> u8 {
    if max > min {
        ((v - min) / (max - min) * 255.0).round().clamp(0.0, 255.0) as u8
    } else {
        0
    }
}

/// Writes `name.pgm` for every `(name, map)` into `dir` plus `sidecar` JSON.
pub fn export_maps(dir: &Path, maps: &[(String, Vec<f64>)], height: usize, width: usize, sidecar: &str) -> Result<MapSidecar> {
    fs::create_dir_all(dir)?;
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, m) in maps {
        if m.len() != height * width {
            return Err(AmdError::Dimension(format!("map of {} values for {}×{}", m.len(), height, width)));
        }
        for &v in m {
            min = min.min(v);
            max = max.max(v);
        }
    }
    if maps.is_empty() {
        (min, max) = (0.0, 0.0);
    }
    let mut files = Vec::with_capacity(maps.len());
    for (name, m) in maps {
        let file = format!("{}.pgm", name);
        let px: Vec<u8> = m.iter().map(|&v| quantize(v, min, max)).collect();
        write_pgm(&dir.join(&file), width, height, &px)?;
        files.push(file);
    }
    let side = MapSidecar {
        min,
        max,
        height,
        width,
        files,
    };
    let mut json = serde_json::to_string_pretty(&side)?;
    json.push('\n');
    fs::write(dir.join(sidecar), json)?;
    Ok(side)
}

/// Exports the selected channels of an AAM stack, normalized over the whole stack.
pub fn export_aams<T: Real>(
    dir: &Path,
    prefix: &str,
    stack: &AamStack<T>,
    names: &[String],
    channels: &[usize],
) -> Result<(MapSidecar, PathBuf)> {
    let (h, w) = stack.dims();
    let data: Vec<f64> = stack.maps.data().iter().map(|v| v.as_f64()).collect();
    let (min, max) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(channels.len());
    for &k in channels {
        let name = names
            .get(k)
            .ok_or_else(|| AmdError::Input(format!("no attribute name for channel {}", k)))?;
        let file = format!("{}_{}.pgm", prefix, name);
        let px: Vec<u8> = data[k * h * w..(k + 1) * h * w].iter().map(|&v| quantize(v, min, max)).collect();
        write_pgm(&dir.join(&file), w, h, &px)?;
        files.push(file);
    }
    let side = MapSidecar {
        min,
        max,
        height: h,
        width: w,
        files,
    };
    let path = dir.join(format!("{}.json", prefix));
    let mut json = serde_json::to_string_pretty(&side)?;
    json.push('\n');
    fs::write(&path, json)?;
    Ok((side, path))
}
