//! Persistence for feature tensors, images, masks and selection records.
//!
//! Tensors travel as NPY v1.0 (`<f4`, C order), label maps as NPY `|u1`,
//! images as binary PPM/PGM, part names and selection records as JSON.

mod masks;
mod npy;
mod pnm;
mod record;

use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use masks::{load_mask_set, PartMaskSet};
pub use npy::{encode_header, read_npy, write_npy, Dtype, NpyArray, NpyData};
pub use pnm::{decode_pnm, encode_ppm, write_ppm, ImageRgb};
pub use record::{PartSelection, SelectionRecord, SourceSelection};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Dino,
    Sd,
    Fused,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Dino => "dino",
            Source::Sd => "sd",
            Source::Fused => "fused",
        })
    }
}

/// Dense `height x width x channels` feature tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub source: Source,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        source: Source,
        data: Vec<f32>,
    ) -> Result<Self> {
        if height * width * channels != data.len() {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self {
            height,
            width,
            channels,
            source,
            data,
        })
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn pixel(&self, i: usize) -> &[f32] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn from_parts_unchecked(
        height: usize,
        width: usize,
        channels: usize,
        source: Source,
        data: Vec<f32>,
    ) -> Self {
        debug_assert_eq!(height * width * channels, data.len());
        Self {
            height,
            width,
            channels,
            source,
            data,
        }
    }
}

/// A single real-valued `height x width` grid (score plane, confidence map).
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::Shape(format!(
                "{height}x{width} plane needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

pub(crate) fn check_finite(data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Validation(format!(
            "non-finite value {} at flat index {i}",
            data[i]
        ))),
        None => Ok(()),
    }
}

pub fn read_npy_file(path: &Path) -> Result<NpyArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_npy(&mut bytes.as_slice()).map_err(|e| e.at_path(path))
}

pub fn write_npy_file(path: &Path, array: &NpyArray) -> Result<()> {
    let mut bytes = Vec::new();
    write_npy(&mut bytes, array).map_err(|e| Error::io(path, e))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an `f32` array of any rank, rejecting non-finite values.
pub fn read_f32_array(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let (shape, data) = read_npy_file(path)?
        .into_f32()
        .map_err(|e| e.at_path(path))?;
    check_finite(&data).map_err(|e| e.at_path(path))?;
    Ok((shape, data))
}

pub fn write_f32_array(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let array = NpyArray::new(shape.to_vec(), NpyData::F32(data.to_vec()))?;
    write_npy_file(path, &array)
}

pub fn read_u8_array(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    read_npy_file(path)?.into_u8().map_err(|e| e.at_path(path))
}

pub fn write_u8_array(path: &Path, shape: &[usize], data: &[u8]) -> Result<()> {
    let array = NpyArray::new(shape.to_vec(), NpyData::U8(data.to_vec()))?;
    write_npy_file(path, &array)
}

/// Reads a rank-3 `(H', W', D)` feature tensor tagged with `source`.
pub fn read_tensor(path: &Path, source: Source) -> Result<FeatureMap> {
    let (shape, data) = read_npy_file(path)?
        .into_f32()
        .map_err(|e| e.at_path(path))?;
    let [h, w, d] = shape[..] else {
        return Err(Error::Shape(format!(
            "{}: feature tensor must be rank 3, found shape {shape:?}",
            path.display()
        )));
    };
    FeatureMap::new(h, w, d, source, data).map_err(|e| e.at_path(path))
}

pub fn write_tensor(map: &FeatureMap, path: &Path) -> Result<()> {
    write_f32_array(path, &[map.height, map.width, map.channels], map.data())
}

/// Rank-2 counterpart of [`read_tensor`] for masks and score planes.
pub fn read_plane(path: &Path) -> Result<Plane> {
    let (shape, data) = read_f32_array(path)?;
    let [h, w] = shape[..] else {
        return Err(Error::Shape(format!(
            "{}: plane must be rank 2, found shape {shape:?}",
            path.display()
        )));
    };
    Plane::new(h, w, data)
}

pub fn write_plane(plane: &Plane, path: &Path) -> Result<()> {
    write_f32_array(path, &[plane.height, plane.width], &plane.data)
}

pub fn read_image(path: &Path) -> Result<ImageRgb> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| e.at_path(path))
}

pub fn write_image(image: &ImageRgb, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_selection(path: &Path) -> Result<SelectionRecord> {
    let record: SelectionRecord = read_json(path)?;
    record.validate().map_err(|e| e.at_path(path))?;
    Ok(record)
}

pub fn write_selection(record: &SelectionRecord, path: &Path) -> Result<()> {
    fs::write(path, record.to_json()).map_err(|e| Error::io(path, e))
}
