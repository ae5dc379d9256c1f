//! On-disk formats.
//!
//! Tensors are stored as a flat little-endian buffer `<name>.bin` next to a
//! JSON sidecar `<name>.json` holding `{dtype, shape, layout}`. 2D images can
//! also be read from PGM (8 or 16 bit) and PNG.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const LAYOUT_ROW_MAJOR: &str = "row-major";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub layout: String,
}

/// A tensor read from disk, in whichever precision it was stored.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        match self {
            AnyTensor::F32(t) => t.clone(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.clone(),
        }
    }
}

/// Resolves `path` (with or without `.bin`/`.json`) to the two file paths.
pub fn raw_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("bin") | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("bin"), with("json"))
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> (Vec<u8>, String) {
    let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(&mut bytes);
    }
    let header = TensorHeader {
        dtype: T::DTYPE,
        shape: t.shape().to_vec(),
        layout: LAYOUT_ROW_MAJOR.to_string(),
    };
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    (bytes, json)
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let (bin, json) = raw_paths(path);
    let (bytes, header) = encode_tensor(t);
    if let Some(dir) = bin.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    fs::write(&json, header + "\n").map_err(|e| Error::io(&json, e))?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<TensorHeader> {
    let (_, json) = raw_paths(path);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let header: TensorHeader = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("{}: bad tensor header: {e}", json.display())))?;
    if header.layout != LAYOUT_ROW_MAJOR {
        return Err(Error::data(format!(
            "{}: unsupported layout {:?}",
            json.display(),
            header.layout
        )));
    }
    Ok(header)
}

fn decode<T: Scalar>(shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor<T>> {
    let width = T::DTYPE.size();
    let data = bytes.chunks_exact(width).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn read_tensor(path: &Path) -> Result<AnyTensor> {
    let header = read_header(path)?;
    let (bin, _) = raw_paths(path);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let expected = header.shape.iter().product::<usize>() * header.dtype.size();
    if bytes.len() != expected {
        return Err(Error::data(format!(
            "{}: expected {expected} bytes for {:?} {:?}, found {}",
            bin.display(),
            header.dtype,
            header.shape,
            bytes.len()
        )));
    }
    let t = match header.dtype {
        DType::F32 => AnyTensor::F32(decode(header.shape, &bytes)?),
        DType::F64 => AnyTensor::F64(decode(header.shape, &bytes)?),
    };
    Ok(t)
}

pub fn is_image_path(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("pgm") | Some("png")
    )
}

/// Reads the `(H, W)` of a PGM/PNG without decoding pixel data.
pub fn image_dims(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    Ok((h as usize, w as usize))
}

/// Loads a grayscale PGM or PNG as an `H×W` tensor of raw gray levels
/// (0..=255 for 8-bit, 0..=65535 for 16-bit).
pub fn read_gray_image(path: &Path) -> Result<Tensor<f32>> {
    let bad = |e: image::ImageError| Error::data(format!("{}: {e}", path.display()));
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(bad)?;
    let color = img.color();
    let deep = color.bits_per_pixel() / u16::from(color.channel_count()) > 8;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = if deep {
        img.into_luma16().into_raw().into_iter().map(f32::from).collect()
    } else {
        img.into_luma8().into_raw().into_iter().map(f32::from).collect()
    };
    Tensor::new(vec![h, w], data)
}

/// Writes an 8-bit binary PGM (`P5`). Values are rounded and clamped to 0..=255.
pub fn write_pgm8(path: &Path, img: &Tensor<f32>) -> Result<()> {
    img.expect_rank(2, "PGM image")?;
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(img.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a 16-bit binary PGM (`P5`, big-endian samples, maxval 65535).
pub fn write_pgm16(path: &Path, img: &Tensor<f32>) -> Result<()> {
    img.expect_rank(2, "PGM image")?;
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut bytes = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in img.data() {
        let s = v.round().clamp(0.0, 65535.0) as u16;
        bytes.extend_from_slice(&s.to_be_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
