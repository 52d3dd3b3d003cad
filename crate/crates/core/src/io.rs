//! Grayscale image files: binary PGM and PNG (8 or 16 bit), and `.npy`
//! float arrays for lossless intermediate results.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};
use npyz::WriterBuilder;

use crate::error::{Error, Result};
use crate::image::ImageGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn max_value(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default()
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    match extension(path).as_str() {
        "png" => Ok(ImageFormat::Png),
        "pgm" | "pnm" => Ok(ImageFormat::Pnm),
        other => Err(Error::Decode(format!("unsupported image extension {other:?}"))),
    }
}

/// Reads a grayscale image. 8-bit files keep their `[0, 255]` range and
/// 16-bit files their `[0, 65535]` range; `.npy` values are read as is.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    if extension(path) == "npy" {
        return decode_npy(&std::fs::read(path)?);
    }
    let format = format_for(path)?;
    let bytes = std::fs::read(path)?;
    decode_image(&bytes, format)
}

pub fn decode_image(bytes: &[u8], format: ImageFormat) -> Result<ImageGrid> {
    let img = image::load_from_memory_with_format(bytes, format).map_err(|e| Error::Decode(e.to_string()))?;
    let (cols, rows) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f64> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(f64::from).collect(),
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(f64::from).collect(),
        other => {
            return Err(Error::Decode(format!(
                "expected a single-channel grayscale image, found {:?}",
                other.color()
            )))
        }
    };
    ImageGrid::new(rows, cols, pixels)
}

/// Two-dimensional `f8` or `f4` array in C order.
pub fn decode_npy(bytes: &[u8]) -> Result<ImageGrid> {
    let npy = npyz::NpyFile::new(bytes).map_err(|e| Error::Decode(e.to_string()))?;
    let shape = npy.shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Decode(format!("expected a 2-D array, found shape {shape:?}")));
    }
    if npy.order() != npyz::Order::C {
        return Err(Error::Decode("Fortran-order arrays are not supported".into()));
    }
    let pixels = match npy.dtype() {
        npyz::DType::Plain(t) if t.type_char() == npyz::TypeChar::Float && t.size_field() == 4 => npy
            .into_vec::<f32>()
            .map(|v| v.into_iter().map(f64::from).collect()),
        _ => npy.into_vec::<f64>(),
    }
    .map_err(|e| Error::Decode(e.to_string()))?;
    ImageGrid::new(shape[0] as usize, shape[1] as usize, pixels)
}

pub fn encode_npy(img: &ImageGrid) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let shape = [img.rows() as u64, img.cols() as u64];
    let mut w = npyz::WriteOptions::new()
        .default_dtype()
        .shape(&shape)
        .writer(&mut out)
        .begin_nd()?;
    w.extend(img.as_slice().iter().copied())?;
    w.finish()?;
    Ok(out)
}

/// Writes an 8-bit image; values are rounded and clamped to `[0, 255]`.
/// A `.npy` path stores the values unchanged as `f8`.
pub fn save_image(img: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    save_image_with_depth(img, path, BitDepth::Eight)
}

pub fn save_image_with_depth(img: &ImageGrid, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    if extension(path) == "npy" {
        std::fs::write(path, encode_npy(img)?)?;
        return Ok(());
    }
    let format = format_for(path)?;
    let (w, h) = (img.cols() as u32, img.rows() as u32);
    let quantize = |v: f64| v.round().clamp(0.0, depth.max_value());
    let dynimg = match depth {
        BitDepth::Eight => {
            let raw: Vec<u8> = img.as_slice().iter().map(|&v| quantize(v) as u8).collect();
            DynamicImage::ImageLuma8(ImageBuffer::<Luma<u8>, _>::from_raw(w, h, raw).expect("buffer size"))
        }
        BitDepth::Sixteen => {
            let raw: Vec<u16> = img.as_slice().iter().map(|&v| quantize(v) as u16).collect();
            DynamicImage::ImageLuma16(ImageBuffer::<Luma<u16>, _>::from_raw(w, h, raw).expect("buffer size"))
        }
    };
    dynimg
        .save_with_format(path, format)
        .map_err(|e| Error::Decode(e.to_string()))
}
