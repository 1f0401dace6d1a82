//! 8-bit PNG / binary PPM input and output, colour conversion and corpus scanning.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage, ImageFormat, ImageReader};
use log::warn;

use crate::error::{Result, SciError};
use crate::tensor::{Real, Tensor};

/// Decoded raster with interleaved channels and values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    /// Row-major, channel-interleaved samples.
    pub data: Vec<f32>,
    pub source: Option<PathBuf>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(SciError::Input(format!("{channels} channels (expected 1 or 3)")));
        }
        if data.len() != width * height * channels {
            return Err(SciError::Input(format!(
                "{} samples for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(SciError::Input(format!("sample {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
            source: None,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Replicates a gray image into three channels.
    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        ImageBuffer {
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            channels: 3,
            ..self.clone()
        }
    }

    /// Luminance plane: BT.601 `Y` for RGB, the samples themselves for gray.
    pub fn luminance(&self) -> Vec<f64> {
        match self.channels {
            3 => self
                .data
                .chunks_exact(3)
                .map(|p| rgb_to_yuv_pixel([p[0] as f64, p[1] as f64, p[2] as f64])[0])
                .collect(),
            _ => self.data.iter().map(|&v| v as f64).collect(),
        }
    }

    /// `1 × c × h × w` planar tensor.
    pub fn to_tensor<R: Real>(&self) -> Tensor<R> {
        let (w, c) = (self.width, self.channels);
        Tensor::from_fn([1, c, self.height, w], |[_, ch, y, x]| {
            R::from_f64(self.data[(y * w + x) * c + ch] as f64)
        })
    }

    /// Builds an image from batch item `n` of a tensor, clamping into `[0, 1]`.
    pub fn from_tensor<R: Real>(tensor: &Tensor<R>, n: usize) -> Result<ImageBuffer> {
        let [_, c, h, w] = tensor.shape();
        let mut data = Vec::with_capacity(c * h * w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = tensor.get([n, ch, y, x]).as_f64() as f32;
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        ImageBuffer::new(w, h, c, data)
    }

    /// Copies the `width × height` window with top-left corner `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<ImageBuffer> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(SciError::Input(format!(
                "crop {width}x{height}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(width * height * c);
        for y in y0..y0 + height {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(ImageBuffer {
            width,
            height,
            channels: c,
            data,
            source: self.source.clone(),
        })
    }
}

/// BT.601 full-range RGB → YUV.
#[inline]
pub fn rgb_to_yuv_pixel([r, g, b]: [f64; 3]) -> [f64; 3] {
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    [y, 0.5 * (b - y) / 0.886, 0.5 * (r - y) / 0.701]
}

/// Inverse of [`rgb_to_yuv_pixel`].
#[inline]
pub fn yuv_to_rgb_pixel([y, u, v]: [f64; 3]) -> [f64; 3] {
    let r = y + v * 0.701 / 0.5;
    let b = y + u * 0.886 / 0.5;
    let g = (y - 0.299 * r - 0.114 * b) / 0.587;
    [r, g, b]
}

/// Converts an RGB buffer to YUV. The result holds signed chroma, so it is
/// built directly rather than through [`ImageBuffer::new`].
pub fn rgb_to_yuv(buffer: &ImageBuffer) -> Result<ImageBuffer> {
    if buffer.channels != 3 {
        return Err(SciError::Input(format!(
            "YUV conversion needs 3 channels, got {}",
            buffer.channels
        )));
    }
    let data = buffer
        .data
        .chunks_exact(3)
        .flat_map(|p| rgb_to_yuv_pixel([p[0] as f64, p[1] as f64, p[2] as f64]).map(|v| v as f32))
        .collect();
    Ok(ImageBuffer {
        data,
        ..buffer.clone()
    })
}

/// `round(v · 255)` with halves rounded up.
#[inline]
pub fn quantize(v: f32) -> u8 {
    ((v as f64) * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

#[inline]
pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

fn format_name(color: ColorType) -> String {
    format!("{color:?}")
}

/// Loads an 8-bit PNG (gray or RGB, alpha dropped) or a binary PPM.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let reader = ImageReader::open(path)?.with_guessed_format()?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        other => {
            return Err(SciError::UnsupportedFormat {
                path: path.to_owned(),
                format: other.map_or_else(|| "unknown".to_string(), |f| format!("{f:?}")),
            })
        }
    }
    let decoded = reader.decode()?;
    let (channels, bytes, width, height) = match decoded {
        DynamicImage::ImageLuma8(img) => (1, img.as_raw().clone(), img.width(), img.height()),
        DynamicImage::ImageLumaA8(img) => {
            let (w, h) = img.dimensions();
            (1, img.pixels().map(|p| p[0]).collect(), w, h)
        }
        DynamicImage::ImageRgb8(img) => (3, img.as_raw().clone(), img.width(), img.height()),
        DynamicImage::ImageRgba8(img) => {
            let (w, h) = img.dimensions();
            (3, img.pixels().flat_map(|p| [p[0], p[1], p[2]]).collect(), w, h)
        }
        other => {
            return Err(SciError::UnsupportedFormat {
                path: path.to_owned(),
                format: format_name(other.color()),
            })
        }
    };
    let mut buffer = ImageBuffer::new(
        width as usize,
        height as usize,
        channels,
        bytes.into_iter().map(dequantize).collect(),
    )?;
    buffer.source = Some(path.to_owned());
    Ok(buffer)
}

/// Loads an image and replicates gray to RGB.
pub fn load_rgb(path: &Path) -> Result<ImageBuffer> {
    load_image(path).map(|b| b.to_rgb())
}

fn is_ppm(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("ppm" | "pnm")
    )
}

/// Writes PNG, or binary PPM when the extension is `.ppm`/`.pnm`.
///
/// The file is written next to its destination and renamed into place.
pub fn save_image(buffer: &ImageBuffer, path: &Path) -> Result<()> {
    if buffer.data.len() != buffer.width * buffer.height * buffer.channels {
        return Err(SciError::Input("buffer length does not match its dimensions".into()));
    }
    if let Some(v) = buffer.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(SciError::Input(format!("sample {v} outside [0, 1]")));
    }
    let bytes: Vec<u8> = buffer.data.iter().map(|&v| quantize(v)).collect();
    let tmp = temp_sibling(path);
    let result = if is_ppm(path) {
        write_ppm(&tmp, buffer, &bytes)
    } else {
        let color = if buffer.channels == 3 {
            image::ExtendedColorType::Rgb8
        } else {
            image::ExtendedColorType::L8
        };
        image::save_buffer_with_format(
            &tmp,
            &bytes,
            buffer.width as u32,
            buffer.height as u32,
            color,
            ImageFormat::Png,
        )
        .map_err(SciError::from)
    };
    match result {
        Ok(()) => Ok(fs::rename(&tmp, path)?),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn write_ppm(path: &Path, buffer: &ImageBuffer, bytes: &[u8]) -> Result<()> {
    let rgb: Vec<u8> = if buffer.channels == 3 {
        bytes.to_vec()
    } else {
        bytes.iter().flat_map(|&b| [b, b, b]).collect()
    };
    let mut out = BufWriter::new(fs::File::create(path)?);
    write!(out, "P6\n{} {}\n255\n", buffer.width, buffer.height)?;
    out.write_all(&rgb)?;
    out.flush()?;
    Ok(())
}

pub(crate) fn temp_sibling(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp{}", std::process::id()))
}

/// Lists image files (`.png`, `.ppm`, `.pnm`) directly inside `dir`, sorted by
/// file name. Other files are skipped with a warning; subdirectories are ignored.
pub fn scan_corpus(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            continue;
        }
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        match ext.as_deref() {
            Some("png" | "ppm" | "pnm") => found.push(path),
            _ => warn!("skipping non-image file {}", path.display()),
        }
    }
    if found.is_empty() {
        return Err(SciError::EmptyCorpus(dir.to_owned()));
    }
    // byte-wise ordering of the file name, independent of locale and platform
    found.sort_by(|a, b| {
        a.file_name()
            .map(|n| n.as_encoded_bytes().to_vec())
            .cmp(&b.file_name().map(|n| n.as_encoded_bytes().to_vec()))
    });
    Ok(found)
}
