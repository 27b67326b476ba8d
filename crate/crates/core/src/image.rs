//! Float images and binary PPM/PGM output.

use std::io::Write;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("writing {path}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{format} needs {expected} channel(s), image has {actual}")]
    Channels {
        format: &'static str,
        expected: usize,
        actual: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PnmFormat {
    /// P6, RGB.
    Ppm,
    /// P5, grayscale.
    Pgm,
}

/// Row-major, channel-interleaved image with values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Grayscale image of a map normalized by its maximum (all-zero stays black).
    pub fn heatmap(values: &[f64], width: usize, height: usize) -> Self {
        let peak = values.iter().cloned().fold(0.0f64, f64::max);
        let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
        Self {
            width,
            height,
            channels: 1,
            data: values.iter().map(|v| (v * scale).max(0.0)).collect(),
        }
    }

    /// Encodes as binary PNM, maxval 255, values clamped to [0, 1] and rounded half-up.
    pub fn encode_pnm(&self, format: PnmFormat) -> Result<Vec<u8>, ImageError> {
        let (magic, expected, name) = match format {
            PnmFormat::Ppm => ("P6", 3, "PPM"),
            PnmFormat::Pgm => ("P5", 1, "PGM"),
        };
        if self.channels != expected {
            return Err(ImageError::Channels {
                format: name,
                expected,
                actual: self.channels,
            });
        }
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| quantize(v)));
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>, format: PnmFormat) -> Result<(), ImageError> {
        let path = path.as_ref();
        let bytes = self.encode_pnm(format)?;
        let io = |source| ImageError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut file = std::fs::File::create(path).map_err(io)?;
        file.write_all(&bytes).map_err(io)
    }
}

/// `[0, 1] → 0..=255`, rounding half up.
pub fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

pub fn write_image(image: &Image, path: impl AsRef<Path>, format: PnmFormat) -> Result<(), ImageError> {
    image.write(path, format)
}
