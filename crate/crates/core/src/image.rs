//! Planar images with values in `[0, 1]` and binary PPM/PGM I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Channel-major (CHW) image with pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::invalid(format!(
                "image dims {width}x{height}x{channels} invalid"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "image {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixel value outside [0, 1]"));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    /// Builds an image from double-precision planes, clamping into `[0, 1]`.
    pub fn from_planes_clamped(width: usize, height: usize, planes: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * planes.len());
        for p in planes {
            if p.len() != width * height {
                return Err(Error::invalid("plane size does not match image dims"));
            }
            data.extend(p.iter().map(|&v| v.clamp(0.0, 1.0) as f32));
        }
        Self::new(width, height, planes.len(), data)
    }

    /// Builds an image by clamping arbitrary single-precision values.
    pub(crate) fn from_clamped(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Self {
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Image {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_f64(&self, c: usize) -> Vec<f64> {
        self.plane(c).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Largest per-pixel difference; infinite when dims differ.
    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        if !self.same_dims(other) {
            return f32::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Mean over all pixels of one channel.
    pub fn channel_mean(&self, c: usize) -> f64 {
        let p = self.plane(c);
        p.iter().map(|&v| f64::from(v)).sum::<f64>() / p.len() as f64
    }

    /// Binary PNM encoding: P6 for three channels, P5 for one.
    pub fn to_pnm_bytes(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        let n = self.width * self.height;
        for i in 0..n {
            for c in 0..self.channels {
                let v = self.data[c * n + i];
                out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    pub fn from_pnm_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format("truncated PNM header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let channels = match token()?.as_str() {
            "P6" => 3,
            "P5" => 1,
            other => return Err(Error::format(format!("unsupported PNM magic {other:?}"))),
        };
        let num = |s: String| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::format(format!("bad PNM header field {s:?}")))
        };
        let width = num(token()?)?;
        let height = num(token()?)?;
        let maxval = num(token()?)?;
        if maxval == 0 || maxval > 255 {
            return Err(Error::format(format!("unsupported maxval {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let n = width * height;
        let raster = bytes
            .get(pos..pos + n * channels)
            .ok_or_else(|| Error::format("truncated PNM raster"))?;
        let mut data = vec![0.0f32; n * channels];
        for i in 0..n {
            for c in 0..channels {
                data[c * n + i] = f32::from(raster[i * channels + c]) / maxval as f32;
            }
        }
        Image::new(width, height, channels, data).map_err(|e| Error::format(e.to_string()))
    }

    pub fn write_pnm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pnm_bytes())?;
        Ok(())
    }

    pub fn read_pnm(path: &Path) -> Result<Self> {
        Self::from_pnm_bytes(&fs::read(path)?)
    }
}
