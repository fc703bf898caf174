//! Dense floating-point images plus the binary PPM/PGM codecs used for
//! renders and masks.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major image with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
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

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub(crate) fn check_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Box-filter downsample by an integer factor per axis.
    pub fn downsample_area(&self, factor: usize) -> Result<Image> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} not divisible by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = Image::new(w, h, self.channels);
        let norm = 1.0 / (factor * factor) as f64;
        for y in 0..self.height {
            for x in 0..self.width {
                let src = self.pixel(x, y).to_vec();
                let dst = out.pixel_mut(x / factor, y / factor);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s * norm;
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`Image::downsample_area`]: spreads each coarse value
    /// uniformly over its footprint, scaled by the box-filter weight.
    pub fn downsample_adjoint(&self, factor: usize) -> Image {
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = Image::new(self.width * factor, self.height * factor, self.channels);
        for y in 0..out.height {
            for x in 0..out.width {
                let src = self.pixel(x / factor, y / factor).to_vec();
                for (d, s) in out.pixel_mut(x, y).iter_mut().zip(src) {
                    *d = s * norm;
                }
            }
        }
        out
    }

    /// Binary PPM (P6) for 3-channel images, PGM (P5) for 1-channel.
    pub fn to_netpbm(&self) -> Result<Vec<u8>> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => {
                return Err(Error::Unsupported(format!(
                    "netpbm export of {c}-channel image"
                )))
            }
        };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| quantize(v)));
        Ok(out)
    }

    pub fn write_netpbm(&self, path: &Path) -> Result<()> {
        let bytes = self.to_netpbm()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn from_netpbm(bytes: &[u8]) -> Result<Image> {
        let mut tokens = Vec::with_capacity(4);
        let mut pos = 0;
        while tokens.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format("netpbm", "truncated header"));
            }
            tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let channels = match tokens[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(Error::format("netpbm", format!("unsupported magic {other}"))),
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::format("netpbm", format!("bad header field {s:?}")))
        };
        let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
        if maxval != 255 {
            return Err(Error::format("netpbm", "only 8-bit maxval supported"));
        }
        let n = width * height * channels;
        let raster = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::format("netpbm", "truncated raster"))?;
        let data = raster.iter().map(|&b| b as f64 / 255.0).collect();
        Image::from_vec(width, height, channels, data)
    }

    pub fn read_netpbm(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_netpbm(&bytes)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Intersection-over-union of two binary masks (`> 0.5` is foreground).
/// Two empty masks have IoU 1.
pub fn mask_iou(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b, "mask iou")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x > 0.5, y > 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn netpbm_header_and_roundtrip() {
        let img = Image::from_vec(2, 1, 3, vec![1.0, 0.0, 0.5, 0.2, 0.4, 1.2]).unwrap();
        let bytes = img.to_netpbm().unwrap();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&bytes[11..], &[255, 0, 128, 51, 102, 255]);
        let back = Image::from_netpbm(&bytes).unwrap();
        assert!(back.max_abs_diff(&img.map_clamped()) < 0.5 / 255.0 + 1e-12);
    }

    impl Image {
        fn map_clamped(&self) -> Image {
            let data = self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
            Image::from_vec(self.width, self.height, self.channels, data).unwrap()
        }
    }

    #[test]
    fn downsample_adjoint_is_transpose() {
        let fine = Image::from_vec(4, 2, 1, (0..8).map(|v| v as f64).collect()).unwrap();
        let coarse_g = Image::from_vec(2, 1, 1, vec![0.3, -1.7]).unwrap();
        let lhs: f64 = fine
            .downsample_area(2)
            .unwrap()
            .data()
            .iter()
            .zip(coarse_g.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = fine
            .data()
            .iter()
            .zip(coarse_g.downsample_adjoint(2).data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn iou_conventions() {
        let empty = Image::new(3, 3, 1);
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 1.0);
        let mut a = Image::new(3, 3, 1);
        a.data_mut()[0] = 1.0;
        a.data_mut()[1] = 1.0;
        let mut b = Image::new(3, 3, 1);
        b.data_mut()[1] = 1.0;
        assert!((mask_iou(&a, &b).unwrap() - 0.5).abs() < 1e-15);
    }
}
