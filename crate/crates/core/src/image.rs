//! Single-channel images in `[0, 1]` and their 8-bit PGM (P5) encoding.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::dim(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::arg(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Image {
            width,
            height,
            pixels: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// `[1, h, w]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![1, self.height, self.width], self.pixels.clone())
    }

    /// Stacks images into a `[batch, 1, h, w]` tensor.
    pub fn batch(images: &[&Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::arg("empty image batch"))?;
        let (w, h) = (first.width, first.height);
        let mut data = Vec::with_capacity(images.len() * w * h);
        for im in images {
            if (im.width, im.height) != (w, h) {
                return Err(Error::dim("images in a batch must share a size"));
            }
            data.extend_from_slice(&im.pixels);
        }
        Ok(Tensor::from_parts(vec![images.len(), 1, h, w], data))
    }

    /// Builds an image from decoder output; values are clamped into `[0, 1]`.
    pub fn from_slice(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        Image::new(width, height, values.iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Per-pixel quantisation used by the PGM codec.
    pub fn quantized(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|p| (p * 255.0).round() / 255.0).collect(),
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
        out
    }

    /// Decodes a binary 8-bit PGM; intensities are mapped to `[0, 1]` by /255.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let ctx = "pgm";
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format(ctx, "truncated header"));
            }
            fields.push(&bytes[start..pos]);
        }
        if fields[0] != b"P5" {
            return Err(Error::format(ctx, "not a binary PGM (P5)"));
        }
        let num = |f: &[u8], what: &str| -> Result<usize> {
            std::str::from_utf8(f)
                .ok()
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| Error::format(ctx, format!("bad {what}")))
        };
        let width = num(fields[1], "width")?;
        let height = num(fields[2], "height")?;
        let maxval = num(fields[3], "maxval")?;
        if maxval != 255 {
            return Err(Error::format(
                ctx,
                format!("only maxval 255 is supported, got {maxval}"),
            ));
        }
        if width == 0 || height == 0 || width > 4096 || height > 4096 {
            return Err(Error::format(ctx, format!("unsupported size {width}x{height}")));
        }
        // exactly one whitespace byte separates the header from the raster
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::format(ctx, "missing raster"));
        }
        pos += 1;
        let raster = &bytes[pos..];
        if raster.len() != width * height {
            return Err(Error::format(
                ctx,
                format!("raster has {} bytes, expected {}", raster.len(), width * height),
            ));
        }
        Ok(Image {
            width,
            height,
            pixels: raster.iter().map(|&b| f64::from(b) / 255.0).collect(),
        })
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        crate::io::write_bytes(path, &self.to_pgm())
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        Self::from_pgm(&crate::io::read_bytes(path)?).map_err(|e| match e {
            Error::Format { message, .. } => Error::format(path.display().to_string(), message),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_of_quantized_image() {
        let px: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        let im = Image::new(4, 3, px).unwrap().quantized();
        let bytes = im.to_pgm();
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        assert_eq!(Image::from_pgm(&bytes).unwrap(), im);
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let mut bytes = b"P5 # comment\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let im = Image::from_pgm(&bytes).unwrap();
        assert_eq!(im.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn malformed_pgm_is_rejected() {
        for bad in [
            &b"P2\n1 1\n255\n\x00"[..],
            b"P5\n2 2\n255\n\x00",
            b"P5\n1 1\n65535\n\x00\x00",
            b"P5\n1",
            b"",
        ] {
            assert!(matches!(Image::from_pgm(bad), Err(Error::Format { .. })), "{bad:?}");
        }
    }

    #[test]
    fn out_of_range_pixels_rejected() {
        assert!(Image::new(1, 1, vec![1.5]).is_err());
        assert!(Image::new(2, 1, vec![0.5]).is_err());
    }
}
