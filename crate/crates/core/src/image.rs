//! Image plumbing: bilinear rescaling, mirror padding to square multi-scale
//! inputs, the mapping between scaled and original coordinates, and binary
//! PPM/PGM files.
//!
//! Preparation for one stream rescales the longer image edge to the stream's
//! target side and fills the remaining pixels by mirroring the content, so
//! every stream sees a square input without distorting the aspect ratio.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio;
use crate::geometry::PixelBox;
use crate::tensor::Tensor;

/// How a prepared stream input maps back to original image coordinates:
/// `original = (scaled + 0.5) / zoom - 0.5`, with mirrored padding beyond
/// `resized_w` x `resized_h` mapping outside the image.
#[derive(Debug, Clone, Copy)]
pub struct ScaleInfo {
    /// Target side length of the square stream input.
    pub target: usize,
    /// Scaled pixels per original pixel (target / longer original edge).
    pub zoom: f64,
    pub resized_w: usize,
    pub resized_h: usize,
}

impl ScaleInfo {
    pub fn to_original(&self, scaled: f64) -> f64 {
        (scaled + 0.5) / self.zoom - 0.5
    }

    pub fn to_scaled(&self, original: f64) -> f64 {
        (original + 0.5) * self.zoom - 0.5
    }

    /// Maps a box given in scaled coordinates back to original coordinates,
    /// rounding to pixels.
    pub fn box_to_original(&self, b: &PixelBox) -> PixelBox {
        PixelBox::new(
            self.to_original(b.x1 as f64).round() as i64,
            self.to_original(b.y1 as f64).round() as i64,
            self.to_original(b.x2 as f64).round() as i64,
            self.to_original(b.y2 as f64).round() as i64,
        )
    }
}

#[inline]
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m < n {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Bilinear resample of a `[P, H, W]` tensor to `[P, out_h, out_w]` using
/// half-pixel centers. Resampling to the identical size reproduces the input
/// exactly.
pub fn bilinear_resize(src: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (planes, h, w) = src.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be nonzero".to_string()));
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Tensor::zeros(&[planes, out_h, out_w]);
    for p in 0..planes {
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let v00 = src.at3(p, y0, x0);
                let v01 = src.at3(p, y0, x1);
                let v10 = src.at3(p, y1, x0);
                let v11 = src.at3(p, y1, x1);
                let v = v00 * (1.0 - wy) * (1.0 - wx)
                    + v01 * (1.0 - wy) * wx
                    + v10 * wy * (1.0 - wx)
                    + v11 * wy * wx;
                out.set3(p, oy, ox, v);
            }
        }
    }
    Ok(out)
}

/// Prepares one stream input: rescale the longer edge to `target` and fill
/// the rest of the square by mirroring the content (edge row repeated).
pub fn prepare_scale(image: &Tensor, target: usize) -> Result<(Tensor, ScaleInfo)> {
    let (planes, h, w) = image.dims3()?;
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!("degenerate image {w}x{h}")));
    }
    if target < 2 {
        return Err(Error::invalid(format!("degenerate scale target {target}")));
    }
    let longer = h.max(w);
    let zoom = target as f64 / longer as f64;
    let (rh, rw) = if w >= h {
        (((h as f64 * zoom).round() as usize).clamp(1, target), target)
    } else {
        (target, ((w as f64 * zoom).round() as usize).clamp(1, target))
    };
    let resized = bilinear_resize(image, rh, rw)?;
    let mut out = Tensor::zeros(&[planes, target, target]);
    for p in 0..planes {
        for y in 0..target {
            let sy = mirror(y as isize, rh);
            let src_row = resized.row3(p, sy);
            let dst_row = out.row3_mut(p, y);
            for (x, d) in dst_row.iter_mut().enumerate() {
                *d = src_row[mirror(x as isize, rw)];
            }
        }
    }
    Ok((
        out,
        ScaleInfo {
            target,
            zoom,
            resized_w: rw,
            resized_h: rh,
        },
    ))
}

/// Prepares the K stream inputs for a multi-scale forward pass.
pub fn multiscale_prepare(image: &Tensor, scales: &[usize]) -> Result<Vec<(Tensor, ScaleInfo)>> {
    if scales.is_empty() {
        return Err(Error::invalid("scale list must be non-empty".to_string()));
    }
    scales.iter().map(|&s| prepare_scale(image, s)).collect()
}

/// Centers [0, 1] pixel values to [-1, 1], the network input convention.
pub fn center_pixels(image: &Tensor) -> Tensor {
    let data = image.data().iter().map(|&v| 2.0 * v - 1.0).collect();
    Tensor::from_vec(image.shape(), data).unwrap()
}

/// Writes a `[3, H, W]` tensor of values in [0, 1] as binary PPM (P6).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (planes, h, w) = image.dims3()?;
    if planes != 3 {
        return Err(Error::shape(format!("ppm wants 3 planes, got {planes}")));
    }
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for p in 0..3 {
                bytes.push((image.at3(p, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    fsio::write_atomic(path, &bytes)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("truncated ppm header".to_string()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).to_string())
    };
    if token()? != "P6" {
        return Err(Error::Parse("not a binary ppm (P6) file".to_string()));
    }
    let w: usize = token()?.parse().map_err(|_| Error::Parse("bad ppm width".into()))?;
    let h: usize = token()?.parse().map_err(|_| Error::Parse("bad ppm height".into()))?;
    let maxval: usize = token()?.parse().map_err(|_| Error::Parse("bad ppm maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Parse(format!("unsupported ppm maxval {maxval}")));
    }
    let data_start = pos + 1; // single whitespace after maxval
    let need = w * h * 3;
    if bytes.len() < data_start + need {
        return Err(Error::Parse("truncated ppm pixel data".to_string()));
    }
    let mut out = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for p in 0..3 {
                let v = bytes[data_start + (y * w + x) * 3 + p];
                out.set3(p, y, x, v as f64 / 255.0);
            }
        }
    }
    Ok(out)
}

/// Writes a `[H, W]`-shaped grayscale tensor of values in [0, 255] as binary
/// PGM (P5).
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    let (h, w) = match shape {
        &[h, w] => (h, w),
        &[1, h, w] => (h, w),
        other => return Err(Error::shape(format!("pgm wants a 2-d tensor, got {other:?}"))),
    };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in image.data() {
        bytes.push(v.clamp(0.0, 255.0).round() as u8);
    }
    let _ = (h, w);
    fsio::write_atomic(path, &bytes)
}
