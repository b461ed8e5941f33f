//! RGB float images, PFM/PNG output and comparison metrics.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::Error;

/// Row-major RGB radiance, top row first.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, v: [f32; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Sub-image `[x0, x0+w) × [y0, y0+h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        let mut out = Self::new(w, h);
        for y in 0..h {
            for x in 0..w {
                out.set(x, y, self.get(x0 + x, y0 + y));
            }
        }
        out
    }

    /// Little-endian PFM (negative scale), bottom row first as the format requires.
    pub fn write_pfm(&self, path: &Path) -> Result<(), Error> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "PF\n{} {}\n-1.0\n", self.width, self.height)?;
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                for c in self.get(x, y) {
                    w.write_all(&c.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_pfm(path: &Path) -> Result<Self, Error> {
        let mut r = BufReader::new(File::open(path)?);
        let mut header = Vec::new();
        let mut line = String::new();
        while header.len() < 4 {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("truncated PFM header".into()));
            }
            header.extend(line.split_whitespace().map(str::to_owned));
        }
        let channels = match header[0].as_str() {
            "PF" => 3,
            "Pf" => 1,
            other => return Err(Error::Format(format!("not a PFM file ({other})"))),
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PFM size {s}")));
        let (width, height) = (parse(&header[1])?, parse(&header[2])?);
        let scale: f64 = header[3].parse().map_err(|_| Error::Format("bad PFM scale".into()))?;
        let mut raw = vec![0u8; width * height * channels * 4];
        r.read_exact(&mut raw).map_err(|_| Error::Format("truncated PFM data".into()))?;
        let mut img = Self::new(width, height);
        for (k, chunk) in raw.chunks_exact(4).enumerate() {
            let b: [u8; 4] = chunk.try_into().unwrap();
            let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            let p = k / channels;
            let (x, y) = (p % width, height - 1 - p / width);
            for c in 0..3 {
                if channels == 3 {
                    if c == k % 3 {
                        img.data[3 * (y * width + x) + c] = v;
                    }
                } else {
                    img.data[3 * (y * width + x) + c] = v;
                }
            }
        }
        Ok(img)
    }

    /// 8-bit sRGB PNG of `2^exposure · radiance`, clamped.
    pub fn write_png(&self, path: &Path, exposure: f64) -> Result<(), Error> {
        let scale = 2f64.powf(exposure);
        let bytes: Vec<u8> = self.data.iter().map(|&v| (srgb_encode(v as f64 * scale) * 255.0 + 0.5) as u8).collect();
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, image::ExtendedColorType::Rgb8).map_err(|e| Error::Format(e.to_string()))
    }
}

fn srgb_encode(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    if x <= 0.0031308 {
        12.92 * x
    } else {
        1.055 * x.powf(1.0 / 2.4) - 0.055
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageMetrics {
    pub mse: f64,
    pub relative_l1: f64,
}

/// MSE over channels and `mean|a−b| / (mean|b| + 1e-6)`.
pub fn image_metrics(a: &ImageBuffer, b: &ImageBuffer) -> Result<ImageMetrics, Error> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::DimMismatch(format!("{}×{} vs {}×{}", a.width, a.height, b.width, b.height)));
    }
    let n = a.data.len().max(1) as f64;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / n;
    Ok(ImageMetrics { mse, relative_l1: nbrdf_core::stats::relative_l1(&a.data, &b.data) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let mut a = ImageBuffer::new(3, 2);
        a.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32);
        let m = image_metrics(&a, &a).unwrap();
        assert_eq!((m.mse, m.relative_l1), (0.0, 0.0));
        let mut c = ImageBuffer::new(3, 2);
        c.data.fill(0.5);
        assert_eq!(image_metrics(&c, &ImageBuffer::new(3, 2)).unwrap().mse, 0.25);
        assert!(image_metrics(&a, &ImageBuffer::new(2, 3)).is_err());
    }

    #[test]
    fn pfm_round_trip() {
        let mut a = ImageBuffer::new(4, 3);
        a.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 0.5 - 3.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pfm");
        a.write_pfm(&p).unwrap();
        assert_eq!(ImageBuffer::read_pfm(&p).unwrap(), a);
        a.write_png(&dir.path().join("a.png"), 0.0).unwrap();
    }
}
