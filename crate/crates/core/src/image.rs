//! RGB images in channel-major layout, PPM (P6) IO and bilinear crop-resize.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHANNELS: usize = 3;

/// `3 × height × width` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != CHANNELS * height * width || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "image {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    pub fn clamp(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mean_intensity(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// `[3, H, W]` tensor view of the pixels.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![CHANNELS, self.height, self.width], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let &[CHANNELS, h, w] = t.shape() else {
            return Err(Error::Shape(format!("expected [3,H,W] tensor, got {:?}", t.shape())));
        };
        Self::new(h, w, t.data().to_vec())
    }

    /// One channel as an `H × W` tensor.
    pub fn channel(&self, c: usize) -> Tensor {
        let n = self.height * self.width;
        Tensor::from_parts(vec![self.height, self.width], self.data[c * n..(c + 1) * n].to_vec())
    }

    /// Stack images into a `[n, 3, H, W]` batch.
    pub fn batch(images: &[&Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if (im.height, im.width) != (first.height, first.width) {
                return Err(Error::Shape("images in a batch must share a size".into()));
            }
            data.extend_from_slice(&im.data);
        }
        Tensor::new(&[images.len(), CHANNELS, first.height, first.width], data)
    }

    /// Bilinear resample of the square window `[top, top+side) × [left, left+side)`
    /// onto an `out_h × out_w` grid (pixel-centre alignment).
    pub fn crop_resize(&self, top: f64, left: f64, side: f64, out_h: usize, out_w: usize) -> Image {
        let mut out = vec![0.0; CHANNELS * out_h * out_w];
        let sample = |c: usize, y: f64, x: f64| -> f64 {
            let y = y.clamp(0.0, (self.height - 1) as f64);
            let x = x.clamp(0.0, (self.width - 1) as f64);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
            let bot = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
            top * (1.0 - fy) + bot * fy
        };
        let (sy, sx) = (side / out_h as f64, side / out_w as f64);
        for c in 0..CHANNELS {
            for oy in 0..out_h {
                let y = top + (oy as f64 + 0.5) * sy - 0.5;
                for ox in 0..out_w {
                    let x = left + (ox as f64 + 0.5) * sx - 0.5;
                    out[(c * out_h + oy) * out_w + ox] = sample(c, y, x);
                }
            }
        }
        Image { height: out_h, width: out_w, data: out }
    }

    /// Binary PPM (P6), 8 bits per channel.
    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..CHANNELS {
                    out.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_ppm_bytes())?;
        Ok(())
    }

    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Parse { path: "<ppm>".into(), line: 0, message: m.to_string() };
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
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
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("not a P6 file"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (w, h, max) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if max != 255 {
            return Err(bad("only 8-bit PPM is supported"));
        }
        pos += 1;
        let body = &bytes[pos.min(bytes.len())..];
        if body.len() != w * h * CHANNELS {
            return Err(bad("pixel data length mismatch"));
        }
        let mut img = Image::filled(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    img.set(c, y, x, body[(y * w + x) * CHANNELS + c] as f64 / 255.0);
                }
            }
        }
        Ok(img)
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_ppm_bytes(&bytes).map_err(|e| match e {
            Error::Parse { message, .. } => {
                Error::Parse { path: path.display().to_string(), line: 0, message }
            }
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(side: usize) -> Image {
        let mut img = Image::filled(side, side, [0.0; 3]);
        for y in 0..side {
            for x in 0..side {
                img.set_pixel(y, x, [x as f64 / side as f64, y as f64 / side as f64, 0.5]);
            }
        }
        img
    }

    #[test]
    fn ppm_roundtrip_is_exact_on_8bit_values() {
        let mut img = gradient_image(8);
        for v in img.data.iter_mut() {
            *v = (*v * 255.0).round() / 255.0;
        }
        let back = Image::from_ppm_bytes(&img.to_ppm_bytes()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn full_window_resize_is_identity() {
        let img = gradient_image(12);
        let out = img.crop_resize(0.0, 0.0, 12.0, 12, 12);
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_preserves_constant_images() {
        let img = Image::filled(16, 16, [0.2, 0.4, 0.6]);
        let out = img.crop_resize(3.0, 5.0, 4.5, 16, 16);
        assert!(out.data().chunks(256).zip([0.2, 0.4, 0.6]).all(|(ch, v)| ch.iter().all(|x| (x - v).abs() < 1e-12)));
    }
}
