//! `ImageF32`: H×W×3 row-major f32 images in [0,1], plus PNG/PPM I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// An sRGB-encoded RGB image with 32-bit float samples in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF32 {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

pub const CHANNELS: usize = 3;

impl ImageF32 {
    /// Wrap a row-major interleaved RGB buffer. Rejects empty dimensions,
    /// length mismatches and out-of-range samples.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ImageTooSmall {
                op: "ImageF32::new",
                height,
                width,
            });
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::ShapeMismatch {
                op: "ImageF32::new",
                what: "buffer length",
                expected: (height * width * CHANNELS).to_string(),
                got: data.len().to_string(),
            });
        }
        for &v in &data {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange {
                    what: "pixel value".into(),
                    value: v as f64,
                    expected: "[0, 1]",
                });
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Same as `new` but without the per-sample range scan, for buffers the
    /// caller has already clamped.
    pub(crate) fn from_clamped(height: usize, width: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), height * width * CHANNELS);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * CHANNELS])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    data.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    /// Mean over all samples; with three equal-weight channels this is the
    /// mean of per-pixel channel averages.
    pub fn mean_luminance(&self) -> f64 {
        let sum: f64 = self.data.iter().map(|&v| v as f64).sum();
        sum / self.data.len() as f64
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        if y0 + height > self.height || x0 + width > self.width || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch {
                op: "crop",
                what: "crop window",
                expected: format!("within {}x{}", self.height, self.width),
                got: format!("{}x{} at ({}, {})", height, width, y0, x0),
            });
        }
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            let row = ((y0 + y) * self.width + x0) * CHANNELS;
            data.extend_from_slice(&self.data[row..row + width * CHANNELS]);
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Bilinear resize so the longest side equals `max_side`. Images already
    /// at or below the limit are returned unchanged.
    pub fn resize_max_side(&self, max_side: usize) -> Self {
        let longest = self.height.max(self.width);
        if longest <= max_side {
            return self.clone();
        }
        let scale = max_side as f64 / longest as f64;
        let out_h = ((self.height as f64 * scale).round() as usize).max(1);
        let out_w = ((self.width as f64 * scale).round() as usize).max(1);
        self.resize_bilinear(out_h, out_w)
    }

    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Self {
        let sy = self.height as f64 / out_h as f64;
        let sx = self.width as f64 / out_w as f64;
        let mut data = Vec::with_capacity(out_h * out_w * CHANNELS);
        for oy in 0..out_h {
            let src_y = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = src_y.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = src_y - y0 as f64;
            for ox in 0..out_w {
                let src_x = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = src_x.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = src_x - x0 as f64;
                for c in 0..CHANNELS {
                    let v00 = self.get(y0, x0, c) as f64;
                    let v01 = self.get(y0, x1, c) as f64;
                    let v10 = self.get(y1, x0, c) as f64;
                    let v11 = self.get(y1, x1, c) as f64;
                    let top = v00 + (v01 - v00) * fx;
                    let bottom = v10 + (v11 - v10) * fx;
                    let v = top + (bottom - top) * fy;
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        Self {
            height: out_h,
            width: out_w,
            data,
        }
    }

    /// Planar CHW copy for the tensor path.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0f32; CHANNELS * hw];
        for (i, px) in self.data.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                out[c * hw + i] = px[c];
            }
        }
        out
    }

    pub fn from_chw(height: usize, width: usize, chw: &[f32]) -> Result<Self> {
        let hw = height * width;
        if chw.len() != CHANNELS * hw {
            return Err(Error::ShapeMismatch {
                op: "from_chw",
                what: "buffer length",
                expected: (CHANNELS * hw).to_string(),
                got: chw.len().to_string(),
            });
        }
        let mut data = vec![0.0f32; chw.len()];
        for i in 0..hw {
            for c in 0..CHANNELS {
                data[i * CHANNELS + c] = chw[c * hw + i];
            }
        }
        Self::new(height, width, data)
    }

    /// Quantize to 8-bit RGB (round half up via `f32::round`).
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let data: Vec<f32> = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Self::new(height, width, data)
    }

    /// Round trip through 8-bit quantization, as written image files see it.
    pub fn quantized(&self) -> Self {
        let bytes = self.to_u8();
        Self::from_u8(self.height, self.width, &bytes).expect("quantized buffer is in range")
    }

    /// Decode an 8-bit RGB PNG or binary PPM file; samples map as v/255.
    pub fn load(path: &Path) -> Result<Self> {
        let dynimg = image::open(path).map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let rgb = dynimg.to_rgb8();
        let (w, h) = rgb.dimensions();
        if w == 0 || h == 0 {
            return Err(Error::ImageDecode {
                path: path.to_path_buf(),
                reason: "empty image".into(),
            });
        }
        Self::from_u8(h as usize, w as usize, rgb.as_raw())
    }

    /// Encode to 8-bit PNG in memory.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let enc = image::codecs::png::PngEncoder::new(&mut out);
        image::ImageEncoder::write_image(
            enc,
            &self.to_u8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::ImageEncode {
            path: "<memory>".into(),
            reason: e.to_string(),
        })?;
        Ok(out)
    }

    /// Write as 8-bit PNG or binary PPM depending on the file extension
    /// (default PNG).
    pub fn save(&self, path: &Path) -> Result<()> {
        let is_ppm = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("ppm"))
            .unwrap_or(false);
        if is_ppm {
            let mut bytes =
                format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
            bytes.extend_from_slice(&self.to_u8());
            std::fs::write(path, bytes)
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))
        } else {
            let bytes = self.encode_png()?;
            std::fs::write(path, bytes)
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))
        }
    }
}
