//! Square single- or three-channel float images and PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Rec. 709 luminance weights used for every rgb to grayscale conversion.
pub const LUMA: [f32; 3] = [0.2126, 0.7152, 0.0722];

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    pub res: usize,
    pub channels: usize,
    /// Row-major, channel-interleaved.
    pub data: Vec<f32>,
}

impl ImagePlane {
    pub fn new(res: usize, channels: usize) -> Self {
        ImagePlane {
            res,
            channels,
            data: vec![0.0; res * res * channels],
        }
    }

    pub fn constant(res: usize, value: &[f32]) -> Self {
        let data = value.iter().copied().cycle().take(res * res * value.len()).collect();
        ImagePlane {
            res,
            channels: value.len(),
            data,
        }
    }

    pub fn from_fn(res: usize, channels: usize, mut f: impl FnMut(usize, usize, &mut [f32])) -> Self {
        let mut img = ImagePlane::new(res, channels);
        for y in 0..res {
            for x in 0..res {
                let i = (y * res + x) * channels;
                f(x, y, &mut img.data[i..i + channels]);
            }
        }
        img
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.res + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.res + x) * self.channels + c]
    }

    #[inline]
    pub fn get_wrap(&self, x: isize, y: isize, c: usize) -> f32 {
        let r = self.res as isize;
        self.get(x.rem_euclid(r) as usize, y.rem_euclid(r) as usize, c)
    }

    /// Bilinear lookup at texture coordinates `(u, v)` with wrap addressing;
    /// texel centres sit at `(i + 0.5) / res`.
    pub fn sample_wrap(&self, u: f64, v: f64, c: usize) -> f32 {
        let r = self.res as f64;
        let fx = u * r - 0.5;
        let fy = v * r - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = (fx - x0) as f32;
        let ty = (fy - y0) as f32;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let a = self.get_wrap(x0, y0, c);
        let b = self.get_wrap(x0 + 1, y0, c);
        let d = self.get_wrap(x0, y0 + 1, c);
        let e = self.get_wrap(x0 + 1, y0 + 1, c);
        let top = a + (b - a) * tx;
        let bottom = d + (e - d) * tx;
        top + (bottom - top) * ty
    }

    pub fn luminance(&self) -> ImagePlane {
        match self.channels {
            1 => self.clone(),
            _ => ImagePlane {
                res: self.res,
                channels: 1,
                data: self
                    .data
                    .chunks_exact(self.channels)
                    .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
                    .collect(),
            },
        }
    }

    pub fn to_rgb(&self) -> ImagePlane {
        match self.channels {
            3 => self.clone(),
            _ => ImagePlane {
                res: self.res,
                channels: 3,
                data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            },
        }
    }

    /// Converts between grayscale and rgb; `None` for unsupported channel counts.
    pub fn with_channels(&self, channels: usize) -> Option<ImagePlane> {
        match (self.channels, channels) {
            (a, b) if a == b && (a == 1 || a == 3) => Some(self.clone()),
            (3, 1) => Some(self.luminance()),
            (1, 3) => Some(self.to_rgb()),
            _ => None,
        }
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        self
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> ImagePlane {
        ImagePlane {
            res: self.res,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn channel_mean(&self, c: usize) -> f64 {
        let n = self.res * self.res;
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .map(|&v| v as f64)
            .sum::<f64>()
            / n.max(1) as f64
    }

    /// Mean squared difference; a grayscale side is broadcast against rgb.
    pub fn mse(&self, other: &ImagePlane) -> f64 {
        assert_eq!(self.res, other.res, "mse needs matching resolution");
        let (a, b) = if self.channels == other.channels {
            (self.clone(), other.clone())
        } else {
            (self.to_rgb(), other.to_rgb())
        };
        a.data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| {
                let d = (x - y) as f64;
                d * d
            })
            .sum::<f64>()
            / a.data.len().max(1) as f64
    }

    pub fn max_abs_diff(&self, other: &ImagePlane) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Cyclic shift so that output texel `(x, y)` holds input `(x + dx, y + dy)`.
    pub fn shifted(&self, dx: usize, dy: usize) -> ImagePlane {
        ImagePlane::from_fn(self.res, self.channels, |x, y, out| {
            out.copy_from_slice(self.pixel((x + dx) % self.res, (y + dy) % self.res))
        })
    }

    /// Bilinear resampling (clamped addressing) to `res x res`.
    pub fn resize_bilinear(&self, res: usize) -> ImagePlane {
        if res == self.res {
            return self.clone();
        }
        resample_bilinear(self.res, self.res, self.channels, &self.data, res)
    }

    /// Box-filter downsampling; falls back to bilinear when `res` does not
    /// divide the current resolution.
    pub fn downsample(&self, res: usize) -> ImagePlane {
        if res == self.res {
            return self.clone();
        }
        if res == 0 || self.res % res != 0 {
            return self.resize_bilinear(res);
        }
        let f = self.res / res;
        let norm = 1.0 / (f * f) as f32;
        ImagePlane::from_fn(res, self.channels, |x, y, out| {
            out.fill(0.0);
            for sy in 0..f {
                for sx in 0..f {
                    let p = self.pixel(x * f + sx, y * f + sy);
                    for (o, v) in out.iter_mut().zip(p) {
                        *o += v;
                    }
                }
            }
            for o in out.iter_mut() {
                *o *= norm;
            }
        })
    }

    /// 8-bit quantization as stored in a PNG, applying `v^(1/gamma)` first
    /// when `gamma` is given.
    pub fn to_bytes(&self, gamma: Option<f32>) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| {
                let v = v.clamp(0.0, 1.0);
                let v = gamma.map_or(v, |g| v.powf(1.0 / g));
                (v * 255.0).round() as u8
            })
            .collect()
    }

    /// The image as it reads back from an 8-bit PNG written without gamma.
    pub fn quantized_u8(&self) -> ImagePlane {
        ImagePlane {
            res: self.res,
            channels: self.channels,
            data: self.to_bytes(None).into_iter().map(|b| b as f32 / 255.0).collect(),
        }
    }

    pub fn write_png(&self, path: impl AsRef<Path>, gamma: Option<f32>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.res as u32, self.res as u32);
        encoder.set_color(if self.channels == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        writer
            .write_image_data(&self.to_bytes(gamma))
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        writer
            .finish()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    /// Reads an 8-bit or 16-bit PNG as rgb values in `[0, 1]`. Non-square
    /// images are resampled to a square of their smaller side.
    pub fn read_png(path: impl AsRef<Path>) -> Result<ImagePlane> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let img_err = |e: png::DecodingError| Error::Image(format!("{}: {e}", path.display()));
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(img_err)?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Image(format!("{}: image too large", path.display())))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(img_err)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let src_channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => {
                return Err(Error::Image(format!("{}: unexpanded palette", path.display())))
            }
        };
        let mut rgb = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            let row = &buf[y * info.line_size..];
            for x in 0..w {
                let p = &row[x * src_channels..(x + 1) * src_channels];
                let (r, g, b) = if src_channels < 3 {
                    (p[0], p[0], p[0])
                } else {
                    (p[0], p[1], p[2])
                };
                rgb.extend([r, g, b].map(|c| c as f32 / 255.0));
            }
        }
        if w == h {
            return Ok(ImagePlane {
                res: w,
                channels: 3,
                data: rgb,
            });
        }
        Ok(resample_bilinear(w, h, 3, &rgb, w.min(h)))
    }
}

fn resample_bilinear(w: usize, h: usize, channels: usize, data: &[f32], res: usize) -> ImagePlane {
    let at = |x: usize, y: usize, c: usize| data[(y * w + x) * channels + c];
    ImagePlane::from_fn(res, channels, |x, y, out| {
        let fx = ((x as f64 + 0.5) * w as f64 / res as f64 - 0.5).clamp(0.0, (w - 1) as f64);
        let fy = ((y as f64 + 0.5) * h as f64 / res as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (tx, ty) = ((fx - x0 as f64) as f32, (fy - y0 as f64) as f32);
        for (c, o) in out.iter_mut().enumerate() {
            let top = at(x0, y0, c) + (at(x1, y0, c) - at(x0, y0, c)) * tx;
            let bottom = at(x0, y1, c) + (at(x1, y1, c) - at(x0, y1, c)) * tx;
            *o = top + (bottom - top) * ty;
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_conversion() {
        let gray = ImagePlane::constant(4, &[0.25]);
        let rgb = gray.with_channels(3).unwrap();
        assert_eq!(rgb.pixel(1, 2), &[0.25, 0.25, 0.25]);
        let lum = ImagePlane::constant(4, &[1.0, 0.0, 0.0]).luminance();
        assert!((lum.get(0, 0, 0) - 0.2126).abs() < 1e-7);
        assert!(ImagePlane::new(4, 2).with_channels(3).is_none());
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImagePlane::from_fn(8, 3, |x, y, p| {
            p[0] = x as f32 / 7.0;
            p[1] = y as f32 / 7.0;
            p[2] = 0.5;
        });
        let path = dir.path().join("a.png");
        img.write_png(&path, None).unwrap();
        let back = ImagePlane::read_png(&path).unwrap();
        assert_eq!(back, img.quantized_u8());
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn downsample_box_averages() {
        let img = ImagePlane::from_fn(4, 1, |x, _, p| p[0] = x as f32);
        let small = img.downsample(2);
        assert_eq!(small.data, vec![0.5, 2.5, 0.5, 2.5]);
    }

    #[test]
    fn sample_wrap_hits_texel_centres() {
        let img = ImagePlane::from_fn(4, 1, |x, y, p| p[0] = (x + 4 * y) as f32);
        assert_eq!(img.sample_wrap(1.5 / 4.0, 2.5 / 4.0, 0), 9.0);
        // Halfway between the last and first column wraps around.
        assert_eq!(img.sample_wrap(0.0, 0.5 / 4.0, 0), 1.5);
    }
}
