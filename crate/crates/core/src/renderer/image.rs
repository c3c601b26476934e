use std::path::Path;

use image::{GrayAlphaImage, GrayImage, Luma, LumaA, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Row-major floating-point image with interleaved channels and a separate
/// opacity plane. Values live in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub values: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, fill: f64) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Self {
            width,
            height,
            channels,
            values: vec![fill; width * height * channels],
            alpha: vec![0.0; width * height],
        }
    }

    /// Builds a buffer from raw parts, clamping into `[0, 1]`.
    pub fn from_parts(
        width: usize,
        height: usize,
        channels: usize,
        values: Vec<f64>,
        alpha: Vec<f64>,
    ) -> Result<Self> {
        if !(channels == 1 || channels == 3)
            || values.len() != width * height * channels
            || alpha.len() != width * height
        {
            return Err(Error::Data(format!(
                "image buffer shape mismatch: {width}x{height}x{channels} with {} values, {} alpha",
                values.len(),
                alpha.len()
            )));
        }
        if values.iter().chain(&alpha).any(|v| !v.is_finite()) {
            return Err(Error::Data("image buffer contains non-finite values".into()));
        }
        let clamp = |v: Vec<f64>| v.into_iter().map(|x| x.clamp(0.0, 1.0)).collect();
        Ok(Self {
            width,
            height,
            channels,
            values: clamp(values),
            alpha: clamp(alpha),
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.values[i..i + self.channels]
    }

    /// Luma `0.299 r + 0.587 g + 0.114 b`; single-channel input is returned as is.
    pub fn to_grayscale(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let values = self
            .values
            .chunks_exact(3)
            .map(|c| (0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]).clamp(0.0, 1.0))
            .collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 1,
            values,
            alpha: self.alpha.clone(),
        }
    }

    /// Replicates a single channel into three.
    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 3,
            values: self.values.iter().flat_map(|&v| [v, v, v]).collect(),
            alpha: self.alpha.clone(),
        }
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> ImageBuffer {
        assert!(factor >= 1 && self.width.is_multiple_of(factor) && self.height.is_multiple_of(factor));
        let (w, h, c) = (self.width / factor, self.height / factor, self.channels);
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = ImageBuffer::new(w, h, c, 0.0);
        for y in 0..h {
            for x in 0..w {
                for dy in 0..factor {
                    for dx in 0..factor {
                        let sx = x * factor + dx;
                        let sy = y * factor + dy;
                        let src = (sy * self.width + sx) * c;
                        let dst = (y * w + x) * c;
                        for k in 0..c {
                            out.values[dst + k] += self.values[src + k] * norm;
                        }
                        out.alpha[y * w + x] += self.alpha[sy * self.width + sx] * norm;
                    }
                }
            }
        }
        out
    }

    /// `self + (1 - alpha)·background`, i.e. the premultiplied image over a backdrop.
    pub fn over(&self, background: &ImageBuffer) -> ImageBuffer {
        assert_eq!(
            (self.width, self.height, self.channels),
            (background.width, background.height, background.channels)
        );
        let c = self.channels;
        let values = self
            .values
            .iter()
            .zip(&background.values)
            .enumerate()
            .map(|(i, (&v, &b))| (v + (1.0 - self.alpha[i / c]) * b).clamp(0.0, 1.0))
            .collect();
        ImageBuffer {
            values,
            ..self.clone()
        }
    }

    pub fn to_gray8(&self) -> GrayImage {
        let g = self.to_grayscale();
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([quantize(g.values[y as usize * self.width + x as usize])])
        })
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let c = self.to_rgb();
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = c.pixel(x as usize, y as usize);
            Rgb([quantize(p[0]), quantize(p[1]), quantize(p[2])])
        })
    }

    pub fn alpha_mask8(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([quantize(self.alpha[y as usize * self.width + x as usize])])
        })
    }

    /// Writes an 8-bit PNG: grayscale for one channel, RGB for three.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let res = if self.channels == 1 {
            self.to_gray8().save(path)
        } else {
            self.to_rgb8().save(path)
        };
        res.map_err(|e| image_error(path, e))
    }

    pub fn save_alpha_png(&self, path: &Path) -> Result<()> {
        self.alpha_mask8()
            .save(path)
            .map_err(|e| image_error(path, e))
    }

    /// Writes the luma of the image with its coverage as a gray+alpha PNG.
    /// Values are stored as they are (composited over black).
    pub fn save_png_with_alpha(&self, path: &Path) -> Result<()> {
        let g = self.to_grayscale();
        GrayAlphaImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            LumaA([quantize(g.values[i]), quantize(self.alpha[i])])
        })
        .save(path)
        .map_err(|e| image_error(path, e))
    }

    /// Loads an 8-bit PNG as a single-channel image. Alpha is read from the
    /// file when present, otherwise set to 1.
    pub fn load_gray(path: &Path) -> Result<ImageBuffer> {
        Self::load_gray_coverage(path).map(|(img, _)| img)
    }

    /// Like [`ImageBuffer::load_gray`], also reporting whether the file
    /// carried an alpha channel.
    pub fn load_gray_coverage(path: &Path) -> Result<(ImageBuffer, bool)> {
        let dynamic = image::open(path).map_err(|e| image_error(path, e))?;
        let has_alpha = dynamic.color().has_alpha();
        let img = dynamic.to_luma_alpha8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let buf = ImageBuffer {
            width: w,
            height: h,
            channels: 1,
            values: img.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
            alpha: if has_alpha {
                img.pixels().map(|p| p.0[1] as f64 / 255.0).collect()
            } else {
                vec![1.0; w * h]
            },
        };
        Ok((buf, has_alpha))
    }
}

/// Maps `[0, 1]` to a byte, rounding half up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

/// Tiles equally sized images into a grid with `cols` columns.
pub fn contact_sheet(images: &[ImageBuffer], cols: usize) -> Option<ImageBuffer> {
    let first = images.first()?;
    let cols = cols.max(1).min(images.len());
    let rows = images.len().div_ceil(cols);
    let (w, h, c) = (first.width, first.height, first.channels);
    let mut sheet = ImageBuffer::new(w * cols, h * rows, c, 0.0);
    for (k, img) in images.iter().enumerate() {
        let img = if img.channels == c {
            img.clone()
        } else {
            img.to_rgb().to_grayscale()
        };
        let (ox, oy) = ((k % cols) * w, (k / cols) * h);
        for y in 0..h.min(img.height) {
            for x in 0..w.min(img.width) {
                let dst = (oy + y) * sheet.width + ox + x;
                sheet.values[dst * c..dst * c + c].copy_from_slice(img.pixel(x, y));
                sheet.alpha[dst] = img.alpha[y * img.width + x];
            }
        }
    }
    Some(sheet)
}
