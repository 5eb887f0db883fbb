//! Shared image, mask, and gaze-angle types.
//!
//! Images are square H×W×C tensors of `f64` in `[0, 1]`. Pixel data is
//! quantized to the 16-bit PNG grid at render time so that disk round-trips
//! are bit-exact. Gaze angles follow the spherical convention used
//! throughout the crate: `pitch_mu` rotates the gaze vector around the view
//! axis and `yaw_phi` is the polar angle measured from the view axis, so
//! `yaw_phi = 0` means looking straight into the camera.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FaceError {
    #[error("image must be square, got {h}x{w}")]
    NotSquare { h: usize, w: usize },
    #[error("pixel value {value} at {index:?} outside [0,1] or not finite")]
    BadPixel { value: f64, index: (usize, usize, usize) },
    #[error("mask value {value} at {index:?} is not binary")]
    NonBinaryMask { value: f64, index: (usize, usize) },
    #[error("mask nesting violated: {outer} does not contain {inner} at {index:?}")]
    MaskNesting { inner: &'static str, outer: &'static str, index: (usize, usize) },
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    MaskShape((usize, usize), (usize, usize)),
    #[error("gaze angle {name}={value} is not finite")]
    BadAngle { name: &'static str, value: f64 },
    #[error("png io for {path}: {source}")]
    PngIo { path: String, source: image::ImageError },
    #[error("io for {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("expected {expected} channels in {path}, decoder produced {found}")]
    BadChannelCount { path: String, expected: usize, found: usize },
}

const U16_MAX: f64 = 65535.0;

/// Snap a unit-range value onto the 16-bit storage grid.
pub fn quantize_unit(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * U16_MAX).round() / U16_MAX
}

/// Square RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceImage {
    pixels: Array3<f64>,
}

impl FaceImage {
    /// Validates range, finiteness, and squareness. Shape is `(H, W, C)`.
    pub fn new(pixels: Array3<f64>) -> Result<Self, FaceError> {
        let (h, w, _c) = pixels.dim();
        if h != w {
            return Err(FaceError::NotSquare { h, w });
        }
        for (index, &value) in pixels.indexed_iter() {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(FaceError::BadPixel { value, index });
            }
        }
        Ok(Self { pixels })
    }

    pub fn resolution(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    /// Channel mean per pixel.
    pub fn gray(&self) -> Array2<f64> {
        let (h, w, c) = self.pixels.dim();
        let mut out = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ch in 0..c {
                    acc += self.pixels[(y, x, ch)];
                }
                out[(y, x)] = acc / c as f64;
            }
        }
        out
    }

    /// Saves as 16-bit RGB PNG. Lossless for images on the 16-bit grid.
    pub fn save_png(&self, path: &Path) -> Result<(), FaceError> {
        let (h, w, c) = self.pixels.dim();
        assert_eq!(c, 3, "png export expects RGB");
        let mut buf: image::ImageBuffer<image::Rgb<u16>, Vec<u16>> =
            image::ImageBuffer::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = image::Rgb([
                    (self.pixels[(y, x, 0)] * U16_MAX).round() as u16,
                    (self.pixels[(y, x, 1)] * U16_MAX).round() as u16,
                    (self.pixels[(y, x, 2)] * U16_MAX).round() as u16,
                ]);
                buf.put_pixel(x as u32, y as u32, px);
            }
        }
        buf.save(path).map_err(|source| FaceError::PngIo { path: path.display().to_string(), source })
    }

    pub fn load_png(path: &Path) -> Result<Self, FaceError> {
        let img = image::open(path)
            .map_err(|source| FaceError::PngIo { path: path.display().to_string(), source })?
            .into_rgb16();
        let (w, h) = img.dimensions();
        let mut pixels = Array3::zeros((h as usize, w as usize, 3));
        for (x, y, px) in img.enumerate_pixels() {
            for ch in 0..3 {
                pixels[(y as usize, x as usize, ch)] = px.0[ch] as f64 / U16_MAX;
            }
        }
        Self::new(pixels)
    }
}

/// Per-frame binary masks: whole face, eyes, and eyes-plus-mouth.
///
/// Nesting is a construction invariant: `eyes ⊆ eyes_mouth ⊆ face`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    face: Array2<f64>,
    eyes: Array2<f64>,
    eyes_mouth: Array2<f64>,
}

impl MaskSet {
    pub fn new(
        face: Array2<f64>,
        eyes: Array2<f64>,
        eyes_mouth: Array2<f64>,
    ) -> Result<Self, FaceError> {
        if face.dim() != eyes.dim() {
            return Err(FaceError::MaskShape(face.dim(), eyes.dim()));
        }
        if face.dim() != eyes_mouth.dim() {
            return Err(FaceError::MaskShape(face.dim(), eyes_mouth.dim()));
        }
        for m in [&face, &eyes, &eyes_mouth] {
            for (index, &value) in m.indexed_iter() {
                if value != 0.0 && value != 1.0 {
                    return Err(FaceError::NonBinaryMask { value, index });
                }
            }
        }
        for ((index, &e), &em) in eyes.indexed_iter().zip(eyes_mouth.iter()) {
            if e == 1.0 && em == 0.0 {
                return Err(FaceError::MaskNesting { inner: "eyes", outer: "eyes_mouth", index });
            }
        }
        for ((index, &em), &f) in eyes_mouth.indexed_iter().zip(face.iter()) {
            if em == 1.0 && f == 0.0 {
                return Err(FaceError::MaskNesting { inner: "eyes_mouth", outer: "face", index });
            }
        }
        Ok(Self { face, eyes, eyes_mouth })
    }

    pub fn face(&self) -> &Array2<f64> {
        &self.face
    }

    pub fn eyes(&self) -> &Array2<f64> {
        &self.eyes
    }

    pub fn eyes_mouth(&self) -> &Array2<f64> {
        &self.eyes_mouth
    }

    fn save_mask(m: &Array2<f64>, path: &Path) -> Result<(), FaceError> {
        let (h, w) = m.dim();
        let mut buf = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                buf.put_pixel(x as u32, y as u32, image::Luma([if m[(y, x)] == 1.0 { 255 } else { 0 }]));
            }
        }
        buf.save(path).map_err(|source| FaceError::PngIo { path: path.display().to_string(), source })
    }

    fn load_mask(path: &Path) -> Result<Array2<f64>, FaceError> {
        let img = image::open(path)
            .map_err(|source| FaceError::PngIo { path: path.display().to_string(), source })?
            .into_luma8();
        let (w, h) = img.dimensions();
        let mut m = Array2::zeros((h as usize, w as usize));
        for (x, y, px) in img.enumerate_pixels() {
            m[(y as usize, x as usize)] = if px.0[0] >= 128 { 1.0 } else { 0.0 };
        }
        Ok(m)
    }

    /// Writes the three masks with the `_{face,eyes,em}` suffix convention.
    pub fn save_pngs(&self, dir: &Path, stem: &str) -> Result<(), FaceError> {
        Self::save_mask(&self.face, &dir.join(format!("{stem}_face.png")))?;
        Self::save_mask(&self.eyes, &dir.join(format!("{stem}_eyes.png")))?;
        Self::save_mask(&self.eyes_mouth, &dir.join(format!("{stem}_em.png")))
    }

    pub fn load_pngs(dir: &Path, stem: &str) -> Result<Self, FaceError> {
        let face = Self::load_mask(&dir.join(format!("{stem}_face.png")))?;
        let eyes = Self::load_mask(&dir.join(format!("{stem}_eyes.png")))?;
        let em = Self::load_mask(&dir.join(format!("{stem}_em.png")))?;
        Self::new(face, eyes, em)
    }
}

/// Gaze direction as pitch/yaw spherical angles (radians).
///
/// `pitch_mu ∈ [−π, π]`, `yaw_phi ∈ [0, π]`. `yaw_phi` is the polar angle:
/// `(0, 0)` maps to the unit vector `<0, 0, 1>`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeAngles {
    pitch_mu: f64,
    yaw_phi: f64,
}

impl GazeAngles {
    /// Normalizes arbitrary finite angles into the canonical ranges by a
    /// round-trip through the unit vector.
    pub fn new(pitch_mu: f64, yaw_phi: f64) -> Result<Self, FaceError> {
        if !pitch_mu.is_finite() {
            return Err(FaceError::BadAngle { name: "pitch_mu", value: pitch_mu });
        }
        if !yaw_phi.is_finite() {
            return Err(FaceError::BadAngle { name: "yaw_phi", value: yaw_phi });
        }
        if (-std::f64::consts::PI..=std::f64::consts::PI).contains(&pitch_mu)
            && (0.0..=std::f64::consts::PI).contains(&yaw_phi)
        {
            return Ok(Self { pitch_mu, yaw_phi });
        }
        let (x, y, z) = (
            yaw_phi.sin() * pitch_mu.cos(),
            yaw_phi.sin() * pitch_mu.sin(),
            yaw_phi.cos(),
        );
        let phi = z.clamp(-1.0, 1.0).acos();
        let mu = if x == 0.0 && y == 0.0 { 0.0 } else { y.atan2(x) };
        Ok(Self { pitch_mu: mu, yaw_phi: phi })
    }

    pub fn pitch_mu(&self) -> f64 {
        self.pitch_mu
    }

    pub fn yaw_phi(&self) -> f64 {
        self.yaw_phi
    }
}
