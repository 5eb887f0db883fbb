//! Procedural face renderer with analytic masks and exact gaze ground truth.
//!
//! A face is a flat-shaded composition of ellipses: skin-colored face
//! ellipse, two white sclera disks with dark pupils, and a mouth ellipse.
//! The pupil center is displaced from the eye center by `k·(x, y)` where
//! `(x, y)` are the first two Cartesian components of the gaze vector and
//! `k = 0.6 · eye_radius`. The pupil shade additionally encodes the depth
//! component `z = cos(yaw_phi)`, so the full 3-D gaze direction is
//! recoverable from a rendered frame (the in-plane displacement alone is
//! symmetric about `yaw_phi = π/2`).
//!
//! Rendering is a pure function of its inputs: anti-aliasing uses an
//! analytic 1-pixel coverage ramp and the skin texture noise comes from the
//! per-frame seed.

use crate::faces::{quantize_unit, FaceError, FaceImage, GazeAngles, MaskSet};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ratio of pupil displacement gain to eye radius.
pub const PUPIL_GAIN_RATIO: f64 = 0.6;
/// Ratio of pupil radius to eye radius.
pub const PUPIL_RADIUS_RATIO: f64 = 0.32;
/// Sclera gray level.
pub const SCLERA_SHADE: f64 = 0.98;
/// Pupil shade is `PUPIL_SHADE_BASE + PUPIL_SHADE_SPAN · (z + 1)` for gaze
/// depth component `z ∈ [−1, 1]`.
pub const PUPIL_SHADE_BASE: f64 = 0.10;
pub const PUPIL_SHADE_SPAN: f64 = 0.08;
/// Amplitude of the per-frame skin texture noise.
const SKIN_NOISE_AMP: f64 = 0.01;
const BACKGROUND_SHADE: f64 = 0.08;
const MOUTH_COLOR: [f64; 3] = [0.55, 0.22, 0.25];
/// Eye line sits this fraction of the vertical semi-axis above center.
const EYE_ROW_RATIO: f64 = 0.25;
/// Mouth sits this fraction of the vertical semi-axis below center.
const MOUTH_ROW_RATIO: f64 = 0.45;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("geometry out of frame: {what} (resolution {resolution})")]
    OutOfFrame { what: String, resolution: usize },
    #[error("invalid identity: {0}")]
    BadIdentity(String),
    #[error(transparent)]
    Face(#[from] FaceError),
}

/// Mouth ellipse specification. `aspect` rescales the height per frame to
/// stand in for expression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MouthParams {
    pub half_width: f64,
    pub half_height: f64,
}

/// Everything that makes one synthetic person: color plus geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticIdentity {
    pub skin_color: [f64; 3],
    /// Face ellipse semi-axes in pixels (horizontal, vertical).
    pub face_axes: (f64, f64),
    /// Distance between the two eye centers in pixels.
    pub eye_spacing: f64,
    pub eye_radius: f64,
    pub mouth: MouthParams,
}

impl SyntheticIdentity {
    /// Validates the pupil-resolvability bound and basic positivity.
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.eye_radius < 3.0 {
            return Err(RenderError::BadIdentity(format!(
                "eye_radius {} below the 3 px resolvability floor",
                self.eye_radius
            )));
        }
        if self.face_axes.0 <= 0.0 || self.face_axes.1 <= 0.0 {
            return Err(RenderError::BadIdentity("non-positive face axes".into()));
        }
        if self.eye_spacing <= 2.0 * self.eye_radius {
            return Err(RenderError::BadIdentity("eyes overlap".into()));
        }
        let mean = self.skin_color.iter().sum::<f64>() / 3.0;
        if !(0.5..=0.9).contains(&mean) {
            return Err(RenderError::BadIdentity(format!(
                "skin luminance {mean:.3} outside [0.5, 0.9]"
            )));
        }
        Ok(())
    }

    /// Draws a random identity whose geometry fits a `resolution²` frame
    /// with room for small head offsets.
    pub fn sample(rng: &mut impl Rng, resolution: usize) -> Self {
        let s = resolution as f64 / 64.0;
        loop {
            // Axes leave room for ±3·s px head offsets inside the frame.
            let ax = rng.gen_range(20.0..=25.0) * s;
            let ay = rng.gen_range(23.0..=26.5) * s;
            let eye_radius = rng.gen_range(5.0..=7.0) * s;
            // Keep both sclera disks inside the ellipse at the eye row.
            let row_halfwidth = ax * (1.0 - EYE_ROW_RATIO * EYE_ROW_RATIO).sqrt();
            let max_half_spacing = row_halfwidth - eye_radius - 2.5 * s;
            let min_half_spacing = eye_radius + 1.5 * s;
            if max_half_spacing <= min_half_spacing {
                continue;
            }
            let eye_spacing = 2.0 * rng.gen_range(min_half_spacing..=max_half_spacing);
            let mouth = MouthParams {
                half_width: rng.gen_range(6.0..=10.0) * s,
                half_height: rng.gen_range(2.5..=4.0) * s,
            };
            let base: f64 = rng.gen_range(0.62..=0.82);
            let mut skin = [0.0; 3];
            for ch in &mut skin {
                *ch = (base + rng.gen_range(-0.08..=0.08)).clamp(0.5, 0.9);
            }
            let id = Self {
                skin_color: skin,
                face_axes: (ax, ay),
                eye_spacing,
                eye_radius,
                mouth,
            };
            if id.validate().is_ok() {
                return id;
            }
        }
    }
}

/// One rendered frame: image, masks, and the gaze used to place the pupils.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub image: FaceImage,
    pub masks: MaskSet,
    pub true_gaze: GazeAngles,
    pub identity_id: String,
    pub frame_index: u32,
}

/// Signed distance to a circle (negative inside).
fn circle_sd(px: f64, py: f64, cx: f64, cy: f64, r: f64) -> f64 {
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() - r
}

/// Approximate signed distance to an axis-aligned ellipse (negative inside).
fn ellipse_sd(px: f64, py: f64, cx: f64, cy: f64, a: f64, b: f64) -> f64 {
    let dx = px - cx;
    let dy = py - cy;
    let f = ((dx / a).powi(2) + (dy / b).powi(2)).sqrt();
    if f < 1e-9 {
        return -a.min(b);
    }
    let grad = ((dx / (a * a)).powi(2) + (dy / (b * b)).powi(2)).sqrt() / f;
    (f - 1.0) * f / grad.max(1e-12)
}

/// Subsample grid side for anti-aliasing of boundary pixels. Area sampling
/// keeps the rendered pupil centroid within a few hundredths of a pixel of
/// its true center, which the gaze-recovery tolerance requires.
const AA_SUBSAMPLES: usize = 8;

/// Unit-vector components of a gaze direction.
pub fn gaze_xyz(g: GazeAngles) -> (f64, f64, f64) {
    let (mu, phi) = (g.pitch_mu(), g.yaw_phi());
    (phi.sin() * mu.cos(), phi.sin() * mu.sin(), phi.cos())
}

fn check_inside_ellipse(
    what: &str,
    points: impl Iterator<Item = (f64, f64)>,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    resolution: usize,
) -> Result<(), RenderError> {
    for (px, py) in points {
        if ellipse_sd(px, py, cx, cy, a, b) > -1.0 {
            return Err(RenderError::OutOfFrame {
                what: format!("{what} at ({px:.1}, {py:.1}) leaves the face ellipse"),
                resolution,
            });
        }
    }
    Ok(())
}

/// Renders one frame. Deterministic for fixed inputs; the seed drives only
/// the skin texture noise and the mouth aspect (expression).
pub fn render_face(
    identity: &SyntheticIdentity,
    gaze: GazeAngles,
    head_offset: (f64, f64),
    rng_seed: u64,
    resolution: usize,
) -> Result<FrameSample, RenderError> {
    identity.validate()?;
    let s = resolution as f64;
    let (ax, ay) = identity.face_axes;
    let cx = s / 2.0 + head_offset.0;
    let cy = s / 2.0 + head_offset.1;

    if cx - ax < 1.0 || cx + ax > s - 1.0 || cy - ay < 1.0 || cy + ay > s - 1.0 {
        return Err(RenderError::OutOfFrame {
            what: format!(
                "face ellipse center ({cx:.1}, {cy:.1}) axes ({ax:.1}, {ay:.1})"
            ),
            resolution,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mouth_aspect = rng.gen_range(0.7..=1.3);

    let eye_y = cy - EYE_ROW_RATIO * ay;
    let half_spacing = identity.eye_spacing / 2.0;
    let eye_centers = [(cx - half_spacing, eye_y), (cx + half_spacing, eye_y)];
    let eye_r = identity.eye_radius;

    let mouth_cy = cy + MOUTH_ROW_RATIO * ay;
    let (mw, mh) = (identity.mouth.half_width, identity.mouth.half_height * mouth_aspect);

    let ring = |c: (f64, f64), r: f64| {
        (0..32).map(move |i| {
            let t = i as f64 / 32.0 * std::f64::consts::TAU;
            (c.0 + r * t.cos(), c.1 + r * t.sin())
        })
    };
    for (i, &ec) in eye_centers.iter().enumerate() {
        check_inside_ellipse(
            if i == 0 { "left eye" } else { "right eye" },
            ring(ec, eye_r),
            cx,
            cy,
            ax,
            ay,
            resolution,
        )?;
    }
    check_inside_ellipse(
        "mouth",
        (0..32).map(|i| {
            let t = i as f64 / 32.0 * std::f64::consts::TAU;
            (cx + mw * t.cos(), mouth_cy + mh * t.sin())
        }),
        cx,
        cy,
        ax,
        ay,
        resolution,
    )?;

    let (gx, gy, gz) = gaze_xyz(gaze);
    let gain = PUPIL_GAIN_RATIO * eye_r;
    let pupil_r = PUPIL_RADIUS_RATIO * eye_r;
    let pupil_shade = PUPIL_SHADE_BASE + PUPIL_SHADE_SPAN * (gz + 1.0);
    let pupil_centers: Vec<(f64, f64)> = eye_centers
        .iter()
        .map(|&(ex, ey)| (ex + gain * gx, ey + gain * gy))
        .collect();

    let n = resolution;
    let mut pixels = Array3::zeros((n, n, 3));
    let mut face_mask = Array2::zeros((n, n));
    let mut eyes_mask = Array2::zeros((n, n));
    let mut em_mask = Array2::zeros((n, n));

    // Flat-shaded layer stack at a point: background, skin, mouth, sclera,
    // pupil (later layers override earlier ones).
    let shade_at = |px: f64, py: f64| -> [f64; 3] {
        let mut color = [BACKGROUND_SHADE; 3];
        if ellipse_sd(px, py, cx, cy, ax, ay) <= 0.0 {
            color = identity.skin_color;
        }
        if ellipse_sd(px, py, cx, mouth_cy, mw, mh) <= 0.0 {
            color = MOUTH_COLOR;
        }
        for &(ex, ey) in &eye_centers {
            if circle_sd(px, py, ex, ey, eye_r) <= 0.0 {
                color = [SCLERA_SHADE; 3];
            }
        }
        for &(ex, ey) in &pupil_centers {
            if circle_sd(px, py, ex, ey, pupil_r) <= 0.0 {
                color = [pupil_shade; 3];
            }
        }
        color
    };

    for y in 0..n {
        for x in 0..n {
            // Pixel centers sit on the half-integer grid.
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;

            let face_sd = ellipse_sd(px, py, cx, cy, ax, ay);
            let mouth_sd = ellipse_sd(px, py, cx, mouth_cy, mw, mh);
            let eye_sd = eye_centers
                .iter()
                .map(|&(ex, ey)| circle_sd(px, py, ex, ey, eye_r))
                .fold(f64::INFINITY, f64::min);
            let pupil_sd = pupil_centers
                .iter()
                .map(|&(ex, ey)| circle_sd(px, py, ex, ey, pupil_r))
                .fold(f64::INFINITY, f64::min);

            let near_boundary = [face_sd, mouth_sd, eye_sd, pupil_sd]
                .iter()
                .any(|sd| sd.abs() < 1.5);
            let mut color = if near_boundary {
                // Area-sample the layer stack over a subpixel grid.
                let mut acc = [0.0; 3];
                let step = 1.0 / AA_SUBSAMPLES as f64;
                for sy in 0..AA_SUBSAMPLES {
                    for sx in 0..AA_SUBSAMPLES {
                        let sub = shade_at(
                            x as f64 + (sx as f64 + 0.5) * step,
                            y as f64 + (sy as f64 + 0.5) * step,
                        );
                        for ch in 0..3 {
                            acc[ch] += sub[ch];
                        }
                    }
                }
                let inv = 1.0 / (AA_SUBSAMPLES * AA_SUBSAMPLES) as f64;
                [acc[0] * inv, acc[1] * inv, acc[2] * inv]
            } else {
                shade_at(px, py)
            };

            // Skin texture noise, kept out of the eye and mouth regions so
            // the loss targets there stay analytically clean.
            let noise = rng.gen_range(-SKIN_NOISE_AMP..=SKIN_NOISE_AMP);
            if face_sd <= 0.0 && eye_sd > 1.0 && mouth_sd > 1.0 {
                for ch in &mut color {
                    *ch = (*ch + noise).clamp(0.0, 1.0);
                }
            }

            for ch in 0..3 {
                pixels[(y, x, ch)] = quantize_unit(color[ch]);
            }
            if face_sd <= 0.0 {
                face_mask[(y, x)] = 1.0;
            }
            if eye_sd <= 0.0 {
                eyes_mask[(y, x)] = 1.0;
            }
            if eye_sd <= 0.0 || mouth_sd <= 0.0 {
                em_mask[(y, x)] = 1.0;
            }
        }
    }

    let image = FaceImage::new(pixels)?;
    let masks = MaskSet::new(face_mask, eyes_mask, em_mask)?;
    Ok(FrameSample {
        image,
        masks,
        true_gaze: gaze,
        identity_id: String::new(),
        frame_index: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_identity() -> SyntheticIdentity {
        SyntheticIdentity {
            skin_color: [0.75, 0.65, 0.58],
            face_axes: (23.0, 27.0),
            eye_spacing: 19.0,
            eye_radius: 6.0,
            mouth: MouthParams { half_width: 8.0, half_height: 3.0 },
        }
    }

    /// Test-local pupil finder, independent of the gaze estimators: linear
    /// darkness-weighted centroid in a window around a known search center.
    /// The window must sit inside the sclera so weights stay linear in pupil
    /// coverage (full-range ramp, no truncation bias).
    fn pupil_centroid(
        sample: &FrameSample,
        search_center: (f64, f64),
        reach: f64,
        eye_center: (f64, f64),
        eye_radius: f64,
    ) -> (f64, f64) {
        let gray = sample.image.gray();
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        let n = sample.image.resolution();
        let interior = eye_radius - 0.8;
        for y in 0..n {
            for x in 0..n {
                let px = x as f64 + 0.5;
                let py = y as f64 + 0.5;
                let in_window =
                    (px - search_center.0).powi(2) + (py - search_center.1).powi(2) <= reach * reach;
                let in_sclera =
                    (px - eye_center.0).powi(2) + (py - eye_center.1).powi(2) <= interior * interior;
                if in_window && in_sclera {
                    let w = (SCLERA_SHADE - gray[(y, x)]).max(0.0);
                    sx += w * px;
                    sy += w * py;
                    sw += w;
                }
            }
        }
        assert!(sw > 0.0, "no dark pixels found in eye region");
        (sx / sw, sy / sw)
    }

    #[test]
    fn zero_gaze_centers_pupils() {
        let id = test_identity();
        let gaze = GazeAngles::new(0.0, 0.0).unwrap();
        let sample = render_face(&id, gaze, (0.0, 0.0), 7, 64).unwrap();
        // <0, 0, 1>: no in-plane displacement.
        let (gx, gy, gz) = gaze_xyz(gaze);
        assert_eq!((gx, gy, gz), (0.0, 0.0, 1.0));

        let eye_y = 32.0 - 0.25 * 27.0;
        let reach = PUPIL_RADIUS_RATIO * id.eye_radius + 1.8;
        for ex in [32.0 - 9.5, 32.0 + 9.5] {
            let (cxm, cym) =
                pupil_centroid(&sample, (ex, eye_y), reach, (ex, eye_y), id.eye_radius);
            assert!((cxm - ex).abs() < 0.06, "pupil x off center: {cxm} vs {ex}");
            assert!((cym - eye_y).abs() < 0.06, "pupil y off center: {cym} vs {eye_y}");
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let id = test_identity();
        let gaze = GazeAngles::new(0.2, 1.4).unwrap();
        let a = render_face(&id, gaze, (1.0, -0.5), 42, 64).unwrap();
        let b = render_face(&id, gaze, (1.0, -0.5), 42, 64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn displacement_matches_gaze_projection() {
        // gaze (0, π/4): displacement magnitude sin(π/4)·k along +x.
        let id = test_identity();
        let gaze = GazeAngles::new(0.0, std::f64::consts::FRAC_PI_4).unwrap();
        let sample = render_face(&id, gaze, (0.0, 0.0), 3, 64).unwrap();
        let k = PUPIL_GAIN_RATIO * id.eye_radius;
        let expected = std::f64::consts::FRAC_PI_4.sin() * k;

        let eye_y = 32.0 - 0.25 * 27.0;
        let reach = PUPIL_RADIUS_RATIO * id.eye_radius + 1.8;
        for ex in [32.0 - 9.5, 32.0 + 9.5] {
            // Window centered on the true displaced pupil position.
            let (cxm, cym) = pupil_centroid(
                &sample,
                (ex + expected, eye_y),
                reach,
                (ex, eye_y),
                id.eye_radius,
            );
            let measured = ((cxm - ex).powi(2) + (cym - eye_y).powi(2)).sqrt();
            assert!(
                (measured - expected).abs() < 0.08,
                "displacement {measured:.3} vs expected {expected:.3}"
            );
            assert!((cym - eye_y).abs() < 0.08, "displacement should be pure +x");
        }
    }

    #[test]
    fn out_of_frame_rejected() {
        let id = test_identity();
        let gaze = GazeAngles::new(0.0, 0.0).unwrap();
        let err = render_face(&id, gaze, (30.0, 0.0), 0, 64).unwrap_err();
        assert!(matches!(err, RenderError::OutOfFrame { .. }));
    }

    #[test]
    fn masks_nest_and_cover_geometry() {
        let id = test_identity();
        let gaze = GazeAngles::new(0.1, 1.5).unwrap();
        let sample = render_face(&id, gaze, (0.0, 1.0), 9, 64).unwrap();
        let eyes = sample.masks.eyes();
        let em = sample.masks.eyes_mouth();
        let face = sample.masks.face();
        let eye_area: f64 = eyes.sum();
        assert!(eye_area > 0.0, "eyes mask must be nonempty");
        // eyes ∧ ¬em and em ∧ ¬face are all-zero.
        for ((e, m), f) in eyes.iter().zip(em.iter()).zip(face.iter()) {
            assert!(!(*e == 1.0 && *m == 0.0));
            assert!(!(*m == 1.0 && *f == 0.0));
        }
    }

    #[test]
    fn identity_sampler_yields_valid_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let id = SyntheticIdentity::sample(&mut rng, 64);
            id.validate().unwrap();
            let gaze = GazeAngles::new(0.0, std::f64::consts::FRAC_PI_2).unwrap();
            render_face(&id, gaze, (0.0, 0.0), 1, 64).unwrap();
        }
    }

    #[test]
    fn eye_radius_floor_enforced() {
        let mut id = test_identity();
        id.eye_radius = 2.0;
        assert!(matches!(id.validate(), Err(RenderError::BadIdentity(_))));
    }
}
