//! Gaze-angle arithmetic and the pluggable gaze-estimator interface.
//!
//! Angles convert to unit vectors via the spherical form
//! `x = sin(φ)cos(μ), y = sin(φ)sin(μ), z = cos(φ)`, where `φ` acts as a
//! polar angle measured from the view axis (`φ = 0` maps to `<0, 0, 1>`).
//! The angular offset between two directions is the arccos of the clamped
//! dot product of the corresponding unit vectors.
//!
//! Two independent estimators recover gaze from rendered frames: a pupil
//! centroid extractor and a template matcher over a discrete gaze grid.
//! They exist so that training can be supervised by one estimator and
//! evaluated with the other. Both are deterministic and, by contract,
//! non-differentiable: the training loop treats their output as a scalar
//! through which no gradient flows.

use crate::faces::{FaceImage, GazeAngles, MaskSet};
use crate::synth::{PUPIL_GAIN_RATIO, PUPIL_RADIUS_RATIO, PUPIL_SHADE_BASE, PUPIL_SHADE_SPAN, SCLERA_SHADE};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Unit-norm gaze direction vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl GazeVector {
    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }
}

/// Spherical-to-Cartesian conversion; output has unit norm.
pub fn angles_to_vector(g: GazeAngles) -> GazeVector {
    let (mu, phi) = (g.pitch_mu(), g.yaw_phi());
    GazeVector { x: phi.sin() * mu.cos(), y: phi.sin() * mu.sin(), z: phi.cos() }
}

/// Angle in `[0, π]` between two gaze directions. The dot product is
/// clamped to `[-1, 1]` before the arccos, so numerically parallel inputs
/// never produce NaN.
pub fn angular_error(a: GazeAngles, b: GazeAngles) -> f64 {
    let va = angles_to_vector(a);
    let vb = angles_to_vector(b);
    let denom = va.norm() * vb.norm();
    let cos = (va.dot(&vb) / denom).clamp(-1.0, 1.0);
    cos.acos()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("estimator requires eye masks for this input")]
    MissingMasks,
    #[error("eyes mask is empty")]
    EmptyEyeMask,
    #[error("expected 2 eye regions, found {0}")]
    WrongEyeCount(usize),
    #[error("no pupil contrast in eye region (range {0:.3})")]
    NoPupilContrast(f64),
}

/// A deterministic gaze predictor.
///
/// Masks are optional at the interface level; the bundled estimators need
/// them because the synthetic pipeline always has them, while an adapter
/// for real footage would locate eyes by detection instead.
pub trait GazeEstimator: Send + Sync {
    fn name(&self) -> &str;
    fn estimate(&self, image: &FaceImage, masks: Option<&MaskSet>) -> Result<GazeAngles, EstimateError>;
}

/// One connected component of the eyes mask.
#[derive(Debug, Clone)]
struct EyeRegion {
    center: (f64, f64),
    radius: f64,
    pixels: Vec<(usize, usize)>,
}

/// Extracts the two eye regions (connected components) from an eyes mask.
fn eye_regions(eyes: &Array2<f64>) -> Result<[EyeRegion; 2], EstimateError> {
    let (h, w) = eyes.dim();
    let mut label = vec![0u32; h * w];
    let mut components: Vec<Vec<(usize, usize)>> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if eyes[(y, x)] == 1.0 && label[y * w + x] == 0 {
                let id = components.len() as u32 + 1;
                let mut stack = vec![(y, x)];
                let mut pix = Vec::new();
                label[y * w + x] = id;
                while let Some((cy, cx)) = stack.pop() {
                    pix.push((cy, cx));
                    let mut push = |ny: usize, nx: usize, label: &mut Vec<u32>| {
                        if eyes[(ny, nx)] == 1.0 && label[ny * w + nx] == 0 {
                            label[ny * w + nx] = id;
                            stack.push((ny, nx));
                        }
                    };
                    if cy > 0 {
                        push(cy - 1, cx, &mut label);
                    }
                    if cy + 1 < h {
                        push(cy + 1, cx, &mut label);
                    }
                    if cx > 0 {
                        push(cy, cx - 1, &mut label);
                    }
                    if cx + 1 < w {
                        push(cy, cx + 1, &mut label);
                    }
                }
                components.push(pix);
            }
        }
    }
    if components.is_empty() {
        return Err(EstimateError::EmptyEyeMask);
    }
    components.sort_by_key(|c| std::cmp::Reverse(c.len()));
    if components.len() < 2 {
        return Err(EstimateError::WrongEyeCount(components.len()));
    }
    components.truncate(2);
    let mut regions: Vec<EyeRegion> = components
        .into_iter()
        .map(|pixels| {
            let n = pixels.len() as f64;
            let cy = pixels.iter().map(|p| p.0 as f64 + 0.5).sum::<f64>() / n;
            let cx = pixels.iter().map(|p| p.1 as f64 + 0.5).sum::<f64>() / n;
            let radius = (n / std::f64::consts::PI).sqrt();
            EyeRegion { center: (cx, cy), radius, pixels }
        })
        .collect();
    regions.sort_by(|a, b| a.center.0.partial_cmp(&b.center.0).unwrap());
    Ok([regions.remove(0), regions.remove(0)])
}

/// Minimum contrast (max − min gray) an eye region must show.
const MIN_EYE_CONTRAST: f64 = 0.2;
/// Darkness threshold for centroid weighting. Chosen below any blend of
/// sclera and skin so pixels on the eye-region boundary carry no weight.
const DARKNESS_REF: f64 = 0.5;

/// Per-eye geometry measurement shared by both estimators.
///
/// Stages: contrast screen, coarse darkness centroid, pupil radius from the
/// truncated darkness integral, least-squares refinement of (pupil center,
/// pupil radius) over the eye interior, then an edge fit of the eye-disk
/// center over a boundary ring using the refined radius. The displacement
/// gain follows from the fitted pupil radius and the fixed pupil/eye ratio.
struct EyeGeometry {
    /// Pixels strictly inside the eye disk: (x, y, gray value).
    interior: Vec<(f64, f64, f64)>,
    /// Darkest interior value — the pupil core shade.
    min_g: f64,
    pupil_center: (f64, f64),
    eye_center: (f64, f64),
    eye_radius: f64,
    /// Displacement gain `k` implied by the fitted pupil radius.
    gain: f64,
}

impl EyeGeometry {
    /// In-plane displacement ratio and shade-decoded depth component.
    fn gaze_components(&self) -> (f64, f64, f64) {
        let dx = (self.pupil_center.0 - self.eye_center.0) / self.gain;
        let dy = (self.pupil_center.1 - self.eye_center.1) / self.gain;
        let z = ((self.min_g - PUPIL_SHADE_BASE) / PUPIL_SHADE_SPAN - 1.0).clamp(-1.0, 1.0);
        (dx, dy, z)
    }
}

/// Generic coarse-to-fine 2-D minimizer over a shrinking 7×7 grid.
fn grid_minimize(start: (f64, f64), mut span: f64, stages: usize, cost: impl Fn((f64, f64)) -> f64) -> (f64, f64) {
    let mut best = start;
    for _ in 0..stages {
        let mut top = (cost(best), best);
        for dy in -3i32..=3 {
            for dx in -3i32..=3 {
                let c = (best.0 + dx as f64 * span / 3.0, best.1 + dy as f64 * span / 3.0);
                let s = cost(c);
                if s > top.0 {
                    continue;
                }
                if s < top.0 {
                    top = (s, c);
                }
            }
        }
        best = top.1;
        span /= 3.0;
    }
    best
}

/// Fits the sclera/skin edge model over a boundary annulus to refine the
/// eye-disk center. The binary-mask centroid carries ~0.1 px of lattice
/// noise, which is too coarse for the displacement inversion. The model
/// radius sweeps a small range so a miscalibrated radius cannot push the
/// center through the pupil-exclusion arc.
fn refine_eye_center(
    gray: &Array2<f64>,
    region: &EyeRegion,
    eye_radius: f64,
    pupil_center: (f64, f64),
    pupil_radius: f64,
) -> (f64, f64) {
    let (h, w) = gray.dim();
    let (cx, cy) = region.center;
    let mut outer: Vec<f64> = Vec::new();
    let mut ring: Vec<(f64, f64, f64)> = Vec::new();
    let reach = eye_radius + 2.5;
    let y_lo = ((cy - reach).floor().max(0.0)) as usize;
    let y_hi = ((cy + reach).ceil().min(h as f64)) as usize;
    let x_lo = ((cx - reach).floor().max(0.0)) as usize;
    let x_hi = ((cx + reach).ceil().min(w as f64)) as usize;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
            let dp = ((px - pupil_center.0).powi(2) + (py - pupil_center.1).powi(2)).sqrt();
            if (eye_radius + 1.2..eye_radius + 2.2).contains(&d) {
                outer.push(gray[(y, x)]);
            }
            if (eye_radius - 2.0..=eye_radius + 2.0).contains(&d) && dp > pupil_radius + 1.2 {
                ring.push((px, py, gray[(y, x)]));
            }
        }
    }
    if outer.is_empty() || ring.len() < 8 {
        return region.center;
    }
    outer.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let skin = outer[outer.len() / 2];

    let cost = |c: (f64, f64), r: f64| -> f64 {
        ring.iter()
            .map(|&(px, py, g)| {
                let d = ((px - c.0).powi(2) + (py - c.1).powi(2)).sqrt();
                let cov = (0.5 - (d - r)).clamp(0.0, 1.0);
                let m = SCLERA_SHADE * cov + skin * (1.0 - cov);
                (g - m) * (g - m)
            })
            .sum()
    };
    let mut best = (f64::INFINITY, region.center);
    for k in -3i32..=3 {
        let r = eye_radius * (1.0 + 0.01 * k as f64);
        let c = grid_minimize(region.center, 0.6, 5, |c| cost(c, r));
        let s = cost(c, r);
        if s < best.0 {
            best = (s, c);
        }
    }
    best.1
}

fn measure_geometry(gray: &Array2<f64>, region: &EyeRegion) -> Result<EyeGeometry, EstimateError> {
    let mut min_g = f64::INFINITY;
    let mut max_g = f64::NEG_INFINITY;
    for &(y, x) in &region.pixels {
        min_g = min_g.min(gray[(y, x)]);
        max_g = max_g.max(gray[(y, x)]);
    }
    if max_g - min_g < MIN_EYE_CONTRAST {
        return Err(EstimateError::NoPupilContrast(max_g - min_g));
    }
    let inner = region.radius - 0.9;
    let mut interior = Vec::new();
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for &(y, x) in &region.pixels {
        let px = x as f64 + 0.5;
        let py = y as f64 + 0.5;
        let d2 = (px - region.center.0).powi(2) + (py - region.center.1).powi(2);
        if d2 <= inner * inner {
            interior.push((px, py, gray[(y, x)]));
        }
        let wgt = (DARKNESS_REF - gray[(y, x)]).max(0.0);
        sx += wgt * px;
        sy += wgt * py;
        sw += wgt;
    }
    if interior.is_empty() || sw <= 0.0 {
        return Err(EstimateError::NoPupilContrast(max_g - min_g));
    }
    let coarse_pupil = (sx / sw, sy / sw);

    // Initial pupil radius from the truncated darkness integral: the
    // threshold keeps its support strictly inside the pupil disk, so the
    // sum never clips at the eye boundary. Inverting the analytic integral
    // of the thresholded coverage ramp:
    //   Σ(τ−g)⁺ = amp·π·L·(P² + L·P + L²/3),  L = 1 − (sclera−τ)/amp,
    // with P = r − 1/2.
    let amplitude = (SCLERA_SHADE - min_g).max(1e-6);
    let c0 = (SCLERA_SHADE - DARKNESS_REF) / amplitude;
    let ramp = 1.0 - c0;
    let mut pupil_radius = if ramp > 0.05 {
        let disc = -ramp * ramp / 3.0 + 4.0 * sw / (std::f64::consts::PI * ramp * amplitude);
        if disc > 0.0 {
            (disc.sqrt() - ramp) / 2.0 + 0.5
        } else {
            0.3 * region.radius
        }
    } else {
        0.3 * region.radius
    }
    .clamp(0.15 * region.radius, 0.5 * region.radius);

    // Least-squares fit of (sclera + pupil disk) over the eye interior.
    // The window may clip the pupil at extreme displacements; the fit does
    // not care, the model is correct on every pixel it sees.
    let pupil_shade = min_g;
    let interior_cost = |c: (f64, f64), pr: f64| -> f64 {
        interior
            .iter()
            .map(|&(px, py, g)| {
                let d = ((px - c.0).powi(2) + (py - c.1).powi(2)).sqrt();
                let cov = (0.5 - (d - pr)).clamp(0.0, 1.0);
                let m = SCLERA_SHADE * (1.0 - cov) + pupil_shade * cov;
                (g - m) * (g - m)
            })
            .sum()
    };
    let mut pupil_center = grid_minimize(coarse_pupil, 0.75, 3, |c| interior_cost(c, pupil_radius));
    for span in [0.08, 0.02] {
        let mut top = (interior_cost(pupil_center, pupil_radius), pupil_radius, pupil_center);
        for k in -4i32..=4 {
            let pr = pupil_radius * (1.0 + span * k as f64 / 4.0);
            let c = grid_minimize(pupil_center, 0.1, 2, |c| interior_cost(c, pr));
            let s = interior_cost(c, pr);
            if s < top.0 {
                top = (s, pr, c);
            }
        }
        pupil_radius = top.1;
        pupil_center = top.2;
    }
    pupil_center = grid_minimize(pupil_center, 0.1, 3, |c| interior_cost(c, pupil_radius));

    let eye_radius = pupil_radius / PUPIL_RADIUS_RATIO;
    let eye_center = refine_eye_center(gray, region, eye_radius, pupil_center, pupil_radius);
    let gain = PUPIL_GAIN_RATIO * eye_radius;
    Ok(EyeGeometry { interior, min_g, pupil_center, eye_center, eye_radius, gain })
}

fn vector_to_angles(x: f64, y: f64, z: f64) -> GazeAngles {
    let norm = (x * x + y * y + z * z).sqrt().max(1e-12);
    let phi = (z / norm).clamp(-1.0, 1.0).acos();
    let mu = if x == 0.0 && y == 0.0 { 0.0 } else { y.atan2(x) };
    GazeAngles::new(mu, phi).expect("finite")
}

/// Per-eye raw measurements plus fitted eye centers, for diagnostics.
#[doc(hidden)]
#[allow(clippy::type_complexity)]
pub fn debug_eye_measurements(
    image: &FaceImage,
    masks: &MaskSet,
) -> Result<Vec<((f64, f64, f64), (f64, f64))>, EstimateError> {
    let regions = eye_regions(masks.eyes())?;
    let gray = image.gray();
    let mut out = Vec::new();
    for region in &regions {
        let geom = measure_geometry(&gray, region)?;
        out.push((geom.gaze_components(), geom.eye_center));
    }
    Ok(out)
}

/// Pupil-centroid gaze estimator.
///
/// Locates the darkness-weighted pupil centroid inside each eye region,
/// inverts the render gain to recover the in-plane gaze components, decodes
/// the depth component from the pupil core shade, and averages the two
/// per-eye direction estimates.
#[derive(Debug, Default, Clone)]
pub struct CentroidEstimator;

impl GazeEstimator for CentroidEstimator {
    fn name(&self) -> &str {
        "centroid"
    }

    fn estimate(&self, image: &FaceImage, masks: Option<&MaskSet>) -> Result<GazeAngles, EstimateError> {
        let masks = masks.ok_or(EstimateError::MissingMasks)?;
        let regions = eye_regions(masks.eyes())?;
        let gray = image.gray();
        let geoms =
            [measure_geometry(&gray, &regions[0])?, measure_geometry(&gray, &regions[1])?];
        // Both eyes are rendered at one radius; a shared gain halves the
        // calibration noise.
        let gain = (geoms[0].gain + geoms[1].gain) / 2.0;
        let (mut vx, mut vy, mut vz) = (0.0, 0.0, 0.0);
        for geom in &geoms {
            let (dx0, dy0, z) = geom.gaze_components();
            let dx = dx0 * geom.gain / gain;
            let dy = dy0 * geom.gain / gain;
            let r = (dx * dx + dy * dy).sqrt().min(1.0);
            let phi = r.atan2(z);
            let mu = if dx == 0.0 && dy == 0.0 { 0.0 } else { dy.atan2(dx) };
            let g = GazeAngles::new(mu, phi).expect("finite");
            let v = angles_to_vector(g);
            vx += v.x;
            vy += v.y;
            vz += v.z;
        }
        Ok(vector_to_angles(vx, vy, vz))
    }
}

/// Grid resolution and angle box for the template matcher.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TemplateGrid {
    pub pitch_min: f64,
    pub pitch_max: f64,
    pub yaw_min: f64,
    pub yaw_max: f64,
    pub steps: usize,
}

impl Default for TemplateGrid {
    fn default() -> Self {
        // Slightly wider than the default sampler box so boundary gazes
        // do not clamp to edge cells.
        let span = std::f64::consts::PI / 6.0 * 1.2;
        let half = std::f64::consts::FRAC_PI_2;
        Self {
            pitch_min: -span,
            pitch_max: span,
            yaw_min: half - span,
            yaw_max: half + span,
            steps: 15,
        }
    }
}

/// Template-matching gaze estimator.
///
/// Renders an idealized eye patch (sclera disk plus shaded pupil) for every
/// cell of a discrete gaze grid and scores it against both observed eye
/// patches with normalized cross-correlation, returning the arg-max cell's
/// angles. Independent of the centroid path: no centroid, no gain
/// inversion, the grid quantization is its own.
#[derive(Debug, Clone)]
pub struct TemplateEstimator {
    grid: Vec<GazeAngles>,
}

impl Default for TemplateEstimator {
    fn default() -> Self {
        Self::new(TemplateGrid::default())
    }
}

impl TemplateEstimator {
    pub fn new(grid: TemplateGrid) -> Self {
        let mut cells = Vec::with_capacity(grid.steps * grid.steps);
        for i in 0..grid.steps {
            for j in 0..grid.steps {
                let t = |lo: f64, hi: f64, k: usize| {
                    if grid.steps == 1 {
                        (lo + hi) / 2.0
                    } else {
                        lo + (hi - lo) * k as f64 / (grid.steps - 1) as f64
                    }
                };
                let mu = t(grid.pitch_min, grid.pitch_max, i);
                let phi = t(grid.yaw_min, grid.yaw_max, j);
                cells.push(GazeAngles::new(mu, phi).expect("finite grid"));
            }
        }
        Self { grid: cells }
    }

    pub fn grid_spacing(&self) -> f64 {
        // Largest angular gap between a point in the default box and its
        // nearest grid cell is bounded by the cell diagonal.
        let mut min_gap = f64::INFINITY;
        for w in self.grid.windows(2) {
            let gap = angular_error(w[0], w[1]);
            if gap > 1e-9 {
                min_gap = min_gap.min(gap);
            }
        }
        min_gap * std::f64::consts::SQRT_2
    }

    /// Ideal patch pixel at offset `(dx, dy)` from the eye center.
    fn template_value(dx: f64, dy: f64, radius: f64, gaze: GazeAngles) -> f64 {
        let (gx, gy, gz) = crate::synth::gaze_xyz(gaze);
        let gain = PUPIL_GAIN_RATIO * radius;
        let pr = PUPIL_RADIUS_RATIO * radius;
        let shade = PUPIL_SHADE_BASE + PUPIL_SHADE_SPAN * (gz + 1.0);
        let d = ((dx - gain * gx).powi(2) + (dy - gain * gy).powi(2)).sqrt();
        let cov = (0.5 - (d - pr)).clamp(0.0, 1.0);
        SCLERA_SHADE * (1.0 - cov) + shade * cov
    }
}

/// Weight of the pupil-shade feature appended to the correlation vectors.
/// Sized so shade participates on equal footing with position when adjacent
/// grid cells are nearly position-degenerate (φ near π/2).
const SHADE_FEATURE_WEIGHT: f64 = 25.0;

impl GazeEstimator for TemplateEstimator {
    fn name(&self) -> &str {
        "template"
    }

    fn estimate(&self, image: &FaceImage, masks: Option<&MaskSet>) -> Result<GazeAngles, EstimateError> {
        let masks = masks.ok_or(EstimateError::MissingMasks)?;
        let regions = eye_regions(masks.eyes())?;
        let gray = image.gray();
        let cals = [measure_geometry(&gray, &regions[0])?, measure_geometry(&gray, &regions[1])?];
        // Both eyes share one rendered radius; average the calibrations.
        let eye_radius = (cals[0].eye_radius + cals[1].eye_radius) / 2.0;

        let kappa = SHADE_FEATURE_WEIGHT;
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (idx, &cell) in self.grid.iter().enumerate() {
            let (_, _, gz) = crate::synth::gaze_xyz(cell);
            let cell_shade = PUPIL_SHADE_BASE + PUPIL_SHADE_SPAN * (gz + 1.0);
            let mut score = 0.0;
            for cal in &cals {
                let (mut tp, mut tt, mut pp) = (0.0, 0.0, 0.0);
                for &(px, py, p) in &cal.interior {
                    let t = Self::template_value(
                        px - cal.eye_center.0,
                        py - cal.eye_center.1,
                        eye_radius,
                        cell,
                    );
                    tp += t * p;
                    tt += t * t;
                    pp += p * p;
                }
                // Shade feature: one heavily weighted component carrying the
                // template's pupil shade against the measured core shade.
                tp += kappa * kappa * cell_shade * cal.min_g;
                tt += kappa * kappa * cell_shade * cell_shade;
                pp += kappa * kappa * cal.min_g * cal.min_g;
                score += tp / (tt.sqrt() * pp.sqrt()).max(1e-12);
            }
            if score > best.0 {
                best = (score, idx);
            }
        }
        Ok(self.grid[best.1])
    }
}

/// Estimator selection by name, as exposed on the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Centroid,
    Template,
}

impl EstimatorKind {
    pub fn build(&self) -> Box<dyn GazeEstimator> {
        match self {
            EstimatorKind::Centroid => Box::new(CentroidEstimator),
            EstimatorKind::Template => Box::new(TemplateEstimator::default()),
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EstimatorKind::Centroid => write!(f, "centroid"),
            EstimatorKind::Template => write!(f, "template"),
        }
    }
}
