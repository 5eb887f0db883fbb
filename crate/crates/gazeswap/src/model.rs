//! The LIAE autoencoder: one shared encoder, two fully connected
//! intermediate networks, one decoder with image and face-mask heads.
//!
//! Latent pathways:
//! - original face:  `D( I_AB(E(Y)) ‖ I_B(E(Y)) )`
//! - character face: `D( I_AB(E(Y)) ‖ I_AB(E(Y)) )`
//! - swap:           the character pathway applied to an original face.
//!
//! The first half of the concatenated code carries attributes, the second
//! identity; `I_B` never sees character faces, so the `AB` code becomes
//! tied to the character identity over training.
//!
//! Everything is plain `f64` with hand-written forward/backward passes; no
//! ML framework. All parameters live in this one struct, so weight sharing
//! across the three pathways holds by construction.

use crate::faces::{FaceError, FaceImage};
use crate::losses::ConditionId;
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("resolution {0} must be a multiple of 16 and at least 16")]
    BadResolution(usize),
    #[error("input resolution {input} does not match model resolution {model}")]
    ResolutionMismatch { input: usize, model: usize },
    #[error("checkpoint io at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint header: {0}")]
    BadHeader(String),
    #[error("architecture mismatch: checkpoint has {found:?}, expected {expected:?}")]
    ArchMismatch { expected: ModelConfig, found: ModelConfig },
    #[error("checkpoint truncated: wanted {wanted} parameter bytes")]
    Truncated { wanted: usize },
    #[error(transparent)]
    Face(#[from] FaceError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub resolution: usize,
    pub latent_dim: usize,
    /// Encoder channel progression over the four stride-2 stages.
    pub channels: [usize; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { resolution: 64, latent_dim: 128, channels: [8, 16, 24, 32] }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.resolution < 16 || !self.resolution.is_multiple_of(16) {
            return Err(ModelError::BadResolution(self.resolution));
        }
        Ok(())
    }

    fn spatial(&self) -> usize {
        self.resolution / 16
    }

    fn enc_features(&self) -> usize {
        self.channels[3] * self.spatial() * self.spatial()
    }
}

// ---- layers ---------------------------------------------------------------

#[derive(Debug, Clone)]
struct Conv2d {
    w: Array4<f64>, // (out, in, kh, kw)
    b: Vec<f64>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    fn new(rng: &mut ChaCha8Rng, ci: usize, co: usize, k: usize, stride: usize, pad: usize) -> Self {
        let fan_in = (ci * k * k) as f64;
        let bound = (3.0 / fan_in).sqrt() * (2.0f64 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let mut w = Array4::zeros((co, ci, k, k));
        for v in w.iter_mut() {
            *v = rng.gen_range(-bound..=bound);
        }
        Self { w, b: vec![0.0; co], stride, pad }
    }

    fn out_side(&self, h: usize) -> usize {
        let k = self.w.dim().2;
        (h + 2 * self.pad - k) / self.stride + 1
    }

    /// Valid output-column range for a kernel column: `ox` such that
    /// `ox·stride + kx − pad ∈ [0, w)`.
    #[inline]
    fn ox_range(&self, kx: usize, w: usize, ow: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kx as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((w as isize - 1 - off) / s + 1).clamp(0, ow as isize);
        (lo.min(hi) as usize, hi as usize)
    }

    fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (ci, h, w) = x.dim();
        let (co, _, kh, kw) = self.w.dim();
        let oh = self.out_side(h);
        let ow = self.out_side(w);
        let mut out = Array3::zeros((co, oh, ow));
        let xs = x.as_slice().unwrap();
        let ws = self.w.as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        let s = self.stride;
        for o in 0..co {
            let out_ch = &mut os[o * oh * ow..(o + 1) * oh * ow];
            for v in out_ch.iter_mut() {
                *v = self.b[o];
            }
            for c in 0..ci {
                let x_ch = &xs[c * h * w..(c + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = ws[((o * ci + c) * kh + ky) * kw + kx];
                        let (ox_lo, ox_hi) = self.ox_range(kx, w, ow);
                        let x_off = kx as isize - self.pad as isize;
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = &x_ch[iy as usize * w..(iy as usize + 1) * w];
                            let o_row = &mut out_ch[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                // Contiguous inner loop.
                                let base = x_off;
                                for ox in ox_lo..ox_hi {
                                    o_row[ox] += wv * x_row[(ox as isize + base) as usize];
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    o_row[ox] += wv * x_row[(ox * s).wrapping_add_signed(x_off)];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns grad wrt input; accumulates weight/bias grads.
    #[allow(clippy::needless_range_loop)]
    fn backward(
        &self,
        x: &Array3<f64>,
        gout: &Array3<f64>,
        gw: &mut Array4<f64>,
        gb: &mut [f64],
    ) -> Array3<f64> {
        let (ci, h, w) = x.dim();
        let (co, _, kh, kw) = self.w.dim();
        let (_, oh, ow) = gout.dim();
        let mut gin = Array3::zeros((ci, h, w));
        let xs = x.as_slice().unwrap();
        let gs = gout.as_slice().unwrap();
        let ws = self.w.as_slice().unwrap();
        let gws = gw.as_slice_mut().unwrap();
        let gis = gin.as_slice_mut().unwrap();
        let s = self.stride;
        for o in 0..co {
            let g_ch = &gs[o * oh * ow..(o + 1) * oh * ow];
            gb[o] += g_ch.iter().sum::<f64>();
            for c in 0..ci {
                let x_ch = &xs[c * h * w..(c + 1) * h * w];
                let gi_ch = &mut gis[c * h * w..(c + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((o * ci + c) * kh + ky) * kw + kx;
                        let wv = ws[widx];
                        let mut wacc = 0.0;
                        let (ox_lo, ox_hi) = self.ox_range(kx, w, ow);
                        let x_off = kx as isize - self.pad as isize;
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = &x_ch[iy as usize * w..(iy as usize + 1) * w];
                            let gi_row = &mut gi_ch[iy as usize * w..(iy as usize + 1) * w];
                            let g_row = &g_ch[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                for ox in ox_lo..ox_hi {
                                    let ix = (ox as isize + x_off) as usize;
                                    let g = g_row[ox];
                                    wacc += g * x_row[ix];
                                    gi_row[ix] += g * wv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = (ox * s).wrapping_add_signed(x_off);
                                    let g = g_row[ox];
                                    wacc += g * x_row[ix];
                                    gi_row[ix] += g * wv;
                                }
                            }
                        }
                        gws[widx] += wacc;
                    }
                }
            }
        }
        gin
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: Array2<f64>, // (out, in)
    b: Vec<f64>,
}

impl Linear {
    fn new(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = (3.0 / fan_in as f64).sqrt();
        let mut w = Array2::zeros((fan_out, fan_in));
        for v in w.iter_mut() {
            *v = rng.gen_range(-bound..=bound);
        }
        Self { w, b: vec![0.0; fan_out] }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (out, n) = self.w.dim();
        let mut y = self.b.clone();
        let ws = self.w.as_slice().unwrap();
        for (o, yo) in y.iter_mut().enumerate().take(out) {
            let row = &ws[o * n..(o + 1) * n];
            let mut acc = 0.0;
            for (wv, xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            *yo += acc;
        }
        y
    }

    fn backward(
        &self,
        x: &[f64],
        gout: &[f64],
        gw: &mut Array2<f64>,
        gb: &mut [f64],
    ) -> Vec<f64> {
        let (out, n) = self.w.dim();
        let mut gin = vec![0.0; n];
        let ws = self.w.as_slice().unwrap();
        let gws = gw.as_slice_mut().unwrap();
        for o in 0..out {
            let g = gout[o];
            gb[o] += g;
            if g == 0.0 {
                continue;
            }
            let row = &ws[o * n..(o + 1) * n];
            let grow = &mut gws[o * n..(o + 1) * n];
            for i in 0..n {
                grow[i] += g * x[i];
                gin[i] += g * row[i];
            }
        }
        gin
    }
}

const LEAKY_SLOPE: f64 = 0.1;

fn leaky_relu(x: &mut Array3<f64>) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

fn leaky_relu_vec(x: &mut [f64]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Backward through leaky ReLU given the pre-activation input.
fn leaky_relu_grad3(pre: &Array3<f64>, g: &mut Array3<f64>) {
    ndarray::Zip::from(g).and(pre).for_each(|gv, &p| {
        if p < 0.0 {
            *gv *= LEAKY_SLOPE;
        }
    });
}

fn leaky_relu_grad_vec(pre: &[f64], g: &mut [f64]) {
    for (gv, &p) in g.iter_mut().zip(pre) {
        if p < 0.0 {
            *gv *= LEAKY_SLOPE;
        }
    }
}

fn sigmoid(x: &mut Array3<f64>) {
    for v in x.iter_mut() {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
}

/// Backward through sigmoid given the post-activation output.
fn sigmoid_grad(out: &Array3<f64>, g: &mut Array3<f64>) {
    ndarray::Zip::from(g).and(out).for_each(|gv, &o| *gv *= o * (1.0 - o));
}

fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, h * 2, w * 2));
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v = x[(ch, y, xx)];
                out[(ch, 2 * y, 2 * xx)] = v;
                out[(ch, 2 * y, 2 * xx + 1)] = v;
                out[(ch, 2 * y + 1, 2 * xx)] = v;
                out[(ch, 2 * y + 1, 2 * xx + 1)] = v;
            }
        }
    }
    out
}

fn upsample2_grad(g: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = g.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[(ch, y, xx)] = g[(ch, 2 * y, 2 * xx)]
                    + g[(ch, 2 * y, 2 * xx + 1)]
                    + g[(ch, 2 * y + 1, 2 * xx)]
                    + g[(ch, 2 * y + 1, 2 * xx + 1)];
            }
        }
    }
    out
}

// ---- model ----------------------------------------------------------------

/// One latent half-code.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub values: Vec<f64>,
}

/// The two half-codes whose concatenation feeds the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPair {
    pub first: LatentCode,
    pub second: LatentCode,
}

/// Which latent concatenation feeds the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathwayMode {
    /// `I_AB(f) ‖ I_B(f)` — reconstruction of an original face.
    Original,
    /// `I_AB(f) ‖ I_AB(f)` — reconstruction of a character face (and the
    /// swap pathway at inference).
    Character,
}

pub struct LiaeModel {
    cfg: ModelConfig,
    enc: Vec<Conv2d>,
    inter_ab: Linear,
    inter_b: Linear,
    dec_fc: Linear,
    dec: Vec<Conv2d>,
    head_img: Conv2d,
    head_mask: Conv2d,
    ib_calls: AtomicU64,
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardCache {
    mode: PathwayMode,
    input: Array3<f64>,           // CHW
    enc_pre: Vec<Array3<f64>>,    // pre-activation per encoder stage
    enc_out: Vec<Array3<f64>>,    // post-activation per encoder stage
    features: Vec<f64>,           // flattened encoder output
    z_ab: Vec<f64>,
    z_b: Option<Vec<f64>>,
    dec_fc_pre: Vec<f64>,
    dec_inputs: Vec<Array3<f64>>, // input to each decoder conv (post-upsample)
    dec_pre: Vec<Array3<f64>>,    // pre-activation per decoder conv
    head_input: Array3<f64>,
    img_out: Array3<f64>,         // post-sigmoid CHW
    mask_out: Array3<f64>,        // post-sigmoid (1, H, W)
}

/// Per-layer gradient buffers, mirroring the model's parameters.
pub struct ModelGrads {
    enc: Vec<(Array4<f64>, Vec<f64>)>,
    inter_ab: (Array2<f64>, Vec<f64>),
    inter_b: (Array2<f64>, Vec<f64>),
    dec_fc: (Array2<f64>, Vec<f64>),
    dec: Vec<(Array4<f64>, Vec<f64>)>,
    head_img: (Array4<f64>, Vec<f64>),
    head_mask: (Array4<f64>, Vec<f64>),
}

impl ModelGrads {
    pub fn zeros_like(m: &LiaeModel) -> Self {
        let conv_zero = |c: &Conv2d| (Array4::zeros(c.w.dim()), vec![0.0; c.b.len()]);
        let lin_zero = |l: &Linear| (Array2::zeros(l.w.dim()), vec![0.0; l.b.len()]);
        Self {
            enc: m.enc.iter().map(conv_zero).collect(),
            inter_ab: lin_zero(&m.inter_ab),
            inter_b: lin_zero(&m.inter_b),
            dec_fc: lin_zero(&m.dec_fc),
            dec: m.dec.iter().map(conv_zero).collect(),
            head_img: conv_zero(&m.head_img),
            head_mask: conv_zero(&m.head_mask),
        }
    }

    pub fn add(&mut self, other: &ModelGrads) {
        for (slot, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (a, b) in slot.iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for slot in self.slices_mut() {
            for v in slot {
                *v *= s;
            }
        }
    }

    /// Gradient slices in the same order as `LiaeModel::param_slices`.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (w, b) in &self.enc {
            out.push(w.as_slice().unwrap());
            out.push(b);
        }
        for (w, b) in [&self.inter_ab, &self.inter_b, &self.dec_fc] {
            out.push(w.as_slice().unwrap());
            out.push(b);
        }
        for (w, b) in &self.dec {
            out.push(w.as_slice().unwrap());
            out.push(b);
        }
        for (w, b) in [&self.head_img, &self.head_mask] {
            out.push(w.as_slice().unwrap());
            out.push(b);
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (w, b) in &mut self.enc {
            out.push(w.as_slice_mut().unwrap());
            out.push(b);
        }
        for (w, b) in [&mut self.inter_ab, &mut self.inter_b, &mut self.dec_fc] {
            out.push(w.as_slice_mut().unwrap());
            out.push(b);
        }
        for (w, b) in &mut self.dec {
            out.push(w.as_slice_mut().unwrap());
            out.push(b);
        }
        for (w, b) in [&mut self.head_img, &mut self.head_mask] {
            out.push(w.as_slice_mut().unwrap());
            out.push(b);
        }
        out
    }

    /// L2 norm over every gradient entry.
    pub fn norm(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Gradient slices for the `I_B` intermediate only.
    pub fn inter_b_slices(&self) -> (&[f64], &[f64]) {
        (self.inter_b.0.as_slice().unwrap(), &self.inter_b.1)
    }
}

fn chw_from_image(img: &FaceImage) -> Array3<f64> {
    let (h, w, c) = img.pixels().dim();
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(ch, y, x)] = img.pixels()[(y, x, ch)];
            }
        }
    }
    out
}

fn image_from_chw(x: &Array3<f64>) -> FaceImage {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x2 in 0..w {
            for ch in 0..c {
                out[(y, x2, ch)] = x[(ch, y, x2)];
            }
        }
    }
    FaceImage::new(out).expect("sigmoid output in range")
}

impl LiaeModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2, c3, c4] = cfg.channels;
        let enc = vec![
            Conv2d::new(&mut rng, 3, c1, 3, 2, 1),
            Conv2d::new(&mut rng, c1, c2, 3, 2, 1),
            Conv2d::new(&mut rng, c2, c3, 3, 2, 1),
            Conv2d::new(&mut rng, c3, c4, 3, 2, 1),
        ];
        let feat = cfg.enc_features();
        let d = cfg.latent_dim;
        let inter_ab = Linear::new(&mut rng, feat, d);
        let inter_b = Linear::new(&mut rng, feat, d);
        let dec_fc = Linear::new(&mut rng, 2 * d, feat);
        let dec = vec![
            Conv2d::new(&mut rng, c4, c3, 3, 1, 1),
            Conv2d::new(&mut rng, c3, c2, 3, 1, 1),
            Conv2d::new(&mut rng, c2, c1, 3, 1, 1),
        ];
        let head_img = Conv2d::new(&mut rng, c1, 3, 3, 1, 1);
        let head_mask = Conv2d::new(&mut rng, c1, 1, 3, 1, 1);
        Ok(Self {
            cfg,
            enc,
            inter_ab,
            inter_b,
            dec_fc,
            dec,
            head_img,
            head_mask,
            ib_calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Number of times the `I_B` intermediate has been invoked.
    pub fn ib_call_count(&self) -> u64 {
        self.ib_calls.load(Ordering::Relaxed)
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for c in &self.enc {
            out.push(c.w.as_slice().unwrap());
            out.push(&c.b);
        }
        for l in [&self.inter_ab, &self.inter_b, &self.dec_fc] {
            out.push(l.w.as_slice().unwrap());
            out.push(&l.b);
        }
        for c in &self.dec {
            out.push(c.w.as_slice().unwrap());
            out.push(&c.b);
        }
        for c in [&self.head_img, &self.head_mask] {
            out.push(c.w.as_slice().unwrap());
            out.push(&c.b);
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.enc {
            out.push(c.w.as_slice_mut().unwrap());
            out.push(&mut c.b);
        }
        for l in [&mut self.inter_ab, &mut self.inter_b, &mut self.dec_fc] {
            out.push(l.w.as_slice_mut().unwrap());
            out.push(&mut l.b);
        }
        for c in &mut self.dec {
            out.push(c.w.as_slice_mut().unwrap());
            out.push(&mut c.b);
        }
        for c in [&mut self.head_img, &mut self.head_mask] {
            out.push(c.w.as_slice_mut().unwrap());
            out.push(&mut c.b);
        }
        out
    }

    fn check_resolution(&self, img: &FaceImage) -> Result<(), ModelError> {
        if img.resolution() != self.cfg.resolution {
            return Err(ModelError::ResolutionMismatch {
                input: img.resolution(),
                model: self.cfg.resolution,
            });
        }
        Ok(())
    }

    /// Full forward pass retaining every intermediate needed for backprop.
    pub fn forward_cached(
        &self,
        img: &FaceImage,
        mode: PathwayMode,
    ) -> Result<(FaceImage, Array2<f64>, LatentPair, ForwardCache), ModelError> {
        self.check_resolution(img)?;
        let input = chw_from_image(img);

        let mut enc_pre = Vec::with_capacity(self.enc.len());
        let mut enc_out = Vec::with_capacity(self.enc.len());
        let mut cur = input.clone();
        for conv in &self.enc {
            let pre = conv.forward(&cur);
            let mut post = pre.clone();
            leaky_relu(&mut post);
            enc_pre.push(pre);
            cur = post.clone();
            enc_out.push(post);
        }
        let features: Vec<f64> = cur.iter().copied().collect();

        let z_ab = self.inter_ab.forward(&features);
        let z_b = match mode {
            PathwayMode::Original => {
                self.ib_calls.fetch_add(1, Ordering::Relaxed);
                Some(self.inter_b.forward(&features))
            }
            PathwayMode::Character => None,
        };
        let second = z_b.clone().unwrap_or_else(|| z_ab.clone());
        let latent: Vec<f64> = z_ab.iter().chain(second.iter()).copied().collect();

        let dec_fc_pre = self.dec_fc.forward(&latent);
        let mut fc_act = dec_fc_pre.clone();
        leaky_relu_vec(&mut fc_act);
        let s = self.cfg.spatial();
        let c4 = self.cfg.channels[3];
        let mut cur = Array3::from_shape_vec((c4, s, s), fc_act).expect("shape");

        let mut dec_inputs = Vec::with_capacity(self.dec.len());
        let mut dec_pre = Vec::with_capacity(self.dec.len());
        for conv in &self.dec {
            let up = upsample2(&cur);
            let pre = conv.forward(&up);
            let mut post = pre.clone();
            leaky_relu(&mut post);
            dec_inputs.push(up);
            dec_pre.push(pre);
            cur = post;
        }
        let head_input = upsample2(&cur);

        let mut img_out = self.head_img.forward(&head_input);
        sigmoid(&mut img_out);
        let mut mask_out = self.head_mask.forward(&head_input);
        sigmoid(&mut mask_out);

        let out_img = image_from_chw(&img_out);
        let res = self.cfg.resolution;
        let mut out_mask = Array2::zeros((res, res));
        for y in 0..res {
            for x in 0..res {
                out_mask[(y, x)] = mask_out[(0, y, x)];
            }
        }
        let pair = LatentPair {
            first: LatentCode { values: z_ab.clone() },
            second: LatentCode { values: second },
        };
        let cache = ForwardCache {
            mode,
            input,
            enc_pre,
            enc_out,
            features,
            z_ab,
            z_b,
            dec_fc_pre,
            dec_inputs,
            dec_pre,
            head_input,
            img_out,
            mask_out,
        };
        Ok((out_img, out_mask, pair, cache))
    }

    /// Reconstruction pathway for an original face.
    pub fn forward_original(
        &self,
        img: &FaceImage,
    ) -> Result<(FaceImage, Array2<f64>, LatentPair), ModelError> {
        let (i, m, p, _) = self.forward_cached(img, PathwayMode::Original)?;
        Ok((i, m, p))
    }

    /// Reconstruction pathway for a character face; `I_B` is never invoked.
    pub fn forward_character(
        &self,
        img: &FaceImage,
    ) -> Result<(FaceImage, Array2<f64>, LatentPair), ModelError> {
        let (i, m, p, _) = self.forward_cached(img, PathwayMode::Character)?;
        Ok((i, m, p))
    }

    /// The face-swap pathway: the original face through `I_AB`, the code
    /// concatenated onto itself. Inference only; identical wiring to the
    /// character pathway.
    pub fn swap(&self, img: &FaceImage) -> Result<FaceImage, ModelError> {
        let (i, _, _, _) = self.forward_cached(img, PathwayMode::Character)?;
        Ok(i)
    }

    /// Decodes an explicit latent pair (test and analysis hook).
    pub fn decode_pair(&self, first: &LatentCode, second: &LatentCode) -> (FaceImage, Array2<f64>) {
        let latent: Vec<f64> =
            first.values.iter().chain(second.values.iter()).copied().collect();
        let dec_fc_pre = self.dec_fc.forward(&latent);
        let mut fc_act = dec_fc_pre;
        leaky_relu_vec(&mut fc_act);
        let s = self.cfg.spatial();
        let c4 = self.cfg.channels[3];
        let mut cur = Array3::from_shape_vec((c4, s, s), fc_act).expect("shape");
        for conv in &self.dec {
            let up = upsample2(&cur);
            let mut post = conv.forward(&up);
            leaky_relu(&mut post);
            cur = post;
        }
        let head_input = upsample2(&cur);
        let mut img_out = self.head_img.forward(&head_input);
        sigmoid(&mut img_out);
        let mut mask_out = self.head_mask.forward(&head_input);
        sigmoid(&mut mask_out);
        let res = self.cfg.resolution;
        let mut out_mask = Array2::zeros((res, res));
        for y in 0..res {
            for x in 0..res {
                out_mask[(y, x)] = mask_out[(0, y, x)];
            }
        }
        (image_from_chw(&img_out), out_mask)
    }

    /// Backpropagates image-space gradients (HWC layout for the image, H×W
    /// for the mask) into parameter gradients.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_img_hwc: &Array3<f64>,
        grad_mask: &Array2<f64>,
        grads: &mut ModelGrads,
    ) {
        let res = self.cfg.resolution;

        // Through the output sigmoids.
        let (gh, gw2, gc) = grad_img_hwc.dim();
        debug_assert_eq!((gh, gw2, gc), (res, res, 3));
        let mut g_img = Array3::zeros((gc, gh, gw2));
        for y in 0..gh {
            for x in 0..gw2 {
                for ch in 0..gc {
                    g_img[(ch, y, x)] = grad_img_hwc[(y, x, ch)];
                }
            }
        }
        sigmoid_grad(&cache.img_out, &mut g_img);
        let mut g_mask = Array3::zeros((1, res, res));
        for y in 0..res {
            for x in 0..res {
                g_mask[(0, y, x)] = grad_mask[(y, x)];
            }
        }
        sigmoid_grad(&cache.mask_out, &mut g_mask);

        // Heads share the same input tensor.
        let g_head_a = self.head_img.backward(
            &cache.head_input,
            &g_img,
            &mut grads.head_img.0,
            &mut grads.head_img.1,
        );
        let g_head_b = self.head_mask.backward(
            &cache.head_input,
            &g_mask,
            &mut grads.head_mask.0,
            &mut grads.head_mask.1,
        );
        let mut g = g_head_a;
        ndarray::Zip::from(&mut g).and(&g_head_b).for_each(|a, &b| *a += b);

        // Final upsample feeding the heads.
        let mut g = upsample2_grad(&g);

        // Decoder convs in reverse.
        for (i, conv) in self.dec.iter().enumerate().rev() {
            leaky_relu_grad3(&cache.dec_pre[i], &mut g);
            let (gw, gb) = &mut grads.dec[i];
            let gin = conv.backward(&cache.dec_inputs[i], &g, gw, gb);
            g = upsample2_grad(&gin);
        }

        // Decoder FC.
        let mut g_fc: Vec<f64> = g.iter().copied().collect();
        leaky_relu_grad_vec(&cache.dec_fc_pre, &mut g_fc);
        let latent: Vec<f64> = {
            let second = cache.z_b.as_ref().unwrap_or(&cache.z_ab);
            cache.z_ab.iter().chain(second.iter()).copied().collect()
        };
        let g_latent =
            self.dec_fc.backward(&latent, &g_fc, &mut grads.dec_fc.0, &mut grads.dec_fc.1);

        // Split the latent gradient across the two half-codes.
        let d = self.cfg.latent_dim;
        let mut g_features = vec![0.0; cache.features.len()];
        match cache.mode {
            PathwayMode::Original => {
                let ga = self.inter_ab.backward(
                    &cache.features,
                    &g_latent[..d],
                    &mut grads.inter_ab.0,
                    &mut grads.inter_ab.1,
                );
                let gb = self.inter_b.backward(
                    &cache.features,
                    &g_latent[d..],
                    &mut grads.inter_b.0,
                    &mut grads.inter_b.1,
                );
                for ((f, a), b) in g_features.iter_mut().zip(ga).zip(gb) {
                    *f = a + b;
                }
            }
            PathwayMode::Character => {
                // Both halves come from the same code.
                let g_ab: Vec<f64> =
                    g_latent[..d].iter().zip(&g_latent[d..]).map(|(a, b)| a + b).collect();
                let ga = self.inter_ab.backward(
                    &cache.features,
                    &g_ab,
                    &mut grads.inter_ab.0,
                    &mut grads.inter_ab.1,
                );
                g_features.copy_from_slice(&ga);
            }
        }

        // Encoder stages in reverse.
        let (c4, s) = (self.cfg.channels[3], self.cfg.spatial());
        let mut g = Array3::from_shape_vec((c4, s, s), g_features).expect("shape");
        for i in (0..self.enc.len()).rev() {
            leaky_relu_grad3(&cache.enc_pre[i], &mut g);
            let input = if i == 0 { &cache.input } else { &cache.enc_out[i - 1] };
            let (gw, gb) = &mut grads.enc[i];
            let gin = self.enc[i].backward(input, &g, gw, gb);
            if i > 0 {
                g = gin;
            }
        }
    }
}

// ---- optimizer ------------------------------------------------------------

/// Adaptive-moment optimizer over the model's flattened parameters, with an
/// optional adaptive-belief second moment.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// When set, the second moment tracks `(g − m)²` instead of `g²`.
    pub adabelief: bool,
}

impl Adam {
    pub fn new(model: &LiaeModel, learning_rate: f64, adabelief: bool) -> Self {
        let shapes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            adabelief,
        }
    }

    pub fn step(&mut self, model: &mut LiaeModel, grads: &ModelGrads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let params = model.param_slices_mut();
        for (((p, g), m), v) in
            params.into_iter().zip(grads.slices()).zip(&mut self.m).zip(&mut self.v)
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                let second = if self.adabelief {
                    let diff = gi - m[i];
                    diff * diff
                } else {
                    gi * gi
                };
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * second;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

// ---- checkpoints ----------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"GZSWCKPT";
const CKPT_VERSION: u32 = 1;

/// Serializable ChaCha8 RNG position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed_hex: String,
    pub word_pos_lo: u64,
    pub word_pos_hi: u64,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed();
        let pos = rng.get_word_pos();
        Self {
            seed_hex: seed.iter().map(|b| format!("{b:02x}")).collect(),
            word_pos_lo: pos as u64,
            word_pos_hi: (pos >> 64) as u64,
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, ModelError> {
        if self.seed_hex.len() != 64 {
            return Err(ModelError::BadHeader("rng seed hex length".into()));
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&self.seed_hex[2 * i..2 * i + 2], 16)
                .map_err(|e| ModelError::BadHeader(format!("rng seed hex: {e}")))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        Ok(rng)
    }
}

/// Checkpoint metadata stored alongside the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub iteration: u64,
    pub condition: Option<ConditionId>,
    pub rng: Option<RngState>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    model: ModelConfig,
    iteration: u64,
    condition: Option<ConditionId>,
    rng: Option<RngState>,
}

/// Writes a self-describing checkpoint: magic, version, JSON header
/// (architecture, iteration, condition, RNG state), then raw little-endian
/// `f64` weight blobs in parameter order.
pub fn save_checkpoint(
    model: &LiaeModel,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), ModelError> {
    let io_err = |source| ModelError::Io { path: path.display().to_string(), source };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let header = CheckpointHeader {
        format_version: CKPT_VERSION,
        model: model.cfg,
        iteration: meta.iteration,
        condition: meta.condition,
        rng: meta.rng.clone(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(CKPT_MAGIC).map_err(io_err)?;
    f.write_all(&CKPT_VERSION.to_le_bytes()).map_err(io_err)?;
    f.write_all(&(header_json.len() as u64).to_le_bytes()).map_err(io_err)?;
    f.write_all(&header_json).map_err(io_err)?;
    for slice in model.param_slices() {
        let mut buf = Vec::with_capacity(slice.len() * 8);
        for v in slice {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&buf).map_err(io_err)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(LiaeModel, CheckpointMeta), ModelError> {
    let io_err = |source| ModelError::Io { path: path.display().to_string(), source };
    let mut f = std::fs::File::open(path).map_err(io_err)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CKPT_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let mut buf4 = [0u8; 4];
    f.read_exact(&mut buf4).map_err(io_err)?;
    let version = u32::from_le_bytes(buf4);
    if version != CKPT_VERSION {
        return Err(ModelError::BadVersion(version));
    }
    let mut buf8 = [0u8; 8];
    f.read_exact(&mut buf8).map_err(io_err)?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes).map_err(io_err)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| ModelError::BadHeader(e.to_string()))?;

    let mut model = LiaeModel::new(header.model, 0)?;
    let mut rest = Vec::new();
    f.read_to_end(&mut rest).map_err(io_err)?;
    let wanted: usize = model.param_slices().iter().map(|s| s.len() * 8).sum();
    if rest.len() != wanted {
        return Err(ModelError::Truncated { wanted });
    }
    let mut offset = 0;
    for slice in model.param_slices_mut() {
        for v in slice.iter_mut() {
            let mut b = [0u8; 8];
            b.copy_from_slice(&rest[offset..offset + 8]);
            *v = f64::from_le_bytes(b);
            offset += 8;
        }
    }
    Ok((
        model,
        CheckpointMeta { iteration: header.iteration, condition: header.condition, rng: header.rng },
    ))
}

/// Loads a checkpoint and verifies it matches an expected architecture.
pub fn load_checkpoint_expecting(
    path: &Path,
    expected: &ModelConfig,
) -> Result<(LiaeModel, CheckpointMeta), ModelError> {
    let (model, meta) = load_checkpoint(path)?;
    if model.cfg != *expected {
        return Err(ModelError::ArchMismatch { expected: *expected, found: model.cfg });
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3 as A3;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig { resolution: 16, latent_dim: 6, channels: [2, 3, 4, 5] }
    }

    fn random_face(seed: u64, res: usize) -> FaceImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut px = A3::zeros((res, res, 3));
        for v in px.iter_mut() {
            *v = rng.gen_range(0.1..=0.9);
        }
        FaceImage::new(px).unwrap()
    }

    #[test]
    fn output_shape_and_range_untrained() {
        let model = LiaeModel::new(ModelConfig::default(), 1).unwrap();
        let img = random_face(2, 64);
        let (out, mask, _) = model.forward_original(&img).unwrap();
        assert_eq!(out.resolution(), 64);
        for &v in out.pixels().iter() {
            assert!((0.0..=1.0).contains(&v) && v.is_finite());
        }
        for &v in mask.iter() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn character_pathway_self_concatenates() {
        let model = LiaeModel::new(tiny_cfg(), 3).unwrap();
        let img = random_face(4, 16);
        let (_, _, pair) = model.forward_character(&img).unwrap();
        assert_eq!(pair.first, pair.second);
    }

    #[test]
    fn original_pathway_uses_both_intermediates() {
        let model = LiaeModel::new(tiny_cfg(), 3).unwrap();
        let img = random_face(4, 16);
        let (_, _, pair) = model.forward_original(&img).unwrap();
        assert_ne!(pair.first, pair.second);
    }

    #[test]
    fn ib_counter_untouched_by_character_passes() {
        let model = LiaeModel::new(tiny_cfg(), 5).unwrap();
        let img = random_face(6, 16);
        assert_eq!(model.ib_call_count(), 0);
        model.forward_character(&img).unwrap();
        model.swap(&img).unwrap();
        assert_eq!(model.ib_call_count(), 0);
        model.forward_original(&img).unwrap();
        assert_eq!(model.ib_call_count(), 1);
    }

    #[test]
    fn swap_equals_duplicated_first_latent() {
        let model = LiaeModel::new(tiny_cfg(), 7).unwrap();
        let img = random_face(8, 16);
        let (_, _, pair) = model.forward_original(&img).unwrap();
        let (expected, _) = model.decode_pair(&pair.first, &pair.first);
        let swapped = model.swap(&img).unwrap();
        assert_eq!(swapped, expected);
    }

    #[test]
    fn swap_is_deterministic() {
        let model = LiaeModel::new(tiny_cfg(), 9).unwrap();
        let img = random_face(10, 16);
        assert_eq!(model.swap(&img).unwrap(), model.swap(&img).unwrap());
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let model = LiaeModel::new(tiny_cfg(), 9).unwrap();
        let img = random_face(10, 32);
        assert!(matches!(
            model.swap(&img),
            Err(ModelError::ResolutionMismatch { input: 32, model: 16 })
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Full-model gradient check against a fixed linear readout loss:
        // L = Σ R_img·img + Σ R_mask·mask.
        let cfg = tiny_cfg();
        let img = random_face(11, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut r_img = A3::zeros((16, 16, 3));
        for v in r_img.iter_mut() {
            *v = rng.gen_range(-1.0..=1.0);
        }
        let mut r_mask = Array2::zeros((16, 16));
        for v in r_mask.iter_mut() {
            *v = rng.gen_range(-1.0..=1.0);
        }

        for mode in [PathwayMode::Original, PathwayMode::Character] {
            let model = LiaeModel::new(cfg, 13).unwrap();
            let (_, _, _, cache) = model.forward_cached(&img, mode).unwrap();
            let mut grads = ModelGrads::zeros_like(&model);
            model.backward(&cache, &r_img, &r_mask, &mut grads);

            let loss_of = |m: &LiaeModel| -> f64 {
                let (oi, om, _, _) = m.forward_cached(&img, mode).unwrap();
                let a: f64 =
                    oi.pixels().iter().zip(r_img.iter()).map(|(x, r)| x * r).sum();
                let b: f64 = om.iter().zip(r_mask.iter()).map(|(x, r)| x * r).sum();
                a + b
            };

            // Spot-check a few parameters in every layer slice.
            let h = 1e-6;
            let n_slices = grads.slices().len();
            for slice_idx in 0..n_slices {
                let len = grads.slices()[slice_idx].len();
                for &p_idx in &[0usize, len / 2, len - 1] {
                    let mut mp = LiaeModel::new(cfg, 13).unwrap();
                    mp.param_slices_mut()[slice_idx][p_idx] += h;
                    let mut mm = LiaeModel::new(cfg, 13).unwrap();
                    mm.param_slices_mut()[slice_idx][p_idx] -= h;
                    let fd = (loss_of(&mp) - loss_of(&mm)) / (2.0 * h);
                    let an = grads.slices()[slice_idx][p_idx];
                    // Relative tolerance with an absolute floor: central
                    // differencing bottoms out near 1e-9 for this loss scale.
                    let diff = (fd - an).abs();
                    let denom = fd.abs().max(an.abs());
                    assert!(
                        diff < 1e-7 || diff / denom < 1e-4,
                        "mode {mode:?} slice {slice_idx} idx {p_idx}: fd {fd} vs analytic {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn character_backward_leaves_ib_gradient_zero() {
        let model = LiaeModel::new(tiny_cfg(), 20).unwrap();
        let img = random_face(21, 16);
        let r_img = A3::from_elem((16, 16, 3), 0.5);
        let r_mask = Array2::from_elem((16, 16), 0.25);

        let (_, _, _, cache) = model.forward_cached(&img, PathwayMode::Character).unwrap();
        let mut grads = ModelGrads::zeros_like(&model);
        model.backward(&cache, &r_img, &r_mask, &mut grads);
        let (w, b) = grads.inter_b_slices();
        assert!(w.iter().all(|&v| v == 0.0));
        assert!(b.iter().all(|&v| v == 0.0));

        // The original pathway reaches every parameter group.
        let (_, _, _, cache) = model.forward_cached(&img, PathwayMode::Original).unwrap();
        let mut grads = ModelGrads::zeros_like(&model);
        model.backward(&cache, &r_img, &r_mask, &mut grads);
        for (i, slice) in grads.slices().iter().enumerate() {
            assert!(slice.iter().any(|&v| v != 0.0), "slice {i} has all-zero gradient");
        }
    }

    #[test]
    fn adam_step_with_zero_grads_is_a_no_op() {
        let mut model = LiaeModel::new(tiny_cfg(), 30).unwrap();
        let before: Vec<f64> =
            model.param_slices().iter().flat_map(|s| s.iter().copied()).collect::<Vec<_>>();
        let grads = ModelGrads::zeros_like(&model);
        let mut opt = Adam::new(&model, 1e-2, false);
        opt.step(&mut model, &grads);
        let after: Vec<f64> =
            model.param_slices().iter().flat_map(|s| s.iter().copied()).collect::<Vec<_>>();
        assert_eq!(before, after);
    }

    #[test]
    fn checkpoint_round_trips_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let model = LiaeModel::new(tiny_cfg(), 40).unwrap();
        let img = random_face(41, 16);
        let before = model.swap(&img).unwrap();
        let meta = CheckpointMeta { iteration: 123, condition: Some(ConditionId::DflGaze), rng: None };
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &meta, &path).unwrap();
        let (loaded, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta2.iteration, 123);
        assert_eq!(meta2.condition, Some(ConditionId::DflGaze));
        let after = loaded.swap(&img).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn checkpoint_latent_dim_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let model = LiaeModel::new(tiny_cfg(), 42).unwrap();
        let meta = CheckpointMeta { iteration: 0, condition: None, rng: None };
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &meta, &path).unwrap();
        let other = ModelConfig { latent_dim: 12, ..tiny_cfg() };
        assert!(matches!(
            load_checkpoint_expecting(&path, &other),
            Err(ModelError::ArchMismatch { .. })
        ));
    }

    #[test]
    fn rng_state_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        rng.set_stream(5);
        let _: u64 = rng.gen();
        let _: u64 = rng.gen();
        let state = RngState::capture(&rng);
        let mut restored = state.restore().unwrap();
        let mut rng2 = rng.clone();
        for _ in 0..10 {
            assert_eq!(rng2.gen::<u64>(), restored.gen::<u64>());
        }
    }

    #[test]
    fn shared_weights_affect_all_pathways() {
        let mut model = LiaeModel::new(tiny_cfg(), 50).unwrap();
        let img = random_face(51, 16);
        let swap_a = model.swap(&img).unwrap();
        let char_a = model.forward_character(&img).unwrap().0;
        let orig_a = model.forward_original(&img).unwrap().0;
        // Perturb one encoder weight: every pathway output must change.
        model.param_slices_mut()[0][0] += 0.5;
        assert_ne!(model.swap(&img).unwrap(), swap_a);
        assert_ne!(model.forward_character(&img).unwrap().0, char_a);
        assert_ne!(model.forward_original(&img).unwrap().0, orig_a);
    }
}
