//! Ray sampling and emission-absorption compositing.
//!
//! For samples `k = 0..N` along a ray with densities `σ_k`, colors `c_k` and
//! segment lengths `δ_k`:
//!
//! ```text
//! α_k = 1 - exp(-σ_k δ_k)
//! T_k = Π_{j<k} (1 - α_j)
//! C   = Σ_k T_k α_k c_k + T_N · background
//! ```
//!
//! Rendering is parallel over row blocks; every pixel draws its stratified
//! offsets from a stream derived from `(seed, pixel index)`, so images do not
//! depend on the worker count.

mod image;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{generate_rays, CameraIntrinsics, Pose, Ray, Vec3};
use crate::rng;

pub use self::image::{contact_sheet, quantize, ImageBuffer};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub n_samples: usize,
    pub t_near: f64,
    pub t_far: f64,
    pub stratified: bool,
    pub background: f64,
    /// Samples whose compositing weight falls below this skip the color
    /// network when rendering images. Zero evaluates every sample.
    pub min_weight: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_samples: 48,
            t_near: 0.0,
            t_far: 1.0e3,
            stratified: true,
            background: 0.0,
            min_weight: 1e-5,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_samples >= 2
            && self.t_near >= 0.0
            && self.t_near < self.t_far
            && (0.0..=1.0).contains(&self.background)
            && self.min_weight >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid sampling config {self:?}")))
        }
    }

    /// Same config with midpoint (non-random) sampling.
    pub fn deterministic(&self) -> Self {
        Self {
            stratified: false,
            ..*self
        }
    }
}

/// Positions along one ray: sample distances and segment lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub ts: Vec<f64>,
    pub deltas: Vec<f64>,
}

/// Splits the part of `ray` inside the scene cube into `n_samples` equal
/// bins and places one sample per bin: at the bin center, or uniformly
/// inside it when stratified. `δ_k = t_{k+1} - t_k`, and the last segment
/// runs to the exit point. `None` when the ray misses the cube.
pub fn sample_ray<R: Rng + ?Sized>(
    ray: &Ray,
    sampling: &SamplingConfig,
    bound: f64,
    rng: Option<&mut R>,
) -> Option<RaySamples> {
    let clipped = Ray {
        t_near: ray.t_near.max(sampling.t_near),
        t_far: ray.t_far.min(sampling.t_far),
        ..*ray
    };
    let (lo, hi) = clipped.clip_to_cube(bound)?;
    let n = sampling.n_samples;
    let width = (hi - lo) / n as f64;
    let ts: Vec<f64> = match rng {
        Some(rng) if sampling.stratified => (0..n)
            .map(|k| lo + (k as f64 + rng.random::<f64>()) * width)
            .collect(),
        _ => (0..n).map(|k| lo + (k as f64 + 0.5) * width).collect(),
    };
    let mut deltas: Vec<f64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
    deltas.push(hi - ts[n - 1]);
    Some(RaySamples { ts, deltas })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub sigma: f64,
    pub color: [f64; 3],
    pub delta: f64,
    pub t: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Composite {
    pub color: [f64; 3],
    pub alpha: f64,
    pub depth: f64,
}

const DEPTH_EPS: f64 = 1e-10;

/// Compositing weights `T_k α_k` and the final transmittance.
pub fn weights(sigmas: &[f64], deltas: &[f64]) -> (Vec<f64>, f64) {
    let mut t = 1.0;
    let w = sigmas
        .iter()
        .zip(deltas)
        .map(|(&s, &d)| {
            let keep = (-s * d).exp();
            let w = t * (1.0 - keep);
            t *= keep;
            w
        })
        .collect();
    (w, t)
}

pub fn composite(samples: &[Sample], background: f64) -> Composite {
    let sigmas: Vec<f64> = samples.iter().map(|s| s.sigma).collect();
    let deltas: Vec<f64> = samples.iter().map(|s| s.delta).collect();
    let (w, t_final) = weights(&sigmas, &deltas);
    let mut color = [t_final * background; 3];
    let mut depth = 0.0;
    for (s, &wk) in samples.iter().zip(&w) {
        for (c, sc) in color.iter_mut().zip(&s.color) {
            *c += wk * sc;
        }
        depth += wk * s.t;
    }
    let alpha = 1.0 - t_final;
    Composite {
        color,
        alpha,
        depth: depth / alpha.max(DEPTH_EPS),
    }
}

/// Gradients of a composited color with respect to the per-sample inputs.
///
/// Given `g = dL/dC`, returns `dL/dc_k = w_k g` (3 per sample) and
/// `dL/dσ_k = δ_k [T_{k+1} ⟨g, c_k⟩ - Σ_{j>k} w_j ⟨g, c_j⟩ - T_N ⟨g, bg⟩]`.
pub fn composite_backward(
    sigmas: &[f64],
    deltas: &[f64],
    colors: &[[f64; 3]],
    background: f64,
    grad: [f64; 3],
) -> (Vec<[f64; 3]>, Vec<f64>) {
    let n = sigmas.len();
    let (w, t_final) = weights(sigmas, deltas);
    let dot = |c: &[f64; 3]| grad[0] * c[0] + grad[1] * c[1] + grad[2] * c[2];
    let bg_term = t_final * background * (grad[0] + grad[1] + grad[2]);
    let d_color = w.iter().map(|&wk| [wk * grad[0], wk * grad[1], wk * grad[2]]).collect();
    let mut d_sigma = vec![0.0; n];
    // Transmittance after sample k, accumulated front to back.
    let mut t_after = Vec::with_capacity(n);
    let mut t = 1.0;
    for (&s, &d) in sigmas.iter().zip(deltas) {
        t *= (-s * d).exp();
        t_after.push(t);
    }
    let mut suffix = 0.0;
    for k in (0..n).rev() {
        let ck = dot(&colors[k]);
        d_sigma[k] = deltas[k] * (t_after[k] * ck - suffix - bg_term);
        suffix += w[k] * ck;
    }
    (d_color, d_sigma)
}

/// Densities of a batch of points plus whatever per-point state the color
/// stage needs (density features for a learned field).
pub struct DensityBatch {
    pub sigma: Vec<f64>,
    pub features: Array2<f64>,
}

/// Anything that can be volume-rendered: a density stage that depends on
/// position only, followed by a color stage.
pub trait VolumeField: Sync {
    /// Half-extent of the cube outside which the field is empty.
    fn bound(&self) -> f64;
    fn density(&self, points: &[Vec3]) -> DensityBatch;
    /// RGB in `[0, 1]` for the selected rows of density features.
    fn color(&self, features: ArrayView2<f64>, directions: &[Vec3], appearance: &[f64]) -> Array2<f64>;
}

const RAYS_PER_TASK: usize = 256;

/// Composites a set of rays. `first_pixel` is the pixel index of `rays[0]`,
/// used to derive the per-pixel sampling stream.
pub fn render_rays<F: VolumeField + ?Sized>(
    field: &F,
    rays: &[Ray],
    first_pixel: usize,
    e_app: &[f64],
    sampling: &SamplingConfig,
    seed: u64,
) -> Vec<Composite> {
    let mut points = Vec::new();
    let mut dirs = Vec::new();
    let mut ts = Vec::new();
    let mut deltas = Vec::new();
    let mut ranges = Vec::with_capacity(rays.len());
    for (k, ray) in rays.iter().enumerate() {
        let start = points.len();
        let mut r = rng::stream(seed, &[rng::label::PIXEL, (first_pixel + k) as u64]);
        if let Some(s) = sample_ray(ray, sampling, field.bound(), Some(&mut r)) {
            for (&t, &d) in s.ts.iter().zip(&s.deltas) {
                points.push(ray.at(t));
                dirs.push(ray.direction);
                ts.push(t);
                deltas.push(d);
            }
        }
        ranges.push(start..points.len());
    }
    if points.is_empty() {
        return vec![
            Composite {
                color: [sampling.background; 3],
                alpha: 0.0,
                depth: 0.0,
            };
            rays.len()
        ];
    }
    let dens = field.density(&points);
    let mut w = vec![0.0; points.len()];
    let mut t_final = vec![1.0; rays.len()];
    for (ri, range) in ranges.iter().enumerate() {
        let (wr, tf) = weights(&dens.sigma[range.clone()], &deltas[range.clone()]);
        w[range.clone()].copy_from_slice(&wr);
        t_final[ri] = tf;
    }
    let selected: Vec<usize> = (0..points.len())
        .filter(|&i| w[i] > sampling.min_weight || (sampling.min_weight == 0.0 && w[i] >= 0.0))
        .collect();
    let mut colors = vec![[0.0; 3]; points.len()];
    if !selected.is_empty() {
        let feats = dens.features.select(ndarray::Axis(0), &selected);
        let sel_dirs: Vec<Vec3> = selected.iter().map(|&i| dirs[i]).collect();
        let rgb = field.color(feats.view(), &sel_dirs, e_app);
        for (row, &i) in selected.iter().enumerate() {
            colors[i] = [rgb[[row, 0]], rgb[[row, 1]], rgb[[row, 2]]];
        }
    }
    ranges
        .iter()
        .enumerate()
        .map(|(ri, range)| {
            let mut color = [t_final[ri] * sampling.background; 3];
            let mut depth = 0.0;
            for i in range.clone() {
                for c in 0..3 {
                    color[c] += w[i] * colors[i][c];
                }
                depth += w[i] * ts[i];
            }
            let alpha = 1.0 - t_final[ri];
            Composite {
                color,
                alpha,
                depth: depth / alpha.max(DEPTH_EPS),
            }
        })
        .collect()
}

/// Renders an `H×W` RGB image with alpha. Deterministic in `seed`.
pub fn render_image<F: VolumeField + ?Sized>(
    field: &F,
    pose: &Pose,
    intr: &CameraIntrinsics,
    e_app: &[f64],
    sampling: &SamplingConfig,
    seed: u64,
) -> ImageBuffer {
    let rays = generate_rays(pose, intr);
    let parts: Vec<Vec<Composite>> = rays
        .par_chunks(RAYS_PER_TASK)
        .enumerate()
        .map(|(ci, chunk)| render_rays(field, chunk, ci * RAYS_PER_TASK, e_app, sampling, seed))
        .collect();
    let (w, h) = (intr.width as usize, intr.height as usize);
    let mut img = ImageBuffer::new(w, h, 3, 0.0);
    for (i, c) in parts.into_iter().flatten().enumerate() {
        for k in 0..3 {
            img.values[3 * i + k] = c.color[k].clamp(0.0, 1.0);
        }
        img.alpha[i] = c.alpha.clamp(0.0, 1.0);
    }
    img
}
