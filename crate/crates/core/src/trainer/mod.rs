//! Fitting a radiance field to posed images.
//!
//! Each iteration draws a batch of pixels uniformly over all training
//! images, renders them through the field with stratified samples, and takes
//! one Adam step on the photometric MSE plus a total-variation penalty on
//! the plane grids. Gradients are exact reverse-mode derivatives assembled
//! from [`nn`], the compositing backward pass and the plane encoding
//! backward pass.

pub mod adam;
pub mod nn;
mod state;

use std::fmt::Write as _;

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset_io::{self, DatasetManifest};
use crate::error::{Error, Result};
use crate::field::encoding::{encode_position_backward, PlaneGrid};
use crate::field::{FieldConfig, FieldGradients, ParamBlock, RadianceField};
use crate::geometry::{pixel_ray, CameraIntrinsics, Pose, Ray, Vec3};
use crate::renderer::{composite_backward, render_image, sample_ray, weights, ImageBuffer, RaySamples, SamplingConfig};
use crate::rng;
use crate::scene_synth::LightingCondition;

use self::adam::{Adam, AdamConfig};
use self::nn::{sigmoid, softplus};

pub use self::state::{TrainState, STATE_KIND};

/// PSNR reported for identical images.
pub const PSNR_IDENTICAL: f64 = 99.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Adam step size for the plane grids.
    pub grid_lr: f64,
    /// Adam step size for both MLPs.
    pub mlp_lr: f64,
    /// Adam step size for the appearance table.
    pub appearance_lr: f64,
    pub iterations: usize,
    pub rays_per_batch: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub tv_weight: f64,
    /// Validation cadence in iterations.
    pub eval_every: usize,
    /// Composite each ray over a random background level when the training
    /// images store coverage. Keeps empty space from settling into faint
    /// dark density that matches a black background.
    pub random_background: bool,
    pub sampling: SamplingConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            grid_lr: 1e-2,
            mlp_lr: 1e-3,
            appearance_lr: 1e-2,
            iterations: 3000,
            rays_per_batch: 1024,
            seed: 0,
            val_fraction: 0.1,
            tv_weight: 1e-4,
            eval_every: 250,
            random_background: true,
            sampling: SamplingConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.grid_lr > 0.0
            && self.mlp_lr > 0.0
            && self.appearance_lr > 0.0
            && self.rays_per_batch > 0
            && self.val_fraction > 0.0
            && self.val_fraction < 1.0
            && self.tv_weight >= 0.0
            && self.eval_every > 0;
        if !ok {
            return Err(Error::Config(format!("invalid train config {self:?}")));
        }
        self.sampling.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    /// Mean batch loss since the previous entry.
    pub loss: f64,
    pub val_psnr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Validation PSNR of the field before the first update.
    pub initial_val_psnr: f64,
    pub entries: Vec<LogEntry>,
    /// Total loss of every iteration's batch.
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,val_psnr\n");
        for e in &self.entries {
            writeln!(out, "{},{},{}", e.iteration, e.loss, e.val_psnr).expect("writing to a String");
        }
        out
    }

    /// Mean of the `window` losses ending at iteration `end` (1-based).
    pub fn smoothed_loss(&self, end: usize, window: usize) -> f64 {
        let end = end.min(self.losses.len());
        let start = end.saturating_sub(window);
        let w = &self.losses[start..end];
        w.iter().sum::<f64>() / w.len().max(1) as f64
    }

    pub fn best_val_psnr(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.val_psnr)
            .fold(self.initial_val_psnr, f64::max)
    }
}

pub fn photometric_loss(pred: &[f64], gt: &[f64]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "loss operands differ in length");
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / pred.len() as f64
}

/// `10·log10(1/MSE)` over all values; [`PSNR_IDENTICAL`] when equal.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(Error::Data(format!(
            "PSNR of differently shaped images {}x{}x{} and {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(psnr_from_mse(photometric_loss(&a.values, &b.values)))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        PSNR_IDENTICAL
    } else {
        -10.0 * mse.log10()
    }
}

/// A training or validation image held in memory as grayscale.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub label: String,
    pub pose: Pose,
    pub pixels: Vec<f64>,
    /// Per-pixel coverage, when the image stores it. `pixels` are then
    /// composited over black.
    pub alpha: Option<Vec<f64>>,
    pub lighting: Option<LightingCondition>,
}

pub fn load_views(manifest: &DatasetManifest) -> Result<Vec<View>> {
    let intr = &manifest.intrinsics;
    manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let (img, has_alpha) = manifest.load_image_coverage(i)?;
            if (img.width, img.height) != (intr.width as usize, intr.height as usize) {
                return Err(Error::Data(format!(
                    "{}: image is {}x{}, intrinsics say {}x{}",
                    r.image, img.width, img.height, intr.width, intr.height
                )));
            }
            Ok(View {
                label: r.image.clone(),
                pose: r.pose()?,
                pixels: img.values,
                alpha: has_alpha.then_some(img.alpha),
                lighting: r.lighting().copied(),
            })
        })
        .collect()
}

/// One pixel of a batch, with its fixed sample positions.
#[derive(Clone, Debug)]
pub struct BatchRay {
    pub ray: Ray,
    /// Grayscale target, compared against all three predicted channels.
    pub target: f64,
    /// Level the prediction is composited over; `target` uses the same one.
    pub background: f64,
    pub embedding: usize,
    pub samples: Option<RaySamples>,
}

#[derive(Clone, Debug, Default)]
pub struct RayBatch {
    pub rays: Vec<BatchRay>,
}

impl RayBatch {
    /// `n` pixels drawn uniformly over all pixels of `views`; view `i` uses
    /// embedding `i`. With `random_background`, rays of views that store
    /// coverage get a uniform background level and the target is
    /// recomposited over it; all other rays use `sampling.background`.
    pub fn sample<R: Rng + ?Sized>(
        views: &[View],
        intr: &CameraIntrinsics,
        n: usize,
        sampling: &SamplingConfig,
        bound: f64,
        random_background: bool,
        rng: &mut R,
    ) -> Self {
        let pixels = intr.pixel_count();
        let rays = (0..n)
            .map(|_| {
                let vi = rng.random_range(0..views.len());
                let pi = rng.random_range(0..pixels);
                let (u, v) = ((pi % intr.width as usize) as u32, (pi / intr.width as usize) as u32);
                let ray = pixel_ray(&views[vi].pose, intr, u, v);
                let samples = sample_ray(&ray, sampling, bound, Some(&mut *rng));
                let value = views[vi].pixels[pi];
                // Drawn unconditionally so the pixel stream does not depend
                // on the flag.
                let bg: f64 = rng.random();
                let (target, background) = match &views[vi].alpha {
                    Some(a) if random_background => (value + bg * (1.0 - a[pi]), bg),
                    _ => (value, sampling.background),
                };
                BatchRay {
                    ray,
                    target,
                    background,
                    embedding: vi,
                    samples,
                }
            })
            .collect();
        Self { rays }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub photometric: f64,
    pub tv: f64,
}

impl LossParts {
    pub fn total(&self, tv_weight: f64) -> f64 {
        self.photometric + tv_weight * self.tv
    }
}

/// Mean squared difference between neighboring nodes, summed over planes
/// and resolutions. When `grad` is given, `scale · d tv / d planes` is added
/// to it.
pub fn total_variation(grids: &[PlaneGrid], mut grad: Option<&mut [PlaneGrid]>, scale: f64) -> f64 {
    let mut tv = 0.0;
    for (gi, g) in grids.iter().enumerate() {
        let (r, f) = (g.resolution, g.features);
        let norm = 1.0 / (2 * (r - 1) * r * f) as f64;
        for plane in 0..3 {
            let p = &g.planes[plane];
            let mut gp = grad.as_deref_mut().map(|gr| &mut gr[gi].planes[plane]);
            for i in 0..r {
                for j in 0..r {
                    let a = (i * r + j) * f;
                    let neighbors = [(i + 1 < r).then(|| a + r * f), (j + 1 < r).then(|| a + f)];
                    for b in neighbors.into_iter().flatten() {
                        for k in 0..f {
                            let d = p[b + k] - p[a + k];
                            tv += norm * d * d;
                            if let Some(gp) = gp.as_deref_mut() {
                                let g = scale * 2.0 * norm * d;
                                gp[b + k] += g;
                                gp[a + k] -= g;
                            }
                        }
                    }
                }
            }
        }
    }
    tv
}

/// Forward quantities of a batch kept for the backward pass.
struct BatchForward {
    points: Vec<Vec3>,
    /// Ray index and sample range of each ray with samples.
    spans: Vec<(usize, std::ops::Range<usize>)>,
    deltas: Vec<f64>,
    raw_density: Array2<f64>,
    sigma: Vec<f64>,
    colors: Array2<f64>,
    predictions: Vec<[f64; 3]>,
    density_trace: nn::MlpTrace,
    color_trace: nn::MlpTrace,
}

fn forward_batch(field: &RadianceField, batch: &RayBatch) -> BatchForward {
    let mut points = Vec::new();
    let mut dirs = Vec::new();
    let mut deltas = Vec::new();
    let mut embeds: Vec<&[f64]> = Vec::new();
    let mut spans = Vec::new();
    for (ri, br) in batch.rays.iter().enumerate() {
        if let Some(s) = &br.samples {
            let start = points.len();
            let e = field.appearance.get(br.embedding);
            for (&t, &d) in s.ts.iter().zip(&s.deltas) {
                points.push(br.ray.at(t));
                dirs.push(br.ray.direction);
                deltas.push(d);
                embeds.push(e);
            }
            spans.push((ri, start..points.len()));
        }
    }
    let enc = field.encode_positions(&points);
    let (raw_density, density_trace) = field.density_mlp.forward_traced(enc);
    let sigma: Vec<f64> = raw_density.column(0).iter().map(|&r| softplus(r)).collect();
    let feats = raw_density.slice(s![.., 1..]);
    let x = field.color_input(feats, &dirs, &embeds);
    let (logits, color_trace) = field.color_mlp.forward_traced(x);
    let colors = logits.mapv(sigmoid);
    let mut predictions: Vec<[f64; 3]> = batch.rays.iter().map(|br| [br.background; 3]).collect();
    for (ri, range) in &spans {
        let (w, t_final) = weights(&sigma[range.clone()], &deltas[range.clone()]);
        let mut c = [t_final * batch.rays[*ri].background; 3];
        for (k, wk) in range.clone().zip(w) {
            for ch in 0..3 {
                c[ch] += wk * colors[[k, ch]];
            }
        }
        predictions[*ri] = c;
    }
    BatchForward {
        points,
        spans,
        deltas,
        raw_density,
        sigma,
        colors,
        predictions,
        density_trace,
        color_trace,
    }
}

fn photometric_of(batch: &RayBatch, predictions: &[[f64; 3]]) -> f64 {
    let n = (3 * batch.rays.len()).max(1) as f64;
    batch
        .rays
        .iter()
        .zip(predictions)
        .map(|(br, p)| p.iter().map(|&c| (c - br.target) * (c - br.target)).sum::<f64>())
        .sum::<f64>()
        / n
}

/// Loss of a batch without gradients.
pub fn batch_loss(field: &RadianceField, batch: &RayBatch) -> LossParts {
    let fwd = forward_batch(field, batch);
    LossParts {
        photometric: photometric_of(batch, &fwd.predictions),
        tv: total_variation(&field.grids, None, 0.0),
    }
}

/// Loss and exact gradients of `photometric + tv_weight · tv`.
pub fn loss_and_gradients(field: &RadianceField, batch: &RayBatch, tv_weight: f64) -> (LossParts, FieldGradients) {
    let mut grads = FieldGradients::zeros_like(field);
    let tv = total_variation(&field.grids, Some(&mut grads.grids), tv_weight);
    let fwd = forward_batch(field, batch);
    let photometric = photometric_of(batch, &fwd.predictions);
    let parts = LossParts { photometric, tv };
    if fwd.points.is_empty() {
        return (parts, grads);
    }

    let n_points = fwd.points.len();
    let scale = 2.0 / (3 * batch.rays.len()) as f64;
    let mut d_logits = Array2::zeros((n_points, 3));
    let mut d_raw = Array2::zeros(fwd.raw_density.raw_dim());
    for (ri, range) in &fwd.spans {
        let br = &batch.rays[*ri];
        let pred = fwd.predictions[*ri];
        let g = pred.map(|c| scale * (c - br.target));
        let cols: Vec<[f64; 3]> = range
            .clone()
            .map(|k| [fwd.colors[[k, 0]], fwd.colors[[k, 1]], fwd.colors[[k, 2]]])
            .collect();
        let (dc, ds) = composite_backward(&fwd.sigma[range.clone()], &fwd.deltas[range.clone()], &cols, br.background, g);
        for (off, k) in range.clone().enumerate() {
            for ch in 0..3 {
                let c = cols[off][ch];
                d_logits[[k, ch]] = dc[off][ch] * c * (1.0 - c);
            }
            d_raw[[k, 0]] = ds[off] * sigmoid(fwd.raw_density[[k, 0]]);
        }
    }

    let (d_color_in, color_grad) = field.color_mlp.backward(&fwd.color_trace, d_logits);
    grads.color_mlp = color_grad;
    let cfg = &field.config;
    let (fs, fd) = (cfg.density_features, cfg.direction_features());
    d_raw.slice_mut(s![.., 1..]).assign(&d_color_in.slice(s![.., ..fs]));
    for (ri, range) in &fwd.spans {
        let e = batch.rays[*ri].embedding;
        let mut row = grads.appearance.row_mut(e);
        for k in range.clone() {
            row += &d_color_in.slice(s![k, fs + fd..]);
        }
    }

    let (d_enc, density_grad) = field.density_mlp.backward(&fwd.density_trace, d_raw);
    grads.density_mlp = density_grad;
    for (k, p) in fwd.points.iter().enumerate() {
        let g = d_enc.row(k);
        encode_position_backward(
            &field.grids,
            cfg.scene_bound,
            p,
            g.as_slice().expect("standard layout"),
            &mut grads.grids,
        );
    }
    (parts, grads)
}

/// Adam with one learning rate per group: plane grids, MLPs, appearance
/// table.
pub fn field_optimizer(field: &RadianceField, cfg: &TrainConfig) -> Adam {
    Adam::new(field.param_slices().into_iter().map(|(block, s)| {
        let lr = match block {
            ParamBlock::Planes => cfg.grid_lr,
            ParamBlock::Appearance => cfg.appearance_lr,
            _ => cfg.mlp_lr,
        };
        (AdamConfig::with_lr(lr), s.len())
    }))
}

/// Error raised by training. Numerical failures carry the last field whose
/// parameters were all finite.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub last_good: Option<Box<RadianceField>>,
    pub log: Box<TrainLog>,
}

impl From<TrainFailure> for Error {
    fn from(f: TrainFailure) -> Error {
        f.error
    }
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        TrainFailure {
            error,
            last_good: None,
            log: Box::default(),
        }
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub intrinsics: CameraIntrinsics,
    pub train_views: Vec<View>,
    pub val_views: Vec<View>,
    /// Appearance row used for each validation view (`None`: table mean).
    pub val_embedding: Vec<Option<usize>>,
    pub state: TrainState,
}

/// Result of a completed run.
pub struct TrainOutcome {
    /// Field with the best validation PSNR seen.
    pub field: RadianceField,
    pub log: TrainLog,
    pub state: TrainState,
}

/// Index of the training view whose lighting is nearest to `light`.
pub fn nearest_lighting(train: &[View], light: &LightingCondition) -> Option<usize> {
    train
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.lighting.map(|l| (i, l.distance(light))))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

impl Trainer {
    pub fn new(
        field_config: FieldConfig,
        config: TrainConfig,
        intrinsics: CameraIntrinsics,
        train_views: Vec<View>,
        val_views: Vec<View>,
    ) -> Result<Self> {
        config.validate()?;
        if train_views.is_empty() || val_views.is_empty() {
            return Err(Error::Data("training needs non-empty train and val sets".into()));
        }
        let labels = train_views.iter().map(|v| v.label.clone()).collect();
        let field = RadianceField::new(field_config, labels, config.seed)?;
        let adam = field_optimizer(&field, &config);
        let state = TrainState {
            best_field: field.clone(),
            best_iteration: 0,
            field,
            adam,
            iteration: 0,
            log: TrainLog::default(),
        };
        Self::resume(state, config, intrinsics, train_views, val_views)
    }

    /// Continues from a saved state. The views must be the ones the state
    /// was trained on.
    pub fn resume(
        state: TrainState,
        config: TrainConfig,
        intrinsics: CameraIntrinsics,
        train_views: Vec<View>,
        val_views: Vec<View>,
    ) -> Result<Self> {
        config.validate()?;
        if state.field.appearance.len() != train_views.len() {
            return Err(Error::Data(format!(
                "state has {} appearance embeddings for {} training views",
                state.field.appearance.len(),
                train_views.len()
            )));
        }
        let val_embedding = val_views
            .iter()
            .map(|v| v.lighting.and_then(|l| nearest_lighting(&train_views, &l)))
            .collect();
        let mut t = Self {
            config,
            intrinsics,
            train_views,
            val_views,
            val_embedding,
            state,
        };
        if t.state.iteration == 0 && t.state.log.entries.is_empty() {
            t.state.log.initial_val_psnr = t.validate(&t.state.field);
        }
        Ok(t)
    }

    /// Mean per-view PSNR of grayscale renders of the validation views.
    pub fn validate(&self, field: &RadianceField) -> f64 {
        let sampling = self.config.sampling.deterministic();
        let seed = rng::derive_seed(self.config.seed, &[rng::label::RENDER]);
        let mean = field.appearance.mean();
        let total: f64 = self
            .val_views
            .iter()
            .zip(&self.val_embedding)
            .map(|(v, e)| {
                let e_app = e.map_or(mean.as_slice(), |i| field.appearance.get(i));
                let img = render_image(field, &v.pose, &self.intrinsics, e_app, &sampling, seed).to_grayscale();
                psnr_from_mse(photometric_loss(&img.values, &v.pixels))
            })
            .sum();
        total / self.val_views.len() as f64
    }

    /// One optimization step on the batch for the current iteration.
    pub fn step(&mut self) -> std::result::Result<f64, TrainFailure> {
        let it = self.state.iteration;
        let mut r = rng::stream(self.config.seed, &[rng::label::BATCH, it as u64]);
        let field = &self.state.field;
        let batch = RayBatch::sample(
            &self.train_views,
            &self.intrinsics,
            self.config.rays_per_batch,
            &self.config.sampling,
            field.config.scene_bound,
            self.config.random_background,
            &mut r,
        );
        let (parts, grads) = loss_and_gradients(field, &batch, self.config.tv_weight);
        let loss = parts.total(self.config.tv_weight);
        let failure = |error| TrainFailure {
            error,
            last_good: Some(Box::new(self.state.field.clone())),
            log: Box::new(self.state.log.clone()),
        };
        if !loss.is_finite() {
            return Err(failure(Error::Diverged { iteration: it + 1, loss }));
        }
        if let Some(block) = grads.first_non_finite() {
            return Err(failure(Error::NonFiniteGradient {
                block: block.name().to_string(),
            }));
        }
        let params: Vec<&mut [f64]> = self.state.field.param_slices_mut().into_iter().map(|(_, s)| s).collect();
        let g: Vec<&[f64]> = grads.slices().into_iter().map(|(_, s)| s).collect();
        self.state.adam.step(params, g);
        self.state.iteration += 1;
        self.state.log.losses.push(loss);
        Ok(loss)
    }

    /// Trains until `iterations` updates have been made in total, validating
    /// every `eval_every` iterations and after the configured last one.
    pub fn run_until(&mut self, iterations: usize) -> std::result::Result<(), TrainFailure> {
        let mut last_entry = self.state.log.entries.last().map_or(0, |e| e.iteration);
        while self.state.iteration < iterations {
            self.step()?;
            let it = self.state.iteration;
            if it.is_multiple_of(self.config.eval_every) || it == self.config.iterations {
                let val_psnr = self.validate(&self.state.field);
                let window = &self.state.log.losses[last_entry..it];
                let loss = window.iter().sum::<f64>() / window.len() as f64;
                self.state.log.entries.push(LogEntry {
                    iteration: it,
                    loss,
                    val_psnr,
                });
                last_entry = it;
                if val_psnr > self.best_psnr() {
                    self.state.best_field = self.state.field.clone();
                    self.state.best_iteration = it;
                }
            }
        }
        Ok(())
    }

    fn best_psnr(&self) -> f64 {
        let log = &self.state.log;
        if self.state.best_iteration == 0 {
            log.initial_val_psnr
        } else {
            log.entries
                .iter()
                .find(|e| e.iteration == self.state.best_iteration)
                .map_or(f64::NEG_INFINITY, |e| e.val_psnr)
        }
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            field: self.state.best_field.clone(),
            log: self.state.log.clone(),
            state: self.state,
        }
    }
}

/// Splits `dataset`, loads the images and runs `config.iterations` steps.
pub fn train(
    dataset: &DatasetManifest,
    field_config: &FieldConfig,
    config: &TrainConfig,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let (train_set, val_set) = dataset_io::split(dataset, config.val_fraction, config.seed)?;
    let mut trainer = Trainer::new(
        field_config.clone(),
        config.clone(),
        dataset.intrinsics,
        load_views(&train_set)?,
        load_views(&val_set)?,
    )?;
    trainer.run_until(config.iterations)?;
    Ok(trainer.finish())
}

/// Central-difference comparison on up to `count` parameters of one block,
/// chosen at random among those with a nonzero analytic gradient.
///
/// A parameter is skipped when the `±h` perturbation moves any ReLU unit
/// across its kink, since the loss is not differentiable along that segment
/// and the difference quotient would not estimate the gradient.
#[derive(Clone, Debug)]
pub struct GradientCheck {
    pub block: ParamBlock,
    /// `(analytic, finite difference)` per checked parameter.
    pub pairs: Vec<(f64, f64)>,
    /// Parameters rejected because the perturbation crossed a kink.
    pub skipped: usize,
}

impl GradientCheck {
    /// `max |g − fd| / max(|g|, |fd|, 1e-6)`.
    pub fn max_relative_error(&self) -> f64 {
        self.pairs
            .iter()
            .map(|&(g, fd)| (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }
}

fn loss_and_pattern(field: &RadianceField, batch: &RayBatch, tv_weight: f64) -> (f64, Vec<bool>) {
    let fwd = forward_batch(field, batch);
    let loss = LossParts {
        photometric: photometric_of(batch, &fwd.predictions),
        tv: total_variation(&field.grids, None, 0.0),
    };
    let mut pattern = fwd.density_trace.activation_pattern();
    pattern.extend(fwd.color_trace.activation_pattern());
    (loss.total(tv_weight), pattern)
}

#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    field: &RadianceField,
    batch: &RayBatch,
    tv_weight: f64,
    block: ParamBlock,
    count: usize,
    h: f64,
    seed: u64,
) -> GradientCheck {
    let (_, grads) = loss_and_gradients(field, batch, tv_weight);
    let analytic = grads.slices();
    let mut candidates = Vec::new();
    for (si, (b, s)) in analytic.iter().enumerate() {
        if *b == block {
            candidates.extend(s.iter().enumerate().filter(|(_, g)| **g != 0.0).map(|(k, _)| (si, k)));
        }
    }
    let (_, base_pattern) = loss_and_pattern(field, batch, tv_weight);
    let mut r = rng::stream(seed, &[]);
    let mut probe = field.clone();
    let mut pairs = Vec::new();
    let mut skipped = 0;
    while pairs.len() < count && !candidates.is_empty() {
        let (si, k) = candidates.swap_remove(r.random_range(0..candidates.len()));
        let orig = field.param_slices()[si].1[k];
        probe.param_slices_mut()[si].1[k] = orig + h;
        let (lp, pp) = loss_and_pattern(&probe, batch, tv_weight);
        probe.param_slices_mut()[si].1[k] = orig - h;
        let (lm, pm) = loss_and_pattern(&probe, batch, tv_weight);
        probe.param_slices_mut()[si].1[k] = orig;
        if pp != base_pattern || pm != base_pattern {
            skipped += 1;
            continue;
        }
        pairs.push((analytic[si].1[k], (lp - lm) / (2.0 * h)));
    }
    GradientCheck { block, pairs, skipped }
}
