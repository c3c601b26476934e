//! Small fully connected pose regressor used to compare training sets.
//!
//! The network maps a downsampled grayscale image (by default a crop around
//! the foreground, see [`ProbeInput`]) to four rotation logits,
//! normalized to a unit quaternion, and three translation outputs that are
//! de-standardized with the training set's per-axis mean and spread.

use std::fmt::Write as _;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset_io::{merge_sets, DatasetManifest};
use crate::error::{Error, Result};
use crate::geometry::{Pose, UnitQuaternion, Vec3};
use crate::metrics::{aggregate, format_table, pose_errors, AggregateErrors, PoseErrors};
use crate::renderer::ImageBuffer;
use crate::rng;
use crate::trainer::adam::{Adam, AdamConfig};
use crate::trainer::nn::{Mlp, MlpGrad};

pub const MAX_PARAMS: usize = 1_000_000;
const EVAL_CHUNK: usize = 256;

/// How an image becomes the network input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeInput {
    /// The whole frame, box-downsampled.
    Full,
    /// A square crop around the foreground, resampled and standardized,
    /// followed by the crop's center and log size.
    #[default]
    ObjectCrop,
}

/// Foreground is any pixel further than this from the border median.
pub const CROP_THRESHOLD: f64 = 0.05;
/// Crop side relative to the larger side of the foreground box.
const CROP_MARGIN: f64 = 1.2;
const CROP_PAD: f64 = 2.0;
/// Weight of the three crop-geometry inputs relative to the unit-variance
/// pixel inputs.
const CROP_GEOMETRY_SCALE: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Side of the square pixel input.
    pub input_size: usize,
    pub hidden: Vec<usize>,
    pub input: ProbeInput,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            hidden: vec![256, 256],
            input: ProbeInput::default(),
        }
    }
}

impl ProbeConfig {
    pub fn input_dim(&self) -> usize {
        let pixels = self.input_size * self.input_size;
        match self.input {
            ProbeInput::Full => pixels,
            ProbeInput::ObjectCrop => pixels + 3,
        }
    }

    pub fn param_count(&self) -> usize {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(&self.hidden);
        sizes.push(7);
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("probe sizes must be positive".into()));
        }
        if self.param_count() >= MAX_PARAMS {
            return Err(Error::Config(format!(
                "probe has {} parameters, limit is {MAX_PARAMS}",
                self.param_count()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeTrainConfig {
    /// Gradient steps; both arms of a comparison get the same number.
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub rotation_weight: f64,
    pub translation_weight: f64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            rotation_weight: 1.0,
            translation_weight: 0.1,
        }
    }
}

impl ProbeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.steps > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && self.rotation_weight >= 0.0
            && self.translation_weight >= 0.0
            && self.rotation_weight + self.translation_weight > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid probe training config {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModel {
    pub config: ProbeConfig,
    pub mlp: Mlp,
    pub translation_offset: [f64; 3],
    pub translation_scale: [f64; 3],
}

/// Network inputs and pose labels of a set, in record order.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSamples {
    /// `(N, input_size²)`.
    pub inputs: Array2<f64>,
    pub rotations: Vec<[f64; 4]>,
    pub translations: Vec<[f64; 3]>,
}

impl ProbeSamples {
    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }

    fn rows(&self, idx: &[usize]) -> (Array2<f64>, Vec<[f64; 4]>, Vec<[f64; 3]>) {
        let mut x = Array2::zeros((idx.len(), self.inputs.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            x.row_mut(r).assign(&self.inputs.row(i));
        }
        (
            x,
            idx.iter().map(|&i| self.rotations[i]).collect(),
            idx.iter().map(|&i| self.translations[i]).collect(),
        )
    }
}

/// Network input of one image, see [`ProbeInput`].
pub fn image_features(img: &ImageBuffer, config: &ProbeConfig) -> Result<Vec<f64>> {
    let gray = img.to_grayscale();
    match config.input {
        ProbeInput::Full => full_frame(&gray, config.input_size),
        ProbeInput::ObjectCrop => Ok(object_crop(&gray, config.input_size)),
    }
}

fn full_frame(gray: &ImageBuffer, input_size: usize) -> Result<Vec<f64>> {
    if gray.width != gray.height || !gray.width.is_multiple_of(input_size) {
        return Err(Error::Config(format!(
            "a {}x{} image cannot be reduced to a {input_size}x{input_size} probe input",
            gray.width, gray.height
        )));
    }
    Ok(gray.downsample(gray.width / input_size).values)
}

fn border_median(gray: &ImageBuffer) -> f64 {
    let (w, h) = (gray.width, gray.height);
    let at = |x: usize, y: usize| gray.values[y * w + x];
    let mut border: Vec<f64> = (0..w)
        .flat_map(|x| [at(x, 0), at(x, h - 1)])
        .chain((0..h).flat_map(|y| [at(0, y), at(w - 1, y)]))
        .collect();
    let mid = border.len() / 2;
    *border.select_nth_unstable_by(mid, f64::total_cmp).1
}

/// Bilinear resample of the square crop around the foreground box; samples
/// outside the frame read the background level.
fn object_crop(gray: &ImageBuffer, size: usize) -> Vec<f64> {
    let (w, h) = (gray.width, gray.height);
    let bg = border_median(gray);
    let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..h {
        for x in 0..w {
            if (gray.values[y * w + x] - bg).abs() > CROP_THRESHOLD {
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
            }
        }
    }
    let (cx, cy, side) = if x0 == usize::MAX {
        (w as f64 / 2.0, h as f64 / 2.0, w.max(h) as f64)
    } else {
        (
            (x0 + x1) as f64 / 2.0,
            (y0 + y1) as f64 / 2.0,
            (x1 - x0).max(y1 - y0) as f64 * CROP_MARGIN + CROP_PAD,
        )
    };
    let read = |x: i64, y: i64| {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            bg
        } else {
            gray.values[y as usize * w + x as usize]
        }
    };
    let offset = |k: usize| (k as f64 + 0.5) / size as f64 * side - side / 2.0 - 0.5;
    let mut out = Vec::with_capacity(size * size + 3);
    for j in 0..size {
        let py = cy + offset(j);
        let (iy, fy) = (py.floor() as i64, py - py.floor());
        for i in 0..size {
            let px = cx + offset(i);
            let (ix, fx) = (px.floor() as i64, px - px.floor());
            out.push(
                read(ix, iy) * (1.0 - fy) * (1.0 - fx)
                    + read(ix, iy + 1) * fy * (1.0 - fx)
                    + read(ix + 1, iy) * (1.0 - fy) * fx
                    + read(ix + 1, iy + 1) * fy * fx,
            );
        }
    }
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    let std = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    for v in &mut out {
        *v = (*v - mean) / (std + 1e-3);
    }
    out.extend(
        [
            (cx - w as f64 / 2.0) / (w as f64 / 2.0),
            (cy - h as f64 / 2.0) / (h as f64 / 2.0),
            (side / w as f64).ln(),
        ]
        .map(|g| g * CROP_GEOMETRY_SCALE),
    );
    out
}

pub fn load_samples(set: &DatasetManifest, config: &ProbeConfig) -> Result<ProbeSamples> {
    let rows = (0..set.len())
        .into_par_iter()
        .map(|i| image_features(&set.load_image(i)?, config))
        .collect::<Result<Vec<_>>>()?;
    let d = config.input_dim();
    let mut inputs = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        inputs.row_mut(i).assign(&ndarray::ArrayView1::from(r));
    }
    Ok(ProbeSamples {
        inputs,
        rotations: set.records.iter().map(|r| r.rotation).collect(),
        translations: set.records.iter().map(|r| r.translation).collect(),
    })
}

impl ProbeModel {
    pub fn new(config: ProbeConfig, offset: [f64; 3], scale: [f64; 3], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut sizes = vec![config.input_dim()];
        sizes.extend(&config.hidden);
        sizes.push(7);
        let mlp = Mlp::new(&sizes, &mut rng::stream(seed, &[rng::label::INIT]));
        Ok(Self {
            config,
            mlp,
            translation_offset: offset,
            translation_scale: scale,
        })
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }

    /// Raw network outputs, `(N, 7)`.
    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.mlp.forward(x)
    }

    pub fn decode(&self, out: &[f64]) -> Pose {
        let rotation = UnitQuaternion::new(out[0], out[1], out[2], out[3]).unwrap_or(UnitQuaternion::IDENTITY);
        let t = Vec3::from_fn(|k, _| self.translation_offset[k] + self.translation_scale[k] * out[4 + k]);
        Pose::new(rotation, t)
    }

    pub fn predict(&self, img: &ImageBuffer) -> Result<Pose> {
        let x = image_features(img, &self.config)?;
        let out = self.forward(ArrayView2::from_shape((1, x.len()), &x).expect("row vector"));
        Ok(self.decode(out.row(0).as_slice().expect("contiguous")))
    }

    pub fn predict_samples(&self, samples: &ProbeSamples) -> Vec<Pose> {
        let n = samples.len();
        (0..n)
            .step_by(EVAL_CHUNK)
            .flat_map(|start| {
                let end = (start + EVAL_CHUNK).min(n);
                let out = self.forward(samples.inputs.slice(s![start..end, ..]));
                out.rows()
                    .into_iter()
                    .map(|r| self.decode(&r.to_vec()))
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}

/// Mean over the batch of `w_R · geodesic(q̂, q) + w_T · ‖t̂ − t‖²` and its
/// gradient with respect to the raw outputs.
pub fn output_loss(
    model: &ProbeModel,
    out: ArrayView2<f64>,
    rotations: &[[f64; 4]],
    translations: &[[f64; 3]],
    config: &ProbeTrainConfig,
) -> (f64, Array2<f64>) {
    let n = out.nrows();
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(out.raw_dim());
    for i in 0..n {
        let r = [out[[i, 0]], out[[i, 1]], out[[i, 2]], out[[i, 3]]];
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let q = rotations[i];
        if config.rotation_weight > 0.0 && norm > 0.0 {
            let qh = r.map(|v| v / norm);
            let d: f64 = qh.iter().zip(&q).map(|(a, b)| a * b).sum();
            let c = d.abs();
            // Vector part of conj(q̂)·q; its norm is sin(θ/2).
            let v = Vec3::new(qh[1], qh[2], qh[3]);
            let u = Vec3::new(q[1], q[2], q[3]);
            let s = (u * qh[0] - v * q[0] - v.cross(&u)).norm();
            loss += inv * config.rotation_weight * 2.0 * s.atan2(c);
            if s > 0.0 {
                let scale = inv * config.rotation_weight * (-2.0 / s) * d.signum() / norm;
                for k in 0..4 {
                    grad[[i, k]] = scale * (q[k] - d * qh[k]);
                }
            }
        }
        for k in 0..3 {
            let pred = model.translation_offset[k] + model.translation_scale[k] * out[[i, 4 + k]];
            let e = pred - translations[i][k];
            loss += inv * config.translation_weight * e * e;
            grad[[i, 4 + k]] = inv * config.translation_weight * 2.0 * e * model.translation_scale[k];
        }
    }
    (loss, grad)
}

pub fn loss_and_gradients(
    model: &ProbeModel,
    x: Array2<f64>,
    rotations: &[[f64; 4]],
    translations: &[[f64; 3]],
    config: &ProbeTrainConfig,
) -> (f64, MlpGrad) {
    let (out, trace) = model.mlp.forward_traced(x);
    let (loss, g) = output_loss(model, out.view(), rotations, translations, config);
    let (_, grads) = model.mlp.backward(&trace, g);
    (loss, grads)
}

/// Per-axis mean and spread (floored at 1e-3) of the translation labels;
/// the probe de-standardizes its translation output with them.
pub fn translation_stats(samples: &ProbeSamples) -> ([f64; 3], [f64; 3]) {
    let n = samples.len() as f64;
    let mut mean = [0.0; 3];
    let mut scale = [0.0; 3];
    for k in 0..3 {
        mean[k] = samples.translations.iter().map(|t| t[k]).sum::<f64>() / n;
        let var = samples.translations.iter().map(|t| (t[k] - mean[k]).powi(2)).sum::<f64>() / n;
        scale[k] = var.sqrt().max(1e-3);
    }
    (mean, scale)
}

pub fn train_on_samples(
    samples: &ProbeSamples,
    model_config: &ProbeConfig,
    config: &ProbeTrainConfig,
) -> Result<ProbeModel> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("cannot train the probe on an empty set".into()));
    }
    if samples.inputs.ncols() != model_config.input_dim() {
        return Err(Error::Config(format!(
            "samples have {} features, the probe expects {}",
            samples.inputs.ncols(),
            model_config.input_dim()
        )));
    }
    let (offset, scale) = translation_stats(samples);
    let mut model = ProbeModel::new(model_config.clone(), offset, scale, config.seed)?;
    let mut adam = Adam::new(
        model
            .mlp
            .param_slices()
            .iter()
            .map(|s| (AdamConfig::with_lr(config.learning_rate), s.len())),
    );
    for step in 0..config.steps {
        let mut r = rng::stream(config.seed, &[rng::label::BATCH, step as u64]);
        let idx: Vec<usize> = (0..config.batch_size).map(|_| r.random_range(0..samples.len())).collect();
        let (x, rot, tr) = samples.rows(&idx);
        let (loss, grads) = loss_and_gradients(&model, x, &rot, &tr, config);
        if !loss.is_finite() || grads.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged { iteration: step, loss });
        }
        adam.step(model.mlp.param_slices_mut(), grads.slices());
    }
    Ok(model)
}

pub fn train_probe(
    train: &DatasetManifest,
    model_config: &ProbeConfig,
    config: &ProbeTrainConfig,
) -> Result<ProbeModel> {
    train_on_samples(&load_samples(train, model_config)?, model_config, config)
}

/// Scores an arbitrary predictor, called with the record index and image.
pub fn evaluate_with<F>(set: &DatasetManifest, predict: F) -> Result<AggregateErrors>
where
    F: Fn(usize, &ImageBuffer) -> Result<Pose>,
{
    if set.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty set".into()));
    }
    let errors = (0..set.len())
        .map(|i| pose_errors(&predict(i, &set.load_image(i)?)?, &set.records[i].pose()?))
        .collect::<Result<Vec<_>>>()?;
    aggregate(&errors)
}

pub fn evaluate_samples(model: &ProbeModel, samples: &ProbeSamples) -> Result<AggregateErrors> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty set".into()));
    }
    let errors = model
        .predict_samples(samples)
        .iter()
        .zip(samples.rotations.iter().zip(&samples.translations))
        .map(|(est, (q, t))| {
            let gt = Pose::new(UnitQuaternion::from_array(*q)?, Vec3::from(*t));
            pose_errors(est, &gt)
        })
        .collect::<Result<Vec<PoseErrors>>>()?;
    aggregate(&errors)
}

pub fn evaluate_probe(model: &ProbeModel, set: &DatasetManifest) -> Result<AggregateErrors> {
    if set.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty set".into()));
    }
    evaluate_samples(model, &load_samples(set, &model.config)?)
}

pub const BASELINE: &str = "baseline";
pub const OURS: &str = "ours";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub arm: String,
    pub seed_index: usize,
    pub target: String,
    pub errors: AggregateErrors,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; 0 for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbRow {
    pub target: String,
    pub arm: String,
    pub score: MeanStd,
    pub e_r_deg: MeanStd,
    pub e_t_cm: MeanStd,
    /// `1 − S*(ours) / S*(baseline)` on the `ours` row, 0 on the baseline.
    pub relative_reduction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbReport {
    pub n_seeds: usize,
    pub steps: usize,
    pub runs: Vec<ArmRun>,
    pub rows: Vec<AbRow>,
}

impl AbReport {
    fn score(&self, arm: &str, seed: usize, target: &str) -> Option<f64> {
        self.runs
            .iter()
            .find(|r| r.arm == arm && r.seed_index == seed && r.target == target)
            .map(|r| r.errors.mean.score)
    }

    pub fn targets(&self) -> Vec<String> {
        let mut t: Vec<String> = Vec::new();
        for r in &self.runs {
            if !t.contains(&r.target) {
                t.push(r.target.clone());
            }
        }
        t
    }

    /// Seeds for which the augmented arm has strictly lower S* on every target.
    pub fn seeds_improving_all_targets(&self) -> usize {
        let targets = self.targets();
        (0..self.n_seeds)
            .filter(|&s| {
                targets.iter().all(|t| match (self.score(OURS, s, t), self.score(BASELINE, s, t)) {
                    (Some(o), Some(b)) => o < b,
                    _ => false,
                })
            })
            .count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "target,arm,score_mean,score_std,e_r_deg_mean,e_r_deg_std,e_t_cm_mean,e_t_cm_std,relative_reduction\n",
        );
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{:.6},{:.6},{:.4},{:.4},{:.3},{:.3},{:.4}",
                r.target,
                r.arm,
                r.score.mean,
                r.score.std,
                r.e_r_deg.mean,
                r.e_r_deg.std,
                r.e_t_cm.mean,
                r.e_t_cm.std,
                r.relative_reduction
            )
            .unwrap();
        }
        out
    }

    pub fn runs_csv(&self) -> String {
        let mut out = String::from("target,arm,seed,score,e_r_deg,e_t_cm\n");
        for r in &self.runs {
            writeln!(
                out,
                "{},{},{},{:.6},{:.4},{:.3}",
                r.target, r.arm, r.seed_index, r.errors.mean.score, r.errors.e_r_deg, r.errors.e_t_cm
            )
            .unwrap();
        }
        out
    }

    /// One block per target in the `S*`, `E_R [deg]`, `E_T [cm]` layout,
    /// with `±` spreads over seeds.
    pub fn format_table(&self) -> String {
        let mut out = String::new();
        for t in self.targets() {
            writeln!(out, "{t} ({} seeds, {} steps per arm)", self.n_seeds, self.steps).unwrap();
            writeln!(out, "{:<10}  {:>17}  {:>15}  {:>15}  {:>9}", "", "S*", "E_R [deg]", "E_T [cm]", "reduction").unwrap();
            for r in self.rows.iter().filter(|r| r.target == t) {
                writeln!(
                    out,
                    "{:<10}  {:>8.4} ± {:<6.4}  {:>6.2} ± {:<6.2}  {:>6.1} ± {:<6.1}  {:>8.1}%",
                    r.arm,
                    r.score.mean,
                    r.score.std,
                    r.e_r_deg.mean,
                    r.e_r_deg.std,
                    r.e_t_cm.mean,
                    r.e_t_cm.std,
                    100.0 * r.relative_reduction
                )
                .unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Mean errors of one arm per target, for [`format_table`].
    pub fn mean_table(&self, arm: &str) -> Result<String> {
        let rows = self
            .targets()
            .into_iter()
            .map(|t| {
                let errs: Vec<PoseErrors> = self
                    .runs
                    .iter()
                    .filter(|r| r.arm == arm && r.target == t)
                    .map(|r| r.errors.mean)
                    .collect();
                aggregate(&errs).map(|a| (t, a))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(format_table(&rows))
    }
}

/// Trains the probe on the source set alone and on the source set merged
/// with the augmented set, with equal steps and identical initialization per
/// seed, and evaluates both on every target set.
pub fn ab_experiment(
    source: &DatasetManifest,
    augmented: &DatasetManifest,
    targets: &[(String, DatasetManifest)],
    model_config: &ProbeConfig,
    config: &ProbeTrainConfig,
    n_seeds: usize,
) -> Result<AbReport> {
    if n_seeds == 0 || targets.is_empty() {
        return Err(Error::Config("the comparison needs at least one seed and one target".into()));
    }
    let baseline = load_samples(source, model_config)?;
    let ours = load_samples(&merge_sets(source, augmented)?, model_config)?;
    let target_samples = targets
        .iter()
        .map(|(name, set)| Ok((name.clone(), load_samples(set, model_config)?)))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, &str, &ProbeSamples)> = (0..n_seeds)
        .flat_map(|s| [(s, BASELINE, &baseline), (s, OURS, &ours)])
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(s, arm, train)| -> Result<Vec<ArmRun>> {
            let cfg = ProbeTrainConfig {
                seed: rng::derive_seed(config.seed, &[s as u64]),
                ..config.clone()
            };
            let model = train_on_samples(train, model_config, &cfg)?;
            target_samples
                .iter()
                .map(|(name, ts)| {
                    Ok(ArmRun {
                        arm: arm.to_string(),
                        seed_index: s,
                        target: name.clone(),
                        errors: evaluate_samples(&model, ts)?,
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for (name, _) in targets {
        let stats = |arm: &str| {
            let sel: Vec<&ArmRun> = runs.iter().filter(|r| r.arm == arm && &r.target == name).collect();
            let col = |f: fn(&AggregateErrors) -> f64| MeanStd::of(&sel.iter().map(|r| f(&r.errors)).collect::<Vec<_>>());
            (col(|e| e.mean.score), col(|e| e.e_r_deg), col(|e| e.e_t_cm))
        };
        let (bs, br, bt) = stats(BASELINE);
        let (os, or, ot) = stats(OURS);
        let reduction = if bs.mean > 0.0 { 1.0 - os.mean / bs.mean } else { 0.0 };
        rows.push(AbRow {
            target: name.clone(),
            arm: BASELINE.into(),
            score: bs,
            e_r_deg: br,
            e_t_cm: bt,
            relative_reduction: 0.0,
        });
        rows.push(AbRow {
            target: name.clone(),
            arm: OURS.into(),
            score: os,
            e_r_deg: or,
            e_t_cm: ot,
            relative_reduction: reduction,
        });
    }
    Ok(AbReport {
        n_seeds,
        steps: config.steps,
        runs,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_uniform_rotation, CameraIntrinsics};
    use crate::scene_synth::{build_reference_target, generate_domain_set_with_range, DomainProfile};

    fn small_config() -> ProbeConfig {
        ProbeConfig {
            input_size: 8,
            hidden: vec![16, 12],
            input: ProbeInput::ObjectCrop,
        }
    }

    fn random_samples(n: usize, d: usize, seed: u64) -> ProbeSamples {
        let mut r = rng::stream(seed, &[]);
        ProbeSamples {
            inputs: Array2::from_shape_simple_fn((n, d), || r.random::<f64>()),
            rotations: (0..n).map(|_| sample_uniform_rotation(&mut r).to_array()).collect(),
            translations: (0..n)
                .map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(3.0..8.0)])
                .collect(),
        }
    }

    #[test]
    fn default_probe_is_small_enough() {
        let c = ProbeConfig::default();
        assert!(c.validate().is_ok());
        assert!(c.param_count() < MAX_PARAMS);
        let m = ProbeModel::new(c.clone(), [0.0, 0.0, 6.0], [1.0; 3], 0).unwrap();
        assert_eq!(m.param_count(), c.param_count());
        let big = ProbeConfig {
            input_size: 64,
            hidden: vec![512],
            ..Default::default()
        };
        assert!(big.validate().is_err());
    }

    #[test]
    fn predicted_rotation_is_unit() {
        let m = ProbeModel::new(small_config(), [0.0, 0.0, 6.0], [1.0; 3], 3).unwrap();
        let s = random_samples(20, 67, 1);
        for p in m.predict_samples(&s) {
            assert!((p.rotation.norm() - 1.0).abs() < 1e-12);
        }
        assert_eq!(m.decode(&[0.0; 7]).rotation, UnitQuaternion::IDENTITY);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut m = ProbeModel::new(small_config(), [0.1, -0.2, 5.0], [0.5, 0.7, 1.5], 2).unwrap();
        let s = random_samples(10, 67, 4);
        let cfg = ProbeTrainConfig::default();
        let (_, g) = loss_and_gradients(&m, s.inputs.clone(), &s.rotations, &s.translations, &cfg);
        let loss_at = |m: &ProbeModel| {
            let out = m.forward(s.inputs.view());
            output_loss(m, out.view(), &s.rotations, &s.translations, &cfg).0
        };
        let trace_pattern = |m: &ProbeModel| m.mlp.forward_traced(s.inputs.clone()).1.activation_pattern();
        let grads: Vec<Vec<f64>> = g.slices().iter().map(|s| s.to_vec()).collect();
        let mut r = rng::stream(9, &[]);
        let h = 1e-4;
        let mut checked = 0;
        let base_pattern = trace_pattern(&m);
        while checked < 60 {
            let slot = r.random_range(0..grads.len());
            let k = r.random_range(0..grads[slot].len());
            let orig = m.mlp.param_slices()[slot][k];
            m.mlp.param_slices_mut()[slot][k] = orig + h;
            let (lp, pp) = (loss_at(&m), trace_pattern(&m));
            m.mlp.param_slices_mut()[slot][k] = orig - h;
            let (lm, pm) = (loss_at(&m), trace_pattern(&m));
            m.mlp.param_slices_mut()[slot][k] = orig;
            if pp != base_pattern || pm != base_pattern {
                continue;
            }
            let fd = (lp - lm) / (2.0 * h);
            let an = grads[slot][k];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "slot {slot} index {k}: {an} vs {fd}");
            checked += 1;
        }
    }

    #[test]
    fn zero_rotation_weight_gives_no_rotation_gradient() {
        let m = ProbeModel::new(small_config(), [0.0, 0.0, 5.0], [1.0; 3], 2).unwrap();
        let s = random_samples(8, 67, 5);
        let cfg = ProbeTrainConfig {
            rotation_weight: 0.0,
            ..Default::default()
        };
        let out = m.forward(s.inputs.view());
        let (loss, g) = output_loss(&m, out.view(), &s.rotations, &s.translations, &cfg);
        assert!(g.slice(s![.., 0..4]).iter().all(|&v| v == 0.0));
        assert!(g.slice(s![.., 4..7]).iter().any(|&v| v != 0.0));
        // Pure translation loss.
        let mut expected = 0.0;
        for (i, t) in s.translations.iter().enumerate() {
            let p = m.decode(&out.row(i).to_vec()).translation;
            expected += (p - Vec3::from(*t)).norm_squared();
        }
        assert!((loss - 0.1 * expected / 8.0).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let s = random_samples(30, 67, 6);
        let cfg = ProbeTrainConfig {
            steps: 20,
            batch_size: 8,
            seed: 3,
            ..Default::default()
        };
        let a = train_on_samples(&s, &small_config(), &cfg).unwrap();
        let b = train_on_samples(&s, &small_config(), &cfg).unwrap();
        assert_eq!(a, b);
        let c = train_on_samples(&s, &small_config(), &ProbeTrainConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    fn small_set(dir: &std::path::Path, profile: DomainProfile, n: usize, seed: u64) -> DatasetManifest {
        let intr = CameraIntrinsics::new(40.0, 40.0, 8.0, 8.0, 16, 16).unwrap();
        generate_domain_set_with_range(&build_reference_target(0), &profile, n, &intr, seed, dir, (2.2, 4.0)).unwrap()
    }

    #[test]
    fn oracle_and_constant_predictors() {
        let dir = tempfile::tempdir().unwrap();
        let set = small_set(dir.path(), DomainProfile::source(), 12, 1);
        let oracle = evaluate_with(&set, |i, _| set.records[i].pose()).unwrap();
        assert_eq!(oracle.mean, PoseErrors::default());

        let constant = Pose::new(UnitQuaternion::IDENTITY, Vec3::new(0.0, 0.0, 3.0));
        let agg = evaluate_with(&set, |_, _| Ok(constant)).unwrap();
        let expected = set
            .records
            .iter()
            .map(|r| {
                let t = Vec3::from(r.translation);
                (constant.translation - t).norm() / t.norm()
            })
            .sum::<f64>()
            / set.len() as f64;
        assert!((agg.mean.e_tn - expected).abs() < 1e-12);

        let mut reversed = set.clone();
        reversed.records.reverse();
        let rev = evaluate_with(&reversed, |_, _| Ok(constant)).unwrap();
        assert!((rev.mean.score - agg.mean.score).abs() < 1e-12);

        let empty = DatasetManifest::new(set.intrinsics, dir.path());
        assert!(evaluate_with(&empty, |_, _| Ok(constant)).is_err());
    }

    #[test]
    fn null_comparison_has_no_effect() {
        let dir = tempfile::tempdir().unwrap();
        let src = small_set(dir.path(), DomainProfile::source(), 16, 1);
        let tgt = small_set(dir.path(), DomainProfile::direct_target(), 6, 2);
        let empty = DatasetManifest::new(src.intrinsics, dir.path());
        let cfg = ProbeTrainConfig {
            steps: 15,
            batch_size: 8,
            ..Default::default()
        };
        let report = ab_experiment(&src, &empty, &[("direct".into(), tgt)], &small_config(), &cfg, 2).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].arm, BASELINE);
        assert_eq!(report.rows[1].arm, OURS);
        assert_eq!(report.rows[1].relative_reduction, 0.0);
        assert_eq!(report.rows[0].score, report.rows[1].score);
        assert_eq!(report.seeds_improving_all_targets(), 0);
        let again = ab_experiment(
            &src,
            &empty,
            &[("direct".into(), small_set(dir.path(), DomainProfile::direct_target(), 6, 2))],
            &small_config(),
            &cfg,
            2,
        )
        .unwrap();
        assert_eq!(report.to_csv(), again.to_csv());
        assert_eq!(report.format_table(), again.format_table());
        assert!(report.format_table().contains("ours"));
    }

    fn square_at(x0: usize, y0: usize, side: usize) -> ImageBuffer {
        let mut img = ImageBuffer::new(32, 32, 1, 0.1);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                img.values[y * 32 + x] = if x < x0 + side / 2 { 0.9 } else { 0.5 };
            }
        }
        img
    }

    #[test]
    fn object_crop_follows_the_object() {
        let cfg = ProbeConfig {
            input_size: 8,
            ..Default::default()
        };
        let a = image_features(&square_at(4, 6, 8), &cfg).unwrap();
        let b = image_features(&square_at(20, 18, 8), &cfg).unwrap();
        assert_eq!(a.len(), cfg.input_dim());
        assert!(a[..64].iter().zip(&b[..64]).all(|(u, v)| (u - v).abs() < 1e-9));
        let n = 64.0;
        let mean = a[..64].iter().sum::<f64>() / n;
        assert!(mean.abs() < 1e-12);
        // Center (8, 10) and (24, 22) in a 32-pixel frame, side 8·1.2 + 2.
        let g = CROP_GEOMETRY_SCALE;
        assert!((a[64] - g * (8.0 - 16.0) / 16.0).abs() < 1e-12);
        assert!((b[65] - g * (22.0 - 16.0) / 16.0).abs() < 1e-12);
        assert!((a[66] - g * (11.6f64 / 32.0).ln()).abs() < 1e-12);
        // Twice as large: same crop content up to resampling, larger side.
        let c = image_features(&square_at(8, 8, 16), &cfg).unwrap();
        assert!(c[66] > a[66]);

        let blank = image_features(&ImageBuffer::new(32, 32, 1, 0.3), &cfg).unwrap();
        assert!(blank.iter().all(|v| v.is_finite()));
        assert_eq!(blank[64..], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn full_frame_input_is_the_downsampled_image() {
        let cfg = ProbeConfig {
            input_size: 8,
            input: ProbeInput::Full,
            ..Default::default()
        };
        let img = square_at(4, 6, 8);
        let f = image_features(&img, &cfg).unwrap();
        assert_eq!(f, img.downsample(4).values);
        assert_eq!(f.len(), cfg.input_dim());
        assert!(image_features(&ImageBuffer::new(30, 30, 1, 0.0), &cfg).is_err());
    }

    #[test]
    fn mean_std_examples() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[5.0]).std, 0.0);
    }
}
