//! Augmented set generation: random viewpoints, blended appearance
//! embeddings, texture randomization and backgrounds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::dataset_io::merge_sets;
use crate::dataset_io::{AppearanceMeta, DatasetManifest, Record};
use crate::error::{Error, Result};
use crate::field::{AppearanceTable, RadianceField, DEFAULT_TEXTURE_NOISE_STD};
use crate::geometry::{sample_uniform_pose, CameraIntrinsics, Pose, DEFAULT_DIST_MAX, DEFAULT_DIST_MIN};
use crate::renderer::{contact_sheet, render_image, ImageBuffer, SamplingConfig};
use crate::rng;

pub const NERF_DOMAIN: &str = "nerf";
pub const DEFAULT_N_NERF: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    RandomPick,
    Interpolation,
    Extrapolation,
}

impl StrategyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::RandomPick => "random-pick",
            StrategyKind::Interpolation => "interpolation",
            StrategyKind::Extrapolation => "extrapolation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random-pick" => Some(StrategyKind::RandomPick),
            "interpolation" => Some(StrategyKind::Interpolation),
            "extrapolation" => Some(StrategyKind::Extrapolation),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppearanceStrategy {
    pub variant: StrategyKind,
    /// `α` is drawn uniformly from this closed interval. Unused by random-pick.
    pub alpha_range: [f64; 2],
}

impl AppearanceStrategy {
    pub fn random_pick() -> Self {
        Self {
            variant: StrategyKind::RandomPick,
            alpha_range: [0.0, 0.0],
        }
    }

    pub fn interpolation() -> Self {
        Self {
            variant: StrategyKind::Interpolation,
            alpha_range: [0.0, 1.0],
        }
    }

    pub fn extrapolation(alpha_min: f64, alpha_max: f64) -> Self {
        Self {
            variant: StrategyKind::Extrapolation,
            alpha_range: [alpha_min, alpha_max],
        }
    }

    pub fn label(&self) -> String {
        match self.variant {
            StrategyKind::RandomPick => "random-pick".into(),
            _ => format!("{} [{}, {}]", self.variant.name(), self.alpha_range[0], self.alpha_range[1]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.alpha_range;
        match self.variant {
            StrategyKind::RandomPick => Ok(()),
            StrategyKind::Interpolation if self.alpha_range == [0.0, 1.0] => Ok(()),
            StrategyKind::Interpolation => Err(Error::Config(format!(
                "interpolation uses α ∈ [0, 1], got [{lo}, {hi}]"
            ))),
            StrategyKind::Extrapolation if lo <= 0.0 && hi >= 1.0 && lo.is_finite() && hi.is_finite() => Ok(()),
            StrategyKind::Extrapolation => Err(Error::Config(format!(
                "extrapolation range must contain [0, 1], got [{lo}, {hi}]"
            ))),
        }
    }
}

impl Default for AppearanceStrategy {
    fn default() -> Self {
        Self::extrapolation(-4.0, 4.0)
    }
}

/// `e_i + α (e_j − e_i)`, exact at `α = 0` and `α = 1`. For `α ∈ [0, 1]` the
/// result is clamped to the segment so rounding never leaves it.
pub fn blend(e_i: &[f64], e_j: &[f64], alpha: f64) -> Vec<f64> {
    e_i.iter()
        .zip(e_j)
        .map(|(&a, &b)| {
            let v = if alpha <= 0.5 {
                a + alpha * (b - a)
            } else {
                b - (1.0 - alpha) * (b - a)
            };
            if (0.0..=1.0).contains(&alpha) {
                v.clamp(a.min(b), a.max(b))
            } else {
                v
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceDraw {
    pub e_app: Vec<f64>,
    pub i: usize,
    pub j: usize,
    /// `None` for random-pick.
    pub alpha: Option<f64>,
}

pub fn sample_appearance<R: Rng + ?Sized>(
    table: &AppearanceTable,
    strategy: &AppearanceStrategy,
    rng: &mut R,
) -> Result<AppearanceDraw> {
    strategy.validate()?;
    let n = table.len();
    if n == 0 || (n < 2 && strategy.variant != StrategyKind::RandomPick) {
        return Err(Error::Config(format!(
            "{} needs at least two embeddings, the table has {n}",
            strategy.variant.name()
        )));
    }
    let i = rng.random_range(0..n);
    let j = if n == 1 {
        i
    } else {
        let j = rng.random_range(0..n - 1);
        if j >= i {
            j + 1
        } else {
            j
        }
    };
    if strategy.variant == StrategyKind::RandomPick {
        return Ok(AppearanceDraw {
            e_app: table.get(i).to_vec(),
            i,
            j,
            alpha: None,
        });
    }
    let [lo, hi] = strategy.alpha_range;
    let alpha = rng.random_range(lo..=hi);
    Ok(AppearanceDraw {
        e_app: blend(table.get(i), table.get(j), alpha),
        i,
        j,
        alpha: Some(alpha),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundPolicy {
    /// The target sets have a black sky, and the probe's object crop
    /// relies on a flat background, so this is the default.
    #[default]
    Constant,
    Procedural,
    /// Procedural behind odd pose indices, constant behind even ones.
    HalfProcedural,
}

impl BackgroundPolicy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(BackgroundPolicy::Constant),
            "procedural" => Some(BackgroundPolicy::Procedural),
            "half-procedural" => Some(BackgroundPolicy::HalfProcedural),
            _ => None,
        }
    }

    fn procedural_for(&self, pose_index: usize) -> bool {
        match self {
            BackgroundPolicy::Constant => false,
            BackgroundPolicy::Procedural => true,
            BackgroundPolicy::HalfProcedural => pose_index % 2 == 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub n_nerf: usize,
    pub strategy: AppearanceStrategy,
    pub texture_noise_std: f64,
    pub two_images_per_pose: bool,
    pub distance_range: [f64; 2],
    pub background: BackgroundPolicy,
    /// Intensity of the constant background.
    pub background_level: f64,
    pub seed: u64,
    pub sampling: SamplingConfig,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            n_nerf: DEFAULT_N_NERF,
            strategy: AppearanceStrategy::default(),
            texture_noise_std: DEFAULT_TEXTURE_NOISE_STD,
            two_images_per_pose: true,
            distance_range: [DEFAULT_DIST_MIN, DEFAULT_DIST_MAX],
            background: BackgroundPolicy::default(),
            background_level: 0.0,
            seed: 0,
            sampling: SamplingConfig::default().deterministic(),
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_nerf == 0 {
            return Err(Error::Config("n_nerf must be at least 1".into()));
        }
        if !(self.texture_noise_std >= 0.0 && self.texture_noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "texture noise std must be ≥ 0, got {}",
                self.texture_noise_std
            )));
        }
        if !(0.0..=1.0).contains(&self.background_level) {
            return Err(Error::Config(format!(
                "background level must lie in [0, 1], got {}",
                self.background_level
            )));
        }
        self.strategy.validate()?;
        self.sampling.validate()
    }

    /// Render settings with a transparent background, so images can be
    /// composited afterwards.
    fn render_sampling(&self) -> SamplingConfig {
        SamplingConfig {
            background: 0.0,
            ..self.sampling
        }
    }
}

/// Smooth gradient with a soft bright disk, loosely resembling a planet limb.
pub fn procedural_background(width: usize, height: usize, seed: u64) -> ImageBuffer {
    let mut r = rng::stream(seed, &[rng::label::BACKGROUND]);
    let a: f64 = r.random_range(0.02..0.35);
    let b: f64 = r.random_range(0.02..0.35);
    let theta: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let (s, c) = theta.sin_cos();
    let size = width.max(height) as f64;
    let cx: f64 = r.random_range(-0.5..1.5) * width as f64;
    let cy: f64 = r.random_range(-0.5..1.5) * height as f64;
    let radius: f64 = r.random_range(0.3..1.0) * size;
    let bright: f64 = r.random_range(0.1..0.4);
    let edge = 0.05 * size;
    let mut img = ImageBuffer::new(width, height, 1, 0.0);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = ((px / width as f64 - 0.5) * c + (py / height as f64 - 0.5) * s + 0.75) / 1.5;
            let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
            let disk = ((radius - d) / edge).clamp(0.0, 1.0);
            img.values[y * width + x] = (a + (b - a) * t.clamp(0.0, 1.0) + bright * disk).clamp(0.0, 1.0);
        }
    }
    img
}

/// Renders the image a record describes from its stored provenance. The
/// returned buffer carries the field's opacity in `alpha`.
pub fn render_record(
    field: &RadianceField,
    record: &Record,
    intr: &CameraIntrinsics,
    spec: &AugmentSpec,
) -> Result<ImageBuffer> {
    let meta = record
        .appearance
        .as_ref()
        .ok_or_else(|| Error::Data(format!("{}: no appearance metadata", record.image)))?;
    let [i, j] = meta
        .embedding_ids
        .ok_or_else(|| Error::Data(format!("{}: no embedding ids", record.image)))?;
    if i >= field.appearance.len() || j >= field.appearance.len() {
        return Err(Error::Data(format!(
            "{}: embedding ids [{i}, {j}] exceed table of {}",
            record.image,
            field.appearance.len()
        )));
    }
    let e_app = match meta.alpha {
        Some(alpha) => blend(field.appearance.get(i), field.appearance.get(j), alpha),
        None => field.appearance.get(i).to_vec(),
    };
    let render_seed = meta.render_seed.unwrap_or(0);
    let pose = record.pose()?;
    let sampling = spec.render_sampling();
    let img = match meta.texture_seed {
        Some(ts) => {
            let textured = field.perturb_color_weights(spec.texture_noise_std, ts)?;
            render_image(&textured, &pose, intr, &e_app, &sampling, render_seed)
        }
        None => render_image(field, &pose, intr, &e_app, &sampling, render_seed),
    };
    let gray = img.to_grayscale();
    let (w, h) = (intr.width as usize, intr.height as usize);
    let background = match meta.background_seed {
        Some(bs) => procedural_background(w, h, bs),
        None => ImageBuffer::new(w, h, 1, spec.background_level),
    };
    let mut out = gray.over(&background);
    out.alpha = gray.alpha;
    Ok(out)
}

fn records_for_pose(field: &RadianceField, spec: &AugmentSpec, intr: &CameraIntrinsics, p: usize) -> Result<Vec<Record>> {
    let pi = p as u64;
    let pose: Pose = sample_uniform_pose(
        rng::derive_seed(spec.seed, &[rng::label::POSE, pi]),
        spec.distance_range[0],
        spec.distance_range[1],
        intr,
    )?;
    let draw = sample_appearance(
        &field.appearance,
        &spec.strategy,
        &mut rng::stream(spec.seed, &[rng::label::APPEARANCE, pi]),
    )?;
    let render_seed = rng::derive_seed(spec.seed, &[rng::label::RENDER, pi]);
    let variants: &[(&str, u64)] = if spec.two_images_per_pose { &[("a", 0), ("b", 1)] } else { &[("a", 0)] };
    Ok(variants
        .iter()
        .map(|&(name, v)| {
            let mut rec = Record::new(format!("{NERF_DOMAIN}/{p:05}_{name}.png"), &pose, NERF_DOMAIN);
            rec.appearance = Some(AppearanceMeta {
                embedding_ids: Some([draw.i, draw.j]),
                alpha: draw.alpha,
                texture_seed: (v == 1).then(|| rng::derive_seed(spec.seed, &[rng::label::TEXTURE, pi])),
                render_seed: Some(render_seed),
                background_seed: spec
                    .background
                    .procedural_for(p)
                    .then(|| rng::derive_seed(spec.seed, &[rng::label::BACKGROUND, pi, v])),
                pose_index: Some(p),
                variant: Some(name.to_string()),
                ..Default::default()
            });
            rec
        })
        .collect())
}

/// Renders `spec.n_nerf` poses into `root/nerf/` and returns the manifest
/// (rooted at `root`, not yet written). Records are ordered by pose index,
/// then variant.
pub fn generate_augmented_set(
    field: &RadianceField,
    spec: &AugmentSpec,
    intr: &CameraIntrinsics,
    root: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    intr.validate()?;
    let dir = root.join(NERF_DOMAIN);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let per_pose = (0..spec.n_nerf)
        .into_par_iter()
        .map(|p| -> Result<Vec<Record>> {
            let records = records_for_pose(field, spec, intr, p)?;
            for rec in &records {
                render_record(field, rec, intr, spec)?.save_png(&root.join(&rec.image))?;
            }
            Ok(records)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = DatasetManifest::new(*intr, root);
    manifest.records = per_pose.into_iter().flatten().collect();
    Ok(manifest)
}

/// Mean over pixels of the per-pixel population variance across `images`.
pub fn appearance_variance(images: &[ImageBuffer]) -> f64 {
    let Some(first) = images.first() else {
        return 0.0;
    };
    let n = images.len() as f64;
    let len = first.values.len();
    let mut total = 0.0;
    for k in 0..len {
        let mean = images.iter().map(|im| im.values[k]).sum::<f64>() / n;
        total += images.iter().map(|im| (im.values[k] - mean).powi(2)).sum::<f64>() / n;
    }
    total / len as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// Poses with at least two images.
    pub poses: usize,
    pub images: usize,
    pub mean_variance: f64,
}

/// Groups a set by pose and averages [`appearance_variance`] over groups
/// with at least two images.
pub fn diversity_report(set: &DatasetManifest) -> Result<DiversityReport> {
    let mut groups: BTreeMap<[u64; 7], Vec<usize>> = BTreeMap::new();
    for (i, r) in set.records.iter().enumerate() {
        let mut key = [0u64; 7];
        for (k, v) in r.rotation.iter().chain(&r.translation).enumerate() {
            key[k] = v.to_bits();
        }
        groups.entry(key).or_default().push(i);
    }
    let mut sum = 0.0;
    let mut poses = 0;
    let mut images = 0;
    for idx in groups.values().filter(|g| g.len() >= 2) {
        let imgs = idx.iter().map(|&i| set.load_image(i)).collect::<Result<Vec<_>>>()?;
        sum += appearance_variance(&imgs);
        poses += 1;
        images += imgs.len();
    }
    Ok(DiversityReport {
        poses,
        images,
        mean_variance: if poses == 0 { 0.0 } else { sum / poses as f64 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityRow {
    pub strategy: String,
    pub draws: usize,
    pub poses: usize,
    pub mean_variance: f64,
}

/// Renders `draws` appearance samples at each probe pose (no texture noise,
/// black background) and reports the mean per-pixel variance.
pub fn measure_diversity(
    field: &RadianceField,
    strategy: &AppearanceStrategy,
    poses: &[Pose],
    draws: usize,
    intr: &CameraIntrinsics,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<DiversityRow> {
    if poses.is_empty() || draws < 2 {
        return Err(Error::Config("diversity needs at least one pose and two draws".into()));
    }
    let sampling = SamplingConfig {
        background: 0.0,
        ..*sampling
    };
    let mut sum = 0.0;
    for (p, pose) in poses.iter().enumerate() {
        let mut r = rng::stream(seed, &[rng::label::APPEARANCE, p as u64]);
        let codes = (0..draws)
            .map(|_| sample_appearance(&field.appearance, strategy, &mut r).map(|d| d.e_app))
            .collect::<Result<Vec<_>>>()?;
        let render_seed = rng::derive_seed(seed, &[rng::label::RENDER, p as u64]);
        let images: Vec<ImageBuffer> = codes
            .par_iter()
            .map(|e| render_image(field, pose, intr, e, &sampling, render_seed).to_grayscale())
            .collect();
        sum += appearance_variance(&images);
    }
    Ok(DiversityRow {
        strategy: strategy.label(),
        draws,
        poses: poses.len(),
        mean_variance: sum / poses.len() as f64,
    })
}

pub fn diversity_csv(rows: &[DiversityRow]) -> String {
    let mut out = String::from("strategy,draws,poses,mean_variance\n");
    for r in rows {
        writeln!(out, "\"{}\",{},{},{:.9e}", r.strategy, r.draws, r.poses, r.mean_variance).unwrap();
    }
    out
}

/// Images of one pose rendered along `e_i + α (e_j − e_i)` for each `α`.
#[allow(clippy::too_many_arguments)]
pub fn alpha_sweep(
    field: &RadianceField,
    pose: &Pose,
    intr: &CameraIntrinsics,
    (i, j): (usize, usize),
    alphas: &[f64],
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<Vec<ImageBuffer>> {
    let n = field.appearance.len();
    if i >= n || j >= n {
        return Err(Error::Config(format!("embedding ids ({i}, {j}) exceed table of {n}")));
    }
    Ok(alphas
        .par_iter()
        .map(|&a| {
            let e = blend(field.appearance.get(i), field.appearance.get(j), a);
            render_image(field, pose, intr, &e, sampling, seed).to_grayscale()
        })
        .collect())
}

/// Tiles up to `max` images of a set into a PNG.
pub fn write_contact_sheet(set: &DatasetManifest, path: &Path, max: usize, cols: usize) -> Result<()> {
    let images = (0..set.len().min(max))
        .map(|i| set.load_image(i))
        .collect::<Result<Vec<_>>>()?;
    let sheet = contact_sheet(&images, cols).ok_or_else(|| Error::Data("contact sheet of an empty set".into()))?;
    sheet.save_png(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use proptest::prelude::*;
    use rand::Rng;

    fn table(rows: Vec<Vec<f64>>) -> AppearanceTable {
        let labels = (0..rows.len()).map(|i| format!("v{i}")).collect();
        AppearanceTable::from_rows(rows, labels).unwrap()
    }

    fn small_field(n_views: usize, seed: u64) -> RadianceField {
        let cfg = FieldConfig {
            resolutions: vec![6, 10],
            features: 4,
            density_hidden: vec![16],
            density_features: 5,
            color_hidden: vec![16],
            appearance_dim: 3,
            sh_degree: 1,
            scene_bound: 0.6,
        };
        let labels = (0..n_views).map(|i| format!("v{i}")).collect();
        let mut f = RadianceField::new(cfg, labels, seed).unwrap();
        // Make the table spread out so renders differ between codes.
        let mut r = rng::stream(seed, &[99]);
        f.appearance.embeddings.mapv_inplace(|_| r.random_range(-1.0..1.0));
        f
    }

    fn tiny_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(40.0, 40.0, 8.0, 8.0, 16, 16).unwrap()
    }

    #[test]
    fn blend_examples() {
        let a = [1.0, 0.0];
        let b = [0.0, 2.0];
        assert_eq!(blend(&a, &b, 0.0), a.to_vec());
        assert_eq!(blend(&a, &b, 1.0), b.to_vec());
        assert_eq!(blend(&a, &b, -4.0), vec![5.0, -8.0]);
        let odd = [0.1, 0.7];
        let other = [0.3, -0.2];
        assert_eq!(blend(&odd, &other, 1.0), other.to_vec());
        assert_eq!(blend(&odd, &other, 0.0), odd.to_vec());
    }

    #[test]
    fn sampling_needs_two_embeddings() {
        let one = table(vec![vec![0.5, 0.5]]);
        let mut r = rng::stream(0, &[]);
        assert!(sample_appearance(&one, &AppearanceStrategy::interpolation(), &mut r).is_err());
        assert!(sample_appearance(&one, &AppearanceStrategy::default(), &mut r).is_err());
        let d = sample_appearance(&one, &AppearanceStrategy::random_pick(), &mut r).unwrap();
        assert_eq!(d.e_app, vec![0.5, 0.5]);
    }

    #[test]
    fn strategy_ranges_are_checked() {
        assert!(AppearanceStrategy::extrapolation(-4.0, 4.0).validate().is_ok());
        assert!(AppearanceStrategy::extrapolation(0.2, 4.0).validate().is_err());
        assert!(AppearanceStrategy::extrapolation(-1.0, 0.5).validate().is_err());
        let mut bad = AppearanceStrategy::interpolation();
        bad.alpha_range = [0.0, 2.0];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn random_pick_returns_table_rows_with_distinct_partner() {
        let t = table(vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 5.0]]);
        let mut r = rng::stream(4, &[]);
        for _ in 0..50 {
            let d = sample_appearance(&t, &AppearanceStrategy::random_pick(), &mut r).unwrap();
            assert_ne!(d.i, d.j);
            assert_eq!(d.e_app, t.get(d.i).to_vec());
            assert_eq!(d.alpha, None);
        }
    }

    proptest! {
        #[test]
        fn interpolation_stays_between_endpoints(
            rows in proptest::collection::vec(proptest::collection::vec(-5.0..5.0f64, 4), 2..6),
            seed in any::<u64>(),
        ) {
            let t = table(rows);
            let mut r = rng::stream(seed, &[]);
            let d = sample_appearance(&t, &AppearanceStrategy::interpolation(), &mut r).unwrap();
            let alpha = d.alpha.unwrap();
            prop_assert!((0.0..=1.0).contains(&alpha));
            prop_assert_ne!(d.i, d.j);
            for ((v, a), b) in d.e_app.iter().zip(t.get(d.i)).zip(t.get(d.j)) {
                prop_assert!(*v >= a.min(*b) && *v <= a.max(*b));
            }
        }

        #[test]
        fn extrapolation_alpha_covers_range(seed in any::<u64>()) {
            let t = table(vec![vec![0.0], vec![1.0]]);
            let mut r = rng::stream(seed, &[]);
            let d = sample_appearance(&t, &AppearanceStrategy::default(), &mut r).unwrap();
            let alpha = d.alpha.unwrap();
            prop_assert!((-4.0..=4.0).contains(&alpha));
        }
    }

    #[test]
    fn extrapolation_alpha_is_uniform() {
        let t = table(vec![vec![0.0], vec![1.0]]);
        let mut r = rng::stream(8, &[]);
        let n = 20_000;
        let alphas: Vec<f64> = (0..n)
            .map(|_| sample_appearance(&t, &AppearanceStrategy::default(), &mut r).unwrap().alpha.unwrap())
            .collect();
        let mean = alphas.iter().sum::<f64>() / n as f64;
        let var = alphas.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
        // Uniform on [-4, 4]: mean 0, variance 64/12.
        assert!(mean.abs() < 0.1, "{mean}");
        assert!((var - 64.0 / 12.0).abs() < 0.2, "{var}");
        let inside = alphas.iter().filter(|a| (0.0..=1.0).contains(*a)).count() as f64 / n as f64;
        assert!((inside - 0.125).abs() < 0.01, "{inside}");
    }

    #[test]
    fn variance_examples() {
        let a = ImageBuffer::new(4, 4, 1, 0.3);
        assert_eq!(appearance_variance(&[a.clone(), a.clone(), a.clone()]), 0.0);
        let b = ImageBuffer::new(4, 4, 1, 0.5);
        assert!((appearance_variance(&[a.clone(), b.clone()]) - 0.01).abs() < 1e-15);
        let c = ImageBuffer::new(4, 4, 1, 0.9);
        let v1 = appearance_variance(&[a.clone(), b.clone(), c.clone()]);
        let v2 = appearance_variance(&[c, a, b]);
        assert!((v1 - v2).abs() < 1e-15);
    }

    #[test]
    fn procedural_background_is_deterministic_and_bounded() {
        let a = procedural_background(32, 24, 3);
        assert_eq!(a, procedural_background(32, 24, 3));
        assert_ne!(a, procedural_background(32, 24, 4));
        assert!(a.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    fn tiny_spec(n: usize) -> AugmentSpec {
        AugmentSpec {
            n_nerf: n,
            distance_range: [2.2, 4.0],
            seed: 11,
            sampling: SamplingConfig {
                n_samples: 12,
                ..Default::default()
            }
            .deterministic(),
            ..Default::default()
        }
    }

    #[test]
    fn augmented_set_counts_and_replays() {
        let field = small_field(4, 0);
        let intr = tiny_intrinsics();
        let dir = tempfile::tempdir().unwrap();
        let spec = AugmentSpec {
            background: BackgroundPolicy::HalfProcedural,
            ..tiny_spec(5)
        };
        let set = generate_augmented_set(&field, &spec, &intr, dir.path()).unwrap();
        assert_eq!(set.len(), 10);
        let mut by_pose: BTreeMap<usize, usize> = BTreeMap::new();
        for r in &set.records {
            assert_eq!(r.domain, NERF_DOMAIN);
            *by_pose.entry(r.appearance.as_ref().unwrap().pose_index.unwrap()).or_default() += 1;
        }
        assert_eq!(by_pose.len(), 5);
        assert!(by_pose.values().all(|&c| c == 2));
        for pair in set.records.chunks(2) {
            assert_eq!(pair[0].rotation, pair[1].rotation);
            let (a, b) = (pair[0].appearance.as_ref().unwrap(), pair[1].appearance.as_ref().unwrap());
            assert_eq!(a.embedding_ids, b.embedding_ids);
            assert_eq!(a.alpha, b.alpha);
            assert!(a.texture_seed.is_none() && b.texture_seed.is_some());
        }
        // Half-procedural: odd poses get a procedural backdrop.
        assert!(set.records[0].appearance.as_ref().unwrap().background_seed.is_none());
        assert!(set.records[2].appearance.as_ref().unwrap().background_seed.is_some());

        for (i, rec) in set.records.iter().enumerate() {
            let replay = render_record(&field, rec, &intr, &spec).unwrap();
            let stored = set.load_image(i).unwrap();
            assert_eq!(replay.to_gray8(), stored.to_gray8(), "{}", rec.image);
        }

        let mut single = spec.clone();
        single.two_images_per_pose = false;
        let dir2 = tempfile::tempdir().unwrap();
        assert_eq!(generate_augmented_set(&field, &single, &intr, dir2.path()).unwrap().len(), 5);
    }

    #[test]
    fn siblings_share_alpha_masks() {
        let field = small_field(4, 1);
        let intr = tiny_intrinsics();
        let spec = tiny_spec(3);
        for p in 0..3 {
            let recs = records_for_pose(&field, &spec, &intr, p).unwrap();
            let a = render_record(&field, &recs[0], &intr, &spec).unwrap();
            let b = render_record(&field, &recs[1], &intr, &spec).unwrap();
            assert_eq!(a.alpha, b.alpha);
        }
    }

    #[test]
    fn augment_is_deterministic() {
        let field = small_field(3, 2);
        let intr = tiny_intrinsics();
        let spec = tiny_spec(3);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = generate_augmented_set(&field, &spec, &intr, d1.path()).unwrap();
        let b = generate_augmented_set(&field, &spec, &intr, d2.path()).unwrap();
        assert_eq!(a.records, b.records);
        for r in &a.records {
            assert_eq!(fs::read(d1.path().join(&r.image)).unwrap(), fs::read(d2.path().join(&r.image)).unwrap());
        }
    }

    #[test]
    fn diversity_report_groups_by_pose() {
        let field = small_field(4, 3);
        let intr = tiny_intrinsics();
        let mut spec = tiny_spec(2);
        spec.background = BackgroundPolicy::Constant;
        spec.texture_noise_std = 0.0;
        let dir = tempfile::tempdir().unwrap();
        let set = generate_augmented_set(&field, &spec, &intr, dir.path()).unwrap();
        // Without noise, siblings are identical.
        let rep = diversity_report(&set).unwrap();
        assert_eq!(rep.poses, 2);
        assert_eq!(rep.images, 4);
        assert_eq!(rep.mean_variance, 0.0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let field = small_field(2, 0);
        let dir = tempfile::tempdir().unwrap();
        let intr = tiny_intrinsics();
        let mut s = tiny_spec(0);
        assert!(generate_augmented_set(&field, &s, &intr, dir.path()).is_err());
        s.n_nerf = 1;
        s.texture_noise_std = -1.0;
        assert!(generate_augmented_set(&field, &s, &intr, dir.path()).is_err());
    }

    #[test]
    fn alpha_sweep_endpoints_match_table_rows() {
        let field = small_field(3, 4);
        let intr = tiny_intrinsics();
        let pose = sample_uniform_pose(1, 2.2, 3.0, &intr).unwrap();
        let s = SamplingConfig {
            n_samples: 12,
            ..Default::default()
        }
        .deterministic();
        let strip = alpha_sweep(&field, &pose, &intr, (0, 1), &[0.0, 0.5, 1.0], &s, 0).unwrap();
        assert_eq!(strip.len(), 3);
        let direct = render_image(&field, &pose, &intr, field.appearance.get(1), &s, 0).to_grayscale();
        assert_eq!(strip[2], direct);
    }
}
