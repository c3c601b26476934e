//! Procedural target and ground-truth ray tracer.
//!
//! The target is a small asymmetric "spacecraft": a body box, two solar
//! panels of different sizes on opposite sides, and an antenna rod set off
//! the body axis. Images are shaded with a Lambertian model under a sun
//! direction plus ambient term, and domain profiles differ in their lighting
//! ranges and surface albedo.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset_io::{AppearanceMeta, DatasetManifest, Record};
use crate::error::{Error, Result};
use crate::geometry::{generate_rays, sample_uniform_pose, CameraIntrinsics, Pose, Ray, Vec3};
use crate::renderer::ImageBuffer;
use crate::rng;

/// Triangles with a per-triangle RGB albedo, in the target frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ProceduralScene {
    pub triangles: Vec<[Vec3; 3]>,
    pub albedo: Vec<[f64; 3]>,
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightingCondition {
    /// Unit vector pointing toward the sun, scene frame.
    pub sun_direction: [f64; 3],
    pub sun_intensity: f64,
    pub ambient: f64,
}

impl LightingCondition {
    pub fn direction(&self) -> Vec3 {
        Vec3::from(self.sun_direction)
    }

    /// `|ΔI| + |Δa| + angle/π`, used to pick the most similar training
    /// lighting for a held-out view.
    pub fn distance(&self, other: &LightingCondition) -> f64 {
        let cos = self.direction().dot(&other.direction()).clamp(-1.0, 1.0);
        (self.sun_intensity - other.sun_intensity).abs()
            + (self.ambient - other.ambient).abs()
            + cos.acos() / PI
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainProfile {
    pub name: String,
    /// Axis of the cone sun directions are drawn from.
    pub sun_axis: [f64; 3],
    /// Half-angle of that cone, radians.
    pub sun_cone: f64,
    pub intensity: (f64, f64),
    pub ambient: (f64, f64),
    /// Relative per-triangle albedo jitter applied once per set.
    pub albedo_jitter: f64,
}

impl DomainProfile {
    pub fn source() -> Self {
        Self {
            name: "source".into(),
            sun_axis: [0.3, -0.5, -0.8],
            sun_cone: 1.2,
            intensity: (0.5, 0.9),
            ambient: (0.1, 0.3),
            albedo_jitter: 0.0,
        }
    }

    pub fn diffuse_target() -> Self {
        Self {
            name: "diffuse-target".into(),
            sun_axis: [-0.4, 0.2, -0.9],
            sun_cone: 1.0,
            intensity: (0.15, 0.4),
            ambient: (0.35, 0.6),
            albedo_jitter: 0.25,
        }
    }

    pub fn direct_target() -> Self {
        Self {
            name: "direct-target".into(),
            sun_axis: [0.8, 0.4, -0.4],
            sun_cone: 0.7,
            intensity: (1.0, 1.5),
            ambient: (0.0, 0.08),
            albedo_jitter: 0.25,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "source" => Some(Self::source()),
            "diffuse-target" => Some(Self::diffuse_target()),
            "direct-target" => Some(Self::direct_target()),
            _ => None,
        }
    }

    pub fn sample_lighting<R: Rng + ?Sized>(&self, rng: &mut R) -> LightingCondition {
        let axis = Vec3::from(self.sun_axis).normalize();
        // Uniform on the spherical cap around `axis`.
        let cos_t = 1.0 - rng.random::<f64>() * (1.0 - self.sun_cone.cos());
        let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
        let phi = 2.0 * PI * rng.random::<f64>();
        let helper = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let e1 = axis.cross(&helper).normalize();
        let e2 = axis.cross(&e1);
        let d = (axis * cos_t + e1 * (sin_t * phi.cos()) + e2 * (sin_t * phi.sin())).normalize();
        let range = |(lo, hi): (f64, f64), r: &mut R| lo + (hi - lo) * r.random::<f64>();
        LightingCondition {
            sun_direction: [d.x, d.y, d.z],
            sun_intensity: range(self.intensity, rng),
            ambient: range(self.ambient, rng),
        }
    }

    pub fn contains(&self, light: &LightingCondition) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        let cos = light.direction().dot(&Vec3::from(self.sun_axis).normalize());
        inside(light.sun_intensity, self.intensity)
            && inside(light.ambient, self.ambient)
            && cos >= self.sun_cone.cos() - 1e-12
    }
}

/// Twelve triangles of an axis-aligned box, wound outward.
fn push_box(
    tris: &mut Vec<[Vec3; 3]>,
    albedo: &mut Vec<[f64; 3]>,
    center: Vec3,
    half: Vec3,
    face_albedo: &[[f64; 3]; 6],
) {
    let c = |sx: f64, sy: f64, sz: f64| center + Vec3::new(sx * half.x, sy * half.y, sz * half.z);
    // (normal axis, sign): four corners in counter-clockwise order seen
    // from outside.
    let faces = [
        [c(1., -1., -1.), c(1., 1., -1.), c(1., 1., 1.), c(1., -1., 1.)],
        [c(-1., -1., -1.), c(-1., -1., 1.), c(-1., 1., 1.), c(-1., 1., -1.)],
        [c(-1., 1., -1.), c(-1., 1., 1.), c(1., 1., 1.), c(1., 1., -1.)],
        [c(-1., -1., -1.), c(1., -1., -1.), c(1., -1., 1.), c(-1., -1., 1.)],
        [c(-1., -1., 1.), c(1., -1., 1.), c(1., 1., 1.), c(-1., 1., 1.)],
        [c(-1., -1., -1.), c(-1., 1., -1.), c(1., 1., -1.), c(1., -1., -1.)],
    ];
    for (quad, &a) in faces.iter().zip(face_albedo) {
        tris.push([quad[0], quad[1], quad[2]]);
        tris.push([quad[0], quad[2], quad[3]]);
        albedo.push(a);
        albedo.push(a);
    }
}

/// Deterministic asymmetric target; `seed` jitters the part dimensions by
/// up to ±5%.
pub fn build_reference_target(seed: u64) -> ProceduralScene {
    let mut r = rng::stream(seed, &[rng::label::ALBEDO]);
    let mut j = |v: f64| v * (1.0 + 0.05 * (2.0 * r.random::<f64>() - 1.0));
    let mut tris = Vec::new();
    let mut albedo = Vec::new();

    let body = [
        [0.80, 0.78, 0.72],
        [0.62, 0.60, 0.55],
        [0.72, 0.70, 0.66],
        [0.55, 0.54, 0.50],
        [0.90, 0.88, 0.82],
        [0.45, 0.44, 0.42],
    ];
    let panel = [
        [0.20, 0.25, 0.45],
        [0.22, 0.27, 0.48],
        [0.35, 0.38, 0.55],
        [0.30, 0.32, 0.50],
        [0.40, 0.45, 0.70],
        [0.15, 0.18, 0.30],
    ];
    let rod = [[0.95, 0.92, 0.60]; 6];

    let (bx, by, bz) = (j(0.17), j(0.13), j(0.11));
    push_box(&mut tris, &mut albedo, Vec3::zeros(), Vec3::new(bx, by, bz), &body);

    // Long panel along +x, raised slightly in y.
    let (lx, ly) = (j(0.14), j(0.10));
    push_box(
        &mut tris,
        &mut albedo,
        Vec3::new(bx + lx, 0.03, 0.0),
        Vec3::new(lx, ly, 0.02),
        &panel,
    );

    // Short panel along -x, lowered in y.
    let (sx, sy) = (j(0.09), j(0.07));
    push_box(
        &mut tris,
        &mut albedo,
        Vec3::new(-bx - sx, -0.04, 0.0),
        Vec3::new(sx, sy, 0.02),
        &panel,
    );

    // Antenna rod on top, off-center.
    let rh = j(0.12);
    push_box(
        &mut tris,
        &mut albedo,
        Vec3::new(0.07, 0.05, bz + rh),
        Vec3::new(0.025, 0.025, rh),
        &rod,
    );

    let radius = tris
        .iter()
        .flatten()
        .map(|v| v.norm())
        .fold(0.0, f64::max);
    ProceduralScene {
        triangles: tris,
        albedo,
        radius,
    }
}

impl ProceduralScene {
    /// Copy with every triangle albedo scaled by `1 + U(−amp, amp)`.
    pub fn jitter_albedo(&self, amplitude: f64, seed: u64) -> ProceduralScene {
        let mut out = self.clone();
        if amplitude == 0.0 {
            return out;
        }
        let mut r = rng::stream(seed, &[rng::label::ALBEDO]);
        for a in &mut out.albedo {
            let s = 1.0 + amplitude * (2.0 * r.random::<f64>() - 1.0);
            for c in a.iter_mut() {
                *c = (*c * s).clamp(0.0, 1.0);
            }
        }
        out
    }

    /// Nearest hit `(t, triangle index)` along `ray`.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, usize)> {
        // Bounding-sphere rejection.
        let b = ray.origin.dot(&ray.direction);
        let c = ray.origin.norm_squared() - self.radius * self.radius;
        if b * b - c < 0.0 {
            return None;
        }
        let mut best: Option<(f64, usize)> = None;
        for (i, tri) in self.triangles.iter().enumerate() {
            if let Some(t) = moller_trumbore(ray, tri) {
                if t >= ray.t_near && t <= ray.t_far && best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, i));
                }
            }
        }
        best
    }

    pub fn normal(&self, index: usize) -> Vec3 {
        let [a, b, c] = self.triangles[index];
        (b - a).cross(&(c - a)).normalize()
    }
}

/// Ray parameter of the hit with one triangle, if any (`t > 0`).
pub fn moller_trumbore(ray: &Ray, tri: &[Vec3; 3]) -> Option<f64> {
    const EPS: f64 = 1e-12;
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = ray.direction.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < EPS {
        return None;
    }
    let inv = 1.0 / det;
    let s = ray.origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = ray.direction.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > EPS).then_some(t)
}

/// RGB render with `alpha = 1` on hits and black background elsewhere.
pub fn render_ground_truth(
    scene: &ProceduralScene,
    pose: &Pose,
    intr: &CameraIntrinsics,
    light: &LightingCondition,
) -> ImageBuffer {
    let rays = generate_rays(pose, intr);
    let sun = light.direction();
    let mut img = ImageBuffer::new(intr.width as usize, intr.height as usize, 3, 0.0);
    for (i, ray) in rays.iter().enumerate() {
        if let Some((_, tri)) = scene.intersect(ray) {
            let mut n = scene.normal(tri);
            if n.dot(&ray.direction) > 0.0 {
                n = -n;
            }
            let shade = light.ambient + light.sun_intensity * n.dot(&sun).max(0.0);
            for c in 0..3 {
                img.values[3 * i + c] = (scene.albedo[tri][c] * shade).clamp(0.0, 1.0);
            }
            img.alpha[i] = 1.0;
        }
    }
    img
}

/// Renders `n` grayscale images of `scene` under lighting drawn from
/// `profile`, writes them to `root/<profile name>/NNNNN.png`, and returns
/// the manifest (rooted at `root`, not yet written).
pub fn generate_domain_set(
    scene: &ProceduralScene,
    profile: &DomainProfile,
    n: usize,
    intr: &CameraIntrinsics,
    seed: u64,
    root: &Path,
) -> Result<DatasetManifest> {
    generate_domain_set_with_range(
        scene,
        profile,
        n,
        intr,
        seed,
        root,
        (crate::geometry::DEFAULT_DIST_MIN, crate::geometry::DEFAULT_DIST_MAX),
    )
}

pub fn generate_domain_set_with_range(
    scene: &ProceduralScene,
    profile: &DomainProfile,
    n: usize,
    intr: &CameraIntrinsics,
    seed: u64,
    root: &Path,
    (dist_min, dist_max): (f64, f64),
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::Config("a domain set needs at least one image".into()));
    }
    let dir = root.join(&profile.name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let scene = scene.jitter_albedo(profile.albedo_jitter, seed);
    let records = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Record> {
            let pose = sample_uniform_pose(rng::derive_seed(seed, &[i as u64]), dist_min, dist_max, intr)?;
            let light = profile.sample_lighting(&mut rng::stream(seed, &[rng::label::LIGHTING, i as u64]));
            let img = render_ground_truth(&scene, &pose, intr, &light).to_grayscale();
            let rel = format!("{}/{i:05}.png", profile.name);
            img.save_png_with_alpha(&root.join(&rel))?;
            let mut rec = Record::new(rel, &pose, &profile.name);
            rec.appearance = Some(AppearanceMeta {
                lighting: Some(light),
                pose_index: Some(i),
                ..Default::default()
            });
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = DatasetManifest::new(*intr, root);
    manifest.records = records;
    Ok(manifest)
}
