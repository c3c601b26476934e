//! Rigid poses, the pinhole camera, ray generation and random pose sampling.
//!
//! Conventions shared by the whole crate:
//! - quaternions are stored scalar-first `(w, x, y, z)`;
//! - a [`Pose`] maps target-frame points into the camera frame,
//!   `p_cam = R(q) p_tgt + t`, and the target frame is the scene frame;
//! - the camera looks down `+z`, with `+x` to the right and `+y` down;
//! - pixel `(u, v)` has its center at `(u + 0.5, v + 0.5)`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Quaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type Vec3 = Vector3<f64>;

/// Camera-to-target distance range used by the reference protocol, meters.
pub const DEFAULT_DIST_MIN: f64 = 2.2;
pub const DEFAULT_DIST_MAX: f64 = 10.0;

/// Rejection rounds before [`sample_uniform_pose`] gives up.
pub const MAX_POSE_REJECTIONS: usize = 1000;

/// Unit quaternion, scalar first. `q` and `-q` are the same rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes `(w, x, y, z)`. Fails on a zero or non-finite input.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-300 {
            return Err(Error::Data(format!(
                "cannot normalize quaternion ({w}, {x}, {y}, {z})"
            )));
        }
        Ok(Self {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    pub fn from_array(q: [f64; 4]) -> Result<Self> {
        Self::new(q[0], q[1], q[2], q[3])
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let a = axis.normalize();
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, a.x * s, a.y * s, a.z * s).expect("axis-angle quaternion is finite")
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn negated(&self) -> Self {
        Self {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn conjugate(&self) -> Self {
        Self {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    fn to_na(self) -> nalgebra::UnitQuaternion<f64> {
        nalgebra::UnitQuaternion::new_unchecked(Quaternion::new(self.w, self.x, self.y, self.z))
    }

    fn from_na(q: nalgebra::UnitQuaternion<f64>) -> Self {
        Self::new(q.w, q.i, q.j, q.k).expect("nalgebra produced a finite quaternion")
    }

    /// Hamilton product `self * other` (apply `other` first).
    pub fn mul(&self, other: &Self) -> Self {
        Self::from_na(self.to_na() * other.to_na())
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.to_na() * v
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        *self.to_na().to_rotation_matrix().matrix()
    }

    /// Rotation angle in `[0, π]`, sign-invariant.
    pub fn angle(&self) -> f64 {
        let v = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        2.0 * v.atan2(self.w.abs())
    }
}

/// Geodesic distance on SO(3), `2·acos(|⟨q1, q2⟩|)` in `[0, π]`.
///
/// Evaluated through the relative rotation with `atan2`, which agrees with the
/// `acos` form but stays accurate for nearly identical rotations.
pub fn rotation_geodesic(q1: &UnitQuaternion, q2: &UnitQuaternion) -> f64 {
    // Vector part of conj(q1)·q2 written out, so that equal or opposite
    // inputs cancel exactly.
    let v1 = Vec3::new(q1.x, q1.y, q1.z);
    let v2 = Vec3::new(q2.x, q2.y, q2.z);
    let v = v2 * q1.w - v1 * q2.w - v1.cross(&v2);
    2.0 * v.norm().atan2(q1.dot(q2).abs())
}

/// Rigid transform from the target (scene) frame into the camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::IDENTITY,
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.conjugate();
        Self {
            rotation: inv,
            translation: -inv.rotate(&self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation.mul(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    /// Camera center in the scene frame, `-Rᵀ t`.
    pub fn camera_center(&self) -> Vec3 {
        -self.rotation.conjugate().rotate(&self.translation)
    }

    /// Camera-to-target-origin distance.
    pub fn distance(&self) -> f64 {
        self.translation.norm()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// 64×64 camera with a ~35° field of view: the target spans roughly
    /// 10 px at 10 m and 45 px at 2.2 m.
    pub fn desk_default() -> Self {
        Self {
            fx: 100.0,
            fy: 100.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid camera intrinsics {self:?}")))
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Unit camera-frame direction through the center of pixel `(u, v)`.
    pub fn pixel_direction(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new(
            (u + 0.5 - self.cx) / self.fx,
            (v + 0.5 - self.cy) / self.fy,
            1.0,
        )
        .normalize()
    }

    /// Projects a camera-frame point to continuous pixel coordinates
    /// (pixel centers at half-integers). `None` behind the camera.
    pub fn project(&self, p_cam: &Vec3) -> Option<(f64, f64)> {
        if p_cam.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    /// Parametric overlap of the ray with the cube `[-half, half]³`,
    /// intersected with `[t_near, t_far]`.
    pub fn clip_to_cube(&self, half: f64) -> Option<(f64, f64)> {
        let mut lo = self.t_near;
        let mut hi = self.t_far;
        for axis in 0..3 {
            let o = self.origin[axis];
            let d = self.direction[axis];
            if d.abs() < 1e-15 {
                if o < -half || o > half {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (a, b) = ((-half - o) * inv, (half - o) * inv);
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            lo = lo.max(a);
            hi = hi.min(b);
            if lo >= hi {
                return None;
            }
        }
        Some((lo, hi))
    }
}

/// Scene-frame ray through the center of pixel `(u, v)`.
pub fn pixel_ray(pose: &Pose, intr: &CameraIntrinsics, u: u32, v: u32) -> Ray {
    let to_scene = pose.rotation.conjugate();
    Ray {
        origin: pose.camera_center(),
        direction: to_scene.rotate(&intr.pixel_direction(u as f64, v as f64)),
        t_near: 0.0,
        t_far: f64::INFINITY,
    }
}

/// One ray per pixel, row-major (`index = v·W + u`).
pub fn generate_rays(pose: &Pose, intr: &CameraIntrinsics) -> Vec<Ray> {
    let origin = pose.camera_center();
    let to_scene = pose.rotation.conjugate().to_rotation_matrix();
    let mut rays = Vec::with_capacity(intr.pixel_count());
    for v in 0..intr.height {
        for u in 0..intr.width {
            let d = to_scene * intr.pixel_direction(u as f64, v as f64);
            rays.push(Ray {
                origin,
                direction: d.normalize(),
                t_near: 0.0,
                t_far: f64::INFINITY,
            });
        }
    }
    rays
}

/// Uniform rotation from three uniform variates (subgroup algorithm).
pub fn sample_uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> UnitQuaternion {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (s2, c2) = (2.0 * PI * u2).sin_cos();
    let (s3, c3) = (2.0 * PI * u3).sin_cos();
    UnitQuaternion::new(b * c3, a * s2, a * c2, b * s3).expect("subgroup sample is unit-norm")
}

/// Fraction of the image size kept free around the projected target center.
pub const CENTER_MARGIN: f64 = 0.2;

/// Draws a pose with a uniform rotation, a camera-to-target distance uniform
/// in `[dist_min, dist_max]`, and the target origin projecting inside the
/// central part of the image (offsets are re-drawn until it does).
pub fn sample_uniform_pose_with<R: Rng + ?Sized>(
    rng: &mut R,
    dist_min: f64,
    dist_max: f64,
    intr: &CameraIntrinsics,
) -> Result<Pose> {
    if !(dist_min > 0.0 && dist_min < dist_max && dist_max.is_finite()) {
        return Err(Error::Config(format!(
            "distance range must satisfy 0 < min < max, got [{dist_min}, {dist_max}]"
        )));
    }
    intr.validate()?;
    let rotation = sample_uniform_rotation(rng);
    let distance = dist_min + (dist_max - dist_min) * rng.random::<f64>();
    let (w, h) = (intr.width as f64, intr.height as f64);
    let (mx, my) = (CENTER_MARGIN * w, CENTER_MARGIN * h);
    for _ in 0..MAX_POSE_REJECTIONS {
        let px = w * rng.random::<f64>();
        let py = h * rng.random::<f64>();
        let dir = Vec3::new((px - intr.cx) / intr.fx, (py - intr.cy) / intr.fy, 1.0).normalize();
        let translation = dir * distance;
        let (u, v) = intr
            .project(&translation)
            .expect("offset direction has positive depth");
        if u >= mx && u <= w - mx && v >= my && v <= h - my {
            return Ok(Pose::new(rotation, translation));
        }
    }
    Err(Error::PoseSampling {
        rounds: MAX_POSE_REJECTIONS,
        reason: format!("no offset projects inside the image with margin {CENTER_MARGIN} for {intr:?}"),
    })
}

/// Deterministic in `seed`.
pub fn sample_uniform_pose(
    seed: u64,
    dist_min: f64,
    dist_max: f64,
    intr: &CameraIntrinsics,
) -> Result<Pose> {
    let mut rng = rng::stream(seed, &[rng::label::POSE]);
    sample_uniform_pose_with(&mut rng, dist_min, dist_max, intr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quarter_turn_z() -> UnitQuaternion {
        UnitQuaternion::from_axis_angle(&Vec3::z(), PI / 2.0)
    }

    #[test]
    fn constructor_normalizes() {
        let q = UnitQuaternion::new(1.0, 2.0, 3.0, 4.0).unwrap();
        assert!((q.norm() - 1.0).abs() < 1e-12);
        assert!(UnitQuaternion::new(0.0, 0.0, 0.0, 0.0).is_err());
        assert!(UnitQuaternion::new(f64::NAN, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn geodesic_examples() {
        let q = UnitQuaternion::new(0.3, -0.2, 0.9, 0.1).unwrap();
        assert_eq!(rotation_geodesic(&q, &q), 0.0);
        assert!(rotation_geodesic(&q, &q.negated()) < 1e-12);
        let d = rotation_geodesic(&UnitQuaternion::IDENTITY, &quarter_turn_z());
        assert!((d - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn optical_axis_pixel_looks_down_z() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 2.0, 1.5, 4, 3).unwrap();
        let d = intr.pixel_direction(intr.cx - 0.5, intr.cy - 0.5);
        assert!((d - Vec3::z()).norm() < 1e-15);
    }

    #[test]
    fn ray_count_is_width_times_height() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 2.0, 1.5, 4, 3).unwrap();
        assert_eq!(generate_rays(&Pose::identity(), &intr).len(), 12);
    }

    #[test]
    fn corner_pixel_back_projection() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 2.0, 1.5, 4, 3).unwrap();
        let rays = generate_rays(&Pose::identity(), &intr);
        let expected = Vec3::new(0.5 - 2.0, 0.5 - 1.5, 100.0).normalize();
        assert!((rays[0].direction - expected).norm() < 1e-15);
    }

    #[test]
    fn ray_origin_is_camera_center() {
        let pose = Pose::new(
            UnitQuaternion::new(0.9, 0.1, -0.3, 0.2).unwrap(),
            Vec3::new(0.1, -0.2, 4.0),
        );
        let intr = CameraIntrinsics::desk_default();
        let rays = generate_rays(&pose, &intr);
        let c = -pose.rotation.to_rotation_matrix().transpose() * pose.translation;
        for r in &rays {
            assert!((r.origin - c).norm() < 1e-12);
        }
        // Points on the pixel (0, 0) ray map back onto its camera-frame direction.
        let p_cam = pose.transform_point(&rays[0].at(3.0));
        let d = intr.pixel_direction(0.0, 0.0);
        assert!((p_cam.normalize() - d).norm() < 1e-12);
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
    }

    #[test]
    fn pose_sampling_is_deterministic_and_in_range() {
        let intr = CameraIntrinsics::desk_default();
        let a = sample_uniform_pose(42, DEFAULT_DIST_MIN, DEFAULT_DIST_MAX, &intr).unwrap();
        let b = sample_uniform_pose(42, DEFAULT_DIST_MIN, DEFAULT_DIST_MAX, &intr).unwrap();
        assert_eq!(a, b);
        for seed in 0..200 {
            let p = sample_uniform_pose(seed, 2.2, 10.0, &intr).unwrap();
            assert!(p.translation.z > 0.0);
            let d = p.distance();
            assert!((2.2..=10.0).contains(&d));
            let (u, v) = intr.project(&p.translation).unwrap();
            assert!(u > 0.0 && u < 64.0 && v > 0.0 && v < 64.0);
        }
    }

    #[test]
    fn pose_sampling_rejects_bad_ranges() {
        let intr = CameraIntrinsics::desk_default();
        assert!(sample_uniform_pose(0, 3.0, 2.0, &intr).is_err());
        assert!(sample_uniform_pose(0, 0.0, 2.0, &intr).is_err());
    }

    #[test]
    fn rotation_angle_distribution_matches_haar_measure() {
        // The rotation angle of a uniform rotation has CDF (θ - sin θ)/π.
        let mut rng = rng::stream(3, &[]);
        let n = 100_000;
        let mut angles: Vec<f64> = (0..n)
            .map(|_| sample_uniform_rotation(&mut rng).angle())
            .collect();
        angles.sort_by(f64::total_cmp);
        let ks = angles
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let cdf = (t - t.sin()) / PI;
                let lo = i as f64 / n as f64;
                let hi = (i + 1) as f64 / n as f64;
                (cdf - lo).abs().max((hi - cdf).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "KS statistic {ks}");
    }

    #[test]
    fn distance_histogram_is_uniform() {
        let intr = CameraIntrinsics::desk_default();
        let mut rng = rng::stream(11, &[]);
        let n = 100_000;
        let bins = 20;
        let mut counts = vec![0usize; bins];
        for _ in 0..n {
            let p = sample_uniform_pose_with(&mut rng, 2.2, 10.0, &intr).unwrap();
            let b = (((p.distance() - 2.2) / 7.8) * bins as f64) as usize;
            counts[b.min(bins - 1)] += 1;
        }
        let expected = n as f64 / bins as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 99th percentile of χ² with 19 degrees of freedom.
        assert!(chi2 < 36.191, "chi2 = {chi2}");
    }

    fn arb_quat() -> impl Strategy<Value = UnitQuaternion> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-degenerate", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
            .prop_map(|(w, x, y, z)| UnitQuaternion::new(w, x, y, z).unwrap())
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (arb_quat(), -3.0..3.0f64, -3.0..3.0f64, 0.5..10.0f64)
            .prop_map(|(q, x, y, z)| Pose::new(q, Vec3::new(x, y, z)))
    }

    proptest! {
        #[test]
        fn compose_with_inverse_is_identity(pose in arb_pose()) {
            let id = pose.compose(&pose.inverse());
            prop_assert!(id.rotation.angle() < 1e-9);
            prop_assert!(id.translation.norm() < 1e-9);
        }

        #[test]
        fn ray_directions_are_unit(pose in arb_pose(), fx in 20.0..200.0f64, w in 2u32..24, h in 2u32..24) {
            let intr = CameraIntrinsics::new(fx, fx * 1.1, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap();
            for r in generate_rays(&pose, &intr) {
                prop_assert!((r.direction.norm() - 1.0).abs() < 1e-9);
                prop_assert!(r.t_near >= 0.0 && r.t_near < r.t_far);
            }
        }

        #[test]
        fn geodesic_is_symmetric_and_sign_invariant(a in arb_quat(), b in arb_quat()) {
            let d = rotation_geodesic(&a, &b);
            prop_assert!((0.0..=PI + 1e-12).contains(&d));
            prop_assert!((d - rotation_geodesic(&b, &a)).abs() < 1e-12);
            prop_assert!((d - rotation_geodesic(&a.negated(), &b)).abs() < 1e-12);
            let acos_form = 2.0 * a.dot(&b).abs().min(1.0).acos();
            prop_assert!((d - acos_form).abs() < 1e-6);
        }
    }
}
