//! Position and direction encodings.
//!
//! Positions use axis-aligned feature planes at several resolutions: a point
//! is projected onto the xy, xz and yz planes, each plane is sampled
//! bilinearly, the three samples are multiplied elementwise, and the
//! per-resolution products are concatenated. Directions use the real
//! spherical-harmonic basis.

use rand::Rng;

use crate::geometry::Vec3;

/// Coordinate pairs of the three planes, in storage order.
pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Three `R×R×F` feature planes. Node `(i, j)` of a plane stores its `F`
/// features at `(i·R + j)·F`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneGrid {
    pub resolution: usize,
    pub features: usize,
    pub planes: [Vec<f64>; 3],
}

impl PlaneGrid {
    pub fn filled(resolution: usize, features: usize, value: f64) -> Self {
        let n = resolution * resolution * features;
        Self {
            resolution,
            features,
            planes: [vec![value; n], vec![value; n], vec![value; n]],
        }
    }

    /// Uniform noise in `[center - spread, center + spread]`.
    pub fn random<R: Rng + ?Sized>(
        resolution: usize,
        features: usize,
        center: f64,
        spread: f64,
        rng: &mut R,
    ) -> Self {
        let n = resolution * resolution * features;
        let mut plane = || -> Vec<f64> {
            (0..n)
                .map(|_| center + spread * (2.0 * rng.random::<f64>() - 1.0))
                .collect()
        };
        Self {
            resolution,
            features,
            planes: [plane(), plane(), plane()],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::filled(self.resolution, self.features, 0.0)
    }

    pub fn node(&self, plane: usize, i: usize, j: usize) -> &[f64] {
        let f = self.features;
        let k = (i * self.resolution + j) * f;
        &self.planes[plane][k..k + f]
    }
}

/// Bilinear footprint of one plane sample: four node offsets and weights.
#[derive(Clone, Copy, Debug)]
struct Footprint {
    offsets: [usize; 4],
    weights: [f64; 4],
}

/// Lattice cell and fractional offset of a normalized coordinate in `[0, 1]`.
fn lattice(u: f64, resolution: usize) -> (usize, f64) {
    let g = u * (resolution - 1) as f64;
    let i0 = (g.floor() as usize).min(resolution - 2);
    (i0, g - i0 as f64)
}

fn footprint(u: f64, v: f64, resolution: usize, features: usize) -> Footprint {
    let (i0, fi) = lattice(u, resolution);
    let (j0, fj) = lattice(v, resolution);
    let idx = |i: usize, j: usize| (i * resolution + j) * features;
    Footprint {
        offsets: [idx(i0, j0), idx(i0 + 1, j0), idx(i0, j0 + 1), idx(i0 + 1, j0 + 1)],
        weights: [
            (1.0 - fi) * (1.0 - fj),
            fi * (1.0 - fj),
            (1.0 - fi) * fj,
            fi * fj,
        ],
    }
}

fn sample_plane(plane: &[f64], fp: &Footprint, out: &mut [f64]) {
    let f = out.len();
    out.fill(0.0);
    for (&o, &w) in fp.offsets.iter().zip(&fp.weights) {
        for (acc, &v) in out.iter_mut().zip(&plane[o..o + f]) {
            *acc += w * v;
        }
    }
}

/// Maps a scene point into `[0, 1]³`, clamping points outside the bound.
pub fn normalize_point(p: &Vec3, bound: f64) -> [f64; 3] {
    let n = |x: f64| ((x + bound) / (2.0 * bound)).clamp(0.0, 1.0);
    [n(p.x), n(p.y), n(p.z)]
}

pub fn encoded_len(grids: &[PlaneGrid]) -> usize {
    grids.iter().map(|g| g.features).sum()
}

/// Writes the position features of `p` into `out` (length [`encoded_len`]).
pub fn encode_position_into(grids: &[PlaneGrid], bound: f64, p: &Vec3, out: &mut [f64]) {
    let u = normalize_point(p, bound);
    let mut offset = 0;
    let mut tmp = [0.0f64; 64];
    for g in grids {
        let f = g.features;
        let dst = &mut out[offset..offset + f];
        dst.fill(1.0);
        for (plane, &(a, b)) in PLANE_AXES.iter().enumerate() {
            let fp = footprint(u[a], u[b], g.resolution, f);
            let s = &mut tmp[..f];
            sample_plane(&g.planes[plane], &fp, s);
            for (d, &v) in dst.iter_mut().zip(s.iter()) {
                *d *= v;
            }
        }
        offset += f;
    }
}

/// Accumulates d loss / d plane features for one point given
/// `grad` = d loss / d (position features of `p`).
pub fn encode_position_backward(
    grids: &[PlaneGrid],
    bound: f64,
    p: &Vec3,
    grad: &[f64],
    grad_grids: &mut [PlaneGrid],
) {
    let u = normalize_point(p, bound);
    let mut offset = 0;
    let mut samples = [[0.0f64; 64]; 3];
    for (g, gg) in grids.iter().zip(grad_grids.iter_mut()) {
        let f = g.features;
        let fps: [Footprint; 3] = std::array::from_fn(|plane| {
            let (a, b) = PLANE_AXES[plane];
            footprint(u[a], u[b], g.resolution, f)
        });
        for ((plane, fp), out) in g.planes.iter().zip(&fps).zip(samples.iter_mut()) {
            sample_plane(plane, fp, &mut out[..f]);
        }
        let gout = &grad[offset..offset + f];
        for (plane, fp) in fps.iter().enumerate() {
            let (o1, o2) = ((plane + 1) % 3, (plane + 2) % 3);
            let target = &mut gg.planes[plane];
            for (&off, &w) in fp.offsets.iter().zip(&fp.weights) {
                if w == 0.0 {
                    continue;
                }
                for k in 0..f {
                    target[off + k] += w * gout[k] * samples[o1][k] * samples[o2][k];
                }
            }
        }
        offset += f;
    }
}

/// Largest supported spherical-harmonic degree.
pub const MAX_SH_DEGREE: usize = 3;

pub fn sh_len(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Real spherical harmonics of a unit direction up to `degree` (≤ 3),
/// ordered by degree then order `m = -l..=l`.
pub fn encode_direction(d: &Vec3, degree: usize) -> Vec<f64> {
    let mut out = vec![0.0; sh_len(degree)];
    encode_direction_into(d, degree, &mut out);
    out
}

pub fn encode_direction_into(d: &Vec3, degree: usize, out: &mut [f64]) {
    assert!(degree <= MAX_SH_DEGREE, "SH degree {degree} unsupported");
    let (x, y, z) = (d.x, d.y, d.z);
    out[0] = 0.282_094_791_773_878_14;
    if degree >= 1 {
        out[1] = -0.488_602_511_902_919_9 * y;
        out[2] = 0.488_602_511_902_919_9 * z;
        out[3] = -0.488_602_511_902_919_9 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out[4] = 1.092_548_430_592_079_2 * x * y;
        out[5] = -1.092_548_430_592_079_2 * y * z;
        out[6] = 0.315_391_565_252_520_05 * (2.0 * zz - xx - yy);
        out[7] = -1.092_548_430_592_079_2 * x * z;
        out[8] = 0.546_274_215_296_039_6 * (xx - yy);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out[9] = -0.590_043_589_926_643_5 * y * (3.0 * xx - yy);
        out[10] = 2.890_611_442_640_554 * x * y * z;
        out[11] = -0.457_045_799_464_465_8 * y * (4.0 * zz - xx - yy);
        out[12] = 0.373_176_332_590_115_4 * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
        out[13] = -0.457_045_799_464_465_8 * x * (4.0 * zz - xx - yy);
        out[14] = 1.445_305_721_320_277 * z * (xx - yy);
        out[15] = -0.590_043_589_926_643_5 * x * (xx - 3.0 * yy);
    }
}
