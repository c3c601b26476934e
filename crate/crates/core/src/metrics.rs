//! Pose errors and the pose score `S = E_R + E_T / ‖t_gt‖`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_geodesic, Pose};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseErrors {
    /// Rotation geodesic, radians.
    pub e_r: f64,
    /// Translation error, meters.
    pub e_t: f64,
    /// Translation error over ground-truth distance.
    pub e_tn: f64,
    pub score: f64,
}

impl PoseErrors {
    pub fn new(e_r: f64, e_t: f64, e_tn: f64) -> Self {
        Self {
            e_r,
            e_t,
            e_tn,
            score: e_r + e_tn,
        }
    }
}

pub fn pose_errors(est: &Pose, gt: &Pose) -> Result<PoseErrors> {
    let dist = gt.translation.norm();
    if dist == 0.0 {
        return Err(Error::Data("ground-truth translation is zero; E_TN is undefined".into()));
    }
    let e_t = (est.translation - gt.translation).norm();
    Ok(PoseErrors::new(
        rotation_geodesic(&est.rotation, &gt.rotation),
        e_t,
        e_t / dist,
    ))
}

/// Mean errors over a set, with the rotation also in degrees and the
/// translation in centimeters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateErrors {
    pub mean: PoseErrors,
    pub e_r_deg: f64,
    pub e_t_cm: f64,
    pub count: usize,
}

pub fn aggregate(errors: &[PoseErrors]) -> Result<AggregateErrors> {
    if errors.is_empty() {
        return Err(Error::Data("cannot aggregate an empty error list".into()));
    }
    let n = errors.len() as f64;
    let mean = |f: fn(&PoseErrors) -> f64| errors.iter().map(f).sum::<f64>() / n;
    let e_r = mean(|e| e.e_r);
    let e_t = mean(|e| e.e_t);
    let m = PoseErrors {
        e_r,
        e_t,
        e_tn: mean(|e| e.e_tn),
        score: mean(|e| e.score),
    };
    Ok(AggregateErrors {
        mean: m,
        e_r_deg: e_r.to_degrees(),
        e_t_cm: 100.0 * e_t,
        count: errors.len(),
    })
}

/// Text table with columns `S*`, `E_R [deg]`, `E_T [cm]`, one row per label.
pub fn format_table(rows: &[(String, AggregateErrors)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(8);
    let mut out = String::new();
    writeln!(out, "{:<width$}  {:>8}  {:>10}  {:>9}", "", "S*", "E_R [deg]", "E_T [cm]").unwrap();
    for (label, a) in rows {
        writeln!(
            out,
            "{:<width$}  {:>8.4}  {:>10.3}  {:>9.2}",
            label, a.mean.score, a.e_r_deg, a.e_t_cm
        )
        .unwrap();
    }
    out
}

pub fn format_csv(rows: &[(String, AggregateErrors)]) -> String {
    let mut out = String::from("label,count,score,e_r_rad,e_r_deg,e_t_m,e_t_cm,e_tn\n");
    for (label, a) in rows {
        writeln!(
            out,
            "{label},{},{:.6},{:.6},{:.4},{:.6},{:.3},{:.6}",
            a.count, a.mean.score, a.mean.e_r, a.e_r_deg, a.mean.e_t, a.e_t_cm, a.mean.e_tn
        )
        .unwrap();
    }
    out
}
