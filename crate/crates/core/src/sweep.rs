//! Robustness sweeps: image noise and extrinsic calibration error.

use crate::error::{Error, Result};
use crate::geometry::{perturb_extrinsics, perturb_image};
use crate::model::{Descriptor, Model, SceneFrame};
use crate::report::CsvTable;
use crate::retrieval::{recall_metrics, DescriptorDb};
use crate::synth::{Dataset, Role};
use crate::training::euclidean;

/// Summary of descriptor shifts `‖f − f̂‖₂` over the query set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftStats {
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl ShiftStats {
    pub fn from_values(mut v: Vec<f64>) -> Self {
        v.sort_by(f64::total_cmp);
        ShiftStats {
            mean: v.iter().sum::<f64>() / v.len().max(1) as f64,
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v.last().copied().unwrap_or(f64::NAN),
        }
    }
}

/// One extrinsic perturbation: rotation by `angle` about `axis`, translation `dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtrinsicError {
    pub axis: [f64; 3],
    pub angle: f64,
    pub dt: [f64; 3],
}

impl ExtrinsicError {
    /// Translation of length `t` along a fixed oblique direction and rotation
    /// of `r` radians about a fixed oblique axis.
    pub fn oblique(t: f64, r: f64) -> Self {
        let s = 1.0 / 3f64.sqrt();
        let a = [0.36, 0.48, 0.8];
        ExtrinsicError {
            axis: a,
            angle: r,
            dt: [t * s, t * s, t * s],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepKind {
    Noise { alpha: f64 },
    Extrinsic { t_err: f64, r_err: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub model: String,
    pub kind: SweepKind,
    pub ar1: f64,
    pub shift: ShiftStats,
    /// Descriptor vectors of the perturbed queries, bitwise.
    pub descriptors_unchanged: bool,
}

pub struct SweepModel<'a> {
    pub name: String,
    pub model: &'a Model,
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub extrinsics: Vec<ExtrinsicError>,
    pub tau: f64,
    pub seed: u64,
}

fn describe_all(model: &Model, frames: &[&SceneFrame]) -> Result<Vec<Descriptor>> {
    frames.iter().map(|f| model.describe(f)).collect()
}

struct Evaluation<'a> {
    db: DescriptorDb,
    clean: Vec<Descriptor>,
    queries: Vec<&'a SceneFrame>,
    tau: f64,
}

impl Evaluation<'_> {
    fn row(&self, name: &str, kind: SweepKind, perturbed: Vec<Descriptor>) -> Result<SweepRow> {
        let shifts = self.clean.iter().zip(&perturbed).map(|(a, b)| euclidean(&a.f, &b.f)).collect();
        let unchanged = self
            .clean
            .iter()
            .zip(&perturbed)
            .all(|(a, b)| a.f.iter().zip(&b.f).all(|(x, y)| x.to_bits() == y.to_bits()));
        let ar1 = recall_metrics(&self.db, &perturbed, 1, self.tau)?.ar_at(1);
        Ok(SweepRow {
            model: name.to_string(),
            kind,
            ar1,
            shift: ShiftStats::from_values(shifts),
            descriptors_unchanged: unchanged,
        })
    }
}

/// Perturbs the query frames only; database descriptors stay clean. Noise
/// for query `i` is drawn from `seed + id`, so every α reuses the same δ.
pub fn perturbation_sweep(models: &[SweepModel<'_>], dataset: &Dataset, cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    let db_idx = dataset.indices(Role::Database);
    let q_idx = dataset.indices(Role::Query);
    if db_idx.is_empty() || q_idx.is_empty() {
        return Err(Error::Data("sweep needs database and query frames".into()));
    }
    let db_frames: Vec<&SceneFrame> = db_idx.iter().map(|&i| &dataset.frames[i]).collect();
    let queries: Vec<&SceneFrame> = q_idx.iter().map(|&i| &dataset.frames[i]).collect();
    let db_ids: Vec<u64> = db_idx.iter().map(|&i| dataset.entries[i].id).collect();
    let q_ids: Vec<u64> = q_idx.iter().map(|&i| dataset.entries[i].id).collect();

    let mut rows = Vec::new();
    for m in models {
        let eval = Evaluation {
            db: DescriptorDb::from_descriptors(&db_ids, &describe_all(m.model, &db_frames)?)?,
            clean: describe_all(m.model, &queries)?,
            queries: queries.clone(),
            tau: cfg.tau,
        };
        for &alpha in &cfg.alphas {
            let perturbed = eval
                .queries
                .iter()
                .zip(&q_ids)
                .map(|(f, &id)| {
                    let mut g = (*f).clone();
                    g.image = perturb_image(&f.image, alpha, cfg.seed.wrapping_add(id))?;
                    m.model.describe(&g)
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(eval.row(&m.name, SweepKind::Noise { alpha }, perturbed)?);
        }
        for e in &cfg.extrinsics {
            let mut t_err = 0.0;
            let mut r_err = 0.0;
            let perturbed = eval
                .queries
                .iter()
                .map(|f| {
                    let mut g = (*f).clone();
                    if let Some(cal) = &f.cal {
                        let p = perturb_extrinsics(cal, e.axis, e.angle, e.dt)?;
                        (t_err, r_err) = (p.t_err, p.r_err);
                        g.cal = Some(p.calibration);
                    }
                    m.model.describe(&g)
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(eval.row(&m.name, SweepKind::Extrinsic { t_err, r_err }, perturbed)?);
        }
    }
    Ok(rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> CsvTable {
    let mut t = CsvTable::new(&[
        "kind",
        "model",
        "alpha",
        "t_e",
        "r_e",
        "ar1",
        "shift_mean",
        "shift_q1",
        "shift_median",
        "shift_q3",
        "shift_max",
        "unchanged",
    ]);
    for r in rows {
        let (kind, alpha, te, re) = match r.kind {
            SweepKind::Noise { alpha } => ("noise", alpha.to_string(), String::new(), String::new()),
            SweepKind::Extrinsic { t_err, r_err } => ("extrinsic", String::new(), format!("{t_err:.6}"), format!("{r_err:.6}")),
        };
        let s = r.shift;
        t.push(vec![
            kind.to_string(),
            r.model.clone(),
            alpha,
            te,
            re,
            format!("{:.6}", r.ar1),
            format!("{:.9e}", s.mean),
            format!("{:.9e}", s.q1),
            format!("{:.9e}", s.median),
            format!("{:.9e}", s.q3),
            format!("{:.9e}", s.max),
            r.descriptors_unchanged.to_string(),
        ]);
    }
    t
}
