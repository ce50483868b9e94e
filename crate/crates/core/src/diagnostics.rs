//! Finite-difference gradient checks of every differentiable stage on small
//! random instances.

use prfusion_tensor::{grad_check_sampled, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{evolve_metric, metric_attention, AttentionKind, AttentionParams, MetricActivation, SolverConfig};
use crate::backbone::{ImageBackbone, PointBackbone};
use crate::error::Result;
use crate::fusion::{gem_pool, Gfm, Lfm, LfmLayout};
use crate::image::Image;
use crate::ndm::Ndm;
use crate::params::{normal_matrix, Parameterized};
use crate::report::CsvTable;
use crate::training::triplet_loss;

pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub module: &'static str,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOL
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub c: usize,
    pub solver: SolverConfig,
    pub seed: u64,
    /// Probes per input tensor.
    pub max_per_input: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            c: 4,
            solver: SolverConfig::default(),
            seed: 0,
            max_per_input: 64,
        }
    }
}

fn tensor_err(e: crate::Error) -> TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => TensorError::Contract(other.to_string()),
    }
}

/// `Σ out ⊙ R` for a fixed random `R`, so no gradient cancels by symmetry.
fn readout(out: &Tensor, seed: u64) -> prfusion_tensor::Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r: Vec<f64> = (0..out.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    out.mul(&Tensor::new(r, out.shape())?).map(|t| t.sum())
}

fn params_of(m: &dyn Parameterized) -> Vec<Tensor> {
    m.named_params().into_iter().map(|(_, t)| t).collect()
}

/// Copy of `m` with its parameters replaced, in visit order, by `tensors`.
fn with_params<M: Parameterized + Clone>(m: &M, tensors: &[Tensor]) -> M {
    let mut out = m.clone();
    let mut it = tensors.iter();
    out.visit_mut("", &mut |_, t| *t = it.next().expect("one tensor per parameter").clone());
    out
}

fn positive_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(0.2..2.0)).collect();
    Tensor::new(data, &[rows, cols]).expect("shape")
}

fn check<F>(module: &'static str, f: F, inputs: &[Tensor], probes: usize) -> Result<GradCheckRow>
where
    F: Fn(&[Tensor]) -> prfusion_tensor::Result<Tensor>,
{
    let r = grad_check_sampled(f, inputs, GRADCHECK_STEP, probes)?;
    Ok(GradCheckRow {
        module,
        max_rel_err: r.max_rel_err,
        checked: r.checked,
    })
}

/// Runs the whole suite: c features, 12 image nodes, 9 point nodes.
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<Vec<GradCheckRow>> {
    let c = cfg.c;
    let probes = cfg.max_per_input;
    let solver = cfg.solver;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (hw, n) = (12, 9);
    let mut rows = Vec::new();

    let feats = normal_matrix(&mut rng, n, c, 1.0)?.detach();
    let att = AttentionParams::init(c, &mut rng)?;
    let seed = cfg.seed;

    rows.push(check(
        "metric_ode",
        |x| readout(&evolve_metric(&x[0], &x[1], &solver, MetricActivation::Tanh).map_err(tensor_err)?.g, seed),
        &[feats.clone(), att.w_g.detach()],
        probes,
    )?);

    rows.push(check(
        "metric_attention",
        |x| {
            let p = AttentionParams {
                w_q: x[1].clone(),
                w_k: x[2].clone(),
                w_v: x[3].clone(),
                w_g: x[4].clone(),
            };
            let g = evolve_metric(&x[0], &p.w_g, &solver, MetricActivation::Tanh).map_err(tensor_err)?;
            readout(&metric_attention(&x[0], Some(&g), &p, None).map_err(tensor_err)?, seed)
        },
        &[feats.clone(), att.w_q.detach(), att.w_k.detach(), att.w_v.detach(), att.w_g.detach()],
        probes,
    )?);

    let gem_in = positive_matrix(&mut rng, n, c);
    rows.push(check(
        "gem",
        |x| readout(&gem_pool(&x[0], &x[1]).map_err(tensor_err)?, seed),
        &[gem_in, Tensor::scalar(3.0)],
        probes,
    )?);

    let f2d = normal_matrix(&mut rng, hw, c, 1.0)?.detach();
    let f3d = normal_matrix(&mut rng, n, c, 1.0)?.detach();
    let gfm = Gfm::init(c, AttentionKind::Metric, solver, 4, 4, &mut rng)?;
    let mut inputs = vec![f2d.clone(), f3d.clone()];
    inputs.extend(params_of(&gfm));
    rows.push(check(
        "gfm",
        |x| {
            let g = with_params(&gfm, &x[2..]);
            let out = g.forward(&x[0], &x[1]).map_err(tensor_err)?;
            let all = Tensor::concat_cols(&[out.f2d.reshape(&[hw * c])?, out.f3d.reshape(&[n * c])?, out.f_gfm])?;
            readout(&all, seed)
        },
        &inputs,
        probes,
    )?);

    let lfm = Lfm::init(c, AttentionKind::Metric, solver, (1, 1), &mut rng)?;
    let coords2d: Vec<[f64; 2]> = (0..3).flat_map(|r| (0..4).map(move |q| [r as f64 + 0.5, q as f64 + 0.5])).collect();
    let coords3d: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..3.0), rng.random_range(0.0..4.0)]).collect();
    let valid3d: Vec<bool> = (0..n).map(|i| i % 4 != 3).collect();
    let layout = LfmLayout {
        coords2d: &coords2d,
        coords3d: &coords3d,
        valid3d: &valid3d,
        extent: (3, 4),
    };
    let mut inputs = vec![f2d.clone(), f3d.clone()];
    inputs.extend(params_of(&lfm));
    rows.push(check(
        "lfm",
        |x| {
            let l = with_params(&lfm, &x[2..]);
            let (a, b) = l.forward(&x[0], &x[1], &layout).map_err(tensor_err)?;
            readout(&Tensor::concat_rows(&[a, b])?, seed)
        },
        &inputs,
        probes,
    )?);

    let ndm = Ndm::init(c, 2, 5, solver, &mut rng)?;
    let x0 = normal_matrix(&mut rng, 8, c, 1.0)?.detach();
    let pos = normal_matrix(&mut rng, 8, 2, 1.0)?.detach();
    rows.push(check(
        "ndm",
        |x| {
            let d = Ndm {
                w_x: x[1].clone(),
                w_y: x[2].clone(),
                ..ndm.clone()
            };
            readout(&d.forward(&x[0], Some(&pos)).map_err(tensor_err)?, seed)
        },
        &[x0, ndm.w_x.detach(), ndm.w_y.detach()],
        probes,
    )?);

    let image_bb = ImageBackbone::init(3, c, &mut rng)?;
    let data = (0..24 * 32 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    let image = Image::new(24, 32, 3, data)?;
    rows.push(check(
        "backbone_2d",
        |x| {
            let b = with_params(&image_bb, x);
            readout(&b.forward(&image).map_err(tensor_err)?.features, seed)
        },
        &params_of(&image_bb),
        probes,
    )?);

    let point_bb = PointBackbone::init(c, 0.1, 0.05, &mut rng)?;
    let points: Vec<[f64; 3]> = (0..n)
        .map(|_| [rng.random_range(2.0..30.0), rng.random_range(-10.0..10.0), rng.random_range(-1.6..3.0)])
        .collect();
    rows.push(check(
        "backbone_3d",
        |x| {
            let b = with_params(&point_bb, x);
            readout(&b.forward(&points).map_err(tensor_err)?.features, seed)
        },
        &params_of(&point_bb),
        probes,
    )?);

    let fa = normal_matrix(&mut rng, 1, 3 * c, 1.0)?.reshape(&[3 * c])?.detach();
    let fp = fa.add(&normal_matrix(&mut rng, 1, 3 * c, 1.0)?.reshape(&[3 * c])?)?.detach();
    let fn_ = fa.add(&normal_matrix(&mut rng, 1, 3 * c, 0.3)?.reshape(&[3 * c])?)?.detach();
    rows.push(check(
        "triplet_loss",
        |x| triplet_loss(&x[0], &x[1], &x[2], 0.2).map_err(tensor_err),
        &[fa, fp, fn_],
        probes,
    )?);

    Ok(rows)
}

pub fn gradcheck_table(rows: &[GradCheckRow]) -> CsvTable {
    let mut t = CsvTable::new(&["module", "max_rel_err", "checked", "pass"]);
    for r in rows {
        t.push(vec![
            r.module.to_string(),
            format!("{:.3e}", r.max_rel_err),
            r.checked.to_string(),
            r.passed().to_string(),
        ]);
    }
    t
}
