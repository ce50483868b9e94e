//! Manifold metric attention.
//!
//! Each attended feature `F̃_i` is treated as a base point carrying a diagonal
//! metric `G_i`, obtained by integrating `dg_i/dt = σ(g_i W_g)` from
//! `g_i(0) = F̃_i`. Query–key similarities are then taken under that metric:
//!
//! ```text
//! L_ij = (F̃_i W_Q) diag(G_i) (F̃_j W_K)ᵀ,   a_i = softmax_j(L_i),   out_i = Σ_j a_ij F̃_j W_V
//! ```
//!
//! With `G ≡ 1` this is ordinary dot-product attention.

use prfusion_tensor::{ode_integrate, OdeState, Tensor};
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{normal_matrix, ParamVisitor, Parameterized};

/// The metric flow starts gentle so the default 8-step solve is well resolved.
pub const METRIC_INIT_GAIN: f64 = 0.5;

/// Horizon and step count of a fixed-step RK4 solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub horizon: f64,
    pub steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { horizon: 1.0, steps: 8 }
    }
}

/// σ of the metric ODE. `Identity` exists for analytic checks and the
/// "without activation" ablation arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricActivation {
    Tanh,
    Identity,
}

/// How node features interact inside a fusion layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// No interaction: `out = F̃ W_V`.
    Mlp,
    /// Identity metric.
    Vanilla,
    /// Metric taken directly from the features, `G = F̃`.
    MetricNoOde,
    /// Metric ODE with σ = identity.
    MetricNoActivation,
    Metric,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 5] = [
        AttentionKind::Mlp,
        AttentionKind::Vanilla,
        AttentionKind::MetricNoOde,
        AttentionKind::MetricNoActivation,
        AttentionKind::Metric,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Mlp => "mlp",
            AttentionKind::Vanilla => "vanilla",
            AttentionKind::MetricNoOde => "metric-no-ode",
            AttentionKind::MetricNoActivation => "metric-no-activation",
            AttentionKind::Metric => "metric",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        AttentionKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Per-node diagonal metric; row `i` is the diagonal of `G_i`.
#[derive(Debug, Clone)]
pub struct MetricField {
    pub g: Tensor,
}

impl MetricField {
    /// Fraction of entries with `|G_ij| < 1e-8`. Nothing keeps the metric
    /// non-degenerate, so this is monitored rather than enforced.
    pub fn degenerate_fraction(&self) -> f64 {
        let d = self.g.data();
        d.iter().filter(|v| v.abs() < 1e-8).count() as f64 / d.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_g: Tensor,
}

impl AttentionParams {
    pub fn init(c: usize, rng: &mut impl Rng) -> Result<Self> {
        let std = 1.0 / (c as f64).sqrt();
        Ok(AttentionParams {
            w_q: normal_matrix(rng, c, c, std)?,
            w_k: normal_matrix(rng, c, c, std)?,
            w_v: normal_matrix(rng, c, c, std)?,
            w_g: normal_matrix(rng, c, c, METRIC_INIT_GAIN * std)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }
}

impl Parameterized for AttentionParams {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&format!("{prefix}.w_q"), &self.w_q);
        f(&format!("{prefix}.w_k"), &self.w_k);
        f(&format!("{prefix}.w_v"), &self.w_v);
        f(&format!("{prefix}.w_g"), &self.w_g);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.w_q"), &mut self.w_q);
        f(&format!("{prefix}.w_k"), &mut self.w_k);
        f(&format!("{prefix}.w_v"), &mut self.w_v);
        f(&format!("{prefix}.w_g"), &mut self.w_g);
    }
}

/// Integrates `dg/dt = σ(g W_g)` from `g(0) = features` over `[0, horizon]`.
pub fn evolve_metric(
    features: &Tensor,
    w_g: &Tensor,
    solver: &SolverConfig,
    activation: MetricActivation,
) -> Result<MetricField> {
    let state = OdeState::new(features.clone(), 0.0, solver.horizon, solver.steps)?;
    let g = ode_integrate(
        |_, g| {
            let z = g.matmul(w_g)?;
            Ok(match activation {
                MetricActivation::Tanh => z.tanh(),
                MetricActivation::Identity => z,
            })
        },
        &state,
    )?;
    Ok(MetricField { g })
}

/// Metric attention over a node set. `metric = None` means the identity
/// metric; `mask` (row-major n×n, true = attend) defaults to the complete graph.
pub fn metric_attention(
    features: &Tensor,
    metric: Option<&MetricField>,
    params: &AttentionParams,
    mask: Option<&[bool]>,
) -> Result<Tensor> {
    let q = features.matmul(&params.w_q)?;
    let k = features.matmul(&params.w_k)?;
    let v = features.matmul(&params.w_v)?;
    attend(&q, &k, &v, metric.map(|m| &m.g), mask)
}

fn attend(q: &Tensor, k: &Tensor, v: &Tensor, g: Option<&Tensor>, mask: Option<&[bool]>) -> Result<Tensor> {
    let q = match g {
        Some(g) => q.mul(g)?,
        None => q.clone(),
    };
    let logits = q.matmul(&k.transpose()?)?;
    let weights = logits.softmax_rows(mask)?;
    Ok(weights.matmul(v)?)
}

/// One attention block with its ablation switches.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub params: AttentionParams,
    pub kind: AttentionKind,
    pub solver: SolverConfig,
}

impl AttentionLayer {
    pub fn new(params: AttentionParams, kind: AttentionKind, solver: SolverConfig) -> Self {
        AttentionLayer { params, kind, solver }
    }

    /// The metric this layer's kind calls for, or `None` for the identity.
    pub fn metric(&self, features: &Tensor) -> Result<Option<MetricField>> {
        Ok(match self.kind {
            AttentionKind::Mlp | AttentionKind::Vanilla => None,
            AttentionKind::MetricNoOde => Some(MetricField { g: features.clone() }),
            AttentionKind::MetricNoActivation => Some(evolve_metric(
                features,
                &self.params.w_g,
                &self.solver,
                MetricActivation::Identity,
            )?),
            AttentionKind::Metric => Some(evolve_metric(
                features,
                &self.params.w_g,
                &self.solver,
                MetricActivation::Tanh,
            )?),
        })
    }

    /// Attention over the complete graph (self-loops included).
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        if self.kind == AttentionKind::Mlp {
            return Ok(features.matmul(&self.params.w_v)?);
        }
        let metric = self.metric(features)?;
        metric_attention(features, metric.as_ref(), &self.params, None)
    }

    /// Complete-graph attention inside each group of node indices.
    ///
    /// Nodes listed in no group are returned unchanged. Groups must be
    /// disjoint and nonempty.
    pub fn forward_grouped(&self, features: &Tensor, groups: &[Vec<usize>]) -> Result<Tensor> {
        let n = features.rows();
        let mut slot: Vec<Option<usize>> = vec![None; n];
        let mut stacked = 0usize;
        for group in groups {
            if group.is_empty() {
                return Err(Error::Contract("empty attention group".into()));
            }
            for &i in group {
                if i >= n || slot[i].is_some() {
                    return Err(Error::Contract(format!("node {i} missing or grouped twice")));
                }
                slot[i] = Some(stacked);
                stacked += 1;
            }
        }
        if stacked == 0 {
            return Ok(features.clone());
        }

        let v = features.matmul(&self.params.w_v)?;
        let mut parts = Vec::with_capacity(groups.len() + 1);
        if self.kind == AttentionKind::Mlp {
            for group in groups {
                parts.push(v.select_rows(group)?);
            }
        } else {
            let q = features.matmul(&self.params.w_q)?;
            let k = features.matmul(&self.params.w_k)?;
            let metric = self.metric(features)?;
            for group in groups {
                let gq = q.select_rows(group)?;
                let gk = k.select_rows(group)?;
                let gv = v.select_rows(group)?;
                let gg = match &metric {
                    Some(m) => Some(m.g.select_rows(group)?),
                    None => None,
                };
                parts.push(attend(&gq, &gk, &gv, gg.as_ref(), None)?);
            }
        }
        parts.push(features.clone());
        let all = Tensor::concat_rows(&parts)?;
        let order: Vec<usize> = slot
            .iter()
            .enumerate()
            .map(|(i, s)| s.unwrap_or(stacked + i))
            .collect();
        Ok(all.select_rows(&order)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_params() -> AttentionParams {
        let one = Tensor::from_rows(&[vec![1.0]]);
        AttentionParams {
            w_q: one.clone(),
            w_k: one.clone(),
            w_v: one.clone(),
            w_g: one,
        }
    }

    #[test]
    fn zero_field_metric_is_initial_condition() {
        let f = Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5]]);
        let m = evolve_metric(&f, &Tensor::zeros(&[2, 2]), &SolverConfig::default(), MetricActivation::Tanh).unwrap();
        assert_eq!(m.g.data(), f.data());
    }

    #[test]
    fn linear_metric_flow_is_exponential() {
        let f = Tensor::from_rows(&[vec![1.0]]);
        let solver = SolverConfig { horizon: 1.0, steps: 32 };
        let m = evolve_metric(&f, &Tensor::from_rows(&[vec![1.0]]), &solver, MetricActivation::Identity).unwrap();
        assert!((m.g.item() - std::f64::consts::E).abs() < 1e-6);
    }

    #[test]
    fn step_refinement_barely_moves_the_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AttentionParams::init(6, &mut rng).unwrap();
        let f = normal_matrix(&mut rng, 10, 6, 2.0).unwrap();
        let coarse = evolve_metric(&f, &p.w_g, &SolverConfig::default(), MetricActivation::Tanh).unwrap();
        let fine = evolve_metric(&f, &p.w_g, &SolverConfig { horizon: 1.0, steps: 16 }, MetricActivation::Tanh).unwrap();
        let diff = coarse.g.data().iter().zip(fine.g.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn hand_softmax_example() {
        let f = Tensor::from_rows(&[vec![1.0], vec![2.0]]);
        let g = MetricField { g: Tensor::from_rows(&[vec![1.0], vec![1.0]]) };
        let out = metric_attention(&f, Some(&g), &unit_params(), None).unwrap();
        let e = 1f64.exp();
        let expected = (1.0 + 2.0 * e) / (1.0 + e);
        assert!((out.at(0, 0) - expected).abs() < 1e-12);
        assert!((out.at(0, 0) - 1.7311).abs() < 1e-4);
    }

    #[test]
    fn single_self_loop_returns_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AttentionParams::init(3, &mut rng).unwrap();
        let f = normal_matrix(&mut rng, 1, 3, 1.0).unwrap();
        let g = MetricField { g: normal_matrix(&mut rng, 1, 3, 1.0).unwrap() };
        let out = metric_attention(&f, Some(&g), &p, None).unwrap();
        let fv = f.matmul(&p.w_v).unwrap();
        for (a, b) in out.data().iter().zip(fv.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_mask_row_is_degenerate() {
        let f = Tensor::from_rows(&[vec![1.0], vec![2.0]]);
        let err = metric_attention(&f, None, &unit_params(), Some(&[true, true, false, false])).unwrap_err();
        assert!(matches!(err, Error::Tensor(prfusion_tensor::TensorError::DegenerateRow { row: 1 })));
    }

    #[test]
    fn degeneracy_monitor() {
        let m = MetricField { g: Tensor::from_rows(&[vec![0.0, 1.0], vec![1e-9, 2.0]]) };
        assert_eq!(m.degenerate_fraction(), 0.5);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in AttentionKind::ALL {
            assert_eq!(AttentionKind::parse(k.name()), Some(k));
        }
        assert_eq!(AttentionKind::parse("bogus"), None);
    }

    #[test]
    fn grouped_passes_ungrouped_nodes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = AttentionLayer::new(AttentionParams::init(4, &mut rng).unwrap(), AttentionKind::Metric, SolverConfig::default());
        let f = normal_matrix(&mut rng, 5, 4, 1.0).unwrap();
        let out = layer.forward_grouped(&f, &[vec![3, 0], vec![2]]).unwrap();
        assert_eq!(out.row(1), f.row(1));
        assert_eq!(out.row(4), f.row(4));
        let fv = f.matmul(&layer.params.w_v).unwrap();
        for (a, b) in out.row(2).iter().zip(fv.row(2)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(layer.forward_grouped(&f, &[vec![0], vec![0]]).is_err());
        assert!(layer.forward_grouped(&f, &[vec![]]).is_err());
    }
}
