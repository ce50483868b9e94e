//! Neural diffusion over the image feature graph.
//!
//! `dX/dt = (A(t) − E) X W_X`, where `A(t)` is a row softmax of `Y Yᵀ`
//! restricted to each node's K most similar nodes and `Y = [X ‖ P] W_Y`
//! mixes in the fixed node positions `P`. `A` is rebuilt from the current
//! state at every solver stage, so the graph rewires as features move.

use prfusion_tensor::{ode_integrate, OdeState, Tensor};
use rand::Rng;

use crate::attention::SolverConfig;
use crate::error::{Error, Result};
use crate::params::{normal_matrix, ParamVisitor, Parameterized};

pub const DEFAULT_NEIGHBORS: usize = 25;

/// Keep-mask (row-major n×n) of each row's `k` largest similarities.
///
/// The diagonal is always kept; the remaining `k − 1` slots go to the
/// largest off-diagonal entries, ties to the lower column.
pub fn knn_mask(similarity: &[f64], n: usize, k: usize) -> Result<Vec<bool>> {
    if k == 0 || k > n {
        return Err(Error::Contract(format!("K = {k} neighbours on {n} nodes")));
    }
    let mut mask = vec![false; n * n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        let row = &similarity[i * n..(i + 1) * n];
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        mask[i * n + i] = true;
        for &j in &order[..k - 1] {
            mask[i * n + j] = true;
        }
    }
    Ok(mask)
}

/// Row-stochastic KNN attention `A` from node features.
///
/// `positions`, when given, are appended as extra columns before the
/// projection, so `w_y` must then have `c + positions.cols()` rows.
pub fn build_knn_attention(x: &Tensor, positions: Option<&Tensor>, w_y: &Tensor, k: usize) -> Result<Tensor> {
    let input = match positions {
        Some(p) => Tensor::concat_cols(&[x.clone(), p.clone()])?,
        None => x.clone(),
    };
    let y = input.matmul(w_y)?;
    let s = y.matmul(&y.transpose()?)?;
    let mask = knn_mask(s.data(), x.rows(), k)?;
    Ok(s.softmax_rows(Some(&mask))?)
}

#[derive(Debug, Clone)]
pub struct Ndm {
    pub w_x: Tensor,
    pub w_y: Tensor,
    pub k: usize,
    pub solver: SolverConfig,
}

impl Ndm {
    /// `pos_dim` extra position channels feed the adjacency projection.
    pub fn init(c: usize, pos_dim: usize, k: usize, solver: SolverConfig, rng: &mut impl Rng) -> Result<Self> {
        let std = 1.0 / (c as f64).sqrt();
        Ok(Ndm {
            w_x: normal_matrix(rng, c, c, std)?,
            w_y: normal_matrix(rng, c + pos_dim, c, std)?,
            k,
            solver,
        })
    }

    /// Diffuses `x0` from 0 to the solver horizon. `K` is clipped to the
    /// node count.
    pub fn forward(&self, x0: &Tensor, positions: Option<&Tensor>) -> Result<Tensor> {
        let k = self.k.min(x0.rows());
        let state = OdeState::new(x0.clone(), 0.0, self.solver.horizon, self.solver.steps)?;
        let x = ode_integrate(
            |_, x| {
                let a = build_knn_attention(x, positions, &self.w_y, k)
                    .map_err(|e| prfusion_tensor::TensorError::Contract(e.to_string()))?;
                a.matmul(x)?.sub(x)?.matmul(&self.w_x)
            },
            &state,
        )?;
        Ok(x)
    }
}

impl Parameterized for Ndm {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&format!("{prefix}.w_x"), &self.w_x);
        f(&format!("{prefix}.w_y"), &self.w_y);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.w_x"), &mut self.w_x);
        f(&format!("{prefix}.w_y"), &mut self.w_y);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_neighbourhood_is_dense_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = normal_matrix(&mut rng, 5, 3, 1.0).unwrap();
        let w = normal_matrix(&mut rng, 3, 3, 1.0).unwrap();
        let a = build_knn_attention(&x, None, &w, 5).unwrap();
        let y = x.matmul(&w).unwrap();
        let dense = y.matmul(&y.transpose().unwrap()).unwrap().softmax_rows(None).unwrap();
        for (p, q) in a.data().iter().zip(dense.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_give_uniform_kept_weights() {
        let x = Tensor::from_rows(&vec![vec![0.3, -0.2]; 6]);
        let a = build_knn_attention(&x, None, &Tensor::eye(2), 4).unwrap();
        for i in 0..6 {
            let row = a.row(i);
            assert_eq!(row.iter().filter(|&&v| v > 0.0).count(), 4);
            assert!(row[i] > 0.0);
            for &v in row.iter().filter(|&&v| v > 0.0) {
                assert!((v - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ties_go_to_the_lower_index() {
        let s = vec![0.0; 9];
        let m = knn_mask(&s, 3, 2).unwrap();
        assert_eq!(m, vec![true, true, false, true, true, false, true, false, true]);
        assert!(knn_mask(&s, 3, 4).is_err());
        assert!(knn_mask(&s, 3, 0).is_err());
    }

    #[test]
    fn consensus_and_zero_field_are_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ndm = Ndm::init(3, 2, 4, SolverConfig::default(), &mut rng).unwrap();
        let pos = normal_matrix(&mut rng, 6, 2, 1.0).unwrap();
        let x0 = Tensor::from_rows(&vec![vec![1.5, -0.5, 2.0]; 6]);
        let out = ndm.forward(&x0, Some(&pos)).unwrap();
        for (a, b) in out.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-9);
        }

        let mut frozen = ndm.clone();
        frozen.w_x = Tensor::zeros(&[3, 3]);
        let x0 = normal_matrix(&mut rng, 6, 3, 1.0).unwrap();
        assert_eq!(frozen.forward(&x0, Some(&pos)).unwrap().data(), x0.data());
    }

    #[test]
    fn euler_step_agrees_to_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = normal_matrix(&mut rng, 4, 2, 1.0).unwrap();
        let a = build_knn_attention(&x0, None, &Tensor::eye(2), 4).unwrap();
        let drift = a.matmul(&x0).unwrap().sub(&x0).unwrap();
        let mut errs = Vec::new();
        for h in [0.1, 0.05] {
            let ndm = Ndm {
                w_x: Tensor::eye(2),
                w_y: Tensor::eye(2),
                k: 4,
                solver: SolverConfig { horizon: h, steps: 1 },
            };
            let rk = ndm.forward(&x0, None).unwrap();
            let euler = x0.add(&drift.scale(h)).unwrap();
            let err = rk.data().iter().zip(euler.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(err < 10.0 * h * h, "{err}");
            errs.push(err);
        }
        let ratio = errs[0] / errs[1];
        assert!((3.0..5.0).contains(&ratio), "{ratio}");
    }
}
