use prfusion_tensor::{grad_check, ode_integrate, OdeState, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-scale..scale)).collect(), shape).unwrap()
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..8,
        vals in prop::collection::vec(-1e3f64..1e3, 48),
    ) {
        let x = Tensor::new(vals[..rows * cols].to_vec(), &[rows, cols]).unwrap();
        let y = x.softmax_rows(None).unwrap();
        for r in 0..rows {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
            prop_assert!(y.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn linear_ode_matches_closed_form(lambda in -2.0f64..2.0, y0 in -3.0f64..3.0) {
        let s = OdeState::new(Tensor::scalar(y0), 0.0, 1.0, 32).unwrap();
        let y = ode_integrate(|_, y| Ok(y.scale(lambda)), &s).unwrap();
        let exact = y0 * lambda.exp();
        prop_assert!((y.item() - exact).abs() <= 1e-6 * (1.0 + exact.abs()));
    }
}

#[test]
fn linear_ode_error_shrinks_at_fourth_order() {
    let lambda = -1.3;
    let err = |steps| {
        let s = OdeState::new(Tensor::scalar(1.0), 0.0, 1.0, steps).unwrap();
        let y = ode_integrate(|_, y| Ok(y.scale(lambda)), &s).unwrap();
        (y.item() - lambda.exp()).abs()
    };
    for steps in [4, 8, 16] {
        let order = (err(steps) / err(2 * steps)).log2();
        assert!(order > 3.5, "order {order} at {steps} steps");
    }
}

#[test]
fn every_op_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[3, 4], 1.0);
    let b = random(&mut rng, &[4, 2], 1.0);
    let v = random(&mut rng, &[4], 1.0);
    let pos = Tensor::new((0..12).map(|i| 0.5 + 0.1 * i as f64).collect(), &[3, 4]).unwrap();
    let p = Tensor::scalar(2.5);
    let err = grad_check(
        |t| {
            let (a, b, v, pos, p) = (&t[0], &t[1], &t[2], &t[3], &t[4]);
            let h = a.add(v)?.mul(v)?.tanh();
            let m = h.matmul(b)?.softmax_rows(Some(&[true, true, false, true, true, true]))?;
            let g = pos.pow(p)?.mean_rows().pow(&p.recip())?.mul(p)?;
            let cat = Tensor::concat_cols(&[m.clone(), a.exp().ln()])?;
            let r = Tensor::concat_rows(&[cat.select_rows(&[2, 0])?, cat])?;
            let tail = a.transpose()?.sqrt_safe()?.sum_cols().square().sum();
            r.norm()
                .add(&g.sum())?
                .add(&tail)?
                .add(&pos.powf(1.5).sub(&a.scale(0.3).add_scalar(1.0))?.relu().sum())?
                .add(&pos.reshape(&[4, 3])?.recip().clamp_min(0.3).sum())
        },
        &[a, b, v, pos, p],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "max relative error {err}");
}

trait SqrtSafe {
    fn sqrt_safe(&self) -> prfusion_tensor::Result<Tensor>;
}

impl SqrtSafe for Tensor {
    fn sqrt_safe(&self) -> prfusion_tensor::Result<Tensor> {
        Ok(self.square().add_scalar(1.0).sqrt())
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[5, 6], 2.0).to_param();
        let w = random(&mut rng, &[6, 6], 1.0).to_param();
        let y = x.matmul(&w).unwrap().tanh().softmax_rows(None).unwrap();
        y.mul(&x).unwrap().sum().backward().unwrap();
        (x.grad().unwrap(), w.grad().unwrap())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert!(a1.iter().zip(&a2).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(b1.iter().zip(&b2).all(|(p, q)| p.to_bits() == q.to_bits()));
}
