//! Stateless dense, ReLU and dropout kernels on `batch x features` matrices.

use rand::Rng;

use super::{NnError, Tensor};

/// `x W + b` for `x: batch x in`, `W: in x out`, `b: out`.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    let mut y = x.matmul(w)?;
    y.add_row_vector(b)?;
    Ok(y)
}

pub struct DenseGrads {
    pub dw: Tensor,
    pub db: Tensor,
    pub dx: Tensor,
}

pub fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<DenseGrads, NnError> {
    Ok(DenseGrads {
        dw: x.matmul_tn(dy)?,
        db: dy.sum_rows(),
        dx: dy.matmul_nt(w)?,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Subgradient at exactly zero is taken as zero.
pub fn relu_backward(pre: &Tensor, dy: &Tensor) -> Tensor {
    let mut out = dy.clone();
    out.data_mut()
        .iter_mut()
        .zip(pre.data())
        .for_each(|(g, &p)| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
    out
}

/// Inverted-dropout mask: entries are `0` or `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Tensor {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let data = (0..rows * cols)
        .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
        .collect();
    Tensor::from_vec(&[rows, cols], data).expect("mask shape")
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    out.data_mut()
        .iter_mut()
        .zip(b.data())
        .for_each(|(x, y)| *x *= y);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_preactivation() {
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.5], vec![0.3, 0.2, 0.1]]).unwrap();
        let w = Tensor::zeros(&[3, 4]);
        let b = Tensor::zeros(&[4]);
        let y = dense_forward(&x, &w, &b).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.5]]).unwrap();
        let y = dense_forward(&x, &Tensor::identity(3), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn relu_kink_has_zero_subgradient() {
        let pre = Tensor::from_rows(&[vec![-1.0, 0.0, 2.0]]).unwrap();
        let g = relu_backward(&pre, &Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap());
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn dropout_mask_is_inverted_and_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let m1 = dropout_mask(50, 40, 0.2, &mut a);
        let m2 = dropout_mask(50, 40, 0.2, &mut b);
        assert_eq!(m1, m2);
        assert!(m1.data().iter().all(|&v| v == 0.0 || v == 1.25));
        let mean = m1.data().iter().sum::<f64>() / m1.len() as f64;
        assert!((mean - 1.0).abs() < 0.05);
    }
}
