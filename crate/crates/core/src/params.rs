//! Uniform access to parameter tensors so optimizers, checkpoints and gradient
//! checks can walk every trainable group without knowing the model layout.

use rand::Rng;

use crate::linalg::Matrix;

pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub trait ParamSet {
    /// All tensors in a fixed order.
    fn tensors(&self) -> Vec<TensorRef<'_>>;
    /// The same tensors, same order, mutably.
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.tensors();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            crate::linalg::axpy(dst, 1.0, s.data);
        }
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn push_mat<'a>(out: &mut Vec<TensorRef<'a>>, name: String, m: &'a Matrix) {
    out.push(TensorRef {
        name,
        shape: vec![m.rows(), m.cols()],
        data: m.as_slice(),
    });
}

pub(crate) fn push_vec<'a>(out: &mut Vec<TensorRef<'a>>, name: String, v: &'a [f64]) {
    out.push(TensorRef {
        name,
        shape: vec![v.len()],
        data: v,
    });
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub(crate) fn init_uniform<R: Rng>(rng: &mut R, data: &mut [f64], fan_in: usize) {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    for v in data {
        *v = rng.gen_range(-bound..=bound);
    }
}

pub(crate) fn init_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    init_uniform(rng, m.as_mut_slice(), cols);
    m
}

pub(crate) fn init_bias<R: Rng>(rng: &mut R, len: usize, fan_in: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    init_uniform(rng, &mut v, fan_in);
    v
}

/// SplitMix64 finaliser applied to a pair, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
