//! Late fusion: concatenate the text and temporal embeddings, run the MLP, squash
//! with a sigmoid and threshold at 0.5.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, sigmoid, Matrix};
use crate::params::{init_bias, init_matrix, push_mat, push_vec, ParamSet, TensorRef};

/// Probabilities at or above this value become positive predictions.
pub const THRESHOLD: f64 = 0.5;

pub fn fuse(z_a: &[f64], z_b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(z_a.len() + z_b.len());
    out.extend_from_slice(z_a);
    out.extend_from_slice(z_b);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn init<R: Rng>(rng: &mut R, out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: init_matrix(rng, out_dim, in_dim),
            bias: init_bias(rng, out_dim, in_dim),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weight.matvec(x);
        axpy(&mut y, 1.0, &self.bias);
        y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    /// First layer maps the fused input to the hidden width; any further layers are square.
    pub hidden: Vec<DenseLayer>,
    pub out: DenseLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub z_in: Vec<f64>,
    pub pre: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub bits: Vec<u8>,
}

impl FusionOutput {
    /// Output of the last hidden layer: the fused patient representation.
    pub fn representation(&self) -> &[f64] {
        self.hidden.last().map_or(&self.z_in, Vec::as_slice)
    }
}

impl FusionParams {
    pub fn init<R: Rng>(
        rng: &mut R,
        in_dim: usize,
        hidden_dim: usize,
        depth: usize,
        out_dim: usize,
    ) -> Self {
        let mut hidden = Vec::with_capacity(depth);
        for k in 0..depth {
            let fan_in = if k == 0 { in_dim } else { hidden_dim };
            hidden.push(DenseLayer::init(rng, hidden_dim, fan_in));
        }
        let last = if depth == 0 { in_dim } else { hidden_dim };
        Self {
            hidden,
            out: DenseLayer::init(rng, out_dim, last),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden
            .first()
            .map_or(self.out.weight.cols(), |l| l.weight.cols())
    }

    pub fn out_dim(&self) -> usize {
        self.out.weight.rows()
    }

    pub fn forward(&self, z_in: &[f64]) -> Result<FusionOutput> {
        if z_in.len() != self.in_dim() {
            return Err(Error::Shape {
                context: "fusion input",
                expected: self.in_dim(),
                actual: z_in.len(),
            });
        }
        let mut pre = Vec::with_capacity(self.hidden.len());
        let mut hidden = Vec::with_capacity(self.hidden.len());
        let mut x = z_in.to_vec();
        for (k, layer) in self.hidden.iter().enumerate() {
            let p = layer.apply(&x);
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("fusion hidden layer {k}")));
            }
            x = p.iter().map(|v| v.max(0.0)).collect();
            pre.push(p);
            hidden.push(x.clone());
        }
        let logits = self.out.apply(&x);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("fusion output layer".into()));
        }
        let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let bits = probs.iter().map(|&p| u8::from(p >= THRESHOLD)).collect();
        Ok(FusionOutput {
            z_in: z_in.to_vec(),
            pre,
            hidden,
            logits,
            probs,
            bits,
        })
    }

    /// Returns `dL/dz_in` and the parameter gradients for `dL/dlogits`.
    pub fn backward(&self, out: &FusionOutput, d_logits: &[f64]) -> (Vec<f64>, FusionParams) {
        let mut g = self.clone();
        g.zero();
        let last_in = out.hidden.last().unwrap_or(&out.z_in);
        g.out.weight.add_outer(d_logits, last_in);
        axpy(&mut g.out.bias, 1.0, d_logits);
        let mut dx = self.out.weight.matvec_t(d_logits);
        for k in (0..self.hidden.len()).rev() {
            for (v, p) in dx.iter_mut().zip(&out.pre[k]) {
                if *p <= 0.0 {
                    *v = 0.0;
                }
            }
            let input = if k == 0 {
                &out.z_in
            } else {
                &out.hidden[k - 1]
            };
            g.hidden[k].weight.add_outer(&dx, input);
            axpy(&mut g.hidden[k].bias, 1.0, &dx);
            dx = self.hidden[k].weight.matvec_t(&dx);
        }
        (dx, g)
    }

    pub(crate) fn tensors_into<'a>(&'a self, out: &mut Vec<TensorRef<'a>>) {
        for (k, l) in self.hidden.iter().enumerate() {
            push_mat(out, format!("fusion.hidden{k}.weight"), &l.weight);
            push_vec(out, format!("fusion.hidden{k}.bias"), &l.bias);
        }
        push_mat(out, "fusion.out.weight".into(), &self.out.weight);
        push_vec(out, "fusion.out.bias".into(), &self.out.bias);
    }

    pub(crate) fn tensors_mut_into<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        for l in &mut self.hidden {
            out.push(l.weight.as_mut_slice());
            out.push(&mut l.bias);
        }
        out.push(self.out.weight.as_mut_slice());
        out.push(&mut self.out.bias);
    }
}

impl ParamSet for FusionParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut v = Vec::new();
        self.tensors_into(&mut v);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        self.tensors_mut_into(&mut v);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn head(seed: u64, d: usize, out: usize) -> FusionParams {
        FusionParams::init(&mut ChaCha8Rng::seed_from_u64(seed), 2 * d, d, 1, out)
    }

    #[test]
    fn concatenation_order_and_width() {
        assert_eq!(fuse(&[1.0, 2.0], &[3.0]), vec![1.0, 2.0, 3.0]);
        assert_eq!(fuse(&[0.0; 2], &[0.0; 3]), vec![0.0; 5]);
        assert_eq!(fuse(&[0.5; 64], &[0.5; 64]).len(), 128);
    }

    #[test]
    fn zero_params_sit_on_the_threshold() {
        let mut p = head(1, 3, 4);
        p.zero();
        let out = p.forward(&[1.0; 6]).unwrap();
        assert_eq!(out.probs, vec![0.5; 4]);
        assert_eq!(out.bits, vec![1; 4]);
    }

    #[test]
    fn large_negative_bias_predicts_nothing() {
        let mut p = head(2, 3, 4);
        p.out.weight = Matrix::zeros(4, 3);
        p.out.bias = vec![-50.0; 4];
        let out = p.forward(&[0.3; 6]).unwrap();
        assert_eq!(out.bits, vec![0; 4]);
    }

    #[test]
    fn matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = head(5, 4, 3);
        let z: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let out = p.forward(&z).unwrap();
        let w1 = &p.hidden[0];
        let mut h = [0.0; 4];
        for i in 0..4 {
            let mut acc = w1.bias[i];
            for j in 0..8 {
                acc += w1.weight.get(i, j) * z[j];
            }
            h[i] = if acc > 0.0 { acc } else { 0.0 };
        }
        for k in 0..3 {
            let mut acc = p.out.bias[k];
            for i in 0..4 {
                acc += p.out.weight.get(k, i) * h[i];
            }
            let prob = 1.0 / (1.0 + (-acc).exp());
            assert!((out.logits[k] - acc).abs() < 1e-12);
            assert!((out.probs[k] - prob).abs() < 1e-12);
        }
        for (a, b) in out.representation().iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_input_names_the_layer() {
        let p = head(1, 2, 2);
        let err = p.forward(&[f64::NAN, 0.0, 0.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("fusion hidden layer 0"), "{err}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = head(3, 3, 2);
        let z: Vec<f64> = vec![0.4, -0.2, 0.9, 0.1, -0.7, 0.3];
        let c = [0.7, -1.3];
        let f = |p: &FusionParams, z: &[f64]| -> f64 {
            let o = p.forward(z).unwrap();
            o.logits.iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let out = p.forward(&z).unwrap();
        let (dz, g) = p.backward(&out, &c);
        let h = 1e-6;
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp[i] += h;
            let mut zm = z.clone();
            zm[i] -= h;
            let fd = (f(&p, &zp) - f(&p, &zm)) / (2.0 * h);
            assert!((fd - dz[i]).abs() < 1e-7, "dz[{i}] {fd} vs {}", dz[i]);
        }
        let analytic: Vec<f64> = g.tensors().iter().flat_map(|t| t.data.to_vec()).collect();
        let mut q = p.clone();
        let mut idx = 0;
        let n_tensors = q.tensors().len();
        for t in 0..n_tensors {
            let len = q.tensors()[t].data.len();
            for k in 0..len {
                let orig = q.tensors()[t].data[k];
                q.tensors_mut()[t][k] = orig + h;
                let fp = f(&q, &z);
                q.tensors_mut()[t][k] = orig - h;
                let fm = f(&q, &z);
                q.tensors_mut()[t][k] = orig;
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - analytic[idx]).abs() < 1e-7);
                idx += 1;
            }
        }
    }

    proptest! {
        #[test]
        fn probabilities_open_interval_and_relu_nonnegative(z in prop::collection::vec(-5.0f64..5.0, 8), seed in 0u64..50) {
            let p = head(seed, 4, 3);
            let out = p.forward(&z).unwrap();
            prop_assert!(out.probs.iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert!(out.hidden[0].iter().all(|&v| v >= 0.0));
            prop_assert!(out.bits.iter().all(|&b| b <= 1));
        }

        #[test]
        fn raising_one_logit_moves_only_its_probability(seed in 0u64..50, k in 0usize..3, delta in 0.01f64..3.0) {
            let mut p = head(seed, 4, 3);
            let z = vec![0.2; 8];
            let before = p.forward(&z).unwrap();
            p.out.bias[k] += delta;
            let after = p.forward(&z).unwrap();
            for j in 0..3 {
                if j == k {
                    prop_assert!(after.probs[j] > before.probs[j]);
                } else {
                    prop_assert_eq!(after.probs[j], before.probs[j]);
                }
            }
        }
    }
}
