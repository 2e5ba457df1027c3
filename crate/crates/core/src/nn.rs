//! Layer descriptors and parameter initialisation.
//!
//! A layer only knows its parameter names and shapes; the tensors live in a
//! [`ParamSet`] owned by the caller, so the same model description drives
//! `f32` training and `f64` gradient checks.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use ratenet_autograd::{Graph, PadMode, ParamSet, Scalar, Tensor, Var};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
    pub bias: bool,
}

impl Conv2d {
    /// Same-size `k x k` convolution (stride 1, padding `k / 2`).
    pub fn same(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, pad_mode: PadMode) -> Self {
        Self { name: name.into(), c_in, c_out, kernel, stride: 1, pad: kernel / 2, pad_mode, bias: true }
    }

    pub fn strided(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        pad_mode: PadMode,
    ) -> Self {
        Self { name: name.into(), c_in, c_out, kernel, stride, pad, pad_mode, bias: true }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, &self.weight_name())?;
        let b = if self.bias { Some(g.param(ps, &self.bias_name())?) } else { None };
        Ok(g.conv2d(x, w, b, self.stride, self.pad, self.pad_mode)?)
    }

    pub fn init<R: Rng>(&self, ps: &mut ParamSet<f32>, rng: &mut R, gain: f64) {
        let fan_in = self.c_in * self.kernel * self.kernel;
        let w = orthogonal(self.c_out, fan_in, gain, rng);
        ps.insert(
            self.weight_name(),
            Tensor::from_vec(&[self.c_out, self.c_in, self.kernel, self.kernel], w).expect("shape"),
        );
        if self.bias {
            ps.insert(self.bias_name(), Tensor::zeros(&[self.c_out]));
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self { name: name.into(), d_in, d_out }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, &self.weight_name())?;
        let b = g.param(ps, &self.bias_name())?;
        Ok(g.linear(x, w, Some(b))?)
    }

    pub fn init<R: Rng>(&self, ps: &mut ParamSet<f32>, rng: &mut R, gain: f64) {
        let w = orthogonal(self.d_out, self.d_in, gain, rng);
        ps.insert(self.weight_name(), Tensor::from_vec(&[self.d_out, self.d_in], w).expect("shape"));
        ps.insert(self.bias_name(), Tensor::zeros(&[self.d_out]));
    }
}

/// A `rows x cols` matrix (row-major) with orthonormal rows or columns,
/// whichever is the smaller set, scaled by `gain`.
pub fn orthogonal<R: Rng>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f32> {
    let (big, small) = (rows.max(cols), rows.min(cols));
    let m = DMatrix::<f64>::from_fn(big, small, |_, _| rng.sample(StandardNormal));
    let qr = m.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Sign convention makes the decomposition unique.
    for j in 0..small {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
            out.push((v * gain) as f32);
        }
    }
    out
}

/// `conv -> instance norm -> LeakyReLU`.
pub fn conv_in_lrelu<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamSet<T>,
    conv: &Conv2d,
    x: Var,
    slope: f64,
) -> Result<Var> {
    let y = conv.forward(g, ps, x)?;
    let y = g.instance_norm(y, T::from_f64_lossy(IN_EPS))?;
    Ok(g.leaky_relu(y, T::from_f64_lossy(slope)))
}

/// Variance guard of every instance / adaptive instance normalisation.
pub const IN_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn gram(m: &[f32], rows: usize, cols: usize, by_rows: bool) -> Vec<f64> {
        let n = if by_rows { rows } else { cols };
        let mut out = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                let mut s = 0.0;
                for k in 0..if by_rows { cols } else { rows } {
                    let (x, y) = if by_rows {
                        (m[a * cols + k], m[b * cols + k])
                    } else {
                        (m[k * cols + a], m[k * cols + b])
                    };
                    s += x as f64 * y as f64;
                }
                out[a * n + b] = s;
            }
        }
        out
    }

    #[test]
    fn orthogonal_rows_and_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &(r, c, by_rows) in &[(4, 9, true), (9, 4, false), (5, 5, true)] {
            let m = orthogonal(r, c, 1.0, &mut rng);
            let g = gram(&m, r, c, by_rows);
            let n = if by_rows { r } else { c };
            for a in 0..n {
                for b in 0..n {
                    let expect = if a == b { 1.0 } else { 0.0 };
                    assert!((g[a * n + b] - expect).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn init_is_seeded() {
        let conv = Conv2d::same("c", 3, 4, 3, PadMode::Zero);
        let mut a = ParamSet::new();
        let mut b = ParamSet::new();
        conv.init(&mut a, &mut ChaCha8Rng::seed_from_u64(5), 1.0);
        conv.init(&mut b, &mut ChaCha8Rng::seed_from_u64(5), 1.0);
        assert_eq!(a, b);
        assert!(a.get("c.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }
}
