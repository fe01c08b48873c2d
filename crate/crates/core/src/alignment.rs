//! Affine map `h(f) = W f + b` from classifier features into the joint embedding space.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::models::{Checkpoint, ClassifierModel, JointEmbedder};
use crate::numerics::{Graph, Optimizer, Tensor};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMethod {
    ClosedForm,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub method: AlignMethod,
    /// Fraction of the training set used to fit the map.
    pub fraction: f64,
    /// Ridge term added to the normal matrix.
    pub ridge: f64,
    pub sgd_steps: usize,
    pub sgd_learning_rate: f64,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            method: AlignMethod::ClosedForm,
            fraction: 0.2,
            ridge: 1e-6,
            sgd_steps: 2000,
            sgd_learning_rate: 0.02,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aligner {
    /// `[out_dim, feat_dim]`.
    pub w: Tensor,
    pub b: Tensor,
    /// Mean over samples of `‖W f + b − y‖²` on the fitting set.
    pub residual: f64,
    pub fraction: f64,
}

fn column_means(x: &Tensor) -> Vec<f64> {
    let (n, d) = (x.rows(), x.cols());
    let mut m = vec![0.0; d];
    for i in 0..n {
        for (a, v) in m.iter_mut().zip(x.row(i)) {
            *a += v;
        }
    }
    m.iter().map(|s| s / n as f64).collect()
}

fn centered(x: &Tensor) -> DMatrix<f64> {
    let mu = column_means(x);
    DMatrix::from_fn(x.rows(), x.cols(), |i, j| x.row(i)[j] - mu[j])
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.rank() != 2 || y.rank() != 2 || x.rows() != y.rows() {
        return Err(Error::Shape(format!("features {:?} vs targets {:?}", x.shape(), y.shape())));
    }
    Ok(())
}

impl Aligner {
    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn feat_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn align(&self, feature: &[f64]) -> Result<Vec<f64>> {
        let d = self.feat_dim();
        if feature.len() != d {
            return Err(Error::Shape(format!("feature of dim {}, aligner expects {d}", feature.len())));
        }
        Ok((0..self.out_dim())
            .map(|o| {
                self.w.data()[o * d..(o + 1) * d].iter().zip(feature).map(|(w, f)| w * f).sum::<f64>()
                    + self.b.data()[o]
            })
            .collect())
    }

    pub fn align_rows(&self, features: &Tensor) -> Result<Tensor> {
        let mut out = Vec::with_capacity(features.rows() * self.out_dim());
        for i in 0..features.rows() {
            out.extend(self.align(features.row(i))?);
        }
        Tensor::new(&[features.rows(), self.out_dim()], out)
    }

    /// Mean squared alignment error on `(x, y)`.
    pub fn loss(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        check_pair(x, y)?;
        let p = self.align_rows(x)?;
        Ok(p.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.rows() as f64)
    }

    /// `‖(XcᵀXc + εI) Wᵀ − XcᵀYc‖∞` on centered data.
    pub fn normal_equation_residual(&self, x: &Tensor, y: &Tensor, ridge: f64) -> Result<f64> {
        check_pair(x, y)?;
        let (xc, yc) = (centered(x), centered(y));
        let d = x.cols();
        let wt = DMatrix::from_fn(d, self.out_dim(), |i, o| self.w.data()[o * d + i]);
        let lhs = (xc.transpose() * &xc + DMatrix::identity(d, d) * ridge) * wt;
        let rhs = xc.transpose() * yc;
        Ok((lhs - rhs).iter().fold(0.0f64, |m, v| m.max(v.abs())))
    }

    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        let arch = json!({
            "model": "aligner",
            "out_dim": self.out_dim(),
            "feat_dim": self.feat_dim(),
            "residual": self.residual,
            "fraction": self.fraction,
        });
        let mut ck = Checkpoint::new(arch, metadata);
        ck.push("w", &self.w);
        ck.push("b", &self.b);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let a = &ck.architecture;
        if a["model"] != "aligner" {
            return Err(Error::Checkpoint(format!("not an aligner checkpoint: {}", a["model"])));
        }
        let q = a["out_dim"].as_u64().ok_or_else(|| Error::Checkpoint("missing out_dim".into()))? as usize;
        let d = a["feat_dim"].as_u64().ok_or_else(|| Error::Checkpoint("missing feat_dim".into()))? as usize;
        Ok(Self {
            w: ck.expect("w", &[q, d])?,
            b: ck.expect("b", &[q])?,
            residual: a["residual"].as_f64().unwrap_or(0.0),
            fraction: a["fraction"].as_f64().unwrap_or(1.0),
        })
    }
}

/// Ridge least squares with an unpenalized intercept: solves `(XcᵀXc + εI) Wᵀ = XcᵀYc`, `b = ȳ − W x̄`.
pub fn fit_closed_form(x: &Tensor, y: &Tensor, ridge: f64) -> Result<Aligner> {
    check_pair(x, y)?;
    if ridge <= 0.0 {
        return Err(Error::InvalidArgument("ridge term must be positive".into()));
    }
    let (d, q) = (x.cols(), y.cols());
    let (xc, yc) = (centered(x), centered(y));
    let normal = xc.transpose() * &xc + DMatrix::identity(d, d) * ridge;
    let rhs = xc.transpose() * yc;
    let chol = normal.cholesky().ok_or_else(|| Error::InvalidArgument("normal matrix is not positive definite".into()))?;
    let wt = chol.solve(&rhs);
    let (mx, my) = (column_means(x), column_means(y));
    let w: Vec<f64> = (0..q).flat_map(|o| (0..d).map(move |i| (o, i))).map(|(o, i)| wt[(i, o)]).collect();
    let b: Vec<f64> =
        (0..q).map(|o| my[o] - (0..d).map(|i| wt[(i, o)] * mx[i]).sum::<f64>()).collect();
    let mut out = Aligner { w: Tensor::new(&[q, d], w)?, b: Tensor::vector(b), residual: 0.0, fraction: 1.0 };
    out.residual = out.loss(x, y)?;
    Ok(out)
}

/// Full-batch Adam on the mean squared error with a cosine learning-rate decay.
///
/// Features are whitened with the Cholesky factor of their covariance first, so
/// the quadratic is isotropic and correlated features do not stall the descent.
pub fn fit_sgd(x: &Tensor, y: &Tensor, steps: usize, learning_rate: f64) -> Result<Aligner> {
    check_pair(x, y)?;
    let (n, d, q) = (x.rows(), x.cols(), y.cols());
    let mx = column_means(x);
    let xc = centered(x);
    let cov = xc.transpose() * &xc / n as f64;
    // Tiny jitter keeps constant or duplicated features positive definite.
    let jitter = 1e-12 * (cov.trace() / d as f64).max(1e-300);
    let chol = (cov + DMatrix::identity(d, d) * jitter)
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("feature covariance is not positive definite".into()))?;
    // Rows of `xc · L⁻ᵀ` have identity covariance.
    let white = chol.l().solve_lower_triangular(&xc.transpose()).expect("cholesky factor is invertible").transpose();
    let xs = Tensor::new(&[n, d], (0..n).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| white[(i, j)]).collect())?;
    // Unit-variance targets bound each output's coefficient norm by 1, so the step budget is scale free.
    let my = column_means(y);
    let sy: Vec<f64> = (0..q)
        .map(|o| {
            let v = (0..n).map(|i| (y.row(i)[o] - my[o]).powi(2)).sum::<f64>() / n as f64;
            if v > 1e-24 { v.sqrt() } else { 1.0 }
        })
        .collect();
    let ys = Tensor::new(&[n, q], (0..n).flat_map(|i| (0..q).map(move |o| (i, o))).map(|(i, o)| (y.row(i)[o] - my[o]) / sy[o]).collect())?;
    // Parameters in `[d, q]` layout so that predictions are `xs · w + b`.
    let mut w = Tensor::zeros(&[d, q]);
    let mut b = Tensor::zeros(&[q]);
    let mut opt = Optimizer::adam(learning_rate, [&w, &b]);
    for step in 0..steps {
        let lr = learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos());
        opt.set_learning_rate(lr);
        let mut g = Graph::new();
        let (wv, bv) = (g.param(&w), g.param(&b));
        let xv = g.constant(xs.clone());
        let p = g.matmul(xv, wv)?;
        let p = g.add_bias(p, bv)?;
        let yv = g.constant(ys.clone());
        let diff = g.sub(p, yv)?;
        let sq = g.square(diff);
        let s = g.sum(sq);
        let loss = g.scale(s, 1.0 / n as f64);
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Diverged { epoch: 0, step, loss: lv });
        }
        let mut grads = g.backward(loss)?;
        let gs = vec![grads.take(wv).expect("leaf"), grads.take(bv).expect("leaf")];
        opt.step(vec![&mut w, &mut b], &gs)?;
    }
    // Undo both transforms: W_origᵀ = L⁻ᵀ w diag(s_y), b_orig = m_y + s_y ⊙ b − W_orig m_x.
    let wm = DMatrix::from_row_slice(d, q, w.data());
    let worig = chol.l().transpose().solve_upper_triangular(&wm).expect("cholesky factor is invertible");
    let wo: Vec<f64> = (0..q).flat_map(|o| (0..d).map(move |j| (o, j))).map(|(o, j)| worig[(j, o)] * sy[o]).collect();
    let bo: Vec<f64> = (0..q)
        .map(|o| my[o] + sy[o] * b.data()[o] - (0..d).map(|j| wo[o * d + j] * mx[j]).sum::<f64>())
        .collect();
    let mut out = Aligner { w: Tensor::new(&[q, d], wo)?, b: Tensor::vector(bo), residual: 0.0, fraction: 1.0 };
    out.residual = out.loss(x, y)?;
    Ok(out)
}

/// Seeded subset of `n` indices of size `max(1, round(fraction · n))`, in ascending order.
pub fn sample_fraction(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} of {n} samples")));
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut rng::stream(seed, "align-subset"), &mut idx);
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Fits the aligner from classifier features to image-tower embeddings on a sampled fraction of `images`.
pub fn train_aligner(
    classifier: &ClassifierModel,
    embedder: &JointEmbedder,
    images: &[&Image],
    config: &AlignConfig,
) -> Result<Aligner> {
    let idx = sample_fraction(images.len(), config.fraction, config.seed)?;
    let subset: Vec<&Image> = idx.iter().map(|&i| images[i]).collect();
    let x = classifier.features(&subset)?;
    let y = embedder.embed_images(&subset)?;
    let mut a = match config.method {
        AlignMethod::ClosedForm => fit_closed_form(&x, &y, config.ridge)?,
        AlignMethod::Sgd => fit_sgd(&x, &y, config.sgd_steps, config.sgd_learning_rate)?,
    };
    a.fraction = config.fraction;
    a.w.quantize_f32();
    a.b.quantize_f32();
    a.residual = a.loss(&x, &y)?;
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(n: usize, d: usize, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::new(&[n, d], (0..n * d).map(|_| rng::normal(&mut r)).collect()).unwrap()
    }

    fn plant(x: &Tensor, a: &Tensor, c: &[f64]) -> Tensor {
        let al = Aligner { w: a.clone(), b: Tensor::vector(c.to_vec()), residual: 0.0, fraction: 1.0 };
        al.align_rows(x).unwrap()
    }

    #[test]
    fn planted_affine_map_is_recovered() {
        let x = gaussian(300, 6, 1);
        let a = gaussian(4, 6, 2);
        let c = [0.5, -1.0, 2.0, 0.0];
        let y = plant(&x, &a, &c);
        let fit = fit_closed_form(&x, &y, 1e-6).unwrap();
        assert!(fit.residual < 1e-8);
        let fro: f64 = fit.w.data().iter().zip(a.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        assert!(fro < 1e-4, "{fro}");
        assert!(fit.normal_equation_residual(&x, &y, 1e-6).unwrap() < 1e-6);
    }

    #[test]
    fn constant_zero_features_give_mean_bias() {
        let x = Tensor::zeros(&[5, 3]);
        let y = gaussian(5, 2, 3);
        let fit = fit_closed_form(&x, &y, 1e-6).unwrap();
        assert!(fit.w.data().iter().all(|v| *v == 0.0));
        for o in 0..2 {
            let mean = (0..5).map(|i| y.row(i)[o]).sum::<f64>() / 5.0;
            assert!((fit.b.data()[o] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_map_and_affinity() {
        let id = Aligner {
            w: Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            b: Tensor::zeros(&[3]),
            residual: 0.0,
            fraction: 1.0,
        };
        assert_eq!(id.align(&[0.1, -2.0, 3.0]).unwrap(), vec![0.1, -2.0, 3.0]);
        let a = Aligner { w: gaussian(2, 3, 5), b: Tensor::vector(vec![1.0, -1.0]), residual: 0.0, fraction: 1.0 };
        let f = [0.3, 0.7, -1.1];
        let (af, a0) = (a.align(&f).unwrap(), a.align(&[0.0; 3]).unwrap());
        for o in 0..2 {
            let wf: f64 = (0..3).map(|i| a.w.data()[o * 3 + i] * f[i]).sum();
            assert!((af[o] - a0[o] - wf).abs() < 1e-12);
        }
        assert!(a.align(&[0.0; 2]).is_err());
    }

    #[test]
    fn sgd_approaches_closed_form() {
        let x = gaussian(200, 5, 7).map(|v| v * 3.0 + 1.0);
        let a = gaussian(3, 5, 8);
        let noise = gaussian(200, 3, 9).map(|v| 0.1 * v);
        let y = plant(&x, &a, &[0.2, 0.1, -0.3]).zip_map(&noise, |p, e| p + e).unwrap();
        let cf = fit_closed_form(&x, &y, 1e-6).unwrap();
        let sgd = fit_sgd(&x, &y, 2000, 0.02).unwrap();
        assert!((sgd.residual - cf.residual) / cf.residual < 0.05, "{} vs {}", sgd.residual, cf.residual);
    }

    #[test]
    fn sgd_handles_nearly_collinear_features() {
        let base = gaussian(300, 3, 10);
        let mix = gaussian(3, 6, 11);
        let jitter = gaussian(300, 6, 12).map(|v| 1e-3 * v);
        let x = plant(&base, &mix.transpose(), &[0.0; 6]).zip_map(&jitter, |p, e| p + e).unwrap();
        let a = gaussian(2, 6, 13);
        let noise = gaussian(300, 2, 14).map(|v| 0.05 * v);
        let y = plant(&x, &a, &[0.5, -0.5]).zip_map(&noise, |p, e| p + e).unwrap();
        let cf = fit_closed_form(&x, &y, 1e-6).unwrap();
        let sgd = fit_sgd(&x, &y, 2000, 0.02).unwrap();
        assert!((sgd.residual - cf.residual) / cf.residual < 0.05, "{} vs {}", sgd.residual, cf.residual);
    }

    #[test]
    fn fraction_sampling() {
        let s = sample_fraction(100, 0.2, 4).unwrap();
        assert_eq!(s.len(), 20);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, sample_fraction(100, 0.2, 4).unwrap());
        assert_eq!(sample_fraction(3, 0.01, 0).unwrap().len(), 1);
        assert!(sample_fraction(3, 0.0, 0).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let a = Aligner { w: Tensor::matrix(1, 2, vec![0.5, 0.25]).unwrap(), b: Tensor::vector(vec![1.0]), residual: 0.5, fraction: 0.2 };
        let back = Aligner::from_checkpoint(&Checkpoint::from_bytes(&a.to_checkpoint(json!({})).to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, a);
    }
}
