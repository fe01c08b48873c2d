//! Dense 2-D discrete Fourier transform.
//!
//! Forward transform is unnormalized, `G[u,v] = Σ g[y,x] e^{-2πi(uy/H + vx/W)}`;
//! the inverse carries the `1/(HW)` factor. Both are separable products with
//! precomputed cosine/sine matrices, which keeps them exactly differentiable
//! when composed on a [`Graph`].

use std::f64::consts::TAU;

use super::graph::{Graph, Var};
use super::kernels::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Complex `H × W` grid stored as separate real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid {
    height: usize,
    width: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexGrid {
    pub fn new(height: usize, width: usize, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if re.len() != height * width || im.len() != height * width {
            return Err(Error::Shape(format!(
                "complex grid {height}x{width} with {} / {} values",
                re.len(),
                im.len()
            )));
        }
        Ok(Self { height, width, re, im })
    }

    pub fn from_polar(height: usize, width: usize, magnitude: &[f64], phase: &[f64]) -> Result<Self> {
        let re = magnitude.iter().zip(phase).map(|(m, p)| m * p.cos()).collect();
        let im = magnitude.iter().zip(phase).map(|(m, p)| m * p.sin()).collect();
        Self::new(height, width, re, im)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn get(&self, u: usize, v: usize) -> (f64, f64) {
        let i = u * self.width + v;
        (self.re[i], self.im[i])
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(a, b)| a.hypot(*b)).collect()
    }

    pub fn phase(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(a, b)| b.atan2(*a)).collect()
    }
}

/// Cosine and sine matrices `C[k,n] = cos(2πkn/N)`, `S[k,n] = sin(2πkn/N)`.
fn trig_matrices(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut c = vec![0.0; n * n];
    let mut s = vec![0.0; n * n];
    for k in 0..n {
        for j in 0..n {
            // Reduce kn mod N first so large products keep full precision.
            let angle = TAU * ((k * j) % n) as f64 / n as f64;
            c[k * n + j] = angle.cos();
            s[k * n + j] = angle.sin();
        }
    }
    (c, s)
}

/// Precomputed separable DFT basis for `H × W` grids.
#[derive(Clone, Debug)]
pub struct DftBasis {
    height: usize,
    width: usize,
    cos_h: Vec<f64>,
    sin_h: Vec<f64>,
    cos_w: Vec<f64>,
    sin_w: Vec<f64>,
}

impl DftBasis {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("DFT of an empty grid".into()));
        }
        let (cos_h, sin_h) = trig_matrices(height);
        let (cos_w, sin_w) = trig_matrices(width);
        Ok(Self { height, width, cos_h, sin_h, cos_w, sin_w })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        if t.shape() != [self.height, self.width] {
            return Err(Error::Shape(format!(
                "expected {}x{} grid, got {:?}",
                self.height,
                self.width,
                t.shape()
            )));
        }
        Ok(())
    }

    /// Forward transform of a real grid.
    pub fn forward(&self, grid: &Tensor) -> Result<ComplexGrid> {
        self.check(grid)?;
        let (h, w) = (self.height, self.width);
        // G = F_H g F_W with F = C - iS, g real.
        let mut gc = vec![0.0; h * w];
        let mut gs = vec![0.0; h * w];
        gemm(h, w, w, 1.0, grid.data(), false, &self.cos_w, false, 0.0, &mut gc);
        gemm(h, w, w, 1.0, grid.data(), false, &self.sin_w, false, 0.0, &mut gs);
        // re = C_H gC - S_H gS ; im = -(C_H gS + S_H gC)
        let mut re = vec![0.0; h * w];
        let mut im = vec![0.0; h * w];
        gemm(h, h, w, 1.0, &self.cos_h, false, &gc, false, 0.0, &mut re);
        gemm(h, h, w, -1.0, &self.sin_h, false, &gs, false, 1.0, &mut re);
        gemm(h, h, w, -1.0, &self.cos_h, false, &gs, false, 0.0, &mut im);
        gemm(h, h, w, -1.0, &self.sin_h, false, &gc, false, 1.0, &mut im);
        ComplexGrid::new(h, w, re, im)
    }

    /// Inverse transform; returns the real part and the largest |imaginary| part.
    pub fn inverse_with_residual(&self, spec: &ComplexGrid) -> Result<(Tensor, f64)> {
        if spec.shape() != (self.height, self.width) {
            return Err(Error::Shape(format!(
                "expected {}x{} spectrum, got {:?}",
                self.height,
                self.width,
                spec.shape()
            )));
        }
        let (h, w) = (self.height, self.width);
        let (a, b) = (&spec.re, &spec.im);
        // P = X F_W^*,  x = F_H^* P / (HW), F^* = C + iS.
        let mut p_re = vec![0.0; h * w];
        let mut p_im = vec![0.0; h * w];
        gemm(h, w, w, 1.0, a, false, &self.cos_w, false, 0.0, &mut p_re);
        gemm(h, w, w, -1.0, b, false, &self.sin_w, false, 1.0, &mut p_re);
        gemm(h, w, w, 1.0, a, false, &self.sin_w, false, 0.0, &mut p_im);
        gemm(h, w, w, 1.0, b, false, &self.cos_w, false, 1.0, &mut p_im);
        let norm = 1.0 / (h * w) as f64;
        let mut re = vec![0.0; h * w];
        let mut im = vec![0.0; h * w];
        gemm(h, h, w, norm, &self.cos_h, false, &p_re, false, 0.0, &mut re);
        gemm(h, h, w, -norm, &self.sin_h, false, &p_im, false, 1.0, &mut re);
        gemm(h, h, w, norm, &self.cos_h, false, &p_im, false, 0.0, &mut im);
        gemm(h, h, w, norm, &self.sin_h, false, &p_re, false, 1.0, &mut im);
        let residual = im.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok((Tensor::from_parts(vec![h, w], re), residual))
    }

    pub fn inverse(&self, spec: &ComplexGrid) -> Result<Tensor> {
        Ok(self.inverse_with_residual(spec)?.0)
    }

    /// Differentiable real part of the inverse transform, applied per channel.
    ///
    /// `re` and `im` are `[channels, H, W]` graph values; the result has the same shape.
    pub fn inverse_real_on_graph(&self, g: &mut Graph, re: Var, im: Var) -> Result<Var> {
        let (h, w) = (self.height, self.width);
        let cw = g.constant(Tensor::from_parts(vec![w, w], self.cos_w.clone()));
        let sw = g.constant(Tensor::from_parts(vec![w, w], self.sin_w.clone()));
        let ch = g.constant(Tensor::from_parts(vec![h, h], self.cos_h.clone()));
        let sh = g.constant(Tensor::from_parts(vec![h, h], self.sin_h.clone()));
        let a_cw = g.matmul(re, cw)?;
        let b_sw = g.matmul(im, sw)?;
        let p_re = g.sub(a_cw, b_sw)?;
        let a_sw = g.matmul(re, sw)?;
        let b_cw = g.matmul(im, cw)?;
        let p_im = g.add(a_sw, b_cw)?;
        let x1 = g.matmul(ch, p_re)?;
        let x2 = g.matmul(sh, p_im)?;
        let x = g.sub(x1, x2)?;
        Ok(g.scale(x, 1.0 / (h * w) as f64))
    }
}

/// Forward 2-D DFT of a real `H × W` tensor.
pub fn dft2(grid: &Tensor) -> Result<ComplexGrid> {
    let &[h, w] = grid.shape() else {
        return Err(Error::Shape(format!("dft2 expects a matrix, got {:?}", grid.shape())));
    };
    DftBasis::new(h, w)?.forward(grid)
}

/// Real part of the inverse 2-D DFT.
pub fn idft2(spec: &ComplexGrid) -> Result<Tensor> {
    let (h, w) = spec.shape();
    DftBasis::new(h, w)?.inverse(spec)
}

/// For each flat frequency index `(u,v)`, the flat index of `(-u mod H, -v mod W)`.
pub fn conjugate_index(height: usize, width: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(height * width);
    for u in 0..height {
        for v in 0..width {
            idx.push(((height - u) % height) * width + (width - v) % width);
        }
    }
    idx
}
