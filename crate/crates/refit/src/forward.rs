//! Forward operators Phi: identity (denoising), periodic convolution
//! (deblurring, applied in the frequency domain) and small dense matrices,
//! each with its adjoint and the resolvent (Id + tau Phi^t Phi)^-1.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::cg::conjugate_gradient;
use crate::error::{RefitError, Result};
use crate::field::ImageGrid;

/// Dense operators are solved by CG; keep them small.
pub const DENSE_MAX_DIM: usize = 4096;

#[derive(Clone)]
pub enum ForwardOperator {
    Identity,
    PeriodicConvolution(ConvOperator),
    DenseMatrix(DenseOperator),
}

impl std::fmt::Debug for ForwardOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ForwardOperator::Identity => write!(f, "Identity"),
            ForwardOperator::PeriodicConvolution(c) => {
                write!(f, "PeriodicConvolution({} taps, {}x{})", c.taps.len(), c.height, c.width)
            }
            ForwardOperator::DenseMatrix(d) => write!(f, "DenseMatrix({}x{})", d.rows, d.cols),
        }
    }
}

impl ForwardOperator {
    pub fn identity() -> Self {
        ForwardOperator::Identity
    }

    /// Periodic convolution with taps (dy, dx, weight) on an h x w grid.
    pub fn periodic_convolution(taps: Vec<(i64, i64, f64)>, height: usize, width: usize) -> Result<Self> {
        Ok(ForwardOperator::PeriodicConvolution(ConvOperator::new(taps, height, width)?))
    }

    /// Normalized 1D motion kernel of `len` taps along the 45-degree
    /// diagonal, the default directional blur.
    pub fn motion_blur_45(len: usize, height: usize, width: usize) -> Result<Self> {
        if len == 0 {
            return Err(RefitError::InvalidParams("blur length must be positive".into()));
        }
        let w = 1.0 / len as f64;
        let taps = (0..len as i64).map(|d| (d, d, w)).collect();
        Self::periodic_convolution(taps, height, width)
    }

    /// Dense matrix acting on the flattened domain grid.
    pub fn dense_matrix(a: Vec<f64>, rows: usize, domain: (usize, usize, usize)) -> Result<Self> {
        Ok(ForwardOperator::DenseMatrix(DenseOperator::new(a, rows, domain)?))
    }

    /// Shape of Phi x given the domain shape.
    pub fn range_shape(&self, domain: (usize, usize, usize)) -> (usize, usize, usize) {
        match self {
            ForwardOperator::Identity | ForwardOperator::PeriodicConvolution(_) => domain,
            ForwardOperator::DenseMatrix(d) => (d.rows, 1, 1),
        }
    }

    pub fn apply(&self, x: &ImageGrid) -> Result<ImageGrid> {
        match self {
            ForwardOperator::Identity => Ok(x.clone()),
            ForwardOperator::PeriodicConvolution(c) => c.apply(x, false),
            ForwardOperator::DenseMatrix(d) => d.apply(x),
        }
    }

    pub fn apply_adjoint(&self, y: &ImageGrid) -> Result<ImageGrid> {
        match self {
            ForwardOperator::Identity => Ok(y.clone()),
            ForwardOperator::PeriodicConvolution(c) => c.apply(y, true),
            ForwardOperator::DenseMatrix(d) => d.apply_adjoint(y),
        }
    }

    /// Solves (Id + tau Phi^t Phi) u = v.
    pub fn resolvent(&self, tau: f64, v: &ImageGrid) -> Result<ImageGrid> {
        if tau <= 0.0 {
            return Err(RefitError::InvalidParams(format!("resolvent needs tau > 0, got {tau}")));
        }
        match self {
            ForwardOperator::Identity => {
                let scale = 1.0 / (1.0 + tau);
                let values = v.values.iter().map(|x| x * scale).collect();
                Ok(ImageGrid::from_values_unchecked(v.height, v.width, v.channels, values))
            }
            ForwardOperator::PeriodicConvolution(c) => c.resolvent(tau, v),
            ForwardOperator::DenseMatrix(d) => d.resolvent(tau, v),
        }
    }
}

/// Frequency-domain periodic convolution.
#[derive(Clone)]
pub struct ConvOperator {
    pub height: usize,
    pub width: usize,
    taps: Vec<(i64, i64, f64)>,
    transfer: Vec<Complex<f64>>,
    fft_row: Arc<dyn Fft<f64>>,
    ifft_row: Arc<dyn Fft<f64>>,
    fft_col: Arc<dyn Fft<f64>>,
    ifft_col: Arc<dyn Fft<f64>>,
}

impl ConvOperator {
    fn new(taps: Vec<(i64, i64, f64)>, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(RefitError::InvalidParams("convolution grid must be non-empty".into()));
        }
        if taps.is_empty() {
            return Err(RefitError::InvalidParams("convolution kernel has no taps".into()));
        }
        let mut planner = FftPlanner::new();
        let fft_row = planner.plan_fft_forward(width);
        let ifft_row = planner.plan_fft_inverse(width);
        let fft_col = planner.plan_fft_forward(height);
        let ifft_col = planner.plan_fft_inverse(height);
        let mut transfer = vec![Complex::new(0.0, 0.0); height * width];
        let two_pi = 2.0 * std::f64::consts::PI;
        for u in 0..height {
            for v in 0..width {
                let mut acc = Complex::new(0.0, 0.0);
                for &(dy, dx, wt) in &taps {
                    let phase = -two_pi
                        * (u as f64 * dy as f64 / height as f64 + v as f64 * dx as f64 / width as f64);
                    acc += Complex::new(phase.cos(), phase.sin()) * wt;
                }
                transfer[u * width + v] = acc;
            }
        }
        Ok(ConvOperator { height, width, taps, transfer, fft_row, ifft_row, fft_col, ifft_col })
    }

    fn check(&self, x: &ImageGrid) -> Result<()> {
        if x.height != self.height || x.width != self.width {
            return Err(RefitError::ShapeMismatch {
                context: "ConvOperator",
                expected: format!("{}x{}", self.height, self.width),
                got: format!("{}x{}", x.height, x.width),
            });
        }
        Ok(())
    }

    fn fft2(&self, plane: &[f64]) -> Vec<Complex<f64>> {
        let (h, w) = (self.height, self.width);
        let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
        for row in buf.chunks_exact_mut(w) {
            self.fft_row.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); h];
        for j in 0..w {
            for i in 0..h {
                col[i] = buf[i * w + j];
            }
            self.fft_col.process(&mut col);
            for i in 0..h {
                buf[i * w + j] = col[i];
            }
        }
        buf
    }

    fn ifft2_real(&self, mut buf: Vec<Complex<f64>>) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let mut col = vec![Complex::new(0.0, 0.0); h];
        for j in 0..w {
            for i in 0..h {
                col[i] = buf[i * w + j];
            }
            self.ifft_col.process(&mut col);
            for i in 0..h {
                buf[i * w + j] = col[i];
            }
        }
        for row in buf.chunks_exact_mut(w) {
            self.ifft_row.process(row);
        }
        let scale = 1.0 / (h * w) as f64;
        buf.iter().map(|c| c.re * scale).collect()
    }

    fn apply(&self, x: &ImageGrid, adjoint: bool) -> Result<ImageGrid> {
        self.check(x)?;
        let mut out = ImageGrid::zeros(x.height, x.width, x.channels);
        for c in 0..x.channels {
            let mut freq = self.fft2(x.channel(c));
            for (f, t) in freq.iter_mut().zip(&self.transfer) {
                *f *= if adjoint { t.conj() } else { *t };
            }
            out.channel_mut(c).copy_from_slice(&self.ifft2_real(freq));
        }
        Ok(out)
    }

    fn resolvent(&self, tau: f64, v: &ImageGrid) -> Result<ImageGrid> {
        self.check(v)?;
        let mut out = ImageGrid::zeros(v.height, v.width, v.channels);
        for c in 0..v.channels {
            let mut freq = self.fft2(v.channel(c));
            for (f, t) in freq.iter_mut().zip(&self.transfer) {
                *f /= 1.0 + tau * t.norm_sqr();
            }
            out.channel_mut(c).copy_from_slice(&self.ifft2_real(freq));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct DenseOperator {
    pub rows: usize,
    pub cols: usize,
    domain: (usize, usize, usize),
    /// Row-major rows x cols.
    a: Vec<f64>,
}

impl DenseOperator {
    fn new(a: Vec<f64>, rows: usize, domain: (usize, usize, usize)) -> Result<Self> {
        let cols = domain.0 * domain.1 * domain.2;
        if cols > DENSE_MAX_DIM {
            return Err(RefitError::InvalidParams(format!(
                "dense operators are capped at {DENSE_MAX_DIM} columns, got {cols}"
            )));
        }
        if a.len() != rows * cols {
            return Err(RefitError::ShapeMismatch {
                context: "DenseOperator::new",
                expected: format!("{} entries", rows * cols),
                got: format!("{}", a.len()),
            });
        }
        Ok(DenseOperator { rows, cols, domain, a })
    }

    fn check_domain(&self, x: &ImageGrid, context: &'static str) -> Result<()> {
        if (x.height, x.width, x.channels) != self.domain {
            return Err(RefitError::ShapeMismatch {
                context,
                expected: format!("{:?}", self.domain),
                got: format!("({}, {}, {})", x.height, x.width, x.channels),
            });
        }
        Ok(())
    }

    fn apply(&self, x: &ImageGrid) -> Result<ImageGrid> {
        self.check_domain(x, "DenseOperator::apply")?;
        let mut out = vec![0.0; self.rows];
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.a[r * self.cols..(r + 1) * self.cols]
                .iter()
                .zip(&x.values)
                .map(|(aij, xj)| aij * xj)
                .sum();
        }
        Ok(ImageGrid::from_values_unchecked(self.rows, 1, 1, out))
    }

    fn apply_adjoint(&self, y: &ImageGrid) -> Result<ImageGrid> {
        if y.values.len() != self.rows {
            return Err(RefitError::ShapeMismatch {
                context: "DenseOperator::apply_adjoint",
                expected: format!("{} values", self.rows),
                got: format!("{}", y.values.len()),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (r, yr) in y.values.iter().enumerate() {
            for (o, aij) in out.iter_mut().zip(&self.a[r * self.cols..(r + 1) * self.cols]) {
                *o += aij * yr;
            }
        }
        Ok(ImageGrid::from_values_unchecked(self.domain.0, self.domain.1, self.domain.2, out))
    }

    fn gram_apply(&self, tau: f64, x: &[f64], out: &mut [f64]) {
        // out = x + tau A^t A x
        let mut ax = vec![0.0; self.rows];
        for (r, o) in ax.iter_mut().enumerate() {
            *o = self.a[r * self.cols..(r + 1) * self.cols]
                .iter()
                .zip(x)
                .map(|(aij, xj)| aij * xj)
                .sum();
        }
        out.copy_from_slice(x);
        for (r, yr) in ax.iter().enumerate() {
            let scaled = tau * yr;
            for (o, aij) in out.iter_mut().zip(&self.a[r * self.cols..(r + 1) * self.cols]) {
                *o += aij * scaled;
            }
        }
    }

    fn resolvent(&self, tau: f64, v: &ImageGrid) -> Result<ImageGrid> {
        self.check_domain(v, "DenseOperator::resolvent")?;
        let (sol, _res, _it) = conjugate_gradient(
            |x, out| self.gram_apply(tau, x, out),
            &v.values,
            None,
            1e-10,
            4 * self.cols + 100,
            "dense resolvent",
        )?;
        Ok(ImageGrid::from_values_unchecked(self.domain.0, self.domain.1, self.domain.2, sol))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageGrid {
        let mut rng = CounterRng::new(seed);
        let mut x = ImageGrid::zeros(h, w, c);
        rng.fill_normal(&mut x.values);
        x
    }

    #[test]
    fn identity_resolvent_halves_at_tau_one() {
        let v = random_image(4, 5, 1, 1);
        let u = ForwardOperator::identity().resolvent(1.0, &v).unwrap();
        for (a, b) in u.values.iter().zip(&v.values) {
            assert!((a - b / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn delta_kernel_behaves_like_identity() {
        let op = ForwardOperator::periodic_convolution(vec![(0, 0, 1.0)], 8, 8).unwrap();
        let x = random_image(8, 8, 1, 2);
        let y = op.apply(&x).unwrap();
        for (a, b) in y.values.iter().zip(&x.values) {
            assert!((a - b).abs() < 1e-12);
        }
        let u = op.resolvent(1.0, &x).unwrap();
        for (a, b) in u.values.iter().zip(&x.values) {
            assert!((a - b / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn convolution_matches_direct_wraparound() {
        let taps = vec![(0, 0, 0.5), (1, 2, 0.3), (-1, 0, 0.2)];
        let op = ForwardOperator::periodic_convolution(taps.clone(), 6, 7).unwrap();
        let x = random_image(6, 7, 1, 3);
        let y = op.apply(&x).unwrap();
        for i in 0..6i64 {
            for j in 0..7i64 {
                let mut direct = 0.0;
                for &(dy, dx, wt) in &taps {
                    let si = (i - dy).rem_euclid(6) as usize;
                    let sj = (j - dx).rem_euclid(7) as usize;
                    direct += wt * x.values[si * 7 + sj];
                }
                let got = y.values[(i * 7 + j) as usize];
                assert!((got - direct).abs() < 1e-12, "({i},{j}): {got} vs {direct}");
            }
        }
    }

    #[test]
    fn convolution_adjoint_identity() {
        let op = ForwardOperator::motion_blur_45(10, 16, 16).unwrap();
        for seed in 0..20 {
            let x = random_image(16, 16, 3, 100 + seed);
            let y = random_image(16, 16, 3, 200 + seed);
            let lhs = op.apply(&x).unwrap().dot(&y);
            let rhs = x.dot(&op.apply_adjoint(&y).unwrap());
            assert!((lhs - rhs).abs() <= 1e-8 * x.norm() * y.norm());
        }
    }

    #[test]
    fn convolution_resolvent_residual() {
        let op = ForwardOperator::motion_blur_45(10, 12, 12).unwrap();
        let v = random_image(12, 12, 1, 5);
        let tau = 0.35;
        let u = op.resolvent(tau, &v).unwrap();
        // (Id + tau Phi^t Phi) u should reproduce v.
        let pu = op.apply(&u).unwrap();
        let ptpu = op.apply_adjoint(&pu).unwrap();
        let mut resid = 0.0;
        for ((ui, gi), vi) in u.values.iter().zip(&ptpu.values).zip(&v.values) {
            let r = ui + tau * gi - vi;
            resid += r * r;
        }
        assert!(resid.sqrt() <= 1e-8 * v.norm());
    }

    #[test]
    fn dense_adjoint_and_resolvent() {
        let mut rng = CounterRng::new(77);
        let domain = (4, 4, 1);
        let mut a = vec![0.0; 16 * 16];
        rng.fill_normal(&mut a);
        let op = ForwardOperator::dense_matrix(a, 16, domain).unwrap();

        let x = random_image(4, 4, 1, 7);
        let y = random_image(16, 1, 1, 8);
        let lhs = op.apply(&x).unwrap().dot(&y);
        let rhs = x.dot(&op.apply_adjoint(&y).unwrap());
        assert!((lhs - rhs).abs() <= 1e-8 * x.norm() * y.norm());

        let v = random_image(4, 4, 1, 9);
        let tau = 0.8;
        let u = op.resolvent(tau, &v).unwrap();
        let ptpu = op.apply_adjoint(&op.apply(&u).unwrap()).unwrap();
        let mut resid = 0.0;
        for ((ui, gi), vi) in u.values.iter().zip(&ptpu.values).zip(&v.values) {
            let r = ui + tau * gi - vi;
            resid += r * r;
        }
        assert!(resid.sqrt() <= 1e-8 * v.norm(), "residual {}", resid.sqrt());
    }

    #[test]
    fn dense_rejects_oversized_domains() {
        let domain = (65, 64, 1); // 4160 > 4096
        assert!(ForwardOperator::dense_matrix(vec![0.0; 4160], 1, domain).is_err());
    }
}
