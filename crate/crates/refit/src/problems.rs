//! Problem builders for the three experiment families, deterministic test
//! scenes, noise synthesis and quality metrics.

use crate::error::{RefitError, Result};
use crate::field::ImageGrid;
use crate::forward::ForwardOperator;
use crate::linops::AnalysisOperator;
use crate::rng::CounterRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    TvGray,
    TvColor,
    Tgv,
}

/// A regularized least-squares instance: data y, forward operator, analysis
/// operator and weight. For the second-order family the primal variable is
/// the 3-plane composite (x, z1, z2) and the forward operator acts on the
/// first plane only.
#[derive(Clone, Debug)]
pub struct ProblemSpec {
    pub family: Family,
    pub forward: ForwardOperator,
    pub analysis: AnalysisOperator,
    pub lambda: f64,
    pub zeta: f64,
    pub y: ImageGrid,
}

impl ProblemSpec {
    pub fn denoise_gray(y: ImageGrid, lambda: f64) -> Result<Self> {
        let analysis = AnalysisOperator::tv_gray(y.height, y.width)?;
        let p = ProblemSpec { family: Family::TvGray, forward: ForwardOperator::identity(), analysis, lambda, zeta: 0.0, y };
        p.validate()?;
        Ok(p)
    }

    pub fn denoise_color(y: ImageGrid, lambda: f64) -> Result<Self> {
        let analysis = AnalysisOperator::tv_color(y.height, y.width)?;
        let p = ProblemSpec { family: Family::TvColor, forward: ForwardOperator::identity(), analysis, lambda, zeta: 0.0, y };
        p.validate()?;
        Ok(p)
    }

    pub fn deblur_color(y: ImageGrid, lambda: f64, blur: ForwardOperator) -> Result<Self> {
        let analysis = AnalysisOperator::tv_color(y.height, y.width)?;
        let p = ProblemSpec { family: Family::TvColor, forward: blur, analysis, lambda, zeta: 0.0, y };
        p.validate()?;
        Ok(p)
    }

    pub fn deblur_gray(y: ImageGrid, lambda: f64, blur: ForwardOperator) -> Result<Self> {
        let analysis = AnalysisOperator::tv_gray(y.height, y.width)?;
        let p = ProblemSpec { family: Family::TvGray, forward: blur, analysis, lambda, zeta: 0.0, y };
        p.validate()?;
        Ok(p)
    }

    /// Second-order denoising of a grayscale observation.
    pub fn tgv_denoise(y: ImageGrid, lambda: f64, zeta: f64) -> Result<Self> {
        let analysis = AnalysisOperator::tgv(y.height, y.width, zeta)?;
        let p = ProblemSpec { family: Family::Tgv, forward: ForwardOperator::identity(), analysis, lambda, zeta, y };
        p.validate()?;
        Ok(p)
    }

    /// General dense-forward instance over a grayscale domain.
    pub fn dense_gray(y: ImageGrid, lambda: f64, forward: ForwardOperator, height: usize, width: usize) -> Result<Self> {
        let analysis = AnalysisOperator::tv_gray(height, width)?;
        let p = ProblemSpec { family: Family::TvGray, forward, analysis, lambda, zeta: 0.0, y };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda <= 0.0 {
            return Err(RefitError::InvalidParams(format!("lambda must be positive, got {}", self.lambda)));
        }
        let expected_b = match self.family {
            Family::TvGray => 2,
            Family::TvColor => 6,
            Family::Tgv => 3,
        };
        if self.analysis.block_size() != expected_b {
            return Err(RefitError::InvalidParams(format!(
                "analysis block size {} does not match family (expected {expected_b})",
                self.analysis.block_size()
            )));
        }
        let range = self.forward.range_shape(self.data_shape());
        if (self.y.height, self.y.width, self.y.channels) != range {
            return Err(RefitError::ShapeMismatch {
                context: "ProblemSpec::validate",
                expected: format!("{range:?}"),
                got: format!("({}, {}, {})", self.y.height, self.y.width, self.y.channels),
            });
        }
        self.spot_check_operators()
    }

    /// One randomized adjoint-consistency and resolvent-residual check for
    /// the operator pair a new problem binds together.
    fn spot_check_operators(&self) -> Result<()> {
        let mut rng = CounterRng::new(0);
        let (h, w, c) = self.primal_shape();
        let mut x = ImageGrid::zeros(h, w, c);
        rng.fill_normal(&mut x.values);
        let mut z = crate::field::BlockField::zeros(self.analysis.blocks(), self.analysis.block_size());
        rng.fill_normal(&mut z.values);
        let lhs = self.analysis.forward(&x)?.dot(&z);
        let rhs = x.dot(&self.analysis.adjoint(&z)?);
        if (lhs - rhs).abs() > 1e-8 * x.norm() * z.norm() {
            return Err(RefitError::InvalidParams(format!(
                "analysis adjoint defect {:.3e} at construction",
                (lhs - rhs).abs() / (x.norm() * z.norm())
            )));
        }
        let (rh, rw, rc) = self.forward.range_shape(self.data_shape());
        let mut g = ImageGrid::zeros(rh, rw, rc);
        rng.fill_normal(&mut g.values);
        let lhs = self.apply_forward(&x)?.dot(&g);
        let rhs = x.dot(&self.adjoint_forward(&g)?);
        if (lhs - rhs).abs() > 1e-8 * x.norm() * g.norm() {
            return Err(RefitError::InvalidParams(format!(
                "forward adjoint defect {:.3e} at construction",
                (lhs - rhs).abs() / (x.norm() * g.norm())
            )));
        }
        let tau = 0.7;
        let u = self.resolvent_forward(tau, &x)?;
        let fu = self.apply_forward(&u)?;
        let ptfu = self.adjoint_forward(&fu)?;
        let mut resid = 0.0;
        for ((ui, gi), vi) in u.values.iter().zip(&ptfu.values).zip(&x.values) {
            let r = ui + tau * gi - vi;
            resid += r * r;
        }
        if resid.sqrt() > 1e-7 * x.norm() {
            return Err(RefitError::InvalidParams(format!(
                "forward resolvent residual {:.3e} at construction",
                resid.sqrt() / x.norm()
            )));
        }
        Ok(())
    }

    /// Shape of the primal variable.
    pub fn primal_shape(&self) -> (usize, usize, usize) {
        (self.analysis.height, self.analysis.width, self.analysis.channels())
    }

    /// Shape of the image the forward operator acts on (first plane for the
    /// composite family).
    fn data_shape(&self) -> (usize, usize, usize) {
        match self.family {
            Family::Tgv => (self.analysis.height, self.analysis.width, 1),
            _ => self.primal_shape(),
        }
    }

    /// Phi x (first-plane only for the composite family).
    pub fn apply_forward(&self, x: &ImageGrid) -> Result<ImageGrid> {
        match self.family {
            Family::Tgv => self.forward.apply(&x.extract_channel(0)),
            _ => self.forward.apply(x),
        }
    }

    /// Phi^t y lifted back to the primal shape.
    pub fn adjoint_forward(&self, y: &ImageGrid) -> Result<ImageGrid> {
        match self.family {
            Family::Tgv => Ok(self.forward.apply_adjoint(y)?.embed_as_channel0(3)),
            _ => self.forward.apply_adjoint(y),
        }
    }

    /// (Id + tau Phi^t Phi)^-1 on the primal shape; auxiliary planes of the
    /// composite family pass through unchanged.
    pub fn resolvent_forward(&self, tau: f64, v: &ImageGrid) -> Result<ImageGrid> {
        match self.family {
            Family::Tgv => {
                let head = self.forward.resolvent(tau, &v.extract_channel(0))?;
                let mut out = v.clone();
                out.channel_mut(0).copy_from_slice(head.channel(0));
                Ok(out)
            }
            _ => self.forward.resolvent(tau, v),
        }
    }

    /// 0.5 * |Phi x - y|^2
    pub fn fidelity(&self, x: &ImageGrid) -> Result<f64> {
        let fx = self.apply_forward(x)?;
        let mut acc = 0.0;
        for (a, b) in fx.values.iter().zip(&self.y.values) {
            let d = a - b;
            acc += d * d;
        }
        Ok(0.5 * acc)
    }

    /// PSNR of the estimate against a ground truth; composite estimates are
    /// compared through their first plane.
    pub fn psnr_against(&self, truth: &ImageGrid, x: &ImageGrid) -> f64 {
        match self.family {
            Family::Tgv if x.channels == 3 && truth.channels == 1 => psnr(truth, &x.extract_channel(0)),
            _ => psnr(truth, x),
        }
    }
}

/// y = x + sigma * g with g i.i.d. standard normal from the counter
/// generator; values are left unclamped.
pub fn add_gaussian_noise(x: &ImageGrid, sigma: f64, seed: u64) -> ImageGrid {
    let mut out = x.clone();
    if sigma == 0.0 {
        return out;
    }
    let mut rng = CounterRng::new(seed);
    for v in out.values.iter_mut() {
        *v += sigma * rng.next_normal();
    }
    out
}

/// Peak signal-to-noise ratio for the 8-bit intensity range:
/// 10 log10(255^2 / MSE). Identical images return +infinity.
pub fn psnr(x_ref: &ImageGrid, x: &ImageGrid) -> f64 {
    assert!(x_ref.same_shape(x), "psnr requires matching shapes");
    let n = x_ref.values.len() as f64;
    let mse: f64 = x_ref.values.iter().zip(&x.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (255.0 * 255.0 / mse).log10()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneName {
    /// 128x128 grayscale: bright square and two disks on a mid-gray field.
    Shapes128,
    /// 256x256 grayscale stand-in with texture, a silhouette and thin
    /// structures.
    CameramanLike,
    /// 128x128 piecewise-affine elevation profile with ramps and chimneys.
    Elevation,
}

impl SceneName {
    pub fn parse(s: &str) -> Option<SceneName> {
        match s {
            "shapes128" => Some(SceneName::Shapes128),
            "cameraman_like" => Some(SceneName::CameramanLike),
            "elevation" => Some(SceneName::Elevation),
            _ => None,
        }
    }
}

pub fn build_scene(name: SceneName) -> ImageGrid {
    match name {
        SceneName::Shapes128 => shapes128(),
        SceneName::CameramanLike => cameraman_like(),
        SceneName::Elevation => elevation(),
    }
}

fn shapes128() -> ImageGrid {
    let (h, w) = (128usize, 128usize);
    let mut img = ImageGrid::zeros(h, w, 1);
    img.values.fill(100.0);
    for i in 18..62 {
        for j in 16..64 {
            img.values[i * w + j] = 220.0;
        }
    }
    disk(&mut img, 88.0, 46.0, 18.0, 40.0);
    disk(&mut img, 44.0, 94.0, 14.0, 170.0);
    img
}

fn disk(img: &mut ImageGrid, ci: f64, cj: f64, r: f64, value: f64) {
    let w = img.width;
    for i in 0..img.height {
        for j in 0..w {
            let di = i as f64 - ci;
            let dj = j as f64 - cj;
            if di * di + dj * dj <= r * r {
                img.values[i * w + j] = value;
            }
        }
    }
}

fn cameraman_like() -> ImageGrid {
    let (h, w) = (256usize, 256usize);
    let mut img = ImageGrid::zeros(h, w, 1);
    // Flat sky over a finely textured ground band.
    img.values.fill(195.0);
    for i in 168..h {
        for j in 0..w {
            let t = (j as f64 * std::f64::consts::TAU / 7.0).sin()
                * (i as f64 * std::f64::consts::TAU / 11.0).sin();
            img.values[i * w + j] = 125.0 + 28.0 * t;
        }
    }
    // Silhouette: head, torso and a slanted shoulder line.
    disk(&mut img, 78.0, 108.0, 14.0, 25.0);
    for i in 92..168 {
        let half = 14 + (i - 92) / 5;
        for j in (108 - half)..(108 + half).min(w) {
            img.values[i * w + j] = 25.0;
        }
    }
    // Tripod: three thin dark legs.
    for k in 0..46 {
        let i = 168 + k;
        if i >= h {
            break;
        }
        for (base, slope) in [(108i64, -1i64), (108, 1), (108, 0)] {
            let j = base + slope * (k as i64) / 2;
            for dj in 0..2i64 {
                let jj = j + dj;
                if (0..w as i64).contains(&jj) {
                    img.values[i * w + jj as usize] = 15.0;
                }
            }
        }
    }
    // Distant towers: thin bright/medium vertical structures.
    for i in 40..96 {
        for j in 198..202 {
            img.values[i * w + j] = 120.0;
        }
        for j in 222..225 {
            img.values[i * w + j] = 145.0;
        }
    }
    img
}

fn elevation() -> ImageGrid {
    let (h, w) = (128usize, 128usize);
    let mut img = ImageGrid::zeros(h, w, 1);
    // Base plane sloping along the width.
    for i in 0..h {
        for j in 0..w {
            img.values[i * w + j] = 30.0 + 0.55 * j as f64;
        }
    }
    // Raised plateau with linear "sidewalk" ramps on all sides.
    let (top, bottom, left, right) = (28usize, 76usize, 24usize, 88usize);
    let ramp = 10.0;
    let height = 120.0;
    for i in top..bottom {
        for j in left..right {
            let d_edge = (i - top).min(bottom - 1 - i).min(j - left).min(right - 1 - j) as f64;
            let lift = if d_edge >= ramp { height } else { height * d_edge / ramp };
            img.values[i * w + j] += lift;
        }
    }
    // Chimneys: small constant-lift blocks.
    for (ci, cj, s, lift) in [(92usize, 36usize, 6usize, 70.0), (96, 70, 5, 55.0), (14, 100, 6, 62.0)] {
        for i in ci..ci + s {
            for j in cj..cj + s {
                img.values[i * w + j] += lift;
            }
        }
    }
    for v in &img.values {
        debug_assert!((0.0..=255.0).contains(v));
    }
    img
}

/// Deterministic 256x256 RGB test scene: smooth color ramps, saturated
/// shapes, thin bars and a textured band.
pub fn build_color_scene() -> ImageGrid {
    let (h, w) = (256usize, 256usize);
    let mut img = ImageGrid::zeros(h, w, 3);
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            img.channel_mut(0)[p] = 70.0 + 0.35 * j as f64;
            img.channel_mut(1)[p] = 120.0;
            img.channel_mut(2)[p] = 200.0 - 0.35 * j as f64;
        }
    }
    let mut paint = |i0: usize, i1: usize, j0: usize, j1: usize, rgb: [f64; 3]| {
        for i in i0..i1 {
            for j in j0..j1 {
                let p = i * w + j;
                for (c, v) in rgb.iter().enumerate() {
                    img.channel_mut(c)[p] = *v;
                }
            }
        }
    };
    paint(36, 108, 28, 104, [205.0, 60.0, 48.0]);
    paint(20, 124, 182, 186, [230.0, 210.0, 60.0]);
    paint(140, 170, 40, 200, [35.0, 40.0, 120.0]);
    // Green disk.
    for i in 0..h {
        for j in 0..w {
            let di = i as f64 - 170.0;
            let dj = j as f64 - 170.0;
            if di * di + dj * dj <= 38.0 * 38.0 {
                let p = i * w + j;
                img.channel_mut(0)[p] = 58.0;
                img.channel_mut(1)[p] = 180.0;
                img.channel_mut(2)[p] = 92.0;
            }
        }
    }
    // Textured band on the green channel.
    for i in 212..248 {
        for j in 0..w {
            let p = i * w + j;
            let t = (j as f64 * std::f64::consts::TAU / 9.0).sin();
            img.channel_mut(1)[p] = 120.0 + 26.0 * t;
        }
    }
    img
}

/// The deblurring experiments tie the weight to the noise level.
pub fn lambda_deblur(sigma: f64) -> f64 {
    4.3 * sigma
}

/// First plane of a composite solution.
pub fn tgv_extract(x: &ImageGrid) -> Result<ImageGrid> {
    if x.channels != 3 {
        return Err(RefitError::ShapeMismatch {
            context: "tgv_extract",
            expected: "3 channels".into(),
            got: format!("{}", x.channels),
        });
    }
    Ok(x.extract_channel(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_is_deterministic_and_scales() {
        let x = build_scene(SceneName::Shapes128);
        let a = add_gaussian_noise(&x, 20.0, 1);
        let b = add_gaussian_noise(&x, 20.0, 1);
        assert_eq!(a.values, b.values);
        let c = add_gaussian_noise(&x, 20.0, 2);
        assert_ne!(a.values, c.values);
        let zero = add_gaussian_noise(&x, 0.0, 1);
        assert_eq!(zero.values, x.values);
    }

    #[test]
    fn noise_moments_match_clt_bounds() {
        let x = ImageGrid::zeros(256, 256, 1);
        let sigma = 20.0;
        let y = add_gaussian_noise(&x, sigma, 3);
        let n = y.values.len() as f64;
        let mean = y.values.iter().sum::<f64>() / n;
        let var = y.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() <= 0.02 * sigma, "mean {mean}");
        assert!((var.sqrt() - sigma).abs() <= 0.02 * sigma, "std {}", var.sqrt());
    }

    #[test]
    fn psnr_reference_points() {
        let x = ImageGrid::zeros(16, 16, 1);
        let mut y = x.clone();
        y.values.fill(255.0);
        assert!(psnr(&x, &y).abs() < 1e-12);
        assert_eq!(psnr(&x, &x), f64::INFINITY);
        // Constant shift c: psnr = 10 log10(255^2 / c^2).
        let mut shifted = x.clone();
        shifted.values.fill(10.0);
        let expect = 10.0 * (255.0f64 * 255.0 / 100.0).log10();
        assert!((psnr(&x, &shifted) - expect).abs() < 1e-12);
    }

    #[test]
    fn shapes_scene_has_few_levels() {
        let img = build_scene(SceneName::Shapes128);
        let mut levels: Vec<u64> = img.values.iter().map(|v| v.to_bits()).collect();
        levels.sort_unstable();
        levels.dedup();
        assert!(levels.len() <= 5, "{} distinct values", levels.len());
        assert!(img.values.iter().all(|&v| (0.0..=255.0).contains(&v)));
    }

    #[test]
    fn elevation_scene_is_piecewise_affine() {
        let img = build_scene(SceneName::Elevation);
        assert!(img.values.iter().all(|&v| (0.0..=255.0).contains(&v)));
        let (h, w) = (img.height, img.width);
        let mut edge_pixels = 0usize;
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let mut second = 0.0f64;
                if j >= 1 && j + 1 < w {
                    second = second.max((img.values[p + 1] - 2.0 * img.values[p] + img.values[p - 1]).abs());
                }
                if i >= 1 && i + 1 < h {
                    second = second.max((img.values[p + w] - 2.0 * img.values[p] + img.values[p - w]).abs());
                }
                if second > 1e-9 {
                    edge_pixels += 1;
                }
            }
        }
        assert!(
            edge_pixels * 10 <= h * w,
            "edge set too dense: {edge_pixels} of {}",
            h * w
        );
    }

    #[test]
    fn scenes_are_in_range_and_deterministic() {
        let a = build_scene(SceneName::CameramanLike);
        let b = build_scene(SceneName::CameramanLike);
        assert_eq!(a.values, b.values);
        assert_eq!(a.height, 256);
        assert!(a.values.iter().all(|&v| (0.0..=255.0).contains(&v)));
        let c = build_color_scene();
        assert_eq!(c.channels, 3);
        assert!(c.values.iter().all(|&v| (0.0..=255.0).contains(&v)));
    }

    #[test]
    fn tgv_extract_roundtrip() {
        let g = build_scene(SceneName::Shapes128);
        let composite = g.embed_as_channel0(3);
        let back = tgv_extract(&composite).unwrap();
        assert_eq!(back.values, g.values);
        assert!(tgv_extract(&g).is_err());
        let z = tgv_extract(&ImageGrid::zeros(4, 4, 3)).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn problem_validation_catches_shape_errors() {
        let y = build_scene(SceneName::Shapes128);
        assert!(ProblemSpec::denoise_gray(y.clone(), 10.0).is_ok());
        assert!(ProblemSpec::denoise_gray(y.clone(), -1.0).is_err());
        assert!(ProblemSpec::denoise_color(y, 10.0).is_err());
    }

    #[test]
    fn deblur_preset() {
        assert!((lambda_deblur(20.0) - 86.0).abs() < 1e-12);
        assert!((lambda_deblur(2.0) - 8.6).abs() < 1e-12);
    }
}
