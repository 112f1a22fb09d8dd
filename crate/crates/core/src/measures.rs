//! Similarity metrics, the composite training loss, and evaluation
//! statistics.
//!
//! All metrics are restricted to a binary mask. Grids are flat arrays in
//! x-fastest order; operations that need 2-D structure (SSIM, in-plane
//! gradients) take the grid extents and work per axial slice.

use crate::error::{Error, Result};

/// Weights of the composite loss terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Displacement L1 term.
    pub l1: f64,
    /// In-plane displacement-gradient L2 term.
    pub grad: f64,
    /// Structural dissimilarity (1 - SSIM) term.
    pub ssim: f64,
    /// Negative mutual-information term.
    pub mi: f64,
    /// L1 penalty on network weights.
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 1.0,
            grad: 0.5,
            ssim: 0.3,
            mi: 0.5,
            reg: 1e-5,
        }
    }
}

/// Loss components (unweighted) plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub vdm_l1: f64,
    pub grad_l2: f64,
    pub dssim: f64,
    pub neg_mi: f64,
    pub weight_l1: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.l1 * self.vdm_l1
            + w.grad * self.grad_l2
            + w.ssim * self.dssim
            + w.mi * self.neg_mi
            + w.reg * self.weight_l1
    }
}

fn check_same_len(a: &[f64], b: &[f64], m: &[u8]) -> Result<()> {
    if a.len() != b.len() || a.len() != m.len() {
        return Err(Error::ShapeMismatch(format!(
            "grid lengths {} / {} / mask {}",
            a.len(),
            b.len(),
            m.len()
        )));
    }
    Ok(())
}

/// Mean absolute difference over mask voxels.
pub fn masked_l1(a: &[f64], b: &[f64], m: &[u8]) -> Result<f64> {
    check_same_len(a, b, m)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..a.len() {
        if m[i] != 0 {
            sum += (a[i] - b[i]).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// Root of the mean squared in-mask difference.
pub fn rmse(a: &[f64], b: &[f64], m: &[u8]) -> Result<f64> {
    check_same_len(a, b, m)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..a.len() {
        if m[i] != 0 {
            let d = a[i] - b[i];
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((sum / count as f64).sqrt())
}

/// In-plane finite-difference gradient of one slice: central interior,
/// one-sided at borders. Returns (d/dx, d/dy).
pub(crate) fn slice_gradients(s: &[f64], nx: usize, ny: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; s.len()];
    let mut gy = vec![0.0; s.len()];
    for y in 0..ny {
        let row = y * nx;
        gx[row] = s[row + 1] - s[row];
        gx[row + nx - 1] = s[row + nx - 1] - s[row + nx - 2];
        for x in 1..nx - 1 {
            gx[row + x] = (s[row + x + 1] - s[row + x - 1]) * 0.5;
        }
    }
    for x in 0..nx {
        gy[x] = s[nx + x] - s[x];
        gy[(ny - 1) * nx + x] = s[(ny - 1) * nx + x] - s[(ny - 2) * nx + x];
        for y in 1..ny - 1 {
            gy[y * nx + x] = (s[(y + 1) * nx + x] - s[(y - 1) * nx + x]) * 0.5;
        }
    }
    (gx, gy)
}

/// Root-mean-square over the mask of the two-component in-plane gradient
/// discrepancy between `a` and `b`.
pub fn masked_grad_l2(
    a: &[f64],
    b: &[f64],
    m: &[u8],
    dims: (usize, usize, usize),
) -> Result<f64> {
    check_same_len(a, b, m)?;
    let (nx, ny, nz) = dims;
    if nx * ny * nz != a.len() {
        return Err(Error::ShapeMismatch("dims do not match grid length".into()));
    }
    if nx < 2 || ny < 2 {
        return Err(Error::GridTooSmall);
    }
    let plane = nx * ny;
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut diff = vec![0.0; plane];
    for z in 0..nz {
        let sa = &a[z * plane..(z + 1) * plane];
        let sb = &b[z * plane..(z + 1) * plane];
        for i in 0..plane {
            diff[i] = sa[i] - sb[i];
        }
        let (gx, gy) = slice_gradients(&diff, nx, ny);
        let sm = &m[z * plane..(z + 1) * plane];
        for i in 0..plane {
            if sm[i] != 0 {
                sum += gx[i] * gx[i] + gy[i] * gy[i];
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((sum / count as f64).sqrt())
}

/// Normalized 1-D Gaussian kernel of the given radius.
pub(crate) fn gaussian_kernel(radius: usize, sigma: f64) -> Vec<f64> {
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let t = i as f64 - radius as f64;
            (-0.5 * t * t / (sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable 2-D Gaussian blur with edge-replicate padding.
pub(crate) fn blur2d(s: &[f64], nx: usize, ny: usize, kernel: &[f64]) -> Vec<f64> {
    let radius = kernel.len() / 2;
    let mut tmp = vec![0.0; s.len()];
    let mut out = vec![0.0; s.len()];
    for y in 0..ny {
        let row = &s[y * nx..(y + 1) * nx];
        for x in 0..nx {
            let mut acc = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                let xx = (x + k).saturating_sub(radius).min(nx - 1);
                acc += w * row[xx];
            }
            tmp[y * nx + x] = acc;
        }
    }
    for y in 0..ny {
        for x in 0..nx {
            let mut acc = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                let yy = (y + k).saturating_sub(radius).min(ny - 1);
                acc += w * tmp[yy * nx + x];
            }
            out[y * nx + x] = acc;
        }
    }
    out
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4; // (0.01)^2 at dynamic range 1
pub const SSIM_C2: f64 = 9e-4; // (0.03)^2 at dynamic range 1

/// Computes the per-pixel SSIM map of one slice.
pub(crate) fn ssim_map_slice(
    a: &[f64],
    b: &[f64],
    nx: usize,
    ny: usize,
    window: usize,
    sigma: f64,
) -> Vec<f64> {
    let kernel = gaussian_kernel(window / 2, sigma);
    let mu_a = blur2d(a, nx, ny, &kernel);
    let mu_b = blur2d(b, nx, ny, &kernel);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let e_aa = blur2d(&aa, nx, ny, &kernel);
    let e_bb = blur2d(&bb, nx, ny, &kernel);
    let e_ab = blur2d(&ab, nx, ny, &kernel);
    (0..a.len())
        .map(|i| {
            let va = e_aa[i] - mu_a[i] * mu_a[i];
            let vb = e_bb[i] - mu_b[i] * mu_b[i];
            let cov = e_ab[i] - mu_a[i] * mu_b[i];
            let num = (2.0 * mu_a[i] * mu_b[i] + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + SSIM_C1) * (va + vb + SSIM_C2);
            num / den
        })
        .collect()
}

/// Mean local SSIM over the mask with a configurable Gaussian window.
/// Inputs are expected pre-normalized to [0, 1] (dynamic range 1).
pub fn ssim_windowed(
    a: &[f64],
    b: &[f64],
    m: &[u8],
    dims: (usize, usize, usize),
    window: usize,
    sigma: f64,
) -> Result<f64> {
    check_same_len(a, b, m)?;
    let (nx, ny, nz) = dims;
    if nx * ny * nz != a.len() {
        return Err(Error::ShapeMismatch("dims do not match grid length".into()));
    }
    let plane = nx * ny;
    let mut sum = 0.0;
    let mut count = 0usize;
    for z in 0..nz {
        let map = ssim_map_slice(
            &a[z * plane..(z + 1) * plane],
            &b[z * plane..(z + 1) * plane],
            nx,
            ny,
            window,
            sigma,
        );
        for (i, &v) in map.iter().enumerate() {
            if m[z * plane + i] != 0 {
                sum += v;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// Mean local SSIM over the mask (11x11 Gaussian window, sigma 1.5).
pub fn ssim(a: &[f64], b: &[f64], m: &[u8], dims: (usize, usize, usize)) -> Result<f64> {
    ssim_windowed(a, b, m, dims, SSIM_WINDOW, SSIM_SIGMA)
}

pub const MI_BINS: usize = 32;
pub const MI_SIGMA: f64 = 1.0;

pub(crate) fn in_mask_range(x: &[f64], m: &[u8]) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..x.len() {
        if m[i] != 0 {
            lo = lo.min(x[i]);
            hi = hi.max(x[i]);
        }
    }
    if lo > hi {
        return Err(Error::EmptyMask);
    }
    if hi <= lo {
        return Err(Error::DegenerateIntensity("zero in-mask span".into()));
    }
    Ok((lo, hi))
}

/// Smooths a `bins x bins` joint histogram with a separable Gaussian
/// (zero padding) and renormalizes it to sum 1. `sigma = 0` is identity.
pub(crate) fn smooth_joint(hist: &mut [f64], bins: usize, sigma: f64) {
    if sigma > 0.0 {
        let radius = (4.0 * sigma).ceil() as usize;
        let kernel = gaussian_kernel(radius, sigma);
        let mut tmp = vec![0.0; hist.len()];
        for i in 0..bins {
            for j in 0..bins {
                let mut acc = 0.0;
                for (k, &w) in kernel.iter().enumerate() {
                    let jj = j as isize + k as isize - radius as isize;
                    if jj >= 0 && (jj as usize) < bins {
                        acc += w * hist[i * bins + jj as usize];
                    }
                }
                tmp[i * bins + j] = acc;
            }
        }
        for j in 0..bins {
            for i in 0..bins {
                let mut acc = 0.0;
                for (k, &w) in kernel.iter().enumerate() {
                    let ii = i as isize + k as isize - radius as isize;
                    if ii >= 0 && (ii as usize) < bins {
                        acc += w * tmp[ii as usize * bins + j];
                    }
                }
                hist[i * bins + j] = acc;
            }
        }
    }
    let total: f64 = hist.iter().sum();
    if total > 0.0 {
        for v in hist.iter_mut() {
            *v /= total;
        }
    }
}

/// Mutual information of the smoothed joint distribution, in nats.
pub(crate) fn mi_of_joint(joint: &[f64], bins: usize) -> f64 {
    let mut pa = vec![0.0; bins];
    let mut pb = vec![0.0; bins];
    for i in 0..bins {
        for j in 0..bins {
            pa[i] += joint[i * bins + j];
            pb[j] += joint[i * bins + j];
        }
    }
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let p = joint[i * bins + j];
            if p > 0.0 {
                mi += p * (p / (pa[i] * pb[j])).ln();
            }
        }
    }
    mi
}

/// Mutual information with a configurable bin count and histogram
/// smoothing sigma (in bin units). Each axis is binned over that grid's
/// in-mask min-max.
pub fn mutual_information_with(
    a: &[f64],
    b: &[f64],
    m: &[u8],
    bins: usize,
    sigma: f64,
) -> Result<f64> {
    check_same_len(a, b, m)?;
    let (lo_a, hi_a) = in_mask_range(a, m)?;
    let (lo_b, hi_b) = in_mask_range(b, m)?;
    let scale_a = bins as f64 / (hi_a - lo_a);
    let scale_b = bins as f64 / (hi_b - lo_b);
    let mut hist = vec![0.0; bins * bins];
    for i in 0..a.len() {
        if m[i] != 0 {
            let ia = (((a[i] - lo_a) * scale_a) as usize).min(bins - 1);
            let ib = (((b[i] - lo_b) * scale_b) as usize).min(bins - 1);
            hist[ia * bins + ib] += 1.0;
        }
    }
    smooth_joint(&mut hist, bins, sigma);
    Ok(mi_of_joint(&hist, bins))
}

/// Mutual information with the default 32-bin histogram smoothed by a
/// Gaussian of sigma 1.0 bins.
pub fn mutual_information(a: &[f64], b: &[f64], m: &[u8]) -> Result<f64> {
    mutual_information_with(a, b, m, MI_BINS, MI_SIGMA)
}

/// Composite loss: `l1*|dv|_1 + grad*|grad dv|_rms + ssim*(1 - SSIM)
/// + mi*(-MI) + reg*params_l1`, everything inside the mask.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    pred_vdm: &[f64],
    ref_vdm: &[f64],
    b0_corrected: &[f64],
    b0_ref: &[f64],
    t1w: &[f64],
    m: &[u8],
    dims: (usize, usize, usize),
    weights: &LossWeights,
    params_l1: f64,
) -> Result<LossBreakdown> {
    let mut breakdown = LossBreakdown {
        vdm_l1: masked_l1(pred_vdm, ref_vdm, m)?,
        grad_l2: masked_grad_l2(pred_vdm, ref_vdm, m, dims)?,
        dssim: 1.0 - ssim(b0_ref, b0_corrected, m, dims)?,
        neg_mi: -mutual_information(t1w, b0_corrected, m)?,
        weight_l1: params_l1,
        total: 0.0,
    };
    breakdown.total = breakdown.weighted_total(weights);
    Ok(breakdown)
}

/// Classical paired t-test: returns the t statistic (n-1 degrees of
/// freedom) and the two-sided p-value.
pub fn paired_t_test(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "sample lengths {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::DegenerateSample("need at least 2 pairs".into()));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    if var <= 0.0 {
        return Err(Error::DegenerateSample("zero difference variance".into()));
    }
    let t = mean / (var / n as f64).sqrt();
    let df = (n - 1) as f64;
    let p = student_t_two_sided_p(t, df);
    Ok((t, p))
}

/// Two-sided p-value of the Student-t distribution via the regularized
/// incomplete beta function.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    incomplete_beta(df / (df + t * t), 0.5 * df, 0.5)
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7.
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction.
pub fn incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front = (a * x.ln() + b * (1.0 - x).ln() + ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b))
        .exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(x, a, b) / a
    } else {
        1.0 - incomplete_beta(1.0 - x, b, a)
    }
}

fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}
