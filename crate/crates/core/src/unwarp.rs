//! Distortion physics: field-map conversion, displacement warping,
//! Jacobian intensity modulation, forward simulation and correction.
//!
//! Correction uses pull-back sampling: the corrected value at voxel y is
//! read from the distorted image at y + d(y)/s along the PE axis and
//! multiplied by the Jacobian 1 + dd/dy. The forward simulator is the
//! exact numerical inverse of that procedure, so a distort/correct round
//! trip differs from the input only by interpolation error.

use crate::error::{Error, Result};
use crate::volume::{sample_line_linear, DisplacementMap, Volume3D};
use rayon::prelude::*;

/// Off-resonance frequencies in Hz on a [`Volume3D`] grid.
pub type FieldMap = Volume3D;

/// Acquisition parameters scaling a field map to displacements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcquisitionParams {
    /// Total EPI read-out time, seconds.
    pub readout_time: f64,
    /// Voxel size along the phase-encode axis, mm.
    pub pe_voxel_size: f64,
    /// Blip polarity, +1 or -1.
    pub pe_sign: f64,
}

impl AcquisitionParams {
    pub fn new(readout_time: f64, pe_voxel_size: f64, pe_sign: f64) -> Result<Self> {
        if !(readout_time > 0.0) {
            return Err(Error::SpecInvalid("readout_time must be > 0".into()));
        }
        if !(pe_voxel_size > 0.0) {
            return Err(Error::SpecInvalid("pe_voxel_size must be > 0".into()));
        }
        if pe_sign != 1.0 && pe_sign != -1.0 {
            return Err(Error::SpecInvalid("pe_sign must be +1 or -1".into()));
        }
        Ok(Self {
            readout_time,
            pe_voxel_size,
            pe_sign,
        })
    }
}

/// Converts a field map in Hz to a displacement map in mm:
/// `d = pe_sign * fm * readout_time * pe_voxel_size`.
pub fn fieldmap_to_vdm(fm: &FieldMap, acq: &AcquisitionParams) -> Result<DisplacementMap> {
    let factor = acq.pe_sign * acq.readout_time * acq.pe_voxel_size;
    let mut out = fm.clone();
    for v in &mut out.data {
        *v *= factor;
    }
    Ok(out)
}

/// Iterates over PE-axis columns: yields (base index, stride, length).
fn pe_columns(v: &Volume3D) -> (Vec<usize>, usize, usize) {
    let (nx, ny, nz) = v.extents();
    let mut bases = Vec::new();
    match v.pe_axis {
        0 => {
            for z in 0..nz {
                for y in 0..ny {
                    bases.push(nx * (y + ny * z));
                }
            }
            (bases, 1, nx)
        }
        _ => {
            for z in 0..nz {
                for x in 0..nx {
                    bases.push(x + nx * ny * z);
                }
            }
            (bases, nx, ny)
        }
    }
}

fn gather(data: &[f64], base: usize, stride: usize, n: usize) -> Vec<f64> {
    (0..n).map(|i| data[base + i * stride]).collect()
}

/// Central-difference derivative along a column, one-sided at the borders.
fn column_derivative(col: &[f64]) -> Vec<f64> {
    let n = col.len();
    let mut d = vec![0.0; n];
    if n < 2 {
        return d;
    }
    d[0] = col[1] - col[0];
    d[n - 1] = col[n - 1] - col[n - 2];
    for i in 1..n - 1 {
        d[i] = (col[i + 1] - col[i - 1]) * 0.5;
    }
    d
}

/// Jacobian of the displacement field along the PE axis:
/// `J = 1 + d(vdm/s)/dy` in voxel-index units.
pub fn jacobian_along_pe(vdm: &DisplacementMap) -> Result<Volume3D> {
    let s = vdm.pe_voxel_size();
    let (bases, stride, n) = pe_columns(vdm);
    if n < 2 {
        return Err(Error::GridTooSmall);
    }
    let mut out = vdm.clone();
    for &base in &bases {
        let col = gather(&vdm.data, base, stride, n);
        let deriv = column_derivative(&col);
        for (i, d) in deriv.iter().enumerate() {
            out.data[base + i * stride] = 1.0 + d / s;
        }
    }
    Ok(out)
}

/// Pull-back resampling along the PE axis: `out(y) = img(y + vdm(y)/s)`,
/// optionally multiplied by the Jacobian for intensity modulation.
pub fn apply_vdm(img: &Volume3D, vdm: &DisplacementMap, modulate: bool) -> Result<Volume3D> {
    img.same_grid(vdm)?;
    let s = img.pe_voxel_size();
    let (bases, stride, n) = pe_columns(img);
    let jac = if modulate {
        Some(jacobian_along_pe(vdm)?)
    } else {
        None
    };
    let mut out = img.clone();
    let mut warped = vec![0.0; n];
    for &base in &bases {
        let col = gather(&img.data, base, stride, n);
        for (y, w) in warped.iter_mut().enumerate() {
            let pos = y as f64 + vdm.data[base + y * stride] / s;
            *w = sample_line_linear(&col, pos);
        }
        for (y, &w) in warped.iter().enumerate() {
            let i = base + y * stride;
            out.data[i] = match &jac {
                Some(j) => w * j.data[i],
                None => w,
            };
        }
    }
    Ok(out)
}

/// Margin below which the forward map counts as non-invertible.
const INVERTIBILITY_EPS: f64 = 1e-6;
const BISECTION_TOL: f64 = 1e-6;
const BISECTION_MAX_ITER: usize = 60;

/// Simulates acquisition of a distorted image such that
/// `apply_vdm(forward_distort(img, d), d, true)` recovers `img` up to
/// interpolation error. Each PE column numerically inverts the monotone
/// map `y -> y + d(y)/s` by bisection and divides by the Jacobian.
pub fn forward_distort(img: &Volume3D, vdm_true: &DisplacementMap) -> Result<Volume3D> {
    img.same_grid(vdm_true)?;
    let s = img.pe_voxel_size();
    let (bases, stride, n) = pe_columns(img);
    if n < 2 {
        return Err(Error::GridTooSmall);
    }
    let (nx, ny) = (img.nx, img.ny);

    // Monotonicity check over discrete forward differences.
    for (ci, &base) in bases.iter().enumerate() {
        for i in 0..n - 1 {
            let slope = (vdm_true.data[base + (i + 1) * stride] - vdm_true.data[base + i * stride]) / s;
            if 1.0 + slope <= INVERTIBILITY_EPS {
                let (x, z) = match img.pe_axis {
                    0 => (i, ci / ny),
                    _ => (ci % nx, ci / nx),
                };
                return Err(Error::NonInvertibleField { x, z });
            }
        }
    }

    let jac = jacobian_along_pe(vdm_true)?;
    let mut out = img.clone();
    let chunks: Vec<(usize, Vec<f64>)> = bases
        .par_iter()
        .map(|&base| {
            let img_col = gather(&img.data, base, stride, n);
            let d_col = gather(&vdm_true.data, base, stride, n);
            let j_col = gather(&jac.data, base, stride, n);
            let d_max = d_col.iter().fold(0.0f64, |a, &d| a.max((d / s).abs()));
            let forward = |y: f64| y + sample_line_linear(&d_col, y) / s;
            let mut col = vec![0.0; n];
            for (u, c) in col.iter_mut().enumerate() {
                let target = u as f64;
                let mut lo = target - d_max - 1.0;
                let mut hi = target + d_max + 1.0;
                for _ in 0..BISECTION_MAX_ITER {
                    if hi - lo < BISECTION_TOL {
                        break;
                    }
                    let mid = 0.5 * (lo + hi);
                    if forward(mid) < target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let mut src = 0.5 * (lo + hi);
                // Snap to an integer grid point when it is an exact root,
                // making zero-displacement columns an exact identity.
                let snapped = src.round();
                if forward(snapped) == target {
                    src = snapped;
                }
                *c = sample_line_linear(&img_col, src) / sample_line_linear(&j_col, src);
            }
            (base, col)
        })
        .collect();
    for (base, col) in chunks {
        for (i, &v) in col.iter().enumerate() {
            out.data[base + i * stride] = v;
        }
    }
    Ok(out)
}

/// Correction entry point: warps with intensity modulation, slice by
/// slice, then restacks. Identical to the volume-level call because the
/// warp never crosses axial slices.
pub fn correct_b0(distorted: &Volume3D, vdm: &DisplacementMap) -> Result<Volume3D> {
    distorted.same_grid(vdm)?;
    let plane = distorted.nx * distorted.ny;
    let mut out = distorted.clone();
    for z in 0..distorted.nz {
        let img_slice = Volume3D {
            nx: distorted.nx,
            ny: distorted.ny,
            nz: 1,
            voxel: distorted.voxel,
            pe_axis: distorted.pe_axis,
            data: distorted.slice(z).to_vec(),
        };
        let vdm_slice = Volume3D {
            nx: vdm.nx,
            ny: vdm.ny,
            nz: 1,
            voxel: vdm.voxel,
            pe_axis: vdm.pe_axis,
            data: vdm.slice(z).to_vec(),
        };
        let corrected = apply_vdm(&img_slice, &vdm_slice, true)?;
        out.data[z * plane..(z + 1) * plane].copy_from_slice(&corrected.data);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Mask3D;

    fn grid(nx: usize, ny: usize, nz: usize, f: impl Fn(usize, usize, usize) -> f64) -> Volume3D {
        let mut data = vec![0.0; nx * ny * nz];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data[x + nx * (y + ny * z)] = f(x, y, z);
                }
            }
        }
        Volume3D::new(nx, ny, nz, [1.8125, 1.8125, 2.0], 1, data).unwrap()
    }

    #[test]
    fn fieldmap_conversion_hand_arithmetic() {
        let fm = grid(4, 4, 2, |_, _, _| 10.0);
        let acq = AcquisitionParams::new(0.05, 1.8125, 1.0).unwrap();
        let vdm = fieldmap_to_vdm(&fm, &acq).unwrap();
        for &v in &vdm.data {
            assert!((v - 0.90625).abs() < 1e-15);
        }
        let neg = AcquisitionParams::new(0.05, 1.8125, -1.0).unwrap();
        let vdm_neg = fieldmap_to_vdm(&fm, &neg).unwrap();
        for (a, b) in vdm.data.iter().zip(&vdm_neg.data) {
            assert_eq!(*a, -b);
        }
    }

    #[test]
    fn fieldmap_conversion_is_linear() {
        let fm = grid(3, 5, 2, |x, y, z| (x + 2 * y + 3 * z) as f64 - 4.0);
        let acq = AcquisitionParams::new(0.031, 1.8125, 1.0).unwrap();
        let base = fieldmap_to_vdm(&fm, &acq).unwrap();
        // Power-of-two scale: linearity must hold bit-exactly.
        let mut scaled_fm = fm.clone();
        for v in &mut scaled_fm.data {
            *v *= 4.0;
        }
        let scaled = fieldmap_to_vdm(&scaled_fm, &acq).unwrap();
        for (a, b) in base.data.iter().zip(&scaled.data) {
            assert_eq!(a * 4.0, *b);
        }
    }

    #[test]
    fn jacobian_of_constant_field_is_one() {
        let vdm = grid(4, 8, 2, |_, _, _| 3.3);
        let jac = jacobian_along_pe(&vdm).unwrap();
        for &j in &jac.data {
            assert!((j - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobian_ignores_in_plane_variation_off_pe() {
        // Field varies along x and z only; PE derivative must stay zero.
        let vdm = grid(6, 8, 3, |x, _, z| (x * 7 + z * 13) as f64 * 0.1);
        let jac = jacobian_along_pe(&vdm).unwrap();
        for &j in &jac.data {
            assert!((j - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobian_of_linear_ramp() {
        // vdm = a*y mm, a chosen so a/s = 0.1 per voxel.
        let s = 1.8125;
        let vdm = grid(4, 16, 2, |_, y, _| 0.1 * s * y as f64);
        let jac = jacobian_along_pe(&vdm).unwrap();
        for &j in &jac.data {
            assert!((j - 1.1).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobian_matches_analytic_sine_derivative() {
        let s = 1.8125;
        let amp = 3.0;
        let k = 2.0 * std::f64::consts::PI / 128.0;
        let vdm = grid(2, 128, 1, |_, y, _| amp * (k * y as f64).sin());
        let jac = jacobian_along_pe(&vdm).unwrap();
        let mut max_err = 0.0f64;
        for y in 0..128 {
            let analytic = 1.0 + amp * k / s * (k * y as f64).cos();
            max_err = max_err.max((jac.at(0, y, 0) - analytic).abs());
        }
        assert!(max_err < 1e-3, "max_err = {max_err}");
    }

    #[test]
    fn zero_vdm_warp_is_identity() {
        let img = grid(5, 9, 3, |x, y, z| (x * y + z) as f64);
        let vdm = grid(5, 9, 3, |_, _, _| 0.0);
        let out = apply_vdm(&img, &vdm, true).unwrap();
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn one_voxel_shift_moves_delta() {
        let (nx, ny, nz) = (3, 12, 2);
        let img = grid(nx, ny, nz, |x, y, z| f64::from(x == 1 && y == 6 && z == 1));
        let s = img.pe_voxel_size();
        let vdm = grid(nx, ny, nz, move |_, _, _| s);
        let out = apply_vdm(&img, &vdm, false).unwrap();
        // Pull-back with +1 voxel displacement reads img(y+1).
        for y in 0..ny - 1 {
            for x in 0..nx {
                for z in 0..nz {
                    assert_eq!(out.at(x, y, z), img.at(x, y + 1, z), "({x},{y},{z})");
                }
            }
        }
        assert_eq!(out.at(1, 5, 1), 1.0);
        assert_eq!(out.at(1, 6, 1), 0.0);
    }

    #[test]
    fn modulated_warp_conserves_mass() {
        // Smooth bump field decaying to zero at the PE borders; ramp image.
        let (nx, ny, nz) = (4, 64, 2);
        let img = grid(nx, ny, nz, |_, y, _| 1.0 + y as f64);
        let s = img.pe_voxel_size();
        let sigma = 8.0;
        let vdm = grid(nx, ny, nz, |_, y, _| {
            let t = (y as f64 - 32.0) / sigma;
            5.0 * (-0.5 * t * t).exp()
        });
        // Slope check: max |d(d/s)/dy| must stay below 0.5.
        let jac = jacobian_along_pe(&vdm).unwrap();
        for &j in &jac.data {
            assert!((j - 1.0).abs() <= 0.5);
        }
        let _ = s;
        let out = apply_vdm(&img, &vdm, true).unwrap();
        let total_in: f64 = img.data.iter().sum();
        let total_out: f64 = out.data.iter().sum();
        let rel = (total_in - total_out).abs() / total_in;
        assert!(rel < 0.01, "mass drift {rel}");
    }

    #[test]
    fn forward_distort_zero_field_is_identity() {
        let img = grid(4, 10, 2, |x, y, z| (x + y * z) as f64);
        let vdm = grid(4, 10, 2, |_, _, _| 0.0);
        let out = forward_distort(&img, &vdm).unwrap();
        for (a, b) in out.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn distort_then_correct_round_trip() {
        // Smooth blob image, smooth invertible field with max |d| = 5 voxels.
        let (nx, ny, nz) = (24, 48, 6);
        let img = grid(nx, ny, nz, |x, y, z| {
            let dx = (x as f64 - 12.0) / 8.0;
            let dy = (y as f64 - 24.0) / 14.0;
            let dz = (z as f64 - 3.0) / 4.0;
            100.0 * (-0.5 * (dx * dx + dy * dy + dz * dz)).exp()
        });
        let s = img.pe_voxel_size();
        let vdm = grid(nx, ny, nz, |x, y, _| {
            let ty = (y as f64 - 24.0) / 11.0;
            let tx = (x as f64 - 12.0) / 10.0;
            5.0 * s * (-0.5 * (ty * ty + tx * tx)).exp()
        });
        // |d(d/s)/dy| max = 5 * 0.6065 / 11 = 0.276 < 0.5.
        let distorted = forward_distort(&img, &vdm).unwrap();
        let corrected = correct_b0(&distorted, &vdm).unwrap();
        let n = img.data.len();
        let mse: f64 = img
            .data
            .iter()
            .zip(&corrected.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n as f64;
        let range = 100.0;
        let rmse = mse.sqrt();
        assert!(rmse < 0.02 * range, "rmse = {rmse}");
        // The field genuinely moved things.
        let moved: f64 = img
            .data
            .iter()
            .zip(&distorted.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(moved > 1.0);
    }

    #[test]
    fn non_invertible_field_is_rejected() {
        let (nx, ny, nz) = (3, 10, 2);
        let img = grid(nx, ny, nz, |_, y, _| y as f64);
        let s = img.pe_voxel_size();
        let vdm = grid(nx, ny, nz, move |_, y, _| -1.2 * s * y as f64);
        assert!(matches!(
            forward_distort(&img, &vdm),
            Err(Error::NonInvertibleField { .. })
        ));
    }

    #[test]
    fn correct_b0_equals_volume_level_apply() {
        let img = grid(6, 12, 4, |x, y, z| ((x * 31 + y * 17 + z * 7) % 13) as f64);
        let s = img.pe_voxel_size();
        let vdm = grid(6, 12, 4, move |x, y, z| {
            0.8 * s * ((x + y + z) as f64 * 0.37).sin()
        });
        let a = correct_b0(&img, &vdm).unwrap();
        let b = apply_vdm(&img, &vdm, true).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn grid_mismatch_is_reported() {
        let img = grid(4, 4, 2, |_, _, _| 1.0);
        let vdm = grid(4, 5, 2, |_, _, _| 0.0);
        assert!(matches!(
            apply_vdm(&img, &vdm, false),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn pe_axis_zero_warps_along_x() {
        let (nx, ny, nz) = (12, 3, 2);
        let mut img = grid(nx, ny, nz, |x, y, z| f64::from(x == 6 && y == 1 && z == 0));
        img.pe_axis = 0;
        let s = img.voxel[0];
        let mut vdm = grid(nx, ny, nz, move |_, _, _| s);
        vdm.pe_axis = 0;
        let out = apply_vdm(&img, &vdm, false).unwrap();
        assert_eq!(out.at(5, 1, 0), 1.0);
        assert_eq!(out.at(6, 1, 0), 0.0);
    }

    #[test]
    fn masked_round_trip_on_random_smooth_fields() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..3 {
            let (nx, ny, nz) = (16, 32, 4);
            let img = grid(nx, ny, nz, |x, y, z| {
                let dx = (x as f64 - 8.0) / 6.0;
                let dy = (y as f64 - 16.0) / 10.0;
                let dz = (z as f64 - 2.0) / 3.0;
                50.0 * (-0.5 * (dx * dx + dy * dy + dz * dz)).exp() + 1.0
            });
            let s = img.pe_voxel_size();
            let cy = rng.gen_range(10.0..22.0);
            let amp = rng.gen_range(-4.0..4.0) * s;
            let sigma = rng.gen_range(6.0..10.0);
            let vdm = grid(nx, ny, nz, move |_, y, _| {
                let t = (y as f64 - cy) / sigma;
                amp * (-0.5 * t * t).exp()
            });
            let distorted = forward_distort(&img, &vdm).unwrap();
            let corrected = correct_b0(&distorted, &vdm).unwrap();
            let mask = Mask3D::new(nx, ny, nz, vec![1; nx * ny * nz]).unwrap();
            let mse: f64 = img
                .data
                .iter()
                .zip(&corrected.data)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / mask.count() as f64;
            assert!(mse.sqrt() < 0.02 * 50.0);
        }
    }
}
