//! Core image containers and voxel-level utilities.
//!
//! All grids are stored flat with x varying fastest (the NIfTI on-disk
//! order): `index = x + nx*(y + ny*z)`. Axial slices (fixed z) are
//! therefore contiguous chunks of length `nx*ny`.

use crate::error::{Error, Result};
use rayon::prelude::*;

/// Scalar 3-D grid with voxel geometry and a declared phase-encode axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Voxel sizes in mm.
    pub voxel: [f64; 3],
    /// Phase-encode axis: 0 (x) or 1 (y). Distortion acts along this axis.
    pub pe_axis: usize,
    pub data: Vec<f64>,
}

impl Volume3D {
    pub fn new(
        nx: usize,
        ny: usize,
        nz: usize,
        voxel: [f64; 3],
        pe_axis: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::DegenerateVolume("zero extent".into()));
        }
        if voxel.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::DegenerateVolume("non-positive voxel size".into()));
        }
        if pe_axis > 1 {
            return Err(Error::SpecInvalid(format!(
                "pe_axis must be 0 or 1 (in-plane), got {pe_axis}"
            )));
        }
        if data.len() != nx * ny * nz {
            return Err(Error::ShapeMismatch(format!(
                "data length {} != {}x{}x{}",
                data.len(),
                nx,
                ny,
                nz
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValues);
        }
        Ok(Self {
            nx,
            ny,
            nz,
            voxel,
            pe_axis,
            data,
        })
    }

    /// Constant-valued volume.
    pub fn filled(nx: usize, ny: usize, nz: usize, voxel: [f64; 3], value: f64) -> Self {
        Self {
            nx,
            ny,
            nz,
            voxel,
            pe_axis: 1,
            data: vec![value; nx * ny * nz],
        }
    }

    #[inline]
    pub fn extents(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.idx(x, y, z)]
    }

    /// Voxel size along the phase-encode axis, mm.
    #[inline]
    pub fn pe_voxel_size(&self) -> f64 {
        self.voxel[self.pe_axis]
    }

    /// Contiguous axial slice (fixed z).
    pub fn slice(&self, z: usize) -> &[f64] {
        let n = self.nx * self.ny;
        &self.data[z * n..(z + 1) * n]
    }

    /// Checks extents, voxel sizes and PE axis agree with `other`.
    pub fn same_grid(&self, other: &Volume3D) -> Result<()> {
        if self.extents() != other.extents() {
            return Err(Error::GridMismatch(format!(
                "extents {:?} vs {:?}",
                self.extents(),
                other.extents()
            )));
        }
        if self.pe_axis != other.pe_axis {
            return Err(Error::GridMismatch(format!(
                "pe_axis {} vs {}",
                self.pe_axis, other.pe_axis
            )));
        }
        let tol = 1e-9;
        if self
            .voxel
            .iter()
            .zip(&other.voxel)
            .any(|(a, b)| (a - b).abs() > tol * a.abs().max(1.0))
        {
            return Err(Error::GridMismatch(format!(
                "voxel sizes {:?} vs {:?}",
                self.voxel, other.voxel
            )));
        }
        Ok(())
    }
}

/// Binary mask on the same grid as the volume it qualifies.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask3D {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub data: Vec<u8>,
}

impl Mask3D {
    pub fn new(nx: usize, ny: usize, nz: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != nx * ny * nz {
            return Err(Error::ShapeMismatch(format!(
                "mask length {} != {}x{}x{}",
                data.len(),
                nx,
                ny,
                nz
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::SpecInvalid("mask values must be 0 or 1".into()));
        }
        Ok(Self { nx, ny, nz, data })
    }

    pub fn zeros(nx: usize, ny: usize, nz: usize) -> Self {
        Self {
            nx,
            ny,
            nz,
            data: vec![0; nx * ny * nz],
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.idx(x, y, z)] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let n = self.nx * self.ny;
        &self.data[z * n..(z + 1) * n]
    }
}

/// Per-voxel displacement along the PE axis, in millimeters.
pub type DisplacementMap = Volume3D;

/// Binary dilation with an L-infinity (box) structuring element of the
/// given radius, applied per axial slice.
pub fn dilate_mask(m: &Mask3D, radius: usize) -> Mask3D {
    if radius == 0 {
        return m.clone();
    }
    let (nx, ny) = (m.nx, m.ny);
    let plane = nx * ny;
    let mut out = vec![0u8; m.data.len()];
    // Box dilation is separable: max-filter along x, then along y.
    out.par_chunks_mut(plane)
        .zip(m.data.par_chunks(plane))
        .for_each(|(dst, src)| {
            let mut tmp = vec![0u8; plane];
            for y in 0..ny {
                let row = &src[y * nx..(y + 1) * nx];
                let trow = &mut tmp[y * nx..(y + 1) * nx];
                for x in 0..nx {
                    let lo = x.saturating_sub(radius);
                    let hi = (x + radius).min(nx - 1);
                    trow[x] = u8::from(row[lo..=hi].iter().any(|&v| v != 0));
                }
            }
            for y in 0..ny {
                let lo = y.saturating_sub(radius);
                let hi = (y + radius).min(ny - 1);
                for x in 0..nx {
                    dst[y * nx + x] = u8::from((lo..=hi).any(|yy| tmp[yy * nx + x] != 0));
                }
            }
        });
    Mask3D {
        nx,
        ny,
        nz: m.nz,
        data: out,
    }
}

/// Threshold at an intensity quantile, keeping the largest 6-connected
/// component.
pub fn threshold_mask(v: &Volume3D, quantile: f64) -> Result<Mask3D> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::SpecInvalid(format!(
            "quantile must lie in (0,1), got {quantile}"
        )));
    }
    let mut sorted = v.data.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let first = sorted[0];
    let last = sorted[sorted.len() - 1];
    if first == last {
        return Err(Error::DegenerateVolume("constant-valued volume".into()));
    }
    let threshold = quantile_of_sorted(&sorted, quantile);
    let raw: Vec<u8> = v.data.iter().map(|&x| u8::from(x > threshold)).collect();
    let labels = largest_component_6(&raw, v.nx, v.ny, v.nz);
    Mask3D::new(v.nx, v.ny, v.nz, labels)
}

/// Linear-interpolation quantile over a sorted sample.
pub fn quantile_of_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    }
}

/// Keeps only the largest 6-connected nonzero component.
fn largest_component_6(raw: &[u8], nx: usize, ny: usize, nz: usize) -> Vec<u8> {
    let mut label = vec![0u32; raw.len()];
    let mut sizes: Vec<usize> = vec![0]; // label 0 = background
    let mut stack = Vec::new();
    for start in 0..raw.len() {
        if raw[start] == 0 || label[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32;
        sizes.push(0);
        stack.push(start);
        label[start] = id;
        while let Some(i) = stack.pop() {
            sizes[id as usize] += 1;
            let x = i % nx;
            let y = (i / nx) % ny;
            let z = i / (nx * ny);
            let mut visit = |j: usize| {
                if raw[j] != 0 && label[j] == 0 {
                    label[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < nx {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - nx);
            }
            if y + 1 < ny {
                visit(i + nx);
            }
            if z > 0 {
                visit(i - nx * ny);
            }
            if z + 1 < nz {
                visit(i + nx * ny);
            }
        }
    }
    let best = (1..sizes.len()).max_by_key(|&i| sizes[i]).unwrap_or(0) as u32;
    label
        .iter()
        .map(|&l| u8::from(l == best && best != 0))
        .collect()
}

/// 1-D linear interpolation with border clamping.
#[inline]
pub fn sample_line_linear(column: &[f64], position: f64) -> f64 {
    let n = column.len();
    if n == 1 {
        return column[0];
    }
    let p = position.clamp(0.0, (n - 1) as f64);
    let i0 = (p.floor() as usize).min(n - 2);
    let f = p - i0 as f64;
    column[i0] * (1.0 - f) + column[i0 + 1] * f
}

/// Affine intensity mapping produced by [`normalize_intensity`]:
/// `out = clamp((in - offset) * scale, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormParams {
    pub offset: f64,
    pub scale: f64,
}

impl NormParams {
    /// Inverts the (unclamped) mapping.
    pub fn invert(&self, normalized: f64) -> f64 {
        normalized / self.scale + self.offset
    }
}

/// Maps the in-mask 0.5th percentile to 0 and 99.5th percentile to 1,
/// clamping to [0, 1]; values outside the mask pass through the same map.
pub fn normalize_intensity(v: &Volume3D, m: &Mask3D) -> Result<(Volume3D, NormParams)> {
    if (v.nx, v.ny, v.nz) != (m.nx, m.ny, m.nz) {
        return Err(Error::GridMismatch("volume vs mask extents".into()));
    }
    let mut inside: Vec<f64> = v
        .data
        .iter()
        .zip(&m.data)
        .filter(|(_, &b)| b != 0)
        .map(|(&x, _)| x)
        .collect();
    if inside.is_empty() {
        return Err(Error::EmptyMask);
    }
    inside.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = quantile_of_sorted(&inside, 0.005);
    let hi = quantile_of_sorted(&inside, 0.995);
    if hi <= lo {
        return Err(Error::DegenerateVolume("zero percentile span".into()));
    }
    let params = NormParams {
        offset: lo,
        scale: 1.0 / (hi - lo),
    };
    let data: Vec<f64> = v
        .data
        .iter()
        .map(|&x| ((x - params.offset) * params.scale).clamp(0.0, 1.0))
        .collect();
    let out = Volume3D {
        nx: v.nx,
        ny: v.ny,
        nz: v.nz,
        voxel: v.voxel,
        pe_axis: v.pe_axis,
        data,
    };
    Ok((out, params))
}
