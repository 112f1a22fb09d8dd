//! Single-file NIfTI-1 reader/writer.
//!
//! Supports `.nii` and gzipped `.nii.gz` (detected by the 0x1F 0x8B
//! prefix), little- or big-endian headers (detected via `sizeof_hdr`),
//! and datatypes uint8/int16/int32/float32/float64. All values are
//! mapped through `scl_slope`/`scl_inter` on read and held as f64.
//! NIfTI-2 headers and two-file `.hdr`/`.img` pairs are rejected.
//! Header extensions are skipped, not interpreted.

use crate::error::{Error, Result};
use crate::volume::Volume3D;
use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use std::io::{Read, Write};
use std::path::Path;

pub const HEADER_SIZE: usize = 348;
/// Data offset written by [`write_nifti`]: header + 4-byte extension flag.
pub const DEFAULT_VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_INT32: i16 = 8;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;

/// The NIfTI-1 header fields this toolkit reads, writes or carries through.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    /// quatern_b, quatern_c, quatern_d, qoffset_x, qoffset_y, qoffset_z
    pub quatern: [f32; 6],
    pub srow: [[f32; 4]; 3],
    pub magic: [u8; 4],
}

impl NiftiHeader {
    /// Fresh header for a 3-D float32 volume with the given extents and
    /// voxel sizes (identity-style sform).
    pub fn for_extents(nx: usize, ny: usize, nz: usize, voxel: [f64; 3]) -> Self {
        let mut srow = [[0.0f32; 4]; 3];
        for (i, row) in srow.iter_mut().enumerate() {
            row[i] = voxel[i] as f32;
        }
        NiftiHeader {
            dim: [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1],
            datatype: DT_FLOAT32,
            bitpix: 32,
            pixdim: [
                1.0,
                voxel[0] as f32,
                voxel[1] as f32,
                voxel[2] as f32,
                1.0,
                1.0,
                1.0,
                1.0,
            ],
            vox_offset: DEFAULT_VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            qform_code: 0,
            sform_code: 1,
            quatern: [0.0; 6],
            srow,
            magic: *b"n+1\0",
        }
    }

    pub fn rank(&self) -> usize {
        self.dim[0] as usize
    }

    /// Extents of the used dimensions.
    pub fn extents(&self) -> Vec<usize> {
        (1..=self.rank()).map(|i| self.dim[i] as usize).collect()
    }

    pub fn element_count(&self) -> usize {
        self.extents().iter().product()
    }

    pub fn voxel_sizes(&self) -> [f64; 3] {
        [
            self.pixdim[1] as f64,
            self.pixdim[2] as f64,
            self.pixdim[3] as f64,
        ]
    }

    fn validate(&self) -> Result<()> {
        if &self.magic == b"ni1\0" {
            return Err(Error::BadMagic(
                "two-file .hdr/.img NIfTI-1 is not supported (magic 'ni1')".into(),
            ));
        }
        if &self.magic != b"n+1\0" {
            return Err(Error::BadMagic(format!(
                "magic {:?} is not 'n+1'",
                &self.magic
            )));
        }
        let rank = self.dim[0];
        if !(3..=4).contains(&rank) {
            return Err(Error::BadMagic(format!("dim[0] = {rank}, expected 3 or 4")));
        }
        for i in 1..=rank as usize {
            if self.dim[i] < 1 {
                return Err(Error::BadMagic(format!(
                    "extent dim[{i}] = {} must be >= 1",
                    self.dim[i]
                )));
            }
        }
        match self.datatype {
            DT_UINT8 | DT_INT16 | DT_INT32 | DT_FLOAT32 | DT_FLOAT64 => Ok(()),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }
}

/// Decoded volume: header plus data in header-declared order (x fastest),
/// already mapped through `scl_slope`/`scl_inter`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVolume {
    pub header: NiftiHeader,
    pub data: Vec<f64>,
}

impl RawVolume {
    /// Wraps a [`Volume3D`] with a fresh float32 header.
    pub fn from_volume(v: &Volume3D) -> Self {
        RawVolume {
            header: NiftiHeader::for_extents(v.nx, v.ny, v.nz, v.voxel),
            data: v.data.clone(),
        }
    }

    /// Reinterprets a 3-D raw volume (or the first volume of a 4-D series)
    /// as a [`Volume3D`] with the given PE axis.
    pub fn to_volume(&self, pe_axis: usize) -> Result<Volume3D> {
        let e = self.header.extents();
        let (nx, ny, nz) = (e[0], e[1], e[2]);
        let n = nx * ny * nz;
        Volume3D::new(
            nx,
            ny,
            nz,
            self.header.voxel_sizes(),
            pe_axis,
            self.data[..n].to_vec(),
        )
    }

    /// Splits a 3-D or 4-D series into per-volume [`Volume3D`]s.
    pub fn to_volumes(&self, pe_axis: usize) -> Result<Vec<Volume3D>> {
        let e = self.header.extents();
        let (nx, ny, nz) = (e[0], e[1], e[2]);
        let nt = if e.len() > 3 { e[3] } else { 1 };
        let n = nx * ny * nz;
        (0..nt)
            .map(|t| {
                Volume3D::new(
                    nx,
                    ny,
                    nz,
                    self.header.voxel_sizes(),
                    pe_axis,
                    self.data[t * n..(t + 1) * n].to_vec(),
                )
            })
            .collect()
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1F && bytes[1] == 0x8B
}

/// Reads a single-file NIfTI-1 volume, decompressing if gzipped.
pub fn read_nifti(path: &Path) -> Result<RawVolume> {
    let bytes = std::fs::read(path)?;
    let bytes = if is_gzip(&bytes) {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..]).read_to_end(&mut out)?;
        out
    } else {
        bytes
    };
    decode_nifti(&bytes)
}

/// Decodes an in-memory (already decompressed) NIfTI-1 byte stream.
pub fn decode_nifti(bytes: &[u8]) -> Result<RawVolume> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::TruncatedData {
            expected: HEADER_SIZE,
            found: bytes.len(),
        });
    }
    let le_size = LittleEndian::read_i32(&bytes[0..4]);
    let be_size = BigEndian::read_i32(&bytes[0..4]);
    if le_size == 540 || be_size == 540 {
        return Err(Error::BadMagic(
            "NIfTI-2 (sizeof_hdr 540) is not supported".into(),
        ));
    }
    if le_size == 348 {
        decode_with::<LittleEndian>(bytes, false)
    } else if be_size == 348 {
        decode_with::<BigEndian>(bytes, true)
    } else {
        Err(Error::BadMagic(format!(
            "sizeof_hdr {le_size} (LE) / {be_size} (BE), expected 348"
        )))
    }
}

fn decode_with<B: ByteOrder>(bytes: &[u8], _swapped: bool) -> Result<RawVolume> {
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = B::read_i16(&bytes[40 + 2 * i..]);
    }
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = B::read_f32(&bytes[76 + 4 * i..]);
    }
    let mut quatern = [0f32; 6];
    for (i, q) in quatern.iter_mut().enumerate() {
        *q = B::read_f32(&bytes[256 + 4 * i..]);
    }
    let mut srow = [[0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = B::read_f32(&bytes[280 + 16 * r + 4 * c..]);
        }
    }
    let header = NiftiHeader {
        dim,
        datatype: B::read_i16(&bytes[70..]),
        bitpix: B::read_i16(&bytes[72..]),
        pixdim,
        vox_offset: B::read_f32(&bytes[108..]),
        scl_slope: B::read_f32(&bytes[112..]),
        scl_inter: B::read_f32(&bytes[116..]),
        qform_code: B::read_i16(&bytes[252..]),
        sform_code: B::read_i16(&bytes[254..]),
        quatern,
        srow,
        magic: [bytes[344], bytes[345], bytes[346], bytes[347]],
    };
    header.validate()?;

    let offset = header.vox_offset as usize;
    if offset < HEADER_SIZE {
        return Err(Error::BadMagic(format!(
            "vox_offset {offset} lies inside the header"
        )));
    }
    let n = header.element_count();
    let elem_size = match header.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 => 4,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    let need = offset + n * elem_size;
    if bytes.len() < need {
        return Err(Error::TruncatedData {
            expected: need,
            found: bytes.len(),
        });
    }
    let payload = &bytes[offset..need];
    let slope = if header.scl_slope == 0.0 {
        1.0
    } else {
        header.scl_slope as f64
    };
    let inter = header.scl_inter as f64;
    let mut data = Vec::with_capacity(n);
    match header.datatype {
        DT_UINT8 => data.extend(payload.iter().map(|&b| b as f64 * slope + inter)),
        DT_INT16 => data.extend(
            payload
                .chunks_exact(2)
                .map(|c| B::read_i16(c) as f64 * slope + inter),
        ),
        DT_INT32 => data.extend(
            payload
                .chunks_exact(4)
                .map(|c| B::read_i32(c) as f64 * slope + inter),
        ),
        DT_FLOAT32 => data.extend(
            payload
                .chunks_exact(4)
                .map(|c| B::read_f32(c) as f64 * slope + inter),
        ),
        DT_FLOAT64 => data.extend(
            payload
                .chunks_exact(8)
                .map(|c| B::read_f64(c) * slope + inter),
        ),
        _ => unreachable!(),
    }
    Ok(RawVolume { header, data })
}

/// Writes a single-file NIfTI-1 volume with a float32 little-endian
/// payload at `vox_offset` 352. Gzip-compresses when the path ends in
/// `.gz`.
pub fn write_nifti(vol: &RawVolume, path: &Path) -> Result<()> {
    if vol.header.element_count() != vol.data.len() {
        return Err(Error::ShapeMismatch(format!(
            "header declares {} elements, data holds {}",
            vol.header.element_count(),
            vol.data.len()
        )));
    }
    let bytes = encode_nifti(vol);
    if path.extension().is_some_and(|e| e == "gz") {
        let file = std::fs::File::create(path)?;
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(&bytes)?;
        enc.finish()?;
    } else {
        std::fs::write(path, &bytes)?;
    }
    Ok(())
}

/// Encodes to uncompressed NIfTI-1 bytes (float32 LE payload).
pub fn encode_nifti(vol: &RawVolume) -> Vec<u8> {
    let h = &vol.header;
    let mut buf = vec![0u8; DEFAULT_VOX_OFFSET + vol.data.len() * 4];
    LittleEndian::write_i32(&mut buf[0..4], HEADER_SIZE as i32);
    for (i, &d) in h.dim.iter().enumerate() {
        LittleEndian::write_i16(&mut buf[40 + 2 * i..], d);
    }
    LittleEndian::write_i16(&mut buf[70..], DT_FLOAT32);
    LittleEndian::write_i16(&mut buf[72..], 32);
    for (i, &p) in h.pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut buf[76 + 4 * i..], p);
    }
    LittleEndian::write_f32(&mut buf[108..], DEFAULT_VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut buf[112..], 1.0);
    LittleEndian::write_f32(&mut buf[116..], 0.0);
    LittleEndian::write_i16(&mut buf[252..], h.qform_code);
    LittleEndian::write_i16(&mut buf[254..], h.sform_code);
    for (i, &q) in h.quatern.iter().enumerate() {
        LittleEndian::write_f32(&mut buf[256 + 4 * i..], q);
    }
    for (r, row) in h.srow.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            LittleEndian::write_f32(&mut buf[280 + 16 * r + 4 * c..], v);
        }
    }
    buf[344..348].copy_from_slice(b"n+1\0");
    // buf[348..352] stays zero: no header extensions.
    let mut cursor = &mut buf[DEFAULT_VOX_OFFSET..];
    for &v in &vol.data {
        cursor.write_f32::<LittleEndian>(v as f32).unwrap();
    }
    buf
}
