//! Minimal NIfTI-1 header codec: little-endian, single-file (`n+1`) only.

use crate::error::{CoreError, Result};

pub const HEADER_SIZE: usize = 348;
/// Data offset used when writing: header + 4-byte extension flag.
pub const WRITE_VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

/// Spatial orientation fields carried through unmodified. The reader never
/// applies these matrices to the voxel data; the writer emits them verbatim.
#[derive(Debug, Clone, PartialEq)]
pub struct Orientation {
    pub qfac: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
    pub xyzt_units: u8,
}

impl Default for Orientation {
    fn default() -> Self {
        Orientation {
            qfac: 1.0,
            qform_code: 0,
            sform_code: 0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow_x: [0.0; 4],
            srow_y: [0.0; 4],
            srow_z: [0.0; 4],
            // NIFTI_UNITS_MM
            xyzt_units: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Header {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub datatype: i16,
    pub vox_offset: usize,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub orient: Orientation,
}

fn rd_i32(b: &[u8], at: usize) -> i32 {
    i32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn rd_i16(b: &[u8], at: usize) -> i16 {
    i16::from_le_bytes(b[at..at + 2].try_into().unwrap())
}

fn rd_f32(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn wr_i32(b: &mut [u8], at: usize, v: i32) {
    b[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn wr_i16(b: &mut [u8], at: usize, v: i16) {
    b[at..at + 2].copy_from_slice(&v.to_le_bytes());
}

fn wr_f32(b: &mut [u8], at: usize, v: f32) {
    b[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

pub fn bytes_per_voxel(datatype: i16) -> Option<usize> {
    match datatype {
        DT_UINT8 => Some(1),
        DT_INT16 => Some(2),
        DT_FLOAT32 => Some(4),
        _ => None,
    }
}

/// Parses and validates a header from the first 348 bytes of `buf`.
pub fn decode_header(buf: &[u8], path: &str) -> Result<Header> {
    if buf.len() < HEADER_SIZE {
        return Err(CoreError::format(
            path,
            format!(
                "file too short for a NIfTI-1 header: expected at least {HEADER_SIZE} bytes, found {}",
                buf.len()
            ),
        ));
    }
    let sizeof_hdr = rd_i32(buf, 0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            return Err(CoreError::format(
                path,
                "big-endian NIfTI files are not supported (sizeof_hdr is byte-swapped)",
            ));
        }
        return Err(CoreError::format(
            path,
            format!("invalid sizeof_hdr {sizeof_hdr}, expected {HEADER_SIZE}"),
        ));
    }

    let magic = &buf[344..348];
    if magic == b"ni1\0" {
        return Err(CoreError::format(
            path,
            "two-file (.hdr/.img) NIfTI is not supported, expected single-file magic \"n+1\"",
        ));
    }
    if magic != b"n+1\0" {
        return Err(CoreError::format(
            path,
            format!("unrecognized magic {:?}, expected \"n+1\"", String::from_utf8_lossy(magic)),
        ));
    }

    let ndim = rd_i16(buf, 40);
    if !(1..=7).contains(&ndim) {
        return Err(CoreError::format(path, format!("invalid dim[0] = {ndim}")));
    }
    let mut dim = [1i16; 7];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = rd_i16(buf, 40 + 2 * (i + 1));
    }
    for i in 3..ndim as usize {
        if dim[i] > 1 {
            return Err(CoreError::format(
                path,
                format!("only 3-D volumes are supported, found dim[{}] = {}", i + 1, dim[i]),
            ));
        }
    }
    let take = (ndim as usize).min(3);
    let mut dims = [1usize; 3];
    for i in 0..take {
        if dim[i] < 1 {
            return Err(CoreError::format(path, format!("invalid dim[{}] = {}", i + 1, dim[i])));
        }
        dims[i] = dim[i] as usize;
    }
    let n: u64 = dims.iter().map(|&d| d as u64).product();
    if n == 0 || n > (1 << 31) {
        return Err(CoreError::format(path, format!("implausible voxel count {n}")));
    }

    let datatype = rd_i16(buf, 70);
    let bpv = bytes_per_voxel(datatype).ok_or_else(|| {
        CoreError::format(
            path,
            format!("unsupported datatype code {datatype}, supported: uint8 (2), int16 (4), float32 (16)"),
        )
    })?;
    let bitpix = rd_i16(buf, 72);
    if bitpix as usize != bpv * 8 {
        return Err(CoreError::format(
            path,
            format!("bitpix {bitpix} inconsistent with datatype {datatype}"),
        ));
    }

    let mut spacing = [1.0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let p = rd_f32(buf, 76 + 4 * (i + 1));
        // Non-positive or non-finite pixdim means "unknown"; fall back to 1.
        *s = if p.is_finite() && p > 0.0 { p } else { 1.0 };
    }

    let vox_offset_f = rd_f32(buf, 108);
    if !vox_offset_f.is_finite() || vox_offset_f < HEADER_SIZE as f32 {
        return Err(CoreError::format(
            path,
            format!("invalid vox_offset {vox_offset_f}, expected >= {HEADER_SIZE}"),
        ));
    }
    let vox_offset = vox_offset_f as usize;

    let scl_slope = rd_f32(buf, 112);
    let scl_inter = rd_f32(buf, 116);

    let orient = Orientation {
        qfac: {
            let q = rd_f32(buf, 76);
            if q == -1.0 {
                -1.0
            } else {
                1.0
            }
        },
        qform_code: rd_i16(buf, 252),
        sform_code: rd_i16(buf, 254),
        quatern: [rd_f32(buf, 256), rd_f32(buf, 260), rd_f32(buf, 264)],
        qoffset: [rd_f32(buf, 268), rd_f32(buf, 272), rd_f32(buf, 276)],
        srow_x: [rd_f32(buf, 280), rd_f32(buf, 284), rd_f32(buf, 288), rd_f32(buf, 292)],
        srow_y: [rd_f32(buf, 296), rd_f32(buf, 300), rd_f32(buf, 304), rd_f32(buf, 308)],
        srow_z: [rd_f32(buf, 312), rd_f32(buf, 316), rd_f32(buf, 320), rd_f32(buf, 324)],
        xyzt_units: buf[123],
    };

    Ok(Header {
        dims,
        spacing,
        datatype,
        vox_offset,
        scl_slope,
        scl_inter,
        orient,
    })
}

/// Encodes a float32 single-file header (348 bytes, no extension flag).
pub fn encode_header(dims: [usize; 3], spacing: [f32; 3], datatype: i16, orient: &Orientation) -> Vec<u8> {
    let mut b = vec![0u8; HEADER_SIZE];
    wr_i32(&mut b, 0, HEADER_SIZE as i32);
    // regular
    b[38] = b'r';
    wr_i16(&mut b, 40, 3);
    for i in 0..3 {
        wr_i16(&mut b, 42 + 2 * i, dims[i] as i16);
    }
    for i in 4..8 {
        wr_i16(&mut b, 40 + 2 * i, 1);
    }
    let bpv = bytes_per_voxel(datatype).expect("writable datatype");
    wr_i16(&mut b, 70, datatype);
    wr_i16(&mut b, 72, (bpv * 8) as i16);
    wr_f32(&mut b, 76, orient.qfac);
    for i in 0..3 {
        wr_f32(&mut b, 80 + 4 * i, spacing[i]);
    }
    for i in 4..8 {
        wr_f32(&mut b, 76 + 4 * i, 1.0);
    }
    wr_f32(&mut b, 108, WRITE_VOX_OFFSET as f32);
    wr_f32(&mut b, 112, 1.0);
    wr_f32(&mut b, 116, 0.0);
    b[123] = orient.xyzt_units;
    wr_i16(&mut b, 252, orient.qform_code);
    wr_i16(&mut b, 254, orient.sform_code);
    for i in 0..3 {
        wr_f32(&mut b, 256 + 4 * i, orient.quatern[i]);
        wr_f32(&mut b, 268 + 4 * i, orient.qoffset[i]);
    }
    for i in 0..4 {
        wr_f32(&mut b, 280 + 4 * i, orient.srow_x[i]);
        wr_f32(&mut b, 296 + 4 * i, orient.srow_y[i]);
        wr_f32(&mut b, 312 + 4 * i, orient.srow_z[i]);
    }
    b[344..348].copy_from_slice(b"n+1\0");
    b
}
