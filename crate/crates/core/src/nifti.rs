//! Reader and writer for the single-file NIfTI-1 subset used on disk.
//!
//! Only signed 16-bit integer (code 4) and 32-bit float (code 16) payloads are
//! accepted. The writer always emits little-endian float32 with a diagonal
//! sform built from the voxel spacing and origin. Byte order on read is
//! detected from `sizeof_hdr`.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::volume::{ChannelLabel, Volume};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const SINGLE_FILE_OFFSET: usize = 352;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
pub const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";
pub const MAGIC_PAIR: [u8; 4] = *b"ni1\0";

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const SROW_Y: usize = 296;
    pub const SROW_Z: usize = 312;
    pub const MAGIC: usize = 344;
}

/// The header fields this crate reads and writes. Other header bytes are
/// written as zeros and ignored on read.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub dim: [i16; 8],
    pub datatype_code: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub qform_code: i16,
    pub sform_code: i16,
    pub qoffset: [f32; 3],
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
    pub magic: [u8; 4],
    /// Byte order the header was stored in.
    pub big_endian: bool,
}

impl NiftiHeader {
    /// Canonical float32 little-endian header for a `[z, y, x]` grid.
    pub fn for_volume(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Self {
        let [nz, ny, nx] = dims;
        let [sz, sy, sx] = spacing.map(|s| s as f32);
        let [oz, oy, ox] = origin.map(|o| o as f32);
        NiftiHeader {
            sizeof_hdr: HEADER_SIZE as i32,
            dim: [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1],
            datatype_code: DT_FLOAT32,
            bitpix: 32,
            pixdim: [1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0],
            vox_offset: SINGLE_FILE_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            // millimetres
            xyzt_units: 2,
            qform_code: 0,
            sform_code: 1,
            qoffset: [0.0; 3],
            srow_x: [sx, 0.0, 0.0, ox],
            srow_y: [0.0, sy, 0.0, oy],
            srow_z: [0.0, 0.0, sz, oz],
            magic: MAGIC_SINGLE,
            big_endian: false,
        }
    }

    /// Spatial extents in `[z, y, x]` order.
    pub fn dims_zyx(&self) -> [usize; 3] {
        [self.dim[3] as usize, self.dim[2] as usize, self.dim[1] as usize]
    }

    /// Voxel spacing (mm) in `[z, y, x]` order.
    pub fn spacing_zyx(&self) -> [f64; 3] {
        [self.pixdim[3] as f64, self.pixdim[2] as f64, self.pixdim[1] as f64]
    }

    /// Physical position of voxel (0,0,0), `[z, y, x]`. Taken from the sform
    /// when present, else from the qform offsets.
    pub fn origin_zyx(&self) -> [f64; 3] {
        if self.sform_code >= 1 {
            [self.srow_z[3] as f64, self.srow_y[3] as f64, self.srow_x[3] as f64]
        } else if self.qform_code >= 1 {
            [self.qoffset[2] as f64, self.qoffset[1] as f64, self.qoffset[0] as f64]
        } else {
            [0.0; 3]
        }
    }

    pub fn element_size(&self) -> usize {
        match self.datatype_code {
            DT_INT16 => 2,
            _ => 4,
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.dims_zyx().iter().product()
    }

    fn scaling(&self) -> (f64, f64) {
        let slope = if self.scl_slope == 0.0 { 1.0 } else { self.scl_slope as f64 };
        (slope, self.scl_inter as f64)
    }

    /// Serializes to 348 bytes in the byte order recorded in `big_endian`.
    pub fn to_bytes(&self) -> [u8; HEADER_SIZE] {
        if self.big_endian {
            self.encode::<BigEndian>()
        } else {
            self.encode::<LittleEndian>()
        }
    }

    fn encode<E: ByteOrder>(&self) -> [u8; HEADER_SIZE] {
        use offsets::*;
        let mut b = [0u8; HEADER_SIZE];
        E::write_i32(&mut b[SIZEOF_HDR..], self.sizeof_hdr);
        for (i, d) in self.dim.iter().enumerate() {
            E::write_i16(&mut b[DIM + 2 * i..], *d);
        }
        E::write_i16(&mut b[DATATYPE..], self.datatype_code);
        E::write_i16(&mut b[BITPIX..], self.bitpix);
        for (i, p) in self.pixdim.iter().enumerate() {
            E::write_f32(&mut b[PIXDIM + 4 * i..], *p);
        }
        E::write_f32(&mut b[VOX_OFFSET..], self.vox_offset);
        E::write_f32(&mut b[SCL_SLOPE..], self.scl_slope);
        E::write_f32(&mut b[SCL_INTER..], self.scl_inter);
        b[XYZT_UNITS] = self.xyzt_units;
        E::write_i16(&mut b[QFORM_CODE..], self.qform_code);
        E::write_i16(&mut b[SFORM_CODE..], self.sform_code);
        for i in 0..3 {
            E::write_f32(&mut b[QOFFSET_X + 4 * i..], self.qoffset[i]);
        }
        for (base, row) in [(SROW_X, &self.srow_x), (SROW_Y, &self.srow_y), (SROW_Z, &self.srow_z)] {
            for (i, v) in row.iter().enumerate() {
                E::write_f32(&mut b[base + 4 * i..], *v);
            }
        }
        b[MAGIC..MAGIC + 4].copy_from_slice(&self.magic);
        b
    }
}

fn decode<E: ByteOrder>(b: &[u8], big_endian: bool) -> NiftiHeader {
    use offsets::*;
    let f4 = |base: usize| -> [f32; 4] { [0, 1, 2, 3].map(|i| E::read_f32(&b[base + 4 * i..])) };
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&b[MAGIC..MAGIC + 4]);
    NiftiHeader {
        sizeof_hdr: E::read_i32(&b[SIZEOF_HDR..]),
        dim: [0, 1, 2, 3, 4, 5, 6, 7].map(|i| E::read_i16(&b[DIM + 2 * i..])),
        datatype_code: E::read_i16(&b[DATATYPE..]),
        bitpix: E::read_i16(&b[BITPIX..]),
        pixdim: [0, 1, 2, 3, 4, 5, 6, 7].map(|i| E::read_f32(&b[PIXDIM + 4 * i..])),
        vox_offset: E::read_f32(&b[VOX_OFFSET..]),
        scl_slope: E::read_f32(&b[SCL_SLOPE..]),
        scl_inter: E::read_f32(&b[SCL_INTER..]),
        xyzt_units: b[XYZT_UNITS],
        qform_code: E::read_i16(&b[QFORM_CODE..]),
        sform_code: E::read_i16(&b[SFORM_CODE..]),
        qoffset: [0, 1, 2].map(|i| E::read_f32(&b[QOFFSET_X + 4 * i..])),
        srow_x: f4(SROW_X),
        srow_y: f4(SROW_Y),
        srow_z: f4(SROW_Z),
        magic,
        big_endian,
    }
}

/// Parses and validates a 348-byte header.
pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() != HEADER_SIZE {
        return Err(Error::BadHeaderLength(bytes.len()));
    }
    let header = if LittleEndian::read_i32(bytes) == HEADER_SIZE as i32 {
        decode::<LittleEndian>(bytes, false)
    } else if BigEndian::read_i32(bytes) == HEADER_SIZE as i32 {
        decode::<BigEndian>(bytes, true)
    } else {
        return Err(Error::BadSizeofHdr(LittleEndian::read_i32(bytes)));
    };
    if header.magic != MAGIC_SINGLE && header.magic != MAGIC_PAIR {
        return Err(Error::BadMagic(header.magic));
    }
    if header.datatype_code != DT_INT16 && header.datatype_code != DT_FLOAT32 {
        return Err(Error::UnsupportedDatatype(header.datatype_code));
    }
    let rank = header.dim[0];
    if !(3..=4).contains(&rank) {
        return Err(Error::BadDims(format!("dim[0] = {rank}")));
    }
    if let Some(bad) = header.dim[1..=rank as usize].iter().find(|&&d| d < 1) {
        return Err(Error::BadDims(format!("extent {bad} in {:?}", header.dim)));
    }
    if rank == 4 && header.dim[4] != 1 {
        return Err(Error::BadDims(format!("{} time points; only one is supported", header.dim[4])));
    }
    if header.magic == MAGIC_SINGLE && !(header.vox_offset >= SINGLE_FILE_OFFSET as f32) {
        return Err(Error::BadVoxOffset(header.vox_offset));
    }
    Ok(header)
}

/// Decodes a payload (already positioned at the first voxel) into reals,
/// applying the intensity scaling.
pub fn decode_payload(header: &NiftiHeader, payload: &[u8]) -> Result<Vec<f64>> {
    let n = header.voxel_count();
    let need = n * header.element_size();
    if payload.len() < need {
        return Err(Error::TruncatedData {
            expected: need,
            found: payload.len(),
        });
    }
    let (slope, inter) = header.scaling();
    let raw = &payload[..need];
    let values = match (header.datatype_code, header.big_endian) {
        (DT_INT16, false) => raw.chunks_exact(2).map(|c| LittleEndian::read_i16(c) as f64).collect::<Vec<_>>(),
        (DT_INT16, true) => raw.chunks_exact(2).map(|c| BigEndian::read_i16(c) as f64).collect(),
        (_, false) => raw.chunks_exact(4).map(|c| LittleEndian::read_f32(c) as f64).collect(),
        (_, true) => raw.chunks_exact(4).map(|c| BigEndian::read_f32(c) as f64).collect(),
    };
    Ok(values.into_iter().map(|v| v * slope + inter).collect())
}

/// Reads a single-file `.nii` into a one-channel volume.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    read_nifti_as(path, ChannelLabel::Generic)
}

pub fn read_nifti_as(path: impl AsRef<Path>, label: ChannelLabel) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_SIZE {
        return Err(Error::TruncatedData {
            expected: HEADER_SIZE,
            found: bytes.len(),
        });
    }
    let header = parse_header(&bytes[..HEADER_SIZE])?;
    let data = if header.magic == MAGIC_PAIR {
        let img_path = path.with_extension("img");
        let img = fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
        let start = (header.vox_offset.max(0.0) as usize).min(img.len());
        decode_payload(&header, &img[start..])?
    } else {
        let start = (header.vox_offset as usize).min(bytes.len());
        decode_payload(&header, &bytes[start..])?
    };
    Volume::new(data, header.dims_zyx(), header.spacing_zyx(), header.origin_zyx(), vec![label])
}

/// Encodes a single-channel volume as a complete `.nii` byte image.
pub fn encode_nifti(volume: &Volume) -> Result<Vec<u8>> {
    if volume.channels() != 1 {
        return Err(Error::MultiChannel(volume.channels()));
    }
    if let Some(d) = volume.dims().iter().find(|&&d| d > i16::MAX as usize) {
        return Err(Error::BadDims(format!("extent {d} exceeds the NIfTI-1 limit")));
    }
    let header = NiftiHeader::for_volume(volume.dims(), volume.spacing(), volume.origin());
    let mut out = Vec::with_capacity(SINGLE_FILE_OFFSET + 4 * volume.voxels());
    out.extend_from_slice(&header.to_bytes());
    out.extend_from_slice(&[0u8; SINGLE_FILE_OFFSET - HEADER_SIZE]);
    let mut buf = [0u8; 4];
    for &v in volume.data() {
        LittleEndian::write_f32(&mut buf, v as f32);
        out.extend_from_slice(&buf);
    }
    Ok(out)
}

/// Writes a single-channel volume as little-endian float32 `.nii`.
pub fn write_nifti(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_nifti(volume)?;
    crate::fsutil::write_atomic(path.as_ref(), &bytes)
}
