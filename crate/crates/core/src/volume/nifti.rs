//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reader and writer.
//!
//! Only the `n+1` single-file layout is accepted. Detached `.hdr/.img`
//! pairs (`ni1`) and NIfTI-2 headers are rejected. Big-endian files are
//! read; files are always written little-endian with `vox_offset = 352`
//! and no header extensions.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{diagonal_affine, Affine, Volume, VolumeError};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIR: &[u8; 4] = b"ni1\0";
const DESCRIP_LEN: usize = 80;

/// Storage types this crate reads and writes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::I32 => 8,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self, VolumeError> {
        Ok(match code {
            2 => Datatype::U8,
            4 => Datatype::I16,
            8 => Datatype::I32,
            16 => Datatype::F32,
            64 => Datatype::F64,
            other => return Err(VolumeError::UnsupportedDatatype(other)),
        })
    }

    pub fn size(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::I32 | Datatype::F32 => 4,
            Datatype::F64 => 8,
        }
    }

    fn is_integer(self) -> bool {
        matches!(self, Datatype::U8 | Datatype::I16 | Datatype::I32)
    }

    fn range(self) -> (f64, f64) {
        match self {
            Datatype::U8 => (0.0, 255.0),
            Datatype::I16 => (i16::MIN as f64, i16::MAX as f64),
            Datatype::I32 => (i32::MIN as f64, i32::MAX as f64),
            Datatype::F32 => (f32::MIN as f64, f32::MAX as f64),
            Datatype::F64 => (f64::MIN, f64::MAX),
        }
    }
}

/// On-disk encoding for [`write_nifti_with`]. Stored values are
/// `raw * scl_slope + scl_inter`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WriteOptions {
    pub datatype: Datatype,
    pub scl_slope: f32,
    pub scl_inter: f32,
}

impl Default for WriteOptions {
    fn default() -> Self {
        Self {
            datatype: Datatype::F32,
            scl_slope: 1.0,
            scl_inter: 0.0,
        }
    }
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume, VolumeError> {
    let mut bytes = Vec::new();
    File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    read_nifti_bytes(&bytes)
}

/// Parses an in-memory NIfTI-1 file; gzip is detected from the leading
/// `1f 8b` bytes.
pub fn read_nifti_bytes(bytes: &[u8]) -> Result<Volume, VolumeError> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut raw = Vec::new();
        MultiGzDecoder::new(bytes).read_to_end(&mut raw)?;
        parse(&raw)
    } else {
        parse(bytes)
    }
}

struct Fields<'a> {
    buf: &'a [u8],
    big_endian: bool,
}

impl Fields<'_> {
    fn bytes<const N: usize>(&self, offset: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.buf[offset..offset + N]);
        if self.big_endian {
            b.reverse();
        }
        b
    }

    fn i16(&self, offset: usize) -> i16 {
        i16::from_le_bytes(self.bytes(offset))
    }

    fn i32(&self, offset: usize) -> i32 {
        i32::from_le_bytes(self.bytes(offset))
    }

    fn f32(&self, offset: usize) -> f32 {
        f32::from_le_bytes(self.bytes(offset))
    }
}

fn parse(buf: &[u8]) -> Result<Volume, VolumeError> {
    if buf.len() < HEADER_SIZE {
        return Err(VolumeError::TruncatedData {
            expected: HEADER_SIZE,
            actual: buf.len(),
        });
    }
    let size_le = i32::from_le_bytes(buf[0..4].try_into().unwrap());
    let size_be = i32::from_be_bytes(buf[0..4].try_into().unwrap());
    let big_endian = match (size_le, size_be) {
        (348, _) => false,
        (_, 348) => true,
        (540, _) | (_, 540) => return Err(VolumeError::UnsupportedVariant("NIfTI-2 header".into())),
        _ => return Err(VolumeError::BadMagic(buf[344..348].try_into().unwrap())),
    };
    let magic: [u8; 4] = buf[344..348].try_into().unwrap();
    if &magic == MAGIC_PAIR {
        return Err(VolumeError::UnsupportedVariant(
            "detached header/image pair (ni1)".into(),
        ));
    }
    if &magic != MAGIC_SINGLE {
        return Err(VolumeError::BadMagic(magic));
    }
    let h = Fields { buf, big_endian };

    let ndim = h.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(VolumeError::InvalidHeader(format!("dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 3];
    for axis in 1..=ndim as usize {
        let d = h.i16(40 + 2 * axis);
        if d < 1 {
            return Err(VolumeError::InvalidHeader(format!("dim[{axis}] = {d}")));
        }
        if axis <= 3 {
            dims[axis - 1] = d as usize;
        } else if d > 1 {
            return Err(VolumeError::UnsupportedVariant(format!(
                "{ndim}D data (dim[{axis}] = {d})"
            )));
        }
    }

    let datatype = Datatype::from_code(h.i16(70))?;
    let mut spacing = [1.0f32; 3];
    for (axis, s) in spacing.iter_mut().enumerate() {
        let p = h.f32(76 + 4 * (axis + 1)).abs();
        if p.is_finite() && p > 0.0 {
            *s = p;
        } else {
            log::warn!("pixdim[{}] = {p} is not usable, assuming 1.0", axis + 1);
        }
    }

    let vox_offset = h.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= VOX_OFFSET as f32) {
        return Err(VolumeError::InvalidHeader(format!(
            "vox_offset = {vox_offset} (single-file NIfTI needs >= 352)"
        )));
    }
    let offset = vox_offset as usize;
    let (slope, inter) = match (h.f32(112), h.f32(116)) {
        (s, i) if s != 0.0 && s.is_finite() => (s as f64, if i.is_finite() { i as f64 } else { 0.0 }),
        _ => (1.0, 0.0),
    };

    let nvox = dims[0] * dims[1] * dims[2];
    let needed = nvox * datatype.size();
    let available = buf.len().saturating_sub(offset);
    if available < needed {
        return Err(VolumeError::TruncatedData {
            expected: needed,
            actual: available,
        });
    }
    let payload = Fields {
        buf: &buf[offset..offset + needed],
        big_endian,
    };
    let mut data = Vec::with_capacity(nvox);
    for i in 0..nvox {
        let raw = match datatype {
            Datatype::U8 => payload.buf[i] as f64,
            Datatype::I16 => payload.i16(2 * i) as f64,
            Datatype::I32 => payload.i32(4 * i) as f64,
            Datatype::F32 => payload.f32(4 * i) as f64,
            Datatype::F64 => f64::from_le_bytes(payload.bytes(8 * i)),
        };
        data.push((raw * slope + inter) as f32);
    }

    let affine = read_affine(&h, spacing);
    let metadata = decode_descrip(&buf[148..148 + DESCRIP_LEN]);
    Ok(Volume::new(dims, spacing, data)?
        .with_affine(affine)
        .with_metadata(metadata))
}

fn read_affine(h: &Fields<'_>, spacing: [f32; 3]) -> Affine {
    let qform_code = h.i16(252);
    let sform_code = h.i16(254);
    if sform_code > 0 {
        let mut a = diagonal_affine([1.0; 3]);
        for (row, r) in a.iter_mut().take(3).enumerate() {
            for (col, v) in r.iter_mut().enumerate() {
                *v = h.f32(280 + 16 * row + 4 * col);
            }
        }
        return a;
    }
    if qform_code > 0 {
        let (b, c, d) = (h.f32(256) as f64, h.f32(260) as f64, h.f32(264) as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let qfac = if h.f32(76) < 0.0 { -1.0 } else { 1.0 };
        let r = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ];
        let scale = [spacing[0] as f64, spacing[1] as f64, qfac * spacing[2] as f64];
        let offsets = [h.f32(268), h.f32(272), h.f32(276)];
        let mut out = diagonal_affine([1.0; 3]);
        for row in 0..3 {
            for col in 0..3 {
                out[row][col] = (r[row][col] * scale[col]) as f32;
            }
            out[row][3] = offsets[row];
        }
        return out;
    }
    diagonal_affine(spacing)
}

/// `descrip` holds `key=value;key=value`; anything else is kept verbatim
/// under the `descrip` key.
fn decode_descrip(field: &[u8]) -> BTreeMap<String, String> {
    let end = field.iter().position(|&b| b == 0).unwrap_or(field.len());
    let text = String::from_utf8_lossy(&field[..end]).trim().to_string();
    let mut out = BTreeMap::new();
    if text.is_empty() {
        return out;
    }
    let pairs: Option<Vec<(&str, &str)>> = text.split(';').map(|p| p.split_once('=')).collect();
    match pairs {
        Some(pairs) => {
            for (k, v) in pairs {
                out.insert(k.to_string(), v.to_string());
            }
        }
        None => {
            out.insert("descrip".to_string(), text);
        }
    }
    out
}

fn encode_descrip(metadata: &BTreeMap<String, String>) -> Vec<u8> {
    if let (1, Some(text)) = (metadata.len(), metadata.get("descrip")) {
        let mut bytes = text.as_bytes().to_vec();
        bytes.truncate(DESCRIP_LEN - 1);
        return bytes;
    }
    let mut out = String::new();
    for (k, v) in metadata {
        let clean = |s: &str| !s.contains([';', '=', '\0']) && s.is_ascii();
        if !clean(k) || !clean(v) {
            log::warn!("metadata entry {k:?} cannot be stored in the NIfTI descrip field, dropped");
            continue;
        }
        let entry = format!("{}{k}={v}", if out.is_empty() { "" } else { ";" });
        if out.len() + entry.len() > DESCRIP_LEN - 1 {
            log::warn!("metadata does not fit in 79 bytes, dropping {k:?} and later keys");
            break;
        }
        out.push_str(&entry);
    }
    out.into_bytes()
}

/// Writes `v` as float32 NIfTI-1; a `.gz` extension selects gzip.
pub fn write_nifti(v: &Volume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    write_nifti_with(v, path, WriteOptions::default())
}

pub fn write_nifti_with(
    v: &Volume,
    path: impl AsRef<Path>,
    opts: WriteOptions,
) -> Result<(), VolumeError> {
    let bytes = encode(v, opts)?;
    let path = path.as_ref();
    let file = BufWriter::new(File::create(path)?);
    if path.extension().is_some_and(|e| e == "gz") {
        let mut gz = GzEncoder::new(file, Compression::default());
        gz.write_all(&bytes)?;
        gz.finish()?.flush()?;
    } else {
        let mut file = file;
        file.write_all(&bytes)?;
        file.flush()?;
    }
    Ok(())
}

fn put_i16(buf: &mut [u8], offset: usize, v: i16) {
    buf[offset..offset + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], offset: usize, v: f32) {
    buf[offset..offset + 4].copy_from_slice(&v.to_le_bytes());
}

/// Serialized little-endian file image of `v`.
pub(crate) fn encode(v: &Volume, opts: WriteOptions) -> Result<Vec<u8>, VolumeError> {
    if !(opts.scl_slope.is_finite() && opts.scl_slope != 0.0 && opts.scl_inter.is_finite()) {
        return Err(VolumeError::InvalidHeader(format!(
            "scl_slope {} / scl_inter {} not usable",
            opts.scl_slope, opts.scl_inter
        )));
    }
    let dims = v.dims();
    if dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(VolumeError::InvalidHeader(format!("dims {dims:?} exceed the NIfTI-1 limit")));
    }
    let dt = opts.datatype;
    let mut buf = vec![0u8; VOX_OFFSET + v.len() * dt.size()];
    buf[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    buf[38] = b'r';
    put_i16(&mut buf, 40, 3);
    for (axis, &d) in dims.iter().enumerate() {
        put_i16(&mut buf, 42 + 2 * axis, d as i16);
    }
    for axis in 4..8 {
        put_i16(&mut buf, 40 + 2 * axis, 1);
    }
    put_i16(&mut buf, 70, dt.code());
    put_i16(&mut buf, 72, (dt.size() * 8) as i16);
    put_f32(&mut buf, 76, 1.0);
    for (axis, &s) in v.spacing().iter().enumerate() {
        put_f32(&mut buf, 80 + 4 * axis, s);
    }
    put_f32(&mut buf, 108, VOX_OFFSET as f32);
    put_f32(&mut buf, 112, opts.scl_slope);
    put_f32(&mut buf, 116, opts.scl_inter);
    // mm + seconds
    buf[123] = 2 | 8;
    let descrip = encode_descrip(v.metadata());
    buf[148..148 + descrip.len()].copy_from_slice(&descrip);
    put_i16(&mut buf, 254, 1);
    for (row, r) in v.affine().iter().take(3).enumerate() {
        for (col, &a) in r.iter().enumerate() {
            put_f32(&mut buf, 280 + 16 * row + 4 * col, a);
        }
    }
    buf[344..348].copy_from_slice(MAGIC_SINGLE);

    let slope = opts.scl_slope as f64;
    let inter = opts.scl_inter as f64;
    let (lo, hi) = dt.range();
    let payload = &mut buf[VOX_OFFSET..];
    for (i, &value) in v.data().iter().enumerate() {
        let mut raw = (value as f64 - inter) / slope;
        if dt.is_integer() {
            raw = raw.round();
        }
        let raw = raw.clamp(lo, hi);
        match dt {
            Datatype::U8 => payload[i] = raw as u8,
            Datatype::I16 => payload[2 * i..2 * i + 2].copy_from_slice(&(raw as i16).to_le_bytes()),
            Datatype::I32 => payload[4 * i..4 * i + 4].copy_from_slice(&(raw as i32).to_le_bytes()),
            Datatype::F32 => payload[4 * i..4 * i + 4].copy_from_slice(&(raw as f32).to_le_bytes()),
            Datatype::F64 => payload[8 * i..8 * i + 8].copy_from_slice(&raw.to_le_bytes()),
        }
    }
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Volume {
        Volume::new([3, 2, 2], [1.0, 2.0, 3.5], (0..12).map(|i| i as f32 * 1.5 - 4.0).collect())
            .unwrap()
    }

    #[test]
    fn constant_4cube_file_is_352_plus_payload() {
        let v = Volume::from_data([4, 4, 4], vec![7.0; 64]).unwrap();
        let bytes = encode(&v, WriteOptions::default()).unwrap();
        assert_eq!(bytes.len(), 352 + 4 * 64);
    }

    #[test]
    fn roundtrip_in_memory() {
        let v = small();
        let back = read_nifti_bytes(&encode(&v, WriteOptions::default()).unwrap()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn detached_pair_is_rejected() {
        let mut bytes = encode(&small(), WriteOptions::default()).unwrap();
        bytes[344..348].copy_from_slice(b"ni1\0");
        assert!(matches!(
            read_nifti_bytes(&bytes),
            Err(VolumeError::UnsupportedVariant(_))
        ));
    }

    #[test]
    fn garbage_magic_is_bad_magic() {
        let mut bytes = encode(&small(), WriteOptions::default()).unwrap();
        bytes[344..348].copy_from_slice(b"abcd");
        assert!(matches!(read_nifti_bytes(&bytes), Err(VolumeError::BadMagic(m)) if &m == b"abcd"));
        let mut bytes = encode(&small(), WriteOptions::default()).unwrap();
        bytes[0..4].copy_from_slice(&12i32.to_le_bytes());
        assert!(matches!(read_nifti_bytes(&bytes), Err(VolumeError::BadMagic(_))));
    }

    #[test]
    fn nifti2_is_rejected() {
        let mut bytes = encode(&small(), WriteOptions::default()).unwrap();
        bytes[0..4].copy_from_slice(&540i32.to_le_bytes());
        assert!(matches!(
            read_nifti_bytes(&bytes),
            Err(VolumeError::UnsupportedVariant(_))
        ));
    }

    #[test]
    fn unsupported_datatype() {
        let mut bytes = encode(&small(), WriteOptions::default()).unwrap();
        bytes[70..72].copy_from_slice(&512i16.to_le_bytes());
        assert!(matches!(
            read_nifti_bytes(&bytes),
            Err(VolumeError::UnsupportedDatatype(512))
        ));
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode(&small(), WriteOptions::default()).unwrap();
        let err = read_nifti_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, VolumeError::TruncatedData { expected: 48, actual: 45 }));
        assert!(matches!(
            read_nifti_bytes(&bytes[..100]),
            Err(VolumeError::TruncatedData { .. })
        ));
    }

    #[test]
    fn four_d_with_single_frame_is_accepted() {
        let mut bytes = encode(&small(), WriteOptions::default()).unwrap();
        put_i16(&mut bytes, 40, 4);
        assert_eq!(read_nifti_bytes(&bytes).unwrap(), small());
        put_i16(&mut bytes, 48, 5);
        assert!(matches!(
            read_nifti_bytes(&bytes),
            Err(VolumeError::UnsupportedVariant(_))
        ));
    }

    #[test]
    fn big_endian_file_is_read() {
        let v = small();
        let le = encode(&v, WriteOptions { datatype: Datatype::I16, ..Default::default() }).unwrap();
        let mut be = le.clone();
        let swap = |b: &mut [u8], off: usize, n: usize| b[off..off + n].reverse();
        swap(&mut be, 0, 4);
        for i in 0..8 {
            swap(&mut be, 40 + 2 * i, 2);
        }
        swap(&mut be, 70, 2);
        swap(&mut be, 72, 2);
        for off in (76..120).step_by(4) {
            swap(&mut be, off, 4);
        }
        swap(&mut be, 252, 2);
        swap(&mut be, 254, 2);
        for off in (280..328).step_by(4) {
            swap(&mut be, off, 4);
        }
        for i in 0..v.len() {
            swap(&mut be, 352 + 2 * i, 2);
        }
        assert_eq!(read_nifti_bytes(&be).unwrap(), read_nifti_bytes(&le).unwrap());
    }

    #[test]
    fn qform_affine_is_used_without_sform() {
        let mut bytes = encode(&small(), WriteOptions::default()).unwrap();
        put_i16(&mut bytes, 254, 0);
        put_i16(&mut bytes, 252, 1);
        // 180 degree rotation about z: quaternion (0, 0, 0, 1)
        put_f32(&mut bytes, 264, 1.0);
        put_f32(&mut bytes, 268, 5.0);
        let a = *read_nifti_bytes(&bytes).unwrap().affine();
        assert_eq!(a[0], [-1.0, 0.0, 0.0, 5.0]);
        assert_eq!(a[1], [0.0, -2.0, 0.0, 0.0]);
        assert_eq!(a[2], [0.0, 0.0, 3.5, 0.0]);
    }

    #[test]
    fn metadata_roundtrips_through_descrip() {
        let mut meta = BTreeMap::new();
        meta.insert("scanner".to_string(), "phantom".to_string());
        meta.insert("tr".to_string(), "2000".to_string());
        let v = small().with_metadata(meta.clone());
        let back = read_nifti_bytes(&encode(&v, WriteOptions::default()).unwrap()).unwrap();
        assert_eq!(back.metadata(), &meta);
    }

    #[test]
    fn free_text_descrip_is_preserved() {
        let mut meta = BTreeMap::new();
        meta.insert("descrip".to_string(), "FSL5.0".to_string());
        let v = small().with_metadata(meta.clone());
        let back = read_nifti_bytes(&encode(&v, WriteOptions::default()).unwrap()).unwrap();
        assert_eq!(back.metadata(), &meta);
    }

    #[test]
    fn zero_slope_means_unscaled() {
        let mut bytes = encode(&small(), WriteOptions::default()).unwrap();
        put_f32(&mut bytes, 112, 0.0);
        put_f32(&mut bytes, 116, 100.0);
        assert_eq!(read_nifti_bytes(&bytes).unwrap().data(), small().data());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = write_nifti(&small(), "/nonexistent-dir/x/vol.nii").unwrap_err();
        assert!(matches!(err, VolumeError::Io(_)));
    }
}
