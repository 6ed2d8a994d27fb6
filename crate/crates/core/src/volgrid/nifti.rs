//! Minimal NIfTI-1 ingestion: uncompressed single-file images with int16 or
//! float32 voxels. Anything outside that subset is rejected by name instead of
//! guessed at.

use std::fs;
use std::path::Path;

use super::Volume;
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b = [
            self.bytes[off],
            self.bytes[off + 1],
            self.bytes[off + 2],
            self.bytes[off + 3],
        ];
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

/// Reads a `.nii` file into an HU [`Volume`].
///
/// NIfTI stores `i` (x) fastest, then `j`, then `k`, which is already the
/// `(D, H, W)` row-major order used here with `D = nk`, `H = nj`, `W = ni`.
/// Spacing is taken from `pixdim[3], pixdim[2], pixdim[1]`.
pub fn import_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        return Err(Error::Unsupported("gzip-compressed NIfTI".into()));
    }
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Metadata {
            path: path.to_path_buf(),
            msg: format!(
                "file has {} bytes, shorter than a NIfTI-1 header",
                bytes.len()
            ),
        });
    }
    let size_le = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let size_be = i32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let big_endian = match (size_le, size_be) {
        (348, _) => false,
        (_, 348) => true,
        _ => {
            return Err(Error::Metadata {
                path: path.to_path_buf(),
                msg: "sizeof_hdr is not 348; not a NIfTI-1 file".into(),
            })
        }
    };
    let r = Reader {
        bytes: &bytes,
        big_endian,
    };
    match &bytes[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => return Err(Error::Unsupported("two-file (.hdr/.img) NIfTI".into())),
        other => {
            return Err(Error::Unsupported(format!(
                "NIfTI magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    }

    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Metadata {
            path: path.to_path_buf(),
            msg: format!("dim[0] = {ndim} is out of range"),
        });
    }
    let dim: Vec<i64> = (0..7).map(|i| i64::from(r.i16(42 + 2 * i))).collect();
    if dim[..ndim as usize].iter().any(|&d| d < 1) {
        return Err(Error::Metadata {
            path: path.to_path_buf(),
            msg: "non-positive image dimension".into(),
        });
    }
    if ndim > 3 && dim[3..ndim as usize].iter().any(|&d| d != 1) {
        return Err(Error::Unsupported(format!("{ndim}-dimensional image")));
    }
    let extent = |i: usize| {
        if (i as i16) < ndim {
            dim[i] as usize
        } else {
            1
        }
    };
    let (ni, nj, nk) = (extent(0), extent(1), extent(2));

    let datatype = r.i16(70);
    let width = match datatype {
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::Unsupported(format!("datatype code {other}"))),
    };

    let pix = |i: usize| f64::from(r.f32(76 + 4 * i)).abs();
    let spacing = [pix(3), pix(2), pix(1)];
    let offset = r.f32(108);
    if !(offset >= HEADER_SIZE as f32) {
        return Err(Error::Metadata {
            path: path.to_path_buf(),
            msg: format!("vox_offset {offset} points inside the header"),
        });
    }
    let offset = offset as usize;
    let n = ni * nj * nk;
    let needed = offset + n * width;
    if bytes.len() < needed {
        return Err(Error::SizeMismatch {
            expected: needed as u64,
            found: bytes.len() as u64,
        });
    }
    let payload = &bytes[offset..needed];
    let slope = r.f32(112);
    let inter = r.f32(116);
    let rescale = slope != 0.0 && (slope != 1.0 || inter != 0.0);
    let dims = [nk, nj, ni];

    let pr = Reader {
        bytes: payload,
        big_endian,
    };
    match datatype {
        DT_INT16 if !rescale => {
            let data = (0..n).map(|i| pr.i16(2 * i)).collect();
            Volume::from_hu_i16(dims, spacing, data)
        }
        DT_INT16 => {
            let data = (0..n)
                .map(|i| f32::from(pr.i16(2 * i)) * slope + inter)
                .collect();
            Volume::from_hu_f32(dims, spacing, data)
        }
        _ => {
            let scale = |v: f32| if rescale { v * slope + inter } else { v };
            let data = (0..n).map(|i| scale(pr.f32(4 * i))).collect();
            Volume::from_hu_f32(dims, spacing, data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gzip_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.nii.gz");
        fs::write(&p, [0x1f, 0x8b, 8, 0, 0, 0]).unwrap();
        match import_nifti(&p) {
            Err(Error::Unsupported(msg)) => assert!(msg.contains("gzip")),
            other => panic!("expected unsupported, got {other:?}"),
        }
    }
}
