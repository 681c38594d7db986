//! Minimal binary container for 3D images and label maps.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                           |
//! |--------|------|---------------------------------|
//! | 0      | 4    | magic `MVOL`                    |
//! | 4      | 2    | version (`1`)                   |
//! | 6      | 2    | dtype: 0 = f32 image, 1 = u8 label |
//! | 8      | 12   | D, H, W as u32                  |
//! | 20     | 12   | spacing (sz, sy, sx) as f32     |
//! | 32     | ...  | payload, x fastest              |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelMap, Spacing, Volume};

pub const MAGIC: &[u8; 4] = b"MVOL";
pub const VERSION: u16 = 1;
/// Magic plus the fixed header fields.
pub const HEADER_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum Dtype {
    F32 = 0,
    U8 = 1,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

/// Decoded contents of a volume file.
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeFile {
    Image(Volume),
    Labels { dims: Dims, spacing: Spacing, data: Vec<u8> },
}

impl VolumeFile {
    pub fn dims(&self) -> Dims {
        match self {
            VolumeFile::Image(v) => v.dims(),
            VolumeFile::Labels { dims, .. } => *dims,
        }
    }
}

fn header(dtype: Dtype, dims: Dims, spacing: Spacing, payload: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dtype as u16).to_le_bytes());
    for v in dims.as_array() {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for s in spacing.0 {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn encode_image(v: &Volume) -> Vec<u8> {
    let mut out = header(Dtype::F32, v.dims(), v.spacing(), v.data().len() * 4);
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn encode_labels(y: &LabelMap, spacing: Spacing) -> Vec<u8> {
    let mut out = header(Dtype::U8, y.dims(), spacing, y.data().len());
    out.extend_from_slice(y.data());
    out
}

/// Parse a volume file held in memory; `path` is used for diagnostics only.
pub fn decode(bytes: &[u8], path: &Path) -> Result<VolumeFile> {
    let err = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(err(bytes.len(), format!("header truncated: {} of {HEADER_LEN} bytes", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(err(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u16_at(4);
    if version != VERSION {
        return Err(err(4, format!("unsupported version {version}")));
    }
    let dtype = match u16_at(6) {
        0 => Dtype::F32,
        1 => Dtype::U8,
        other => return Err(err(6, format!("unknown dtype code {other}"))),
    };
    let dims = Dims::new(u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    if !dims.is_positive() {
        return Err(err(8, format!("non-positive dims {:?}", dims.as_array())));
    }
    let spacing = Spacing([0, 1, 2].map(|i| f32::from_bits(u32_at(20 + 4 * i))));
    if !spacing.is_valid() {
        return Err(err(20, format!("invalid spacing {:?}", spacing.0)));
    }
    let want = dims.voxels() * dtype.size();
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != want {
        return Err(err(
            HEADER_LEN + payload.len().min(want),
            format!("payload is {} bytes, expected {want}", payload.len()),
        ));
    }
    match dtype {
        Dtype::F32 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let v = Volume::new(dims, spacing, data).map_err(|e| err(HEADER_LEN, e.to_string()))?;
            Ok(VolumeFile::Image(v))
        }
        Dtype::U8 => Ok(VolumeFile::Labels {
            dims,
            spacing,
            data: payload.to_vec(),
        }),
    }
}

pub fn read_volume(path: &Path) -> Result<VolumeFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write_image(path: &Path, v: &Volume) -> Result<()> {
    fs::write(path, encode_image(v)).map_err(|e| Error::io(path, e))
}

pub fn write_labels(path: &Path, y: &LabelMap, spacing: Spacing) -> Result<()> {
    fs::write(path, encode_labels(y, spacing)).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Volume> {
    match read_volume(path)? {
        VolumeFile::Image(v) => Ok(v),
        VolumeFile::Labels { .. } => Err(Error::Format {
            path: path.to_path_buf(),
            offset: 6,
            message: "expected an f32 image, found a u8 label map".into(),
        }),
    }
}

pub fn read_labels(path: &Path, num_classes: usize) -> Result<LabelMap> {
    match read_volume(path)? {
        VolumeFile::Labels { dims, data, .. } => LabelMap::new(dims, num_classes, data).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: HEADER_LEN as u64,
            message: e.to_string(),
        }),
        VolumeFile::Image(_) => Err(Error::Format {
            path: path.to_path_buf(),
            offset: 6,
            message: "expected a u8 label map, found an f32 image".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn two_cubed_image_is_64_bytes() {
        let v = Volume::new(Dims::cube(2), Spacing([1.0, 0.5, 0.5]), (0..8).map(|i| i as f32).collect()).unwrap();
        let bytes = encode_image(&v);
        assert_eq!(bytes.len(), 32 + 32);
        assert_eq!(&bytes[..4], b"MVOL");
        assert_eq!(decode(&bytes, p()).unwrap(), VolumeFile::Image(v));
    }

    #[test]
    fn truncation_and_corruption_are_rejected() {
        let v = Volume::filled(Dims::cube(2), Spacing::default(), 1.5);
        let bytes = encode_image(&v);
        let short = &bytes[..bytes.len() - 1];
        match decode(short, p()) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 63),
            other => panic!("unexpected {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, p()), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[6] = 9;
        assert!(matches!(decode(&bad, p()), Err(Error::Format { offset: 6, .. })));
        assert!(decode(&bytes[..10], p()).is_err());
    }

    #[test]
    fn label_file_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.mvol");
        let y = LabelMap::new(Dims::new(1, 2, 3), 4, vec![0, 1, 2, 3, 2, 1]).unwrap();
        write_labels(&path, &y, Spacing::default()).unwrap();
        assert_eq!(read_labels(&path, 4).unwrap(), y);
        assert!(read_labels(&path, 3).is_err());
        assert!(read_image(&path).is_err());
    }

    proptest! {
        #[test]
        fn image_round_trip_is_bit_exact(
            (d, data) in (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(a, b, c)| {
                (Just(Dims::new(a, b, c)), prop::collection::vec(-1e6f32..1e6, a * b * c))
            }),
            s in prop::array::uniform3(0.1f32..4.0),
        ) {
            let v = Volume::new(d, Spacing(s), data).unwrap();
            let bytes = encode_image(&v);
            prop_assert_eq!(bytes.len(), HEADER_LEN + 4 * d.voxels());
            let back = decode(&bytes, p()).unwrap();
            prop_assert_eq!(encode_image(match &back { VolumeFile::Image(v) => v, _ => unreachable!() }), bytes);
        }
    }
}
