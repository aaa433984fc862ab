//! Feature file format.
//!
//! Layout, all integers little-endian:
//! `"MMVC"` | version u32 | rows u32 | cols u32 | id length u16 | id UTF-8 |
//! frame indices rows×u32 | payload rows×cols f32 row-major.

use std::path::Path;

use capcore::vision::VisualFeatureSet;

use crate::bytes::{Reader, Writer};
use crate::error::FormatError;

pub const FEATURE_MAGIC: &[u8; 4] = b"MMVC";
pub const FEATURE_VERSION: u32 = 1;

pub fn encode_features(set: &VisualFeatureSet) -> Result<Vec<u8>, FormatError> {
    let mut w = Writer::default();
    w.bytes(FEATURE_MAGIC);
    w.u32(FEATURE_VERSION);
    w.u32(len32(set.rows())?);
    w.u32(len32(set.cols())?);
    w.str16(&set.video_id)?;
    for &i in set.frame_indices() {
        w.u32(i);
    }
    for &v in set.features() {
        w.f32(v);
    }
    Ok(w.finish())
}

pub fn decode_features(bytes: &[u8]) -> Result<VisualFeatureSet, FormatError> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != FEATURE_MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(FormatError::Version { found: version, expected: FEATURE_VERSION });
    }
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let video_id = r.str16()?;
    let indices = (0..rows).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    let payload = rows.checked_mul(cols).ok_or(FormatError::Truncated)?;
    if r.remaining() < payload * 4 {
        return Err(FormatError::Truncated);
    }
    let values = (0..payload).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
    r.expect_end()?;
    VisualFeatureSet::new(video_id, cols, values, indices, None).map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn write_features(set: &VisualFeatureSet, path: &Path) -> Result<(), FormatError> {
    crate::bytes::write_atomic(path, &encode_features(set)?)
}

pub fn read_features(path: &Path) -> Result<VisualFeatureSet, FormatError> {
    decode_features(&std::fs::read(path)?)
}

fn len32(n: usize) -> Result<u32, FormatError> {
    u32::try_from(n).map_err(|_| FormatError::Invalid(format!("extent {n} exceeds u32")))
}
