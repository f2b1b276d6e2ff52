//! Patch-bag files: magic `GHB1`, u32 patch count, u32 feature width, then
//! the features as row-major little-endian float32.

use std::path::Path;

use ghanet_core::Tensor;

use crate::bytes::{put_f32s, put_u32, Reader};
use crate::error::{Error, FormatError, Result};

pub const MAGIC: &str = "GHB1";

/// Values are stored as float32; anything not exactly representable is
/// rounded.
pub fn encode_bag(features: &Tensor) -> Result<Vec<u8>> {
    if features.shape().len() != 2 {
        return Err(Error::Invalid(format!(
            "a bag is a matrix, got shape {:?}",
            features.shape()
        )));
    }
    let (rows, cols) = (features.rows(), features.cols());
    let too_big = |n: usize| u32::try_from(n).is_err();
    if too_big(rows) || too_big(cols) {
        return Err(Error::Invalid(format!("bag of {rows} x {cols} does not fit the header")));
    }
    if features.data().iter().any(|&v| !(v as f32).is_finite()) {
        return Err(Error::Invalid("bag has values that are not finite as float32".into()));
    }
    let mut out = Vec::with_capacity(12 + 4 * features.numel());
    out.extend_from_slice(MAGIC.as_bytes());
    put_u32(&mut out, rows as u32);
    put_u32(&mut out, cols as u32);
    put_f32s(&mut out, features.data());
    Ok(out)
}

pub fn decode_bag(bytes: &[u8]) -> Result<Tensor, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let rows = r.u32("patch count")? as usize;
    if rows == 0 {
        return Err(FormatError::Invalid {
            offset: 4,
            what: "patch count",
            message: "a bag needs at least one patch".into(),
        });
    }
    let cols = r.u32("feature width")? as usize;
    if cols == 0 {
        return Err(FormatError::Invalid {
            offset: 8,
            what: "feature width",
            message: "features need at least one dimension".into(),
        });
    }
    let n = rows.checked_mul(cols).ok_or(FormatError::Invalid {
        offset: 4,
        what: "bag shape",
        message: format!("{rows} x {cols} overflows"),
    })?;
    let data = r.f32s(n, "patch features")?;
    r.finish()?;
    Ok(Tensor::matrix(rows, cols, data).expect("length matches header"))
}

pub fn read_bag(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bag(&bytes).map_err(|e| Error::format(path, e))
}

pub fn write_bag(path: &Path, features: &Tensor) -> Result<()> {
    std::fs::write(path, encode_bag(features)?).map_err(|e| Error::io(path, e))
}
