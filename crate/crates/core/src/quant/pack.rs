//! Two signed 4-bit codes per byte: the even element in the low nibble.

use crate::error::{Error, Result};

/// Packs codes in `[−8, 7]`; an odd-length input is padded with a zero code.
pub fn pack_int4(codes: &[i8]) -> Result<Vec<u8>> {
    if let Some(&c) = codes.iter().find(|&&c| !(-8..=7).contains(&c)) {
        return Err(Error::CodeRange {
            code: c as i32,
            lo: -8,
            hi: 7,
        });
    }
    Ok(codes
        .chunks(2)
        .map(|pair| {
            let lo = pair[0] as u8 & 15;
            let hi = pair.get(1).map_or(0, |&c| c as u8 & 15);
            (hi << 4) | lo
        })
        .collect())
}

#[inline]
fn sign_extend(nibble: u8) -> i8 {
    ((nibble << 4) as i8) >> 4
}

/// Unpacks the first `len` codes.
pub fn unpack_int4(packed: &[u8], len: usize) -> Vec<i8> {
    let mut out = vec![0i8; len];
    unpack_int4_into(packed, &mut out);
    out
}

/// Unpacks `out.len()` codes into `out`.
#[inline]
pub fn unpack_int4_into(packed: &[u8], out: &mut [i8]) {
    for (i, o) in out.iter_mut().enumerate() {
        let byte = packed[i / 2];
        *o = sign_extend(if i % 2 == 0 { byte & 15 } else { byte >> 4 });
    }
}
