//! `vectors.bin`: one plain-text header line followed by packed
//! little-endian `f32` rows.
//!
//! ```text
//! preqvec 1 dim=<dimension> count=<rows>\n
//! <dimension * rows * 4 bytes>
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &str = "preqvec 1";

pub fn write_vectors(path: &Path, dim: usize, flat: &[f32]) -> Result<()> {
    assert!(
        (dim == 0 && flat.is_empty()) || (dim > 0 && flat.len().is_multiple_of(dim)),
        "flat buffer length must be a multiple of the dimension"
    );
    let count = flat.len().checked_div(dim).unwrap_or(0);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "{MAGIC} dim={dim} count={count}").map_err(io)?;
    for v in flat {
        out.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_vectors(path: &Path) -> Result<(usize, Vec<f32>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let corrupt = |message: String| Error::CorruptIndex {
        path: path.to_path_buf(),
        message,
    };

    let newline = bytes
        .iter()
        .take(256)
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("missing header".into()))?;
    let header = std::str::from_utf8(&bytes[..newline]).map_err(|_| corrupt("header is not text".into()))?;
    let rest = header
        .strip_prefix(MAGIC)
        .ok_or_else(|| corrupt(format!("unexpected header {header:?}")))?;
    let mut dim = None;
    let mut count = None;
    for field in rest.split_whitespace() {
        match field.split_once('=') {
            Some(("dim", v)) => dim = v.parse::<usize>().ok(),
            Some(("count", v)) => count = v.parse::<usize>().ok(),
            _ => return Err(corrupt(format!("unexpected header field {field:?}"))),
        }
    }
    let (Some(dim), Some(count)) = (dim, count) else {
        return Err(corrupt("header lacks dim or count".into()));
    };
    if dim == 0 && count > 0 {
        return Err(corrupt("zero dimension with non-zero count".into()));
    }

    let body = &bytes[newline + 1..];
    let expected = dim
        .checked_mul(count)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| corrupt("header sizes overflow".into()))?;
    if body.len() != expected {
        return Err(corrupt(format!(
            "expected {expected} bytes of vector data for {count}x{dim}, found {}",
            body.len()
        )));
    }
    let flat = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dim, flat))
}
