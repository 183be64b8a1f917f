//! Bit-exact file formats.
//!
//! Tensors (`.otsr`): the magic line `OTSR1`, a header line
//! `dtype=f64 dims=<d> shape=<n1,...,nd> order=row-major endian=little`,
//! then the raw little-endian doubles in row-major order. Round trips are
//! bitwise identity.
//!
//! Label maps: plain-text PGM (`P2`) with `maxval = K` and pixel values in
//! `1..=K`. A value of 0 or above maxval is a format error.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::model::{ClassConfig, LabelMap};

const TENSOR_MAGIC: &[u8] = b"OTSR1\n";

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, message: message.into() }
}

/// Serializes a finite `f64` tensor.
pub fn write_tensor(path: &Path, array: &ArrayD<f64>) -> Result<()> {
    if let Some(bad) = array.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "tensor has a non-finite value at flat index {bad}"
        )));
    }
    let shape: Vec<String> = array.shape().iter().map(|d| d.to_string()).collect();
    let mut bytes = Vec::with_capacity(64 + 8 * array.len());
    bytes.extend_from_slice(TENSOR_MAGIC);
    bytes.extend_from_slice(
        format!(
            "dtype=f64 dims={} shape={} order=row-major endian=little\n",
            array.ndim(),
            shape.join(",")
        )
        .as_bytes(),
    );
    // Row-major iteration; `iter` follows logical order for any layout.
    for v in array.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a tensor written by [`write_tensor`].
pub fn read_tensor(path: &Path) -> Result<ArrayD<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() < TENSOR_MAGIC.len() || &bytes[..TENSOR_MAGIC.len()] != TENSOR_MAGIC {
        return Err(format_err(0, "bad magic, expected OTSR1"));
    }
    let header_start = TENSOR_MAGIC.len();
    let header_end = bytes[header_start..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| header_start + p)
        .ok_or_else(|| format_err(header_start, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[header_start..header_end])
        .map_err(|_| format_err(header_start, "header is not UTF-8"))?;

    let mut dims: Option<usize> = None;
    let mut shape: Option<Vec<usize>> = None;
    for field in header.split_whitespace() {
        let Some((key, value)) = field.split_once('=') else {
            return Err(format_err(header_start, format!("malformed header field '{field}'")));
        };
        match key {
            "dtype" => {
                if value != "f64" {
                    return Err(format_err(header_start, format!("unsupported dtype '{value}'")));
                }
            }
            "dims" => {
                dims = Some(value.parse().map_err(|_| {
                    format_err(header_start, format!("bad dims '{value}'"))
                })?);
            }
            "shape" => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    value.split(',').map(str::parse).collect();
                shape = Some(parsed.map_err(|_| {
                    format_err(header_start, format!("bad shape '{value}'"))
                })?);
            }
            "order" => {
                if value != "row-major" {
                    return Err(format_err(header_start, format!("unsupported order '{value}'")));
                }
            }
            "endian" => {
                if value != "little" {
                    return Err(format_err(header_start, format!("unsupported endianness '{value}'")));
                }
            }
            other => {
                return Err(format_err(header_start, format!("unknown header key '{other}'")));
            }
        }
    }
    let dims = dims.ok_or_else(|| format_err(header_start, "header missing dims"))?;
    let shape = shape.ok_or_else(|| format_err(header_start, "header missing shape"))?;
    if shape.len() != dims {
        return Err(format_err(
            header_start,
            format!("dims={dims} but shape has {} entries", shape.len()),
        ));
    }
    let payload_start = header_end + 1;
    let expected: usize = shape.iter().product::<usize>() * 8;
    let payload = &bytes[payload_start..];
    if payload.len() != expected {
        return Err(format_err(
            payload_start + payload.len().min(expected),
            format!("payload has {} bytes, expected {expected}", payload.len()),
        ));
    }
    let mut data = Vec::with_capacity(expected / 8);
    for chunk in payload.chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| format_err(payload_start, format!("shape/payload mismatch: {e}")))
}

/// Writes a label map as plain-text PGM with `maxval = K`.
pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let (h, w, k) = (labels.height(), labels.width(), labels.k_classes());
    let mut text = format!("P2\n{w} {h}\n{k}\n");
    for i in 0..h {
        let row: Vec<String> = (0..w).map(|j| labels.label(i, j).to_string()).collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Reads a plain-text PGM label map; `K` is the file's maxval.
pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path)?;
    let mut tokens: Vec<(usize, &str)> = Vec::new();
    let text = std::str::from_utf8(&bytes).map_err(|_| format_err(0, "file is not UTF-8"))?;
    // Tokenize, dropping '#' comments to end of line.
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let content = match line.find('#') {
            Some(pos) => &line[..pos],
            None => line,
        };
        let mut cursor = 0;
        for token in content.split_whitespace() {
            let found = content[cursor..].find(token).unwrap() + cursor;
            tokens.push((offset + found, token));
            cursor = found + token.len();
        }
        offset += line.len();
    }
    let mut it = tokens.into_iter();
    let (magic_off, magic) = it.next().ok_or_else(|| format_err(0, "empty file"))?;
    if magic != "P2" {
        return Err(format_err(magic_off, format!("bad magic '{magic}', expected P2")));
    }
    let mut next_number = |name: &str| -> Result<(usize, usize)> {
        let (off, tok) = it
            .next()
            .ok_or_else(|| format_err(bytes.len(), format!("missing {name}")))?;
        let value = tok
            .parse::<usize>()
            .map_err(|_| format_err(off, format!("bad {name} '{tok}'")))?;
        Ok((off, value))
    };
    let (_, w) = next_number("width")?;
    let (_, h) = next_number("height")?;
    let (maxval_off, maxval) = next_number("maxval")?;
    if maxval < 2 {
        return Err(format_err(maxval_off, format!("maxval {maxval} below 2 classes")));
    }
    if h == 0 || w == 0 {
        return Err(format_err(maxval_off, "empty image".to_string()));
    }
    let mut values = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let (off, v) = next_number("pixel")?;
            if v < 1 || v > maxval {
                return Err(format_err(off, format!("pixel value {v} outside 1..={maxval}")));
            }
            values[(i, j)] = v;
        }
    }
    if let Some((off, tok)) = it.next() {
        return Err(format_err(off, format!("trailing token '{tok}'")));
    }
    LabelMap::new(values, ClassConfig::new(maxval)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use tempfile::tempdir;

    #[test]
    fn tensor_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.otsr");
        let a = ndarray::Array3::from_shape_fn((4, 4, 3), |(i, j, k)| {
            (i as f64 + 0.25) * (j as f64 - 1.75) + k as f64 / 3.0
        })
        .into_dyn();
        write_tensor(&path, &a).unwrap();
        let b = read_tensor(&path).unwrap();
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.otsr");
        let a = ndarray::Array1::from_vec(vec![1.0, 2.0, 3.0]).into_dyn();
        write_tensor(&path, &a).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn wrong_magic_is_a_format_error_at_offset_zero() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.otsr");
        fs::write(&path, b"NOPE1\nwhatever\n").unwrap();
        match read_tensor(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_tensor_rejected_on_write() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.otsr");
        let a = ndarray::Array1::from_vec(vec![1.0, f64::INFINITY]).into_dyn();
        assert!(write_tensor(&path, &a).is_err());
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("l.pgm");
        let labels = LabelMap::new(
            arr2(&[[1, 2, 3], [3, 2, 1]]),
            ClassConfig::new(3).unwrap(),
        )
        .unwrap();
        write_labels(&path, &labels).unwrap();
        let back = read_labels(&path).unwrap();
        assert_eq!(labels, back);
    }

    #[test]
    fn label_value_zero_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("l.pgm");
        fs::write(&path, "P2\n2 1\n3\n0 2\n").unwrap();
        assert!(matches!(read_labels(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn label_value_above_maxval_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("l.pgm");
        fs::write(&path, "P2\n2 1\n3\n1 4\n").unwrap();
        assert!(matches!(read_labels(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn pgm_comments_are_skipped() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("l.pgm");
        fs::write(&path, "P2\n# generated\n2 2\n3\n1 2 # row one\n3 3\n").unwrap();
        let labels = read_labels(&path).unwrap();
        assert_eq!(labels.label(1, 0), 3);
        assert_eq!(labels.k_classes(), 3);
    }
}
