//! Single-file network parameter format.
//!
//! Layout: a text header terminated by an `END-HEADER` line, followed by
//! raw little-endian IEEE-754 64-bit values for each declared tensor, in
//! declaration order. The header carries `key = value` metadata lines and
//! one `tensor <name> <dim>...` line per value block.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &str = "MPSEG-MODEL v1";

/// A named, shaped block of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Parsed model file: ordered metadata plus tensors in file order.
#[derive(Debug, Clone, Default)]
pub struct ModelFile {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

impl ModelFile {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

/// Writes metadata and tensors to `path` in the single-file format.
pub fn write_model_file(path: &Path, meta: &[(String, String)], tensors: &[NamedTensor]) -> Result<()> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    for (k, v) in meta {
        header.push_str(&format!("{k} = {v}\n"));
    }
    for t in tensors {
        let n: usize = t.shape.iter().product();
        if n != t.data.len() {
            return Err(Error::Dim(format!(
                "tensor {} declares shape {:?} but has {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        header.push_str("tensor ");
        header.push_str(&t.name);
        for d in &t.shape {
            header.push_str(&format!(" {d}"));
        }
        header.push('\n');
    }
    header.push_str("END-HEADER\n");

    let mut file = fs::File::create(path)?;
    file.write_all(header.as_bytes())?;
    for t in tensors {
        let mut block = Vec::with_capacity(t.data.len() * 8);
        for v in &t.data {
            block.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&block)?;
    }
    Ok(())
}

/// Reads a model file, checking magic, header syntax, and payload length.
pub fn read_model_file(path: &Path) -> Result<ModelFile> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let malformed = |msg: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };

    let end_marker = b"END-HEADER\n";
    let header_end = find_subslice(&bytes, end_marker)
        .ok_or_else(|| malformed("missing END-HEADER line"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| malformed("header is not valid UTF-8"))?;
    let payload = &bytes[header_end + end_marker.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(malformed("bad magic line"));
    }

    let mut model = ModelFile::default();
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            let mut parts = rest.split_whitespace();
            let name = parts
                .next()
                .ok_or_else(|| malformed("tensor line without a name"))?
                .to_string();
            let shape: Vec<usize> = parts
                .map(|p| {
                    p.parse::<usize>()
                        .map_err(|_| malformed(&format!("bad dimension {p:?} for tensor {name}")))
                })
                .collect::<Result<_>>()?;
            if shape.is_empty() || shape.iter().any(|&d| d == 0) {
                return Err(malformed(&format!("tensor {name} has invalid shape {shape:?}")));
            }
            model.tensors.push(NamedTensor {
                name,
                shape,
                data: Vec::new(),
            });
        } else if let Some((k, v)) = line.split_once('=') {
            model
                .meta
                .push((k.trim().to_string(), v.trim().to_string()));
        } else {
            return Err(malformed(&format!("unparseable header line {line:?}")));
        }
    }

    let total: usize = model
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if payload.len() != total * 8 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: total * 8,
            got: payload.len(),
        });
    }

    let mut offset = 0;
    for t in &mut model.tensors {
        let n: usize = t.shape.iter().product();
        t.data = payload[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        offset += n * 8;
    }
    Ok(model)
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack
        .windows(needle.len())
        .position(|w| w == needle)
}
