//! On-disk formats: tensor manifests and flat `key=value` files.
//!
//! A tensor manifest is a text file with one line per tensor,
//!
//! ```text
//! layer0.ln1.alpha shape=64 dtype=f64
//! layer0.attn.wq shape=64x64 dtype=f64
//! ```
//!
//! and a companion binary file (same path, `.bin` extension) holding the raw
//! little-endian `f64` values of every tensor, row-major, concatenated in
//! manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.display().to_string(), source }
}

fn parse_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse(msg.into()))
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    entries: Vec<(String, Tensor)>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor. Names must be unique and free of whitespace.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return parse_err(format!("invalid tensor name {name:?}"));
        }
        if self.get(&name).is_some() {
            return parse_err(format!("duplicate tensor name {name}"));
        }
        if tensor.ndim() == 0 {
            return parse_err(format!("{name}: zero-rank tensors are not storable"));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Looks up `name` and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self.get(name).ok_or_else(|| Error::Parse(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(Error::Dimension(format!("{name}: expected shape {shape:?}, found {:?}", t.shape())));
        }
        Ok(t.clone())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn manifest_text(&self) -> String {
        let mut out = String::new();
        for (name, t) in &self.entries {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            out.push_str(&format!("{name} shape={} dtype=f64\n", dims.join("x")));
        }
        out
    }

    pub fn binary(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, t) in &self.entries {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Writes `manifest` and its companion `.bin` file.
    pub fn write(&self, manifest: &Path) -> Result<()> {
        fs::write(manifest, self.manifest_text()).map_err(io_err(manifest))?;
        let bin = companion_path(manifest);
        fs::write(&bin, self.binary()).map_err(io_err(&bin))
    }

    pub fn read(manifest: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
        let bin = companion_path(manifest);
        let bytes = fs::read(&bin).map_err(io_err(&bin))?;
        Self::decode(&text, &bytes)
    }

    pub fn decode(manifest: &str, bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(8) {
            return parse_err(format!("binary payload of {} bytes is not a whole number of f64", bytes.len()));
        }
        let mut values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut store = TensorStore::new();
        for (lineno, line) in manifest.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, shape) = parse_manifest_line(line).map_err(|e| match e {
                Error::Parse(m) => Error::Parse(format!("manifest line {}: {m}", lineno + 1)),
                other => other,
            })?;
            let n: usize = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if data.len() != n {
                return parse_err(format!("binary payload ends inside tensor {name}"));
            }
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        if values.next().is_some() {
            return parse_err("binary payload has trailing values not named in the manifest");
        }
        Ok(store)
    }
}

fn parse_manifest_line(line: &str) -> Result<(String, Vec<usize>)> {
    let mut parts = line.split_whitespace();
    let name = parts.next().ok_or_else(|| Error::Parse("empty line".into()))?;
    let mut shape = None;
    let mut dtype = None;
    for field in parts {
        match field.split_once('=') {
            Some(("shape", s)) => {
                let dims: std::result::Result<Vec<usize>, _> = s.split('x').map(str::parse).collect();
                shape = Some(dims.map_err(|_| Error::Parse(format!("bad shape {s:?}")))?);
            }
            Some(("dtype", d)) => dtype = Some(d),
            _ => return parse_err(format!("unexpected field {field:?}")),
        }
    }
    match dtype {
        Some("f64") => {}
        Some(other) => return parse_err(format!("unsupported dtype {other}")),
        None => return parse_err("missing dtype"),
    }
    let shape = shape.ok_or_else(|| Error::Parse("missing shape".into()))?;
    Ok((name.to_string(), shape))
}

/// The binary file paired with a manifest path.
pub fn companion_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Parses flat `key=value` lines. Blank lines and `#` comments are skipped;
/// a repeated key is an error. Order is preserved.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return parse_err(format!("line {}: expected key=value, got {line:?}", lineno + 1));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return parse_err(format!("line {}: empty key", lineno + 1));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return parse_err(format!("line {}: duplicate key {k}", lineno + 1));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn format_key_values(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Fixed-width scientific rendering with 12 significant digits; parses back
/// to the value rounded at that precision.
pub fn sig12(x: f64) -> String {
    format!("{x:.11e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn manifest_line_format() {
        let mut s = TensorStore::new();
        s.insert("ln1.alpha", Tensor::ones(&[3])).unwrap();
        s.insert("delta_proj.W", Tensor::zeros(&[2, 12])).unwrap();
        assert_eq!(s.manifest_text(), "ln1.alpha shape=3 dtype=f64\ndelta_proj.W shape=2x12 dtype=f64\n");
        assert_eq!(s.binary().len(), (3 + 24) * 8);
        assert_eq!(&s.binary()[..8], &1.0f64.to_le_bytes());
    }

    #[test]
    fn decode_rejects_malformed() {
        let bytes = 1.0f64.to_le_bytes();
        assert!(TensorStore::decode("a shape=2 dtype=f64\n", &bytes).is_err());
        assert!(TensorStore::decode("a shape=1 dtype=f32\n", &bytes).is_err());
        assert!(TensorStore::decode("a shape=1\n", &bytes).is_err());
        assert!(TensorStore::decode("", &bytes).is_err());
        assert!(TensorStore::decode("# comment\na shape=1 dtype=f64\n", &bytes).is_ok());
    }

    #[test]
    fn write_and_read_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.manifest");
        let mut s = TensorStore::new();
        s.insert("x", Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 1e-300]]).unwrap()).unwrap();
        s.write(&path).unwrap();
        assert!(dir.path().join("w.bin").exists());
        assert_eq!(TensorStore::read(&path).unwrap(), s);
    }

    #[test]
    fn key_values() {
        let kv = parse_key_values("# header\nlayers = 4\n\nhidden=64 # trailing\n").unwrap();
        assert_eq!(kv, vec![("layers".into(), "4".into()), ("hidden".into(), "64".into())]);
        assert!(parse_key_values("a=1\na=2\n").is_err());
        assert!(parse_key_values("novalue\n").is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_is_lossless(
            shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 1..5),
            seed in any::<u64>(),
        ) {
            let mut rng = crate::rng::Rng::new(seed);
            let mut s = TensorStore::new();
            for (i, shape) in shapes.iter().enumerate() {
                s.insert(format!("t{i}"), rng.normal_tensor(shape, 3.0)).unwrap();
            }
            let back = TensorStore::decode(&s.manifest_text(), &s.binary()).unwrap();
            prop_assert_eq!(back, s);
        }

        #[test]
        fn sig12_round_trips(x in -1e12f64..1e12) {
            let y: f64 = sig12(x).parse().unwrap();
            prop_assert!((x - y).abs() <= x.abs() * 1e-11 + f64::MIN_POSITIVE);
            let z: f64 = sig12(y).parse().unwrap();
            prop_assert_eq!(sig12(y), sig12(z));
        }
    }
}
