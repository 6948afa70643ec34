//! Manifest + raw payload persistence for named tensors.
//!
//! A checkpoint `<stem>` is two files: `<stem>.manifest`, a text file listing
//! each tensor's shape, dtype and byte offset, and `<stem>.bin`, the
//! concatenated little-endian f64 payload. Reading back reproduces every
//! value bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "peftcl-checkpoint 1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn fmt_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".to_string()
    } else {
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            ..Default::default()
        }
    }

    pub fn manifest_path(stem: &Path) -> PathBuf {
        with_ext(stem, "manifest")
    }

    pub fn payload_path(stem: &Path) -> PathBuf {
        with_ext(stem, "bin")
    }

    pub fn exists(stem: &Path) -> bool {
        Self::manifest_path(stem).is_file() && Self::payload_path(stem).is_file()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        let plain = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("consistent tensor");
        self.tensors.push((name.into(), plain));
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("checkpoint `{}` lacks metadata `{key}`", self.kind)))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("checkpoint metadata `{key}` = `{raw}` is malformed")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Config(format!("checkpoint `{}` lacks tensor `{name}`", self.kind)))
    }

    /// Fetches a tensor and checks its shape.
    pub fn tensor_shaped(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self.tensor(name)?;
        if t.shape() != shape {
            return Err(Error::dim(
                "checkpoint",
                format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape()),
            ));
        }
        Ok(t.clone())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn write(&self, stem: &Path) -> Result<()> {
        let mut manifest = String::new();
        let mut payload = Vec::new();
        writeln!(manifest, "{MAGIC}").unwrap();
        writeln!(manifest, "kind = {}", self.kind).unwrap();
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Config(format!("metadata `{k}` is not single-line")));
            }
            writeln!(manifest, "meta.{k} = {v}").unwrap();
        }
        for (name, t) in &self.tensors {
            if name.contains(char::is_whitespace) {
                return Err(Error::Config(format!("tensor name `{name}` contains whitespace")));
            }
            writeln!(
                manifest,
                "tensor {name} shape={} dtype=f64le offset={}",
                fmt_shape(t.shape()),
                payload.len()
            )
            .unwrap();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = stem.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mpath = Self::manifest_path(stem);
        let bpath = Self::payload_path(stem);
        fs::write(&bpath, payload).map_err(|e| Error::io(&bpath, e))?;
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
        Ok(())
    }

    pub fn read(stem: &Path) -> Result<Self> {
        let mpath = Self::manifest_path(stem);
        let bpath = Self::payload_path(stem);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let payload = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let bad = |detail: String| Error::format(&mpath, detail);

        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("missing header line".into()));
        }
        let mut ck = Checkpoint::default();
        for (lineno, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("tensor ") {
                let mut parts = rest.split_whitespace();
                let name = parts.next().ok_or_else(|| bad(format!("line {}: no name", lineno + 2)))?;
                let mut shape = None;
                let mut offset = None;
                for field in parts {
                    match field.split_once('=') {
                        Some(("shape", "-")) => shape = Some(vec![]),
                        Some(("shape", s)) => {
                            let dims: std::result::Result<Vec<usize>, _> = s.split('x').map(str::parse).collect();
                            shape = Some(dims.map_err(|_| bad(format!("bad shape `{s}`")))?);
                        }
                        Some(("dtype", "f64le")) => {}
                        Some(("dtype", d)) => return Err(bad(format!("unsupported dtype `{d}`"))),
                        Some(("offset", o)) => {
                            offset = Some(o.parse::<usize>().map_err(|_| bad(format!("bad offset `{o}`")))?)
                        }
                        _ => return Err(bad(format!("unknown field `{field}`"))),
                    }
                }
                let shape = shape.ok_or_else(|| bad(format!("tensor `{name}` has no shape")))?;
                let offset = offset.ok_or_else(|| bad(format!("tensor `{name}` has no offset")))?;
                let n: usize = shape.iter().product();
                let end = offset + n * 8;
                let bytes = payload
                    .get(offset..end)
                    .ok_or_else(|| Error::format(&bpath, format!("tensor `{name}` runs past end of payload")))?;
                let data = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                ck.tensors.push((name.to_string(), Tensor::new(shape, data)?));
            } else if let Some((k, v)) = line.split_once(" = ") {
                if k == "kind" {
                    ck.kind = v.to_string();
                } else if let Some(key) = k.strip_prefix("meta.") {
                    ck.meta.insert(key.to_string(), v.to_string());
                } else {
                    return Err(bad(format!("unknown key `{k}`")));
                }
            } else {
                return Err(bad(format!("unparseable line `{line}`")));
            }
        }
        Ok(ck)
    }
}
