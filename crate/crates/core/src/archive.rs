//! Named-tensor container used for map files and checkpoints.
//!
//! Layout: a UTF-8 header, one record per line, then the raw payload.
//!
//! ```text
//! context-maps-archive 1
//! kind maps
//! meta f_map 2
//! tensor map.scene_a 64 64 2
//! end
//! <little-endian f64 values of every tensor, in header order>
//! ```
//!
//! Meta values run to the end of their line; names and keys may not contain
//! whitespace.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "context-maps-archive";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn check_token(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::Archive(format!("{what} '{s}' must be non-empty without whitespace")));
    }
    Ok(())
}

impl Archive {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Archive(format!("missing meta key '{key}'")))
    }

    pub fn meta_parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta_str(key)?;
        raw.parse()
            .map_err(|_| Error::Archive(format!("meta '{key}' has unparsable value '{raw}'")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Archive(format!("expected a '{kind}' archive, found '{}'", self.kind)));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        check_token("kind", &self.kind)?;
        writeln!(w, "{MAGIC} {FORMAT_VERSION}")?;
        writeln!(w, "kind {}", self.kind)?;
        for (k, v) in &self.meta {
            check_token("meta key", k)?;
            if v.contains('\n') {
                return Err(Error::Archive(format!("meta '{k}' value spans lines")));
            }
            writeln!(w, "meta {k} {v}")?;
        }
        for (name, t) in &self.tensors {
            check_token("tensor name", name)?;
            write!(w, "tensor {name}")?;
            for d in t.shape() {
                write!(w, " {d}")?;
            }
            writeln!(w)?;
        }
        writeln!(w, "end")?;
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        let mut next_line = |r: &mut R| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Archive("unexpected end of header".into()));
            }
            Ok(line.trim_end_matches(['\n', '\r']).to_string())
        };
        let first = next_line(&mut r)?;
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| Error::Archive("not a context-maps archive".into()))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(Error::Archive(format!("unsupported archive version {version}")));
        }
        let kind_line = next_line(&mut r)?;
        let kind = kind_line
            .strip_prefix("kind ")
            .ok_or_else(|| Error::Archive("missing kind line".into()))?
            .to_string();
        let mut archive = Archive::new(kind);
        let mut shapes = Vec::new();
        loop {
            let l = next_line(&mut r)?;
            if l == "end" {
                break;
            }
            if let Some(rest) = l.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                archive.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = l.strip_prefix("tensor ") {
                let mut parts = rest.split_whitespace();
                let name = parts
                    .next()
                    .ok_or_else(|| Error::Archive("tensor line without a name".into()))?;
                let dims = parts
                    .map(|d| d.parse::<usize>().map_err(|_| Error::Archive(format!("bad dim '{d}' for {name}"))))
                    .collect::<Result<Vec<_>>>()?;
                shapes.push((name.to_string(), dims));
            } else {
                return Err(Error::Archive(format!("unrecognized header line '{l}'")));
            }
        }
        for (name, dims) in shapes {
            let n: usize = dims.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)
                .map_err(|_| Error::Archive(format!("payload truncated in tensor '{name}'")))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            archive.tensors.push((name, Tensor::from_vec(&dims, data)?));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Archive("trailing bytes after payload".into()));
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new("maps");
        a.set_meta("f_map", 2);
        a.set_meta("note", "two words");
        a.push("x", Tensor::from_vec(&[2, 1, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        a.push("s", Tensor::scalar(0.1));
        a
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = sample();
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        let b = Archive::read_from(&buf[..]).unwrap();
        assert_eq!(a.meta, b.meta);
        for ((n1, t1), (n2, t2)) in a.tensors.iter().zip(&b.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
        assert_eq!(b.meta_parse::<usize>("f_map").unwrap(), 2);
    }

    #[test]
    fn truncated_and_trailing_rejected() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        assert!(Archive::read_from(&buf[..buf.len() - 3]).is_err());
        buf.push(0);
        assert!(Archive::read_from(&buf[..]).is_err());
        assert!(Archive::read_from(&b"hello\n"[..]).is_err());
    }

    #[test]
    fn empty_archive() {
        let mut buf = Vec::new();
        Archive::new("maps").write_to(&mut buf).unwrap();
        let b = Archive::read_from(&buf[..]).unwrap();
        assert!(b.tensors.is_empty());
        assert!(b.expect_kind("checkpoint").is_err());
    }
}
