//! Versioned, line-oriented checkpoint format shared by both models.
//!
//! ```text
//! seqrank-checkpoint 1
//! kind <kind>
//! meta <one-line JSON>
//! tensor <name> <rows> <cols>
//! <row-major values, space separated>
//! end
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so loading is
//! bit-exact.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const MAGIC: &str = "seqrank-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{MAGIC} {VERSION}")?;
        writeln!(w, "kind {}", self.kind)?;
        writeln!(w, "meta {}", serde_json::to_string(&self.meta)?)?;
        for (name, m) in &self.tensors {
            writeln!(w, "tensor {name} {} {}", m.rows, m.cols)?;
            let mut line = String::with_capacity(m.data.len() * 20);
            for (j, x) in m.data.iter().enumerate() {
                if j > 0 {
                    line.push(' ');
                }
                line.push_str(&x.to_string());
            }
            writeln!(w, "{line}")?;
        }
        writeln!(w, "end")?;
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::Checkpoint(format!("truncated: expected {what}")))
        };
        let header = next("header")?;
        let version = header
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| Error::Checkpoint("not a checkpoint file".into()))?;
        if version != VERSION.to_string() {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = next("kind")?
            .strip_prefix("kind ")
            .ok_or_else(|| Error::Checkpoint("missing kind".into()))?
            .to_string();
        let meta_line = next("meta")?;
        let meta = serde_json::from_str(
            meta_line
                .strip_prefix("meta ")
                .ok_or_else(|| Error::Checkpoint("missing meta".into()))?,
        )?;
        let mut tensors = Vec::new();
        loop {
            let line = next("tensor or end")?;
            if line == "end" {
                break;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 4 || parts[0] != "tensor" {
                return Err(Error::Checkpoint(format!("bad tensor header {line:?}")));
            }
            let rows: usize = parts[2]
                .parse()
                .map_err(|_| Error::Checkpoint("bad rows".into()))?;
            let cols: usize = parts[3]
                .parse()
                .map_err(|_| Error::Checkpoint("bad cols".into()))?;
            let values = next("tensor values")?;
            let data: Vec<f64> = values
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", parts[1])))?;
            if data.len() != rows * cols {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has {} values, shape needs {}",
                    parts[1],
                    data.len(),
                    rows * cols
                )));
            }
            tensors.push((parts[1].to_string(), Mat::from_vec(rows, cols, data)));
        }
        Ok(Checkpoint {
            kind,
            meta,
            tensors,
        })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )))
        }
    }

    /// Removes and returns the named tensor, checking its shape.
    pub fn take(&mut self, name: &str, rows: usize, cols: usize) -> Result<Mat> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let (_, m) = self.tensors.remove(pos);
        if (m.rows, m.cols) != (rows, cols) {
            return Err(Error::Checkpoint(format!(
                "tensor {name} is {}x{}, expected {rows}x{cols}",
                m.rows, m.cols
            )));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = Checkpoint {
            kind: "test".into(),
            meta: serde_json::json!({"a": 1, "b": [1.5, 2]}),
            tensors: vec![
                ("x".into(), Mat::from_vec(2, 2, vec![0.1, -1e-300, 1.0 / 3.0, 7e22])),
                ("empty".into(), Mat::zeros(0, 3)),
            ],
        };
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let back = Checkpoint::read(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.tensors[0].1.data.iter().zip(&ck.tensors[0].1.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_other_versions_and_bad_shapes() {
        let text = "seqrank-checkpoint 9\nkind x\nmeta {}\nend\n";
        assert!(Checkpoint::read(text.as_bytes()).is_err());
        let text = "seqrank-checkpoint 1\nkind x\nmeta {}\ntensor t 2 2\n1 2 3\nend\n";
        assert!(Checkpoint::read(text.as_bytes()).is_err());
    }
}
