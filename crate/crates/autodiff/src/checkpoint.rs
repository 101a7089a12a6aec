//! Parameter checkpoints.
//!
//! Layout (all header lines are UTF-8 and `\n`-terminated):
//!
//! ```text
//! cardio-checkpoint 1
//! meta <n>                 n = byte length of the metadata blob that follows
//! <n bytes of metadata>\n  free-form text, usually a TOML document
//! param <name> <d0>x<d1>.. one line per parameter, in store order ("scalar" for rank 0)
//! end
//! <payload>                every parameter's values as little-endian f64, in header order
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "cardio-checkpoint 1";

/// Decoded checkpoint: metadata plus named tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Overwrite parameters of `store` from this checkpoint. Every parameter in
    /// the store must be present with an identical shape.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        for (_, p) in store.iter_mut() {
            let (_, t) = self
                .tensors
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| TensorError::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "checkpoint restore",
                    lhs: p.value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".into()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore, meta: &str) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "meta {}", meta.len())?;
    w.write_all(meta.as_bytes())?;
    writeln!(w)?;
    for (_, p) in store.iter() {
        if p.name.contains(char::is_whitespace) {
            return Err(TensorError::Checkpoint(format!(
                "parameter name `{}` contains whitespace",
                p.name
            )));
        }
        writeln!(w, "param {} {}", p.name, shape_str(p.value.shape()))?;
    }
    writeln!(w, "end")?;
    for (_, p) in store.iter() {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &str) -> Result<()> {
    let f = File::create(path)?;
    write_checkpoint(BufWriter::new(f), store, meta)
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut s = String::new();
    if r.read_line(&mut s)? == 0 {
        return Err(bad("unexpected end of header"));
    }
    Ok(s.trim_end_matches('\n').to_string())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let mut r = BufReader::new(r);
    if read_line(&mut r)? != MAGIC {
        return Err(bad("bad magic line"));
    }
    let meta_line = read_line(&mut r)?;
    let n: usize = meta_line
        .strip_prefix("meta ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(format!("expected `meta <n>`, got `{meta_line}`")))?;
    let mut meta = vec![0u8; n + 1];
    r.read_exact(&mut meta)
        .map_err(|_| bad("truncated metadata"))?;
    if meta.pop() != Some(b'\n') {
        return Err(bad("metadata not newline-terminated"));
    }
    let meta = String::from_utf8(meta).map_err(|_| bad("metadata is not UTF-8"))?;

    let mut specs = Vec::new();
    loop {
        let line = read_line(&mut r)?;
        if line == "end" {
            break;
        }
        let mut parts = line.split(' ');
        let (Some("param"), Some(name), Some(shape), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad(format!("bad parameter line `{line}`")));
        };
        let dims: Vec<usize> = if shape == "scalar" {
            Vec::new()
        } else {
            shape
                .split('x')
                .map(|d| d.parse().map_err(|_| bad(format!("bad shape `{shape}`"))))
                .collect::<Result<_>>()?
        };
        specs.push((name.to_string(), dims));
    }

    let mut tensors = Vec::with_capacity(specs.len());
    let mut buf = [0u8; 8];
    for (name, dims) in specs {
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| bad(format!("payload truncated in `{name}`")))?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push((name, Tensor::new(dims, data)?));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes after payload", rest.len())));
    }
    Ok(Checkpoint { meta, tensors })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("enc.w", Tensor::new([2, 3], vec![1., 2., 3., 4., 5., f64::MIN_POSITIVE]).unwrap())
            .unwrap();
        s.add("bias", Tensor::scalar(-0.25)).unwrap();
        s
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let s = store();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &s, "a = 1\nb = \"x\"").unwrap();
        let ck = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(ck.meta, "a = 1\nb = \"x\"");
        let mut t = store();
        t.get_mut(t.id("bias").unwrap()).value = Tensor::scalar(9.0);
        ck.restore_into(&mut t).unwrap();
        for ((_, a), (_, b)) in s.iter().zip(t.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn header_is_readable_text() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store(), "").unwrap();
        let text = String::from_utf8_lossy(&buf);
        assert!(text.starts_with("cardio-checkpoint 1\nmeta 0\n\nparam enc.w 2x3\nparam bias scalar\nend\n"));
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store(), "").unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_checkpoint(&buf[..]), Err(TensorError::Checkpoint(_))));
    }

    #[test]
    fn shape_mismatch_on_restore() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store(), "").unwrap();
        let ck = read_checkpoint(&buf[..]).unwrap();
        let mut other = ParamStore::new();
        other.add("enc.w", Tensor::zeros([3, 2])).unwrap();
        assert!(ck.restore_into(&mut other).is_err());
    }
}
