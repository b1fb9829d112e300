//! Model container: a text header followed by raw little-endian buffers.
//!
//! ```text
//! blosan-model 1
//! [config]
//! key=value
//! [params]
//! path:shape:dtype:kind
//! [data]
//! <buffers in manifest order>
//! ```
//!
//! Shapes are written as `AxBxC`. Parameters appear in sorted path order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{DType, Scalar, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "blosan-model";
const DATA_MARKER: &[u8] = b"[data]\n";

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn write_model<T: Scalar, W: Write>(out: &mut W, config: &[(String, String)], store: &ParamStore<T>) -> Result<()> {
    let mut header = format!("{MAGIC} {FORMAT_VERSION}\n[config]\n");
    for (k, v) in config {
        if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(format_err(format!("config entry `{k}` cannot be stored")));
        }
        header.push_str(&format!("{k}={v}\n"));
    }
    header.push_str("[params]\n");
    for (path, p) in store.iter() {
        if path.contains([':', '\n']) {
            return Err(format_err(format!("parameter path `{path}` cannot be stored")));
        }
        let shape: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("{path}:{}:{}:{}\n", shape.join("x"), T::DTYPE, p.kind.name()));
    }
    out.write_all(header.as_bytes())?;
    out.write_all(DATA_MARKER)?;
    let mut buf = Vec::new();
    for (_, p) in store.iter() {
        buf.clear();
        for &v in p.value.data() {
            v.write_le(&mut buf);
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_model<T: Scalar, R: Read>(input: &mut R) -> Result<(Vec<(String, String)>, ParamStore<T>)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let split = bytes
        .windows(DATA_MARKER.len())
        .position(|w| w == DATA_MARKER)
        .ok_or_else(|| format_err("missing [data] section"))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| format_err("header is not UTF-8"))?;
    let mut data = &bytes[split + DATA_MARKER.len()..];

    let mut lines = header.lines();
    let version = lines
        .next()
        .and_then(|l| l.strip_prefix(MAGIC))
        .ok_or_else(|| format_err("not a model file"))?;
    if version.trim() != FORMAT_VERSION.to_string() {
        return Err(format_err(format!("unsupported format version `{}`", version.trim())));
    }
    if lines.next() != Some("[config]") {
        return Err(format_err("missing [config] section"));
    }
    let mut config = Vec::new();
    let mut manifest = Vec::new();
    let mut in_params = false;
    for line in lines {
        if line == "[params]" {
            in_params = true;
        } else if !in_params {
            let (k, v) = line.split_once('=').ok_or_else(|| format_err(format!("bad config line `{line}`")))?;
            config.push((k.to_string(), v.to_string()));
        } else {
            manifest.push(parse_manifest_line(line)?);
        }
    }
    if !in_params {
        return Err(format_err("missing [params] section"));
    }

    let mut store = ParamStore::new();
    for (path, shape, dtype, kind) in manifest {
        if dtype != T::DTYPE {
            return Err(format_err(format!("`{path}` is stored as {dtype}, expected {}", T::DTYPE)));
        }
        let count: usize = shape.iter().product();
        let width = dtype.size_of();
        if data.len() < count * width {
            return Err(format_err(format!("truncated data for `{path}`")));
        }
        let values = data[..count * width].chunks_exact(width).map(T::read_le).collect();
        data = &data[count * width..];
        store.insert(path, Tensor::new(&shape, values)?, kind)?;
    }
    if !data.is_empty() {
        return Err(format_err(format!("{} trailing bytes after parameters", data.len())));
    }
    Ok((config, store))
}

fn parse_manifest_line(line: &str) -> Result<(String, Vec<usize>, DType, ParamKind)> {
    let bad = || format_err(format!("bad manifest line `{line}`"));
    let mut fields = line.split(':');
    let (Some(path), Some(shape), Some(dtype), kind, None) =
        (fields.next(), fields.next(), fields.next(), fields.next(), fields.next())
    else {
        return Err(bad());
    };
    let shape = if shape.is_empty() {
        Vec::new()
    } else {
        shape
            .split('x')
            .map(|s| s.parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?
    };
    let dtype: DType = dtype.parse().map_err(|_| bad())?;
    let kind = kind.map_or(Ok(ParamKind::Weight), ParamKind::from_name)?;
    Ok((path.to_string(), shape, dtype, kind))
}

pub fn save_model<T: Scalar>(path: impl AsRef<Path>, config: &[(String, String)], store: &ParamStore<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_model(&mut buf, config, store)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<(Vec<(String, String)>, ParamStore<T>)> {
    read_model(&mut fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn sample() -> ParamStore<f32> {
        let mut rng = stream(3, Stream::Init);
        let mut s = ParamStore::new();
        s.add_weight("a/w", 3, 4, &mut rng).unwrap();
        s.add_bias("a/b", 4).unwrap();
        s.insert("emb/table", Tensor::from_fn(&[2, 3], |k| k as f32 * 0.5 - 1.0), ParamKind::Embedding)
            .unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let store = sample();
        let cfg = vec![("d_e".to_string(), "3".to_string()), ("note".to_string(), "a=b".to_string())];
        let mut buf = Vec::new();
        write_model(&mut buf, &cfg, &store).unwrap();
        let (cfg2, loaded) = read_model::<f32, _>(&mut buf.as_slice()).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(loaded.len(), store.len());
        for (path, p) in store.iter() {
            let q = loaded.param(path).unwrap();
            assert_eq!(q.kind, p.kind);
            assert_eq!(q.value.shape(), p.value.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&q.value), bits(&p.value));
        }
    }

    #[test]
    fn header_is_readable_text() {
        let mut buf = Vec::new();
        write_model(&mut buf, &[], &sample()).unwrap();
        let text = String::from_utf8_lossy(&buf);
        assert!(text.starts_with("blosan-model 1\n[config]\n[params]\na/b:4:f32:bias\na/w:3x4:f32:weight\n"));
    }

    #[test]
    fn rejects_wrong_dtype_and_truncation() {
        let mut buf = Vec::new();
        write_model(&mut buf, &[], &sample()).unwrap();
        assert!(matches!(read_model::<f64, _>(&mut buf.as_slice()), Err(Error::Format(_))));
        buf.pop();
        assert!(matches!(read_model::<f32, _>(&mut buf.as_slice()), Err(Error::Format(_))));
        assert!(read_model::<f32, _>(&mut &b"garbage"[..]).is_err());
    }
}
