//! Versioned checkpoint container: a config echo plus named parameter
//! arrays, written little-endian. Loading refuses mismatched layouts.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use super::VisitParams;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SCCKPT1\n";

/// Write every parameter (including buffers) of `net` plus the resolved
/// config text that produced it.
pub fn save_checkpoint<N: VisitParams + ?Sized>(path: &Path, config: &str, net: &mut N) -> Result<()> {
    let mut entries: Vec<(String, bool, Vec<usize>, Vec<f64>)> = Vec::new();
    net.visit("net", &mut |name, p| {
        entries.push((
            name,
            p.buffer,
            p.value.shape().to_vec(),
            p.value.iter().cloned().collect(),
        ));
    });
    let file = std::fs::File::create(path).map_err(|source| Error::Io { path: path.to_owned(), source })?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |source| Error::Io { path: path.to_owned(), source };
    w.write_all(MAGIC).map_err(io_err)?;
    let cfg = config.as_bytes();
    w.write_all(&(cfg.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(cfg).map_err(io_err)?;
    w.write_all(&(entries.len() as u64).to_le_bytes()).map_err(io_err)?;
    for (name, buffer, shape, data) in &entries {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(nb).map_err(io_err)?;
        w.write_all(&[u8::from(*buffer)]).map_err(io_err)?;
        w.write_all(&(shape.len() as u64).to_le_bytes()).map_err(io_err)?;
        for d in shape {
            w.write_all(&(*d as u64).to_le_bytes()).map_err(io_err)?;
        }
        for v in data {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// The parsed contents of a checkpoint file.
pub struct Checkpoint {
    pub config: String,
    pub params: Vec<(String, bool, ArrayD<f64>)>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io { path: path.to_owned(), source })?;
    let mut r = std::io::BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|source| Error::Io { path: path.to_owned(), source })?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::Checkpoint(format!("{}: truncated file", path.display())));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let take_u64 = |off: &mut usize| -> Result<u64> {
        let s = take(off, 8)?;
        Ok(u64::from_le_bytes(s.try_into().unwrap()))
    };
    if take(&mut off, 8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic or unsupported version", path.display())));
    }
    let cfg_len = take_u64(&mut off)? as usize;
    let config = String::from_utf8(take(&mut off, cfg_len)?.to_vec())
        .map_err(|_| Error::Checkpoint(format!("{}: config echo is not UTF-8", path.display())))?;
    let n_params = take_u64(&mut off)? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = take_u64(&mut off)? as usize;
        let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{}: parameter name is not UTF-8", path.display())))?;
        let buffer = take(&mut off, 1)?[0] != 0;
        let ndim = take_u64(&mut off)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(take_u64(&mut off)? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = take(&mut off, len * 8)?;
        let mut data = Vec::with_capacity(len);
        for chunk in raw.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        params.push((name, buffer, ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap()));
    }
    if off != bytes.len() {
        return Err(Error::Checkpoint(format!("{}: trailing bytes", path.display())));
    }
    Ok(Checkpoint { config, params })
}

/// Copy checkpoint values into `net`, insisting on an exact match of
/// parameter names and shapes.
pub fn apply_checkpoint<N: VisitParams + ?Sized>(net: &mut N, ckpt: &Checkpoint) -> Result<()> {
    let mut by_name: std::collections::BTreeMap<&str, &ArrayD<f64>> =
        ckpt.params.iter().map(|(n, _, a)| (n.as_str(), a)).collect();
    let mut err: Option<Error> = None;
    net.visit("net", &mut |name, p| {
        if err.is_some() {
            return;
        }
        match by_name.remove(name.as_str()) {
            None => err = Some(Error::Checkpoint(format!("missing parameter '{name}'"))),
            Some(a) if a.shape() != p.value.shape() => {
                err = Some(Error::Checkpoint(format!(
                    "shape mismatch for '{name}': checkpoint {:?} vs network {:?}",
                    a.shape(),
                    p.value.shape()
                )));
            }
            Some(a) => p.value.assign(a),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some((name, _)) = by_name.pop_first() {
        return Err(Error::Checkpoint(format!("unused parameter '{name}' in checkpoint")));
    }
    Ok(())
}
