//! Binary model checkpoints.
//!
//! Layout: magic "MCRB", format version (u32 LE), hyperparameter block,
//! trained-epoch count, then each parameter tensor as explicit dimensions
//! followed by little-endian f64 data. Loading reproduces inference outputs
//! bit-for-bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{CoreError, Result};

use super::{Hyperparams, McRbmModel};

const MAGIC: &[u8; 4] = b"MCRB";
const VERSION: u32 = 1;

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn write_matrix(w: &mut impl Write, m: &Array2<f64>) -> Result<()> {
    write_u64(w, m.nrows() as u64)?;
    write_u64(w, m.ncols() as u64)?;
    for &v in m.iter() {
        write_f64(w, v)?;
    }
    Ok(())
}

fn write_vector(w: &mut impl Write, m: &Array1<f64>) -> Result<()> {
    write_u64(w, m.len() as u64)?;
    write_u64(w, 1)?;
    for &v in m.iter() {
        write_f64(w, v)?;
    }
    Ok(())
}

fn read_matrix(r: &mut impl Read, path: &Path) -> Result<Array2<f64>> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    if rows.checked_mul(cols).is_none() || rows * cols > 1 << 30 {
        return Err(CoreError::MalformedFile {
            path: path.display().to_string(),
            reason: format!("implausible tensor shape {rows}x{cols}"),
        });
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(read_f64(r)?);
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| CoreError::MalformedFile {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn read_vector(r: &mut impl Read, path: &Path) -> Result<Array1<f64>> {
    let m = read_matrix(r, path)?;
    if m.ncols() != 1 {
        return Err(CoreError::MalformedFile {
            path: path.display().to_string(),
            reason: "expected a column vector".into(),
        });
    }
    Ok(m.column(0).to_owned())
}

/// Write a model checkpoint.
pub fn save(model: &McRbmModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let h = &model.hyper;
    write_u64(&mut w, h.n_vis as u64)?;
    write_u64(&mut w, h.n_mean as u64)?;
    write_u64(&mut w, h.n_factors as u64)?;
    write_u64(&mut w, h.n_cov as u64)?;
    write_f64(&mut w, h.learning_rate)?;
    write_f64(&mut w, h.momentum)?;
    write_u64(&mut w, h.momentum_start_epoch)?;
    write_f64(&mut w, h.weight_decay)?;
    write_u64(&mut w, h.minibatch_size as u64)?;
    write_u64(&mut w, h.n_chains as u64)?;
    write_u64(&mut w, h.epochs)?;
    write_f64(&mut w, h.precision_floor)?;
    write_u64(&mut w, h.seed)?;
    write_u64(&mut w, model.epochs_trained)?;
    write_matrix(&mut w, &model.w)?;
    write_vector(&mut w, &model.a)?;
    write_vector(&mut w, &model.c)?;
    write_matrix(&mut w, &model.r)?;
    write_matrix(&mut w, &model.p)?;
    write_vector(&mut w, &model.d)?;
    write_matrix(&mut w, &model.chains)?;
    w.flush()?;
    Ok(())
}

/// Load a model checkpoint.
pub fn load(path: &Path) -> Result<McRbmModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::MalformedFile {
            path: path.display().to_string(),
            reason: "bad magic bytes".into(),
        });
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != VERSION {
        return Err(CoreError::MalformedFile {
            path: path.display().to_string(),
            reason: format!("unsupported version {version}"),
        });
    }
    let hyper = Hyperparams {
        n_vis: read_u64(&mut r)? as usize,
        n_mean: read_u64(&mut r)? as usize,
        n_factors: read_u64(&mut r)? as usize,
        n_cov: read_u64(&mut r)? as usize,
        learning_rate: read_f64(&mut r)?,
        momentum: read_f64(&mut r)?,
        momentum_start_epoch: read_u64(&mut r)?,
        weight_decay: read_f64(&mut r)?,
        minibatch_size: read_u64(&mut r)? as usize,
        n_chains: read_u64(&mut r)? as usize,
        epochs: read_u64(&mut r)?,
        precision_floor: read_f64(&mut r)?,
        seed: read_u64(&mut r)?,
    };
    let epochs_trained = read_u64(&mut r)?;
    let model = McRbmModel {
        w: read_matrix(&mut r, path)?,
        a: read_vector(&mut r, path)?,
        c: read_vector(&mut r, path)?,
        r: read_matrix(&mut r, path)?,
        p: read_matrix(&mut r, path)?,
        d: read_vector(&mut r, path)?,
        chains: read_matrix(&mut r, path)?,
        hyper,
        epochs_trained,
    };
    if model.w.dim() != (model.hyper.n_vis, model.hyper.n_mean)
        || model.r.dim() != (model.hyper.n_vis, model.hyper.n_factors)
        || model.p.dim() != (model.hyper.n_factors, model.hyper.n_cov)
    {
        return Err(CoreError::MalformedFile {
            path: path.display().to_string(),
            reason: "tensor dimensions disagree with hyperparameters".into(),
        });
    }
    Ok(model)
}
