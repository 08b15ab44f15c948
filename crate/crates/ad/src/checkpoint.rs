//! Versioned binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  b"DBCKPT01"
//! version      u32      currently 1
//! global_step  u64
//! kind         str      u32 length + UTF-8 bytes (model kind tag)
//! config_json  str      effective run configuration, opaque to this crate
//! n_params     u32
//! per param:   name str, ndim u32, dims u64 x ndim, data f64 x numel
//! has_adam     u8       0 or 1
//! if 1:        lr f64, beta1 f64, beta2 f64, eps f64, step u64,
//!              then per param: m data f64 x numel, v data f64 x numel
//! ```
//!
//! Round-trips are bit-exact: every f64 is stored as its raw IEEE-754 bits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::adam::AdamState;
use crate::error::{AdError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DBCKPT01";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub global_step: u64,
    pub kind: String,
    pub config_json: String,
    pub params: Vec<(String, Tensor)>,
    pub adam: Option<AdamState>,
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_f64s(w: &mut impl Write, data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let b = read_exact(r, 4)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let b = read_exact(r, 8)?;
    Ok(u64::from_le_bytes(b.try_into().unwrap()))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let b = read_exact(r, 8)?;
    Ok(f64::from_le_bytes(b.try_into().unwrap()))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    let b = read_exact(r, n)?;
    String::from_utf8(b).map_err(|e| AdError::Checkpoint(format!("bad UTF-8 string: {e}")))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let b = read_exact(r, n * 8)?;
    Ok(b.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.global_step.to_le_bytes())?;
        write_str(&mut w, &self.kind)?;
        write_str(&mut w, &self.config_json)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            write_str(&mut w, name)?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            write_f64s(&mut w, t.data())?;
        }
        match &self.adam {
            Some(a) => {
                if a.m.len() != self.params.len() {
                    return Err(AdError::Checkpoint(format!(
                        "adam state has {} slots for {} params",
                        a.m.len(),
                        self.params.len()
                    )));
                }
                w.write_all(&[1u8])?;
                write_f64s(&mut w, &[a.lr, a.beta1, a.beta2, a.eps])?;
                w.write_all(&a.step.to_le_bytes())?;
                for (m, v) in a.m.iter().zip(&a.v) {
                    write_f64s(&mut w, m.data())?;
                    write_f64s(&mut w, v.data())?;
                }
            }
            None => w.write_all(&[0u8])?,
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        let magic = read_exact(&mut r, 8)?;
        if magic != MAGIC {
            return Err(AdError::Checkpoint("bad magic string".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(AdError::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let global_step = read_u64(&mut r)?;
        let kind = read_str(&mut r)?;
        let config_json = read_str(&mut r)?;
        let n_params = read_u32(&mut r)? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = read_str(&mut r)?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = read_f64s(&mut r, numel)?;
            params.push((name, Tensor::new(shape, data)?));
        }
        let has_adam = read_exact(&mut r, 1)?[0];
        let adam = if has_adam == 1 {
            let lr = read_f64(&mut r)?;
            let beta1 = read_f64(&mut r)?;
            let beta2 = read_f64(&mut r)?;
            let eps = read_f64(&mut r)?;
            let step = read_u64(&mut r)?;
            let mut m = Vec::with_capacity(n_params);
            let mut v = Vec::with_capacity(n_params);
            for (_, t) in &params {
                m.push(Tensor::new(
                    t.shape().to_vec(),
                    read_f64s(&mut r, t.numel())?,
                )?);
                v.push(Tensor::new(
                    t.shape().to_vec(),
                    read_f64s(&mut r, t.numel())?,
                )?);
            }
            Some(AdamState {
                lr,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            })
        } else {
            None
        };
        Ok(Checkpoint {
            global_step,
            kind,
            config_json,
            params,
            adam,
        })
    }
}
