//! Binary container for one or more named networks.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      4 bytes  "DFCK"
//! version    u32      1
//! n_nets     u32
//! per net:
//!   name_len u32, name (UTF-8)
//!   head     u8       0 = linear, 1 = softmax2
//!   opt      u8       0 = none, 1 = sgd, 2 = adam
//!   n_dims   u32, then n_dims × u64 layer dims (input first)
//!   per layer l: weights (dims[l+1] × dims[l]) f64 row-major, then biases f64
//! ```
//!
//! Floats are stored as raw IEEE-754 bits, so save/load is bit-exact.

use std::io::{Read, Write};

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::ndcore::{DenseNet, Head, OptimizerKind};

const MAGIC: &[u8; 4] = b"DFCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedNet {
    pub name: String,
    pub net: DenseNet,
    pub optimizer: Option<OptimizerKind>,
}

pub fn write_nets<W: Write>(mut w: W, nets: &[NamedNet]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(nets.len() as u32).to_le_bytes())?;
    for n in nets {
        let name = n.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let head = match n.net.head() {
            Head::Linear => 0u8,
            Head::Softmax2 => 1,
        };
        let opt = match n.optimizer {
            None => 0u8,
            Some(OptimizerKind::Sgd) => 1,
            Some(OptimizerKind::Adam) => 2,
        };
        w.write_all(&[head, opt])?;
        let dims = n.net.layer_dims();
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for &d in dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for (wt, b) in n.net.weights().iter().zip(n.net.biases()) {
            for v in wt.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in b.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_nets<R: Read>(mut r: R) -> Result<Vec<NamedNet>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n_nets = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(n_nets);
    for _ in 0..n_nets {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let mut tags = [0u8; 2];
        r.read_exact(&mut tags)?;
        let head = match tags[0] {
            0 => Head::Linear,
            1 => Head::Softmax2,
            t => return Err(Error::Checkpoint(format!("unknown head tag {t}"))),
        };
        let optimizer = match tags[1] {
            0 => None,
            1 => Some(OptimizerKind::Sgd),
            2 => Some(OptimizerKind::Adam),
            t => return Err(Error::Checkpoint(format!("unknown optimizer tag {t}"))),
        };
        let n_dims = read_u32(&mut r)? as usize;
        if n_dims > 1024 {
            return Err(Error::Checkpoint("implausible layer count".into()));
        }
        let dims = (0..n_dims)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in dims.windows(2) {
            let (rows, cols) = (pair[1], pair[0]);
            let w = (0..rows * cols)
                .map(|_| read_f64(&mut r))
                .collect::<Result<Vec<_>>>()?;
            weights.push(
                Array2::from_shape_vec((rows, cols), w)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?,
            );
            let b = (0..rows)
                .map(|_| read_f64(&mut r))
                .collect::<Result<Vec<_>>>()?;
            biases.push(Array1::from(b));
        }
        let net = DenseNet::from_parts(dims, weights, biases, head)?;
        out.push(NamedNet {
            name,
            net,
            optimizer,
        });
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
