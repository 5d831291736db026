//! DNT1 tensor files: the magic `DNT1`, a dtype byte (0 = f32, 1 = f64), the
//! rank as u32, each dimension as u32, then the row-major payload. All
//! integers and values are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DNT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }
}

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor, dtype: Dtype) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[dtype.code()])?;
    let dim = |d: usize| {
        u32::try_from(d).map_err(|_| TensorError::Format(format!("dimension {d} exceeds u32")))
    };
    w.write_all(&dim(t.rank())?.to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&dim(d)?.to_le_bytes())?;
    }
    match dtype {
        Dtype::F64 => {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Dtype::F32 => {
            for v in t.data() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format(format!("bad magic {magic:?}")));
    }
    let mut code = [0u8; 1];
    r.read_exact(&mut code)?;
    let width = match code[0] {
        0 => 4,
        1 => 8,
        c => return Err(TensorError::Format(format!("unknown dtype code {c}"))),
    };
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let rank = u32::from_le_bytes(word) as usize;
    let mut shape = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        r.read_exact(&mut word)?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorError::Format("element count overflows".into()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != n * width {
        return Err(TensorError::Format(format!(
            "payload of {} bytes, expected {} for shape {shape:?}",
            payload.len(),
            n * width
        )));
    }
    let data = if width == 8 {
        payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect()
    } else {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect()
    };
    Tensor::new(shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t, Dtype::F64)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_f64_is_exact() {
        let t = Tensor::new([2, 3], vec![1.0, -2.5, 1e-300, 3.0, f64::MAX, 0.1]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, Dtype::F64).unwrap();
        assert_eq!(&buf[..4], b"DNT1");
        assert_eq!(buf[4], 1);
        assert_eq!(buf.len(), 4 + 1 + 4 + 8 + 6 * 8);
        assert_eq!(read_tensor(&buf[..]).unwrap(), t);
    }

    #[test]
    fn f32_payload_is_widened() {
        let t = Tensor::new([3], vec![0.5, -1.25, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, Dtype::F32).unwrap();
        assert_eq!(buf[4], 0);
        assert_eq!(read_tensor(&buf[..]).unwrap(), t);
    }

    #[test]
    fn scalar_has_rank_zero() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::scalar(7.0), Dtype::F64).unwrap();
        assert_eq!(&buf[5..9], &0u32.to_le_bytes());
        assert_eq!(read_tensor(&buf[..]).unwrap().item().unwrap(), 7.0);
    }

    #[test]
    fn rejects_truncated_and_bad_magic() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::zeros([4]), Dtype::F64).unwrap();
        assert!(read_tensor(&buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(read_tensor(&buf[..]).is_err());
    }
}
