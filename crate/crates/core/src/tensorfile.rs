//! Binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size        field
//! 0       8           magic "PKTENSR1"
//! 8       1           dtype (0 = f64 LE)
//! 9       4           ndim (u32), 1..=3
//! 13      8 * ndim    dims (u64 each)
//! ..      8 * prod    payload, row-major (last index fastest)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{from_row_major, to_row_major, Mat};

pub const MAGIC: &[u8; 8] = b"PKTENSR1";
pub const DTYPE_F64: u8 = 0;

/// Dense n-d array of f64 in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 {
            return Err(Error::InvalidTensor(format!("ndim {} not in 1..=3", dims.len())));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::InvalidTensor(format!(
                "dims {:?} need {} values, got {}",
                dims,
                len,
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn from_matrix(m: &Mat) -> Self {
        Self {
            dims: vec![m.nrows(), m.ncols()],
            data: to_row_major(m),
        }
    }

    pub fn from_vec(v: &[f64]) -> Self {
        Self {
            dims: vec![v.len()],
            data: v.to_vec(),
        }
    }

    /// Stacks equally-shaped matrices into an `r x rows x cols` tensor.
    pub fn from_stack(ms: &[Mat]) -> Result<Self> {
        let (rows, cols) = ms.first().map(|m| m.shape()).unwrap_or((0, 0));
        let mut data = Vec::with_capacity(ms.len() * rows * cols);
        for m in ms {
            if m.shape() != (rows, cols) {
                return Err(Error::InvalidTensor("stack of unequal shapes".into()));
            }
            data.extend(to_row_major(m));
        }
        Self::new(vec![ms.len(), rows, cols], data)
    }

    pub fn to_matrix(&self) -> Result<Mat> {
        match self.dims.as_slice() {
            [r, c] => Ok(from_row_major(*r, *c, &self.data)),
            [n] => Ok(from_row_major(1, *n, &self.data)),
            d => Err(Error::InvalidTensor(format!("expected a matrix, got dims {:?}", d))),
        }
    }

    pub fn to_stack(&self) -> Result<Vec<Mat>> {
        match self.dims.as_slice() {
            [k, r, c] => Ok((0..*k)
                .map(|i| from_row_major(*r, *c, &self.data[i * r * c..(i + 1) * r * c]))
                .collect()),
            d => Err(Error::InvalidTensor(format!("expected a 3-d tensor, got dims {:?}", d))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + 8 * self.dims.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(DTYPE_F64);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::BadMagic);
        }
        let need_header = |n: usize| -> Result<()> {
            if bytes.len() < n {
                Err(Error::TruncatedPayload { expected: n, found: bytes.len() })
            } else {
                Ok(())
            }
        };
        need_header(13)?;
        if bytes[8] != DTYPE_F64 {
            return Err(Error::UnsupportedDtype(bytes[8]));
        }
        let ndim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        if ndim == 0 || ndim > 3 {
            return Err(Error::InvalidTensor(format!("ndim {} not in 1..=3", ndim)));
        }
        let header = 13 + 8 * ndim;
        need_header(header)?;
        let mut dims = Vec::with_capacity(ndim);
        for i in 0..ndim {
            let off = 13 + 8 * i;
            let d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            dims.push(usize::try_from(d).map_err(|_| Error::InvalidTensor("dimension overflow".into()))?);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::InvalidTensor("dimension overflow".into()))?;
        let expected = count
            .checked_mul(8)
            .ok_or_else(|| Error::InvalidTensor("dimension overflow".into()))?;
        let payload = &bytes[header..];
        if payload.len() < expected {
            return Err(Error::TruncatedPayload { expected, found: payload.len() });
        }
        if payload.len() > expected {
            return Err(Error::InvalidTensor(format!(
                "{} trailing bytes after payload",
                payload.len() - expected
            )));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dims, data })
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    Tensor::from_bytes(&bytes)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    if t.data.is_empty() {
        return Err(Error::InvalidTensor("refusing to write an empty tensor".into()));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&t.to_bytes())?;
    f.sync_all()?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Mat> {
    read_tensor(path)?.to_matrix()
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Mat) -> Result<()> {
    write_tensor(path, &Tensor::from_matrix(m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("eye.pkt");
        let eye = Mat::identity(2, 2);
        write_matrix(&p, &eye).unwrap();
        assert_eq!(read_matrix(&p).unwrap(), eye);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = Tensor::from_vec(&[1.0]).to_bytes();
        bytes[..8].copy_from_slice(b"XXXXXXXX");
        assert!(matches!(Tensor::from_bytes(&bytes), Err(Error::BadMagic)));
    }

    #[test]
    fn unsupported_dtype_and_truncation() {
        let mut bytes = Tensor::from_vec(&[1.0, 2.0]).to_bytes();
        bytes[8] = 1;
        assert!(matches!(Tensor::from_bytes(&bytes), Err(Error::UnsupportedDtype(1))));
        let bytes = Tensor::from_vec(&[1.0, 2.0]).to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Tensor::from_bytes(cut),
            Err(Error::TruncatedPayload { expected: 16, found: 13 })
        ));
    }

    #[test]
    fn one_by_one_zero_layout() {
        let t = Tensor::from_matrix(&Mat::zeros(1, 1));
        let b = t.to_bytes();
        assert_eq!(b.len(), 8 + 1 + 4 + 16 + 8);
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(b[8], 0);
        assert_eq!(&b[9..13], &2u32.to_le_bytes());
        assert_eq!(&b[13..21], &1u64.to_le_bytes());
        assert_eq!(&b[21..29], &1u64.to_le_bytes());
        assert!(b[29..].iter().all(|&x| x == 0));
    }

    #[test]
    fn row_major_offsets() {
        // (2,3): element (1,0) is the 4th payload value
        let m = from_row_major(2, 3, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let b = Tensor::from_matrix(&m).to_bytes();
        let header = 13 + 16;
        let v = f64::from_le_bytes(b[header + 3 * 8..header + 4 * 8].try_into().unwrap());
        assert_eq!(v, m[(1, 0)]);

        // (3,4,2): value at [i,j,k] sits at payload offset 8*((i*4 + j)*2 + k)
        let data: Vec<f64> = (0..24).map(|x| x as f64 * 0.5 - 3.0).collect();
        let t = Tensor::new(vec![3, 4, 2], data.clone()).unwrap();
        let bytes = t.to_bytes();
        let header = 13 + 24;
        for i in 0..3 {
            for j in 0..4 {
                for k in 0..2 {
                    let off = header + 8 * ((i * 4 + j) * 2 + k);
                    let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
                    assert_eq!(v, data[(i * 4 + j) * 2 + k]);
                }
            }
        }
        let back = Tensor::from_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        let stack = back.to_stack().unwrap();
        assert_eq!(stack[2][(3, 1)], data[(2 * 4 + 3) * 2 + 1]);
    }

    #[test]
    fn write_read_write_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.pkt");
        let b = dir.path().join("b.pkt");
        let t = Tensor::new(vec![2, 2], vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        write_tensor(&a, &t).unwrap();
        let back = read_tensor(&a).unwrap();
        write_tensor(&b, &back).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn empty_write_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![0, 3], vec![]).unwrap();
        assert!(write_tensor(dir.path().join("e.pkt"), &t).is_err());
    }

    proptest::proptest! {
        #[test]
        fn round_trip_is_bitwise(rows in 1usize..5, cols in 1usize..5, seed in proptest::prelude::any::<u64>()) {
            let mut x = seed;
            let data: Vec<f64> = (0..rows * cols).map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits(x >> 2) // finite: top exponent bits cleared
            }).collect();
            let t = Tensor::new(vec![rows, cols], data).unwrap();
            let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
            proptest::prop_assert_eq!(back.dims(), t.dims());
            for (a, b) in back.data().iter().zip(t.data()) {
                proptest::prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
