//! "TSR1" tensor file format.
//!
//! Layout: 4-byte magic `TSR1`, one dtype byte (1 = f32, 2 = f64), one rank
//! byte, `rank` little-endian u64 extents, then the raw little-endian values
//! in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TSR1";

pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    write_tensor_as(path, tensor, DTYPE_F64)
}

pub fn write_tensor_as(path: &Path, tensor: &Tensor, dtype: u8) -> Result<()> {
    if dtype != DTYPE_F32 && dtype != DTYPE_F64 {
        return Err(Error::InvalidParam(format!("unknown dtype code {dtype}")));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&[dtype]).map_err(io_err)?;
    let rank = tensor.shape().len();
    if rank > u8::MAX as usize {
        return Err(Error::InvalidParam(format!("rank {rank} too large")));
    }
    w.write_all(&[rank as u8]).map_err(io_err)?;
    for &extent in tensor.shape() {
        w.write_all(&(extent as u64).to_le_bytes()).map_err(io_err)?;
    }
    match dtype {
        DTYPE_F64 => {
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
        _ => {
            for &v in tensor.data() {
                w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
            }
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::bad_format(path, "bad magic, expected TSR1"));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head).map_err(io_err)?;
    let (dtype, rank) = (head[0], head[1] as usize);
    if dtype != DTYPE_F32 && dtype != DTYPE_F64 {
        return Err(Error::bad_format(path, format!("unknown dtype code {dtype}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut ext = [0u8; 8];
        r.read_exact(&mut ext).map_err(io_err)?;
        shape.push(u64::from_le_bytes(ext) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    match dtype {
        DTYPE_F64 => {
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::bad_format(path, "truncated payload"))?;
                data.push(f64::from_le_bytes(buf));
            }
        }
        _ => {
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::bad_format(path, "truncated payload"))?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io_err)? != 0 {
        return Err(Error::bad_format(path, "trailing bytes after payload"));
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_f64_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tsr");
        let t = Tensor::new(vec![2, 3], vec![0.1, -2.5, 3e-17, f64::MAX, 0.0, -0.0]).unwrap();
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_layout_matches_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tsr");
        let t = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        write_tensor(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"TSR1");
        assert_eq!(bytes[4], DTYPE_F64);
        assert_eq!(bytes[5], 2); // rank
        assert_eq!(u64::from_le_bytes(bytes[6..14].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[14..22].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 22 + 16);
    }

    #[test]
    fn f32_roundtrip_narrows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t32.tsr");
        let t = Tensor::new(vec![2], vec![1.5, -0.25]).unwrap();
        write_tensor_as(&path, &t, DTYPE_F32).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.data(), &[1.5, -0.25]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsr");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            read_tensor(&path),
            Err(Error::BadFormat { .. } | Error::Io { .. })
        ));

        let good = dir.path().join("short.tsr");
        let t = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        write_tensor(&good, &t).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&good, bytes).unwrap();
        assert!(matches!(read_tensor(&good), Err(Error::BadFormat { .. })));
    }
}
