//! Binary parameter snapshots.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  b"PTCK"
//! count        u32      number of records
//! record * count:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   rank       u32
//!   dims       rank * u64
//!   payload    product(dims) * f64 (IEEE-754, little-endian)
//! ```

use std::io::{Read, Write};

use super::tensor::Tensor;
use super::NumericsError;

pub const MAGIC: &[u8; 4] = b"PTCK";

fn io_err(e: std::io::Error) -> NumericsError {
    NumericsError::Checkpoint(e.to_string())
}

pub fn write_records<W: Write>(out: &mut W, records: &[(String, Tensor)]) -> Result<(), NumericsError> {
    out.write_all(MAGIC).map_err(io_err)?;
    out.write_all(&(records.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    for (name, t) in records {
        out.write_all(&(name.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        out.write_all(name.as_bytes()).map_err(io_err)?;
        out.write_all(&(t.rank() as u32).to_le_bytes())
            .map_err(io_err)?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf).map_err(io_err)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NumericsError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NumericsError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_records<R: Read>(input: &mut R) -> Result<Vec<(String, Tensor)>, NumericsError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(NumericsError::Checkpoint("bad magic".into()));
    }
    let count = read_u32(input)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = read_u32(input)? as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name)
            .map_err(|_| NumericsError::Checkpoint("record name is not UTF-8".into()))?;
        let rank = read_u32(input)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(input)? as usize);
        }
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 8];
        input.read_exact(&mut raw).map_err(io_err)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let recs = vec![
            ("a.w".to_string(), Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.25]).unwrap()),
            ("b".to_string(), Tensor::scalar(std::f64::consts::PI)),
        ];
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        assert_eq!(&buf[..4], b"PTCK");
        let back = read_records(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in recs.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            for (a, b) in t1.data().iter().zip(t2.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn byte_layout_is_stable() {
        let mut buf = Vec::new();
        write_records(&mut buf, &[("x".into(), Tensor::from_vec(vec![1.0]))]).unwrap();
        let mut want = b"PTCK".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.push(b'x');
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&1.0f64.to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn rejects_wrong_magic() {
        let buf = b"NOPE\0\0\0\0".to_vec();
        assert!(read_records(&mut buf.as_slice()).is_err());
    }
}
