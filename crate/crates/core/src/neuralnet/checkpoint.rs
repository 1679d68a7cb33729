//! Binary parameter checkpoints.
//!
//! ```text
//! "CFNN1\n"
//! u32 tensor_count, then per tensor: u32 rank, u64 dims[rank], f64 data[...]
//! AdamState: f64 lr, f64 beta1, f64 beta2, f64 epsilon, u64 t,
//!            u32 count + tensors (m), u32 count + tensors (v)
//! ```
//! All integers and reals little-endian.

use std::io::{Read, Write};

use super::{AdamState, NnError, Result, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"CFNN1\n";

fn write_tensors<W: Write>(out: &mut W, tensors: &[&Tensor]) -> Result<()> {
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut out: W, params: &[&Tensor], adam: &AdamState) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    write_tensors(&mut out, params)?;
    for v in [adam.lr, adam.beta1, adam.beta2, adam.epsilon] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&adam.t.to_le_bytes())?;
    write_tensors(&mut out, &adam.m.iter().collect::<Vec<_>>())?;
    write_tensors(&mut out, &adam.v.iter().collect::<Vec<_>>())?;
    out.flush()?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => NnError::TruncatedFile,
        _ => NnError::Io(e),
    })?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    read_exact::<_, 4>(r).map(u32::from_le_bytes)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    read_exact::<_, 8>(r).map(u64::from_le_bytes)
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    read_exact::<_, 8>(r).map(f64::from_le_bytes)
}

// Upper bound on a single tensor, guards allocation against corrupt counts.
const MAX_TENSOR_LEN: u64 = 1 << 32;

fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<Tensor>> {
    let count = read_u32(r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let rank = read_u32(r)?;
        if rank > 8 {
            return Err(NnError::InvalidTensor(format!("rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut len: u64 = 1;
        for _ in 0..rank {
            let d = read_u64(r)?;
            len = len.saturating_mul(d);
            shape.push(d as usize);
        }
        if len > MAX_TENSOR_LEN {
            return Err(NnError::InvalidTensor(format!("tensor of {len} values")));
        }
        let mut data = Vec::with_capacity(len as usize);
        for _ in 0..len {
            data.push(read_f64(r)?);
        }
        out.push(Tensor::new(shape, data)?);
    }
    Ok(out)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Vec<Tensor>, AdamState)> {
    let magic: [u8; 6] = read_exact(&mut r).map_err(|e| match e {
        NnError::TruncatedFile => NnError::BadMagic,
        e => e,
    })?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NnError::BadMagic);
    }
    let params = read_tensors(&mut r)?;
    let lr = read_f64(&mut r)?;
    let beta1 = read_f64(&mut r)?;
    let beta2 = read_f64(&mut r)?;
    let epsilon = read_f64(&mut r)?;
    let t = read_u64(&mut r)?;
    let m = read_tensors(&mut r)?;
    let v = read_tensors(&mut r)?;
    Ok((params, AdamState { lr, beta1, beta2, epsilon, t, m, v }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Vec<Tensor>, AdamState) {
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 0.1, -0.0]).unwrap();
        let b = Tensor::vector(vec![std::f64::consts::PI]);
        let mut adam = AdamState::new(1e-4, &[&a, &b]);
        adam.t = 17;
        adam.m[0].data_mut()[1] = 0.125;
        adam.v[1].data_mut()[0] = 3e-9;
        (vec![a, b], adam)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (params, adam) = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &params.iter().collect::<Vec<_>>(), &adam).unwrap();
        assert_eq!(&buf[..6], CHECKPOINT_MAGIC);
        let (p2, a2) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(p2.len(), 2);
        for (x, y) in params.iter().zip(&p2) {
            assert_eq!(x.shape(), y.shape());
            let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        assert_eq!(a2, adam);
    }

    #[test]
    fn corrupt_inputs() {
        let (params, adam) = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &params.iter().collect::<Vec<_>>(), &adam).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(NnError::BadMagic)));
        assert!(matches!(read_checkpoint(&buf[..buf.len() - 3]), Err(NnError::TruncatedFile)));
        assert!(matches!(read_checkpoint(&buf[..3]), Err(NnError::BadMagic)));
    }
}
