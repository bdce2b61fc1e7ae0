//! Single-tensor snapshot files: little-endian, magic "TAFT", u32 rank,
//! u64 extents, then the f64 payload.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub fn write_snapshot(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(b"TAFT")?;
    f.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        f.write_all(&(e as u64).to_le_bytes())?;
    }
    for &x in t.data() {
        f.write_all(&x.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<Tensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != b"TAFT" {
        return Err(Error::Data(format!("{}: not a TAFT snapshot", path.display())));
    }
    let mut b4 = [0u8; 4];
    f.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 8 {
        return Err(Error::Data(format!("implausible snapshot rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        f.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        f.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_shape_and_data() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.taf");
        let t = Tensor::from_vec(&[2, 1, 3], vec![0.5, -1.25, 3.0, 4.0, 5.5, -6.0]).unwrap();
        write_snapshot(&path, &t).unwrap();
        assert_eq!(read_snapshot(&path).unwrap(), t);
    }

    #[test]
    fn scalar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.taf");
        let t = Tensor::scalar(42.0).unwrap();
        write_snapshot(&path, &t).unwrap();
        assert_eq!(read_snapshot(&path).unwrap(), t);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"NOPEnope").unwrap();
        assert!(read_snapshot(&path).is_err());
    }
}
