//! Dense row-major f32 tensors (rank 1..=4, images laid out N x C x H x W)
//! and the `DTB1` on-disk format.
//!
//! DTB1 layout: magic `DTB1`, 1 dtype byte (0 = f32, 1 = i32), 1 rank byte,
//! rank little-endian u32 extents, then the row-major little-endian payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const DTB1_MAGIC: &[u8; 4] = b"DTB1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::invalid(
                "tensor",
                format!("rank must be 1..=4, got {}", shape.len()),
            ));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::invalid("tensor", format!("zero extent in {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} implies {len} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extents interpreted as N x C x H x W; lower ranks are padded with
    /// leading singleton dimensions.
    pub fn nchw(&self) -> (usize, usize, usize, usize) {
        let s = &self.shape;
        match s.len() {
            1 => (1, 1, 1, s[0]),
            2 => (1, 1, s[0], s[1]),
            3 => (1, s[0], s[1], s[2]),
            _ => (s[0], s[1], s[2], s[3]),
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn write_dtb(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut run = || -> std::io::Result<()> {
            w.write_all(DTB1_MAGIC)?;
            w.write_all(&[0u8, self.shape.len() as u8])?;
            for &e in &self.shape {
                w.write_all(&(e as u32).to_le_bytes())?;
            }
            for &v in &self.data {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        run().map_err(|e| Error::io(path, e))
    }

    pub fn read_dtb(path: &Path) -> Result<Self> {
        let (dtype, shape, payload) = read_dtb_raw(path)?;
        if dtype != 0 {
            return Err(Error::format(path, format!("expected f32 (dtype 0), got {dtype}")));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(shape, data)
    }
}

/// Integer-code blobs (dtype 1) used by the fixed-point checkpoint export.
pub fn write_dtb_i32(path: &Path, shape: &[usize], codes: &[i32]) -> Result<()> {
    let len: usize = shape.iter().product();
    if len != codes.len() {
        return Err(Error::shape(
            "write_dtb_i32",
            format!("shape {shape:?} implies {len} elements, got {}", codes.len()),
        ));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut run = || -> std::io::Result<()> {
        w.write_all(DTB1_MAGIC)?;
        w.write_all(&[1u8, shape.len() as u8])?;
        for &e in shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in codes {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    run().map_err(|e| Error::io(path, e))
}

pub fn read_dtb_i32(path: &Path) -> Result<(Vec<usize>, Vec<i32>)> {
    let (dtype, shape, payload) = read_dtb_raw(path)?;
    if dtype != 1 {
        return Err(Error::format(path, format!("expected i32 (dtype 1), got {dtype}")));
    }
    let codes = payload
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((shape, codes))
}

fn read_dtb_raw(path: &Path) -> Result<(u8, Vec<usize>, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = [0u8; 6];
    r.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    if &header[0..4] != DTB1_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let dtype = header[4];
    let rank = header[5] as usize;
    if rank == 0 || rank > 4 {
        return Err(Error::format(path, format!("bad rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        shape.push(u32::from_le_bytes(buf) as usize);
    }
    let len: usize = shape.iter().product();
    let mut payload = vec![0u8; len * 4];
    r.read_exact(&mut payload).map_err(|e| Error::io(path, e))?;
    Ok((dtype, shape, payload))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn dtb_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dtb");
        let t = Tensor::new(vec![1, 2, 2, 3], (0..12).map(|i| i as f32 * 0.5).collect()).unwrap();
        t.write_dtb(&path).unwrap();
        let back = Tensor::read_dtb(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn dtb_header_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dtb");
        Tensor::new(vec![2], vec![1.0, -1.0]).unwrap().write_dtb(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"DTB1");
        assert_eq!(bytes[4], 0); // f32
        assert_eq!(bytes[5], 1); // rank
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(bytes.len(), 10 + 8);
    }

    #[test]
    fn i32_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.dtb");
        write_dtb_i32(&path, &[2, 2], &[-7, 0, 3, 7]).unwrap();
        let (shape, codes) = read_dtb_i32(&path).unwrap();
        assert_eq!(shape, vec![2, 2]);
        assert_eq!(codes, vec![-7, 0, 3, 7]);
        assert!(Tensor::read_dtb(&path).is_err());
    }
}
