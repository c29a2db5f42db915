//! Binary tensor file format ".ten".
//!
//! Layout: magic "BTEN", u32 LE version (= 1), u8 dtype (= 1, float32),
//! u8 ndim, ndim x u32 LE dims, then the row-major float32 LE payload.
//! No padding, no compression. Round-trips are bitwise identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"BTEN";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    if t.ndim() > u8::MAX as usize {
        return Err(Error::format(path, format!("ndim {} exceeds 255", t.ndim())));
    }
    for (i, &d) in t.shape().iter().enumerate() {
        if d > u32::MAX as usize {
            return Err(Error::format(
                path,
                format!("dimension {} ({}) overflows u32", i, d),
            ));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(format!("create {:?}", path), e))?;
    let mut w = BufWriter::new(file);
    let mut write = |buf: &[u8]| -> Result<()> {
        w.write_all(buf)
            .map_err(|e| Error::io(format!("write {:?}", path), e))
    };
    write(&MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    write(&[DTYPE_F32, t.ndim() as u8])?;
    for &d in t.shape() {
        write(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        write(&v.to_le_bytes())?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("flush {:?}", path), e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(format!("open {:?}", path), e))?;
    let mut r = BufReader::new(file);

    let mut read_exact = |buf: &mut [u8], what: &str| -> Result<()> {
        r.read_exact(buf)
            .map_err(|_| Error::format(path, format!("truncated file while reading {}", what)))
    };

    let mut magic = [0u8; 4];
    read_exact(&mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(path, format!("bad magic bytes {:?}", magic)));
    }
    let mut v4 = [0u8; 4];
    read_exact(&mut v4, "version")?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {}", version)));
    }
    let mut hdr = [0u8; 2];
    read_exact(&mut hdr, "dtype/ndim")?;
    if hdr[0] != DTYPE_F32 {
        return Err(Error::format(path, format!("unsupported dtype {}", hdr[0])));
    }
    let ndim = hdr[1] as usize;

    let mut shape = Vec::with_capacity(ndim);
    let mut numel: u64 = 1;
    for i in 0..ndim {
        read_exact(&mut v4, "dims")?;
        let d = u32::from_le_bytes(v4) as u64;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::format(path, format!("dimension {} overflows element count", i)))?;
        shape.push(d as usize);
    }
    if numel > (u32::MAX as u64) * 16 {
        return Err(Error::format(
            path,
            format!("element count {} too large", numel),
        ));
    }

    let mut data = Vec::with_capacity(numel as usize);
    for _ in 0..numel {
        read_exact(&mut v4, "payload")?;
        data.push(f32::from_le_bytes(v4));
    }
    // Anything after the payload means the header lied about the shape.
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)
        .map_err(|e| Error::io(format!("read {:?}", path), e))?
        != 0
    {
        return Err(Error::format(path, "trailing bytes after payload".to_string()));
    }
    Tensor::from_vec(&shape, data)
}
