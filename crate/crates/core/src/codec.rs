//! Little-endian binary helpers shared by the dataset and checkpoint formats,
//! plus the config hash.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// First 8 bytes (big-endian) of SHA-256 over the compact JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> u64 {
    let json = serde_json::to_vec(value).expect("config types serialize infallibly");
    let digest = Sha256::digest(&json);
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn hash_hex(hash: u64) -> String {
    format!("{hash:016x}")
}

/// SHA-256 prefix of arbitrary bytes, as hex.
pub fn bytes_hash_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hash_hex(u64::from_be_bytes(digest[..8].try_into().expect("8 bytes")))
}

/// Full SHA-256 of arbitrary bytes, as hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Reader that tracks its byte offset so decode errors can point at it.
pub struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    pub fn new(inner: R) -> Self {
        OffsetReader { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn corrupt(&self, detail: impl Into<String>) -> Error {
        Error::Corrupt {
            offset: self.offset,
            detail: detail.into(),
        }
    }

    fn wrap<T>(&self, r: std::io::Result<T>, what: &str) -> Result<T> {
        r.map_err(|e| self.corrupt(format!("reading {what}: {e}")))
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        let r = self.read_u8();
        self.wrap(r, what)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let r = self.read_u32::<LittleEndian>();
        self.wrap(r, what)
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let r = self.read_u64::<LittleEndian>();
        self.wrap(r, what)
    }

    pub fn u128(&mut self, what: &str) -> Result<u128> {
        let r = self.read_u128::<LittleEndian>();
        self.wrap(r, what)
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        let r = self.read_f64::<LittleEndian>();
        self.wrap(r, what)
    }

    pub fn bytes(&mut self, len: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        let r = self.read_exact(&mut buf);
        self.wrap(r, what)?;
        Ok(buf)
    }

    pub fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        if len > 1 << 24 {
            return Err(self.corrupt(format!("{what}: implausible length {len}")));
        }
        let bytes = self.bytes(len, what)?;
        String::from_utf8(bytes).map_err(|_| self.corrupt(format!("{what}: invalid utf-8")))
    }

    /// `expected_len` consecutive f64 values.
    pub fn f64_array(&mut self, expected_len: usize, what: &str) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(expected_len);
        for _ in 0..expected_len {
            out.push(self.f64(what)?);
        }
        Ok(out)
    }

    pub fn expect_magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        let found = self.bytes(8, "magic")?;
        if found != magic {
            return Err(Error::Corrupt {
                offset: 0,
                detail: format!("bad magic {found:?}"),
            });
        }
        Ok(())
    }

    /// True if the stream has no more bytes.
    pub fn at_end(&mut self) -> Result<bool> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(true),
            Ok(_) => Ok(false),
            Err(e) => Err(self.corrupt(e.to_string())),
        }
    }
}

impl<R: Read> Read for OffsetReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.offset += n as u64;
        Ok(n)
    }
}

pub fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_u32::<LittleEndian>(v)?)
}

pub fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    Ok(w.write_u64::<LittleEndian>(v)?)
}

pub fn put_u128<W: Write>(w: &mut W, v: u128) -> Result<()> {
    Ok(w.write_u128::<LittleEndian>(v)?)
}

pub fn put_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    Ok(w.write_f64::<LittleEndian>(v)?)
}

pub fn put_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    put_u32(w, s.len() as u32)?;
    Ok(w.write_all(s.as_bytes())?)
}

pub fn put_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        put_f64(w, *v)?;
    }
    Ok(())
}
