//! Little-endian primitives for the binary containers.

use std::io::{Read, Write};

pub struct Writer<W> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn into_inner(self) -> W {
        self.inner
    }

    pub fn bytes(&mut self, b: &[u8]) -> std::io::Result<()> {
        self.inner.write_all(b)
    }

    pub fn u8(&mut self, v: u8) -> std::io::Result<()> {
        self.bytes(&[v])
    }

    pub fn u16(&mut self, v: u16) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f32(&mut self, v: f32) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn usize(&mut self, v: usize) -> std::io::Result<()> {
        self.u64(v as u64)
    }
}

pub struct Reader<R> {
    inner: R,
}

macro_rules! read_le {
    ($name:ident, $t:ty) => {
        pub fn $name(&mut self) -> std::io::Result<$t> {
            let mut b = [0u8; std::mem::size_of::<$t>()];
            self.inner.read_exact(&mut b)?;
            Ok(<$t>::from_le_bytes(b))
        }
    };
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    pub fn array<const N: usize>(&mut self) -> std::io::Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b)?;
        Ok(b)
    }

    read_le!(u8, u8);
    read_le!(u16, u16);
    read_le!(u32, u32);
    read_le!(u64, u64);
    read_le!(f32, f32);
    read_le!(f64, f64);

    /// A `u64` length that must fit in memory-sized arithmetic.
    pub fn usize(&mut self) -> std::io::Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidData, "length overflows usize"))
    }

    /// Succeeds only at end of input.
    pub fn expect_eof(&mut self) -> std::io::Result<bool> {
        let mut b = [0u8; 1];
        Ok(self.inner.read(&mut b)? == 0)
    }
}
