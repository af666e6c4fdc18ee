//! Checkpoint container.
//!
//! Layout (version 1, all integers little-endian):
//!
//! ```text
//! magic "LORARFCK", u16 version, u16 reserved
//! front end   u8 representation, u8 compensate,
//!             u32 sf, f64 bw, f64 fc, f64 ts, u32 n_preambles,
//!             u64 n_samples, u64 window_len, u64 hop
//! spec        u32 c, u32 h, u32 w, u32 layer count, then per layer a u8 tag:
//!             1 conv (u32 filters, kernel[2], stride[2], padding[4])
//!             2 batchnorm, 3 relu, 4 maxpool (u32 size[2], stride[2]),
//!             5 dense (u32 units), 6 softmax
//! classes     u32 count, u32 device id each
//! parameters  u64 count, f32 each, in trainable-parameter order
//! bn stats    per batchnorm layer: f32 running mean, f32 running var per channel
//! database    f64 lambda, u32 count, (u32 id, f64 reference CFO) each
//! selection   u32 session count, u32 each, u64 start, u8 has_count, u64 count
//! provenance  u64 dataset seed, 32-byte dataset digest
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::binio::{Reader, Writer};
use super::dataset::{read_params, write_params};
use super::pipeline::{Checkpoint, FrontEnd, Selection};
use crate::classifier::network::Layer;
use crate::classifier::{CfoDatabase, CnnSpec, LayerSpec, Model, Network};
use crate::error::{Error, Result};
use crate::repr::{ReprConfig, ReprKind};

const MAGIC: &[u8; 8] = b"LORARFCK";
const VERSION: u16 = 1;

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn write_u32s<W: Write>(w: &mut Writer<W>, xs: &[usize]) -> io::Result<()> {
    for &x in xs {
        w.u32(u32::try_from(x).map_err(|_| invalid("value exceeds u32"))?)?;
    }
    Ok(())
}

fn read_u32s<R: Read, const N: usize>(r: &mut Reader<R>) -> io::Result<[usize; N]> {
    let mut out = [0; N];
    for v in &mut out {
        *v = r.u32()? as usize;
    }
    Ok(out)
}

fn write_spec<W: Write>(w: &mut Writer<W>, spec: &CnnSpec) -> io::Result<()> {
    write_u32s(w, &spec.input)?;
    w.u32(spec.layers.len() as u32)?;
    for layer in &spec.layers {
        match *layer {
            LayerSpec::Conv {
                filters,
                kernel,
                stride,
                padding,
            } => {
                w.u8(1)?;
                write_u32s(w, &[filters])?;
                write_u32s(w, &kernel)?;
                write_u32s(w, &stride)?;
                write_u32s(w, &padding)?;
            }
            LayerSpec::BatchNorm => w.u8(2)?,
            LayerSpec::Relu => w.u8(3)?,
            LayerSpec::MaxPool { size, stride } => {
                w.u8(4)?;
                write_u32s(w, &size)?;
                write_u32s(w, &stride)?;
            }
            LayerSpec::Dense { units } => {
                w.u8(5)?;
                write_u32s(w, &[units])?;
            }
            LayerSpec::Softmax => w.u8(6)?,
        }
    }
    Ok(())
}

fn read_spec<R: Read>(r: &mut Reader<R>) -> io::Result<CnnSpec> {
    let input = read_u32s::<_, 3>(r)?;
    let count = r.u32()? as usize;
    if count > 1024 {
        return Err(invalid(format!("implausible layer count {count}")));
    }
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        layers.push(match r.u8()? {
            1 => {
                let [filters] = read_u32s(r)?;
                LayerSpec::Conv {
                    filters,
                    kernel: read_u32s(r)?,
                    stride: read_u32s(r)?,
                    padding: read_u32s(r)?,
                }
            }
            2 => LayerSpec::BatchNorm,
            3 => LayerSpec::Relu,
            4 => LayerSpec::MaxPool {
                size: read_u32s(r)?,
                stride: read_u32s(r)?,
            },
            5 => {
                let [units] = read_u32s(r)?;
                LayerSpec::Dense { units }
            }
            6 => LayerSpec::Softmax,
            tag => return Err(invalid(format!("unknown layer tag {tag}"))),
        });
    }
    Ok(CnnSpec { input, layers })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(Vec::new());
        self.write(&mut w).expect("writing to memory");
        w.into_inner()
    }

    fn write<W: Write>(&self, w: &mut Writer<W>) -> io::Result<()> {
        w.bytes(MAGIC)?;
        w.u16(VERSION)?;
        w.u16(0)?;

        let fe = &self.front_end;
        w.u8(fe.kind.code())?;
        w.u8(fe.compensate as u8)?;
        write_params(w, &fe.params)?;
        w.usize(fe.repr.n_samples)?;
        w.usize(fe.repr.window_len)?;
        w.usize(fe.repr.hop)?;

        write_spec(w, self.model.spec())?;
        w.u32(self.model.classes().len() as u32)?;
        for &c in self.model.classes() {
            w.u32(c)?;
        }

        let mut net = self.model.network().clone();
        let params = net.flat_params();
        w.usize(params.len())?;
        for p in params {
            w.f32(p)?;
        }
        for layer in net.layers() {
            if let Layer::BatchNorm(bn) = layer {
                for (m, v) in bn.running_mean.iter().zip(&bn.running_var) {
                    w.f32(*m)?;
                    w.f32(*v)?;
                }
            }
        }

        w.f64(self.database.lambda)?;
        w.u32(self.database.references.len() as u32)?;
        for (&id, &cfo) in &self.database.references {
            w.u32(id)?;
            w.f64(cfo)?;
        }

        let sel = &self.train_selection;
        w.u32(sel.sessions.len() as u32)?;
        for &s in &sel.sessions {
            w.u32(s)?;
        }
        w.usize(sel.start)?;
        w.u8(sel.count.is_some() as u8)?;
        w.usize(sel.count.unwrap_or(0))?;

        w.u64(self.dataset_seed)?;
        w.bytes(&self.dataset_digest)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let format = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let mut r = Reader::new(bytes);
        let ckpt = Self::read(&mut r).map_err(|e| match e {
            ReadError::Io(e) if e.kind() == io::ErrorKind::UnexpectedEof => format("truncated checkpoint".into()),
            ReadError::Io(e) => format(e.to_string()),
            ReadError::Model(e) => e,
        })?;
        if !r.expect_eof().map_err(|e| format(e.to_string()))? {
            return Err(format("trailing bytes after checkpoint".into()));
        }
        Ok(ckpt)
    }

    fn read<R: Read>(r: &mut Reader<R>) -> std::result::Result<Self, ReadError> {
        if &r.array::<8>()? != MAGIC {
            return Err(invalid("not a checkpoint (bad magic)").into());
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(invalid(format!("unsupported checkpoint version {version}")).into());
        }
        r.u16()?;

        let code = r.u8()?;
        let kind = ReprKind::from_code(code).ok_or_else(|| invalid(format!("unknown representation code {code}")))?;
        let compensate = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(invalid(format!("bad compensate flag {v}")).into()),
        };
        let params = read_params(r)?;
        let repr = ReprConfig {
            n_samples: r.usize()?,
            window_len: r.usize()?,
            hop: r.usize()?,
        };
        let front_end = FrontEnd {
            params,
            kind,
            repr,
            compensate,
        };

        let spec = read_spec(r)?;
        let n_classes = r.u32()? as usize;
        if n_classes > 1 << 20 {
            return Err(invalid(format!("implausible class count {n_classes}")).into());
        }
        let classes = (0..n_classes).map(|_| r.u32()).collect::<io::Result<Vec<_>>>()?;

        let mut net = Network::<f32>::new(&spec, 0)?;
        let expected = spec.param_count()?;
        let count = r.usize()?;
        if count != expected {
            return Err(invalid(format!("{count} parameters stored, architecture needs {expected}")).into());
        }
        let mut io_err = None;
        net.visit_params(|p, _| {
            for v in p {
                match r.f32() {
                    Ok(x) => *v = x,
                    Err(e) => {
                        io_err.get_or_insert(e);
                    }
                }
            }
        });
        if let Some(e) = io_err {
            return Err(e.into());
        }
        for layer in net.layers_mut() {
            if let Layer::BatchNorm(bn) = layer {
                for i in 0..bn.channels {
                    bn.running_mean[i] = r.f32()?;
                    bn.running_var[i] = r.f32()?;
                }
            }
        }
        let model = Model::from_parts(net, classes)?;

        let lambda = r.f64()?;
        let entries = r.u32()? as usize;
        let mut references = BTreeMap::new();
        for _ in 0..entries.min(1 << 20) {
            let id = r.u32()?;
            references.insert(id, r.f64()?);
        }
        let database = CfoDatabase::new(references, lambda)?;

        let n_sessions = r.u32()? as usize;
        if n_sessions > 1 << 20 {
            return Err(invalid(format!("implausible session count {n_sessions}")).into());
        }
        let sessions = (0..n_sessions).map(|_| r.u32()).collect::<io::Result<Vec<_>>>()?;
        let start = r.usize()?;
        let has_count = r.u8()? != 0;
        let count = r.usize()?;
        let train_selection = Selection::new(sessions, start, has_count.then_some(count));

        let dataset_seed = r.u64()?;
        let dataset_digest = r.array::<32>()?;
        Ok(Self {
            model,
            database,
            front_end,
            train_selection,
            dataset_seed,
            dataset_digest,
        })
    }

    /// Writes the checkpoint; refuses to replace an existing file unless `force`.
    pub fn save(&self, path: impl AsRef<Path>, force: bool) -> Result<()> {
        let path = path.as_ref();
        if path.exists() && !force {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                path.display()
            )));
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

enum ReadError {
    Io(io::Error),
    Model(Error),
}

impl From<io::Error> for ReadError {
    fn from(e: io::Error) -> Self {
        ReadError::Io(e)
    }
}

impl From<Error> for ReadError {
    fn from(e: Error) -> Self {
        ReadError::Model(e)
    }
}
