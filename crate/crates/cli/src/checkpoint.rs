//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        4 bytes  "SSMC"
//! version      u32      FORMAT_VERSION
//! precision    u32      32 or 64, the width of every tensor payload
//! seed         u64      } training RNG state: every shuffle and augmentation
//! next_epoch   u64      } stream is derived from (seed, epoch)
//! input        3 x u64  channels, height, width
//! num_classes  u64
//! config       u64 length + UTF-8 TOML of the resolved run config
//! norm         u32 channel count c (0 = none), c x f64 mean, c x f64 std
//! entries      u64 count, then per entry:
//!   name       u32 length + UTF-8 (stable layer path, e.g. "head.fc2.weight")
//!   kind       u8       0 trainable, 1 buffer, 2 momentum velocity
//!   ndim       u32
//!   dims       ndim x u64
//!   payload    numel x (4 or 8) bytes
//! ```

use std::fs;
use std::path::Path;

use ssm_core::{Model, Normalization, ParamKind, Precision, Scalar, SgdState, Tensor};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MAGIC: [u8; 4] = *b"SSMC";
pub const FORMAT_VERSION: u32 = 1;

const KIND_TRAINABLE: u8 = 0;
const KIND_BUFFER: u8 = 1;
const KIND_VELOCITY: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub config: RunConfig,
    pub seed: u64,
    pub next_epoch: usize,
    pub normalization: Option<Normalization>,
    pub model: Model<T>,
    pub sgd: SgdState<T>,
}

/// A checkpoint of either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn config(&self) -> &RunConfig {
        match self {
            AnyCheckpoint::F32(c) => &c.config,
            AnyCheckpoint::F64(c) => &c.config,
        }
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        match self {
            AnyCheckpoint::F32(c) => c.normalization.as_ref(),
            AnyCheckpoint::F64(c) => c.normalization.as_ref(),
        }
    }

    pub fn to_f64(&self) -> Model<f64> {
        match self {
            AnyCheckpoint::F32(c) => c.model.cast(),
            AnyCheckpoint::F64(c) => c.model.clone(),
        }
    }
}

fn velocity_name(name: &str) -> String {
    format!("velocity:{name}")
}

/// Borrowed view of everything a checkpoint stores.
pub struct State<'a, T: Scalar> {
    pub config: &'a RunConfig,
    pub seed: u64,
    pub next_epoch: usize,
    pub normalization: Option<&'a Normalization>,
    pub model: &'a Model<T>,
    pub sgd: &'a SgdState<T>,
}

impl<T: Scalar> State<'_, T> {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&T::PRECISION.bits().to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.next_epoch as u64).to_le_bytes());
        for d in self.model.spec.input {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.model.num_classes() as u64).to_le_bytes());

        let echo = self.config.to_toml();
        out.extend_from_slice(&(echo.len() as u64).to_le_bytes());
        out.extend_from_slice(echo.as_bytes());

        match self.normalization {
            None => out.extend_from_slice(&0u32.to_le_bytes()),
            Some(n) => {
                out.extend_from_slice(&(n.mean.len() as u32).to_le_bytes());
                for v in n.mean.iter().chain(&n.std) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }

        let mut entries: Vec<(String, u8, &Tensor<T>)> = Vec::new();
        for (id, p) in self.model.store.iter() {
            let kind = match p.kind {
                ParamKind::Trainable => KIND_TRAINABLE,
                ParamKind::Buffer => KIND_BUFFER,
            };
            entries.push((p.name.clone(), kind, &p.tensor));
            if let Some(Some(v)) = self.sgd.velocity.get(id.index()) {
                entries.push((velocity_name(&p.name), KIND_VELOCITY, v));
            }
        }
        out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (name, kind, tensor) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(kind);
            out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        fs::write(path, self.encode()).map_err(|e| CliError::io(path, e))
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn state(&self) -> State<'_, T> {
        State {
            config: &self.config,
            seed: self.seed,
            next_epoch: self.next_epoch,
            normalization: self.normalization.as_ref(),
            model: &self.model,
            sgd: &self.sgd,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        self.state().encode()
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        fs::write(path, self.encode()).map_err(|e| CliError::io(path, e))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CliError::Incompatible(format!("checkpoint truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> CliResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> CliResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> CliResult<usize> {
        usize::try_from(self.u64()?).map_err(|_| CliError::Incompatible("checkpoint size field overflows".into()))
    }

    fn f64(&mut self) -> CliResult<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> CliResult<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| CliError::Incompatible("checkpoint string is not UTF-8".into()))
    }
}

struct Header {
    seed: u64,
    next_epoch: usize,
    input: [usize; 3],
    num_classes: usize,
    config: RunConfig,
    normalization: Option<Normalization>,
}

fn decode_as<T: Scalar>(r: &mut Reader, h: Header) -> CliResult<Checkpoint<T>> {
    let mut config = h.config;
    config.seed = h.seed;
    let spec = config.model_spec(h.input, h.num_classes);
    let mut model: Model<T> = Model::new(spec, h.seed)?;
    let mut sgd = SgdState::new(&model.store);
    let mut seen = vec![false; model.store.len()];

    let count = r.usize()?;
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let kind = r.u8()?;
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.usize()).collect::<CliResult<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let payload = r.take(numel.checked_mul(T::BYTES).ok_or_else(|| CliError::Incompatible("tensor too large".into()))?)?;
        let data: Vec<T> = payload.chunks_exact(T::BYTES).map(T::read_le).collect();

        let base = if kind == KIND_VELOCITY { name.strip_prefix("velocity:").unwrap_or(&name) } else { &name };
        let id = model
            .store
            .find(base)
            .ok_or_else(|| CliError::Incompatible(format!("checkpoint entry {name} has no matching layer")))?;
        let expected = model.store.get(id).shape().to_vec();
        if dims != expected {
            return Err(CliError::Incompatible(format!("{name}: checkpoint shape {dims:?}, model expects {expected:?}")));
        }
        let expected_kind = match model.store.entry(id).kind {
            ParamKind::Trainable => KIND_TRAINABLE,
            ParamKind::Buffer => KIND_BUFFER,
        };
        match kind {
            KIND_VELOCITY if expected_kind == KIND_TRAINABLE => {
                sgd.velocity[id.index()] = Some(Tensor::new(dims, data)?);
            }
            k if k == expected_kind => {
                model.store.get_mut(id).data_mut().copy_from_slice(&data);
                seen[id.index()] = true;
            }
            _ => return Err(CliError::Incompatible(format!("{name}: unexpected entry kind {kind}"))),
        }
    }
    if r.pos != r.bytes.len() {
        return Err(CliError::Incompatible(format!("{} trailing bytes after checkpoint entries", r.bytes.len() - r.pos)));
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let missing = model.store.iter().nth(i).map(|(_, p)| p.name.clone()).unwrap_or_default();
        return Err(CliError::Incompatible(format!("checkpoint lacks {missing}")));
    }
    Ok(Checkpoint { config, seed: h.seed, next_epoch: h.next_epoch, normalization: h.normalization, model, sgd })
}

pub fn decode(bytes: &[u8]) -> CliResult<AnyCheckpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(&MAGIC[..]) {
        return Err(CliError::Incompatible("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CliError::Incompatible(format!(
            "checkpoint format version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let bits = r.u32()?;
    let precision = Precision::from_bits(bits)
        .ok_or_else(|| CliError::Incompatible(format!("checkpoint precision {bits} is not 32 or 64")))?;
    let seed = r.u64()?;
    let next_epoch = r.usize()?;
    let input = [r.usize()?, r.usize()?, r.usize()?];
    let num_classes = r.usize()?;
    let echo_len = r.usize()?;
    let echo = r.string(echo_len)?;
    let config = RunConfig::parse(&echo)
        .map_err(|e| CliError::Incompatible(format!("checkpoint config echo does not parse: {e}")))?;
    let channels = r.u32()? as usize;
    let normalization = if channels == 0 {
        None
    } else {
        let mean = (0..channels).map(|_| r.f64()).collect::<CliResult<Vec<_>>>()?;
        let std = (0..channels).map(|_| r.f64()).collect::<CliResult<Vec<_>>>()?;
        Some(Normalization { mean, std })
    };
    let header = Header { seed, next_epoch, input, num_classes, config, normalization };
    Ok(match precision {
        Precision::F32 => AnyCheckpoint::F32(decode_as(&mut r, header)?),
        Precision::F64 => AnyCheckpoint::F64(decode_as(&mut r, header)?),
    })
}

pub fn load(path: &Path) -> CliResult<AnyCheckpoint> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        CliError::Incompatible(m) => CliError::Incompatible(format!("{}: {m}", path.display())),
        other => other,
    })
}
