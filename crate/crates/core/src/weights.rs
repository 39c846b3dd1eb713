//! TFRW named-tensor weight files and the immutable [`WeightStore`].
//!
//! Layout (little-endian):
//!
//! ```text
//! "TFRW" | u32 version=1 | u32 tensor_count
//! per tensor: u32 name_len | name (UTF-8) | u8 dtype (0=f32) | u8 ndim | ndim x u64 dims | f32 payload
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::{architecture, ConvSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Kernel4D;

pub const MAGIC: [u8; 4] = *b"TFRW";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
/// Metadata tensor recording the image preprocessing convention.
pub const PREPROC_TENSOR: &str = "meta.preproc";
/// `meta.preproc` value for unit-range RGB with ImageNet mean/std.
pub const PREPROC_IMAGENET_UNIT: u32 = 0;

const MAX_NAME_LEN: usize = 1 << 12;
const MAX_NDIM: usize = 8;

/// One raw tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            dims,
            data,
        }
    }
}

/// Serializes tensors in the given order. Fails with `InvalidInput` before
/// writing anything if a payload length disagrees with its dims.
pub fn write_tensors<W: Write>(mut w: W, tensors: &[NamedTensor]) -> io::Result<()> {
    for t in tensors {
        let expected = t.dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d));
        if expected != Some(t.data.len() as u64) || t.dims.len() > u8::MAX as usize {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("tensor `{}` has {} values for dims {:?}", t.name, t.data.len(), t.dims),
            ));
        }
    }
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[DTYPE_F32, t.dims.len() as u8])?;
        for d in &t.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.data.len() * 4);
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()
}

fn read_array<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_owned()),
        _ => Error::io("<weights>", e),
    })?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    read_array::<4>(r, what).map(u32::from_le_bytes)
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    let magic = read_array::<4>(&mut r, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = read_u32(&mut r, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = read_u32(&mut r, "tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for index in 0..count {
        let name_len = read_u32(&mut r, &format!("name length of tensor #{index}"))? as usize;
        if name_len > MAX_NAME_LEN {
            return Err(Error::MalformedWeights(format!("tensor #{index} name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Truncated(format!("name of tensor #{index}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::MalformedWeights(format!("tensor #{index} name is not UTF-8")))?;
        let [dtype, ndim] = read_array::<2>(&mut r, &format!("header of `{name}`"))?;
        if dtype != DTYPE_F32 {
            return Err(Error::UnsupportedDtype { name, dtype });
        }
        if ndim as usize > MAX_NDIM {
            return Err(Error::MalformedWeights(format!("`{name}` has {ndim} dims")));
        }
        let mut dims = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            dims.push(u64::from_le_bytes(read_array::<8>(&mut r, &format!("dims of `{name}`"))?));
        }
        let elems = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::MalformedWeights(format!("`{name}` element count overflows")))?;
        // read_to_end grows with the data actually present, so corrupt dims
        // cannot force a huge allocation up front.
        let mut bytes = Vec::new();
        (&mut r)
            .take(elems)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io("<weights>", e))?;
        if bytes.len() as u64 != elems {
            return Err(Error::Truncated(format!("payload of `{name}`")));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push(NamedTensor { name, dims, data });
    }
    Ok(tensors)
}

/// Immutable collection of every convolution the encoder slices and the five
/// decoders need, keyed by layer name (`enc.conv4_1`, `dec3.conv0`, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore<T> {
    version: u32,
    preproc: u32,
    layers: BTreeMap<String, Kernel4D<T>>,
}

impl<T: Scalar> WeightStore<T> {
    /// Validates a raw tensor list against the architecture table.
    pub fn from_tensors(tensors: Vec<NamedTensor>) -> Result<Self> {
        let mut by_name: BTreeMap<String, NamedTensor> = tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let preproc = match by_name.remove(PREPROC_TENSOR) {
            None => PREPROC_IMAGENET_UNIT,
            Some(t) => match t.data.as_slice() {
                [v] if *v == PREPROC_IMAGENET_UNIT as f32 => PREPROC_IMAGENET_UNIT,
                [v] => return Err(Error::UnsupportedPreprocessing(*v as u32)),
                _ => return Err(Error::MalformedWeights(format!("`{PREPROC_TENSOR}` must hold one value"))),
            },
        };
        let mut layers = BTreeMap::new();
        for spec in architecture() {
            let mut take = |name: String, dims: Vec<u64>| -> Result<Vec<T>> {
                let t = by_name.remove(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
                if t.dims != dims {
                    return Err(Error::TensorShape {
                        name,
                        expected: dims,
                        found: t.dims,
                    });
                }
                Ok(t.data.into_iter().map(T::from_f32_lossy).collect())
            };
            let (o, i, k) = (spec.cout as u64, spec.cin as u64, spec.kernel as u64);
            let weight = take(spec.weight_name(), vec![o, i, k, k])?;
            let bias = take(spec.bias_name(), vec![o])?;
            let kernel = Kernel4D::new(spec.cout, spec.cin, spec.kernel, spec.kernel, weight, Some(bias))?;
            layers.insert(spec.name.clone(), kernel);
        }
        Ok(Self {
            version: FORMAT_VERSION,
            preproc,
            layers,
        })
    }

    /// Tensors in architecture order followed by the preprocessing tag.
    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for spec in architecture() {
            let k = &self.layers[&spec.name];
            let (o, i, kh, kw) = k.dims();
            out.push(NamedTensor::new(
                spec.weight_name(),
                vec![o as u64, i as u64, kh as u64, kw as u64],
                k.data().iter().map(|v| v.to_f32_lossy()).collect(),
            ));
            let bias = k.bias().map(|b| b.iter().map(|v| v.to_f32_lossy()).collect()).unwrap_or_else(|| vec![0.0; o]);
            out.push(NamedTensor::new(spec.bias_name(), vec![o as u64], bias));
        }
        out.push(NamedTensor::new(PREPROC_TENSOR, vec![1], vec![self.preproc as f32]));
        out
    }

    pub fn read_from<R: Read>(reader: R) -> Result<Self> {
        Self::from_tensors(read_tensors(reader)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }

    pub fn write_to<W: Write>(&self, writer: W) -> io::Result<()> {
        write_tensors(writer, &self.to_tensors())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }

    /// He-initialised weights from a fixed seed. Useful for shape, property
    /// and timing checks that do not need trained decoders.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = BTreeMap::new();
        for spec in architecture() {
            let fan_in = (spec.cin * spec.kernel * spec.kernel) as f64;
            let gain = if spec.relu { 2.0 } else { 1.0 };
            let w = Normal::new(0.0, (gain / fan_in).sqrt()).expect("finite std");
            let b = Normal::new(0.0, 0.01).expect("finite std");
            let n = spec.cout * spec.cin * spec.kernel * spec.kernel;
            let data = (0..n).map(|_| T::from_f64_lossy(w.sample(&mut rng) as f32 as f64)).collect();
            let bias = (0..spec.cout).map(|_| T::from_f64_lossy(b.sample(&mut rng) as f32 as f64)).collect();
            let kernel = Kernel4D::new(spec.cout, spec.cin, spec.kernel, spec.kernel, data, Some(bias))
                .expect("architecture shapes are consistent");
            layers.insert(spec.name.clone(), kernel);
        }
        Self {
            version: FORMAT_VERSION,
            preproc: PREPROC_IMAGENET_UNIT,
            layers,
        }
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn preproc(&self) -> u32 {
        self.preproc
    }

    pub fn layer(&self, name: &str) -> Result<&Kernel4D<T>> {
        self.layers.get(name).ok_or_else(|| Error::MissingTensor(format!("{name}.weight")))
    }

    pub(crate) fn conv(&self, spec: &ConvSpec) -> Result<&Kernel4D<T>> {
        self.layer(&spec.name)
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }
}
