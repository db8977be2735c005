//! On-disk formats: `VPRK` tensors, descriptor sets with a metadata
//! sidecar, and recall reports.
//!
//! Tensor layout (all integers little-endian):
//!
//! ```text
//! b"VPRK" | version: u16 | dtype: u8 | rank: u8 | dims: rank x u32 | payload: f32 x prod(dims)
//! ```
//!
//! The payload is row-major. Descriptor sets store an `N x D` tensor next
//! to a CSV sidecar (`id,lat,lon,place_id`, same stem, `.csv` extension)
//! whose rows align with the tensor rows.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::embedding::EmbeddingBatch;
use crate::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"VPRK";
pub const TENSOR_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;

pub const SIDECAR_HEADER: [&str; 4] = ["id", "lat", "lon", "place_id"];

/// Dense `f32` tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        if dims.len() > u8::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Shape(format!("dims {dims:?} not representable")));
        }
        Ok(Self { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&x| x as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| f64::from(x)).collect()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }
}

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F32, t.dims.len() as u8])?;
    for &d in &t.dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.data.len() * 4);
    for &x in &t.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head)?;
    if head[..4] != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &head[..4])));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    if head[6] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype tag {}", head[6])));
    }
    let rank = head[7] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    let count: usize = dims.iter().product();
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(dims, data)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    read_tensor(BufReader::new(File::open(path)?))
}

/// Per-row metadata of a descriptor set.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMeta {
    pub id: String,
    pub lat: Option<f64>,
    pub lon: Option<f64>,
    pub place_id: Option<u64>,
}

impl DescriptorMeta {
    pub fn coords(&self) -> Option<(f64, f64)> {
        Some((self.lat?, self.lon?))
    }
}

/// Unit-norm descriptors with aligned metadata. The batch labels mirror
/// `place_id` (0 where absent).
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub embeddings: EmbeddingBatch,
    pub meta: Vec<DescriptorMeta>,
}

impl DescriptorSet {
    /// Normalizes `rows` and pairs them with `meta`.
    pub fn new(rows: &[Vec<f64>], meta: Vec<DescriptorMeta>) -> Result<Self> {
        if rows.len() != meta.len() {
            return Err(Error::Shape(format!(
                "{} descriptors but {} metadata rows",
                rows.len(),
                meta.len()
            )));
        }
        let labels = meta.iter().map(|m| m.place_id.unwrap_or(0)).collect();
        Ok(Self {
            embeddings: EmbeddingBatch::normalized(rows, labels)?,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    /// Rows `idx`, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| self.embeddings.row(i).to_vec()).collect();
        Self::new(&rows, idx.iter().map(|&i| self.meta[i].clone()).collect())
    }
}

/// The sidecar path belonging to a descriptor tensor path.
pub fn sidecar_path(tensor_path: &Path) -> PathBuf {
    tensor_path.with_extension("csv")
}

pub fn save_descriptor_set(path: &Path, set: &DescriptorSet) -> Result<()> {
    let t = Tensor::from_f64(vec![set.len(), set.dim()], set.embeddings.as_slice())?;
    save_tensor(path, &t)?;
    let mut w = csv::Writer::from_path(sidecar_path(path))?;
    w.write_record(SIDECAR_HEADER)?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for m in &set.meta {
        w.write_record([
            m.id.clone(),
            opt(m.lat.map(|x| x.to_string())),
            opt(m.lon.map(|x| x.to_string())),
            opt(m.place_id.map(|x| x.to_string())),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a descriptor set. Rows are renormalized after the `f32` round
/// trip.
pub fn load_descriptor_set(path: &Path) -> Result<DescriptorSet> {
    let t = load_tensor(path)?;
    if t.rank() != 2 {
        return Err(Error::Format(format!(
            "descriptor tensor must be rank 2, got {:?}",
            t.dims
        )));
    }
    let side = sidecar_path(path);
    let mut reader = csv::Reader::from_path(&side)?;
    if reader.headers()?.iter().collect::<Vec<_>>() != SIDECAR_HEADER {
        return Err(Error::Parse {
            path: side,
            line: 1,
            msg: format!("expected header `{}`", SIDECAR_HEADER.join(",")),
        });
    }
    let mut meta = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let parse_err = |what: &str| Error::Parse {
            path: side.clone(),
            line,
            msg: format!("cannot parse {what}"),
        };
        let float = |i: usize, what: &str| -> Result<Option<f64>> {
            match row.get(i).unwrap_or("") {
                "" => Ok(None),
                s => s.parse().map(Some).map_err(|_| parse_err(what)),
            }
        };
        meta.push(DescriptorMeta {
            id: row.get(0).unwrap_or("").to_owned(),
            lat: float(1, "lat")?,
            lon: float(2, "lon")?,
            place_id: match row.get(3).unwrap_or("") {
                "" => None,
                s => Some(s.parse().map_err(|_| parse_err("place_id"))?),
            },
        });
    }
    let (n, d) = (t.dims[0], t.dims[1]);
    if meta.len() != n {
        return Err(Error::Format(format!(
            "sidecar has {} rows, tensor has {n}",
            meta.len()
        )));
    }
    let data = t.to_f64();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| data[i * d..(i + 1) * d].to_vec()).collect();
    DescriptorSet::new(&rows, meta)
}
