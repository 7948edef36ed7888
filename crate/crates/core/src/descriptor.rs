//! Per-vertex descriptor sets and their packed binary encoding.
//!
//! Layout (little endian):
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 4     | magic `MSDS`                            |
//! | 2     | version (1)                             |
//! | 2     | flags, bit 0 = global descriptor present |
//! | 4     | local descriptor count                  |
//! | 4     | feature dimension                       |
//!
//! followed by `count` records of `dim × f32` feature plus `3 × f64` landmark,
//! and, when flagged, `u32` entry count and `(u32 word, f64 weight)` pairs.

use nalgebra::Point3;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"MSDS";
pub const VERSION: u16 = 1;
const FLAG_GLOBAL: u16 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DescriptorError {
    #[error("bad magic bytes")]
    Magic,
    #[error("unsupported descriptor version {0}")]
    Version(u16),
    #[error("truncated descriptor payload: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("{0} trailing bytes after descriptor payload")]
    Trailing(usize),
    #[error("feature {index} has dimension {found}, expected {expected}")]
    Dimension {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("landmark {0} is not finite")]
    NonFinite(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalDescriptor {
    pub feature: Vec<f32>,
    /// Landmark position in the vertex body frame.
    pub landmark: Point3<f64>,
}

/// Sparse non-negative vector keyed by visual word, sorted by word.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseVector {
    pub entries: Vec<(u32, f64)>,
}

impl SparseVector {
    pub fn from_entries(mut entries: Vec<(u32, f64)>) -> Self {
        entries.sort_by_key(|(w, _)| *w);
        entries.retain(|(_, v)| *v != 0.0);
        Self { entries }
    }

    /// The zero vector marks a vertex without usable descriptors.
    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        let (a, b) = (&self.entries, &other.entries);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += a[i].1 * b[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    /// Cosine similarity clamped to `[0, 1]`; zero when either side is zero.
    pub fn cosine(&self, other: &SparseVector) -> f64 {
        let n = self.norm() * other.norm();
        if n == 0.0 {
            return 0.0;
        }
        (self.dot(other) / n).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DescriptorSet {
    pub dim: usize,
    pub local: Vec<LocalDescriptor>,
    pub global: Option<SparseVector>,
}

impl DescriptorSet {
    pub fn new(dim: usize, local: Vec<LocalDescriptor>) -> Self {
        Self {
            dim,
            local,
            global: None,
        }
    }

    pub fn len(&self) -> usize {
        self.local.len()
    }

    pub fn is_empty(&self) -> bool {
        self.local.is_empty()
    }

    pub fn validate(&self) -> Result<(), DescriptorError> {
        for (index, d) in self.local.iter().enumerate() {
            if d.feature.len() != self.dim {
                return Err(DescriptorError::Dimension {
                    index,
                    expected: self.dim,
                    found: d.feature.len(),
                });
            }
            if !d.landmark.coords.iter().all(|c| c.is_finite()) {
                return Err(DescriptorError::NonFinite(index));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>, DescriptorError> {
        self.validate()?;
        let mut out = Vec::with_capacity(16 + self.local.len() * (self.dim * 4 + 24));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let flags = if self.global.is_some() {
            FLAG_GLOBAL
        } else {
            0
        };
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&(self.local.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for d in &self.local {
            for v in &d.feature {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for c in d.landmark.coords.iter() {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        if let Some(g) = &self.global {
            out.extend_from_slice(&(g.entries.len() as u32).to_le_bytes());
            for (w, v) in &g.entries {
                out.extend_from_slice(&w.to_le_bytes());
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DescriptorError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(DescriptorError::Magic);
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(DescriptorError::Version(version));
        }
        let flags = r.u16()?;
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        r.need(count.saturating_mul(dim * 4 + 24))?;
        let mut local = Vec::with_capacity(count);
        for index in 0..count {
            let feature = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
            let landmark = Point3::new(r.f64()?, r.f64()?, r.f64()?);
            if !landmark.coords.iter().all(|c| c.is_finite()) {
                return Err(DescriptorError::NonFinite(index));
            }
            local.push(LocalDescriptor { feature, landmark });
        }
        let global = if flags & FLAG_GLOBAL != 0 {
            let n = r.u32()? as usize;
            let mut entries = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                entries.push((r.u32()?, r.f64()?));
            }
            Some(SparseVector { entries })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(DescriptorError::Trailing(bytes.len() - r.pos));
        }
        Ok(Self { dim, local, global })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn need(&self, n: usize) -> Result<(), DescriptorError> {
        let have = self.bytes.len() - self.pos;
        if have < n {
            return Err(DescriptorError::Truncated { need: n, have });
        }
        Ok(())
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DescriptorError> {
        self.need(n)?;
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, DescriptorError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2")))
    }
    fn u32(&mut self) -> Result<u32, DescriptorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    fn f32(&mut self) -> Result<f32, DescriptorError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    fn f64(&mut self) -> Result<f64, DescriptorError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
}
