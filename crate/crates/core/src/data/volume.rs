//! 3D volumes and the MVOL container.
//!
//! Layout (little-endian): magic `MVOL` | version u32 = 1 | extents 3×u32 |
//! spacing 3×f32 | dtype u8 (0 = f32, 1 = u8 binary) | voxels, x fastest.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MVOL_MAGIC: [u8; 4] = *b"MVOL";
pub const MVOL_VERSION: u32 = 1;
/// Bytes before the voxel payload.
pub const MVOL_HEADER_LEN: usize = 4 + 4 + 12 + 12 + 1;

/// Default isotropic voxel size in mm.
pub const DEFAULT_SPACING: [f32; 3] = [1.25, 1.25, 1.25];

#[derive(Clone, Debug, PartialEq)]
pub enum Voxels {
    Float(Vec<f32>),
    Binary(Vec<u8>),
}

impl Voxels {
    fn len(&self) -> usize {
        match self {
            Voxels::Float(v) => v.len(),
            Voxels::Binary(v) => v.len(),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            Voxels::Float(_) => 0,
            Voxels::Binary(_) => 1,
        }
    }
}

/// Scalar or binary grid with physical spacing; index `x + X·(y + Y·z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    spacing: [f32; 3],
    voxels: Voxels,
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f32; 3], voxels: Voxels) -> Result<Self> {
        if extents.iter().any(|&e| e == 0) {
            return Err(Error::Data(format!("volume extents must be positive, got {extents:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Data(format!("volume spacing must be positive, got {spacing:?}")));
        }
        let n = extents.iter().product::<usize>();
        if voxels.len() != n {
            return Err(Error::Data(format!(
                "{extents:?} volume needs {n} voxels, got {}",
                voxels.len()
            )));
        }
        Ok(Volume {
            extents,
            spacing,
            voxels,
        })
    }

    pub fn binary(extents: [usize; 3], spacing: [f32; 3], mask: Vec<u8>) -> Result<Self> {
        if mask.iter().any(|&v| v > 1) {
            return Err(Error::Data("binary volume holds values other than 0/1".into()));
        }
        Self::new(extents, spacing, Voxels::Binary(mask))
    }

    pub fn float(extents: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        Self::new(extents, spacing, Voxels::Float(data))
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &Voxels {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.len() == 0
    }

    pub fn is_binary(&self) -> bool {
        matches!(self.voxels, Voxels::Binary(_))
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.extents[0] * (y + self.extents[1] * z)
    }

    pub fn value(&self, i: usize) -> f32 {
        match &self.voxels {
            Voxels::Float(v) => v[i],
            Voxels::Binary(v) => v[i] as f32,
        }
    }

    /// Binary mask view; errors on float volumes holding anything but 0/1.
    pub fn mask(&self) -> Result<Vec<bool>> {
        match &self.voxels {
            Voxels::Binary(v) => Ok(v.iter().map(|&b| b != 0).collect()),
            Voxels::Float(v) => v
                .iter()
                .map(|&f| match f {
                    0.0 => Ok(false),
                    1.0 => Ok(true),
                    _ => Err(Error::Data("mask holds non-binary values".into())),
                })
                .collect(),
        }
    }

    pub fn foreground_count(&self) -> Result<usize> {
        Ok(self.mask()?.into_iter().filter(|&b| b).count())
    }

    /// Axial slice `z` as a row-major `Y×X` buffer.
    pub fn slice_z(&self, z: usize) -> Vec<f32> {
        let plane = self.extents[0] * self.extents[1];
        (z * plane..(z + 1) * plane).map(|i| self.value(i)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MVOL_HEADER_LEN + self.len() * 4);
        out.extend_from_slice(&MVOL_MAGIC);
        out.extend_from_slice(&MVOL_VERSION.to_le_bytes());
        for &e in &self.extents {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &s in &self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.push(self.voxels.dtype());
        match &self.voxels {
            Voxels::Float(v) => v.iter().for_each(|f| out.extend_from_slice(&f.to_le_bytes())),
            Voxels::Binary(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MVOL_MAGIC {
            return Err(Error::BadMagic {
                expected: MVOL_MAGIC,
                found: magic,
            });
        }
        let version = r.u32("version")?;
        if version != MVOL_VERSION {
            return Err(Error::UnknownVersion(version));
        }
        let extents = [r.u32("extents")? as usize, r.u32("extents")? as usize, r.u32("extents")? as usize];
        let spacing = [r.f32("spacing")?, r.f32("spacing")?, r.f32("spacing")?];
        let dtype = r.take(1, "dtype")?[0];
        let n = extents.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
        let n = n.ok_or_else(|| Error::Data(format!("extents {extents:?} overflow")))?;
        let voxels = match dtype {
            0 => {
                let raw = r.take(n.checked_mul(4).ok_or(Error::Data("extents overflow".into()))?, "voxels")?;
                Voxels::Float(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                )
            }
            1 => Voxels::Binary(r.take(n, "voxels")?.to_vec()),
            other => return Err(Error::UnknownDtype(other)),
        };
        if r.pos != bytes.len() {
            return Err(Error::Data(format!("{} trailing bytes after voxels", bytes.len() - r.pos)));
        }
        Volume::new(extents, spacing, voxels)
    }

    /// FNV-1a over the serialized bytes.
    pub fn checksum(&self) -> u64 {
        fnv1a(&self.to_bytes())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("{what} at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn write_mvol(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, vol.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_mvol(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Volume::from_bytes(&bytes)
}
