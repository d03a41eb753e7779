use rand::seq::SliceRandom;

use super::{Case, Volume, Voxels};
use crate::error::{Error, Result};
use crate::rng::rng;
use crate::tensor::Tensor;

/// One axial slice; each tensor is `1×Y×X`, the label holds 0/1.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub case: String,
    pub z: usize,
    pub t1w: Tensor<f32>,
    pub fa: Tensor<f32>,
    pub label: Tensor<f32>,
}

impl SliceSample {
    pub fn is_empty(&self) -> bool {
        self.label.data().iter().all(|&v| v == 0.0)
    }
}

/// Keeps every slice with foreground plus a seeded fraction of the empty ones.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SliceFilter {
    pub empty_fraction: f64,
    pub seed: u64,
}

impl Default for SliceFilter {
    fn default() -> Self {
        SliceFilter {
            empty_fraction: 0.1,
            seed: 0,
        }
    }
}

fn plane(vol: &Volume, z: usize) -> Tensor<f32> {
    let [x, y, _] = vol.extents();
    Tensor::new([1, y, x], vol.slice_z(z)).expect("plane size")
}

pub fn extract_slices(case: &Case, filter: Option<SliceFilter>) -> Vec<SliceSample> {
    let z_count = case.extents()[2];
    let all: Vec<SliceSample> = (0..z_count)
        .map(|z| SliceSample {
            case: case.id.clone(),
            z,
            t1w: plane(&case.t1w, z),
            fa: plane(&case.fa, z),
            label: plane(&case.label, z),
        })
        .collect();
    let Some(filter) = filter else {
        return all;
    };
    let mut empty: Vec<usize> = all.iter().filter(|s| s.is_empty()).map(|s| s.z).collect();
    let keep_empty = (empty.len() as f64 * filter.empty_fraction.clamp(0.0, 1.0)).round() as usize;
    empty.shuffle(&mut rng(filter.seed));
    let mut keep = vec![false; z_count];
    for &z in &empty[..keep_empty] {
        keep[z] = true;
    }
    all.into_iter()
        .filter(|s| keep[s.z] || !s.is_empty())
        .collect()
}

/// Stacks `Y×X` slices back into a volume; `binary` restores a u8 mask.
pub fn restack(slices: &[Tensor<f32>], spacing: [f32; 3], binary: bool) -> Result<Volume> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Data("no slices to restack".into()))?;
    let (y, x) = match first.shape() {
        [1, y, x] | [y, x] => (*y, *x),
        other => return Err(Error::Data(format!("slice shape {other:?} is not 1×Y×X"))),
    };
    let mut data = Vec::with_capacity(x * y * slices.len());
    for s in slices {
        if s.len() != x * y {
            return Err(Error::Data(format!(
                "slice shape {:?} differs from {:?}",
                s.shape(),
                first.shape()
            )));
        }
        data.extend_from_slice(s.data());
    }
    let extents = [x, y, slices.len()];
    if binary {
        let mask = data
            .iter()
            .map(|&v| match v {
                0.0 => Ok(0),
                1.0 => Ok(1),
                _ => Err(Error::Data("binary restack of non-binary slice".into())),
            })
            .collect::<Result<Vec<u8>>>()?;
        Volume::new(extents, spacing, Voxels::Binary(mask))
    } else {
        Volume::new(extents, spacing, Voxels::Float(data))
    }
}
