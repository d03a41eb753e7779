//! Overlap and surface-distance metrics for binary masks.
//!
//! Surfaces use six-connectivity: a foreground voxel is on the surface when
//! any face neighbour is background or lies outside the volume. Distances are
//! Euclidean in mm using per-axis spacing.

use serde::{Deserialize, Serialize};

use crate::data::Volume;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

fn check_pair(pred: &Volume, gt: &Volume) -> Result<(Vec<bool>, Vec<bool>)> {
    if pred.extents() != gt.extents() {
        return Err(Error::Data(format!(
            "prediction extents {:?} differ from ground truth {:?}",
            pred.extents(),
            gt.extents()
        )));
    }
    Ok((pred.mask()?, gt.mask()?))
}

pub fn confusion(pred: &Volume, gt: &Volume) -> Result<ConfusionCounts> {
    let (p, g) = check_pair(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in p.iter().zip(&g) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2tp / (2tp + fp + fn)`; two empty masks agree perfectly and score 1.
pub fn dsc(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    }
}

/// Relative absolute volume difference in percent.
pub fn ravd(pred: &Volume, gt: &Volume) -> Result<f64> {
    let c = confusion(pred, gt)?;
    ravd_counts(&c)
}

fn ravd_counts(c: &ConfusionCounts) -> Result<f64> {
    let v_gt = c.tp + c.fn_;
    if v_gt == 0 {
        return Err(Error::Undefined("ravd with empty ground truth"));
    }
    let v_seg = c.tp + c.fp;
    Ok((v_seg as f64 / v_gt as f64 - 1.0).abs() * 100.0)
}

/// Surface voxels in index order (x fastest) with the grid spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceSet {
    pub points: Vec<[usize; 3]>,
    pub spacing: [f32; 3],
}

impl SurfaceSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn position(&self, p: [usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| p[a] as f64 * self.spacing[a] as f64)
    }
}

pub fn surface(mask: &Volume) -> Result<SurfaceSet> {
    let m = mask.mask()?;
    let [nx, ny, nz] = mask.extents();
    let at = |x: usize, y: usize, z: usize| m[x + nx * (y + ny * z)];
    let mut points = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !at(x, y, z) {
                    continue;
                }
                let interior = x > 0
                    && x + 1 < nx
                    && y > 0
                    && y + 1 < ny
                    && z > 0
                    && z + 1 < nz
                    && at(x - 1, y, z)
                    && at(x + 1, y, z)
                    && at(x, y - 1, z)
                    && at(x, y + 1, z)
                    && at(x, y, z - 1)
                    && at(x, y, z + 1);
                if !interior {
                    points.push([x, y, z]);
                }
            }
        }
    }
    Ok(SurfaceSet {
        points,
        spacing: mask.spacing(),
    })
}

/// Squared distance in mm²; every distance in this module goes through here.
pub fn squared_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Exact nearest-neighbour queries: targets sorted by x, scan outward until
/// the x gap alone exceeds the best distance found.
struct NearestIndex {
    pts: Vec<[f64; 3]>,
}

impl NearestIndex {
    fn new(set: &SurfaceSet) -> Self {
        let mut pts: Vec<[f64; 3]> = set.points.iter().map(|&p| set.position(p)).collect();
        pts.sort_by(|a, b| a[0].total_cmp(&b[0]));
        NearestIndex { pts }
    }

    fn min_sq(&self, q: [f64; 3]) -> f64 {
        let start = self.pts.partition_point(|p| p[0] < q[0]);
        let mut best = f64::INFINITY;
        for p in &self.pts[start..] {
            let gap = p[0] - q[0];
            if gap * gap > best {
                break;
            }
            best = best.min(squared_distance(q, *p));
        }
        for p in self.pts[..start].iter().rev() {
            let gap = q[0] - p[0];
            if gap * gap > best {
                break;
            }
            best = best.min(squared_distance(q, *p));
        }
        best
    }
}

/// Distances in mm from each point of `from` to the nearest point of `to`, in `from` order.
fn directed(from: &SurfaceSet, to: &SurfaceSet) -> Vec<f64> {
    let index = NearestIndex::new(to);
    from.points
        .iter()
        .map(|&p| index.min_sq(from.position(p)).sqrt())
        .collect()
}

fn check_surfaces(a: &SurfaceSet, b: &SurfaceSet, what: &'static str) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Undefined(what));
    }
    if a.spacing != b.spacing {
        return Err(Error::Data(format!(
            "surface spacings differ: {:?} vs {:?}",
            a.spacing, b.spacing
        )));
    }
    Ok(())
}

pub fn hausdorff(a: &SurfaceSet, b: &SurfaceSet) -> Result<f64> {
    check_surfaces(a, b, "hausdorff distance with an empty surface")?;
    let h_ab = directed(a, b).into_iter().fold(0.0, f64::max);
    let h_ba = directed(b, a).into_iter().fold(0.0, f64::max);
    Ok(h_ab.max(h_ba))
}

/// `(Σ_a d(a,B) + Σ_b d(b,A)) / (|A| + |B|)`, each sum taken in point order.
pub fn assd(a: &SurfaceSet, b: &SurfaceSet) -> Result<f64> {
    check_surfaces(a, b, "average symmetric surface distance with an empty surface")?;
    let sum_a: f64 = directed(a, b).iter().sum();
    let sum_b: f64 = directed(b, a).iter().sum();
    Ok((sum_a + sum_b) / (a.len() + b.len()) as f64)
}

/// The four metrics; undefined ones are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dsc: f64,
    pub ravd: Option<f64>,
    pub hd: Option<f64>,
    pub assd: Option<f64>,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Undefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn report(pred: &Volume, gt: &Volume) -> Result<MetricReport> {
    if pred.spacing() != gt.spacing() {
        return Err(Error::Data(format!(
            "prediction spacing {:?} differs from ground truth {:?}",
            pred.spacing(),
            gt.spacing()
        )));
    }
    let c = confusion(pred, gt)?;
    let sp = surface(pred)?;
    let sg = surface(gt)?;
    Ok(MetricReport {
        dsc: dsc(&c),
        ravd: defined(ravd_counts(&c))?,
        hd: defined(hausdorff(&sp, &sg))?,
        assd: defined(assd(&sp, &sg))?,
    })
}
