//! Bimodal thin-pathway phantom.
//!
//! Tubes follow random cubic curves between two opposite faces. FA is bright
//! on the tubes and dark elsewhere; T1w is a smooth blob field with only a
//! faint tube contrast, so it cannot separate the label on its own.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Case, Volume, DEFAULT_SPACING};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng};

pub const MIN_EXTENT: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomParams {
    pub tubes: (usize, usize),
    pub radius: (f64, f64),
    pub fa_tube: (f32, f32),
    pub fa_background: (f32, f32),
    pub fa_noise: f32,
    pub t1w_range: (f32, f32),
    pub t1w_contrast: f32,
    pub t1w_noise: f32,
    pub blobs: usize,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            tubes: (2, 4),
            radius: (1.0, 3.0),
            fa_tube: (0.7, 1.0),
            fa_background: (0.0, 0.2),
            fa_noise: 0.03,
            t1w_range: (0.2, 0.8),
            t1w_contrast: 0.15,
            t1w_noise: 0.03,
            blobs: 6,
        }
    }
}

struct Tube {
    axis: usize,
    // cubic coefficients for the two off-axis coordinates
    coef: [[f64; 4]; 2],
    radius: f64,
    fa: f32,
}

impl Tube {
    fn random(r: &mut ChaCha8Rng, ext: [usize; 3], p: &PhantomParams) -> Tube {
        let axis = r.random_range(0..3);
        let mut coef = [[0.0; 4]; 2];
        for (j, c) in coef.iter_mut().enumerate() {
            let n = ext[(axis + 1 + j) % 3] as f64;
            let start = r.random_range(0.2..0.8) * n;
            let end = r.random_range(0.2..0.8) * n;
            let bend = r.random_range(-0.15..0.15) * n;
            let twist = r.random_range(-0.3..0.3) * n;
            // start + (end-start)t + 4·bend·t(1-t) + twist·t(1-t)(2t-1)
            c[0] = start;
            c[1] = end - start + 4.0 * bend - twist;
            c[2] = -4.0 * bend + 3.0 * twist;
            c[3] = -2.0 * twist;
        }
        Tube {
            axis,
            coef,
            radius: r.random_range(p.radius.0..=p.radius.1),
            fa: r.random_range(p.fa_tube.0..=p.fa_tube.1),
        }
    }

    fn point(&self, t: f64, ext: [usize; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        out[self.axis] = t * (ext[self.axis] - 1) as f64;
        for j in 0..2 {
            let c = &self.coef[j];
            out[(self.axis + 1 + j) % 3] = c[0] + t * (c[1] + t * (c[2] + t * c[3]));
        }
        out
    }
}

fn index(ext: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + ext[0] * (y + ext[1] * z)
}

pub fn gen_phantom(seed: u64, extents: [usize; 3]) -> Result<Case> {
    gen_phantom_with(seed, extents, &PhantomParams::default(), format!("phantom_{seed}"))
}

pub fn gen_phantom_with(
    seed: u64,
    extents: [usize; 3],
    p: &PhantomParams,
    id: String,
) -> Result<Case> {
    if extents.iter().any(|&e| e < MIN_EXTENT) {
        return Err(Error::Data(format!(
            "phantom extents must be at least {MIN_EXTENT} per axis, got {extents:?}"
        )));
    }
    let n: usize = extents.iter().product();
    let mut r = rng(seed);

    let n_tubes = r.random_range(p.tubes.0..=p.tubes.1);
    let tubes: Vec<Tube> = (0..n_tubes).map(|_| Tube::random(&mut r, extents, p)).collect();

    // label and clean tube FA
    let mut label = vec![0u8; n];
    let mut fa_tube = vec![0f32; n];
    for tube in &tubes {
        let steps = 8 * extents.iter().max().copied().unwrap_or(1);
        let reach = tube.radius.ceil() as isize;
        for s in 0..=steps {
            let c = tube.point(s as f64 / steps as f64, extents);
            let centre = c.map(|v| v.round() as isize);
            for dz in -reach..=reach {
                for dy in -reach..=reach {
                    for dx in -reach..=reach {
                        let v = [centre[0] + dx, centre[1] + dy, centre[2] + dz];
                        if (0..3).any(|a| v[a] < 0 || v[a] >= extents[a] as isize) {
                            continue;
                        }
                        let d2: f64 = (0..3).map(|a| (v[a] as f64 - c[a]).powi(2)).sum();
                        if d2 <= tube.radius * tube.radius {
                            let i = index(extents, v[0] as usize, v[1] as usize, v[2] as usize);
                            label[i] = 1;
                            fa_tube[i] = fa_tube[i].max(tube.fa);
                        }
                    }
                }
            }
        }
    }

    let mut fa = vec![0f32; n];
    for i in 0..n {
        let clean = if label[i] == 1 {
            fa_tube[i]
        } else {
            r.random_range(p.fa_background.0..=p.fa_background.1)
        };
        let noise = r.random_range(-p.fa_noise..=p.fa_noise);
        fa[i] = (clean + noise).clamp(0.0, 1.0);
    }

    // low-frequency blob field, rescaled to the T1w range
    let blobs: Vec<([f64; 3], f64, f64)> = (0..p.blobs)
        .map(|_| {
            let centre = extents.map(|e| r.random_range(0.0..e as f64));
            let m = *extents.iter().max().unwrap() as f64;
            let sigma = r.random_range(0.15..0.35) * m;
            let amp = r.random_range(0.5..1.0);
            (centre, sigma, amp)
        })
        .collect();
    let mut field = vec![0f64; n];
    for z in 0..extents[2] {
        for y in 0..extents[1] {
            for x in 0..extents[0] {
                let v = [x as f64, y as f64, z as f64];
                field[index(extents, x, y, z)] = blobs
                    .iter()
                    .map(|(c, s, a)| {
                        let d2: f64 = (0..3).map(|k| (v[k] - c[k]).powi(2)).sum();
                        a * (-d2 / (2.0 * s * s)).exp()
                    })
                    .sum();
            }
        }
    }
    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let (t_lo, t_hi) = (p.t1w_range.0 as f64, p.t1w_range.1 as f64);
    let mut t1w = vec![0f32; n];
    for i in 0..n {
        let base = t_lo + (t_hi - t_lo) * (field[i] - lo) / span;
        let contrast = if label[i] == 1 { p.t1w_contrast } else { 0.0 };
        let noise = r.random_range(-p.t1w_noise..=p.t1w_noise);
        t1w[i] = (base as f32 + contrast + noise).clamp(0.0, 1.0);
    }

    Case::new(
        id,
        Volume::float(extents, DEFAULT_SPACING, t1w)?,
        Volume::float(extents, DEFAULT_SPACING, fa)?,
        Volume::binary(extents, DEFAULT_SPACING, label)?,
    )
}

pub fn case_id(i: usize) -> String {
    format!("case_{i:03}")
}

/// Writes `cases` phantoms of `size³` voxels under `out`, case `i` seeded by `hash(seed, i)`.
pub fn gen_dataset(out: impl AsRef<Path>, cases: usize, size: usize, seed: u64) -> Result<Vec<String>> {
    let out = out.as_ref();
    let params = PhantomParams::default();
    let mut ids = Vec::with_capacity(cases);
    for i in 0..cases {
        let id = case_id(i);
        let case = gen_phantom_with(derive_seed(seed, i as u64), [size; 3], &params, id.clone())?;
        case.save(out.join(&id))?;
        ids.push(id);
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_matches_endpoints() {
        let mut r = rng(3);
        let ext = [32, 40, 48];
        let tube = Tube::random(&mut r, ext, &PhantomParams::default());
        let a = tube.point(0.0, ext);
        let b = tube.point(1.0, ext);
        assert_eq!(a[tube.axis], 0.0);
        assert_eq!(b[tube.axis], (ext[tube.axis] - 1) as f64);
        for j in 0..2 {
            let axis = (tube.axis + 1 + j) % 3;
            let n = ext[axis] as f64;
            assert!(a[axis] >= 0.2 * n - 1e-9 && a[axis] <= 0.8 * n + 1e-9);
            assert!(b[axis] >= 0.2 * n - 1e-9 && b[axis] <= 0.8 * n + 1e-9);
        }
    }
}
