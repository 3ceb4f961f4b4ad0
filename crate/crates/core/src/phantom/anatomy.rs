use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{GridShape, Label};
use crate::error::{Error, Result};
use crate::rng;

/// Minimum voxel counts for the edema and enhancing regions.
pub const MIN_REGION_VOXELS: usize = 8;
const MAX_ATTEMPTS: usize = 200;

/// Tumour placement: three concentric, co-rotated ellipsoids.
///
/// `radii[0]` bounds the whole tumour, `radii[1]` the core, `radii[2]` the
/// necrotic centre. The enhancing rim is the core minus the necrotic centre.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TumourGeometry {
    pub center: [f64; 3],
    pub radii: [[f64; 3]; 3],
    /// Row-major rotation from grid axes to ellipsoid axes.
    pub rotation: [[f64; 3]; 3],
}

/// Modality-independent anatomy: labels plus a smooth tissue texture.
#[derive(Clone, Debug, PartialEq)]
pub struct AnatomyLatent {
    pub grid: GridShape,
    pub label_map: Vec<u8>,
    /// Band-limited texture in `[0, 1]` inside the brain, `0` outside.
    pub tissue_field: Vec<f32>,
    pub brain_mask: Vec<bool>,
    pub tumour: TumourGeometry,
    pub seed: u64,
}

impl AnatomyLatent {
    pub fn count(&self, label: Label) -> usize {
        self.label_map.iter().filter(|&&l| l == label as u8).count()
    }

    /// Voxels with any tumour label.
    pub fn whole_tumour_voxels(&self) -> usize {
        self.label_map.iter().filter(|&&l| l != Label::Background as u8).count()
    }
}

fn check_grid(grid: GridShape) -> Result<()> {
    let too_small = |reason: String| Err(Error::GridTooSmall { grid: grid.to_string(), reason });
    if grid.h < 16 || grid.w < 16 {
        return too_small("in-plane extents must be at least 16".into());
    }
    if !grid.is_planar() && grid.d < 16 {
        return too_small("depth must be 1 (planar) or at least 16".into());
    }
    Ok(())
}

fn random_rotation(r: &mut rng::Rng, planar: bool) -> [[f64; 3]; 3] {
    if planar {
        let a = r.random_range(0.0..std::f64::consts::TAU);
        let (s, c) = a.sin_cos();
        return [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]];
    }
    // Uniform rotation from a normalised Gaussian quaternion.
    let mut q = [0.0f64; 4];
    for v in q.iter_mut() {
        *v = StandardNormal.sample(r);
    }
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Smooth texture: a sum of a few low-frequency cosines, rescaled to `[0, 1]`
/// over the brain.
fn tissue_texture(r: &mut rng::Rng, grid: GridShape, brain: &[bool]) -> Vec<f32> {
    let planar = grid.is_planar();
    let waves: Vec<([f64; 3], f64, f64)> = (0..6)
        .map(|_| {
            let mut k = [0.0; 3];
            for (a, kk) in k.iter_mut().enumerate() {
                if !(planar && a == 0) {
                    *kk = r.random_range(-2.5..2.5);
                }
            }
            (k, r.random_range(0.0..std::f64::consts::TAU), r.random_range(0.3..1.0))
        })
        .collect();
    let dims = grid.dims().map(|n| n as f64);
    let mut field = vec![0.0f64; grid.voxels()];
    for z in 0..grid.d {
        for y in 0..grid.h {
            for x in 0..grid.w {
                let p = [z as f64 / dims[0], y as f64 / dims[1], x as f64 / dims[2]];
                let v: f64 = waves
                    .iter()
                    .map(|(k, ph, amp)| {
                        amp * (std::f64::consts::TAU * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2]) + ph).cos()
                    })
                    .sum();
                field[grid.index(z, y, x)] = v;
            }
        }
    }
    let (lo, hi) = field
        .iter()
        .zip(brain)
        .filter(|(_, &b)| b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-12);
    field.iter().zip(brain).map(|(&v, &b)| if b { ((v - lo) / span) as f32 } else { 0.0 }).collect()
}

/// Samples a phantom anatomy. Identical `seed` and `grid` give bit-identical output.
pub fn sample_anatomy(seed: u64, grid: GridShape) -> Result<AnatomyLatent> {
    check_grid(grid)?;
    let mut r = rng::stream(seed, &[rng::tag::ANATOMY]);
    let planar = grid.is_planar();
    let dims = grid.dims().map(|n| n as f64);
    let centre = dims.map(|n| (n - 1.0) / 2.0);

    // Brain: an axis-aligned ellipsoid filling most of the field of view.
    let brain_r = dims.map(|n| 0.46 * n);
    let brain_c = [centre[0], centre[1] + r.random_range(-1.0..1.0), centre[2] + r.random_range(-1.0..1.0)];
    let mut brain = vec![false; grid.voxels()];
    for z in 0..grid.d {
        for y in 0..grid.h {
            for x in 0..grid.w {
                let dz = if planar { 0.0 } else { (z as f64 - brain_c[0]) / brain_r[0] };
                let dy = (y as f64 - brain_c[1]) / brain_r[1];
                let dx = (x as f64 - brain_c[2]) / brain_r[2];
                brain[grid.index(z, y, x)] = dz * dz + dy * dy + dx * dx <= 1.0;
            }
        }
    }
    let tissue = tissue_texture(&mut r, grid, &brain);

    let min_extent = if planar { grid.h.min(grid.w) } else { grid.d.min(grid.h).min(grid.w) } as f64;
    for _ in 0..MAX_ATTEMPTS {
        let mut wt = [0.0f64; 3];
        for (a, v) in wt.iter_mut().enumerate() {
            *v = if planar && a == 0 { f64::INFINITY } else { r.random_range(0.15..0.27) * min_extent };
        }
        let core_scale = r.random_range(0.45..0.7);
        let necrotic_scale = r.random_range(0.3..0.6);
        let tc = wt.map(|v| v * core_scale);
        let ncr = tc.map(|v| v * necrotic_scale);
        let reach = wt.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
        let mut c = [centre[0], 0.0, 0.0];
        for a in 0..3 {
            if planar && a == 0 {
                continue;
            }
            let slack = (brain_r[a] - reach - 1.0).max(0.0);
            c[a] = brain_c[a] + r.random_range(-slack..=slack) * 0.8;
        }
        let rot = random_rotation(&mut r, planar);

        let mut labels = vec![Label::Background as u8; grid.voxels()];
        for z in 0..grid.d {
            for y in 0..grid.h {
                for x in 0..grid.w {
                    let i = grid.index(z, y, x);
                    if !brain[i] {
                        continue;
                    }
                    let d = [z as f64 - c[0], y as f64 - c[1], x as f64 - c[2]];
                    let q: [f64; 3] = std::array::from_fn(|row| (0..3).map(|k| rot[row][k] * d[k]).sum());
                    let rho = |radii: &[f64; 3]| -> f64 {
                        (0..3).map(|a| if radii[a].is_finite() { (q[a] / radii[a]).powi(2) } else { 0.0 }).sum::<f64>()
                    };
                    // Irregular outer boundary driven by the texture.
                    let wobble = 1.0 + 0.25 * (tissue[i] as f64 - 0.5);
                    labels[i] = if rho(&ncr) <= 1.0 {
                        Label::Necrotic as u8
                    } else if rho(&tc) <= 1.0 {
                        Label::Enhancing as u8
                    } else if rho(&wt) <= wobble {
                        Label::Edema as u8
                    } else {
                        Label::Background as u8
                    };
                }
            }
        }
        let count = |l: Label| labels.iter().filter(|&&v| v == l as u8).count();
        if count(Label::Edema) >= MIN_REGION_VOXELS && count(Label::Enhancing) >= MIN_REGION_VOXELS {
            let radii = [wt, tc, ncr].map(|r| r.map(|v| if v.is_finite() { v } else { 0.0 }));
            return Ok(AnatomyLatent {
                grid,
                label_map: labels,
                tissue_field: tissue,
                brain_mask: brain,
                tumour: TumourGeometry { center: c, radii, rotation: rot },
                seed,
            });
        }
    }
    Err(Error::TumourPlacement { attempts: MAX_ATTEMPTS })
}
