use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{Modality, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::phantom::anatomy::AnatomyLatent;
use crate::rng;

/// Mean intensity per label (BG tissue, NCR/NET, ED, ET) before styling.
///
/// This table is a hand-made construction following the usual qualitative
/// contrast conventions: FLAIR and T2 brighten edema, T1ce brightens the
/// enhancing rim, T1 darkens the core.
pub fn base_intensity(modality: Modality) -> [f64; NUM_CLASSES] {
    match modality {
        Modality::T1 => [0.60, 0.25, 0.45, 0.40],
        Modality::T1ce => [0.55, 0.20, 0.45, 0.95],
        Modality::T2 => [0.40, 0.70, 0.85, 0.60],
        Modality::Flair => [0.35, 0.50, 0.90, 0.60],
    }
}

const TABLE_JITTER: f64 = 0.05;
/// Smallest foreground intensity, so brain voxels never collapse to zero.
const FLOOR: f64 = 1e-3;

/// Everything needed to re-render one modality from an anatomy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleRecord {
    pub modality: Modality,
    pub contrast_gamma: f64,
    /// Log-field polynomial: linear z, y, x then quadratic z², y², x², over
    /// coordinates scaled to `[-1, 1]`.
    pub bias_field_coeffs: [f64; 6],
    pub noise_sigma: f64,
    pub intensity_transfer: [f64; NUM_CLASSES],
    /// Weight of the tissue texture added on top of the class means.
    pub texture_amplitude: f64,
    pub seed: u64,
}

impl StyleRecord {
    /// Draws a style for `modality` from `style_seed`. Never touches the anatomy stream.
    pub fn sample(modality: Modality, style_seed: u64) -> Self {
        let mut r = rng::stream(style_seed, &[rng::tag::STYLE, modality.index() as u64]);
        let contrast_gamma = (r.random_range(0.7f64.ln()..1.4f64.ln())).exp();
        let mut bias_field_coeffs = [0.0; 6];
        for (i, c) in bias_field_coeffs.iter_mut().enumerate() {
            let bound = if i < 3 { 0.25 } else { 0.15 };
            *c = r.random_range(-bound..bound);
        }
        let noise_sigma = r.random_range(0.01..0.06);
        let mut intensity_transfer = base_intensity(modality);
        for v in intensity_transfer.iter_mut() {
            *v += r.random_range(-TABLE_JITTER..TABLE_JITTER);
        }
        let texture_amplitude = r.random_range(0.05..0.2);
        StyleRecord {
            modality,
            contrast_gamma,
            bias_field_coeffs,
            noise_sigma,
            intensity_transfer,
            texture_amplitude,
            seed: style_seed,
        }
    }

    /// Noise-free, identity-gamma, flat-field style with the base table.
    pub fn degenerate(modality: Modality) -> Self {
        StyleRecord {
            modality,
            contrast_gamma: 1.0,
            bias_field_coeffs: [0.0; 6],
            noise_sigma: 0.0,
            intensity_transfer: base_intensity(modality),
            texture_amplitude: 0.0,
            seed: 0,
        }
    }

    /// Flat numeric view used by independence tests.
    pub fn features(&self) -> Vec<f64> {
        let mut v = vec![self.contrast_gamma.ln(), self.noise_sigma, self.texture_amplitude];
        v.extend_from_slice(&self.bias_field_coeffs);
        v.extend_from_slice(&self.intensity_transfer);
        v
    }
}

/// Un-normalised rendering: class means plus texture, gamma, bias field and
/// noise inside the brain; exact zero outside.
#[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must be rejected too
pub fn render_raw(anatomy: &AnatomyLatent, style: &StyleRecord) -> Result<Vec<f64>> {
    let grid = anatomy.grid;
    if anatomy.label_map.len() != grid.voxels() || anatomy.tissue_field.len() != grid.voxels() {
        return Err(Error::ShapeMismatch(format!("anatomy arrays do not match grid {grid}")));
    }
    if !(style.contrast_gamma > 0.0) || !(style.noise_sigma >= 0.0) {
        return Err(Error::config("style", "gamma must be positive and noise non-negative"));
    }
    let noise = Normal::new(0.0, style.noise_sigma.max(0.0)).expect("valid sigma");
    let mut r = rng::stream(style.seed, &[rng::tag::NOISE, style.modality.index() as u64]);
    let dims = grid.dims();
    let scaled = |i: usize, n: usize| if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
    let k = &style.bias_field_coeffs;
    let mut out = vec![0.0; grid.voxels()];
    for z in 0..grid.d {
        for y in 0..grid.h {
            for x in 0..grid.w {
                let i = grid.index(z, y, x);
                if !anatomy.brain_mask[i] {
                    continue;
                }
                let label = anatomy.label_map[i];
                let mean = *style.intensity_transfer.get(label as usize).ok_or(Error::UnknownLabel(label))?;
                let tex = style.texture_amplitude * (anatomy.tissue_field[i] as f64 - 0.5);
                let base = (mean + tex).clamp(FLOOR, 1.0).powf(style.contrast_gamma);
                let p = [scaled(z, dims[0]), scaled(y, dims[1]), scaled(x, dims[2])];
                let log_field = k[0] * p[0]
                    + k[1] * p[1]
                    + k[2] * p[2]
                    + k[3] * p[0] * p[0]
                    + k[4] * p[1] * p[1]
                    + k[5] * p[2] * p[2];
                let mut v = base * log_field.exp();
                if style.noise_sigma > 0.0 {
                    v += noise.sample(&mut r);
                }
                out[i] = v.max(FLOOR);
            }
        }
    }
    Ok(out)
}

/// Z-scores the nonzero voxels; zeros stay zero.
pub fn normalize_foreground(raw: &[f64]) -> Vec<f32> {
    let fg: Vec<f64> = raw.iter().copied().filter(|&v| v != 0.0).collect();
    if fg.is_empty() {
        return vec![0.0; raw.len()];
    }
    let n = fg.len() as f64;
    let mean = fg.iter().sum::<f64>() / n;
    let var = fg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    raw.iter().map(|&v| if v != 0.0 { ((v - mean) / std) as f32 } else { 0.0 }).collect()
}

/// Renders with an explicit style record.
pub fn render_with_style(anatomy: &AnatomyLatent, style: &StyleRecord) -> Result<Vec<f32>> {
    Ok(normalize_foreground(&render_raw(anatomy, style)?))
}

/// Samples a style from `style_seed` and renders `modality`.
pub fn render_modality(
    anatomy: &AnatomyLatent,
    modality: Modality,
    style_seed: u64,
) -> Result<(Vec<f32>, StyleRecord)> {
    let style = StyleRecord::sample(modality, style_seed);
    let volume = render_with_style(anatomy, &style)?;
    Ok((volume, style))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{GridShape, Label};
    use crate::phantom::anatomy::sample_anatomy;

    fn anatomy() -> AnatomyLatent {
        sample_anatomy(11, GridShape::cube(24)).unwrap()
    }

    #[test]
    fn degenerate_style_is_a_function_of_labels() {
        let a = anatomy();
        for m in Modality::ALL {
            let style = StyleRecord::degenerate(m);
            let raw = render_raw(&a, &style).unwrap();
            let table = base_intensity(m);
            for i in 0..raw.len() {
                let expect = if a.brain_mask[i] { table[a.label_map[i] as usize] } else { 0.0 };
                assert_eq!(raw[i], expect);
            }
        }
    }

    #[test]
    fn style_seed_changes_volume_not_labels() {
        let a = anatomy();
        let (v1, s1) = render_modality(&a, Modality::T2, 1).unwrap();
        let (v2, s2) = render_modality(&a, Modality::T2, 2).unwrap();
        assert_ne!(s1, s2);
        let l1: f32 = v1.iter().zip(&v2).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 > 0.0);
        assert_eq!(render_with_style(&a, &s1).unwrap(), v1);
    }

    #[test]
    fn flair_edema_brighter_than_background() {
        let a = anatomy();
        for seed in 0..10 {
            let style = StyleRecord::sample(Modality::Flair, seed);
            let raw = render_raw(&a, &style).unwrap();
            let mean_of = |l: Label| {
                let v: Vec<f64> =
                    raw.iter().zip(&a.label_map).filter(|(_, &x)| x == l as u8).map(|(v, _)| *v).collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            assert!(mean_of(Label::Edema) > mean_of(Label::Background));
            let t = style.intensity_transfer;
            assert!(t[Label::Edema as usize] > t[Label::Background as usize]);
        }
    }

    #[test]
    fn normalized_foreground_has_zero_mean_unit_variance() {
        let a = anatomy();
        let (v, _) = render_modality(&a, Modality::T1ce, 5).unwrap();
        let fg: Vec<f64> = v.iter().zip(&a.brain_mask).filter(|(_, &b)| b).map(|(&x, _)| x as f64).collect();
        let n = fg.len() as f64;
        let mean = fg.iter().sum::<f64>() / n;
        let var = fg.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-3);
        assert!(v.iter().all(|x| x.is_finite()));
        assert!(v.iter().zip(&a.brain_mask).all(|(&x, &b)| b || x == 0.0));
    }
}
