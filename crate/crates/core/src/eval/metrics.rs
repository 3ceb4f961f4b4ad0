use crate::domain::Label;
use crate::error::{Error, Result};

/// Whole tumour, tumour core and enhancing tumour masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMasks {
    pub wt: Vec<bool>,
    pub tc: Vec<bool>,
    pub et: Vec<bool>,
}

impl RegionMasks {
    pub fn regions(&self) -> [&[bool]; 3] {
        [&self.wt, &self.tc, &self.et]
    }
}

/// WT = NCR/NET | ED | ET, TC = NCR/NET | ET, ET = ET.
pub fn region_masks(label_map: &[u8]) -> Result<RegionMasks> {
    let n = label_map.len();
    let mut masks = RegionMasks { wt: vec![false; n], tc: vec![false; n], et: vec![false; n] };
    for (i, &v) in label_map.iter().enumerate() {
        let label = Label::from_u8(v).ok_or(Error::UnknownLabel(v))?;
        masks.wt[i] = label != Label::Background;
        masks.tc[i] = matches!(label, Label::Necrotic | Label::Enhancing);
        masks.et[i] = label == Label::Enhancing;
    }
    Ok(masks)
}

/// Dice similarity in percent. Two empty masks score 100.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("dice over {} vs {} voxels", pred.len(), gt.len())));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / (p + g) as f64)
}

/// Per-region Dice `[WT, TC, ET]` of a predicted label map.
pub fn region_dice(pred: &[u8], gt: &[u8]) -> Result<[f64; 3]> {
    let (p, g) = (region_masks(pred)?, region_masks(gt)?);
    Ok([dice(&p.wt, &g.wt)?, dice(&p.tc, &g.tc)?, dice(&p.et, &g.et)?])
}

/// Voxelwise argmax over `[K, V]` logits.
pub fn argmax_labels(logits: &[f32], k: usize) -> Vec<u8> {
    let v = logits.len() / k;
    (0..v)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if logits[c * v + i] > logits[best * v + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
