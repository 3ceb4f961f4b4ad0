use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::domain::{Availability, Modality, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::{CausalFeatures, Model};
use crate::phantom::MultimodalSample;

use super::metrics::{argmax_labels, region_dice};

/// Anything that can produce label maps for a case under several
/// availability masks.
pub trait Segmenter {
    fn segment(&self, case: &MultimodalSample, subsets: &[Availability]) -> Result<Vec<Vec<u8>>>;
}

impl Segmenter for Model {
    /// Encodes each modality once and reuses the features for every subset.
    fn segment(&self, case: &MultimodalSample, subsets: &[Availability]) -> Result<Vec<Vec<u8>>> {
        let mut g = Graph::new();
        let mut feats: Vec<(Modality, CausalFeatures)> = Vec::new();
        for m in Modality::ALL {
            if subsets.iter().any(|s| s.contains(m)) {
                let x = self.volume_input(&mut g, &case.volumes[m.index()])?;
                feats.push((m, self.encode_causal(&mut g, x, m)));
            }
        }
        let refs: Vec<(Modality, &CausalFeatures)> = feats.iter().map(|(m, f)| (*m, f)).collect();
        subsets
            .iter()
            .map(|&s| {
                let fused = self.fuse(&mut g, &refs, s)?;
                let logits = self.decode_segmentation(&mut g, &fused)?;
                Ok(argmax_labels(g.value(logits).data(), NUM_CLASSES))
            })
            .collect()
    }
}

impl<F> Segmenter for F
where
    F: Fn(&MultimodalSample, Availability) -> Result<Vec<u8>>,
{
    fn segment(&self, case: &MultimodalSample, subsets: &[Availability]) -> Result<Vec<Vec<u8>>> {
        subsets.iter().map(|&s| self(case, s)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetRow {
    pub availability: Availability,
    pub label: String,
    pub wt: f64,
    pub tc: f64,
    pub et: f64,
}

impl SubsetRow {
    pub fn avg(&self) -> f64 {
        (self.wt + self.tc + self.et) / 3.0
    }
}

/// Mean Dice per region for each of the fifteen availability masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetGrid {
    pub rows: Vec<SubsetRow>,
    /// Column means over the rows, `[WT, TC, ET]`.
    pub means: [f64; 3],
    /// Mean of the three column means.
    pub macro_avg: f64,
}

impl SubsetGrid {
    pub fn from_rows(rows: Vec<SubsetRow>) -> Self {
        let n = rows.len().max(1) as f64;
        let means = [
            rows.iter().map(|r| r.wt).sum::<f64>() / n,
            rows.iter().map(|r| r.tc).sum::<f64>() / n,
            rows.iter().map(|r| r.et).sum::<f64>() / n,
        ];
        let macro_avg = means.iter().sum::<f64>() / 3.0;
        SubsetGrid { rows, means, macro_avg }
    }

    pub fn row(&self, availability: Availability) -> Option<&SubsetRow> {
        self.rows.iter().find(|r| r.availability == availability)
    }
}

/// Evaluates `subsets` on `cases` (cases in the given order).
pub fn evaluate_masks(
    model: &dyn Segmenter,
    cases: &[MultimodalSample],
    subsets: &[Availability],
) -> Result<SubsetGrid> {
    if cases.is_empty() {
        return Err(Error::Dataset("evaluation split is empty".into()));
    }
    let mut sums = vec![[0.0f64; 3]; subsets.len()];
    for case in cases {
        let preds = model.segment(case, subsets)?;
        for (acc, pred) in sums.iter_mut().zip(&preds) {
            let d = region_dice(pred, &case.label_map)?;
            for r in 0..3 {
                acc[r] += d[r];
            }
        }
    }
    let n = cases.len() as f64;
    let rows = subsets
        .iter()
        .zip(sums)
        .map(|(&s, acc)| SubsetRow {
            availability: s,
            label: s.label(),
            wt: acc[0] / n,
            tc: acc[1] / n,
            et: acc[2] / n,
        })
        .collect();
    Ok(SubsetGrid::from_rows(rows))
}

/// The fifteen-row missing-modality grid.
pub fn evaluate_subsets(model: &dyn Segmenter, cases: &[MultimodalSample]) -> Result<SubsetGrid> {
    evaluate_masks(model, cases, &Availability::all_subsets())
}
