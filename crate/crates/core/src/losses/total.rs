use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights of the auxiliary terms. Defaults: 0.1, 0.1, 1.0, 0.5, 0.5.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lambdas {
    /// CVAE reconstruction and KL.
    pub cvae: f64,
    /// HSIC independence.
    pub hsic: f64,
    /// Region causality.
    pub rc: f64,
    /// Counterfactual confusion.
    pub conf: f64,
    /// Spatial discrepancy.
    pub dis: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas { cvae: 0.1, hsic: 0.1, rc: 1.0, conf: 0.5, dis: 0.5 }
    }
}

impl Lambdas {
    pub const ZERO: Lambdas = Lambdas { cvae: 0.0, hsic: 0.0, rc: 0.0, conf: 0.0, dis: 0.0 };

    pub fn as_array(&self) -> [f64; 5] {
        [self.cvae, self.hsic, self.rc, self.conf, self.dis]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in ["cvae", "hsic", "rc", "conf", "dis"].iter().zip(self.as_array()) {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(
                    format!("lambdas.{name}"),
                    format!("must be finite and non-negative, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// Unweighted loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub seg: f64,
    pub cvae: f64,
    pub hsic: f64,
    pub rc: f64,
    pub conf: f64,
    pub dis: f64,
}

impl LossTerms {
    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("seg", self.seg),
            ("cvae", self.cvae),
            ("hsic", self.hsic),
            ("rc", self.rc),
            ("conf", self.conf),
            ("dis", self.dis),
        ]
    }
}

/// Components, weights and the weighted total, as logged per step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    #[serde(flatten)]
    pub terms: LossTerms,
    pub lambdas: Lambdas,
    pub total: f64,
}

impl LossBundle {
    /// Recomputes the weighted sum in the fixed left-to-right order.
    pub fn weighted_sum(terms: &LossTerms, l: &Lambdas) -> f64 {
        terms.seg
            + l.cvae * terms.cvae
            + l.hsic * terms.hsic
            + l.rc * terms.rc
            + l.conf * terms.conf
            + l.dis * terms.dis
    }
}

/// `seg + l1*cvae + l2*hsic + l3*rc + l4*conf + l5*dis`.
///
/// Fails on the first non-finite component, naming it.
pub fn total_loss(terms: LossTerms, lambdas: Lambdas) -> Result<LossBundle> {
    for (term, value) in terms.named() {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { term, value });
        }
    }
    let total = LossBundle::weighted_sum(&terms, &lambdas);
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss { term: "total", value: total });
    }
    Ok(LossBundle { terms, lambdas, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_sum_examples() {
        let l = Lambdas::default();
        assert_eq!(total_loss(LossTerms::default(), l).unwrap().total, 0.0);
        let seg_only = LossTerms { seg: 1.0, ..Default::default() };
        assert_eq!(total_loss(seg_only, Lambdas { cvae: 3.0, ..l }).unwrap().total, 1.0);
        let ones = LossTerms { seg: 1.0, cvae: 1.0, hsic: 1.0, rc: 1.0, conf: 1.0, dis: 1.0 };
        assert!((total_loss(ones, l).unwrap().total - 3.2).abs() < 1e-12);
    }

    #[test]
    fn non_finite_term_is_named() {
        let t = LossTerms { hsic: f64::NAN, ..Default::default() };
        match total_loss(t, Lambdas::default()) {
            Err(Error::NonFiniteLoss { term, .. }) => assert_eq!(term, "hsic"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
