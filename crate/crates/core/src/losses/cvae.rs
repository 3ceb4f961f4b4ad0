use crate::error::{Error, Result};

/// Closed-form `KL(N(mu, diag exp(logvar)) || N(0, I))`.
pub fn kl_standard_normal(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu.iter().zip(logvar).map(|(m, lv)| m * m + lv.exp() - lv - 1.0).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeGrad {
    pub value: f64,
    /// Gradients w.r.t. each reconstruction, `mu` and `logvar`, in input order.
    pub recon: Vec<Vec<f64>>,
    pub mu: Vec<Vec<f64>>,
    pub logvar: Vec<Vec<f64>>,
}

/// `sum_m [ mean|x_m - x_hat_m| + lambda_kl * KL_m ]` over the observed modalities.
pub fn cvae_loss(pairs: &[(&[f64], &[f64])], posteriors: &[(&[f64], &[f64])], lambda_kl: f64) -> Result<CvaeGrad> {
    if pairs.len() != posteriors.len() {
        return Err(Error::ShapeMismatch(format!(
            "cvae_loss: {} reconstruction pairs but {} posteriors",
            pairs.len(),
            posteriors.len()
        )));
    }
    let mut out = CvaeGrad { value: 0.0, recon: Vec::new(), mu: Vec::new(), logvar: Vec::new() };
    for (&(x, xh), &(mu, lv)) in pairs.iter().zip(posteriors) {
        if x.len() != xh.len() || x.is_empty() || mu.len() != lv.len() {
            return Err(Error::ShapeMismatch("cvae_loss: ragged inputs".into()));
        }
        let n = x.len() as f64;
        let l1 = x.iter().zip(xh).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        out.value += l1 + lambda_kl * kl_standard_normal(mu, lv);
        out.recon.push(
            x.iter()
                .zip(xh)
                .map(|(a, b)| {
                    if b > a {
                        1.0 / n
                    } else if b < a {
                        -1.0 / n
                    } else {
                        0.0
                    }
                })
                .collect(),
        );
        out.mu.push(mu.iter().map(|m| lambda_kl * m).collect());
        out.logvar.push(lv.iter().map(|l| lambda_kl * 0.5 * (l.exp() - 1.0)).collect());
    }
    Ok(out)
}
