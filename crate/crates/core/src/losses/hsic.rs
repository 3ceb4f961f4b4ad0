use crate::error::{Error, Result};

/// Lower bound on RBF bandwidths.
pub const BANDWIDTH_FLOOR: f64 = 1e-6;

/// Order-independent sum: sorting first makes the result depend only on the
/// multiset of terms, which gives exact invariance under paired row shuffles.
fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

fn sq_dist(x: &[f64], d: usize, i: usize, j: usize) -> f64 {
    x[i * d..(i + 1) * d].iter().zip(&x[j * d..(j + 1) * d]).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Median pairwise Euclidean distance between the `n` rows of `x` (`n x d`),
/// floored at [`BANDWIDTH_FLOOR`].
pub fn median_bandwidth(x: &[f64], d: usize, n: usize) -> f64 {
    let mut dists: Vec<f64> =
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| sq_dist(x, d, i, j).sqrt()).collect();
    if dists.is_empty() {
        return BANDWIDTH_FLOOR;
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let med = if m % 2 == 1 { dists[m / 2] } else { 0.5 * (dists[m / 2 - 1] + dists[m / 2]) };
    med.max(BANDWIDTH_FLOOR)
}

/// RBF Gram matrices of paired rows, `k(u, v) = exp(-|u - v|^2 / sigma^2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GramPair {
    pub n: usize,
    pub k_c: Vec<f64>,
    pub k_b: Vec<f64>,
    pub sigma_c: f64,
    pub sigma_b: f64,
}

fn gram(x: &[f64], d: usize, n: usize, sigma: f64) -> Vec<f64> {
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] = (-sq_dist(x, d, i, j) / (sigma * sigma)).exp();
        }
    }
    k
}

/// `K - row means - column means + grand mean`, i.e. `H K H` for symmetric `K`.
fn double_center(k: &[f64], n: usize) -> Vec<f64> {
    let r: Vec<f64> = (0..n).map(|i| sorted_sum(k[i * n..(i + 1) * n].to_vec()) / n as f64).collect();
    let g = sorted_sum(r.clone()) / n as f64;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = k[i * n + j] - (r[i] + r[j]) + g;
        }
    }
    out
}

impl GramPair {
    /// Builds both Gram matrices. `bandwidths` overrides the median heuristic.
    pub fn new(c: &[f64], dc: usize, b: &[f64], db: usize, n: usize, bandwidths: Option<(f64, f64)>) -> Result<Self> {
        if n < 2 {
            return Err(Error::TooFewSamples(n));
        }
        if c.len() != n * dc || b.len() != n * db || dc == 0 || db == 0 {
            return Err(Error::ShapeMismatch(format!(
                "hsic: {} causal and {} bias values for {n} rows of widths {dc} and {db}",
                c.len(),
                b.len()
            )));
        }
        let (sigma_c, sigma_b) = match bandwidths {
            Some((sc, sb)) => (sc.max(BANDWIDTH_FLOOR), sb.max(BANDWIDTH_FLOOR)),
            None => (median_bandwidth(c, dc, n), median_bandwidth(b, db, n)),
        };
        Ok(GramPair { n, k_c: gram(c, dc, n, sigma_c), k_b: gram(b, db, n, sigma_b), sigma_c, sigma_b })
    }

    /// The centering matrix `I - (1/N) 11^T`.
    pub fn centering(&self) -> Vec<f64> {
        let n = self.n;
        let mut h = vec![-1.0 / n as f64; n * n];
        for i in 0..n {
            h[i * n + i] += 1.0;
        }
        h
    }

    /// `Tr(K_C H K_B H) / (N - 1)^2`, evaluated as the elementwise product of
    /// the two double-centred matrices.
    pub fn value(&self) -> f64 {
        let n = self.n;
        let cc = double_center(&self.k_c, n);
        let cb = double_center(&self.k_b, n);
        sorted_sum(cc.iter().zip(&cb).map(|(a, b)| a * b).collect()) / ((n - 1) * (n - 1)) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HsicOutput {
    pub value: f64,
    pub grad_c: Vec<f64>,
    pub grad_b: Vec<f64>,
    pub sigma_c: f64,
    pub sigma_b: f64,
}

fn rbf_grad(x: &[f64], d: usize, n: usize, k: &[f64], weight: &[f64], sigma: f64) -> Vec<f64> {
    let mut g = vec![0.0; n * d];
    let s = -4.0 / (sigma * sigma);
    for i in 0..n {
        for j in 0..n {
            let w = s * weight[i * n + j] * k[i * n + j];
            if w == 0.0 {
                continue;
            }
            for t in 0..d {
                g[i * d + t] += w * (x[i * d + t] - x[j * d + t]);
            }
        }
    }
    g
}

/// Biased empirical HSIC between paired rows of `c` (`n x dc`) and `b` (`n x db`).
///
/// Bandwidths default to the median heuristic and are treated as constants
/// for the gradient.
pub fn hsic(
    c: &[f64],
    dc: usize,
    b: &[f64],
    db: usize,
    n: usize,
    bandwidths: Option<(f64, f64)>,
) -> Result<HsicOutput> {
    let pair = GramPair::new(c, dc, b, db, n, bandwidths)?;
    let value = pair.value();
    let scale = 1.0 / ((n - 1) * (n - 1)) as f64;
    let wc: Vec<f64> = double_center(&pair.k_b, n).into_iter().map(|v| v * scale).collect();
    let wb: Vec<f64> = double_center(&pair.k_c, n).into_iter().map(|v| v * scale).collect();
    Ok(HsicOutput {
        value,
        grad_c: rbf_grad(c, dc, n, &pair.k_c, &wc, pair.sigma_c),
        grad_b: rbf_grad(b, db, n, &pair.k_b, &wb, pair.sigma_b),
        sigma_c: pair.sigma_c,
        sigma_b: pair.sigma_b,
    })
}
