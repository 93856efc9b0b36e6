use crate::error::{Error, Result};

/// Equal-width bin index of every value over the observed range, or `None`
/// when the values are constant.
pub fn discretize(values: &[f64], bins: usize) -> Option<Vec<usize>> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return None;
    }
    let width = hi - lo;
    Some(
        values
            .iter()
            .map(|&v| (((v - lo) / width * bins as f64) as usize).min(bins - 1))
            .collect(),
    )
}

/// Maps arbitrary labels to `0..n_distinct` in ascending label order.
pub(crate) fn dense_labels(levels: &[u16]) -> (Vec<usize>, usize) {
    let mut distinct: Vec<u16> = levels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let idx = levels.iter().map(|l| distinct.binary_search(l).unwrap()).collect();
    (idx, distinct.len())
}

/// Plug-in entropy of a discrete label sequence, in nats.
pub fn entropy(levels: &[u16]) -> f64 {
    let (idx, k) = dense_labels(levels);
    let mut counts = vec![0usize; k];
    idx.iter().for_each(|&i| counts[i] += 1);
    let n = levels.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in mutual information (nats) between a continuous latent, discretized
/// into `bins` equal-width bins, and a discrete factor. Constant latents carry
/// no information and give 0.
pub fn mutual_info(latent: &[f64], levels: &[u16], bins: usize) -> Result<f64> {
    if latent.len() != levels.len() || latent.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "mutual_info needs two equal-length series of length ≥ 2, got {} and {}",
            latent.len(),
            levels.len()
        )));
    }
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {bins}")));
    }
    let Some(binned) = discretize(latent, bins) else {
        return Ok(0.0);
    };
    let (lv, k) = dense_labels(levels);
    Ok(discrete_mi(&binned, bins, &lv, k))
}

pub(crate) fn discrete_mi(a: &[usize], na: usize, b: &[usize], nb: usize) -> f64 {
    let n = a.len() as f64;
    let mut joint = vec![0usize; na * nb];
    let mut ca = vec![0usize; na];
    let mut cb = vec![0usize; nb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * nb + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let mut mi = 0.0;
    for x in 0..na {
        for y in 0..nb {
            let c = joint[x * nb + y];
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (ca[x] as f64 * cb[y] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}
