use std::fmt;

use serde::{Deserialize, Serialize};

use super::mi::{entropy, mutual_info};
use crate::datasets::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::model::LadderModel;
use crate::rng::RngStream;

pub const DEFAULT_BINS: usize = 20;

/// Posterior-mean latents paired with ground-truth factor levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentFactorTable {
    /// One row per sample, one column per latent dimension.
    pub latents: Vec<Vec<f64>>,
    /// Ladder of origin of each latent column.
    pub ladder_of: Vec<usize>,
    /// One row per sample, one column per factor.
    pub factors: Vec<Vec<u16>>,
    pub factor_names: Vec<String>,
    pub bins: usize,
}

impl LatentFactorTable {
    pub fn new(
        latents: Vec<Vec<f64>>,
        ladder_of: Vec<usize>,
        factors: Vec<Vec<u16>>,
        factor_names: Vec<String>,
        bins: usize,
    ) -> Result<Self> {
        let j = ladder_of.len();
        let k = factor_names.len();
        if latents.len() != factors.len() || latents.iter().any(|r| r.len() != j) || factors.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidArgument("latent/factor table has missing entries".into()));
        }
        Ok(Self { latents, ladder_of, factors, factor_names, bins })
    }

    /// Posterior means of every trajectory in eval mode, ladders concatenated.
    pub fn from_model(model: &LadderModel, dataset: &TrajectoryDataset, bins: usize) -> Result<Self> {
        let x = dataset.all_tensor()?;
        let means = model.posterior_means(&x)?;
        let ladder_of: Vec<usize> = model
            .config()
            .latent_dims
            .iter()
            .enumerate()
            .flat_map(|(l, &d)| std::iter::repeat_n(l, d))
            .collect();
        let latents = (0..dataset.len())
            .map(|b| {
                means
                    .iter()
                    .flat_map(|t| {
                        let d = t.shape()[1];
                        t.data()[b * d..(b + 1) * d].iter().copied()
                    })
                    .collect()
            })
            .collect();
        let names = dataset.factors.iter().map(|f| f.name.clone()).collect();
        Self::new(latents, ladder_of, dataset.levels(), names, bins)
    }

    /// `draws` reparameterized posterior samples per trajectory (eval mode),
    /// each row carrying its trajectory's factor levels.
    pub fn from_model_sampled(
        model: &LadderModel,
        dataset: &TrajectoryDataset,
        draws: usize,
        bins: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if draws == 0 {
            return Err(Error::InvalidArgument("at least one posterior draw is required".into()));
        }
        let means = Self::from_model(model, dataset, bins)?;
        let (_, log_sigma) = model.posterior(&dataset.all_tensor()?)?;
        let mut latents = Vec::with_capacity(dataset.len() * draws);
        let mut factors = Vec::with_capacity(dataset.len() * draws);
        for (b, (mu, levels)) in means.latents.iter().zip(&means.factors).enumerate() {
            let sigma: Vec<f64> = log_sigma
                .iter()
                .flat_map(|t| {
                    let d = t.shape()[1];
                    t.data()[b * d..(b + 1) * d].iter().map(|ls| ls.exp())
                })
                .collect();
            for _ in 0..draws {
                latents.push(mu.iter().zip(&sigma).map(|(m, s)| m + s * rng.normal()).collect());
                factors.push(levels.clone());
            }
        }
        Self::new(latents, means.ladder_of, factors, means.factor_names, bins)
    }

    pub fn num_latents(&self) -> usize {
        self.ladder_of.len()
    }

    pub fn num_factors(&self) -> usize {
        self.factor_names.len()
    }

    pub fn latent_column(&self, j: usize) -> Vec<f64> {
        self.latents.iter().map(|r| r[j]).collect()
    }

    pub fn factor_column(&self, k: usize) -> Vec<u16> {
        self.factors.iter().map(|r| r[k]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigReport {
    pub mig: f64,
    /// Normalized gap per factor; `None` for factors excluded because `H(v_k) = 0`.
    pub gaps: Vec<Option<f64>>,
    /// `I(z_j; v_k)` in nats, indexed `[j][k]`.
    pub mi: Vec<Vec<f64>>,
    /// `I(z_j; v_k) / H(v_k)`, indexed `[j][k]` (zero for excluded factors).
    pub mi_normalized: Vec<Vec<f64>>,
    pub entropies: Vec<f64>,
    /// Most informative latent per factor (`None` when excluded).
    pub argmax: Vec<Option<usize>>,
    pub concentration_flag: bool,
    pub warnings: Vec<String>,
}

impl MigReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Mutual information gap: mean over factors of
/// `(I(z_{j(k)}; v_k) − max_{j≠j(k)} I(z_j; v_k)) / H(v_k)`.
///
/// Ties in the argmax go to the lowest latent index. Factors with a single
/// observed level are skipped with a warning. `concentration_flag` is raised
/// when at least two factors share the same most-informative latent for all
/// factors.
pub fn mig(table: &LatentFactorTable) -> Result<MigReport> {
    let nj = table.num_latents();
    let nk = table.num_factors();
    if nj < 2 {
        return Err(Error::InvalidArgument(format!("MIG needs at least 2 latent dimensions, got {nj}")));
    }
    let columns: Vec<Vec<f64>> = (0..nj).map(|j| table.latent_column(j)).collect();
    let mut mi = vec![vec![0.0; nk]; nj];
    let mut mi_normalized = vec![vec![0.0; nk]; nj];
    let mut entropies = Vec::with_capacity(nk);
    let mut gaps = Vec::with_capacity(nk);
    let mut argmax = Vec::with_capacity(nk);
    let mut warnings = Vec::new();

    for k in 0..nk {
        let v = table.factor_column(k);
        let h = entropy(&v);
        entropies.push(h);
        for j in 0..nj {
            mi[j][k] = mutual_info(&columns[j], &v, table.bins)?;
        }
        if h <= 0.0 {
            warnings.push(format!("factor '{}' has a single observed level; excluded", table.factor_names[k]));
            gaps.push(None);
            argmax.push(None);
            continue;
        }
        for j in 0..nj {
            mi_normalized[j][k] = mi[j][k] / h;
        }
        let mut best = 0;
        for j in 1..nj {
            if mi[j][k] > mi[best][k] {
                best = j;
            }
        }
        let second = (0..nj).filter(|&j| j != best).map(|j| mi[j][k]).fold(f64::NEG_INFINITY, f64::max);
        gaps.push(Some((mi[best][k] - second) / h));
        argmax.push(Some(best));
    }

    let included: Vec<f64> = gaps.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::InvalidArgument("no factor has more than one observed level".into()));
    }
    let chosen: Vec<usize> = argmax.iter().flatten().copied().collect();
    let concentration_flag = chosen.len() >= 2 && chosen.iter().all(|&j| j == chosen[0]);
    Ok(MigReport {
        mig: included.iter().sum::<f64>() / included.len() as f64,
        gaps,
        mi,
        mi_normalized,
        entropies,
        argmax,
        concentration_flag,
        warnings,
    })
}

/// Per-factor counts of the ladder holding the most informative latent,
/// accumulated over repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderAttribution {
    pub factor_names: Vec<String>,
    /// `counts[k][l]`: runs in which factor `k`'s argmax latent sat in ladder `l`.
    pub counts: Vec<Vec<usize>>,
}

pub fn ladder_attribution(table: &LatentFactorTable, runs: &[MigReport]) -> LadderAttribution {
    let ladders = table.ladder_of.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![vec![0; ladders]; table.num_factors()];
    for run in runs {
        for (k, j) in run.argmax.iter().enumerate() {
            if let (Some(j), Some(row)) = (j, counts.get_mut(k)) {
                row[table.ladder_of[*j]] += 1;
            }
        }
    }
    LadderAttribution { factor_names: table.factor_names.clone(), counts }
}

impl fmt::Display for LadderAttribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ladders = self.counts.first().map_or(0, Vec::len);
        write!(f, "{:<24}", "factor")?;
        for l in 0..ladders {
            write!(f, "{:>6}", format!("L{}", l + 1))?;
        }
        writeln!(f)?;
        for (name, row) in self.factor_names.iter().zip(&self.counts) {
            write!(f, "{name:<24}")?;
            for c in row {
                write!(f, "{c:>6}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factorial_levels(cards: &[u16]) -> Vec<Vec<u16>> {
        let mut rows = vec![vec![]];
        for &c in cards {
            rows = rows.into_iter().flat_map(|r| (0..c).map(move |l| [r.clone(), vec![l]].concat())).collect();
        }
        rows
    }

    fn table(latents: Vec<Vec<f64>>, factors: Vec<Vec<u16>>, ladder_of: Vec<usize>) -> LatentFactorTable {
        let k = factors[0].len();
        LatentFactorTable::new(latents, ladder_of, factors, (0..k).map(|i| format!("f{i}")).collect(), DEFAULT_BINS).unwrap()
    }

    #[test]
    fn perfect_distinct_codes_give_one() {
        let f = factorial_levels(&[2, 2, 5]);
        let lat: Vec<Vec<f64>> = f.iter().map(|r| vec![r[0] as f64, r[1] as f64, r[2] as f64, 0.0]).collect();
        let rep = mig(&table(lat, f, vec![0, 0, 1, 1])).unwrap();
        assert!((rep.mig - 1.0).abs() < 1e-12, "{}", rep.mig);
        assert_eq!(rep.argmax, vec![Some(0), Some(1), Some(2)]);
        assert!(!rep.concentration_flag);
    }

    #[test]
    fn independent_noise_latent_barely_lowers_mig() {
        let f: Vec<Vec<u16>> = (0..20).flat_map(|_| factorial_levels(&[2, 2, 5])).collect();
        let mut rng = RngStream::new(3);
        let lat: Vec<Vec<f64>> = f.iter().map(|r| vec![r[0] as f64, r[1] as f64, r[2] as f64, rng.normal()]).collect();
        let rep = mig(&table(lat, f, vec![0, 0, 1, 1])).unwrap();
        assert!(rep.mig > 0.95 && rep.mig <= 1.0, "{}", rep.mig);
    }

    #[test]
    fn duplicated_latents_give_zero() {
        let f = factorial_levels(&[2, 5]);
        let lat: Vec<Vec<f64>> = f.iter().map(|r| vec![r[0] as f64 + 10.0 * r[1] as f64; 2]).collect();
        let rep = mig(&table(lat, f, vec![0, 1])).unwrap();
        assert!(rep.mig.abs() < 1e-12);
    }

    #[test]
    fn single_informative_latent_raises_concentration_flag() {
        let f = factorial_levels(&[2, 2, 5]);
        let mut rng = RngStream::new(4);
        let lat: Vec<Vec<f64>> = f
            .iter()
            .map(|r| vec![rng.normal() * 1e-3, (r[0] * 10 + r[1] * 5 + r[2]) as f64, rng.normal() * 1e-3])
            .collect();
        let mut small = table(lat, f, vec![0, 1, 2]);
        small.bins = 40;
        let rep = mig(&small).unwrap();
        assert!(rep.concentration_flag);
        assert_eq!(rep.argmax, vec![Some(1); 3]);
    }

    #[test]
    fn single_level_factor_is_excluded() {
        let f: Vec<Vec<u16>> = (0..10).map(|i| vec![(i % 2) as u16, 0]).collect();
        let lat: Vec<Vec<f64>> = f.iter().map(|r| vec![r[0] as f64, 0.5]).collect();
        let rep = mig(&table(lat, f, vec![0, 1])).unwrap();
        assert_eq!(rep.gaps[1], None);
        assert_eq!(rep.warnings.len(), 1);
        assert!((rep.mig - 1.0).abs() < 1e-12);
    }

    #[test]
    fn needs_two_latents() {
        let f: Vec<Vec<u16>> = (0..4).map(|i| vec![(i % 2) as u16]).collect();
        let lat: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        assert!(mig(&table(lat, f, vec![0])).is_err());
    }

    #[test]
    fn attribution_counts_runs() {
        let f = factorial_levels(&[2, 2, 5]);
        let lat: Vec<Vec<f64>> = f.iter().map(|_| vec![0.0; 14]).collect();
        let ladder_of: Vec<usize> = [vec![0; 8], vec![1; 4], vec![2; 2]].concat();
        let t = table(lat, f, ladder_of);
        let run = MigReport {
            mig: 0.0,
            gaps: vec![Some(0.0); 3],
            mi: vec![],
            mi_normalized: vec![],
            entropies: vec![],
            argmax: vec![Some(12), Some(0), Some(9)],
            concentration_flag: false,
            warnings: vec![],
        };
        let att = ladder_attribution(&t, &vec![run; 10]);
        assert_eq!(att.counts, vec![vec![0, 0, 10], vec![10, 0, 0], vec![0, 10, 0]]);
        assert!(att.counts.iter().all(|r| r.iter().sum::<usize>() == 10));
        assert_eq!(att.to_string().lines().count(), 4);
    }
}
