use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ContextTerms, EnvironmentModel};
use crate::error::{Error, Result};
use crate::policy::{ScoreTable, Scorer};
use crate::rng::RngStream;
use crate::types::{ContextVector, Ranking};

/// A dense contexts × actions matrix of potential rewards, with optional raw
/// context features aligned by row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionMatrix {
    pub row_ids: Vec<String>,
    pub action_ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
    #[serde(default)]
    pub features: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subsample {
    pub rows: usize,
    pub cols: usize,
}

fn parse_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<(String, Vec<f64>)>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(path, e.to_string()))?
        .iter()
        .skip(1)
        .map(str::to_owned)
        .collect();
    if header.is_empty() {
        return Err(parse_err(path, "header has no value columns"));
    }
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, e.to_string()))?;
        if rec.len() != header.len() + 1 {
            return Err(parse_err(
                path,
                format!(
                    "row {} has {} cells, expected {}",
                    line + 2,
                    rec.len(),
                    header.len() + 1
                ),
            ));
        }
        let id = rec[0].to_owned();
        let values = rec
            .iter()
            .skip(1)
            .map(|cell| {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(path, format!("row `{id}`: bad value `{cell}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((id, values));
    }
    if rows.is_empty() {
        return Err(parse_err(path, "no data rows"));
    }
    Ok((header, rows))
}

/// Reads the interaction matrix (header of action ids, first column of row
/// ids) and an optional sidecar of raw context features keyed by the same row
/// ids, then optionally subsamples rows and columns uniformly without
/// replacement (original order kept).
pub fn load_interaction_matrix(
    path: &Path,
    features_path: Option<&Path>,
    subsample: Option<Subsample>,
    rng: &RngStream,
) -> Result<InteractionMatrix> {
    let (action_ids, rows) = read_table(path)?;
    let (row_ids, values): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let features = match features_path {
        None => None,
        Some(fp) => {
            let (_, frows) = read_table(fp)?;
            let by_id: HashMap<String, Vec<f64>> = frows.into_iter().collect();
            Some(
                row_ids
                    .iter()
                    .map(|id| {
                        by_id
                            .get(id)
                            .cloned()
                            .ok_or_else(|| parse_err(fp, format!("no features for row `{id}`")))
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        }
    };
    let mut m = InteractionMatrix {
        row_ids,
        action_ids,
        values,
        features,
    };
    if let Some(s) = subsample {
        m = m.subsample(s, rng)?;
    }
    Ok(m)
}

impl InteractionMatrix {
    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn cols(&self) -> usize {
        self.action_ids.len()
    }

    pub fn subsample(&self, s: Subsample, rng: &RngStream) -> Result<Self> {
        if s.rows == 0 || s.rows > self.rows() || s.cols < 2 || s.cols > self.cols() {
            return Err(Error::config(
                "subsample",
                format!(
                    "{}x{} requested from a {}x{} matrix",
                    s.rows,
                    s.cols,
                    self.rows(),
                    self.cols()
                ),
            ));
        }
        let mut rng = rng.derive("subsample");
        let mut rows = index::sample(&mut rng, self.rows(), s.rows).into_vec();
        let mut cols = index::sample(&mut rng, self.cols(), s.cols).into_vec();
        rows.sort_unstable();
        cols.sort_unstable();
        Ok(Self {
            row_ids: rows.iter().map(|&i| self.row_ids[i].clone()).collect(),
            action_ids: cols.iter().map(|&j| self.action_ids[j].clone()).collect(),
            values: rows
                .iter()
                .map(|&i| cols.iter().map(|&j| self.values[i][j]).collect())
                .collect(),
            features: self
                .features
                .as_ref()
                .map(|f| rows.iter().map(|&i| f[i].clone()).collect()),
        })
    }
}

/// Projects rows onto the top `dims` principal components of the centred
/// feature matrix. Each component's sign is fixed so its largest-magnitude
/// loading is positive.
pub fn pca_project(features: &[Vec<f64>], dims: usize) -> Result<Vec<Vec<f64>>> {
    let n = features.len();
    let d = features.first().map_or(0, |r| r.len());
    if n == 0 || d == 0 {
        return Err(Error::EmptyDataset);
    }
    if dims == 0 || dims > d {
        return Err(Error::config(
            "d_reduced",
            format!("must lie in 1..={d} for {d} raw features"),
        ));
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = x.transpose() * &x / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut basis = DMatrix::zeros(d, dims);
    for (c, &i) in order.iter().take(dims).enumerate() {
        let mut v = eig.eigenvectors.column(i).clone_owned();
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
        if pivot < 0.0 {
            v.neg_mut();
        }
        basis.set_column(c, &v);
    }
    let z = x * basis;
    Ok((0..n).map(|i| z.row(i).iter().copied().collect()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemiSyntheticConfig {
    pub d_reduced: usize,
    pub threshold: f64,
    #[serde(rename = "K")]
    pub ranking_length: usize,
    pub reward_sigma: f64,
}

impl Default for SemiSyntheticConfig {
    fn default() -> Self {
        Self {
            d_reduced: 10,
            threshold: 2.0,
            ranking_length: 6,
            reward_sigma: 1.0,
        }
    }
}

/// Rewards read from an interaction matrix; clicks `1 − η` above the
/// threshold and `η` otherwise, with no position discount.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemiSyntheticEnvironment {
    pub config: SemiSyntheticConfig,
    pub action_ids: Vec<String>,
    pub reward_matrix: Vec<Vec<f64>>,
    pub click_matrix: Vec<Vec<f64>>,
    pub eta_matrix: Vec<Vec<f64>>,
    pub contexts: Vec<ContextVector>,
}

/// `η ~ U(0, 0.5]` per cell, so every click probability lies in `(0, 1)`.
/// Raw features are the sidecar when present, otherwise the reward rows.
pub fn build_semisynthetic(
    matrix: &InteractionMatrix,
    cfg: &SemiSyntheticConfig,
    rng: &RngStream,
) -> Result<SemiSyntheticEnvironment> {
    let (rows, cols) = (matrix.rows(), matrix.cols());
    if cfg.ranking_length == 0 || cfg.ranking_length > cols {
        return Err(Error::config(
            "K",
            format!("need 1 <= K <= {cols}, got {}", cfg.ranking_length),
        ));
    }
    if !(cfg.reward_sigma > 0.0) {
        return Err(Error::config("reward_sigma", "must be > 0"));
    }
    if matrix.values.iter().any(|r| r.len() != cols) {
        return Err(Error::config("matrix", "ragged rows"));
    }
    let raw = matrix.features.as_ref().unwrap_or(&matrix.values);
    let reduced = pca_project(raw, cfg.d_reduced)?;
    let mut rng = rng.derive("eta");
    let eta_matrix: Vec<Vec<f64>> = (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| 0.5 * (1.0 - rng.random::<f64>()))
                .collect()
        })
        .collect();
    let click_matrix = matrix
        .values
        .iter()
        .zip(&eta_matrix)
        .map(|(r, e)| {
            r.iter()
                .zip(e)
                .map(|(&q, &eta)| if q > cfg.threshold { 1.0 - eta } else { eta })
                .collect()
        })
        .collect();
    Ok(SemiSyntheticEnvironment {
        config: cfg.clone(),
        action_ids: matrix.action_ids.clone(),
        reward_matrix: matrix.values.clone(),
        click_matrix,
        eta_matrix,
        contexts: reduced
            .into_iter()
            .enumerate()
            .map(|(i, v)| ContextVector::with_id(v, i as u32))
            .collect(),
    })
}

impl SemiSyntheticEnvironment {
    fn row(&self, id: Option<u32>) -> Result<usize> {
        let id = id.ok_or(Error::MissingContextId("semi-synthetic environment"))?;
        if (id as usize) < self.contexts.len() {
            Ok(id as usize)
        } else {
            Err(Error::UnknownContext(id))
        }
    }
}

impl EnvironmentModel for SemiSyntheticEnvironment {
    fn action_count(&self) -> usize {
        self.action_ids.len()
    }

    fn ranking_length(&self) -> usize {
        self.config.ranking_length
    }

    fn context_dim(&self) -> usize {
        self.config.d_reduced
    }

    fn reward_sigma(&self) -> f64 {
        self.config.reward_sigma
    }

    fn reward_independent(&self) -> bool {
        true
    }

    fn context_terms(&self, x: &ContextVector) -> Result<ContextTerms> {
        let i = self.row(x.id)?;
        Ok(ContextTerms {
            click: self.click_matrix[i].clone(),
            reward: self.reward_matrix[i].clone(),
            id: x.id,
        })
    }

    fn click_probs(&self, terms: &ContextTerms, ranking: &Ranking) -> Result<Vec<f64>> {
        Ok(ranking
            .slots()
            .iter()
            .map(|a| terms.click[a.index()])
            .collect())
    }

    fn potential_rewards(&self, terms: &ContextTerms, ranking: &Ranking) -> Vec<f64> {
        ranking
            .slots()
            .iter()
            .map(|a| terms.reward[a.index()])
            .collect()
    }

    fn sample_context(&self, rng: &mut RngStream) -> ContextVector {
        self.contexts[rng.random_range(0..self.contexts.len())].clone()
    }

    fn finite_contexts(&self) -> Option<&[ContextVector]> {
        Some(&self.contexts)
    }

    /// `q_c(x, a) + q_r(x, a)`.
    fn value_score(&self) -> Scorer {
        Scorer::Table(ScoreTable {
            score_table: self
                .click_matrix
                .iter()
                .zip(&self.reward_matrix)
                .map(|(c, r)| c.iter().zip(r).map(|(a, b)| a + b).collect())
                .collect(),
        })
    }

    fn click_score(&self) -> Scorer {
        Scorer::Table(ScoreTable {
            score_table: self.click_matrix.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p)
            .unwrap()
            .write_all(body.as_bytes())
            .unwrap();
        p
    }

    #[test]
    fn small_matrix_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "m.csv",
            "user,i0,i1,i2\nu0,1.5,2.5,0\nu1,3,0.25,-1\nu2,4,5,6\n",
        );
        let m = load_interaction_matrix(&p, None, None, &RngStream::new(0)).unwrap();
        assert_eq!(m.row_ids, ["u0", "u1", "u2"]);
        assert_eq!(m.action_ids, ["i0", "i1", "i2"]);
        assert_eq!(m.values[1], [3.0, 0.25, -1.0]);
    }

    #[test]
    fn parse_failures_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let bad = write(&dir, "bad.csv", "user,i0,i1\nu0,1,x\n");
        let err = load_interaction_matrix(&bad, None, None, &RngStream::new(0)).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
        let nan = write(&dir, "nan.csv", "user,i0,i1\nu0,1,NaN\n");
        assert!(load_interaction_matrix(&nan, None, None, &RngStream::new(0)).is_err());
        let ragged = write(&dir, "r.csv", "user,i0,i1\nu0,1\n");
        assert!(load_interaction_matrix(&ragged, None, None, &RngStream::new(0)).is_err());
    }

    #[test]
    fn subsampling_is_seeded() {
        let m = InteractionMatrix {
            row_ids: (0..8).map(|i| format!("u{i}")).collect(),
            action_ids: (0..6).map(|i| format!("i{i}")).collect(),
            values: (0..8)
                .map(|i| (0..6).map(|j| (i * 6 + j) as f64).collect())
                .collect(),
            features: None,
        };
        let s = Subsample { rows: 5, cols: 4 };
        let a = m.subsample(s, &RngStream::new(9)).unwrap();
        let b = m.subsample(s, &RngStream::new(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.rows(), a.cols()), (5, 4));
        assert!(m
            .subsample(Subsample { rows: 9, cols: 2 }, &RngStream::new(0))
            .is_err());
    }

    #[test]
    fn click_branches() {
        let m = InteractionMatrix {
            row_ids: vec!["u0".into(), "u1".into(), "u2".into()],
            action_ids: vec!["i0".into(), "i1".into()],
            values: vec![vec![3.0, 1.0], vec![2.0, 2.5], vec![0.0, 5.0]],
            features: None,
        };
        let cfg = SemiSyntheticConfig {
            d_reduced: 2,
            ranking_length: 2,
            ..Default::default()
        };
        let env = build_semisynthetic(&m, &cfg, &RngStream::new(1)).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let (q, eta, c) = (m.values[i][j], env.eta_matrix[i][j], env.click_matrix[i][j]);
                assert!(eta > 0.0 && eta <= 0.5);
                if q > 2.0 {
                    assert_abs_diff_eq!(c, 1.0 - eta);
                } else {
                    assert_abs_diff_eq!(c, eta);
                }
            }
        }
    }

    #[test]
    fn pca_recovers_dominant_direction() {
        // Points along (1, 1) with tiny orthogonal jitter.
        let pts: Vec<Vec<f64>> = (0..50)
            .map(|i| {
                let t = i as f64 - 25.0;
                let e = if i % 2 == 0 { 0.01 } else { -0.01 };
                vec![t + e, t - e]
            })
            .collect();
        let z = pca_project(&pts, 1).unwrap();
        let s = 2f64.sqrt();
        let mean = pts.iter().map(|p| p[0] + p[1]).sum::<f64>() / pts.len() as f64;
        for (p, zi) in pts.iter().zip(&z) {
            assert_abs_diff_eq!(zi[0], (p[0] + p[1] - mean) / s, epsilon = 1e-5);
        }
        assert!(pca_project(&pts, 3).is_err());
    }
}
