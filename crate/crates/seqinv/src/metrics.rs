//! Evaluation metrics and analysis artifacts: RMSE and Pearson correlation
//! per characteristic, grouped correlation tables, pairwise distance
//! matrices with a shared seriation ordering, and the embedding-by-
//! characteristic correlation matrix with ranked columns.

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

/// Root mean squared error.
pub fn rmse(predicted: ArrayView1<f64>, truth: ArrayView1<f64>) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Contract(format!(
            "rmse length mismatch: {} vs {}",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Contract("rmse requires at least one value".into()));
    }
    let mse = predicted
        .iter()
        .zip(truth.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / predicted.len() as f64;
    Ok(mse.sqrt())
}

/// Pearson correlation; both inputs must be non-constant with length >= 2.
pub fn corr(predicted: ArrayView1<f64>, truth: ArrayView1<f64>) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Contract(format!(
            "corr length mismatch: {} vs {}",
            predicted.len(),
            truth.len()
        )));
    }
    let n = predicted.len();
    if n < 2 {
        return Err(Error::Contract("corr requires at least two values".into()));
    }
    let mean_p = predicted.sum() / n as f64;
    let mean_t = truth.sum() / n as f64;
    let mut cov = 0.0;
    let mut var_p = 0.0;
    let mut var_t = 0.0;
    for (&p, &t) in predicted.iter().zip(truth.iter()) {
        cov += (p - mean_p) * (t - mean_t);
        var_p += (p - mean_p) * (p - mean_p);
        var_t += (t - mean_t) * (t - mean_t);
    }
    if var_p == 0.0 || var_t == 0.0 {
        return Err(Error::Numeric("corr undefined for a constant input".into()));
    }
    Ok(cov / (var_p.sqrt() * var_t.sqrt()))
}

/// Per-characteristic and per-group correlation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    /// (characteristic, correlation across entities)
    pub per_characteristic: Vec<(String, f64)>,
    /// (group, mean of member characteristic correlations)
    pub groups: Vec<(String, f64)>,
    /// Mean of the group means.
    pub mean_of_group_means: f64,
    /// Mean over all characteristics, regardless of grouping.
    pub mean_over_characteristics: f64,
}

/// Correlate estimated versus true characteristics column by column and
/// aggregate by group. `estimates` and `truth` are `entities x D_z`;
/// every characteristic must be covered by exactly one group.
pub fn group_report(
    estimates: ArrayView2<f64>,
    truth: ArrayView2<f64>,
    names: &[String],
    groups: &[(String, Vec<String>)],
) -> Result<GroupReport> {
    if estimates.dim() != truth.dim() {
        return Err(Error::Contract(format!(
            "estimate shape {:?} does not match truth {:?}",
            estimates.dim(),
            truth.dim()
        )));
    }
    if names.len() != estimates.ncols() {
        return Err(Error::Contract(format!(
            "{} names for {} characteristic columns",
            names.len(),
            estimates.ncols()
        )));
    }
    for name in names {
        if !groups.iter().any(|(_, members)| members.contains(name)) {
            return Err(Error::Config(format!(
                "characteristic '{name}' is not covered by the group map"
            )));
        }
    }
    let mut per_characteristic = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        let c = corr(estimates.column(j), truth.column(j))?;
        per_characteristic.push((name.clone(), c));
    }
    let mut group_means = Vec::with_capacity(groups.len());
    for (group, members) in groups {
        let vals: Vec<f64> = per_characteristic
            .iter()
            .filter(|(name, _)| members.contains(name))
            .map(|(_, c)| *c)
            .collect();
        if !vals.is_empty() {
            group_means.push((group.clone(), vals.iter().sum::<f64>() / vals.len() as f64));
        }
    }
    let mean_of_group_means =
        group_means.iter().map(|(_, m)| m).sum::<f64>() / group_means.len() as f64;
    let mean_over_characteristics =
        per_characteristic.iter().map(|(_, c)| c).sum::<f64>() / per_characteristic.len() as f64;
    Ok(GroupReport {
        per_characteristic,
        groups: group_means,
        mean_of_group_means,
        mean_over_characteristics,
    })
}

fn pairwise_euclidean(matrix: ArrayView2<f64>) -> Array2<f64> {
    let n = matrix.nrows();
    let mut out = Array2::zeros((n, n));
    for a in 0..n {
        for b in (a + 1)..n {
            let d = matrix
                .row(a)
                .iter()
                .zip(matrix.row(b).iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            out[(a, b)] = d;
            out[(b, a)] = d;
        }
    }
    out
}

/// Greedy nearest-neighbor seriation: start at the medoid (minimum total
/// distance to the rest) and repeatedly append the unvisited entity
/// closest to the previous one.
fn seriation_order(distances: &Array2<f64>) -> Vec<usize> {
    let n = distances.nrows();
    let medoid = (0..n)
        .min_by(|&a, &b| {
            let sa: f64 = distances.row(a).sum();
            let sb: f64 = distances.row(b).sum();
            sa.partial_cmp(&sb).unwrap_or(std::cmp::Ordering::Equal)
        })
        .expect("non-empty matrix");
    let mut order = Vec::with_capacity(n);
    let mut visited = vec![false; n];
    let mut current = medoid;
    order.push(current);
    visited[current] = true;
    for _ in 1..n {
        let next = (0..n)
            .filter(|&k| !visited[k])
            .min_by(|&a, &b| {
                distances[(current, a)]
                    .partial_cmp(&distances[(current, b)])
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .expect("unvisited entity remains");
        order.push(next);
        visited[next] = true;
        current = next;
    }
    order
}

fn permute(matrix: &Array2<f64>, order: &[usize]) -> Array2<f64> {
    let n = order.len();
    Array2::from_shape_fn((n, n), |(r, c)| matrix[(order[r], order[c])])
}

/// Pairwise Euclidean distance matrices over characteristic vectors and
/// embeddings, both reordered by a seriation computed on the
/// characteristic-space distances so structural similarity is visually
/// comparable. Returns the shared ordering alongside.
pub fn distance_matrices(
    characteristics: ArrayView2<f64>,
    embeddings: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>, Vec<usize>)> {
    let n = characteristics.nrows();
    if n != embeddings.nrows() {
        return Err(Error::Contract(format!(
            "row count mismatch: {} characteristic rows vs {} embedding rows",
            n,
            embeddings.nrows()
        )));
    }
    if n < 2 {
        return Err(Error::Contract("distance matrices need at least two entities".into()));
    }
    let dz = pairwise_euclidean(characteristics);
    let dh = pairwise_euclidean(embeddings);
    let order = seriation_order(&dz);
    Ok((permute(&dz, &order), permute(&dh, &order), order))
}

/// Correlation of every characteristic with every embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCorrelation {
    /// `D_z x H`; entries involving a constant column are NaN (reported
    /// as undefined, never silently zero).
    pub matrix: Array2<f64>,
    /// Embedding columns ranked by descending mean absolute correlation
    /// (undefined entries excluded; fully undefined columns rank last).
    pub column_order: Vec<usize>,
}

pub fn embedding_char_correlation(
    embeddings: ArrayView2<f64>,
    characteristics: ArrayView2<f64>,
) -> Result<EmbeddingCorrelation> {
    let n = embeddings.nrows();
    if n != characteristics.nrows() {
        return Err(Error::Contract(format!(
            "row count mismatch: {} embeddings vs {} characteristics",
            n,
            characteristics.nrows()
        )));
    }
    if n < 2 {
        return Err(Error::Contract("correlation needs at least two entities".into()));
    }
    let d_z = characteristics.ncols();
    let h = embeddings.ncols();
    let mut matrix = Array2::from_elem((d_z, h), f64::NAN);
    for j in 0..d_z {
        for k in 0..h {
            if let Ok(c) = corr(characteristics.column(j), embeddings.column(k)) {
                matrix[(j, k)] = c;
            }
        }
    }
    let mut scored: Vec<(usize, f64)> = (0..h)
        .map(|k| {
            let vals: Vec<f64> = (0..d_z)
                .map(|j| matrix[(j, k)])
                .filter(|v| v.is_finite())
                .map(f64::abs)
                .collect();
            let score = if vals.is_empty() {
                f64::NEG_INFINITY
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            (k, score)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    Ok(EmbeddingCorrelation {
        matrix,
        column_order: scored.into_iter().map(|(k, _)| k).collect(),
    })
}
