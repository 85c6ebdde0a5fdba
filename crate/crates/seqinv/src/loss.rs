//! Component losses of the training objective: sequence reconstruction,
//! temperature-scaled contrastive loss over same-entity window pairs,
//! masked regression onto known characteristics, and their weighted sum.
//!
//! These are the reference (single-threaded, non-differentiable)
//! implementations; the training path rebuilds the same formulas on the
//! computation graph in [`crate::model`] and is cross-checked against
//! these in tests.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

/// Weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub reconstruction: f64,
    pub contrastive: f64,
    pub inverse: f64,
}

impl LossWeights {
    pub fn new(reconstruction: f64, contrastive: f64, inverse: f64) -> Result<Self> {
        if reconstruction < 0.0 || contrastive < 0.0 || inverse < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(LossWeights {
            reconstruction,
            contrastive,
            inverse,
        })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            reconstruction: 1.0,
            contrastive: 1.0,
            inverse: 1.0,
        }
    }
}

/// Embeddings of a batch of anchor/positive window pairs. Row `i` of
/// `anchors` and row `i` of `positives` come from the same entity.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub anchors: Array2<f64>,
    pub positives: Array2<f64>,
    pub temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(anchors: Array2<f64>, positives: Array2<f64>, temperature: f64) -> Result<Self> {
        if anchors.dim() != positives.dim() {
            return Err(Error::Contract(
                "anchor and positive embedding matrices must have equal shape".into(),
            ));
        }
        if anchors.nrows() == 0 {
            return Err(Error::Contract("contrastive batch needs at least one pair".into()));
        }
        if temperature <= 0.0 {
            return Err(Error::Contract(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(ContrastiveBatch {
            anchors,
            positives,
            temperature,
        })
    }

    pub fn pair_count(&self) -> usize {
        self.anchors.nrows()
    }

    /// All 2N embeddings stacked: anchors first, then positives. The
    /// positive partner of row `r` is row `(r + N) mod 2N`.
    fn stacked(&self) -> Array2<f64> {
        ndarray::concatenate(ndarray::Axis(0), &[self.anchors.view(), self.positives.view()])
            .expect("stack embeddings")
    }
}

/// Cosine similarity `u.v / (|u||v|)`. Zero-norm inputs are an error so
/// that degenerate embedding collapse fails loudly.
pub fn cosine_sim(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Contract(format!(
            "cosine_sim length mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Numeric("cosine_sim received a zero-norm vector".into()));
    }
    Ok(u.dot(&v) / (nu * nv))
}

/// Mean over all `2N` pairs of the per-pair mean squared error, where each
/// pair's error is averaged over every entry of the `W x (D_x + 1)` window.
pub fn reconstruction_loss(
    reconstructions: &[Array2<f64>],
    originals: &[Array2<f64>],
) -> Result<f64> {
    if reconstructions.len() != originals.len() {
        return Err(Error::Contract(format!(
            "reconstruction list lengths differ: {} vs {}",
            reconstructions.len(),
            originals.len()
        )));
    }
    if reconstructions.is_empty() {
        return Err(Error::Contract("reconstruction lists must be non-empty".into()));
    }
    let mut total = 0.0;
    for (rec, orig) in reconstructions.iter().zip(originals) {
        if rec.dim() != orig.dim() {
            return Err(Error::Contract(format!(
                "reconstruction shape {:?} does not match original {:?}",
                rec.dim(),
                orig.dim()
            )));
        }
        let diff = rec - orig;
        total += diff.mapv(|d| d * d).mean().unwrap_or(0.0);
    }
    Ok(total / reconstructions.len() as f64)
}

fn pairwise_similarities(stacked: &Array2<f64>, temperature: f64) -> Result<Array2<f64>> {
    let n = stacked.nrows();
    let mut sims = Array2::zeros((n, n));
    for a in 0..n {
        for b in (a + 1)..n {
            let s = cosine_sim(stacked.row(a), stacked.row(b))? / temperature;
            sims[(a, b)] = s;
            sims[(b, a)] = s;
        }
    }
    Ok(sims)
}

fn pair_terms(batch: &ContrastiveBatch, entity: usize, log_form: bool) -> Result<f64> {
    let n = batch.pair_count();
    if entity >= n {
        return Err(Error::Contract(format!(
            "entity index {entity} out of range for batch of {n}"
        )));
    }
    let stacked = batch.stacked();
    let sims = pairwise_similarities(&stacked, batch.temperature)?;
    let rows = 2 * n;
    let mut total = 0.0;
    for row in [entity, entity + n] {
        let partner = (row + n) % rows;
        let numer = sims[(row, partner)].exp();
        let mut denom = 0.0;
        for other in 0..rows {
            if other != row {
                denom += sims[(row, other)].exp();
            }
        }
        total += if log_form {
            -(numer / denom).ln()
        } else {
            numer / denom
        };
    }
    Ok(total)
}

/// Loss of one positive pair: the anchor-anchored and positive-anchored
/// softmax terms summed, each `-log(exp(sim/tau) / sum_others exp(sim/tau))`
/// with the row's own self-similarity excluded from the denominator.
pub fn contrastive_pair_loss(batch: &ContrastiveBatch, entity: usize) -> Result<f64> {
    pair_terms(batch, entity, true)
}

/// The pair term as literally printed in some formulations: the bare
/// softmax fractions without the negative log. Exposed for inspection
/// only; training always uses [`contrastive_pair_loss`].
pub fn contrastive_pair_fraction(batch: &ContrastiveBatch, entity: usize) -> Result<f64> {
    pair_terms(batch, entity, false)
}

/// Total contrastive loss: `(1/2N) * sum_i l(a_i, p_i)`.
pub fn contrastive_loss(batch: &ContrastiveBatch) -> Result<f64> {
    let n = batch.pair_count();
    let mut total = 0.0;
    for i in 0..n {
        total += contrastive_pair_loss(batch, i)?;
    }
    Ok(total / (2.0 * n as f64))
}

/// Mean over entities with available characteristics of the per-entity
/// mean squared error over the characteristic vector. Entities whose mask
/// is false contribute nothing; with no available entity the loss is 0.
pub fn pseudo_inverse_loss(
    estimates: &[Array1<f64>],
    truths: &[Array1<f64>],
    available: &[bool],
) -> Result<f64> {
    if estimates.len() != truths.len() || estimates.len() != available.len() {
        return Err(Error::Contract(format!(
            "pseudo_inverse_loss list lengths differ: {} / {} / {}",
            estimates.len(),
            truths.len(),
            available.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((est, truth), &avail) in estimates.iter().zip(truths).zip(available) {
        if !avail {
            continue;
        }
        if est.len() != truth.len() {
            return Err(Error::Contract(format!(
                "characteristic dim mismatch: {} vs {}",
                est.len(),
                truth.len()
            )));
        }
        let diff = est - truth;
        total += diff.mapv(|d| d * d).mean().unwrap_or(0.0);
        count += 1;
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(total / count as f64)
}

/// Weighted sum of the three component losses.
pub fn total_loss(weights: &LossWeights, rec: f64, cont: f64, inv: f64) -> f64 {
    weights.reconstruction * rec + weights.contrastive * cont + weights.inverse * inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_sim_basic_cases() {
        let u = array![0.3, -1.2, 0.5];
        assert_relative_eq!(cosine_sim(u.view(), u.view()).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(
            cosine_sim(array![1.0, 0.0].view(), array![0.0, 1.0].view()).unwrap(),
            0.0
        );
        assert_relative_eq!(
            cosine_sim(array![1.0, 0.0].view(), array![-1.0, 0.0].view()).unwrap(),
            -1.0
        );
        assert!(cosine_sim(array![0.0, 0.0].view(), array![1.0, 0.0].view()).is_err());
    }

    #[test]
    fn reconstruction_loss_perfect_and_offset() {
        let originals = vec![array![[0.5, -1.0], [2.0, 0.0]], array![[1.0, 1.0], [1.0, 1.0]]];
        assert_eq!(reconstruction_loss(&originals, &originals).unwrap(), 0.0);
        let offset: Vec<_> = originals.iter().map(|m| m + 0.3).collect();
        assert_relative_eq!(
            reconstruction_loss(&offset, &originals).unwrap(),
            0.09,
            epsilon = 1e-12
        );
    }

    #[test]
    fn reconstruction_loss_matches_elementwise_brute_force() {
        let originals = vec![array![[0.0, 1.0], [1.0, 0.0]], array![[1.0, 1.0], [0.0, 0.0]]];
        let recs = vec![array![[1.0, 1.0], [1.0, 1.0]], array![[0.5, 1.0], [0.25, 0.0]]];
        let mut brute = 0.0;
        for (r, o) in recs.iter().zip(&originals) {
            let mut mse = 0.0;
            for (a, b) in r.iter().zip(o.iter()) {
                mse += (a - b) * (a - b);
            }
            brute += mse / r.len() as f64;
        }
        brute /= recs.len() as f64;
        assert_relative_eq!(
            reconstruction_loss(&recs, &originals).unwrap(),
            brute,
            epsilon = 1e-15
        );
    }

    #[test]
    fn reconstruction_loss_rejects_shape_mismatch() {
        let a = vec![array![[1.0, 2.0]]];
        let b = vec![array![[1.0], [2.0]]];
        assert!(reconstruction_loss(&a, &b).is_err());
    }

    #[test]
    fn contrastive_single_pair_is_zero() {
        // N = 1: the denominator holds only the positive term.
        let batch = ContrastiveBatch::new(array![[1.0, 0.3]], array![[0.2, 0.9]], 0.5).unwrap();
        assert_relative_eq!(contrastive_pair_loss(&batch, 0).unwrap(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(contrastive_loss(&batch).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn contrastive_orthogonal_pairs_match_closed_form() {
        // Two entities on orthogonal axes, tau = 1: each anchored term is
        // -ln(e / (e + 2)), and the batch loss equals one pair's loss.
        let batch = ContrastiveBatch::new(
            array![[1.0, 0.0], [0.0, 1.0]],
            array![[1.0, 0.0], [0.0, 1.0]],
            1.0,
        )
        .unwrap();
        let e = std::f64::consts::E;
        let per_term = -(e / (e + 2.0)).ln();
        let pair = contrastive_pair_loss(&batch, 0).unwrap();
        assert_relative_eq!(pair, 2.0 * per_term, epsilon = 1e-12);
        assert_relative_eq!(pair, 1.10288, epsilon = 1e-4);
        let total = contrastive_loss(&batch).unwrap();
        assert_relative_eq!(total, per_term, epsilon = 1e-12);
        assert_relative_eq!(total, 0.55144, epsilon = 1e-4);
    }

    #[test]
    fn contrastive_loss_is_scale_invariant_per_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let anchors = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let positives = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let base = contrastive_loss(&ContrastiveBatch::new(anchors.clone(), positives.clone(), 0.7).unwrap())
            .unwrap();

        let mut scaled_a = anchors.clone();
        let mut scaled_p = positives.clone();
        for r in 0..4 {
            let ka = rng.random_range(0.1..10.0);
            let kp = rng.random_range(0.1..10.0);
            scaled_a.row_mut(r).mapv_inplace(|x| x * ka);
            scaled_p.row_mut(r).mapv_inplace(|x| x * kp);
        }
        let scaled = contrastive_loss(&ContrastiveBatch::new(scaled_a, scaled_p, 0.7).unwrap()).unwrap();
        assert_relative_eq!(base, scaled, epsilon = 1e-9);
    }

    #[test]
    fn contrastive_loss_is_permutation_and_swap_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let anchors = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let positives = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let base = contrastive_loss(&ContrastiveBatch::new(anchors.clone(), positives.clone(), 0.4).unwrap())
            .unwrap();

        // permute entity order
        let perm = [2usize, 0, 1];
        let mut pa = Array2::zeros((3, 4));
        let mut pp = Array2::zeros((3, 4));
        for (dst, &src) in perm.iter().enumerate() {
            pa.row_mut(dst).assign(&anchors.row(src));
            pp.row_mut(dst).assign(&positives.row(src));
        }
        let permuted = contrastive_loss(&ContrastiveBatch::new(pa, pp, 0.4).unwrap()).unwrap();
        assert_relative_eq!(base, permuted, epsilon = 1e-12);

        // swap anchor/positive labels
        let swapped = contrastive_loss(&ContrastiveBatch::new(positives, anchors, 0.4).unwrap()).unwrap();
        assert_relative_eq!(base, swapped, epsilon = 1e-12);
    }

    #[test]
    fn contrastive_loss_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..25 {
            let n = rng.random_range(1..6);
            let anchors = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
            let positives = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
            let tau = rng.random_range(0.1..2.0);
            let loss =
                contrastive_loss(&ContrastiveBatch::new(anchors, positives, tau).unwrap()).unwrap();
            assert!(loss >= 0.0, "contrastive loss must be nonnegative, got {loss}");
        }
    }

    #[test]
    fn bare_fraction_form_differs_from_log_form() {
        let batch = ContrastiveBatch::new(
            array![[1.0, 0.0], [0.0, 1.0]],
            array![[1.0, 0.0], [0.0, 1.0]],
            1.0,
        )
        .unwrap();
        let e = std::f64::consts::E;
        let frac = contrastive_pair_fraction(&batch, 0).unwrap();
        assert_relative_eq!(frac, 2.0 * e / (e + 2.0), epsilon = 1e-12);
    }

    #[test]
    fn batch_construction_rejects_bad_temperature() {
        assert!(ContrastiveBatch::new(array![[1.0]], array![[1.0]], 0.0).is_err());
        assert!(ContrastiveBatch::new(array![[1.0]], array![[1.0]], -1.0).is_err());
    }

    #[test]
    fn pseudo_inverse_loss_basic_cases() {
        let est = vec![array![1.0, 1.0]];
        let truth = vec![array![0.0, 0.0]];
        assert_relative_eq!(
            pseudo_inverse_loss(&est, &truth, &[true]).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert_eq!(pseudo_inverse_loss(&est, &est, &[true]).unwrap(), 0.0);

        // second entity masked out: only the first contributes
        let est2 = vec![array![1.0, 1.0], array![10.0, 10.0]];
        let truth2 = vec![array![0.0, 0.0], array![0.0, 0.0]];
        assert_relative_eq!(
            pseudo_inverse_loss(&est2, &truth2, &[true, false]).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        // nothing available: zero by definition
        assert_eq!(pseudo_inverse_loss(&est2, &truth2, &[false, false]).unwrap(), 0.0);
    }

    #[test]
    fn pseudo_inverse_loss_matches_brute_force_double_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..20 {
            let n = rng.random_range(1..6);
            let d = rng.random_range(1..5);
            let est: Vec<Array1<f64>> = (0..n)
                .map(|_| Array1::from_shape_fn(d, |_| rng.random_range(-2.0..2.0)))
                .collect();
            let truth: Vec<Array1<f64>> = (0..n)
                .map(|_| Array1::from_shape_fn(d, |_| rng.random_range(-2.0..2.0)))
                .collect();
            let mask: Vec<bool> = vec![true; n];
            let mut brute = 0.0;
            for i in 0..n {
                let mut inner = 0.0;
                for j in 0..d {
                    inner += (truth[i][j] - est[i][j]).powi(2);
                }
                brute += inner / d as f64;
            }
            brute /= n as f64;
            assert_relative_eq!(
                pseudo_inverse_loss(&est, &truth, &mask).unwrap(),
                brute,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn total_loss_is_the_weighted_sum() {
        let w = LossWeights::default();
        assert_relative_eq!(total_loss(&w, 0.3, 0.5, 0.2), 1.0, epsilon = 1e-15);
        let w2 = LossWeights::new(1.0, 1.0, 0.0).unwrap();
        assert_relative_eq!(total_loss(&w2, 0.3, 0.5, 123.0), 0.8, epsilon = 1e-15);
        assert_eq!(total_loss(&w, 0.0, 0.0, 0.0), 0.0);
        assert!(LossWeights::new(-0.1, 1.0, 1.0).is_err());
    }

    #[test]
    fn total_loss_is_linear_in_each_component() {
        let w = LossWeights::new(0.7, 2.0, 0.25).unwrap();
        let base = total_loss(&w, 1.0, 1.0, 1.0);
        assert_relative_eq!(
            total_loss(&w, 2.0, 1.0, 1.0) - base,
            0.7,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            total_loss(&w, 1.0, 2.0, 1.0) - base,
            2.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            total_loss(&w, 1.0, 1.0, 2.0) - base,
            0.25,
            epsilon = 1e-12
        );
    }
}
