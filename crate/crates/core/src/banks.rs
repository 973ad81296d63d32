//! Memory banks of target features and predictions, and cosine KNN retrieval
//! over them. The KNN relation defines the binary edges of the instance
//! augmentation graph: `e_ij = 1` iff `j` is among the `K` nearest
//! neighbours of `i`.

use std::cmp::Ordering;
use std::collections::VecDeque;

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::model::Model;
use crate::numerics::{dot, norm, Matrix};

/// Raw features plus L2-normalised copies. Zero rows normalise to zero and are
/// flagged.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    raw: Matrix,
    normalized: Matrix,
    zero_rows: Vec<bool>,
    residency: Residency,
}

/// Prediction rows aligned with the feature bank.
#[derive(Debug, Clone)]
pub struct ScoreBank {
    probs: Matrix,
    resident: Vec<bool>,
}

/// Which rows currently count as stored when the bank is capped below the
/// dataset size. Newly written rows enter in FIFO order and evict the oldest.
#[derive(Debug, Clone)]
struct Residency {
    capacity: usize,
    resident: Vec<bool>,
    queue: VecDeque<usize>,
}

impl Residency {
    fn new(len: usize, capacity: usize) -> Self {
        let capacity = capacity.clamp(1, len.max(1));
        let mut resident = vec![false; len];
        let mut queue = VecDeque::with_capacity(capacity);
        for (i, r) in resident.iter_mut().enumerate().take(capacity) {
            *r = true;
            queue.push_back(i);
        }
        Self {
            capacity,
            resident,
            queue,
        }
    }

    fn touch(&mut self, i: usize) {
        if self.resident[i] {
            return;
        }
        self.resident[i] = true;
        self.queue.push_back(i);
        if self.queue.len() > self.capacity {
            let evicted = self.queue.pop_front().expect("non-empty queue");
            self.resident[evicted] = false;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeighborSet {
    pub query: usize,
    /// Neighbour indices ordered by cosine distance, ties by lower index.
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

impl FeatureBank {
    pub fn len(&self) -> usize {
        self.raw.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.raw.cols()
    }

    pub fn raw(&self) -> &Matrix {
        &self.raw
    }

    pub fn raw_row(&self, i: usize) -> &[f64] {
        self.raw.row(i)
    }

    pub fn normalized_row(&self, i: usize) -> &[f64] {
        self.normalized.row(i)
    }

    pub fn is_zero_row(&self, i: usize) -> bool {
        self.zero_rows[i]
    }

    pub fn is_resident(&self, i: usize) -> bool {
        self.residency.resident[i]
    }

    pub fn resident_count(&self) -> usize {
        self.residency.queue.len()
    }

    pub fn capacity(&self) -> usize {
        self.residency.capacity
    }

    fn write_row(&mut self, i: usize, feature: &[f64]) {
        self.raw.row_mut(i).copy_from_slice(feature);
        let n = norm(feature);
        let dst = self.normalized.row_mut(i);
        if n > 0.0 {
            for (d, &f) in dst.iter_mut().zip(feature) {
                *d = f / n;
            }
            self.zero_rows[i] = false;
        } else {
            dst.iter_mut().for_each(|d| *d = 0.0);
            self.zero_rows[i] = true;
        }
    }

    /// The `k` resident rows closest to row `query` in cosine distance,
    /// excluding the query itself.
    pub fn knn(&self, query: usize, k: usize) -> Result<NeighborSet> {
        if query >= self.len() {
            return invalid(format!("query index {query} out of range (bank size {})", self.len()));
        }
        let available = self.resident_count() - usize::from(self.is_resident(query));
        if k == 0 || k > available {
            return invalid(format!(
                "K = {k} must satisfy 1 <= K <= {available} (bank rows excluding the query)"
            ));
        }
        let q = self.normalized.row(query);
        let mut cands: Vec<(f64, usize)> = self
            .residency
            .queue
            .iter()
            .copied()
            .filter(|&j| j != query)
            .map(|j| (1.0 - dot(q, self.normalized.row(j)), j))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
        };
        if k < cands.len() {
            cands.select_nth_unstable_by(k - 1, cmp);
            cands.truncate(k);
        }
        cands.sort_unstable_by(cmp);
        Ok(NeighborSet {
            query,
            indices: cands.iter().map(|c| c.1).collect(),
            distances: cands.iter().map(|c| c.0).collect(),
        })
    }
}

impl ScoreBank {
    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }

    pub fn classes(&self) -> usize {
        self.probs.cols()
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.probs.row(i)
    }

    pub fn is_resident(&self, i: usize) -> bool {
        self.resident[i]
    }
}

/// Banks built from raw rows (features, predictions), all resident.
pub fn banks_from_rows(features: &Matrix, probs: &Matrix) -> Result<(FeatureBank, ScoreBank)> {
    banks_from_rows_with_capacity(features, probs, features.rows())
}

fn banks_from_rows_with_capacity(
    features: &Matrix,
    probs: &Matrix,
    capacity: usize,
) -> Result<(FeatureBank, ScoreBank)> {
    let m = features.rows();
    if m == 0 {
        return invalid("memory banks need at least one row");
    }
    if probs.rows() != m {
        return invalid("feature and probability row counts differ");
    }
    for (i, r) in probs.row_iter().enumerate() {
        if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 || r.iter().any(|&p| p < 0.0) {
            return invalid(format!("probability row {i} is not a distribution"));
        }
    }
    let residency = Residency::new(m, capacity);
    let mut fbank = FeatureBank {
        raw: Matrix::zeros(m, features.cols()),
        normalized: Matrix::zeros(m, features.cols()),
        zero_rows: vec![false; m],
        residency,
    };
    for i in 0..m {
        fbank.write_row(i, features.row(i));
    }
    let sbank = ScoreBank {
        probs: probs.clone(),
        resident: fbank.residency.resident.clone(),
    };
    Ok((fbank, sbank))
}

/// One forward pass over the target set fills both banks, in dataset order.
pub fn init_banks(model: &Model, target_inputs: &Matrix) -> Result<(FeatureBank, ScoreBank)> {
    init_banks_with_capacity(model, target_inputs, 1.0)
}

/// Like [`init_banks`], but only `ceil(fraction * M)` rows stay resident.
pub fn init_banks_with_capacity(
    model: &Model,
    target_inputs: &Matrix,
    fraction: f64,
) -> Result<(FeatureBank, ScoreBank)> {
    if target_inputs.rows() == 0 {
        return invalid("target set is empty");
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return invalid(format!("bank fraction {fraction} must lie in (0, 1]"));
    }
    let out = model.forward(target_inputs)?;
    let capacity = (fraction * target_inputs.rows() as f64).ceil() as usize;
    banks_from_rows_with_capacity(&out.features, &out.probs, capacity)
}

/// Overwrites the addressed rows in both banks. Later duplicates win.
pub fn update_banks(
    fbank: &mut FeatureBank,
    sbank: &mut ScoreBank,
    indices: &[usize],
    features: &Matrix,
    probs: &Matrix,
) -> Result<()> {
    if features.rows() != indices.len() || probs.rows() != indices.len() {
        return invalid("update rows do not match the index list");
    }
    if features.cols() != fbank.dim() || probs.cols() != sbank.classes() {
        return invalid("update row widths do not match the banks");
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= fbank.len()) {
        return invalid(format!("bank index {bad} out of range (size {})", fbank.len()));
    }
    for (r, &i) in indices.iter().enumerate() {
        fbank.write_row(i, features.row(r));
        sbank.probs.row_mut(i).copy_from_slice(probs.row(r));
        fbank.residency.touch(i);
    }
    sbank.resident.clone_from(&fbank.residency.resident);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Architecture};
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    fn uniform_probs(m: usize, c: usize) -> Matrix {
        Matrix::new(m, c, vec![1.0 / c as f64; m * c]).unwrap()
    }

    fn bank(rows: &[[f64; 2]]) -> (FeatureBank, ScoreBank) {
        let f = Matrix::from_rows(rows).unwrap();
        banks_from_rows(&f, &uniform_probs(rows.len(), 2)).unwrap()
    }

    fn brute_knn(rows: &Matrix, q: usize, k: usize) -> Vec<usize> {
        let cos = |a: &[f64], b: &[f64]| {
            let (na, nb) = (norm(a), norm(b));
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                dot(a, b) / (na * nb)
            }
        };
        let mut all: Vec<(f64, usize)> = (0..rows.rows())
            .filter(|&j| j != q)
            .map(|j| (1.0 - cos(rows.row(q), rows.row(j)), j))
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|x| x.1).collect()
    }

    #[test]
    fn duplicate_direction_neighbour() {
        let (f, _) = bank(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let n = f.knn(0, 1).unwrap();
        assert_eq!(n.indices, vec![1]);
        assert_eq!(n.distances, vec![0.0]);
    }

    #[test]
    fn orthogonal_and_antipodal() {
        let (f, _) = bank(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]);
        let n = f.knn(0, 2).unwrap();
        assert_eq!(n.indices, vec![1, 2]);
        assert_eq!(n.distances, vec![1.0, 2.0]);
        assert!(f.knn(0, 3).is_err());
        assert!(f.knn(0, 0).is_err());
    }

    #[test]
    fn ties_broken_by_lower_index() {
        let (f, _) = bank(&[[1.0, 0.0], [0.0, 2.0], [0.0, 1.0], [0.0, 3.0]]);
        assert_eq!(f.knn(0, 2).unwrap().indices, vec![1, 2]);
    }

    #[test]
    fn zero_rows_are_flagged() {
        let (f, _) = bank(&[[0.0, 0.0], [3.0, 4.0]]);
        assert!(f.is_zero_row(0));
        assert_eq!(f.normalized_row(0), &[0.0, 0.0]);
        assert!((norm(f.normalized_row(1)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn init_from_model() {
        let arch = Architecture {
            hidden: vec![5],
            feature_dim: 3,
            feature_activation: Activation::Identity,
        };
        let mut model = Model::random(&arch, 2, 4, &mut SeededRng::new(1)).unwrap();
        let x = Matrix::from_rows(&[[0.3, -1.2]]).unwrap();
        let (f, s) = init_banks(&model, &x).unwrap();
        assert_eq!((f.len(), s.len()), (1, 1));
        assert!(init_banks(&model, &Matrix::zeros(0, 2)).is_err());

        for p in model.param_slices_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let (_, s) = init_banks(&model, &x).unwrap();
        assert!(s.probs().as_slice().iter().all(|&p| p == 0.25));
    }

    #[test]
    fn update_semantics() {
        let (mut f, mut s) = bank(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 0.5]]);
        let before = f.raw().clone();
        update_banks(&mut f, &mut s, &[], &Matrix::zeros(0, 2), &Matrix::zeros(0, 2)).unwrap();
        assert_eq!(f.raw(), &before);

        let feat = Matrix::from_rows(&[[0.0, -5.0]]).unwrap();
        let p = Matrix::from_rows(&[[0.9, 0.1]]).unwrap();
        update_banks(&mut f, &mut s, &[3], &feat, &p).unwrap();
        assert_eq!(f.raw_row(3), &[0.0, -5.0]);
        assert!((f.normalized_row(3)[1] + 1.0).abs() < 1e-9);
        assert_eq!(s.row(3), &[0.9, 0.1]);
        assert_eq!(f.raw_row(0), before.row(0));

        let feat = Matrix::from_rows(&[[1.0, 0.0], [0.0, 7.0]]).unwrap();
        let p = Matrix::from_rows(&[[0.2, 0.8], [0.6, 0.4]]).unwrap();
        update_banks(&mut f, &mut s, &[2, 2], &feat, &p).unwrap();
        assert_eq!(f.raw_row(2), &[0.0, 7.0]);
        assert_eq!(s.row(2), &[0.6, 0.4]);

        let bad = update_banks(&mut f, &mut s, &[4], &feat.select_rows(&[0]), &p.select_rows(&[0]));
        assert!(bad.is_err());
    }

    #[test]
    fn fifo_capacity() {
        let f = Matrix::from_rows(&[[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]]).unwrap();
        let probs = uniform_probs(4, 2);
        let (mut fb, mut sb) = banks_from_rows_with_capacity(&f, &probs, 2).unwrap();
        assert!(fb.is_resident(0) && fb.is_resident(1) && !fb.is_resident(2));
        // 3 enters, evicting 0
        update_banks(&mut fb, &mut sb, &[3], &f.select_rows(&[3]), &probs.select_rows(&[3])).unwrap();
        assert!(!fb.is_resident(0) && fb.is_resident(3) && !sb.is_resident(0));
        assert_eq!(fb.knn(2, 2).unwrap().indices, vec![3, 1]);
        assert!(fb.knn(2, 3).is_err());
    }

    #[test]
    fn matches_exhaustive_scan_on_random_bank() {
        let mut rng = SeededRng::new(3);
        let rows: Vec<Vec<f64>> = (0..500)
            .map(|_| (0..16).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect())
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let (f, _) = banks_from_rows(&m, &uniform_probs(500, 2)).unwrap();
        for q in (0..500).step_by(37) {
            for k in [1, 5, 10] {
                assert_eq!(f.knn(q, k).unwrap().indices, brute_knn(&m, q, k));
            }
        }
    }

    use rand::Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn knn_properties(
            seed in 0u64..10_000,
            m in 3usize..40,
            k_frac in 0.0f64..1.0,
            scale in 0.1f64..10.0,
        ) {
            let mut rng = SeededRng::new(seed);
            let rows: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..4).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect())
                .collect();
            let mut feats = Matrix::from_rows(&rows).unwrap();
            let (f, _) = banks_from_rows(&feats, &uniform_probs(m, 2)).unwrap();
            let k = 1 + ((m - 2) as f64 * k_frac) as usize;
            let q = seed as usize % m;
            let n = f.knn(q, k).unwrap();
            prop_assert_eq!(n.indices.len(), k);
            prop_assert!(!n.indices.contains(&q));
            prop_assert!(n.distances.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(&n, &f.knn(q, k).unwrap());

            // rescale one stored row
            let r = (seed as usize / 7) % m;
            feats.row_mut(r).iter_mut().for_each(|v| *v *= scale);
            let (g, _) = banks_from_rows(&feats, &uniform_probs(m, 2)).unwrap();
            prop_assert_eq!(g.knn(q, k).unwrap().indices, n.indices);
        }
    }
}
