//! Third-order tensor dimensions, dense storage, observation sets, and
//! the sampling and error metrics used by the completion experiments.

use std::collections::{HashMap, HashSet};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Mode sizes of a third-order tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorDims {
    d1: usize,
    d2: usize,
    d3: usize,
}

impl TensorDims {
    pub fn new(d1: usize, d2: usize, d3: usize) -> Result<Self> {
        if d1 == 0 || d2 == 0 || d3 == 0 {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {d1}x{d2}x{d3}"
            )));
        }
        d1.checked_mul(d2)
            .and_then(|p| p.checked_mul(d3))
            .ok_or_else(|| {
                Error::InvalidArgument(format!("tensor size {d1}x{d2}x{d3} overflows usize"))
            })?;
        Ok(Self { d1, d2, d3 })
    }

    pub fn cubic(d: usize) -> Result<Self> {
        Self::new(d, d, d)
    }

    pub fn d1(&self) -> usize {
        self.d1
    }

    pub fn d2(&self) -> usize {
        self.d2
    }

    pub fn d3(&self) -> usize {
        self.d3
    }

    /// Total number of entries.
    pub fn total(&self) -> usize {
        self.d1 * self.d2 * self.d3
    }

    /// Number of rows in the stacked factor matrix, `d1 + d2 + d3`.
    pub fn stacked_rows(&self) -> usize {
        self.d1 + self.d2 + self.d3
    }

    pub fn contains(&self, t: EntryIndex) -> bool {
        t.i < self.d1 && t.j < self.d2 && t.k < self.d3
    }

    pub fn check(&self, t: EntryIndex) -> Result<()> {
        if self.contains(t) {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                i: t.i,
                j: t.j,
                k: t.k,
                d1: self.d1,
                d2: self.d2,
                d3: self.d3,
            })
        }
    }

    /// Row-major linear index: the first mode varies slowest, the third
    /// fastest.
    pub fn linear_index(&self, t: EntryIndex) -> usize {
        (t.i * self.d2 + t.j) * self.d3 + t.k
    }

    pub fn entry_at(&self, linear: usize) -> EntryIndex {
        let k = linear % self.d3;
        let rest = linear / self.d3;
        EntryIndex {
            i: rest / self.d2,
            j: rest % self.d2,
            k,
        }
    }
}

impl std::fmt::Display for TensorDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.d1, self.d2, self.d3)
    }
}

/// Position of a single tensor entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntryIndex {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

impl EntryIndex {
    pub fn new(i: usize, j: usize, k: usize) -> Self {
        Self { i, j, k }
    }
}

/// Dense tensor in row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: TensorDims,
    values: Vec<f64>,
}

impl DenseTensor {
    pub fn zeros(dims: TensorDims) -> Self {
        Self {
            values: vec![0.0; dims.total()],
            dims,
        }
    }

    pub fn from_values(dims: TensorDims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.total() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {dims} tensor of size {}",
                values.len(),
                dims.total()
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> TensorDims {
        self.dims
    }

    pub fn get(&self, t: EntryIndex) -> Result<f64> {
        self.dims.check(t)?;
        Ok(self.values[self.dims.linear_index(t)])
    }

    pub fn set(&mut self, t: EntryIndex, value: f64) -> Result<()> {
        self.dims.check(t)?;
        let idx = self.dims.linear_index(t);
        self.values[idx] = value;
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Observed entries with their values; indices are in range, distinct, and
/// there is at least one of them.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    dims: TensorDims,
    entries: Vec<(EntryIndex, f64)>,
}

impl ObservationSet {
    pub fn new(dims: TensorDims, entries: Vec<(EntryIndex, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument(
                "observation set must contain at least one entry".into(),
            ));
        }
        let mut seen = HashSet::with_capacity(entries.len());
        for &(t, v) in &entries {
            dims.check(t)?;
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "non-finite observation {v} at ({}, {}, {})",
                    t.i, t.j, t.k
                )));
            }
            if !seen.insert(t) {
                return Err(Error::DuplicateEntry {
                    i: t.i,
                    j: t.j,
                    k: t.k,
                });
            }
        }
        Ok(Self { dims, entries })
    }

    /// Reads the listed positions out of a dense tensor.
    pub fn from_truth(truth: &DenseTensor, indices: &[EntryIndex]) -> Result<Self> {
        let entries = indices
            .iter()
            .map(|&t| truth.get(t).map(|v| (t, v)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(truth.dims(), entries)
    }

    pub fn dims(&self) -> TensorDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(EntryIndex, f64)] {
        &self.entries
    }

    /// Dense boolean mask in linear-index order, true where observed.
    pub fn observed_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.dims.total()];
        for &(t, _) in &self.entries {
            mask[self.dims.linear_index(t)] = true;
        }
        mask
    }

    /// Sum of squared observed values.
    pub fn value_norm_sq(&self) -> f64 {
        self.entries.iter().map(|&(_, v)| v * v).sum()
    }
}

/// Samples `m` distinct entry positions uniformly at random.
///
/// Runs a partial Fisher-Yates shuffle over the linear index range with a
/// virtual swap table, so memory is O(m) even when the tensor is large.
pub fn sample_uniform_entries(dims: TensorDims, m: usize, seed: u64) -> Result<Vec<EntryIndex>> {
    let total = dims.total();
    if m > total {
        return Err(Error::SampleTooLarge { m, total });
    }
    let mut rng = rng::chacha(seed);
    let mut swapped: HashMap<usize, usize> = HashMap::with_capacity(m * 2);
    let mut out = Vec::with_capacity(m);
    for t in 0..m {
        let j = rng.random_range(t..total);
        let vj = swapped.get(&j).copied().unwrap_or(j);
        let vt = swapped.get(&t).copied().unwrap_or(t);
        swapped.insert(j, vt);
        out.push(dims.entry_at(vj));
    }
    Ok(out)
}

/// Relative error on the held-out entries:
/// `sqrt(sum_{t not in train} (estimate - truth)^2 / sum truth^2)`.
///
/// Degenerates when every entry is observed or the held-out ground truth
/// has zero norm; both cases return a degenerate-metric error.
pub fn relative_test_error(
    truth: &DenseTensor,
    estimate: &DenseTensor,
    train: &ObservationSet,
) -> Result<f64> {
    if truth.dims() != estimate.dims() {
        return Err(Error::ShapeMismatch(format!(
            "truth is {} but estimate is {}",
            truth.dims(),
            estimate.dims()
        )));
    }
    if truth.dims() != train.dims() {
        return Err(Error::ShapeMismatch(format!(
            "truth is {} but observations are over {}",
            truth.dims(),
            train.dims()
        )));
    }
    let mask = train.observed_mask();
    let mut num = 0.0;
    let mut den = 0.0;
    let mut held_out = 0usize;
    for (idx, (&t, &e)) in truth.values().iter().zip(estimate.values()).enumerate() {
        if mask[idx] {
            continue;
        }
        held_out += 1;
        let r = e - t;
        num += r * r;
        den += t * t;
    }
    if held_out == 0 {
        return Err(Error::DegenerateMetric(
            "no held-out entries: every position is observed".into(),
        ));
    }
    if den == 0.0 {
        return Err(Error::DegenerateMetric(
            "held-out ground truth has zero norm".into(),
        ));
    }
    Ok((num / den).sqrt())
}

/// Relative error over all entries, `sqrt(sum (estimate - truth)^2 / sum truth^2)`.
pub fn relative_error_full(truth: &DenseTensor, estimate: &DenseTensor) -> Result<f64> {
    if truth.dims() != estimate.dims() {
        return Err(Error::ShapeMismatch(format!(
            "truth is {} but estimate is {}",
            truth.dims(),
            estimate.dims()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (&t, &e) in truth.values().iter().zip(estimate.values()) {
        let r = e - t;
        num += r * r;
        den += t * t;
    }
    if den == 0.0 {
        return Err(Error::DegenerateMetric("ground truth has zero norm".into()));
    }
    Ok((num / den).sqrt())
}

/// Mean squared difference over all entries.
pub fn mean_squared_error_full(truth: &DenseTensor, estimate: &DenseTensor) -> Result<f64> {
    if truth.dims() != estimate.dims() {
        return Err(Error::ShapeMismatch(format!(
            "truth is {} but estimate is {}",
            truth.dims(),
            estimate.dims()
        )));
    }
    let n = truth.dims().total() as f64;
    let sum: f64 = truth
        .values()
        .iter()
        .zip(estimate.values())
        .map(|(&t, &e)| (e - t) * (e - t))
        .sum();
    Ok(sum / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn linear_index_is_row_major() {
        let dims = TensorDims::new(2, 3, 4).unwrap();
        assert_eq!(dims.linear_index(EntryIndex::new(0, 0, 0)), 0);
        assert_eq!(dims.linear_index(EntryIndex::new(0, 0, 1)), 1);
        assert_eq!(dims.linear_index(EntryIndex::new(0, 1, 0)), 4);
        assert_eq!(dims.linear_index(EntryIndex::new(1, 0, 0)), 12);
        assert_eq!(dims.linear_index(EntryIndex::new(1, 2, 3)), 23);
    }

    #[test]
    fn entry_at_inverts_linear_index() {
        let dims = TensorDims::new(3, 4, 5).unwrap();
        for linear in 0..dims.total() {
            let t = dims.entry_at(linear);
            assert!(dims.contains(t));
            assert_eq!(dims.linear_index(t), linear);
        }
    }

    #[test]
    fn zero_dimension_is_rejected() {
        assert!(TensorDims::new(0, 2, 2).is_err());
        assert!(TensorDims::new(2, 0, 2).is_err());
        assert!(TensorDims::new(2, 2, 0).is_err());
    }

    #[test]
    fn dense_tensor_get_set_round_trip() {
        let dims = TensorDims::cubic(3).unwrap();
        let mut t = DenseTensor::zeros(dims);
        t.set(EntryIndex::new(1, 2, 0), 7.5).unwrap();
        assert_eq!(t.get(EntryIndex::new(1, 2, 0)).unwrap(), 7.5);
        assert_eq!(t.get(EntryIndex::new(0, 0, 0)).unwrap(), 0.0);
        assert!(t.get(EntryIndex::new(3, 0, 0)).is_err());
    }

    #[test]
    fn observation_set_rejects_duplicates_and_out_of_range() {
        let dims = TensorDims::cubic(2).unwrap();
        let dup = vec![
            (EntryIndex::new(0, 0, 0), 1.0),
            (EntryIndex::new(0, 0, 0), 2.0),
        ];
        assert!(matches!(
            ObservationSet::new(dims, dup),
            Err(Error::DuplicateEntry { .. })
        ));
        let oob = vec![(EntryIndex::new(0, 0, 2), 1.0)];
        assert!(matches!(
            ObservationSet::new(dims, oob),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(ObservationSet::new(dims, vec![]).is_err());
    }

    #[test]
    fn sampling_all_entries_is_exhaustive() {
        let dims = TensorDims::cubic(2).unwrap();
        let sample = sample_uniform_entries(dims, 8, 123).unwrap();
        let distinct: HashSet<_> = sample.iter().copied().collect();
        assert_eq!(sample.len(), 8);
        assert_eq!(distinct.len(), 8);
    }

    #[test]
    fn sampling_more_than_total_fails() {
        let dims = TensorDims::cubic(2).unwrap();
        assert!(matches!(
            sample_uniform_entries(dims, 9, 0),
            Err(Error::SampleTooLarge { m: 9, total: 8 })
        ));
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let dims = TensorDims::new(7, 5, 6).unwrap();
        let a = sample_uniform_entries(dims, 40, 99).unwrap();
        let b = sample_uniform_entries(dims, 40, 99).unwrap();
        let c = sample_uniform_entries(dims, 40, 100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sampling_inclusion_frequency_is_uniform() {
        // Inclusion probability of a fixed cell for m draws out of 27 is
        // m/27. With 10000 repetitions the count is binomial; check the
        // frequency stays within five standard errors.
        let dims = TensorDims::cubic(3).unwrap();
        let m = 5;
        let reps = 10_000;
        let target = EntryIndex::new(1, 2, 0);
        let mut hits = 0usize;
        for rep in 0..reps {
            let sample = sample_uniform_entries(dims, m, 7000 + rep as u64).unwrap();
            if sample.contains(&target) {
                hits += 1;
            }
        }
        let p = m as f64 / 27.0;
        let se = (p * (1.0 - p) / reps as f64).sqrt();
        let freq = hits as f64 / reps as f64;
        assert!(
            (freq - p).abs() < 5.0 * se,
            "inclusion frequency {freq} is outside 5 standard errors of {p}"
        );
    }

    #[test]
    fn relative_test_error_on_two_held_out_entries() {
        // Truth (1, 2, 5) along the third mode with only the last entry
        // observed: held-out values are 1 and 2.
        let dims = TensorDims::new(1, 1, 3).unwrap();
        let truth = DenseTensor::from_values(dims, vec![1.0, 2.0, 5.0]).unwrap();
        let train =
            ObservationSet::new(dims, vec![(EntryIndex::new(0, 0, 2), 5.0)]).unwrap();

        let exact = truth.clone();
        assert_abs_diff_eq!(
            relative_test_error(&truth, &exact, &train).unwrap(),
            0.0,
            epsilon = 1e-15
        );

        let zeroed = DenseTensor::from_values(dims, vec![0.0, 0.0, 5.0]).unwrap();
        assert_abs_diff_eq!(
            relative_test_error(&truth, &zeroed, &train).unwrap(),
            1.0,
            epsilon = 1e-15
        );

        let shifted = DenseTensor::from_values(dims, vec![2.0, 0.0, 5.0]).unwrap();
        assert_abs_diff_eq!(
            relative_test_error(&truth, &shifted, &train).unwrap(),
            1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn relative_test_error_degenerates_when_fully_observed() {
        let dims = TensorDims::cubic(2).unwrap();
        let truth = DenseTensor::from_values(dims, (1..=8).map(|v| v as f64).collect()).unwrap();
        let all = sample_uniform_entries(dims, 8, 1).unwrap();
        let train = ObservationSet::from_truth(&truth, &all).unwrap();
        assert!(matches!(
            relative_test_error(&truth, &truth, &train),
            Err(Error::DegenerateMetric(_))
        ));
    }

    #[test]
    fn relative_test_error_degenerates_on_zero_held_out_norm() {
        let dims = TensorDims::new(1, 1, 2).unwrap();
        let truth = DenseTensor::from_values(dims, vec![0.0, 3.0]).unwrap();
        let train =
            ObservationSet::new(dims, vec![(EntryIndex::new(0, 0, 1), 3.0)]).unwrap();
        assert!(matches!(
            relative_test_error(&truth, &truth, &train),
            Err(Error::DegenerateMetric(_))
        ));
    }

    #[test]
    fn mean_squared_error_matches_loop_oracle() {
        let dims = TensorDims::cubic(3).unwrap();
        let mut rng = crate::rng::chacha(5);
        use rand::Rng;
        let a_vals: Vec<f64> = (0..27).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b_vals: Vec<f64> = (0..27).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = DenseTensor::from_values(dims, a_vals.clone()).unwrap();
        let b = DenseTensor::from_values(dims, b_vals.clone()).unwrap();

        let mut expected = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let idx = dims.linear_index(EntryIndex::new(i, j, k));
                    let r = b_vals[idx] - a_vals[idx];
                    expected += r * r;
                }
            }
        }
        expected /= 27.0;
        assert_abs_diff_eq!(
            mean_squared_error_full(&a, &b).unwrap(),
            expected,
            epsilon = 1e-14
        );
    }

    #[test]
    fn full_relative_error_zero_norm_truth_degenerates() {
        let dims = TensorDims::cubic(2).unwrap();
        let zero = DenseTensor::zeros(dims);
        assert!(relative_error_full(&zero, &zero).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn sampled_entries_are_distinct_and_in_range(
            d1 in 1usize..6,
            d2 in 1usize..6,
            d3 in 1usize..6,
            frac in 0usize..=100,
            seed in 0u64..1000,
        ) {
            let dims = TensorDims::new(d1, d2, d3).unwrap();
            let m = (dims.total() * frac) / 100;
            let sample = sample_uniform_entries(dims, m, seed).unwrap();
            prop_assert_eq!(sample.len(), m);
            let distinct: HashSet<_> = sample.iter().copied().collect();
            prop_assert_eq!(distinct.len(), m);
            for t in sample {
                prop_assert!(dims.contains(t));
            }
        }

        #[test]
        fn relative_error_is_scale_invariant(
            scale in prop::sample::select(vec![0.5f64, 2.0, 10.0, 0.125]),
            seed in 0u64..200,
        ) {
            let dims = TensorDims::cubic(3).unwrap();
            let mut rng = crate::rng::chacha(seed);
            let tv: Vec<f64> = (0..27).map(|_| rng.random_range(0.5..2.0)).collect();
            let ev: Vec<f64> = (0..27).map(|_| rng.random_range(-2.0..2.0)).collect();
            let truth = DenseTensor::from_values(dims, tv.clone()).unwrap();
            let est = DenseTensor::from_values(dims, ev.clone()).unwrap();
            let truth_s = DenseTensor::from_values(dims, tv.iter().map(|v| v * scale).collect()).unwrap();
            let est_s = DenseTensor::from_values(dims, ev.iter().map(|v| v * scale).collect()).unwrap();
            let idx = sample_uniform_entries(dims, 10, seed).unwrap();
            let train = ObservationSet::from_truth(&truth, &idx).unwrap();
            let train_s = ObservationSet::from_truth(&truth_s, &idx).unwrap();
            let e1 = relative_test_error(&truth, &est, &train).unwrap();
            let e2 = relative_test_error(&truth_s, &est_s, &train_s).unwrap();
            prop_assert!((e1 - e2).abs() <= 1e-12 * e1.abs().max(1.0));
        }

        #[test]
        fn mse_is_symmetric(seed in 0u64..200) {
            let dims = TensorDims::new(2, 3, 2).unwrap();
            let mut rng = crate::rng::chacha(seed);
            let av: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bv: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = DenseTensor::from_values(dims, av).unwrap();
            let b = DenseTensor::from_values(dims, bv).unwrap();
            let ab = mean_squared_error_full(&a, &b).unwrap();
            let ba = mean_squared_error_full(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
        }
    }
}
