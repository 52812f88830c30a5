//! Two-class discrimination data: true pairs `(x, u)` against pairs
//! `(x, u*)` whose auxiliary values were shuffled by a random permutation.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Matrix, SeededRng};
use crate::synthdata::{SourceDataset, SourceSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContrastiveError {
    #[error("strategy mismatch: {0}")]
    StrategyMismatch(String),
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
}

fn default_true() -> bool {
    true
}

/// How the auxiliary variable is defined for each observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AuxStrategy {
    /// `u = (t + 1) / T`.
    TimeIndex,
    /// `u` = segment index of a segmented dataset.
    SegmentLabel {
        #[serde(default = "default_true")]
        one_hot: bool,
    },
    /// `u = x(t − lag)`.
    History { lag: usize },
    /// `u = (x(t − lag), (t + 1) / T)`, shuffled jointly unless
    /// `separate_permutation` draws an independent index for the time part.
    Combined {
        lag: usize,
        #[serde(default)]
        separate_permutation: bool,
    },
    /// `u` = class label `c ∈ {0, …, k − 1}` read from the dataset's first aux column.
    ClassLabel {
        k: usize,
        #[serde(default = "default_true")]
        one_hot: bool,
    },
    /// `u = (ξ, η)` grid coordinates.
    SpatialGrid,
}

impl AuxStrategy {
    pub fn validate(&self) -> Result<(), ContrastiveError> {
        match *self {
            AuxStrategy::History { lag } | AuxStrategy::Combined { lag, .. } if lag == 0 => Err(
                ContrastiveError::InvalidStrategy("history lag must be >= 1".into()),
            ),
            AuxStrategy::ClassLabel { k, .. } if k < 2 => Err(ContrastiveError::InvalidStrategy(
                format!("class-label strategy needs k >= 2, got {k}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AuxStrategy::TimeIndex => "time_index",
            AuxStrategy::SegmentLabel { .. } => "segment_label",
            AuxStrategy::History { .. } => "history",
            AuxStrategy::Combined { .. } => "combined",
            AuxStrategy::ClassLabel { .. } => "class_label",
            AuxStrategy::SpatialGrid => "spatial_grid",
        }
    }

    fn lag(&self) -> usize {
        match *self {
            AuxStrategy::History { lag } | AuxStrategy::Combined { lag, .. } => lag,
            _ => 0,
        }
    }
}

/// Balanced contrastive dataset. Rows `0..T′` are positives (label 1), rows
/// `T′..2T′` negatives (label 0); negative row `T′ + t` pairs `x` of positive
/// row `t` with the aux value of positive row `π(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveSet {
    pub x: Matrix,
    pub u: Matrix,
    pub labels: Vec<u8>,
    /// Discrete auxiliary class of each row, for segment and class-label strategies.
    pub aux_class: Option<Vec<usize>>,
    /// Number of distinct auxiliary classes when `aux_class` is set.
    pub n_classes: Option<usize>,
    pub permutation: Vec<usize>,
    /// Independent permutation of the time part under `Combined { separate_permutation: true }`.
    pub second_permutation: Option<Vec<usize>>,
    pub strategy: AuxStrategy,
}

impl ContrastiveSet {
    /// Number of positive (and of negative) rows.
    pub fn half_len(&self) -> usize {
        self.labels.len() / 2
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn aux_dim(&self) -> usize {
        self.u.ncols()
    }

    pub fn positive_u(&self) -> ArrayView2<'_, f64> {
        self.u.slice(s![..self.half_len(), ..])
    }

    pub fn negative_u(&self) -> ArrayView2<'_, f64> {
        self.u.slice(s![self.half_len().., ..])
    }

    /// Permutation record as a JSON array, for run logs.
    pub fn permutation_json(&self) -> String {
        serde_json::to_string(&self.permutation).expect("index vectors serialize")
    }

    /// Gathers rows into a contiguous batch.
    pub fn batch(&self, rows: &[usize]) -> Batch {
        let n = self.x.ncols();
        let m = self.u.ncols();
        let mut x = Matrix::zeros((rows.len(), n));
        let mut u = Matrix::zeros((rows.len(), m));
        for (k, &r) in rows.iter().enumerate() {
            x.row_mut(k).assign(&self.x.row(r));
            u.row_mut(k).assign(&self.u.row(r));
        }
        Batch {
            x,
            u,
            aux_class: self
                .aux_class
                .as_ref()
                .map(|c| rows.iter().map(|&r| c[r]).collect()),
            labels: rows.iter().map(|&r| self.labels[r] as f64).collect(),
        }
    }

    /// Entire set as one batch, in row order.
    pub fn full_batch(&self) -> Batch {
        Batch {
            x: self.x.clone(),
            u: self.u.clone(),
            aux_class: self.aux_class.clone(),
            labels: self.labels.iter().map(|&l| l as f64).collect(),
        }
    }

    fn fill_negatives(&mut self) {
        let half = self.half_len();
        let time_col = self.u.ncols().saturating_sub(1);
        for t in 0..half {
            let src = self.permutation[t];
            let (pos, mut neg) = self.u.view_mut().split_at(ndarray::Axis(0), half);
            neg.row_mut(t).assign(&pos.row(src));
            if let Some(second) = &self.second_permutation {
                neg[[t, time_col]] = pos[[second[t], time_col]];
            }
            if let Some(c) = self.aux_class.as_mut() {
                c[half + t] = c[src];
            }
        }
    }
}

/// Contiguous rows handed to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub u: Matrix,
    pub aux_class: Option<Vec<usize>>,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn one_hot(classes: &[usize], width: usize) -> Matrix {
    let mut m = Matrix::zeros((classes.len(), width));
    for (r, &c) in classes.iter().enumerate() {
        m[[r, c]] = 1.0;
    }
    m
}

fn mismatch<T>(msg: impl Into<String>) -> Result<T, ContrastiveError> {
    Err(ContrastiveError::StrategyMismatch(msg.into()))
}

/// Builds positives `(X[t], U_strategy[t])` and negatives
/// `(X[t], U_strategy[π(t)])` for a uniform random permutation `π`.
pub fn build_pairs(
    ds: &SourceDataset,
    strategy: &AuxStrategy,
    rng: &mut SeededRng,
) -> Result<ContrastiveSet, ContrastiveError> {
    strategy.validate()?;
    if !ds.has_observations() {
        return mismatch("dataset has no observations; apply a mixing first");
    }
    let t_len = ds.len();
    let lag = strategy.lag();
    if t_len <= lag {
        return mismatch(format!("history lag {lag} needs more than {t_len} rows"));
    }
    let x_all = &ds.observations;
    let time = |t: usize| (t + 1) as f64 / t_len as f64;
    let mut aux_class = None;
    let mut n_classes = None;
    let (rows, base_u): (Vec<usize>, Matrix) = match strategy {
        AuxStrategy::TimeIndex => (
            (0..t_len).collect(),
            Array2::from_shape_fn((t_len, 1), |(t, _)| time(t)),
        ),
        AuxStrategy::SegmentLabel { one_hot: oh } => {
            let (Some(k), Some(labels)) = (ds.n_segments(), ds.segment_labels()) else {
                return mismatch("segment-label strategy needs a segmented dataset");
            };
            let u = if *oh {
                one_hot(&labels, k)
            } else {
                Array2::from_shape_fn((t_len, 1), |(t, _)| labels[t] as f64)
            };
            aux_class = Some(labels);
            n_classes = Some(k);
            ((0..t_len).collect(), u)
        }
        AuxStrategy::History { lag } => {
            let rows: Vec<usize> = (*lag..t_len).collect();
            let u = Array2::from_shape_fn((rows.len(), ds.n()), |(r, j)| x_all[[rows[r] - lag, j]]);
            (rows, u)
        }
        AuxStrategy::Combined { lag, .. } => {
            let rows: Vec<usize> = (*lag..t_len).collect();
            let n = ds.n();
            let u = Array2::from_shape_fn((rows.len(), n + 1), |(r, j)| {
                if j < n {
                    x_all[[rows[r] - lag, j]]
                } else {
                    time(rows[r])
                }
            });
            (rows, u)
        }
        AuxStrategy::ClassLabel { k, one_hot: oh } => {
            if ds.m() != 1 {
                return mismatch("class-label strategy needs a single label column in U");
            }
            let mut labels = Vec::with_capacity(t_len);
            for &v in ds.aux.column(0) {
                if v.fract() != 0.0 || v < 0.0 || v >= *k as f64 {
                    return mismatch(format!("aux value {v} is not a class label in 0..{k}"));
                }
                labels.push(v as usize);
            }
            let u = if *oh {
                one_hot(&labels, *k)
            } else {
                Array2::from_shape_fn((t_len, 1), |(t, _)| labels[t] as f64)
            };
            aux_class = Some(labels);
            n_classes = Some(*k);
            ((0..t_len).collect(), u)
        }
        AuxStrategy::SpatialGrid => {
            if !matches!(ds.spec.sources, SourceSpec::Grid(_)) || ds.m() != 2 {
                return mismatch("spatial-grid strategy needs a grid dataset");
            }
            ((0..t_len).collect(), ds.aux.clone())
        }
    };
    let half = rows.len();
    let n = ds.n();
    let m = base_u.ncols();
    let mut x = Matrix::zeros((2 * half, n));
    for (r, &t) in rows.iter().enumerate() {
        x.row_mut(r).assign(&x_all.row(t));
        x.row_mut(half + r).assign(&x_all.row(t));
    }
    let mut u = Matrix::zeros((2 * half, m));
    u.slice_mut(s![..half, ..]).assign(&base_u);
    let aux_class = aux_class.map(|c| {
        let mut all = c;
        all.extend(std::iter::repeat_n(0, half));
        all
    });
    let mut labels = vec![1u8; half];
    labels.extend(std::iter::repeat_n(0u8, half));
    let permutation = rng.permutation(half);
    let second_permutation = match strategy {
        AuxStrategy::Combined {
            separate_permutation: true,
            ..
        } => Some(rng.permutation(half)),
        _ => None,
    };
    let mut cs = ContrastiveSet {
        x,
        u,
        labels,
        aux_class,
        n_classes,
        permutation,
        second_permutation,
        strategy: strategy.clone(),
    };
    cs.fill_negatives();
    Ok(cs)
}

/// Same positives, fresh permutation for the negatives.
pub fn resample_negatives(cs: &ContrastiveSet, rng: &mut SeededRng) -> ContrastiveSet {
    let half = cs.half_len();
    if half <= 1 {
        log::warn!("contrastive set has {half} positive row(s); negatives equal positives");
    }
    let mut out = cs.clone();
    out.permutation = rng.permutation(half);
    if out.second_permutation.is_some() {
        out.second_permutation = Some(rng.permutation(half));
    }
    out.fill_negatives();
    out
}

/// Stratified shuffle partitioned into batches of `batch` rows.
///
/// Positives and negatives are shuffled separately and interleaved, so every
/// even-sized batch holds equally many of each class; the last batch may be
/// shorter. Every row appears exactly once.
pub fn minibatches(cs: &ContrastiveSet, batch: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let half = cs.half_len();
    assert!(
        batch >= 1 && batch <= cs.len().max(1),
        "batch size {batch} outside 1..={}",
        cs.len()
    );
    let mut pos: Vec<usize> = (0..half).collect();
    let mut neg: Vec<usize> = (half..2 * half).collect();
    rng.shuffle(&mut pos);
    rng.shuffle(&mut neg);
    let order: Vec<usize> = pos.into_iter().zip(neg).flat_map(|(p, q)| [p, q]).collect();
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{
        gen_grid_scale_mixture, gen_segmented_sources, GeneratorSpec, MixingParams, SegmentParams,
    };

    fn with_identity_mixing(mut ds: SourceDataset) -> SourceDataset {
        ds.observations = ds.sources.clone();
        ds
    }

    fn segmented(t: usize, k: usize) -> SourceDataset {
        with_identity_mixing(gen_segmented_sources(2, t, k, &mut SeededRng::new(1)).unwrap())
    }

    fn sorted_rows(m: ArrayView2<f64>) -> Vec<Vec<u64>> {
        let mut rows: Vec<Vec<u64>> = m
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        rows
    }

    #[test]
    fn time_index_positives() {
        let ds = segmented(4, 1);
        let cs = build_pairs(&ds, &AuxStrategy::TimeIndex, &mut SeededRng::new(2)).unwrap();
        assert_eq!(cs.positive_u().column(0).to_vec(), vec![0.25, 0.5, 0.75, 1.0]);
        for t in 0..4 {
            assert_eq!(cs.u[[4 + t, 0]], cs.u[[cs.permutation[t], 0]]);
            assert_eq!(cs.x.row(t), cs.x.row(4 + t));
        }
        assert_eq!(cs.labels, vec![1, 1, 1, 1, 0, 0, 0, 0]);
    }

    #[test]
    fn history_drops_undefined_rows() {
        let ds = segmented(50, 1);
        let cs = build_pairs(&ds, &AuxStrategy::History { lag: 1 }, &mut SeededRng::new(2)).unwrap();
        assert_eq!(cs.len(), 2 * 49);
        assert_eq!(cs.x.row(0), ds.observations.row(1));
        assert_eq!(cs.u.row(0), ds.observations.row(0));
        let cs3 = build_pairs(&ds, &AuxStrategy::History { lag: 3 }, &mut SeededRng::new(2)).unwrap();
        assert_eq!(cs3.len(), 2 * 47);
        assert!(build_pairs(&segmented(3, 1), &AuxStrategy::History { lag: 3 }, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn segment_one_hot_histograms_match() {
        let ds = segmented(64 * 20, 64);
        let cs = build_pairs(
            &ds,
            &AuxStrategy::SegmentLabel { one_hot: true },
            &mut SeededRng::new(3),
        )
        .unwrap();
        assert_eq!(cs.aux_dim(), 64);
        let pos = cs.positive_u().sum_axis(ndarray::Axis(0));
        let neg = cs.negative_u().sum_axis(ndarray::Axis(0));
        assert_eq!(pos, neg);
        let classes = cs.aux_class.as_ref().unwrap();
        for r in 0..cs.len() {
            assert_eq!(cs.u[[r, classes[r]]], 1.0);
        }
    }

    #[test]
    fn combined_shares_or_splits_the_index() {
        let ds = segmented(30, 1);
        let joint = AuxStrategy::Combined {
            lag: 1,
            separate_permutation: false,
        };
        let cs = build_pairs(&ds, &joint, &mut SeededRng::new(4)).unwrap();
        assert_eq!(cs.aux_dim(), 3);
        assert!(cs.second_permutation.is_none());
        let half = cs.half_len();
        for t in 0..half {
            assert_eq!(cs.u.row(half + t), cs.u.row(cs.permutation[t]));
        }
        let split = AuxStrategy::Combined {
            lag: 1,
            separate_permutation: true,
        };
        let cs = build_pairs(&ds, &split, &mut SeededRng::new(4)).unwrap();
        let second = cs.second_permutation.clone().unwrap();
        for t in 0..half {
            assert_eq!(cs.u[[half + t, 0]], cs.u[[cs.permutation[t], 0]]);
            assert_eq!(cs.u[[half + t, 2]], cs.u[[second[t], 2]]);
        }
    }

    #[test]
    fn class_labels_and_mismatches() {
        let ds = segmented(100, 5);
        let cs = build_pairs(
            &ds,
            &AuxStrategy::ClassLabel { k: 5, one_hot: false },
            &mut SeededRng::new(1),
        )
        .unwrap();
        assert_eq!(cs.n_classes, Some(5));
        assert!(build_pairs(
            &ds,
            &AuxStrategy::ClassLabel { k: 3, one_hot: true },
            &mut SeededRng::new(1)
        )
        .is_err());
        assert!(matches!(
            build_pairs(&ds, &AuxStrategy::SpatialGrid, &mut SeededRng::new(1)),
            Err(ContrastiveError::StrategyMismatch(_))
        ));
        assert!(matches!(
            build_pairs(&ds, &AuxStrategy::ClassLabel { k: 1, one_hot: true }, &mut SeededRng::new(1)),
            Err(ContrastiveError::InvalidStrategy(_))
        ));
        let grid = with_identity_mixing(gen_grid_scale_mixture(2, 8, 1, &mut SeededRng::new(1)).unwrap());
        assert!(build_pairs(&grid, &AuxStrategy::SegmentLabel { one_hot: true }, &mut SeededRng::new(1)).is_err());
        assert_eq!(
            build_pairs(&grid, &AuxStrategy::SpatialGrid, &mut SeededRng::new(1)).unwrap().aux_dim(),
            2
        );
        let raw = gen_segmented_sources(2, 10, 2, &mut SeededRng::new(1)).unwrap();
        assert!(build_pairs(&raw, &AuxStrategy::TimeIndex, &mut SeededRng::new(1)).is_err());
    }

    #[test]
    fn resampling_keeps_positives_and_multiset() {
        let ds = segmented(200, 10);
        let strategy = AuxStrategy::SegmentLabel { one_hot: false };
        let cs = build_pairs(&ds, &strategy, &mut SeededRng::new(5)).unwrap();
        let again = resample_negatives(&cs, &mut SeededRng::new(6));
        assert_ne!(cs.permutation, again.permutation);
        assert_eq!(cs.positive_u(), again.positive_u());
        assert_eq!(sorted_rows(cs.negative_u()), sorted_rows(again.negative_u()));
        assert_eq!(sorted_rows(cs.positive_u()), sorted_rows(again.negative_u()));
        assert_eq!(cs.x, again.x);
    }

    #[test]
    fn single_pair_resample_is_identity() {
        let ds = segmented(1, 1);
        let cs = build_pairs(&ds, &AuxStrategy::TimeIndex, &mut SeededRng::new(5)).unwrap();
        let again = resample_negatives(&cs, &mut SeededRng::new(9));
        assert_eq!(again.permutation, vec![0]);
        assert_eq!(again.positive_u(), again.negative_u());
    }

    #[test]
    fn build_is_deterministic() {
        let spec = GeneratorSpec {
            sources: SourceSpec::Segmented(SegmentParams { n: 2, t: 500, n_segments: 5 }),
            mixing: Some(MixingParams::default()),
            seed: 1,
            stream: 0,
        };
        let ds = spec.generate().unwrap();
        let s = AuxStrategy::SegmentLabel { one_hot: true };
        let a = build_pairs(&ds, &s, &mut SeededRng::new(8)).unwrap();
        let b = build_pairs(&ds, &s, &mut SeededRng::new(8)).unwrap();
        assert_eq!(a, b);
        assert!(a.permutation_json().starts_with('['));
    }

    #[test]
    fn minibatch_partitions() {
        let ds = segmented(3, 1);
        let cs = build_pairs(&ds, &AuxStrategy::TimeIndex, &mut SeededRng::new(1)).unwrap();
        let full = minibatches(&cs, 6, &mut SeededRng::new(2));
        assert_eq!(full.len(), 1);
        assert_eq!(full[0].len(), 6);
        let pairs = minibatches(&cs, 2, &mut SeededRng::new(2));
        assert_eq!(pairs.len(), 3);
        for b in &pairs {
            let positives = b.iter().filter(|&&r| cs.labels[r] == 1).count();
            assert_eq!(positives, 1);
        }
        let big = segmented(101, 1);
        let cs = build_pairs(&big, &AuxStrategy::TimeIndex, &mut SeededRng::new(1)).unwrap();
        let batches = minibatches(&cs, 16, &mut SeededRng::new(3));
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..202).collect::<Vec<_>>());
        let pos: usize = batches.iter().flatten().filter(|&&r| cs.labels[r] == 1).count();
        assert_eq!(pos, 101);
    }
}
