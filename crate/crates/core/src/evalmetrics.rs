//! Recovery metrics: correlation matrices, optimal matching and the mean
//! correlation coefficient (MCC).

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("column {column} of the {side} matrix is constant")]
    DegenerateColumn { side: &'static str, column: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MccVariant {
    /// Correlate the signals as given and resolve signs after matching.
    Raw,
    /// Correlate `|estimated|` with `|truth|`.
    AbsoluteValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: MccVariant,
    /// Entry `(i, j)` correlates estimated column `i` with true column `j`.
    pub corr_matrix: Matrix,
    /// `assignment[j]` is the estimated column matched to true column `j`.
    pub assignment: Vec<usize>,
    pub signs: Vec<i8>,
    /// Sign-resolved correlation of every matched pair, in true-column order.
    pub per_component: Vec<f64>,
    pub mcc: f64,
}

fn centered_columns(m: ArrayView2<f64>, side: &'static str) -> Result<(Matrix, Array1<f64>), EvalError> {
    let mean = m.mean_axis(Axis(0)).expect("nonempty");
    let c = &m - &mean;
    let ss = c.map_axis(Axis(0), |col| col.dot(&col));
    if let Some(column) = ss.iter().position(|&s| !(s > 0.0)) {
        return Err(EvalError::DegenerateColumn { side, column });
    }
    Ok((c, ss))
}

/// Pearson correlations between the columns of `a` and the columns of `b`.
pub fn corr_matrix(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Matrix, EvalError> {
    if a.nrows() != b.nrows() {
        return Err(EvalError::Shape(format!("{} rows versus {}", a.nrows(), b.nrows())));
    }
    if a.nrows() < 2 {
        return Err(EvalError::Shape("need at least two rows".into()));
    }
    let (ca, sa) = centered_columns(a, "estimated")?;
    let (cb, sb) = centered_columns(b, "truth")?;
    // the same dot routine as the column norms, so identical columns give exactly 1
    Ok(Matrix::from_shape_fn((a.ncols(), b.ncols()), |(i, j)| {
        let sxy = ca.column(i).dot(&cb.column(j));
        (sxy / (sa[i] * sb[j]).sqrt()).clamp(-1.0, 1.0)
    }))
}

/// Minimum-cost assignment of rows to columns of a square matrix
/// (Hungarian method with potentials, `O(n³)`). Returns `col_of_row`.
pub fn hungarian_min(cost: ArrayView2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "square cost matrix required");
    if n == 0 {
        return Vec::new();
    }
    // 1-based potentials; index 0 is the virtual column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        col_of_row[row_of_col[j] - 1] = j - 1;
    }
    col_of_row
}

fn assignment_value(w: ArrayView2<f64>, rows: &[usize], cols: &[usize], col_of_row: &[usize]) -> f64 {
    let mut vals: Vec<f64> = col_of_row
        .iter()
        .enumerate()
        .map(|(r, &c)| w[[rows[r], cols[c]]])
        .collect();
    sorted_sum(&mut vals)
}

fn sorted_sum(vals: &mut [f64]) -> f64 {
    vals.sort_by(f64::total_cmp);
    vals.iter().sum()
}

/// Maximum-weight perfect matching. `result[r]` is the column matched to row
/// `r`; among optimal matchings the lexicographically smallest is returned.
pub fn max_weight_matching(w: ArrayView2<f64>) -> Vec<usize> {
    let n = w.nrows();
    let solve = |rows: &[usize], cols: &[usize]| -> (Vec<usize>, f64) {
        let cost = Matrix::from_shape_fn((rows.len(), cols.len()), |(i, j)| -w[[rows[i], cols[j]]]);
        let a = hungarian_min(cost.view());
        let val = assignment_value(w, rows, cols, &a);
        (a, val)
    };
    let all: Vec<usize> = (0..n).collect();
    let (_, best) = solve(&all, &all);
    let tol = 1e-12 * (n as f64).max(1.0) * (1.0 + best.abs());
    let mut result = Vec::with_capacity(n);
    let mut fixed = Vec::with_capacity(n);
    let mut free_cols = all.clone();
    for r in 0..n {
        let rest_rows: Vec<usize> = (r + 1..n).collect();
        for (pos, &c) in free_cols.iter().enumerate() {
            let mut rest_cols = free_cols.clone();
            rest_cols.remove(pos);
            let (_, sub) = solve(&rest_rows, &rest_cols);
            let mut vals = fixed.clone();
            vals.push(w[[r, c]]);
            let total = sorted_sum(&mut vals) + sub;
            if total >= best - tol {
                result.push(c);
                fixed.push(w[[r, c]]);
                free_cols.remove(pos);
                break;
            }
        }
    }
    debug_assert_eq!(result.len(), n);
    result
}

/// Mean correlation coefficient between estimated and true sources after
/// optimal matching on `|corr|` and sign resolution.
pub fn mcc(estimated: ArrayView2<f64>, truth: ArrayView2<f64>, variant: MccVariant) -> Result<EvalReport, EvalError> {
    if estimated.dim() != truth.dim() {
        return Err(EvalError::Shape(format!(
            "estimated {:?} versus truth {:?}",
            estimated.dim(),
            truth.dim()
        )));
    }
    let corr = match variant {
        MccVariant::Raw => corr_matrix(estimated, truth)?,
        MccVariant::AbsoluteValue => corr_matrix(estimated.mapv(f64::abs).view(), truth.mapv(f64::abs).view())?,
    };
    let n = corr.ncols();
    // rows of the weight matrix are true columns, so the result maps truth → estimate
    let weights = corr.t().mapv(f64::abs);
    let assignment = max_weight_matching(weights.view());
    let mut signs = Vec::with_capacity(n);
    let mut per_component = Vec::with_capacity(n);
    for (j, &i) in assignment.iter().enumerate() {
        let c = corr[[i, j]];
        let sign: i8 = match variant {
            MccVariant::Raw if c < 0.0 => -1,
            _ => 1,
        };
        signs.push(sign);
        per_component.push(f64::from(sign) * c);
    }
    let mut sorted = per_component.clone();
    let mcc = (sorted_sum(&mut sorted) / n as f64).clamp(-1.0, 1.0);
    Ok(EvalReport {
        variant,
        corr_matrix: corr,
        assignment,
        signs,
        per_component,
        mcc,
    })
}

/// Sample mean and (population) standard deviation.
pub fn mean_std(values: ArrayView1<f64>) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.mean().expect("nonempty");
    let var = values.mapv(|v| (v - mean) * (v - mean)).mean().expect("nonempty");
    (mean, var.sqrt())
}

/// Spearman rank correlation, with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Array1<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = Array1::zeros(v.len());
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let cx = &rx - rx.mean().unwrap_or(0.0);
    let cy = &ry - ry.mean().unwrap_or(0.0);
    let denom = (cx.dot(&cx) * cy.dot(&cy)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        cx.dot(&cy) / denom
    }
}
