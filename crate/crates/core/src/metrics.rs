//! Evaluation metrics: trajectory straightness, two-sample energy distance
//! with a permutation threshold, and boundary coverage.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;

use crate::error::{Result, VsdmError};
use crate::par::Exec;
use crate::rng::{stream_rng, Purpose};

/// `h Σ_n mean_chains |x_{n+1} − 2x_n + x_{n−1}| / h²` for one axis; `paths`
/// is indexed `[chain][node]` on a uniform grid.
pub fn straightness_axis(paths: &[Vec<f64>], h: f64) -> Result<f64> {
    if paths.is_empty() {
        return Err(VsdmError::domain("straightness needs at least one trajectory"));
    }
    let len = paths[0].len();
    if len < 3 || paths.iter().any(|p| p.len() != len) {
        return Err(VsdmError::domain("trajectories must share a length of at least 3"));
    }
    if !(h > 0.0) {
        return Err(VsdmError::domain(format!("step {h} must be positive")));
    }
    let mut total = 0.0;
    for p in paths {
        total += p.windows(3).map(|w| (w[2] - 2.0 * w[1] + w[0]).abs()).sum::<f64>();
    }
    Ok(total / paths.len() as f64 / h)
}

/// Per-axis straightness of node-ordered batched states (`states[n]` holds
/// every chain at node `n`).
pub fn straightness(states: &[Array2<f64>], h: f64) -> Result<Vec<f64>> {
    if states.len() < 3 {
        return Err(VsdmError::domain("trajectories must have at least 3 states"));
    }
    let (chains, dim) = states[0].dim();
    if chains == 0 || states.iter().any(|s| s.dim() != (chains, dim)) {
        return Err(VsdmError::domain("trajectory batch is empty or ragged"));
    }
    if !(h > 0.0) {
        return Err(VsdmError::domain(format!("step {h} must be positive")));
    }
    let mut out = vec![0.0; dim];
    for w in states.windows(3) {
        let second = &w[2] - &(&w[1] * 2.0) + &w[0];
        for (i, o) in out.iter_mut().enumerate() {
            *o += second.column(i).iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    Ok(out.into_iter().map(|v| v / chains as f64 / h).collect())
}

fn dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_pair(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(VsdmError::domain("energy distance needs two nonempty batches"));
    }
    if a.ncols() != b.ncols() {
        return Err(VsdmError::domain("energy distance batches differ in dimension"));
    }
    Ok(())
}

/// Sums of pairwise distances within group 0, within group 1 and across,
/// for the pooled rows `z` labelled by `group`.
fn grouped_sums(z: ArrayView2<f64>, group: &[bool], exec: Exec) -> [f64; 3] {
    let n = z.nrows();
    if z.ncols() == 1 {
        return grouped_sums_1d(z, group);
    }
    let parts = exec.map_chunks(n, |rows| {
        let mut s = [0.0; 3];
        for i in rows {
            for j in i + 1..n {
                let d = dist(z.row(i), z.row(j));
                let k = match (group[i], group[j]) {
                    (false, false) => 0,
                    (true, true) => 1,
                    _ => 2,
                };
                s[k] += d;
            }
        }
        s
    });
    let mut s = [0.0; 3];
    for p in parts {
        for k in 0..3 {
            s[k] += p[k];
        }
    }
    // ordered pairs
    s.map(|v| 2.0 * v)
}

/// O(n log n) version for scalars: after sorting, each point's distance to
/// every earlier point of a group is `count·x − prefix_sum`.
fn grouped_sums_1d(z: ArrayView2<f64>, group: &[bool]) -> [f64; 3] {
    let mut idx: Vec<usize> = (0..z.nrows()).collect();
    idx.sort_by(|&a, &b| z[(a, 0)].total_cmp(&z[(b, 0)]));
    let mut cnt = [0.0f64; 2];
    let mut sum = [0.0f64; 2];
    let mut s = [0.0; 3];
    for &i in &idx {
        let x = z[(i, 0)];
        let g = group[i] as usize;
        s[g] += cnt[g] * x - sum[g];
        s[2] += cnt[1 - g] * x - sum[1 - g];
        cnt[g] += 1.0;
        sum[g] += x;
    }
    s.map(|v| 2.0 * v)
}

fn energy_from_sums(s: [f64; 3], n: f64, m: f64) -> f64 {
    // cross sum counts (i, j) and (j, i)
    (s[2] / (n * m) - s[0] / (n * n) - s[1] / (m * m)).max(0.0)
}

fn pooled(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    ndarray::concatenate(ndarray::Axis(0), &[a, b]).expect("equal widths")
}

/// Two-sample energy distance `2E‖X−Y‖ − E‖X−X′‖ − E‖Y−Y′‖` with V-statistic
/// (all-pairs) averages, so identical batches give exactly 0.
pub fn energy_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    check_pair(a, b)?;
    let z = pooled(a, b);
    let group: Vec<bool> = (0..z.nrows()).map(|i| i >= a.nrows()).collect();
    let s = grouped_sums(z.view(), &group, Exec::default());
    Ok(energy_from_sums(s, a.nrows() as f64, b.nrows() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PermutationTest {
    pub statistic: f64,
    /// `level` quantile of the permutation distribution.
    pub threshold: f64,
    pub p_value: f64,
}

impl PermutationTest {
    pub fn passes(&self) -> bool {
        self.statistic < self.threshold
    }
}

/// Permutation test of equal distributions: relabels the pooled sample
/// `permutations` times and reports the `level` quantile of the statistic.
pub fn permutation_test(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    permutations: usize,
    level: f64,
    seed: u64,
    exec: Exec,
) -> Result<PermutationTest> {
    check_pair(a, b)?;
    if permutations == 0 || !(0.0..1.0).contains(&level) {
        return Err(VsdmError::domain("permutation test needs ≥ 1 permutation and level in [0, 1)"));
    }
    let z = pooled(a, b);
    let (n, m) = (a.nrows() as f64, b.nrows() as f64);
    let mut group: Vec<bool> = (0..z.nrows()).map(|i| i >= a.nrows()).collect();
    let statistic = energy_from_sums(grouped_sums(z.view(), &group, exec), n, m);
    let mut rng = stream_rng(seed, Purpose::Permutation, 0);
    let mut perm = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        group.shuffle(&mut rng);
        perm.push(energy_from_sums(grouped_sums(z.view(), &group, exec), n, m));
    }
    perm.sort_by(f64::total_cmp);
    let k = ((level * permutations as f64).ceil() as usize).min(permutations - 1);
    let exceed = perm.iter().filter(|&&v| v >= statistic).count();
    Ok(PermutationTest {
        statistic,
        threshold: perm[k],
        p_value: (exceed + 1) as f64 / (permutations + 1) as f64,
    })
}

/// Linear-interpolated empirical quantile.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Boundary bands of one axis: the outer `band` fraction at each end of the
/// data's `[q, 1 − q]` quantile support.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OuterBand {
    pub axis: usize,
    pub lower: f64,
    pub upper: f64,
}

impl OuterBand {
    pub fn from_data(data: ArrayView2<f64>, axis: usize, q: f64, band: f64) -> Result<Self> {
        if data.nrows() < 2 || axis >= data.ncols() {
            return Err(VsdmError::domain("outer band needs ≥ 2 rows and a valid axis"));
        }
        let col: Vec<f64> = data.column(axis).to_vec();
        let lo = quantile(&col, q);
        let hi = quantile(&col, 1.0 - q);
        let w = hi - lo;
        Ok(OuterBand {
            axis,
            lower: lo + band * w,
            upper: hi - band * w,
        })
    }

    /// Fraction of rows beyond either band edge.
    pub fn coverage(&self, x: ArrayView2<f64>) -> f64 {
        if x.nrows() == 0 {
            return 0.0;
        }
        let c = x
            .column(self.axis)
            .iter()
            .filter(|&&v| v < self.lower || v > self.upper)
            .count();
        c as f64 / x.nrows() as f64
    }
}
