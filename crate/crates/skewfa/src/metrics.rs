//! External clustering validation: correct classification rate (best label
//! permutation), adjusted Rand index, and adjusted mutual information.

use crate::error::{Error, Result};
use statrs::function::gamma::ln_gamma;
use std::collections::HashMap;

/// Contingency table between two labelings, with marginals.
struct Contingency {
    counts: Vec<Vec<usize>>, // [pred][truth]
    row_sums: Vec<usize>,
    col_sums: Vec<usize>,
    n: usize,
}

fn contingency(pred: &[i64], truth: &[i64]) -> Result<Contingency> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Config("metrics require at least one label".into()));
    }
    let mut pred_ids: HashMap<i64, usize> = HashMap::new();
    let mut truth_ids: HashMap<i64, usize> = HashMap::new();
    for &l in pred {
        let next = pred_ids.len();
        pred_ids.entry(l).or_insert(next);
    }
    for &l in truth {
        let next = truth_ids.len();
        truth_ids.entry(l).or_insert(next);
    }
    let (gp, gt) = (pred_ids.len(), truth_ids.len());
    let mut counts = vec![vec![0usize; gt]; gp];
    for (&a, &b) in pred.iter().zip(truth.iter()) {
        counts[pred_ids[&a]][truth_ids[&b]] += 1;
    }
    let row_sums: Vec<usize> = counts.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<usize> = (0..gt).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
    Ok(Contingency {
        counts,
        row_sums,
        col_sums,
        n: pred.len(),
    })
}

/// Correct classification rate: the agreement fraction maximized over all
/// assignments of predicted labels to true labels. Exhaustive permutation
/// search up to 8 distinct labels, Hungarian assignment beyond.
pub fn ccr(pred: &[i64], truth: &[i64]) -> Result<f64> {
    let tab = contingency(pred, truth)?;
    let k = tab.counts.len().max(tab.counts[0].len());
    // Square matrix padded with zeros.
    let mut square = vec![vec![0usize; k]; k];
    for (i, row) in tab.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            square[i][j] = c;
        }
    }
    let matched = if k <= 8 {
        max_trace_exhaustive(&square)
    } else {
        hungarian_max(&square)
    };
    Ok(matched as f64 / tab.n as f64)
}

fn max_trace_exhaustive(m: &[Vec<usize>]) -> usize {
    let k = m.len();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0usize;
    // Heap's algorithm, iterative.
    let mut c = vec![0usize; k];
    let score = |perm: &[usize]| -> usize { perm.iter().enumerate().map(|(i, &j)| m[i][j]).sum() };
    best = best.max(score(&perm));
    let mut i = 0;
    while i < k {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.max(score(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

/// O(k^3) Hungarian algorithm maximizing the matched count.
fn hungarian_max(m: &[Vec<usize>]) -> usize {
    let k = m.len();
    let max_entry = m.iter().flatten().copied().max().unwrap_or(0) as i64;
    // Convert to a minimization problem.
    let cost: Vec<Vec<i64>> = m
        .iter()
        .map(|row| row.iter().map(|&v| max_entry - v as i64).collect())
        .collect();
    // Standard potentials-based implementation (1-indexed internals).
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; k + 1];
    let mut v = vec![0i64; k + 1];
    let mut p = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=k {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=k {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
            for j in 0..=k {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0usize;
    for j in 1..=k {
        if p[j] != 0 {
            total += m[p[j] - 1][j - 1];
        }
    }
    total
}

fn comb2(x: usize) -> f64 {
    if x < 2 {
        0.0
    } else {
        x as f64 * (x as f64 - 1.0) / 2.0
    }
}

/// Adjusted Rand index via the pair-counting contingency formula; zero
/// expectation under independent random labelings, one iff the partitions
/// agree up to relabeling.
pub fn ari(pred: &[i64], truth: &[i64]) -> Result<f64> {
    let tab = contingency(pred, truth)?;
    let sum_cells: f64 = tab.counts.iter().flatten().map(|&c| comb2(c)).sum();
    let sum_rows: f64 = tab.row_sums.iter().map(|&c| comb2(c)).sum();
    let sum_cols: f64 = tab.col_sums.iter().map(|&c| comb2(c)).sum();
    let pairs = comb2(tab.n);
    let expected = sum_rows * sum_cols / pairs;
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-300 {
        return Ok(1.0);
    }
    Ok((sum_cells - expected) / (max_index - expected))
}

fn entropy(counts: &[usize], n: usize) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

/// Adjusted mutual information with the exact expected-MI correction under
/// the permutation (hypergeometric) model. Normalization uses
/// max(H(pred), H(truth)); this is the "max" variant of AMI.
pub fn ami(pred: &[i64], truth: &[i64]) -> Result<f64> {
    let tab = contingency(pred, truth)?;
    let n = tab.n as f64;
    let h_pred = entropy(&tab.row_sums, tab.n);
    let h_truth = entropy(&tab.col_sums, tab.n);
    let h_max = h_pred.max(h_truth);

    // Mutual information of the observed table.
    let mut mi = 0.0;
    for (i, row) in tab.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let pij = c as f64 / n;
                mi += pij * ((n * c as f64) / (tab.row_sums[i] as f64 * tab.col_sums[j] as f64)).ln();
            }
        }
    }

    if h_max <= 0.0 {
        // Both partitions are single clusters: identical by definition.
        return Ok(1.0);
    }

    // Expected MI under random tables with fixed marginals.
    let ln_fact = |x: usize| ln_gamma(x as f64 + 1.0);
    let n_us = tab.n;
    let mut emi = 0.0;
    for &a in &tab.row_sums {
        for &b in &tab.col_sums {
            let lo = 1usize.max((a + b).saturating_sub(n_us));
            let hi = a.min(b);
            for nij in lo..=hi {
                let term = (nij as f64 / n) * ((n * nij as f64) / (a as f64 * b as f64)).ln();
                let ln_p = ln_fact(a) + ln_fact(b) + ln_fact(n_us - a) + ln_fact(n_us - b)
                    - ln_fact(n_us)
                    - ln_fact(nij)
                    - ln_fact(a - nij)
                    - ln_fact(b - nij)
                    - ln_fact(n_us + nij - a - b);
                emi += term * ln_p.exp();
            }
        }
    }

    let denom = h_max - emi;
    if denom.abs() < 1e-12 {
        return Ok(if (mi - emi).abs() < 1e-12 { 0.0 } else { 1.0 });
    }
    Ok((mi - emi) / denom)
}
