//! Bradley–Terry strengths from pairwise preference counts.
//!
//! Strengths are fitted by the minorization-maximization fixed point
//! `p_i ← W_i / Σ_j n_ij / (p_i + p_j)` and reported as log-strengths with
//! zero mean. When the directed "beat" graph is not strongly connected the
//! maximum-likelihood estimate diverges, so 0.5 is added to both directions
//! of every compared pair first; [`BtFit::regularized`] records this.

use std::collections::BTreeMap;

use thiserror::Error;

pub const PSEUDO_COUNT: f64 = 0.5;
pub const REL_TOLERANCE: f64 = 1e-9;
pub const MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum BtError {
    #[error("count matrix must be square, row {row} has {len} entries for {n} methods")]
    NotSquare { row: usize, len: usize, n: usize },
    #[error("count w[{i}][{j}] = {value} is not a non-negative finite number")]
    BadCount { i: usize, j: usize, value: f64 },
    #[error("method `{0}` has no games")]
    NoGames(String),
    #[error("comparison graph is disconnected: {}", format_components(.0))]
    Disconnected(Vec<Vec<String>>),
    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

fn format_components(c: &[Vec<String>]) -> String {
    c.iter().map(|g| format!("{{{}}}", g.join(", "))).collect::<Vec<_>>().join(" ")
}

/// Named win counts: `wins[i][j]` is how often method `i` beat method `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairCounts {
    pub names: Vec<String>,
    pub wins: Vec<Vec<f64>>,
}

impl PairCounts {
    pub fn unnamed(wins: Vec<Vec<f64>>) -> Self {
        let names = (0..wins.len()).map(|i| format!("m{i}")).collect();
        PairCounts { names, wins }
    }

    /// Parses `PAIR <a> <b> <wins_a> <wins_b>` lines; `#` starts a comment.
    /// Repeated pairs accumulate. Methods are ordered by first appearance.
    pub fn parse(text: &str) -> Result<Self, BtError> {
        let mut names: Vec<String> = Vec::new();
        let mut index = BTreeMap::new();
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| BtError::Parse { line: i + 1, reason };
            let f: Vec<&str> = line.split_whitespace().collect();
            let ["PAIR", a, b, wa, wb] = f.as_slice() else {
                return Err(err(format!("expected `PAIR <a> <b> <wins_a> <wins_b>`, got `{line}`")));
            };
            if a == b {
                return Err(err(format!("method `{a}` compared with itself")));
            }
            let count = |s: &str| s.parse::<u64>().map_err(|_| err(format!("`{s}` is not a non-negative integer")));
            let (wa, wb) = (count(wa)?, count(wb)?);
            let mut id = |name: &str| {
                *index.entry(name.to_string()).or_insert_with(|| {
                    names.push(name.to_string());
                    names.len() - 1
                })
            };
            let (ia, ib) = (id(a), id(b));
            entries.push((ia, ib, wa as f64, wb as f64));
        }
        let n = names.len();
        let mut wins = vec![vec![0.0; n]; n];
        for (a, b, wa, wb) in entries {
            wins[a][b] += wa;
            wins[b][a] += wb;
        }
        Ok(PairCounts { names, wins })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BtFit {
    pub names: Vec<String>,
    /// Zero-mean log-strengths.
    pub scores: Vec<f64>,
    pub iterations: usize,
    /// True when the pseudo-count was added.
    pub regularized: bool,
}

fn validate(c: &PairCounts) -> Result<(), BtError> {
    let n = c.names.len();
    if c.wins.len() != n {
        return Err(BtError::NotSquare { row: c.wins.len(), len: 0, n });
    }
    for (i, row) in c.wins.iter().enumerate() {
        if row.len() != n {
            return Err(BtError::NotSquare { row: i, len: row.len(), n });
        }
        for (j, &v) in row.iter().enumerate() {
            if !(v.is_finite() && v >= 0.0) || (i == j && v != 0.0) {
                return Err(BtError::BadCount { i, j, value: v });
            }
        }
    }
    Ok(())
}

/// Nodes reachable from `start` following `edge(i, j)`.
fn reachable(n: usize, start: usize, edge: impl Fn(usize, usize) -> bool) -> Vec<bool> {
    let mut seen = vec![false; n];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(i) = stack.pop() {
        for (j, seen_j) in seen.iter_mut().enumerate() {
            if !*seen_j && edge(i, j) {
                *seen_j = true;
                stack.push(j);
            }
        }
    }
    seen
}

fn strongly_connected(w: &[Vec<f64>]) -> bool {
    let n = w.len();
    reachable(n, 0, |i, j| w[i][j] > 0.0).iter().all(|&s| s) && reachable(n, 0, |i, j| w[j][i] > 0.0).iter().all(|&s| s)
}

pub fn bt_fit(counts: &PairCounts) -> Result<BtFit, BtError> {
    validate(counts)?;
    let n = counts.names.len();
    let games = |i: usize, j: usize| counts.wins[i][j] + counts.wins[j][i];
    for i in 0..n {
        if (0..n).all(|j| games(i, j) == 0.0) {
            return Err(BtError::NoGames(counts.names[i].clone()));
        }
    }
    let mut assigned = vec![false; n];
    let mut components = Vec::new();
    for start in 0..n {
        if !assigned[start] {
            let comp = reachable(n, start, |i, j| games(i, j) > 0.0);
            let members: Vec<String> = (0..n).filter(|&i| comp[i]).map(|i| counts.names[i].clone()).collect();
            for (i, &c) in comp.iter().enumerate() {
                assigned[i] |= c;
            }
            components.push(members);
        }
    }
    if components.len() > 1 {
        return Err(BtError::Disconnected(components));
    }

    let mut w = counts.wins.clone();
    let regularized = !strongly_connected(&w);
    if regularized {
        for (i, row) in w.iter_mut().enumerate() {
            for (j, wij) in row.iter_mut().enumerate() {
                if i != j && games(i, j) > 0.0 {
                    *wij += PSEUDO_COUNT;
                }
            }
        }
    }
    let total_wins: Vec<f64> = w.iter().map(|row| row.iter().sum()).collect();
    let mut p = vec![1.0; n];
    for iteration in 1..=MAX_ITERATIONS {
        let mut next: Vec<f64> = (0..n)
            .map(|i| {
                let denom: f64 = (0..n).filter(|&j| j != i).map(|j| (w[i][j] + w[j][i]) / (p[i] + p[j])).sum();
                total_wins[i] / denom
            })
            .collect();
        let log_mean = next.iter().map(|v| v.ln()).sum::<f64>() / n as f64;
        let scale = (-log_mean).exp();
        for v in &mut next {
            *v *= scale;
        }
        let change = next.iter().zip(&p).map(|(a, b)| ((a - b) / b).abs()).fold(0.0, f64::max);
        p = next;
        if change < REL_TOLERANCE {
            let logs: Vec<f64> = p.iter().map(|v| v.ln()).collect();
            let mean = logs.iter().sum::<f64>() / n as f64;
            return Ok(BtFit {
                names: counts.names.clone(),
                scores: logs.iter().map(|l| l - mean).collect(),
                iterations: iteration,
                regularized,
            });
        }
    }
    Err(BtError::NoConvergence(MAX_ITERATIONS))
}

/// Log-likelihood of zero-mean log-strengths `scores` under `wins`.
pub fn log_likelihood(wins: &[Vec<f64>], scores: &[f64]) -> f64 {
    let mut ll = 0.0;
    for (i, row) in wins.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            if w > 0.0 {
                let d = scores[j] - scores[i];
                ll -= w * d.exp().ln_1p();
            }
        }
    }
    ll
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_pair_is_zero() {
        let fit = bt_fit(&PairCounts::unnamed(vec![vec![0.0, 10.0], vec![10.0, 0.0]])).unwrap();
        assert_eq!(fit.scores, vec![0.0, 0.0]);
        assert!(!fit.regularized);
    }

    #[test]
    fn shutout_is_regularized() {
        let fit = bt_fit(&PairCounts::unnamed(vec![vec![0.0, 10.0], vec![0.0, 0.0]])).unwrap();
        assert!(fit.regularized);
        // 10.5 vs 0.5 wins: log-odds ln 21 split evenly
        assert!((fit.scores[0] - 21f64.ln() / 2.0).abs() < 1e-8, "{:?}", fit.scores);
    }

    #[test]
    fn three_methods_frozen_values() {
        let w = vec![vec![0.0, 8.0, 9.0], vec![2.0, 0.0, 7.0], vec![1.0, 3.0, 0.0]];
        let fit = bt_fit(&PairCounts::unnamed(w)).unwrap();
        let expected = [1.19721855, -0.17885851, -1.01836003];
        for (a, b) in fit.scores.iter().zip(expected) {
            assert!((a - b).abs() < 1e-7, "{:?}", fit.scores);
        }
    }

    #[test]
    fn errors() {
        let disconnected = PairCounts::unnamed(vec![
            vec![0.0, 1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 2.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ]);
        let err = bt_fit(&disconnected).unwrap_err();
        assert_eq!(err.to_string(), "comparison graph is disconnected: {m0, m1} {m2, m3}");
        let idle = PairCounts::unnamed(vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]);
        assert_eq!(bt_fit(&idle).unwrap_err(), BtError::NoGames("m2".into()));
        assert!(matches!(bt_fit(&PairCounts::unnamed(vec![vec![0.0, -1.0], vec![1.0, 0.0]])), Err(BtError::BadCount { .. })));
    }

    #[test]
    fn parses_pair_lines() {
        let c = PairCounts::parse("# study\nPAIR ours base 8 2\nPAIR base other 7 3\nPAIR ours other 9 1\nPAIR ours base 1 0\n").unwrap();
        assert_eq!(c.names, vec!["ours", "base", "other"]);
        assert_eq!(c.wins[0][1], 9.0);
        assert_eq!(c.wins[1][0], 2.0);
        assert!(matches!(PairCounts::parse("PAIR a b 1\n"), Err(BtError::Parse { line: 1, .. })));
        assert!(PairCounts::parse("PAIR a a 1 1\n").is_err());
        assert!(PairCounts::parse("PAIR a b 1.5 1\n").is_err());
    }
}
