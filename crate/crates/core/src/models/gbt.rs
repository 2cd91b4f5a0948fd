use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tweedie::tweedie_grad_hess;
use crate::error::{Error, Result};
use crate::features::{is_missing, FeatureMatrix};
use crate::stats::{quantile_sorted, sorted_copy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Loss {
    /// Log link, compound Poisson-gamma deviance.
    Tweedie { p: f64 },
    /// Identity link, quantile loss at level `tau`.
    Pinball { tau: f64 },
}

impl Loss {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Loss::Tweedie { p } if !(p > 1.0 && p < 2.0) => Err(Error::InvalidParam(format!(
                "tweedie power must be in (1,2), got {p}"
            ))),
            Loss::Pinball { tau } if !(tau > 0.0 && tau < 1.0) => Err(Error::InvalidParam(
                format!("pinball level must be in (0,1), got {tau}"),
            )),
            _ => Ok(()),
        }
    }

    fn grad_hess(&self, y: f64, f: f64) -> (f64, f64) {
        match *self {
            Loss::Tweedie { p } => tweedie_grad_hess(y, f, p),
            Loss::Pinball { tau } => {
                let g = if y > f {
                    -tau
                } else if y < f {
                    1.0 - tau
                } else {
                    0.0
                };
                (g, 1.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbtParams {
    pub n_rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub max_bins: usize,
    pub lambda_l2: f64,
    pub min_child_weight: f64,
    pub min_samples_leaf: usize,
    pub min_split_gain: f64,
    pub subsample: f64,
    pub colsample: f64,
    pub seed: u64,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            n_rounds: 500,
            learning_rate: 0.1,
            max_depth: 6,
            max_bins: 256,
            lambda_l2: 1.0,
            min_child_weight: 1e-3,
            min_samples_leaf: 20,
            min_split_gain: 0.0,
            subsample: 1.0,
            colsample: 1.0,
            seed: 0,
        }
    }
}

impl GbtParams {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let err = |k: &str, m: &str| Error::Config {
            key: format!("{prefix}.{k}"),
            message: m.into(),
        };
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(err("learning_rate", "must be in (0, 1]"));
        }
        if self.max_depth == 0 {
            return Err(err("max_depth", "must be >= 1"));
        }
        if !(2..=u16::MAX as usize).contains(&self.max_bins) {
            return Err(err("max_bins", "must be in [2, 65535]"));
        }
        if !(self.lambda_l2 >= 0.0) {
            return Err(err("lambda_l2", "must be >= 0"));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(err("subsample", "must be in (0, 1]"));
        }
        if !(self.colsample > 0.0 && self.colsample <= 1.0) {
            return Err(err("colsample", "must be in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        /// Rows with value <= threshold go left.
        threshold: f64,
        default_left: bool,
        left: usize,
        right: usize,
        gain: f64,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    fn leaf_of(&self, value_of: impl Fn(usize) -> f64) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { .. } => return i,
                Node::Split {
                    feature,
                    threshold,
                    default_left,
                    left,
                    right,
                    ..
                } => {
                    let v = value_of(*feature);
                    let go_left = if is_missing(v) {
                        *default_left
                    } else {
                        v <= *threshold
                    };
                    i = if go_left { *left } else { *right };
                }
            }
        }
    }

    pub fn value(&self, value_of: impl Fn(usize) -> f64) -> f64 {
        match self.nodes[self.leaf_of(value_of)] {
            Node::Leaf { value } => value,
            Node::Split { .. } => unreachable!(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub loss: Loss,
    pub base_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
    pub feature_names: Vec<String>,
    pub schema_hash: String,
}

impl GbtModel {
    pub fn root_split(&self) -> Option<(usize, f64, bool)> {
        match self.trees.first()?.nodes.first()? {
            Node::Split {
                feature,
                threshold,
                default_left,
                ..
            } => Some((*feature, *threshold, *default_left)),
            Node::Leaf { .. } => None,
        }
    }

    fn check_schema(&self, x: &FeatureMatrix) -> Result<()> {
        let found = x.schema_hash();
        if found != self.schema_hash {
            return Err(Error::SchemaMismatch {
                expected: self.schema_hash.clone(),
                found,
            });
        }
        Ok(())
    }

    /// Raw additive score per row.
    pub fn predict_score(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        self.check_schema(x)?;
        let cols: Vec<&[f64]> = x.columns().iter().map(|c| c.values.as_slice()).collect();
        Ok((0..x.n_rows())
            .map(|i| {
                let s: f64 = self.trees.iter().map(|t| t.value(|f| cols[f][i])).sum();
                self.base_score + self.learning_rate * s
            })
            .collect())
    }

    /// Predictions on the response scale.
    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        let s = self.predict_score(x)?;
        Ok(match self.loss {
            Loss::Tweedie { .. } => s.into_iter().map(f64::exp).collect(),
            Loss::Pinball { .. } => s,
        })
    }
}

/// Per-feature quantile bin edges; bin b holds values in (edges[b-1], edges[b]].
struct BinMapper {
    edges: Vec<f64>,
}

impl BinMapper {
    fn fit(values: &[f64], max_bins: usize) -> Self {
        let mut distinct = sorted_copy(
            &values
                .iter()
                .copied()
                .filter(|v| !is_missing(*v))
                .collect::<Vec<_>>(),
        );
        distinct.dedup();
        if distinct.len() <= max_bins {
            return BinMapper { edges: distinct };
        }
        let mut sorted = sorted_copy(
            &values
                .iter()
                .copied()
                .filter(|v| !is_missing(*v))
                .collect::<Vec<_>>(),
        );
        let n = sorted.len();
        let mut edges: Vec<f64> = (1..max_bins)
            .map(|i| sorted[i * n / max_bins - 1])
            .collect();
        edges.push(*sorted.last().expect("non-empty"));
        edges.dedup();
        sorted.clear();
        BinMapper { edges }
    }

    fn n_bins(&self) -> usize {
        self.edges.len().max(1)
    }

    fn bin(&self, v: f64) -> u16 {
        if is_missing(v) {
            return u16::MAX;
        }
        self.edges
            .partition_point(|&e| e < v)
            .min(self.n_bins() - 1) as u16
    }
}

struct Binned {
    n: usize,
    n_bins: Vec<usize>,
    offsets: Vec<usize>,
    /// Column-major bins; missing stored as the feature's `n_bins` slot.
    bins: Vec<Vec<u16>>,
    mappers: Vec<BinMapper>,
}

impl Binned {
    fn build(x: &FeatureMatrix, rows: &[usize], max_bins: usize) -> Self {
        let mappers: Vec<BinMapper> = x
            .columns()
            .par_iter()
            .map(|c| {
                BinMapper::fit(
                    &rows.iter().map(|&i| c.values[i]).collect::<Vec<_>>(),
                    max_bins,
                )
            })
            .collect();
        let n_bins: Vec<usize> = mappers.iter().map(|m| m.n_bins()).collect();
        let mut offsets = Vec::with_capacity(n_bins.len());
        let mut acc = 0;
        for b in &n_bins {
            offsets.push(acc);
            acc += b + 1;
        }
        let bins = x
            .columns()
            .par_iter()
            .zip(mappers.par_iter())
            .map(|(c, m)| {
                rows.iter()
                    .map(|&i| {
                        let b = m.bin(c.values[i]);
                        if b == u16::MAX {
                            m.n_bins() as u16
                        } else {
                            b
                        }
                    })
                    .collect()
            })
            .collect();
        Binned {
            n: rows.len(),
            n_bins,
            offsets,
            bins,
            mappers,
        }
    }

    fn hist_len(&self) -> usize {
        self.offsets
            .last()
            .map_or(0, |o| o + self.n_bins.last().unwrap() + 1)
    }
}

#[derive(Clone)]
struct Hist {
    g: Vec<f64>,
    h: Vec<f64>,
    n: Vec<u32>,
}

impl Hist {
    fn build(data: &Binned, features: &[usize], rows: &[u32], g: &[f64], h: &[f64]) -> Hist {
        let len = data.hist_len();
        let parts: Vec<(usize, Vec<f64>, Vec<f64>, Vec<u32>)> = features
            .par_iter()
            .map(|&f| {
                let nb = data.n_bins[f] + 1;
                let (mut hg, mut hh, mut hn) = (vec![0.0; nb], vec![0.0; nb], vec![0u32; nb]);
                let col = &data.bins[f];
                for &r in rows {
                    let r = r as usize;
                    let b = col[r] as usize;
                    hg[b] += g[r];
                    hh[b] += h[r];
                    hn[b] += 1;
                }
                (f, hg, hh, hn)
            })
            .collect();
        let mut out = Hist {
            g: vec![0.0; len],
            h: vec![0.0; len],
            n: vec![0; len],
        };
        for (f, hg, hh, hn) in parts {
            let o = data.offsets[f];
            out.g[o..o + hg.len()].copy_from_slice(&hg);
            out.h[o..o + hh.len()].copy_from_slice(&hh);
            out.n[o..o + hn.len()].copy_from_slice(&hn);
        }
        out
    }

    fn minus(&self, other: &Hist) -> Hist {
        Hist {
            g: self.g.iter().zip(&other.g).map(|(a, b)| a - b).collect(),
            h: self.h.iter().zip(&other.h).map(|(a, b)| a - b).collect(),
            n: self.n.iter().zip(&other.n).map(|(a, b)| a - b).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    feature: usize,
    bin: usize,
    missing_left: bool,
    gain: f64,
}

struct Grower<'a> {
    data: &'a Binned,
    params: &'a GbtParams,
    g: &'a [f64],
    h: &'a [f64],
}

impl Grower<'_> {
    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.params.lambda_l2)
    }

    fn best_split(
        &self,
        hist: &Hist,
        features: &[usize],
        gt: f64,
        ht: f64,
        nt: u32,
    ) -> Option<Candidate> {
        let p = self.params;
        let parent = self.score(gt, ht);
        let mut best: Option<Candidate> = None;
        for &f in features {
            let o = self.data.offsets[f];
            let nb = self.data.n_bins[f];
            let (gm, hm, nm) = (hist.g[o + nb], hist.h[o + nb], hist.n[o + nb]);
            let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0u32);
            for b in 0..nb {
                gl += hist.g[o + b];
                hl += hist.h[o + b];
                nl += hist.n[o + b];
                let last = b + 1 == nb;
                if last && nm == 0 {
                    break;
                }
                for missing_left in [false, true] {
                    if last && missing_left {
                        continue;
                    }
                    let (lg, lh, ln) = if missing_left {
                        (gl + gm, hl + hm, nl + nm)
                    } else {
                        (gl, hl, nl)
                    };
                    let (rg, rh, rn) = (gt - lg, ht - lh, nt - ln);
                    if (ln as usize) < p.min_samples_leaf.max(1)
                        || (rn as usize) < p.min_samples_leaf.max(1)
                        || lh < p.min_child_weight
                        || rh < p.min_child_weight
                    {
                        continue;
                    }
                    let gain = 0.5 * (self.score(lg, lh) + self.score(rg, rh) - parent);
                    if gain > p.min_split_gain && best.is_none_or(|c| gain > c.gain) {
                        best = Some(Candidate {
                            feature: f,
                            bin: b,
                            missing_left,
                            gain,
                        });
                    }
                }
            }
        }
        best
    }

    fn grow(&self, rows: Vec<u32>, features: &[usize]) -> (Tree, Vec<(usize, Vec<u32>)>) {
        struct Pending {
            node: usize,
            rows: Vec<u32>,
            hist: Hist,
            depth: usize,
        }
        let mut nodes = vec![Node::Leaf { value: 0.0 }];
        let mut leaves = Vec::new();
        let root_hist = Hist::build(self.data, features, &rows, self.g, self.h);
        let mut level = vec![Pending {
            node: 0,
            rows,
            hist: root_hist,
            depth: 0,
        }];
        while !level.is_empty() {
            let mut next = Vec::new();
            for p in level {
                let gt: f64 = p.rows.iter().map(|&r| self.g[r as usize]).sum();
                let ht: f64 = p.rows.iter().map(|&r| self.h[r as usize]).sum();
                let split = if p.depth < self.params.max_depth {
                    self.best_split(&p.hist, features, gt, ht, p.rows.len() as u32)
                } else {
                    None
                };
                let Some(c) = split else {
                    nodes[p.node] = Node::Leaf {
                        value: -gt / (ht + self.params.lambda_l2),
                    };
                    leaves.push((p.node, p.rows));
                    continue;
                };
                let nb = self.data.n_bins[c.feature];
                let col = &self.data.bins[c.feature];
                let (left_rows, right_rows): (Vec<u32>, Vec<u32>) =
                    p.rows.iter().partition(|&&r| {
                        let b = col[r as usize] as usize;
                        if b == nb {
                            c.missing_left
                        } else {
                            b <= c.bin
                        }
                    });
                let (small, small_is_left) = if left_rows.len() <= right_rows.len() {
                    (&left_rows, true)
                } else {
                    (&right_rows, false)
                };
                let small_hist = Hist::build(self.data, features, small, self.g, self.h);
                let large_hist = p.hist.minus(&small_hist);
                let (lh, rh) = if small_is_left {
                    (small_hist, large_hist)
                } else {
                    (large_hist, small_hist)
                };
                let (l, r) = (nodes.len(), nodes.len() + 1);
                nodes.push(Node::Leaf { value: 0.0 });
                nodes.push(Node::Leaf { value: 0.0 });
                let edges = &self.data.mappers[c.feature].edges;
                nodes[p.node] = Node::Split {
                    feature: c.feature,
                    threshold: if c.bin + 1 < nb {
                        edges[c.bin]
                    } else {
                        f64::MAX
                    },
                    default_left: c.missing_left,
                    left: l,
                    right: r,
                    gain: c.gain,
                };
                next.push(Pending {
                    node: l,
                    rows: left_rows,
                    hist: lh,
                    depth: p.depth + 1,
                });
                next.push(Pending {
                    node: r,
                    rows: right_rows,
                    hist: rh,
                    depth: p.depth + 1,
                });
            }
            level = next;
        }
        (Tree { nodes }, leaves)
    }
}

/// Boosts trees on `x[rows]` against `y` (one target per selected row).
pub fn fit_gbt(
    x: &FeatureMatrix,
    rows: &[usize],
    y: &[f64],
    loss: Loss,
    params: &GbtParams,
) -> Result<GbtModel> {
    loss.validate()?;
    params.validate("model.gbt")?;
    if rows.len() != y.len() {
        return Err(Error::InvalidParam(format!(
            "{} rows but {} targets",
            rows.len(),
            y.len()
        )));
    }
    if rows.is_empty() {
        return Err(Error::InvalidParam("no training rows".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParam("non-finite target".into()));
    }
    let mut model = GbtModel {
        loss,
        base_score: 0.0,
        learning_rate: params.learning_rate,
        trees: Vec::new(),
        feature_names: x.column_names().into_iter().map(String::from).collect(),
        schema_hash: x.schema_hash(),
    };
    match loss {
        Loss::Tweedie { .. } => {
            if y.iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidParam("tweedie targets must be >= 0".into()));
            }
            let m = crate::stats::mean(y);
            model.base_score = m.max(1e-8).ln();
            if m <= 0.0 {
                log::warn!("all-zero targets; returning a constant model");
                return Ok(model);
            }
        }
        Loss::Pinball { tau } => model.base_score = quantile_sorted(&sorted_copy(y), tau),
    }

    let data = Binned::build(x, rows, params.max_bins);
    let n = data.n;
    let n_features = x.n_cols();
    let mut f = vec![model.base_score; n];
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let all_features: Vec<usize> = (0..n_features).collect();
    for _ in 0..params.n_rounds {
        for i in 0..n {
            (g[i], h[i]) = loss.grad_hess(y[i], f[i]);
        }
        let sampled: Vec<u32> = if params.subsample < 1.0 {
            (0..n as u32)
                .filter(|_| rng.random::<f64>() < params.subsample)
                .collect()
        } else {
            (0..n as u32).collect()
        };
        let features: Vec<usize> = if params.colsample < 1.0 && n_features > 1 {
            let k = ((n_features as f64 * params.colsample).ceil() as usize).clamp(1, n_features);
            let mut v = sample(&mut rng, n_features, k).into_vec();
            v.sort_unstable();
            v
        } else {
            all_features.clone()
        };
        if sampled.is_empty() {
            continue;
        }
        let grower = Grower {
            data: &data,
            params,
            g: &g,
            h: &h,
        };
        let (mut tree, leaves) = grower.grow(sampled, &features);
        if let Loss::Pinball { tau } = loss {
            for (node, rows) in &leaves {
                let resid: Vec<f64> = rows
                    .iter()
                    .map(|&r| y[r as usize] - f[r as usize])
                    .collect();
                tree.nodes[*node] = Node::Leaf {
                    value: quantile_sorted(&sorted_copy(&resid), tau),
                };
            }
        }
        if params.subsample < 1.0 {
            for i in 0..n {
                f[i] += params.learning_rate * tree_value_binned(&tree, &data, i);
            }
        } else {
            for (node, rows) in &leaves {
                let Node::Leaf { value } = tree.nodes[*node] else {
                    unreachable!()
                };
                for &r in rows {
                    f[r as usize] += params.learning_rate * value;
                }
            }
        }
        model.trees.push(tree);
    }
    Ok(model)
}

fn tree_value_binned(tree: &Tree, data: &Binned, row: usize) -> f64 {
    tree.value(|feat| {
        let b = data.bins[feat][row] as usize;
        if b == data.n_bins[feat] {
            f64::NAN
        } else {
            // any value inside bin b compares against edges like the bin itself
            data.mappers[feat].edges.get(b).copied().unwrap_or(f64::NAN)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Column, ColumnKind, Level, RowKey, MISSING};
    use rand_distr::{Distribution, Poisson};

    pub(crate) fn matrix(cols: Vec<Vec<f64>>) -> FeatureMatrix {
        let n = cols[0].len();
        let keys = (0..n)
            .map(|i| RowKey {
                study_id: format!("S{i}"),
                facility_id: "F".into(),
                month_index: 0,
            })
            .collect();
        let cols = cols
            .into_iter()
            .enumerate()
            .map(|(j, v)| Column::numeric(format!("x{j}"), Level::Study, ColumnKind::Numeric, v))
            .collect();
        FeatureMatrix::new(keys, cols).unwrap()
    }

    #[test]
    fn constant_target_intercept_only() {
        let x = matrix(vec![vec![0.0; 50]]);
        let rows: Vec<usize> = (0..50).collect();
        let p = GbtParams {
            n_rounds: 1,
            ..Default::default()
        };
        let m = fit_gbt(&x, &rows, &[2.5; 50], Loss::Tweedie { p: 1.5 }, &p).unwrap();
        for v in m.predict(&x).unwrap() {
            assert!((v - 2.5).abs() < 1e-9);
        }
    }

    #[test]
    fn recovers_two_group_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let xs: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| {
                Poisson::new(if x == 0.0 { 0.2 } else { 2.0 })
                    .unwrap()
                    .sample(&mut rng)
            })
            .collect();
        let x = matrix(vec![xs]);
        let rows: Vec<usize> = (0..n).collect();
        let p = GbtParams {
            n_rounds: 100,
            max_depth: 1,
            ..Default::default()
        };
        let m = fit_gbt(&x, &rows, &ys, Loss::Tweedie { p: 1.3 }, &p).unwrap();
        let pred = m.predict(&x).unwrap();
        assert!((pred[0] / 0.2 - 1.0).abs() < 0.1, "{}", pred[0]);
        assert!((pred[1] / 2.0 - 1.0).abs() < 0.1, "{}", pred[1]);
    }

    #[test]
    fn missing_values_follow_learned_direction() {
        let n = 200;
        let xs: Vec<f64> = (0..n)
            .map(|i| if i % 4 == 0 { MISSING } else { (i % 2) as f64 })
            .collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| {
                if x == 1.0 {
                    5.0
                } else if x.is_nan() {
                    5.0
                } else {
                    0.5
                }
            })
            .collect();
        let x = matrix(vec![xs]);
        let rows: Vec<usize> = (0..n).collect();
        let p = GbtParams {
            n_rounds: 50,
            max_depth: 1,
            min_samples_leaf: 1,
            ..Default::default()
        };
        let m = fit_gbt(&x, &rows, &ys, Loss::Tweedie { p: 1.5 }, &p).unwrap();
        let (_, _, default_left) = m.root_split().unwrap();
        assert!(!default_left);
        let pred = m.predict(&x).unwrap();
        assert!((pred[0] - 5.0).abs() < 0.2);
    }

    #[test]
    fn pinball_tracks_quantile() {
        let n = 2000;
        let xs: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let ys: Vec<f64> = (0..n)
            .map(|i| (i / 2 % 100) as f64 + 100.0 * (i % 2) as f64)
            .collect();
        let x = matrix(vec![xs]);
        let rows: Vec<usize> = (0..n).collect();
        let p = GbtParams {
            n_rounds: 50,
            max_depth: 1,
            learning_rate: 0.5,
            ..Default::default()
        };
        let m = fit_gbt(&x, &rows, &ys, Loss::Pinball { tau: 0.9 }, &p).unwrap();
        let pred = m.predict(&x).unwrap();
        assert!((pred[0] - 89.1).abs() < 2.0, "{}", pred[0]);
        assert!((pred[1] - 189.1).abs() < 2.0, "{}", pred[1]);
    }

    #[test]
    fn all_zero_targets_give_floor_model() {
        let x = matrix(vec![vec![1.0; 10]]);
        let rows: Vec<usize> = (0..10).collect();
        let m = fit_gbt(
            &x,
            &rows,
            &[0.0; 10],
            Loss::Tweedie { p: 1.5 },
            &GbtParams::default(),
        )
        .unwrap();
        assert!(m.trees.is_empty());
        assert!((m.predict(&x).unwrap()[0] - 1e-8).abs() < 1e-20);
    }

    #[test]
    fn schema_mismatch_detected() {
        let x = matrix(vec![vec![1.0; 10]]);
        let rows: Vec<usize> = (0..10).collect();
        let m = fit_gbt(
            &x,
            &rows,
            &[1.0; 10],
            Loss::Tweedie { p: 1.5 },
            &GbtParams::default(),
        )
        .unwrap();
        let other = matrix(vec![vec![1.0; 10], vec![2.0; 10]]);
        assert!(matches!(
            m.predict(&other),
            Err(Error::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn subsampled_fit_is_deterministic() {
        let n = 500;
        let xs: Vec<f64> = (0..n).map(|i| (i % 7) as f64).collect();
        let ys: Vec<f64> = (0..n).map(|i| (i % 3) as f64).collect();
        let x = matrix(vec![xs.clone(), xs.iter().map(|v| v * v).collect()]);
        let rows: Vec<usize> = (0..n).collect();
        let p = GbtParams {
            n_rounds: 20,
            subsample: 0.7,
            colsample: 0.5,
            seed: 9,
            ..Default::default()
        };
        let a = fit_gbt(&x, &rows, &ys, Loss::Tweedie { p: 1.5 }, &p).unwrap();
        let b = fit_gbt(&x, &rows, &ys, Loss::Tweedie { p: 1.5 }, &p).unwrap();
        assert_eq!(a, b);
        let pa = a.predict(&x).unwrap();
        assert!(pa.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}
