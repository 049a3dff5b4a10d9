//! Growth-stage-aware dataset splitting.
//!
//! Plots are clustered on standardized (LAI, SPAD, VH) vectors by repeated
//! K-Means, the runs are reconciled by majority vote, and each cluster is
//! split 9:1:1 into train/val/test so every subset spans the same growth
//! conditions.

use std::collections::BTreeMap;

use mcvi_numcore::init::{derive_seed, rng};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_RUNS: usize = 7;
pub const MAX_ITERS: usize = 300;
pub const JS_BINS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthRecord {
    pub plot_id: String,
    pub date: String,
    pub stage: String,
    #[serde(rename = "LAI")]
    pub lai: f64,
    #[serde(rename = "SPAD")]
    pub spad: f64,
    #[serde(rename = "VH")]
    pub vh: f64,
}

impl GrowthRecord {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lai, self.spad, self.vh].iter().all(|v| v.is_finite() && *v >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("{}: LAI, SPAD and VH must be finite and non-negative", self.plot_id)))
        }
    }

    pub fn features(&self, set: FeatureSet) -> Vec<f64> {
        match set {
            FeatureSet::WithVh => vec![self.lai, self.spad, self.vh],
            FeatureSet::WithoutVh => vec![self.lai, self.spad],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    #[default]
    WithVh,
    WithoutVh,
}

/// Column-wise z-score with population standard deviation.
pub fn normalize_columns(rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if rows.len() < 2 {
        return Err(invalid("normalization needs at least 2 records"));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(invalid("ragged feature matrix"));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for j in 0..d {
        mean[j] = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        std[j] = (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
        if !(std[j] > 0.0) {
            return Err(Error::Degenerate(format!("feature column {j} has zero variance")));
        }
    }
    Ok(rows
        .iter()
        .map(|r| (0..d).map(|j| (r[j] - mean[j]) / std[j]).collect())
        .collect())
}

pub fn normalize_features(records: &[GrowthRecord], set: FeatureSet) -> Result<Vec<Vec<f64>>> {
    for r in records {
        r.validate()?;
    }
    let rows: Vec<Vec<f64>> = records.iter().map(|r| r.features(set)).collect();
    normalize_columns(&rows)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, r: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[r.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = r.gen_range(0.0..total);
            let mut idx = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if t < *w {
                    idx = i;
                    break;
                }
                t -= w;
            }
            idx
        } else {
            r.gen_range(0..points.len())
        };
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult> {
    if k == 0 || points.len() < k {
        return Err(invalid(format!("kmeans needs at least K={k} points, got {}", points.len())));
    }
    let dim = points[0].len();
    let mut r = rng(seed);
    let mut centroids = plus_plus_init(points, k, &mut r);
    let mut labels = vec![usize::MAX; points.len()];
    let mut iterations = 0;
    for it in 0..MAX_ITERS {
        iterations = it + 1;
        let mut changed = false;
        for (l, p) in labels.iter_mut().zip(points) {
            let (c, _) = nearest(p, &centroids);
            if *l != c {
                *l = c;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; dim]; k];
        for (l, p) in labels.iter().zip(points) {
            counts[*l] += 1;
            for (s, v) in sums[*l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut reseeded = false;
        for c in 0..k {
            if counts[c] == 0 {
                // move the empty centroid onto the worst-fit point
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], &centroids[labels[a]]);
                        let db = sq_dist(&points[b], &centroids[labels[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("non-empty");
                centroids[c] = points[far].clone();
                labels[far] = c;
                reseeded = true;
            } else {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed && !reseeded {
            break;
        }
    }
    let inertia = labels
        .iter()
        .zip(points)
        .map(|(l, p)| sq_dist(p, &centroids[*l]))
        .sum();
    Ok(KMeansResult {
        labels,
        centroids,
        inertia,
        iterations,
    })
}

/// Sum of squared distances of each point to the mean of its labeled group.
pub fn inertia_of(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let dim = points[0].len();
    let mut counts = vec![0usize; k];
    let mut sums = vec![vec![0.0; dim]; k];
    for (l, p) in labels.iter().zip(points) {
        counts[*l] += 1;
        for (s, v) in sums[*l].iter_mut().zip(p) {
            *s += v;
        }
    }
    labels
        .iter()
        .zip(points)
        .map(|(l, p)| {
            let c: Vec<f64> = sums[*l].iter().map(|s| s / counts[*l] as f64).collect();
            sq_dist(p, &c)
        })
        .sum()
}

/// Independent K-Means runs with derived seeds, run in parallel.
pub fn repeated_kmeans(points: &[Vec<f64>], k: usize, runs: usize, seed: u64) -> Result<Vec<KMeansResult>> {
    use rayon::prelude::*;
    (0..runs)
        .into_par_iter()
        .map(|i| kmeans(points, k, derive_seed(seed, i as u64)))
        .collect()
}

/// Map from a run's labels to reference labels, greedily pairing the closest
/// remaining (run, reference) centroid pair.
pub fn align_to_reference(run: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<Vec<usize>> {
    let k = reference.len();
    if run.len() != k {
        return Err(invalid("runs disagree on the number of clusters"));
    }
    for a in 0..k {
        for b in a + 1..k {
            if sq_dist(&reference[a], &reference[b]) < 1e-24 {
                return Err(Error::Degenerate(format!("reference centroids {a} and {b} coincide")));
            }
        }
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(k * k);
    for (i, c) in run.iter().enumerate() {
        for (j, rc) in reference.iter().enumerate() {
            pairs.push((sq_dist(c, rc), i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut map = vec![usize::MAX; k];
    let mut taken = vec![false; k];
    for (_, i, j) in pairs {
        if map[i] == usize::MAX && !taken[j] {
            map[i] = j;
            taken[j] = true;
        }
    }
    Ok(map)
}

/// Per-sample mode over already aligned label rows. A tie goes to the label of
/// the first row that voted for one of the tied labels, so relabeling every
/// row consistently relabels the result.
pub fn vote(rows: &[Vec<usize>], k: usize) -> Vec<usize> {
    let n = rows.first().map_or(0, Vec::len);
    (0..n)
        .map(|j| {
            let mut counts = vec![0usize; k];
            for row in rows {
                counts[row[j]] += 1;
            }
            let best = *counts.iter().max().expect("k > 0");
            rows.iter().map(|row| row[j]).find(|&l| counts[l] == best).expect("max exists")
        })
        .collect()
}

/// Align every run to `runs[reference]` and take the per-sample mode, with the
/// reference run breaking ties.
pub fn majority_vote(runs: &[KMeansResult], reference: usize) -> Result<Vec<usize>> {
    if runs.len() < 5 {
        return Err(invalid(format!("majority vote needs at least 5 runs, got {}", runs.len())));
    }
    let r = reference;
    let reference = runs.get(r).ok_or_else(|| invalid("reference run out of range"))?;
    let k = reference.centroids.len();
    let mut rows = Vec::with_capacity(runs.len());
    let order = std::iter::once(r).chain((0..runs.len()).filter(|&i| i != r));
    for run in order.map(|i| &runs[i]) {
        if run.labels.len() != reference.labels.len() {
            return Err(invalid("runs cover different numbers of samples"));
        }
        let map = align_to_reference(&run.centroids, &reference.centroids)?;
        rows.push(run.labels.iter().map(|&l| map[l]).collect());
    }
    Ok(vote(&rows, k))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Val,
    Test,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Train, Subset::Val, Subset::Test];

    pub fn name(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Val => "val",
            Subset::Test => "test",
        }
    }
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Subset::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| invalid(format!("unknown subset '{s}' (expected train, val or test)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub plot_id: String,
    pub subset: Subset,
    pub cluster: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub mmd: f64,
    pub js: f64,
    pub cv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub entries: Vec<SplitEntry>,
    /// Clusters too small to contribute a training sample.
    pub degenerate_clusters: Vec<usize>,
    pub diagnostics: Option<Diagnostics>,
}

impl SplitAssignment {
    pub fn subset_of(&self, plot_id: &str) -> Option<Subset> {
        self.entries.iter().find(|e| e.plot_id == plot_id).map(|e| e.subset)
    }

    pub fn ids(&self, subset: Subset) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.subset == subset)
            .map(|e| e.plot_id.clone())
            .collect()
    }

    pub fn count(&self, subset: Subset) -> usize {
        self.entries.iter().filter(|e| e.subset == subset).count()
    }
}

/// Subset sizes of a cluster of `n`: floor for train and val, remainder to test.
pub fn cluster_counts(n: usize, ratios: [f64; 3]) -> (usize, usize, usize) {
    let total: f64 = ratios.iter().sum();
    let train = (n as f64 * ratios[0] / total).floor() as usize;
    let val = (n as f64 * ratios[1] / total).floor() as usize;
    (train, val, n - train - val)
}

pub fn stratified_split(plot_ids: &[String], labels: &[usize], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if plot_ids.len() != labels.len() {
        return Err(invalid("plot ids and cluster labels differ in length"));
    }
    if ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(invalid("split ratios must be positive"));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    let mut subset = vec![Subset::Test; labels.len()];
    let mut degenerate = Vec::new();
    for (&cluster, idx) in &members {
        let mut idx = idx.clone();
        idx.shuffle(&mut rng(derive_seed(seed, cluster as u64)));
        let (n_train, n_val, _) = cluster_counts(idx.len(), ratios);
        if n_train == 0 {
            degenerate.push(cluster);
        }
        for (pos, &i) in idx.iter().enumerate() {
            subset[i] = if pos < n_train {
                Subset::Train
            } else if pos < n_train + n_val {
                Subset::Val
            } else {
                Subset::Test
            };
        }
    }
    Ok(SplitAssignment {
        entries: plot_ids
            .iter()
            .zip(labels)
            .zip(subset)
            .map(|((id, &cluster), subset)| SplitEntry {
                plot_id: id.clone(),
                subset,
                cluster,
            })
            .collect(),
        degenerate_clusters: degenerate,
        diagnostics: None,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Biased MMD² with an RBF kernel whose bandwidth is the median pairwise
/// distance of the pooled sample.
pub fn mmd2(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let mut dists = Vec::new();
    for a in 0..pooled.len() {
        for b in a + 1..pooled.len() {
            dists.push(sq_dist(pooled[a], pooled[b]).sqrt());
        }
    }
    let sigma = median(dists);
    let sigma = if sigma > 0.0 { sigma } else { 1.0 };
    let kernel_mean = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut s = 0.0;
        for p in a {
            for q in b {
                s += (-sq_dist(p, q) / (2.0 * sigma * sigma)).exp();
            }
        }
        s / (a.len() * b.len()) as f64
    };
    kernel_mean(x, x) + kernel_mean(y, y) - 2.0 * kernel_mean(x, y)
}

fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for &v in values {
        let b = if hi > lo {
            (((v - lo) / (hi - lo)) * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize
        } else {
            0
        };
        h[b] += 1.0;
    }
    let n = values.len() as f64;
    h.iter_mut().for_each(|c| *c /= n);
    h
}

/// Jensen-Shannon divergence (natural log) between two distributions.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(ai, _)| **ai > 0.0)
            .map(|(ai, mi)| ai * (ai / mi).ln())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}

/// MMD, JS and CV between the train/val/test subsets.
pub fn split_diagnostics(records: &[GrowthRecord], assignment: &SplitAssignment) -> Result<Diagnostics> {
    let features = normalize_features(records, FeatureSet::WithVh)?;
    let mut by_subset: BTreeMap<Subset, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let s = assignment
            .subset_of(&r.plot_id)
            .ok_or_else(|| Error::UnknownIndex(format!("plot {} missing from split", r.plot_id)))?;
        by_subset.entry(s).or_default().push(i);
    }
    let groups: Vec<&Vec<usize>> = Subset::ALL
        .iter()
        .map(|s| by_subset.get(s).filter(|g| !g.is_empty()).ok_or_else(|| Error::Degenerate(format!("{s:?} subset is empty"))))
        .collect::<Result<_>>()?;
    let rows = |g: &[usize]| -> Vec<Vec<f64>> { g.iter().map(|&i| features[i].clone()).collect() };
    let pairs = [(0, 1), (0, 2), (1, 2)];

    let mmd = pairs
        .iter()
        .map(|&(a, b)| mmd2(&rows(groups[a]), &rows(groups[b])))
        .sum::<f64>()
        / 3.0;

    let mut js = 0.0;
    for f in 0..3 {
        let (lo, hi) = features
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[f]), hi.max(r[f])));
        let hists: Vec<Vec<f64>> = groups
            .iter()
            .map(|g| histogram(&g.iter().map(|&i| features[i][f]).collect::<Vec<_>>(), lo, hi, JS_BINS))
            .collect();
        js += pairs.iter().map(|&(a, b)| js_divergence(&hists[a], &hists[b])).sum::<f64>() / 3.0;
    }
    js /= 3.0;

    let mut stages: Vec<&str> = records.iter().map(|r| r.stage.as_str()).collect();
    stages.sort_unstable();
    stages.dedup();
    let mut cvs = Vec::new();
    for stage in stages {
        let in_stage: Vec<Vec<usize>> = groups
            .iter()
            .map(|g| g.iter().copied().filter(|&i| records[i].stage == stage).collect())
            .collect();
        if in_stage.iter().any(Vec::is_empty) {
            continue;
        }
        for param in 0..3 {
            let value = |i: usize| [records[i].lai, records[i].spad, records[i].vh][param];
            let means: Vec<f64> = in_stage
                .iter()
                .map(|g| g.iter().map(|&i| value(i)).sum::<f64>() / g.len() as f64)
                .collect();
            let mean = means.iter().sum::<f64>() / 3.0;
            let std = (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
            cvs.push(if mean.abs() > 0.0 { std / mean } else { 0.0 });
        }
    }
    if cvs.is_empty() {
        return Err(Error::Degenerate("no growth stage is present in all three subsets".into()));
    }
    let cv = cvs.iter().sum::<f64>() / cvs.len() as f64;
    Ok(Diagnostics { mmd, js, cv })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub k_clusters: usize,
    pub n_runs: usize,
    pub ratios: [f64; 3],
    pub features: FeatureSet,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            k_clusters: DEFAULT_K,
            n_runs: DEFAULT_RUNS,
            ratios: [9.0, 1.0, 1.0],
            features: FeatureSet::WithVh,
        }
    }
}

/// Normalize, cluster, vote, split and (when every subset is populated) diagnose.
pub fn partition(records: &[GrowthRecord], cfg: &PartitionConfig, seed: u64) -> Result<SplitAssignment> {
    let features = normalize_features(records, cfg.features)?;
    let runs = repeated_kmeans(&features, cfg.k_clusters, cfg.n_runs, seed)?;
    let labels = majority_vote(&runs, 0)?;
    let ids: Vec<String> = records.iter().map(|r| r.plot_id.clone()).collect();
    let mut split = stratified_split(&ids, &labels, cfg.ratios, derive_seed(seed, 0x5B117))?;
    split.diagnostics = split_diagnostics(records, &split).ok();
    Ok(split)
}
