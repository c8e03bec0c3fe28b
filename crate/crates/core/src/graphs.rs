//! Region credit scores and the three region graphs.
//!
//! A region's score is the share of its distinct visitors who are low-credit.
//! Regions are linked by grid adjacency (distance graph), by co-occurrence in
//! trajectories (interaction graph) and by correlated hourly credit profiles
//! (correlation graph). Every graph is symmetric with a zero diagonal; the
//! self-loops are added by [`normalize_adjacency`].

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::mobility::{RegionGrid, RegionId, UserRecord, SLOTS_PER_DAY};

pub const HOURS: usize = SLOTS_PER_DAY as usize;

/// Width of the per-region input features fed to the region network:
/// score, scaled log visitor count and the hourly credit profile.
pub const REGION_FEATURE_DIM: usize = 2 + HOURS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionCreditTable {
    /// Distinct low-credit visitors per region.
    pub low_visitors: Vec<usize>,
    /// Distinct visitors per region.
    pub visitors: Vec<usize>,
    pub scores: Vec<f64>,
    /// 1 when the score is strictly above the median of visited regions.
    pub labels: Vec<u8>,
    pub visited: Vec<bool>,
    /// Hourly low-credit visitor ratio; hours without visitors carry the
    /// region's overall score.
    pub dynamic: Vec<Vec<f64>>,
    pub median: f64,
    pub mean_score: f64,
}

impl RegionCreditTable {
    pub fn region_count(&self) -> usize {
        self.scores.len()
    }

    pub fn visited_regions(&self) -> Vec<RegionId> {
        (0..self.region_count()).filter(|&r| self.visited[r]).collect()
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Scores regions from the given (training) users only.
pub fn region_credit_scores(users: &[&UserRecord], grid: &RegionGrid) -> Result<RegionCreditTable> {
    if users.is_empty() {
        return Err(Error::Data("region scoring needs at least one user".into()));
    }
    let b = grid.region_count();
    let mut visitors = vec![0usize; b];
    let mut low = vec![0usize; b];
    let mut hour_visitors = vec![[0usize; HOURS]; b];
    let mut hour_low = vec![[0usize; HOURS]; b];

    for u in users {
        let mut regions = BTreeSet::new();
        let mut region_hours = BTreeSet::new();
        for t in &u.trajectories {
            for v in &t.visits {
                if v.region >= b {
                    return Err(Error::Data(format!(
                        "user {}: region {} outside grid of {b}",
                        u.user_id, v.region
                    )));
                }
                regions.insert(v.region);
                region_hours.insert((v.region, v.slot as usize));
            }
        }
        let is_low = u.is_low_credit();
        for r in regions {
            visitors[r] += 1;
            low[r] += usize::from(is_low);
        }
        for (r, h) in region_hours {
            hour_visitors[r][h] += 1;
            hour_low[r][h] += usize::from(is_low);
        }
    }

    let visited: Vec<bool> = visitors.iter().map(|&v| v > 0).collect();
    let mut visited_scores: Vec<f64> = (0..b)
        .filter(|&r| visited[r])
        .map(|r| low[r] as f64 / visitors[r] as f64)
        .collect();
    if visited_scores.is_empty() {
        return Err(Error::Data("no region was visited".into()));
    }
    let mean_score = visited_scores.iter().sum::<f64>() / visited_scores.len() as f64;
    visited_scores.sort_by(f64::total_cmp);
    let med = median(&visited_scores);

    let scores: Vec<f64> = (0..b)
        .map(|r| {
            if visited[r] {
                low[r] as f64 / visitors[r] as f64
            } else {
                mean_score
            }
        })
        .collect();
    let labels = (0..b)
        .map(|r| u8::from(visited[r] && scores[r] > med))
        .collect();
    let dynamic = (0..b)
        .map(|r| {
            (0..HOURS)
                .map(|h| {
                    if hour_visitors[r][h] > 0 {
                        hour_low[r][h] as f64 / hour_visitors[r][h] as f64
                    } else {
                        scores[r]
                    }
                })
                .collect()
        })
        .collect();

    Ok(RegionCreditTable {
        low_visitors: low,
        visitors,
        scores,
        labels,
        visited,
        dynamic,
        median: med,
        mean_score,
    })
}

/// Per-region input features: `[s_r, log(1+|V_r|) / max, dynamic profile]`.
pub fn region_input_features(table: &RegionCreditTable) -> Matrix {
    let b = table.region_count();
    let max_log = table
        .visitors
        .iter()
        .map(|&v| (v as f64).ln_1p())
        .fold(0.0, f64::max);
    let mut h0 = Matrix::zeros(b, REGION_FEATURE_DIM);
    for r in 0..b {
        let row = h0.row_mut(r);
        row[0] = table.scores[r];
        row[1] = if max_log > 0.0 {
            (table.visitors[r] as f64).ln_1p() / max_log
        } else {
            0.0
        };
        row[2..].copy_from_slice(&table.dynamic[r]);
    }
    h0
}

/// Binary 8-neighborhood adjacency.
pub fn build_distance_graph(grid: &RegionGrid) -> Matrix {
    let b = grid.region_count();
    let mut a = Matrix::zeros(b, b);
    for r in 0..b {
        for n in grid.neighbors(r) {
            a.set(r, n, 1.0);
        }
    }
    a
}

/// Pairwise count of trajectories containing both regions, kept where the
/// count reaches `min_cooccurrence`.
pub fn build_interaction_graph(users: &[&UserRecord], b: usize, min_cooccurrence: usize) -> Result<Matrix> {
    if min_cooccurrence == 0 {
        return Err(Error::InvalidArgument("min_cooccurrence must be at least 1".into()));
    }
    let mut counts = vec![0u32; b * b];
    for u in users {
        for t in &u.trajectories {
            let regions: Vec<RegionId> = t.regions().collect::<BTreeSet<_>>().into_iter().collect();
            if let Some(&bad) = regions.iter().find(|&&r| r >= b) {
                return Err(Error::Data(format!("region {bad} outside {b} regions")));
            }
            for (k, &i) in regions.iter().enumerate() {
                for &j in &regions[k + 1..] {
                    counts[i * b + j] += 1;
                }
            }
        }
    }
    let mut a = Matrix::zeros(b, b);
    for i in 0..b {
        for j in i + 1..b {
            let c = counts[i * b + j] as usize;
            if c >= min_cooccurrence {
                a.set(i, j, c as f64);
                a.set(j, i, c as f64);
            }
        }
    }
    Ok(a)
}

/// Pearson correlation; `None` when either series has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Links regions whose hourly credit profiles correlate at `rho_threshold`
/// or more; both regions need at least `min_visits` distinct visitors.
pub fn build_correlation_graph(table: &RegionCreditTable, min_visits: usize, rho_threshold: f64) -> Result<Matrix> {
    if !(rho_threshold > 0.0 && rho_threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "rho threshold {rho_threshold} not in (0, 1)"
        )));
    }
    let b = table.region_count();
    let eligible: Vec<RegionId> = (0..b)
        .filter(|&r| table.visitors[r] >= min_visits && table.visitors[r] > 0)
        .collect();
    let mut a = Matrix::zeros(b, b);
    for (k, &i) in eligible.iter().enumerate() {
        for &j in &eligible[k + 1..] {
            if let Some(rho) = pearson(&table.dynamic[i], &table.dynamic[j]) {
                if rho >= rho_threshold {
                    a.set(i, j, rho);
                    a.set(j, i, rho);
                }
            }
        }
    }
    Ok(a)
}

/// Which matrix supplies the degrees in `D^-1/2 (A + I) D^-1/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DegreeSource {
    /// Row sums of `A + I`; keeps the spectrum inside `[-1, 1]`.
    #[default]
    WithSelfLoops,
    /// Row sums of `A`, with isolated nodes given degree 1.
    AdjacencyOnly,
}

pub fn normalize_adjacency(a: &Matrix, degree: DegreeSource) -> Result<Matrix> {
    let (n, m) = a.shape();
    if n != m {
        return Err(Error::dim("normalize_adjacency", (n, m), (m, n)));
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let s: f64 = a.row(i).iter().sum();
            let d = match degree {
                DegreeSource::WithSelfLoops => s + 1.0,
                DegreeSource::AdjacencyOnly if s > 0.0 => s,
                DegreeSource::AdjacencyOnly => 1.0,
            };
            1.0 / d.sqrt()
        })
        .collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j) + if i == j { 1.0 } else { 0.0 };
            if v != 0.0 {
                out.set(i, j, v * (inv_sqrt[i] * inv_sqrt[j]));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    Distance,
    Interaction,
    Correlation,
}

impl GraphKind {
    pub const ALL: [GraphKind; 3] = [GraphKind::Distance, GraphKind::Interaction, GraphKind::Correlation];

    pub fn name(self) -> &'static str {
        match self {
            GraphKind::Distance => "distance",
            GraphKind::Interaction => "interaction",
            GraphKind::Correlation => "correlation",
        }
    }
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GraphKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GraphKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown graph kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub min_cooccurrence: usize,
    pub rho_threshold: f64,
    pub min_visits: usize,
    pub degree: DegreeSource,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            min_cooccurrence: 3,
            rho_threshold: 0.6,
            min_visits: 5,
            degree: DegreeSource::WithSelfLoops,
        }
    }
}

/// Raw and normalized adjacencies, index-aligned with `kinds`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGraphSet {
    pub kinds: Vec<GraphKind>,
    pub adjacency: Vec<Matrix>,
    pub normalized: Vec<Matrix>,
}

impl RegionGraphSet {
    pub fn build(
        users: &[&UserRecord],
        grid: &RegionGrid,
        table: &RegionCreditTable,
        config: &GraphConfig,
    ) -> Result<Self> {
        let b = grid.region_count();
        let adjacency = vec![
            build_distance_graph(grid),
            build_interaction_graph(users, b, config.min_cooccurrence)?,
            build_correlation_graph(table, config.min_visits, config.rho_threshold)?,
        ];
        let normalized = adjacency
            .iter()
            .map(|a| normalize_adjacency(a, config.degree))
            .collect::<Result<_>>()?;
        Ok(RegionGraphSet {
            kinds: GraphKind::ALL.to_vec(),
            adjacency,
            normalized,
        })
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn region_count(&self) -> usize {
        self.normalized.first().map_or(0, Matrix::rows)
    }

    /// Subset holding only the given kinds, in the given order.
    pub fn only(&self, kinds: &[GraphKind]) -> Result<Self> {
        let mut out = RegionGraphSet {
            kinds: Vec::new(),
            adjacency: Vec::new(),
            normalized: Vec::new(),
        };
        for k in kinds {
            let i = self
                .kinds
                .iter()
                .position(|x| x == k)
                .ok_or_else(|| Error::InvalidArgument(format!("graph set has no {k} graph")))?;
            out.kinds.push(*k);
            out.adjacency.push(self.adjacency[i].clone());
            out.normalized.push(self.normalized[i].clone());
        }
        Ok(out)
    }

    pub fn export(&self, table: &RegionCreditTable) -> GraphExport {
        let graphs = self
            .kinds
            .iter()
            .zip(&self.adjacency)
            .map(|(kind, a)| {
                let mut edges = Vec::new();
                for i in 0..a.rows() {
                    for j in i + 1..a.cols() {
                        let w = a.get(i, j);
                        if w != 0.0 {
                            edges.push((i, j, w));
                        }
                    }
                }
                GraphEdges { kind: *kind, edges }
            })
            .collect();
        GraphExport {
            region_count: self.region_count(),
            graphs,
            regions: table.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdges {
    pub kind: GraphKind,
    /// Upper-triangle triplets `(i, j, weight)` with `i < j`; the graph is
    /// symmetric.
    pub edges: Vec<(usize, usize, f64)>,
}

/// Contents of `graphs.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphExport {
    pub region_count: usize,
    pub graphs: Vec<GraphEdges>,
    pub regions: RegionCreditTable,
}

impl GraphExport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string(self).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// Rebuilds and normalizes every exported graph.
    pub fn to_graph_set(&self, degree: DegreeSource) -> Result<RegionGraphSet> {
        let mut set = RegionGraphSet {
            kinds: Vec::new(),
            adjacency: Vec::new(),
            normalized: Vec::new(),
        };
        for g in &self.graphs {
            let a = self.adjacency(g.kind).expect("kind listed in export");
            set.normalized.push(normalize_adjacency(&a, degree)?);
            set.adjacency.push(a);
            set.kinds.push(g.kind);
        }
        Ok(set)
    }

    /// Rebuilds the dense adjacency of one exported graph.
    pub fn adjacency(&self, kind: GraphKind) -> Option<Matrix> {
        let g = self.graphs.iter().find(|g| g.kind == kind)?;
        let mut a = Matrix::zeros(self.region_count, self.region_count);
        for &(i, j, w) in &g.edges {
            a.set(i, j, w);
            a.set(j, i, w);
        }
        Some(a)
    }
}
