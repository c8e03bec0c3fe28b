//! AUC, the experiment / ablation matrix and report files.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{feature_matrix, fit_logistic, fit_manual_nn, score_region_features};
use crate::graphs::GraphKind;
use crate::mobility::{RegionGrid, UserRecord};
use crate::pipeline::{run_stage_one, run_stage_two, PipelineConfig, Prepared, StageOne};
use crate::tcan::{mean_intra_user_cosine, trajectory_embeddings, EncoderKind};

/// Probability that a random positive outranks a random negative, ties
/// counting one half, from midranks of the pooled scores.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the positive rank sum, with midranks, stays integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1, midrank (i + j + 2) / 2
        let twice_mid = (i + j + 2) as u64;
        let pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        twice_rank_sum += pos * twice_mid;
        i = j + 1;
    }
    let (np, nn) = (n_pos as u64, n_neg as u64);
    // 2U = 2R - np(np + 1)
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(twice_u as f64 / (2 * np * nn) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    ManualLr,
    ManualNn,
    WithoutRen,
    WithoutTen,
    Full,
    OnlyGraph(GraphKind),
    NoRegionRegularizer,
    NoTrajectoryRegularizer,
}

impl Variant {
    /// The five rows of the headline comparison.
    pub const HEADLINE: [Variant; 5] = [
        Variant::ManualLr,
        Variant::ManualNn,
        Variant::WithoutRen,
        Variant::WithoutTen,
        Variant::Full,
    ];

    pub const ALL: [Variant; 10] = [
        Variant::ManualLr,
        Variant::ManualNn,
        Variant::WithoutRen,
        Variant::WithoutTen,
        Variant::Full,
        Variant::OnlyGraph(GraphKind::Distance),
        Variant::OnlyGraph(GraphKind::Interaction),
        Variant::OnlyGraph(GraphKind::Correlation),
        Variant::NoRegionRegularizer,
        Variant::NoTrajectoryRegularizer,
    ];

    pub fn name(self) -> String {
        match self {
            Variant::ManualLr => "manual_lr".into(),
            Variant::ManualNn => "manual_nn".into(),
            Variant::WithoutRen => "without_ren".into(),
            Variant::WithoutTen => "without_ten".into(),
            Variant::Full => "full".into(),
            Variant::OnlyGraph(k) => format!("only_{k}"),
            Variant::NoRegionRegularizer => "no_region_regularizer".into(),
            Variant::NoTrajectoryRegularizer => "no_trajectory_regularizer".into(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub pipeline: PipelineConfig,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub sweep: bool,
    pub region_dims: Vec<usize>,
    pub trajectory_dims: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            pipeline: PipelineConfig::default(),
            seeds: vec![0],
            variants: Variant::ALL.to_vec(),
            sweep: false,
            region_dims: vec![8, 16, 32, 64],
            trajectory_dims: vec![32, 64, 128, 256],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: String,
    pub seed: u64,
    pub auc: Option<f64>,
    pub n_test: usize,
    pub wall_time_s: f64,
    pub split_hash: String,
    pub error: Option<String>,
    /// Extra measurements, e.g. embedding separation.
    pub diagnostics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub region_dim: usize,
    pub trajectory_dim: usize,
    pub seed: u64,
    pub auc: Option<f64>,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

/// A published AUC carried along for comparison only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValue {
    pub method: String,
    pub auc: f64,
    pub protocol_known: bool,
    pub note: String,
}

pub fn reference_values() -> Vec<ReferenceValue> {
    let note = "measured on a proprietary operator dataset with an unreported training protocol; not reproducible here";
    [
        ("full", 0.784),
        ("without_ren", 0.732),
        ("without_ten", 0.723),
        ("manual_nn", 0.707),
        ("manual_lr", 0.701),
        ("manual_rf", 0.695),
        ("no_region_regularizer", 0.775),
        ("no_trajectory_regularizer", 0.756),
    ]
    .into_iter()
    .map(|(m, a)| ReferenceValue {
        method: m.into(),
        auc: a,
        protocol_known: false,
        note: note.into(),
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub runs: Vec<VariantRun>,
    pub sweep: Vec<SweepRun>,
    /// Split hash per seed; every run of a seed consumed this split.
    pub split_hashes: BTreeMap<u64, String>,
    pub reference: Vec<ReferenceValue>,
}

impl EvalReport {
    pub fn runs_of(&self, variant: &str) -> impl Iterator<Item = &VariantRun> {
        let v = variant.to_string();
        self.runs.iter().filter(move |r| r.variant == v)
    }

    /// Mean AUC over successful runs of a variant.
    pub fn mean_auc(&self, variant: &str) -> Option<f64> {
        let aucs: Vec<f64> = self.runs_of(variant).filter_map(|r| r.auc).collect();
        (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
    }

    pub fn mean_diagnostic(&self, variant: &str, key: &str) -> Option<f64> {
        let xs: Vec<f64> = self
            .runs_of(variant)
            .filter_map(|r| r.diagnostics.get(key).copied())
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn extend(&mut self, other: EvalReport) {
        self.runs.extend(other.runs);
        self.sweep.extend(other.sweep);
        self.split_hashes.extend(other.split_hashes);
        if self.reference.is_empty() {
            self.reference = other.reference;
        }
    }
}

pub const DIAG_REGION_SEPARATION: &str = "region_pair_separation";
pub const DIAG_INITIAL_REGION_SEPARATION: &str = "initial_region_pair_separation";
pub const DIAG_TRAJECTORY_COSINE: &str = "intra_user_trajectory_cosine";
pub const DIAG_EPOCHS: &str = "credit_epochs";

struct Outcome {
    auc: f64,
    split_hash: String,
    diagnostics: BTreeMap<String, f64>,
}

/// Caches region-network runs per (graph kinds, regularizer weight, dim).
struct Runner<'p, 'a> {
    prepared: &'p Prepared<'a>,
    config: PipelineConfig,
    stage_one: HashMap<(Vec<GraphKind>, u64, usize), StageOne>,
}

impl<'p, 'a> Runner<'p, 'a> {
    fn stage_one(&mut self, config: &PipelineConfig) -> Result<&StageOne> {
        let key = (
            config.graph_kinds.clone(),
            config.ren.gamma.to_bits(),
            config.ren.embed_dim,
        );
        if !self.stage_one.contains_key(&key) {
            let s = run_stage_one(&self.prepared.train(), &self.prepared.grid, config)?;
            self.stage_one.insert(key.clone(), s);
        }
        Ok(&self.stage_one[&key])
    }

    fn test_auc(&self, probabilities: &[f64]) -> Result<f64> {
        let y: Vec<u8> = self.prepared.test().iter().map(|u| u.label).collect();
        auc(probabilities, &y)
    }

    fn credit_network(&mut self, config: &PipelineConfig, region_features: Option<crate::autodiff::Matrix>) -> Result<Outcome> {
        let (features, mut diagnostics) = match region_features {
            Some(f) => (f, BTreeMap::new()),
            None => {
                let s = self.stage_one(config)?;
                let mut d = BTreeMap::new();
                d.insert(DIAG_REGION_SEPARATION.to_string(), s.ren.report.final_separation);
                d.insert(DIAG_INITIAL_REGION_SEPARATION.to_string(), s.ren.report.initial_separation);
                (s.ren.embeddings.clone(), d)
            }
        };
        let two = run_stage_two(self.prepared, &features, &config.tcan)?;
        let per_user = trajectory_embeddings(&two.tcan.model, &features, &self.prepared.test(), &self.prepared.manual)?;
        diagnostics.insert(DIAG_TRAJECTORY_COSINE.to_string(), mean_intra_user_cosine(&per_user));
        diagnostics.insert(DIAG_EPOCHS.to_string(), two.tcan.report.epochs_run as f64);
        Ok(Outcome {
            auc: self.test_auc(&two.test_probabilities)?,
            split_hash: self.prepared.split.hash(),
            diagnostics,
        })
    }

    fn run(&mut self, variant: Variant) -> Result<Outcome> {
        let base = self.config.clone();
        let p = self.prepared;
        match variant {
            Variant::ManualLr | Variant::ManualNn => {
                let train = p.train();
                let x = feature_matrix(&p.manual, &p.split.train)?;
                let y: Vec<u8> = train.iter().map(|u| u.label).collect();
                let xt = feature_matrix(&p.manual, &p.split.test)?;
                let probs = if variant == Variant::ManualLr {
                    fit_logistic(&x, &y, &base.logistic)?.predict(&xt)?
                } else {
                    let xv = feature_matrix(&p.manual, &p.split.validation)?;
                    let yv: Vec<u8> = p.validation().iter().map(|u| u.label).collect();
                    fit_manual_nn(&x, &y, &xv, &yv, &base.mlp)?.predict(&xt)?
                };
                Ok(Outcome {
                    auc: self.test_auc(&probs)?,
                    split_hash: p.split.hash(),
                    diagnostics: BTreeMap::new(),
                })
            }
            Variant::WithoutRen => {
                let train = p.train();
                let table = crate::graphs::region_credit_scores(&train, &p.grid)?;
                self.credit_network(&base, Some(score_region_features(&table)))
            }
            Variant::WithoutTen => {
                let mut c = base;
                c.tcan.encoder = EncoderKind::MeanPool;
                self.credit_network(&c, None)
            }
            Variant::Full => self.credit_network(&base, None),
            Variant::OnlyGraph(k) => {
                let mut c = base;
                c.graph_kinds = vec![k];
                self.credit_network(&c, None)
            }
            Variant::NoRegionRegularizer => {
                let mut c = base;
                c.ren.gamma = 0.0;
                self.credit_network(&c, None)
            }
            Variant::NoTrajectoryRegularizer => {
                let mut c = base;
                c.tcan.gamma = 0.0;
                self.credit_network(&c, None)
            }
        }
    }
}

fn seconds(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Runs every configured variant (and optionally the dimension sweep) for
/// every seed. Each seed draws one split that all of its runs share. A
/// failing run is recorded and the matrix moves on.
pub fn run_experiment_matrix(users: &[UserRecord], grid: &RegionGrid, config: &ExperimentConfig) -> Result<EvalReport> {
    let mut report = EvalReport {
        reference: reference_values(),
        ..EvalReport::default()
    };
    for &seed in &config.seeds {
        let pc = config.pipeline.seeded(seed);
        let prepared = Prepared::new(users, *grid, &pc)?;
        let hash = prepared.split.hash();
        report.split_hashes.insert(seed, hash.clone());
        let n_test = prepared.split.test.len();
        let mut runner = Runner {
            prepared: &prepared,
            config: pc.clone(),
            stage_one: HashMap::new(),
        };
        for &v in &config.variants {
            let t = Instant::now();
            let res = runner.run(v);
            let wall_time_s = seconds(t);
            let run = match res {
                Ok(o) => {
                    if o.split_hash != hash {
                        return Err(Error::Data(format!("variant {v} consumed a different split")));
                    }
                    VariantRun {
                        variant: v.name(),
                        seed,
                        auc: Some(o.auc),
                        n_test,
                        wall_time_s,
                        split_hash: o.split_hash,
                        error: None,
                        diagnostics: o.diagnostics,
                    }
                }
                Err(e) => VariantRun {
                    variant: v.name(),
                    seed,
                    auc: None,
                    n_test,
                    wall_time_s,
                    split_hash: hash.clone(),
                    error: Some(e.to_string()),
                    diagnostics: BTreeMap::new(),
                },
            };
            report.runs.push(run);
        }
        if config.sweep {
            for &dr in &config.region_dims {
                for &dt in &config.trajectory_dims {
                    let mut c = pc.clone();
                    c.ren.embed_dim = dr;
                    c.tcan.trajectory_dim = dt;
                    let t = Instant::now();
                    let res = runner.credit_network(&c, None);
                    report.sweep.push(SweepRun {
                        region_dim: dr,
                        trajectory_dim: dt,
                        seed,
                        auc: res.as_ref().ok().map(|o| o.auc),
                        wall_time_s: seconds(t),
                        error: res.err().map(|e| e.to_string()),
                    });
                }
            }
        }
    }
    Ok(report)
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const SWEEP_CSV: &str = "sweep.csv";

fn opt(v: Option<f64>) -> String {
    v.map(|a| a.to_string()).unwrap_or_default()
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("variant,auc,seed,wall_time_s\n");
    for r in &report.runs {
        writeln!(out, "{},{},{},{}", r.variant, opt(r.auc), r.seed, r.wall_time_s).unwrap();
    }
    out
}

pub fn sweep_csv(report: &EvalReport) -> String {
    let mut out = String::from("region_dim,trajectory_dim,seed,auc,wall_time_s\n");
    for r in &report.sweep {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.region_dim,
            r.trajectory_dim,
            r.seed,
            opt(r.auc),
            r.wall_time_s
        )
        .unwrap();
    }
    out
}

/// Writes `report.json`, `report.csv` and `sweep.csv` into `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(REPORT_JSON);
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Json {
        path: p.clone(),
        source: e,
    })?;
    fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    let p = dir.join(REPORT_CSV);
    fs::write(&p, report_csv(report)).map_err(|e| Error::io(&p, e))?;
    let p = dir.join(SWEEP_CSV);
    fs::write(&p, sweep_csv(report)).map_err(|e| Error::io(&p, e))
}

pub fn read_report(dir: &Path) -> Result<EvalReport> {
    let p = dir.join(REPORT_JSON);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: p, source: e })
}
