//! Flat `key=value` run configuration.
//!
//! One assignment per line, `#` starts a comment, keys are dotted
//! (`ren.gamma=0.1`). Unknown keys and repeated keys are rejected. Every
//! key has a default, so an empty file is a valid configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::{ExperimentConfig, Variant};
use crate::graphs::{DegreeSource, GraphKind};
use crate::mobility::SynthConfig;
use crate::pipeline::PipelineConfig;
use crate::ren::SimilarityForm;
use crate::tcan::EncoderKind;

/// `(key, description)` for every accepted key, in help order.
pub const KEYS: &[(&str, &str)] = &[
    ("data.dir", "dataset directory (trajectories.csv, labels.csv, grid.txt)"),
    ("out.dir", "directory that receives every output file"),
    ("seed", "master seed for data generation, splitting and initialization"),
    ("synth.users", "number of synthetic users"),
    ("synth.low_credit_fraction", "share of low-credit users, in [0, 1]"),
    ("synth.grid_rows", "grid rows"),
    ("synth.grid_cols", "grid columns"),
    ("synth.cell_km", "cell side length in km"),
    ("synth.days", "observation days per user"),
    ("synth.signal_strength", "how strongly visited regions follow the label, in [0, 1]"),
    ("synth.manual_feature_signal", "how strongly movement volume follows the label, in [0, 1]"),
    ("split.train", "training share of users"),
    ("split.validation", "validation share of users; the rest is test"),
    ("graph.min_cooccurrence", "users needed in both regions to link them in the interaction graph"),
    ("graph.rho_threshold", "correlation needed to link regions in the correlation graph"),
    ("graph.min_visits", "visits a region needs before it enters the correlation graph"),
    ("graph.degree", "degree source for adjacency normalization: with_self_loops | adjacency_only"),
    ("graph.kinds", "graphs merged by the region network: distance,interaction,correlation"),
    ("ren.embed_dim", "region embedding size"),
    ("ren.gamma", "weight of the region similarity regularizer"),
    ("ren.delta", "score gap that makes two regions dissimilar; auto = half the interquartile range"),
    ("ren.pairs_per_anchor", "similar/dissimilar pairs sampled per region"),
    ("ren.similarity_form", "region similarity loss: verbatim | logistic"),
    ("ren.learning_rate", "Adam step size for the region network"),
    ("ren.max_epochs", "region network epoch cap"),
    ("ren.patience", "epochs without validation improvement before stopping"),
    ("ren.validation_fraction", "share of visited regions held out for early stopping"),
    ("tcan.hidden_dim", "GRU hidden size"),
    ("tcan.trajectory_dim", "trajectory embedding size"),
    ("tcan.head_hidden", "hidden units of the prediction head"),
    ("tcan.gamma", "weight of the trajectory similarity regularizer"),
    ("tcan.batch_size", "users per minibatch"),
    ("tcan.max_epochs", "credit network epoch cap"),
    ("tcan.patience", "epochs without validation improvement before stopping"),
    ("tcan.learning_rate", "Adam step size for the credit network"),
    ("tcan.pairs_per_user", "intra-user trajectory pairs sampled per user per step"),
    ("tcan.encoder", "trajectory encoder: gru | mean_pool"),
    ("baseline.lr_l2", "L2 penalty of the logistic regression baseline"),
    ("baseline.lr_learning_rate", "gradient descent step of the logistic regression baseline"),
    ("baseline.lr_max_iters", "iteration cap of the logistic regression baseline"),
    ("baseline.lr_grad_tol", "gradient norm at which logistic regression stops"),
    ("baseline.mlp_hidden", "hidden units of the MLP baseline"),
    ("baseline.mlp_learning_rate", "Adam step size of the MLP baseline"),
    ("baseline.mlp_max_epochs", "epoch cap of the MLP baseline"),
    ("baseline.mlp_patience", "epochs without validation improvement before the MLP stops"),
    ("eval.seeds", "comma-separated seeds for evaluate/ablate; empty uses `seed`"),
    ("eval.variants", "comma-separated variants run by ablate"),
    ("eval.sweep", "run the embedding-size sweep during ablate (true | false)"),
    ("eval.region_dims", "region embedding sizes of the sweep"),
    ("eval.trajectory_dims", "trajectory embedding sizes of the sweep"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// `synth.seed` is ignored; generation uses `seed`.
    pub synth: SynthConfig,
    /// Component seeds are ignored; see [`RunConfig::pipeline_config`].
    pub pipeline: PipelineConfig,
    pub eval_seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub sweep: bool,
    pub region_dims: Vec<usize>,
    pub trajectory_dims: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let exp = ExperimentConfig::default();
        RunConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            seed: 0,
            synth: SynthConfig::default(),
            pipeline: exp.pipeline,
            eval_seeds: Vec::new(),
            variants: exp.variants,
            sweep: exp.sweep,
            region_dims: exp.region_dims,
            trajectory_dims: exp.trajectory_dims,
        }
    }
}

fn bad(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn scalar<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, format!("cannot parse `{v}`")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| scalar(key, s.trim())).collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn degree_name(d: DegreeSource) -> &'static str {
    match d {
        DegreeSource::WithSelfLoops => "with_self_loops",
        DegreeSource::AdjacencyOnly => "adjacency_only",
    }
}

fn similarity_name(s: SimilarityForm) -> &'static str {
    match s {
        SimilarityForm::Verbatim => "verbatim",
        SimilarityForm::Logistic => "logistic",
    }
}

fn encoder_name(e: EncoderKind) -> &'static str {
    match e {
        EncoderKind::Gru => "gru",
        EncoderKind::MeanPool => "mean_pool",
    }
}

impl RunConfig {
    /// Parses `text` on top of the defaults and validates the result.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(bad(
                    &format!("{}:{}", origin.display(), i + 1),
                    format!("expected key=value, got `{line}`"),
                ));
            };
            let k = k.trim();
            if let Some(prev) = seen.insert(k.to_string(), i + 1) {
                return Err(bad(k, format!("set twice (lines {prev} and {})", i + 1)));
            }
            cfg.set(k, v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| bad("--config", format!("{}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let p = &mut self.pipeline;
        match key {
            "data.dir" => self.data_dir = PathBuf::from(v),
            "out.dir" => self.out_dir = PathBuf::from(v),
            "seed" => self.seed = scalar(key, v)?,
            "synth.users" => self.synth.users = scalar(key, v)?,
            "synth.low_credit_fraction" => self.synth.low_credit_fraction = scalar(key, v)?,
            "synth.grid_rows" => self.synth.grid_rows = scalar(key, v)?,
            "synth.grid_cols" => self.synth.grid_cols = scalar(key, v)?,
            "synth.cell_km" => self.synth.cell_km = scalar(key, v)?,
            "synth.days" => self.synth.days = scalar(key, v)?,
            "synth.signal_strength" => self.synth.signal_strength = scalar(key, v)?,
            "synth.manual_feature_signal" => self.synth.manual_feature_signal = scalar(key, v)?,
            "split.train" => p.split.train = scalar(key, v)?,
            "split.validation" => p.split.validation = scalar(key, v)?,
            "graph.min_cooccurrence" => p.graph.min_cooccurrence = scalar(key, v)?,
            "graph.rho_threshold" => p.graph.rho_threshold = scalar(key, v)?,
            "graph.min_visits" => p.graph.min_visits = scalar(key, v)?,
            "graph.degree" => {
                p.graph.degree = match v {
                    "with_self_loops" => DegreeSource::WithSelfLoops,
                    "adjacency_only" => DegreeSource::AdjacencyOnly,
                    _ => return Err(bad(key, format!("unknown degree source `{v}`"))),
                }
            }
            "graph.kinds" => {
                p.graph_kinds = v
                    .split(',')
                    .map(|s| GraphKind::from_str(s.trim()).map_err(|e| bad(key, e.to_string())))
                    .collect::<Result<_>>()?
            }
            "ren.embed_dim" => p.ren.embed_dim = scalar(key, v)?,
            "ren.gamma" => p.ren.gamma = scalar(key, v)?,
            "ren.delta" => p.ren.delta = if v == "auto" { None } else { Some(scalar(key, v)?) },
            "ren.pairs_per_anchor" => p.ren.pairs_per_anchor = scalar(key, v)?,
            "ren.similarity_form" => {
                p.ren.similarity_form = match v {
                    "verbatim" => SimilarityForm::Verbatim,
                    "logistic" => SimilarityForm::Logistic,
                    _ => return Err(bad(key, format!("unknown similarity form `{v}`"))),
                }
            }
            "ren.learning_rate" => p.ren.learning_rate = scalar(key, v)?,
            "ren.max_epochs" => p.ren.max_epochs = scalar(key, v)?,
            "ren.patience" => p.ren.patience = scalar(key, v)?,
            "ren.validation_fraction" => p.ren.validation_fraction = scalar(key, v)?,
            "tcan.hidden_dim" => p.tcan.hidden_dim = scalar(key, v)?,
            "tcan.trajectory_dim" => p.tcan.trajectory_dim = scalar(key, v)?,
            "tcan.head_hidden" => p.tcan.head_hidden = scalar(key, v)?,
            "tcan.gamma" => p.tcan.gamma = scalar(key, v)?,
            "tcan.batch_size" => p.tcan.batch_size = scalar(key, v)?,
            "tcan.max_epochs" => p.tcan.max_epochs = scalar(key, v)?,
            "tcan.patience" => p.tcan.patience = scalar(key, v)?,
            "tcan.learning_rate" => p.tcan.learning_rate = scalar(key, v)?,
            "tcan.pairs_per_user" => p.tcan.pairs_per_user = scalar(key, v)?,
            "tcan.encoder" => {
                p.tcan.encoder = match v {
                    "gru" => EncoderKind::Gru,
                    "mean_pool" => EncoderKind::MeanPool,
                    _ => return Err(bad(key, format!("unknown encoder `{v}`"))),
                }
            }
            "baseline.lr_l2" => p.logistic.l2 = scalar(key, v)?,
            "baseline.lr_learning_rate" => p.logistic.learning_rate = scalar(key, v)?,
            "baseline.lr_max_iters" => p.logistic.max_iters = scalar(key, v)?,
            "baseline.lr_grad_tol" => p.logistic.grad_tol = scalar(key, v)?,
            "baseline.mlp_hidden" => p.mlp.hidden = scalar(key, v)?,
            "baseline.mlp_learning_rate" => p.mlp.learning_rate = scalar(key, v)?,
            "baseline.mlp_max_epochs" => p.mlp.max_epochs = scalar(key, v)?,
            "baseline.mlp_patience" => p.mlp.patience = scalar(key, v)?,
            "eval.seeds" => self.eval_seeds = list(key, v)?,
            "eval.variants" => {
                self.variants = v
                    .split(',')
                    .map(|s| Variant::from_str(s.trim()).map_err(|e| bad(key, e.to_string())))
                    .collect::<Result<_>>()?
            }
            "eval.sweep" => self.sweep = scalar(key, v)?,
            "eval.region_dims" => self.region_dims = list(key, v)?,
            "eval.trajectory_dims" => self.trajectory_dims = list(key, v)?,
            _ => return Err(bad(key, "unknown key")),
        }
        Ok(())
    }

    /// Current value of `key` in the syntax [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let p = &self.pipeline;
        let s = match key {
            "data.dir" => self.data_dir.display().to_string(),
            "out.dir" => self.out_dir.display().to_string(),
            "seed" => self.seed.to_string(),
            "synth.users" => self.synth.users.to_string(),
            "synth.low_credit_fraction" => self.synth.low_credit_fraction.to_string(),
            "synth.grid_rows" => self.synth.grid_rows.to_string(),
            "synth.grid_cols" => self.synth.grid_cols.to_string(),
            "synth.cell_km" => self.synth.cell_km.to_string(),
            "synth.days" => self.synth.days.to_string(),
            "synth.signal_strength" => self.synth.signal_strength.to_string(),
            "synth.manual_feature_signal" => self.synth.manual_feature_signal.to_string(),
            "split.train" => p.split.train.to_string(),
            "split.validation" => p.split.validation.to_string(),
            "graph.min_cooccurrence" => p.graph.min_cooccurrence.to_string(),
            "graph.rho_threshold" => p.graph.rho_threshold.to_string(),
            "graph.min_visits" => p.graph.min_visits.to_string(),
            "graph.degree" => degree_name(p.graph.degree).to_string(),
            "graph.kinds" => join(&p.graph_kinds),
            "ren.embed_dim" => p.ren.embed_dim.to_string(),
            "ren.gamma" => p.ren.gamma.to_string(),
            "ren.delta" => p.ren.delta.map_or("auto".to_string(), |d| d.to_string()),
            "ren.pairs_per_anchor" => p.ren.pairs_per_anchor.to_string(),
            "ren.similarity_form" => similarity_name(p.ren.similarity_form).to_string(),
            "ren.learning_rate" => p.ren.learning_rate.to_string(),
            "ren.max_epochs" => p.ren.max_epochs.to_string(),
            "ren.patience" => p.ren.patience.to_string(),
            "ren.validation_fraction" => p.ren.validation_fraction.to_string(),
            "tcan.hidden_dim" => p.tcan.hidden_dim.to_string(),
            "tcan.trajectory_dim" => p.tcan.trajectory_dim.to_string(),
            "tcan.head_hidden" => p.tcan.head_hidden.to_string(),
            "tcan.gamma" => p.tcan.gamma.to_string(),
            "tcan.batch_size" => p.tcan.batch_size.to_string(),
            "tcan.max_epochs" => p.tcan.max_epochs.to_string(),
            "tcan.patience" => p.tcan.patience.to_string(),
            "tcan.learning_rate" => p.tcan.learning_rate.to_string(),
            "tcan.pairs_per_user" => p.tcan.pairs_per_user.to_string(),
            "tcan.encoder" => encoder_name(p.tcan.encoder).to_string(),
            "baseline.lr_l2" => p.logistic.l2.to_string(),
            "baseline.lr_learning_rate" => p.logistic.learning_rate.to_string(),
            "baseline.lr_max_iters" => p.logistic.max_iters.to_string(),
            "baseline.lr_grad_tol" => p.logistic.grad_tol.to_string(),
            "baseline.mlp_hidden" => p.mlp.hidden.to_string(),
            "baseline.mlp_learning_rate" => p.mlp.learning_rate.to_string(),
            "baseline.mlp_max_epochs" => p.mlp.max_epochs.to_string(),
            "baseline.mlp_patience" => p.mlp.patience.to_string(),
            "eval.seeds" => join(&self.eval_seeds),
            "eval.variants" => join(&self.variants),
            "eval.sweep" => self.sweep.to_string(),
            "eval.region_dims" => join(&self.region_dims),
            "eval.trajectory_dims" => join(&self.trajectory_dims),
            _ => return None,
        };
        Some(s)
    }

    /// Every key with its resolved value.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        KEYS.iter()
            .map(|(k, _)| (k.to_string(), self.get(k).expect("registered key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        fn check(key: &str, ok: bool, msg: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(bad(key, msg))
            }
        }
        let pos = |key: &str, x: usize| check(key, x > 0, "must be at least 1");
        let rate = |key: &str, x: f64| check(key, x.is_finite() && x > 0.0, "must be a positive number");
        let weight = |key: &str, x: f64| check(key, x.is_finite() && x >= 0.0, "must be a non-negative number");
        let open_unit = |key: &str, x: f64| check(key, x > 0.0 && x < 1.0, "must lie strictly between 0 and 1");

        check("data.dir", !self.data_dir.as_os_str().is_empty(), "must not be empty")?;
        check("out.dir", !self.out_dir.as_os_str().is_empty(), "must not be empty")?;
        self.synth.validate()?;

        let p = &self.pipeline;
        open_unit("split.train", p.split.train)?;
        check(
            "split.validation",
            (0.0..1.0).contains(&p.split.validation),
            "must lie in [0, 1)",
        )?;
        check(
            "split.validation",
            p.split.train + p.split.validation < 1.0,
            "split.train + split.validation must leave a test share",
        )?;

        pos("graph.min_cooccurrence", p.graph.min_cooccurrence)?;
        check(
            "graph.rho_threshold",
            (-1.0..=1.0).contains(&p.graph.rho_threshold),
            "must lie in [-1, 1]",
        )?;
        pos("graph.min_visits", p.graph.min_visits)?;
        check("graph.kinds", !p.graph_kinds.is_empty(), "needs at least one graph")?;
        let mut kinds = p.graph_kinds.clone();
        kinds.sort_by_key(|k| k.name());
        kinds.dedup();
        check("graph.kinds", kinds.len() == p.graph_kinds.len(), "lists a graph twice")?;

        pos("ren.embed_dim", p.ren.embed_dim)?;
        weight("ren.gamma", p.ren.gamma)?;
        if let Some(d) = p.ren.delta {
            rate("ren.delta", d)?;
        }
        pos("ren.pairs_per_anchor", p.ren.pairs_per_anchor)?;
        rate("ren.learning_rate", p.ren.learning_rate)?;
        pos("ren.max_epochs", p.ren.max_epochs)?;
        pos("ren.patience", p.ren.patience)?;
        open_unit("ren.validation_fraction", p.ren.validation_fraction)?;

        pos("tcan.hidden_dim", p.tcan.hidden_dim)?;
        pos("tcan.trajectory_dim", p.tcan.trajectory_dim)?;
        pos("tcan.head_hidden", p.tcan.head_hidden)?;
        weight("tcan.gamma", p.tcan.gamma)?;
        pos("tcan.batch_size", p.tcan.batch_size)?;
        pos("tcan.max_epochs", p.tcan.max_epochs)?;
        pos("tcan.patience", p.tcan.patience)?;
        rate("tcan.learning_rate", p.tcan.learning_rate)?;
        pos("tcan.pairs_per_user", p.tcan.pairs_per_user)?;

        weight("baseline.lr_l2", p.logistic.l2)?;
        rate("baseline.lr_learning_rate", p.logistic.learning_rate)?;
        pos("baseline.lr_max_iters", p.logistic.max_iters)?;
        rate("baseline.lr_grad_tol", p.logistic.grad_tol)?;
        pos("baseline.mlp_hidden", p.mlp.hidden)?;
        rate("baseline.mlp_learning_rate", p.mlp.learning_rate)?;
        pos("baseline.mlp_max_epochs", p.mlp.max_epochs)?;
        pos("baseline.mlp_patience", p.mlp.patience)?;

        check("eval.variants", !self.variants.is_empty(), "needs at least one variant")?;
        check(
            "eval.region_dims",
            !self.region_dims.is_empty() && self.region_dims.iter().all(|&d| d > 0),
            "needs positive sizes",
        )?;
        check(
            "eval.trajectory_dims",
            !self.trajectory_dims.is_empty() && self.trajectory_dims.iter().all(|&d| d > 0),
            "needs positive sizes",
        )
    }

    /// Generator settings with the master seed.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    /// Pipeline settings with the master seed propagated.
    pub fn pipeline_config(&self) -> PipelineConfig {
        self.pipeline.seeded(self.seed)
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            pipeline: self.pipeline_config(),
            seeds: if self.eval_seeds.is_empty() {
                vec![self.seed]
            } else {
                self.eval_seeds.clone()
            },
            variants: self.variants.clone(),
            sweep: self.sweep,
            region_dims: self.region_dims.clone(),
            trajectory_dims: self.trajectory_dims.clone(),
        }
    }

    /// Key reference with defaults, for `--help`.
    pub fn help_text() -> String {
        let d = RunConfig::default();
        let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::from("Config keys (key=value, one per line, # comments):\n");
        for (k, desc) in KEYS {
            let def = d.get(k).expect("registered key");
            let def = if def.is_empty() { "(empty)".to_string() } else { def };
            out.push_str(&format!("  {k:<width$}  {desc} [default: {def}]\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips_through_get_and_set() {
        let d = RunConfig::default();
        for (k, _) in KEYS {
            let v = d.get(k).unwrap_or_else(|| panic!("{k} has no getter"));
            let mut c = RunConfig::default();
            c.set(k, &v).unwrap_or_else(|e| panic!("{k}={v}: {e}"));
            assert_eq!(c, d, "{k}");
        }
    }

    #[test]
    fn parse_applies_values_and_comments() {
        let c = RunConfig::parse(
            "# comment\nren.gamma = 0.25\n\ntcan.encoder=mean_pool # inline\nren.delta=0.1\neval.seeds=1,2\n",
            Path::new("x.cfg"),
        )
        .unwrap();
        assert_eq!(c.pipeline.ren.gamma, 0.25);
        assert_eq!(c.pipeline.tcan.encoder, EncoderKind::MeanPool);
        assert_eq!(c.pipeline.ren.delta, Some(0.1));
        assert_eq!(c.experiment_config().seeds, vec![1, 2]);
    }

    fn key_of(e: Error) -> String {
        match e {
            Error::Config { key, .. } => key,
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn rejects_unknown_repeated_and_out_of_range_keys() {
        let p = Path::new("x.cfg");
        assert_eq!(key_of(RunConfig::parse("ren.gama=0.1", p).unwrap_err()), "ren.gama");
        assert_eq!(key_of(RunConfig::parse("seed=1\nseed=2", p).unwrap_err()), "seed");
        assert_eq!(key_of(RunConfig::parse("split.train=1.5", p).unwrap_err()), "split.train");
        assert_eq!(
            key_of(RunConfig::parse("synth.low_credit_fraction=1.5", p).unwrap_err()),
            "synth.low_credit_fraction"
        );
        assert_eq!(key_of(RunConfig::parse("tcan.batch_size=0", p).unwrap_err()), "tcan.batch_size");
        assert_eq!(key_of(RunConfig::parse("ren.gamma=-1", p).unwrap_err()), "ren.gamma");
        assert_eq!(key_of(RunConfig::parse("graph.kinds=distance,distance", p).unwrap_err()), "graph.kinds");
        assert_eq!(key_of(RunConfig::parse("eval.variants=best", p).unwrap_err()), "eval.variants");
        assert!(matches!(RunConfig::parse("nonsense", p), Err(Error::Config { .. })));
    }

    #[test]
    fn seed_propagates_to_components() {
        let mut c = RunConfig::default();
        c.seed = 9;
        assert_eq!(c.synth_config().seed, 9);
        let p = c.pipeline_config();
        assert_eq!((p.seed, p.ren.seed, p.tcan.seed, p.mlp.seed), (9, 9, 9, 9));
        assert_eq!(c.experiment_config().seeds, vec![9]);
    }

    #[test]
    fn help_lists_every_key_with_default() {
        let h = RunConfig::help_text();
        for (k, _) in KEYS {
            assert!(h.contains(k), "{k}");
        }
        assert!(h.contains("[default: 0.1]"));
    }
}
