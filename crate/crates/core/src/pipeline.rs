//! End-to-end wiring: split, region scoring and graphs from training users,
//! region network, credit network and test scoring.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::Result;
use crate::features::{
    manual_feature_table, standardized_manual_table, LogisticConfig, ManualFeatures, MlpConfig,
    Standardizer, MANUAL_DIM,
};
use crate::graphs::{
    region_credit_scores, region_input_features, GraphConfig, GraphKind, RegionCreditTable,
    RegionGraphSet,
};
use crate::mobility::{split_users, DatasetSplit, RegionGrid, SplitFractions, UserId, UserRecord};
use crate::ren::{train_ren, RenConfig, RenModel, RenOutcome};
use crate::tcan::{score_users, train_tcan, ManualTable, TcanConfig, TcanModel, TcanOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub split: SplitFractions,
    pub graph: GraphConfig,
    pub graph_kinds: Vec<GraphKind>,
    pub ren: RenConfig,
    pub tcan: TcanConfig,
    pub logistic: LogisticConfig,
    pub mlp: MlpConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            split: SplitFractions::default(),
            graph: GraphConfig::default(),
            graph_kinds: GraphKind::ALL.to_vec(),
            ren: RenConfig::default(),
            tcan: TcanConfig::default(),
            logistic: LogisticConfig::default(),
            mlp: MlpConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Copy with `seed` propagated to every seeded component.
    pub fn seeded(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.ren.seed = seed;
        c.tcan.seed = seed;
        c.mlp.seed = seed;
        c
    }
}

/// Split plus standardized manual features.
#[derive(Debug, Clone)]
pub struct Prepared<'a> {
    pub users: &'a [UserRecord],
    pub grid: RegionGrid,
    pub split: DatasetSplit,
    pub raw_manual: BTreeMap<UserId, ManualFeatures>,
    pub standardizer: Standardizer,
    pub manual: ManualTable,
}

impl<'a> Prepared<'a> {
    pub fn new(users: &'a [UserRecord], grid: RegionGrid, config: &PipelineConfig) -> Result<Self> {
        let split = split_users(users, config.split, config.seed)?;
        Self::with_split(users, grid, split)
    }

    /// Uses a precomputed split instead of drawing one.
    pub fn with_split(users: &'a [UserRecord], grid: RegionGrid, split: DatasetSplit) -> Result<Self> {
        let raw_manual = manual_feature_table(users, &grid)?;
        let (standardizer, manual) = standardized_manual_table(&raw_manual, &split.train)?;
        Ok(Prepared {
            users,
            grid,
            split,
            raw_manual,
            standardizer,
            manual,
        })
    }

    pub fn train(&self) -> Vec<&'a UserRecord> {
        self.split.train_users(self.users)
    }

    pub fn validation(&self) -> Vec<&'a UserRecord> {
        self.split.validation_users(self.users)
    }

    pub fn test(&self) -> Vec<&'a UserRecord> {
        self.split.test_users(self.users)
    }
}

/// Region credit table and graphs from training users only.
pub fn region_stage_inputs(
    train: &[&UserRecord],
    grid: &RegionGrid,
    config: &PipelineConfig,
) -> Result<(RegionCreditTable, RegionGraphSet)> {
    let table = region_credit_scores(train, grid)?;
    let graphs = RegionGraphSet::build(train, grid, &table, &config.graph)?.only(&config.graph_kinds)?;
    Ok((table, graphs))
}

#[derive(Debug, Clone)]
pub struct StageOne {
    pub table: RegionCreditTable,
    pub graphs: RegionGraphSet,
    pub inputs: Matrix,
    pub ren: RenOutcome,
}

pub fn run_stage_one(train: &[&UserRecord], grid: &RegionGrid, config: &PipelineConfig) -> Result<StageOne> {
    let (table, graphs) = region_stage_inputs(train, grid, config)?;
    let inputs = region_input_features(&table);
    let model = RenModel::new(inputs.cols(), graphs.len(), config.ren.clone());
    let ren = train_ren(model, &graphs, &inputs, &table)?;
    Ok(StageOne {
        table,
        graphs,
        inputs,
        ren,
    })
}

#[derive(Debug, Clone)]
pub struct StageTwo {
    pub tcan: TcanOutcome,
    /// Test-user probabilities, in split order.
    pub test_probabilities: Vec<f64>,
}

/// Trains the credit network on `region_features` and scores the test users.
pub fn run_stage_two(prepared: &Prepared<'_>, region_features: &Matrix, config: &TcanConfig) -> Result<StageTwo> {
    let model = TcanModel::new(region_features.cols(), MANUAL_DIM, config.clone());
    let tcan = train_tcan(
        model,
        region_features,
        &prepared.manual,
        &prepared.train(),
        &prepared.validation(),
    )?;
    let test_probabilities = score_users(&tcan.model, region_features, &prepared.test(), &prepared.manual)?;
    Ok(StageTwo {
        tcan,
        test_probabilities,
    })
}

/// Both stages with the full configuration.
#[derive(Debug, Clone)]
pub struct TrainedPipeline {
    pub stage_one: StageOne,
    pub stage_two: StageTwo,
}

pub fn train_pipeline(prepared: &Prepared<'_>, config: &PipelineConfig) -> Result<TrainedPipeline> {
    let stage_one = run_stage_one(&prepared.train(), &prepared.grid, config)?;
    let stage_two = run_stage_two(prepared, &stage_one.ren.embeddings, &config.tcan)?;
    Ok(TrainedPipeline {
        stage_one,
        stage_two,
    })
}
