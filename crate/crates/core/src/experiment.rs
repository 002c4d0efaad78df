//! Directional comparison of teacher, baseline student and PPID student at
//! desk scale: each seed gets its own synthetic train/test split.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distill::DistillConfig;
use crate::error::Result;
use crate::metrics::MetricsReport;
use crate::seed::mix;
use crate::train::{evaluate_params, train_student_on, train_teacher_on, TrainConfig};

const STREAM_TRAIN_DATA: u64 = 30;
const STREAM_TEST_DATA: u64 = 31;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train_count: usize,
    pub test_count: usize,
    /// Shared training settings; `seed` and `distill` are overridden per run.
    pub train: TrainConfig,
    pub distill: DistillConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train_count: 200,
            test_count: 40,
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub teacher: MetricsReport,
    pub baseline: MetricsReport,
    pub ppid: MetricsReport,
    pub seconds: f64,
}

impl SeedResult {
    pub fn ppid_beats_baseline(&self) -> bool {
        self.ppid.whole.sad < self.baseline.whole.sad
    }
}

/// Synthetic train and test sets for one seed.
pub fn datasets(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let size = cfg.train.image_size;
    Ok((
        Dataset::generate(cfg.train_count, size, mix(seed, STREAM_TRAIN_DATA))?,
        Dataset::generate(cfg.test_count, size, mix(seed, STREAM_TEST_DATA))?,
    ))
}

/// Trains the teacher, the baseline student and the PPID student for one
/// seed and scores all three on the held-out split.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedResult> {
    let start = Instant::now();
    let (train, test) = datasets(cfg, seed)?;
    let base = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let teacher = train_teacher_on(&base, &train, None)?.params;
    let teacher_report = evaluate_params(&teacher, &test)?;
    log::info!("seed {seed}: teacher SAD {:.4}", teacher_report.whole.sad);

    let baseline_cfg = TrainConfig {
        distill: DistillConfig::baseline(),
        ..base.clone()
    };
    let baseline = train_student_on(&baseline_cfg, &teacher, &train, None)?.params;
    let baseline_report = evaluate_params(&baseline, &test)?;
    log::info!("seed {seed}: baseline SAD {:.4}", baseline_report.whole.sad);

    let ppid_cfg = TrainConfig {
        distill: cfg.distill.clone(),
        ..base
    };
    let ppid = train_student_on(&ppid_cfg, &teacher, &train, None)?.params;
    let ppid_report = evaluate_params(&ppid, &test)?;
    log::info!("seed {seed}: ppid SAD {:.4}", ppid_report.whole.sad);

    Ok(SeedResult {
        seed,
        teacher: teacher_report,
        baseline: baseline_report,
        ppid: ppid_report,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: Vec<SeedResult>,
    pub teacher_mean_sad: f64,
    pub baseline_mean_sad: f64,
    pub ppid_mean_sad: f64,
    /// Seeds where the PPID student beats the baseline on SAD.
    pub ppid_wins: usize,
    pub seconds: f64,
}

impl Summary {
    pub fn from_results(seeds: Vec<SeedResult>) -> Summary {
        let n = seeds.len().max(1) as f64;
        let mean = |f: fn(&SeedResult) -> f64| seeds.iter().map(f).sum::<f64>() / n;
        Summary {
            teacher_mean_sad: mean(|r| r.teacher.whole.sad),
            baseline_mean_sad: mean(|r| r.baseline.whole.sad),
            ppid_mean_sad: mean(|r| r.ppid.whole.sad),
            ppid_wins: seeds.iter().filter(|r| r.ppid_beats_baseline()).count(),
            seconds: seeds.iter().map(|r| r.seconds).sum(),
            seeds,
        }
    }

    pub fn teacher_beats_baseline(&self) -> bool {
        self.teacher_mean_sad < self.baseline_mean_sad
    }
}

pub fn run(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Summary> {
    let results = seeds.iter().map(|&s| run_seed(cfg, s)).collect::<Result<Vec<_>>>()?;
    Ok(Summary::from_results(results))
}
