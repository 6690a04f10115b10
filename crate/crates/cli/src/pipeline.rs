//! In-memory experiment pipeline: data, teacher pool, students, summaries.
//!
//! The file-based commands and the acceptance suite both drive these
//! functions, so every on-disk artifact has an in-memory twin.

use std::collections::BTreeMap;

use agrekd::data::{generate_splits, GroupedDataset, SpuriousSpec};
use agrekd::debias::{dfr_retrain, DfrConfig};
use agrekd::engine::{distill, train_erm, DistillReport, Method, TeacherEnsemble, TrainConfig};
use agrekd::eval::{aggregate_seeds, evaluate, GroupMetrics, MajorityVote, TableRow};
use agrekd::model::Mlp;
use agrekd::{Error, Result};
use rayon::prelude::*;

use crate::config::ExperimentConfig;

const TAG_DATA: u64 = 1;
const TAG_TEACHER: u64 = 2;
const TAG_DFR: u64 = 3;
const TAG_STUDENT: u64 = 4;

/// SplitMix64 finalizer over `(base, tag, index)`.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index.wrapping_mul(0x94D0_49BB_1331_11EB))
        .wrapping_add(0x2545_F491_4F6C_DD1D);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct RunData {
    pub train: GroupedDataset,
    pub heldout: GroupedDataset,
    pub test: GroupedDataset,
}

pub fn data_spec(cfg: &ExperimentConfig, seed: u64) -> SpuriousSpec {
    SpuriousSpec {
        seed: derive_seed(cfg.data.spec.seed, TAG_DATA, seed),
        ..cfg.data.spec.clone()
    }
}

pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<RunData> {
    let (train, heldout, test) = generate_splits(&data_spec(cfg, seed), cfg.data.fractions)?;
    Ok(RunData { train, heldout, test })
}

pub fn teacher_config(cfg: &ExperimentConfig, seed: u64, index: usize) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(seed, TAG_TEACHER, index as u64),
        method: Method::OneHot,
        ..cfg.teacher.train.clone()
    }
}

pub fn dfr_config(cfg: &ExperimentConfig, seed: u64, index: usize) -> DfrConfig {
    DfrConfig {
        seed: derive_seed(seed, TAG_DFR, index as u64),
        ..cfg.dfr.dfr.clone()
    }
}

/// Student config for one method; every method of a seed shares the init.
pub fn student_config(cfg: &ExperimentConfig, method: Method, seed: u64) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(seed, TAG_STUDENT, 0),
        method,
        ..cfg.student.train.clone()
    }
}

/// ERM teachers of one seed, their DFR-retrained copies, and the biased model.
#[derive(Clone, Debug)]
pub struct TeacherPool {
    pub erm: Vec<Mlp>,
    /// `debiased[i]` is `erm[i]` with its last layer retrained; `None` if not retrained.
    pub debiased: Vec<Option<Mlp>>,
    /// ERM copy of teacher 0, kept even when teacher 0 is retrained.
    pub biased: Mlp,
}

impl TeacherPool {
    pub fn size(&self) -> usize {
        self.erm.len()
    }

    /// The first `size` teachers, of which the first `num_debiased` are the
    /// retrained copies.
    pub fn ensemble(&self, size: usize, num_debiased: usize) -> Result<TeacherEnsemble> {
        if size > self.size() || num_debiased > size {
            return Err(Error::Config(format!(
                "ensemble of {size} with {num_debiased} debiased from a pool of {}",
                self.size()
            )));
        }
        let mut teachers = Vec::with_capacity(size);
        for i in 0..size {
            if i < num_debiased {
                let d = self.debiased[i]
                    .clone()
                    .ok_or_else(|| Error::Config(format!("teacher {i} has no retrained copy")))?;
                teachers.push(d);
            } else {
                teachers.push(self.erm[i].clone());
            }
        }
        let mask = (0..size).map(|i| i < num_debiased).collect();
        TeacherEnsemble::new(teachers, Some(self.biased.clone()), mask)
    }
}

/// Trains `count` ERM teachers and retrains the last layer of the first
/// `num_debiased` of them.
pub fn train_teacher_pool(cfg: &ExperimentConfig, data: &RunData, seed: u64, count: usize, num_debiased: usize) -> Result<TeacherPool> {
    let erm: Vec<Mlp> = (0..count)
        .into_par_iter()
        .map(|i| train_erm(&teacher_config(cfg, seed, i), &data.train))
        .collect::<Result<_>>()?;
    let debiased = debias_pool(cfg, data, seed, &erm, num_debiased)?;
    let biased = erm.first().cloned().ok_or_else(|| Error::Config("teacher pool is empty".into()))?;
    Ok(TeacherPool { erm, debiased, biased })
}

pub fn debias_pool(cfg: &ExperimentConfig, data: &RunData, seed: u64, erm: &[Mlp], num_debiased: usize) -> Result<Vec<Option<Mlp>>> {
    erm.par_iter()
        .enumerate()
        .map(|(i, t)| {
            (i < num_debiased)
                .then(|| dfr_retrain(t, &data.heldout, &dfr_config(cfg, seed, i)))
                .transpose()
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct StudentRun {
    pub method: Method,
    pub seed: u64,
    pub model: Mlp,
    pub metrics: GroupMetrics,
    pub report: DistillReport,
}

pub fn run_student(config: &TrainConfig, data: &RunData, ensemble: &TeacherEnsemble) -> Result<StudentRun> {
    let init = config.init_model(data.train.num_features(), data.train.num_classes())?;
    let (model, report) = distill(config, &data.train, ensemble, init, Some(&data.test))?;
    let metrics = evaluate(&model, &data.test)?;
    Ok(StudentRun {
        method: config.method,
        seed: config.seed,
        model,
        metrics,
        report,
    })
}

/// Everything one seed contributes to a results table.
#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub erm_teachers: Vec<GroupMetrics>,
    pub dfr_teachers: Vec<GroupMetrics>,
    pub vote: GroupMetrics,
    pub students: Vec<StudentRun>,
}

/// Trains the configured ensemble and every configured student for one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(RunData, TeacherPool, SeedResult)> {
    let data = prepare_data(cfg, seed)?;
    let m = cfg.teacher.count;
    let k = cfg.num_debiased();
    let pool = train_teacher_pool(cfg, &data, seed, m, k)?;
    let ensemble = pool.ensemble(m, k)?;
    let students = cfg
        .student
        .methods
        .par_iter()
        .map(|&method| run_student(&student_config(cfg, method, seed), &data, &ensemble))
        .collect::<Result<Vec<_>>>()?;
    let result = SeedResult {
        seed,
        erm_teachers: pool.erm.iter().map(|t| evaluate(t, &data.test)).collect::<Result<_>>()?,
        dfr_teachers: pool.debiased.iter().flatten().map(|t| evaluate(t, &data.test)).collect::<Result<_>>()?,
        vote: evaluate(&MajorityVote(&ensemble.teachers), &data.test)?,
        students,
    };
    Ok((data, pool, result))
}

pub fn debiased_label(k: usize, m: usize) -> String {
    format!("{k}/{m}")
}

/// Table rows: ERM and DFR teachers, the majority-vote ensemble, then one
/// row per student method. Teacher rows pool every teacher of every seed.
pub fn summary_rows(cfg: &ExperimentConfig, results: &[SeedResult]) -> Result<Vec<TableRow>> {
    let label = debiased_label(cfg.num_debiased(), cfg.teacher.count);
    let mut rows = Vec::new();
    let erm: Vec<GroupMetrics> = results.iter().flat_map(|r| r.erm_teachers.clone()).collect();
    rows.push(TableRow {
        method: "teacher".into(),
        debiased: "no".into(),
        summary: aggregate_seeds(&erm)?,
    });
    let dfr: Vec<GroupMetrics> = results.iter().flat_map(|r| r.dfr_teachers.clone()).collect();
    if !dfr.is_empty() {
        rows.push(TableRow {
            method: "teacher".into(),
            debiased: "yes".into(),
            summary: aggregate_seeds(&dfr)?,
        });
    }
    let votes: Vec<GroupMetrics> = results.iter().map(|r| r.vote.clone()).collect();
    rows.push(TableRow {
        method: "ensemble_vote".into(),
        debiased: label.clone(),
        summary: aggregate_seeds(&votes)?,
    });
    let mut by_method: BTreeMap<Method, Vec<GroupMetrics>> = BTreeMap::new();
    for r in results {
        for s in &r.students {
            by_method.entry(s.method).or_default().push(s.metrics.clone());
        }
    }
    for method in &cfg.student.methods {
        let debiased = if *method == Method::OneHot { "-".to_string() } else { label.clone() };
        rows.push(TableRow {
            method: method.to_string(),
            debiased,
            summary: aggregate_seeds(&by_method[method])?,
        });
    }
    Ok(rows)
}
