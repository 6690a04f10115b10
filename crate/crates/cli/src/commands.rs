//! File-based subcommands. Layout under the output root:
//!
//! ```text
//! seed_<s>/data/{train,heldout_valid,test}.csv, manifest.json
//! seed_<s>/teachers/erm_<i>.ckpt, dfr_<i>.ckpt, biased.ckpt, manifest.json
//! seed_<s>/students/<method>.ckpt, <method>.report.json, agrekd.alignment.csv
//! metrics.csv
//! sweep_<axis>.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use agrekd::data::{load_csv, save_csv, SplitFractions, SpuriousSpec};
use agrekd::engine::{alignment_records, Method, TrainConfig};
use agrekd::eval::{aggregate_seeds, evaluate, write_metrics_table, GroupMetrics, MajorityVote, TableRow};
use agrekd::model::{self, CheckpointMeta, Mlp, Role};
use agrekd::util::write_atomic;
use agrekd::weighting::write_alignment_csv;
use agrekd::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{num_debiased, DfrSection, ExperimentConfig, SweepAxis, TeacherSection};
use crate::pipeline::{
    data_spec, debias_pool, debiased_label, prepare_data, run_student, student_config, summary_rows, teacher_config,
    train_teacher_pool, RunData, SeedResult, StudentRun, TeacherPool,
};

const DATA_FORMAT: &str = "agrekd-data v1";
const TEACHER_FORMAT: &str = "agrekd-teachers v1";

/// A config plus the directory every artifact goes under.
#[derive(Clone, Debug)]
pub struct Context {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
}

impl Context {
    pub fn new(cfg: ExperimentConfig) -> Self {
        let root = cfg.output_dir.clone();
        Self { cfg, root }
    }

    fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed_{seed}"))
    }

    fn data_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("data")
    }

    fn teacher_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("teachers")
    }

    fn student_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("students")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn sweep_path(&self, axis: SweepAxis) -> PathBuf {
        self.root.join(format!("sweep_{axis}.csv"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DataManifest {
    format: String,
    seed: u64,
    spec: SpuriousSpec,
    fractions: SplitFractions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TeacherManifest {
    format: String,
    data: DataManifest,
    teacher: TeacherSection,
    dfr: DfrSection,
    num_debiased: usize,
}

fn data_manifest(ctx: &Context, seed: u64) -> DataManifest {
    DataManifest {
        format: DATA_FORMAT.into(),
        seed,
        spec: data_spec(&ctx.cfg, seed),
        fractions: ctx.cfg.data.fractions,
    }
}

fn teacher_manifest(ctx: &Context, seed: u64) -> TeacherManifest {
    TeacherManifest {
        format: TEACHER_FORMAT.into(),
        data: data_manifest(ctx, seed),
        teacher: ctx.cfg.teacher.clone(),
        dfr: ctx.cfg.dfr.clone(),
        num_debiased: ctx.cfg.num_debiased(),
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))
}

fn read_manifest<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Fails with a config-drift error when `path` holds a different manifest.
fn check_drift<T: PartialEq + for<'de> Deserialize<'de>>(path: &Path, expected: &T) -> Result<bool> {
    match read_manifest::<T>(path)? {
        None => Ok(false),
        Some(found) if &found == expected => Ok(true),
        Some(_) => Err(Error::Config(format!(
            "config drift: {} was written under a different configuration",
            path.display()
        ))),
    }
}

pub fn cmd_generate(ctx: &Context) -> Result<Vec<PathBuf>> {
    ctx.cfg.validate()?;
    let mut written = Vec::new();
    for &seed in &ctx.cfg.seeds {
        let dir = ctx.data_dir(seed);
        let manifest_path = dir.join("manifest.json");
        let manifest = data_manifest(ctx, seed);
        check_drift(&manifest_path, &manifest)?;
        let data = prepare_data(&ctx.cfg, seed)?;
        for (name, ds) in [("train", &data.train), ("heldout_valid", &data.heldout), ("test", &data.test)] {
            let p = dir.join(format!("{name}.csv"));
            save_csv(ds, &p)?;
            written.push(p);
        }
        write_atomic(&manifest_path, to_json(&manifest)?.as_bytes())?;
        written.push(manifest_path);
    }
    Ok(written)
}

/// Reads the three splits of `seed`, refusing data written under another config.
pub fn load_data(ctx: &Context, seed: u64) -> Result<RunData> {
    let dir = ctx.data_dir(seed);
    let manifest_path = dir.join("manifest.json");
    if !check_drift(&manifest_path, &data_manifest(ctx, seed))? {
        return Err(Error::Data(format!(
            "no data for seed {seed} under {}; run `generate` first",
            ctx.root.display()
        )));
    }
    Ok(RunData {
        train: load_csv(&dir.join("train.csv"))?,
        heldout: load_csv(&dir.join("heldout_valid.csv"))?,
        test: load_csv(&dir.join("test.csv"))?,
    })
}

fn meta(seed: u64, epochs: usize, role: Role, debiased: bool) -> CheckpointMeta {
    CheckpointMeta {
        seed,
        epochs,
        role,
        debiased,
    }
}

fn save_debiased(ctx: &Context, seed: u64, debiased: &[Option<Mlp>]) -> Result<()> {
    let dir = ctx.teacher_dir(seed);
    for (i, d) in debiased.iter().enumerate() {
        let path = dir.join(format!("dfr_{i}.ckpt"));
        match d {
            Some(m) => model::save(m, &meta(ctx.cfg.dfr.dfr.seed, ctx.cfg.dfr.dfr.epochs, Role::Teacher, true), &path)?,
            None if path.exists() => fs::remove_file(&path).map_err(|e| Error::io(&path, e))?,
            None => {}
        }
    }
    Ok(())
}

/// Trains M ERM teachers per seed, keeps teacher 0's ERM copy as the biased
/// model, then retrains the last layer of the first `ratio · M` teachers.
pub fn cmd_train_teachers(ctx: &Context) -> Result<()> {
    ctx.cfg.validate()?;
    for &seed in &ctx.cfg.seeds {
        let data = load_data(ctx, seed)?;
        let pool = train_teacher_pool(&ctx.cfg, &data, seed, ctx.cfg.teacher.count, ctx.cfg.num_debiased())?;
        let dir = ctx.teacher_dir(seed);
        let epochs = ctx.cfg.teacher.train.epochs;
        for (i, t) in pool.erm.iter().enumerate() {
            let s = teacher_config(&ctx.cfg, seed, i).seed;
            model::save(t, &meta(s, epochs, Role::Teacher, false), &dir.join(format!("erm_{i}.ckpt")))?;
        }
        let s0 = teacher_config(&ctx.cfg, seed, 0).seed;
        model::save(&pool.biased, &meta(s0, epochs, Role::Biased, false), &dir.join("biased.ckpt"))?;
        save_debiased(ctx, seed, &pool.debiased)?;
        write_atomic(&dir.join("manifest.json"), to_json(&teacher_manifest(ctx, seed))?.as_bytes())?;
    }
    Ok(())
}

fn load_erm_teachers(ctx: &Context, seed: u64) -> Result<(Vec<Mlp>, Mlp)> {
    let dir = ctx.teacher_dir(seed);
    let erm = (0..ctx.cfg.teacher.count)
        .map(|i| model::load(&dir.join(format!("erm_{i}.ckpt"))).map(|(m, _)| m))
        .collect::<Result<Vec<_>>>()?;
    let (biased, bmeta) = model::load(&dir.join("biased.ckpt"))?;
    if bmeta.debiased {
        return Err(Error::Config("biased model checkpoint is marked debiased".into()));
    }
    Ok((erm, biased))
}

fn teachers_missing(seed: u64) -> Error {
    Error::Data(format!("no teachers for seed {seed}; run `train-teachers` first"))
}

/// Re-runs only the last-layer retraining step on stored ERM teachers.
pub fn cmd_dfr(ctx: &Context) -> Result<()> {
    ctx.cfg.validate()?;
    for &seed in &ctx.cfg.seeds {
        let data = load_data(ctx, seed)?;
        let dir = ctx.teacher_dir(seed);
        let found: Option<TeacherManifest> = read_manifest(&dir.join("manifest.json"))?;
        let expected = teacher_manifest(ctx, seed);
        match found {
            None => return Err(teachers_missing(seed)),
            Some(f) if f.data != expected.data || f.teacher != expected.teacher => {
                return Err(Error::Config(format!(
                    "config drift: teachers of seed {seed} were trained under a different configuration"
                )))
            }
            Some(_) => {}
        }
        let (erm, _) = load_erm_teachers(ctx, seed)?;
        let debiased = debias_pool(&ctx.cfg, &data, seed, &erm, ctx.cfg.num_debiased())?;
        save_debiased(ctx, seed, &debiased)?;
        write_atomic(&dir.join("manifest.json"), to_json(&expected)?.as_bytes())?;
    }
    Ok(())
}

/// Loads the stored ensemble of `seed`, refusing teachers from another config.
pub fn load_pool(ctx: &Context, seed: u64) -> Result<TeacherPool> {
    let dir = ctx.teacher_dir(seed);
    if !check_drift(&dir.join("manifest.json"), &teacher_manifest(ctx, seed))? {
        return Err(teachers_missing(seed));
    }
    let (erm, biased) = load_erm_teachers(ctx, seed)?;
    let k = ctx.cfg.num_debiased();
    let debiased = (0..erm.len())
        .map(|i| {
            (i < k)
                .then(|| model::load(&dir.join(format!("dfr_{i}.ckpt"))).map(|(m, _)| m))
                .transpose()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TeacherPool { erm, debiased, biased })
}

fn save_student(ctx: &Context, seed: u64, run: &StudentRun, train: &TrainConfig) -> Result<()> {
    let dir = ctx.student_dir(seed);
    let name = run.method.to_string();
    model::save(&run.model, &meta(run.seed, train.epochs, Role::Student, false), &dir.join(format!("{name}.ckpt")))?;
    write_atomic(&dir.join(format!("{name}.report.json")), run.report.to_json()?.as_bytes())
}

/// Distills every configured method for every seed from the stored teachers,
/// then writes `metrics.csv`.
pub fn cmd_distill(ctx: &Context) -> Result<PathBuf> {
    ctx.cfg.validate()?;
    let cfg = &ctx.cfg;
    let results = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<SeedResult> {
            let data = load_data(ctx, seed)?;
            let pool = load_pool(ctx, seed)?;
            let ensemble = pool.ensemble(cfg.teacher.count, cfg.num_debiased())?;
            let students = cfg
                .student
                .methods
                .par_iter()
                .map(|&m| run_student(&student_config(cfg, m, seed), &data, &ensemble))
                .collect::<Result<Vec<_>>>()?;
            for run in &students {
                save_student(ctx, seed, run, &cfg.student.train)?;
                if run.method == Method::Agrekd {
                    let rec = alignment_records(&run.model, &data.train, &ensemble, &cfg.student.train.kd, &cfg.student.train.weighting)?;
                    write_alignment_csv(&rec, &ctx.student_dir(seed).join("agrekd.alignment.csv"))?;
                }
            }
            Ok(SeedResult {
                seed,
                erm_teachers: pool.erm.iter().map(|t| evaluate(t, &data.test)).collect::<Result<_>>()?,
                dfr_teachers: pool.debiased.iter().flatten().map(|t| evaluate(t, &data.test)).collect::<Result<_>>()?,
                vote: evaluate(&MajorityVote(&ensemble.teachers), &data.test)?,
                students,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = ctx.metrics_path();
    write_metrics_table(&summary_rows(cfg, &results)?, &path)?;
    Ok(path)
}

/// Test-split metrics of each checkpoint, using the data of `seed`.
pub fn cmd_evaluate(ctx: &Context, checkpoints: &[PathBuf], seed: u64) -> Result<Vec<(PathBuf, GroupMetrics)>> {
    if checkpoints.is_empty() {
        return Err(Error::Config("evaluate needs at least one checkpoint".into()));
    }
    let data = load_data(ctx, seed)?;
    checkpoints
        .iter()
        .map(|p| {
            let (m, _) = model::load(p)?;
            Ok((p.clone(), evaluate(&m, &data.test)?))
        })
        .collect()
}

/// One sweep point: the label written to the `value` column, and the
/// student config, ensemble size and debiased count it stands for.
struct Point {
    value: String,
    size: usize,
    num_debiased: usize,
    student: TrainConfig,
}

fn sweep_points(cfg: &ExperimentConfig, axis: SweepAxis) -> Result<Vec<Point>> {
    let m = cfg.teacher.count;
    let base = cfg.student.train.clone();
    let empty = |name: &str| Error::Config(format!("sweep.{name} lists no values"));
    let points: Vec<Point> = match axis {
        SweepAxis::Ratio => {
            if cfg.sweep.ratio.is_empty() {
                return Err(empty("ratio"));
            }
            cfg.sweep
                .ratio
                .iter()
                .map(|&r| {
                    Ok(Point {
                        value: format!("{r}"),
                        size: m,
                        num_debiased: num_debiased(r, m)?,
                        student: base.clone(),
                    })
                })
                .collect::<Result<_>>()?
        }
        SweepAxis::Tau => {
            if cfg.sweep.tau.is_empty() {
                return Err(empty("tau"));
            }
            cfg.sweep
                .tau
                .iter()
                .map(|&tau| {
                    let mut student = base.clone();
                    student.kd.tau = tau;
                    student.validate()?;
                    Ok(Point {
                        value: format!("{tau}"),
                        size: m,
                        num_debiased: cfg.num_debiased(),
                        student,
                    })
                })
                .collect::<Result<_>>()?
        }
        SweepAxis::EnsembleSize => {
            if cfg.sweep.ensemble_size.is_empty() {
                return Err(empty("ensemble_size"));
            }
            cfg.sweep
                .ensemble_size
                .iter()
                .map(|&size| {
                    if size == 0 {
                        return Err(Error::Config("sweep.ensemble_size values must be ≥ 1".into()));
                    }
                    Ok(Point {
                        value: size.to_string(),
                        size,
                        num_debiased: (cfg.dfr.debiased_ratio * size as f64 - 1e-9).ceil().max(0.0) as usize,
                        student: base.clone(),
                    })
                })
                .collect::<Result<_>>()?
        }
        SweepAxis::StudentWidth => {
            if cfg.sweep.student_width.is_empty() {
                return Err(empty("student_width"));
            }
            cfg.sweep
                .student_width
                .iter()
                .map(|&w| {
                    if w == 0 {
                        return Err(Error::Config("sweep.student_width values must be ≥ 1".into()));
                    }
                    Ok(Point {
                        value: w.to_string(),
                        size: m,
                        num_debiased: cfg.num_debiased(),
                        student: TrainConfig {
                            hidden: vec![w],
                            ..base.clone()
                        },
                    })
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(points)
}

/// Stored ERM teachers when they match the config and are numerous enough,
/// freshly trained ones otherwise; every teacher gets a retrained copy.
fn sweep_pool(ctx: &Context, seed: u64, data: &RunData, size: usize) -> Result<TeacherPool> {
    let stored = (size <= ctx.cfg.teacher.count)
        .then(|| -> Result<Option<(Vec<Mlp>, Mlp)>> {
            let path = ctx.teacher_dir(seed).join("manifest.json");
            match read_manifest::<TeacherManifest>(&path)? {
                Some(found) if found.data == data_manifest(ctx, seed) && found.teacher == ctx.cfg.teacher => {
                    load_erm_teachers(ctx, seed).map(Some)
                }
                _ => Ok(None),
            }
        })
        .transpose()?
        .flatten();
    match stored {
        Some((erm, biased)) => {
            let debiased = debias_pool(&ctx.cfg, data, seed, &erm, erm.len())?;
            Ok(TeacherPool { erm, debiased, biased })
        }
        None => train_teacher_pool(&ctx.cfg, data, seed, size, size),
    }
}

/// One row per sweep value per method; columns as in `metrics.csv` plus
/// the axis, its value, and AGRE-KD's mean teacher weights.
pub fn cmd_sweep(ctx: &Context, axis: SweepAxis) -> Result<PathBuf> {
    ctx.cfg.validate()?;
    let cfg = &ctx.cfg;
    let points = sweep_points(cfg, axis)?;
    let pool_size = points.iter().map(|p| p.size).max().unwrap_or(cfg.teacher.count);

    // per seed: per point: runs in method order
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<Vec<StudentRun>>> {
            let data = match load_data(ctx, seed) {
                Ok(d) => d,
                Err(Error::Data(_)) => prepare_data(cfg, seed)?,
                Err(e) => return Err(e),
            };
            let pool = sweep_pool(ctx, seed, &data, pool_size)?;
            points
                .iter()
                .map(|p| {
                    let ensemble = pool.ensemble(p.size, p.num_debiased)?;
                    cfg.student
                        .methods
                        .par_iter()
                        .map(|&method| {
                            let train = TrainConfig {
                                seed: student_config(cfg, method, seed).seed,
                                method,
                                ..p.student.clone()
                            };
                            run_student(&train, &data, &ensemble)
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (pi, p) in points.iter().enumerate() {
        for (mi, method) in cfg.student.methods.iter().enumerate() {
            let runs: Vec<&StudentRun> = per_seed.iter().map(|s| &s[pi][mi]).collect();
            let metrics: Vec<GroupMetrics> = runs.iter().map(|r| r.metrics.clone()).collect();
            let weight = |pick: fn(&agrekd::engine::EpochRecord) -> Option<f64>| {
                let v: Vec<f64> = runs.iter().filter_map(|r| r.report.mean_over_epochs(pick)).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            rows.push(SweepRow {
                value: p.value.clone(),
                row: TableRow {
                    method: method.to_string(),
                    debiased: if *method == Method::OneHot {
                        "-".into()
                    } else {
                        debiased_label(p.num_debiased, p.size)
                    },
                    summary: aggregate_seeds(&metrics)?,
                },
                weight_debiased: weight(|e| e.mean_weight_debiased),
                weight_biased: weight(|e| e.mean_weight_biased),
            });
        }
    }
    let path = ctx.sweep_path(axis);
    write_sweep_table(axis, &rows, &path)?;
    Ok(path)
}

pub struct SweepRow {
    pub value: String,
    pub row: TableRow,
    pub weight_debiased: Option<f64>,
    pub weight_biased: Option<f64>,
}

pub fn write_sweep_table(axis: SweepAxis, rows: &[SweepRow], path: &Path) -> Result<()> {
    let groups: Vec<usize> = rows
        .first()
        .map(|r| r.row.summary.per_group_accuracy.keys().copied().collect())
        .unwrap_or_default();
    let err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = [
        "axis", "value", "method", "debiased", "runs", "avg_mean", "avg_std", "wga_mean", "wga_std",
    ]
    .map(String::from)
    .to_vec();
    for g in &groups {
        header.push(format!("group_{g}_mean"));
    }
    header.push("weight_debiased".into());
    header.push("weight_biased".into());
    w.write_record(&header).map_err(err)?;
    let f = |v: f64| format!("{v:.6}");
    let opt = |v: Option<f64>| v.map(f).unwrap_or_default();
    for r in rows {
        let s = &r.row.summary;
        let mut rec = vec![
            axis.to_string(),
            r.value.clone(),
            r.row.method.clone(),
            r.row.debiased.clone(),
            s.runs.to_string(),
            f(s.average_accuracy.mean),
            f(s.average_accuracy.std),
            f(s.wga.mean),
            f(s.wga.std),
        ];
        for g in &groups {
            rec.push(f(s.per_group_accuracy[g].mean));
        }
        rec.push(opt(r.weight_debiased));
        rec.push(opt(r.weight_biased));
        w.write_record(&rec).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, &bytes)
}
