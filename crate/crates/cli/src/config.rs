//! Experiment configuration, read from TOML.
//!
//! Every key has a default, so an empty file is a valid config. Keys the
//! schema does not know are rejected rather than silently ignored.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use agrekd::data::{SplitFractions, SpuriousSpec};
use agrekd::debias::DfrConfig;
use agrekd::engine::{Method, TrainConfig};
use agrekd::{Error, Result};
use serde::{Deserialize, Serialize};

pub const OUTPUT_ROOT_ENV: &str = "AGREKD_OUTPUT_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    #[serde(flatten)]
    pub spec: SpuriousSpec,
    pub fractions: SplitFractions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherSection {
    /// Ensemble size M.
    pub count: usize,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            count: 5,
            train: TrainConfig {
                method: Method::OneHot,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DfrSection {
    /// Fraction of the M teachers that get their last layer retrained.
    pub debiased_ratio: f64,
    #[serde(flatten)]
    pub dfr: DfrConfig,
}

impl Default for DfrSection {
    fn default() -> Self {
        Self {
            debiased_ratio: 0.2,
            dfr: DfrConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentSection {
    pub methods: Vec<Method>,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for StudentSection {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            train: TrainConfig::student(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub ratio: Vec<f64>,
    pub tau: Vec<f64>,
    pub ensemble_size: Vec<usize>,
    pub student_width: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            ratio: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            tau: vec![1.0, 2.0, 4.0, 6.0, 8.0, 10.0],
            ensemble_size: vec![1, 3, 5, 7],
            student_width: vec![16, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub teacher: TeacherSection,
    pub dfr: DfrSection,
    pub student: StudentSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs"),
            data: DataSection::default(),
            teacher: TeacherSection::default(),
            dfr: DfrSection::default(),
            student: StudentSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

fn unknown_keys(given: &toml::Value, known: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    if let (toml::Value::Table(g), toml::Value::Table(k)) = (given, known) {
        for (key, v) in g {
            let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
            match k.get(key) {
                None => out.push(path),
                Some(kv) => unknown_keys(v, kv, &path, out),
            }
        }
    }
}

/// Overlays `given` onto `base`, table by table.
fn merge(base: &mut toml::Value, given: &toml::Value) {
    match (base, given) {
        (toml::Value::Table(b), toml::Value::Table(g)) => {
            for (k, v) in g {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

impl ExperimentConfig {
    /// Parses `text` over the defaults, so each section keeps its own
    /// defaults for the keys it leaves out.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let given: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let known = toml::Value::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        let mut extra = Vec::new();
        unknown_keys(&given, &known, "", &mut extra);
        if !extra.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", extra.join(", "))));
        }
        let mut merged = known;
        merge(&mut merged, &given);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.spec.validate()?;
        let fr = self.data.fractions;
        if [fr.train, fr.heldout, fr.test].iter().any(|f| !(*f > 0.0)) || ((fr.train + fr.heldout + fr.test) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must be positive and sum to 1, got {fr:?}")));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.teacher.count == 0 {
            return Err(Error::Config("teacher.count must be ≥ 1".into()));
        }
        self.teacher.train.validate()?;
        self.student.train.validate()?;
        self.dfr.dfr.validate()?;
        num_debiased(self.dfr.debiased_ratio, self.teacher.count)?;
        if self.student.methods.is_empty() {
            return Err(Error::Config("student.methods must not be empty".into()));
        }
        Ok(())
    }

    pub fn num_debiased(&self) -> usize {
        num_debiased(self.dfr.debiased_ratio, self.teacher.count).expect("validated")
    }
}

/// `ratio · M`, which must be a whole number in `[0, M]`.
pub fn num_debiased(ratio: f64, m: usize) -> Result<usize> {
    let k = ratio * m as f64;
    if !(0.0..=m as f64).contains(&k) || (k - k.round()).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "debiased_ratio {ratio} × {m} teachers is not a whole number in [0, {m}]"
        )));
    }
    Ok(k.round() as usize)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Ratio,
    Tau,
    EnsembleSize,
    StudentWidth,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Ratio => "ratio",
            SweepAxis::Tau => "tau",
            SweepAxis::EnsembleSize => "ensemble_size",
            SweepAxis::StudentWidth => "student_width",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ratio" => Ok(SweepAxis::Ratio),
            "tau" => Ok(SweepAxis::Tau),
            "ensemble_size" => Ok(SweepAxis::EnsembleSize),
            "student_width" => Ok(SweepAxis::StudentWidth),
            other => Err(Error::Config(format!(
                "unknown sweep axis `{other}` (expected ratio, tau, ensemble_size or student_width)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            "seeds = [7]\n[data]\nrho = 0.9\n[student]\nmethods = [\"aver\"]\n[student.kd]\ntau = 2.0\n",
        )
        .unwrap();
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.data.spec.rho, 0.9);
        assert_eq!(cfg.student.methods, vec![Method::Aver]);
        assert_eq!(cfg.student.train.kd.tau, 2.0);
        assert_eq!(cfg.student.train.hidden, vec![16]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str("[data]\nrhoo = 0.9\n").unwrap_err();
        assert!(err.to_string().contains("data.rhoo"), "{err}");
    }

    #[test]
    fn unknown_method_is_a_config_error() {
        assert!(matches!(
            ExperimentConfig::from_toml_str("[student]\nmethods = [\"bogus\"]\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ratio_must_give_whole_teachers() {
        assert_eq!(num_debiased(0.2, 5).unwrap(), 1);
        assert_eq!(num_debiased(1.0, 5).unwrap(), 5);
        assert_eq!(num_debiased(0.0, 5).unwrap(), 0);
        assert!(num_debiased(0.3, 5).is_err());
        assert!(num_debiased(1.2, 5).is_err());
    }

    #[test]
    fn sweep_axis_names() {
        for a in ["ratio", "tau", "ensemble_size", "student_width"] {
            assert_eq!(a.parse::<SweepAxis>().unwrap().to_string(), a);
        }
        assert!("depth".parse::<SweepAxis>().is_err());
    }
}
