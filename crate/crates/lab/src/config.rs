//! Flat `key = value` experiment configs with typed parameters.
//!
//! A config file is a TOML document without tables. `experiment` names the
//! experiment, `output_dir` optionally overrides the output root, and every
//! other key must appear in that experiment's schema. `--set key=value` flags
//! are applied after the file, so flags win.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Reconstruction,
    Deviation,
    EsnApprox,
    FixedPoint,
    WeakEsp,
    FourierVerify,
    BudgetTable,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::Reconstruction,
        Experiment::Deviation,
        Experiment::EsnApprox,
        Experiment::FixedPoint,
        Experiment::WeakEsp,
        Experiment::FourierVerify,
        Experiment::BudgetTable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Reconstruction => "reconstruction",
            Experiment::Deviation => "deviation",
            Experiment::EsnApprox => "esn_approx",
            Experiment::FixedPoint => "fixed_point",
            Experiment::WeakEsp => "weak_esp",
            Experiment::FourierVerify => "fourier_verify",
            Experiment::BudgetTable => "budget_table",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == name)
            .ok_or_else(|| LabError::Config(format!("unknown experiment '{name}'")))
    }

    pub fn schema(self) -> &'static [ParamSpec] {
        use ParamDefault::*;
        use ParamKind::*;
        const fn p(key: &'static str, kind: ParamKind, default: ParamDefault, grid_axis: bool) -> ParamSpec {
            ParamSpec {
                key,
                kind,
                default,
                grid_axis,
            }
        }
        const UNIFORM: ParamDefault = Literal("\"uniform:r=0.5\"");
        match self {
            Experiment::Reconstruction => {
                const S: &[ParamSpec] = &[
                    p("seed", Int, Literal("0"), false),
                    p("n_grid", IntList, Literal("[1000, 10000]"), true),
                    p("m", Int, Literal("2"), false),
                    p("d", Int, Literal("1"), false),
                    p("seeds", Int, Literal("10"), true),
                    p("distribution", Text, UNIFORM, false),
                    p("radius", Float, Literal("2.0"), false),
                    p("delta", Float, Literal("0.05"), false),
                ];
                S
            }
            Experiment::Deviation => {
                const S: &[ParamSpec] = &[
                    p("seed", Int, Literal("0"), false),
                    p("n_grid", IntList, Literal("[1000]"), true),
                    p("d", Int, Literal("1"), false),
                    p("r", Float, Literal("1.0"), false),
                    p("delta", Float, Literal("0.1"), false),
                    p("trials", Int, Literal("500"), true),
                    p("density", Text, Literal("\"cos\""), false),
                    p("g_bound", Float, Literal("1.0"), false),
                    p("grid_points", Int, Literal("2"), false),
                ];
                S
            }
            Experiment::EsnApprox => {
                const S: &[ParamSpec] = &[
                    p("seed", Int, Literal("0"), false),
                    p("operator", Text, Required, false),
                    p("n_grid", IntList, Literal("[400, 1600, 6400]"), true),
                    p("m", Int, Literal("4"), false),
                    p("seeds", Int, Literal("5"), true),
                    p("distribution", Text, UNIFORM, false),
                    p("ridge", Float, Literal("1e-8"), false),
                    p("ridge_mode", Text, Literal("\"trace\""), false),
                    p("train_steps", Int, Literal("5000"), false),
                    p("warmup", Int, Optional, false),
                    p("target_memory", Int, Optional, false),
                    p("test_sequences", Int, Literal("20"), false),
                    p("test_len", Int, Literal("300"), false),
                    p("delta", Float, Literal("0.05"), false),
                    p("b_m", Float, Literal("1.0"), false),
                ];
                S
            }
            Experiment::FixedPoint => {
                const S: &[ParamSpec] = &[
                    p("seed", Int, Literal("0"), false),
                    p("n", Int, Literal("4000"), false),
                    p("m", Int, Literal("2"), false),
                    p("d", Int, Literal("1"), false),
                    p("distribution", Text, UNIFORM, false),
                    p("runs", Int, Literal("20"), true),
                    p("len", Int, Literal("50"), false),
                    p("tol", Float, Literal("1e-10"), false),
                    p("max_iters", Int, Literal("100"), false),
                ];
                S
            }
            Experiment::WeakEsp => {
                const S: &[ParamSpec] = &[
                    p("seed", Int, Literal("0"), false),
                    p("operator", Text, Required, false),
                    p("n", Int, Literal("4000"), false),
                    p("m", Int, Literal("2"), false),
                    p("distribution", Text, UNIFORM, false),
                    p("ridge", Float, Literal("1e-8"), false),
                    p("ridge_mode", Text, Literal("\"trace\""), false),
                    p("train_steps", Int, Literal("5000"), false),
                    p("target_memory", Int, Optional, false),
                    p("runs", Int, Literal("20"), true),
                    p("len", Int, Literal("50"), false),
                    p("warmup", Int, Optional, false),
                ];
                S
            }
            Experiment::FourierVerify => {
                const S: &[ParamSpec] = &[
                    p("seed", Int, Literal("0"), false),
                    p("profile", Text, Required, false),
                    p("grid_points", Int, Literal("11"), true),
                    p("samples", Int, Literal("1000000"), false),
                ];
                S
            }
            Experiment::BudgetTable => {
                const S: &[ParamSpec] = &[
                    p("operator", Text, Literal("\"exp_filter:lambda=0.5\""), false),
                    p("b_m", Float, Literal("1.0"), false),
                    p("m_grid", IntList, Literal("[1, 2, 4]"), true),
                    p("d_grid", IntList, Literal("[1]"), true),
                    p("delta_grid", FloatList, Literal("[0.05]"), true),
                    p("n_grid", IntList, Literal("[1000, 10000, 100000]"), true),
                ];
                S
            }
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Int,
    Float,
    IntList,
    FloatList,
    Text,
}

impl ParamKind {
    fn describe(self) -> &'static str {
        match self {
            ParamKind::Int => "a nonnegative integer",
            ParamKind::Float => "a finite number",
            ParamKind::IntList => "a nonempty list of nonnegative integers",
            ParamKind::FloatList => "a nonempty list of finite numbers",
            ParamKind::Text => "a string",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamDefault {
    Required,
    /// Absent unless given; the experiment derives a value.
    Optional,
    /// TOML literal.
    Literal(&'static str),
}

#[derive(Debug, Clone, Copy)]
pub struct ParamSpec {
    pub key: &'static str,
    pub kind: ParamKind,
    pub default: ParamDefault,
    /// Enumerates grid cells; excluded from the seed digest so cells stay independent.
    pub grid_axis: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue {
    Int(u64),
    Float(f64),
    IntList(Vec<u64>),
    FloatList(Vec<f64>),
    Text(String),
}

impl ParamValue {
    fn coerce(key: &str, kind: ParamKind, v: &Value) -> Result<Self> {
        let mismatch = || LabError::TypeMismatch {
            key: key.to_string(),
            expected: kind.describe(),
        };
        let int = |v: &Value| v.as_integer().and_then(|i| u64::try_from(i).ok());
        let float = |v: &Value| {
            v.as_float()
                .or_else(|| v.as_integer().map(|i| i as f64))
                .filter(|x| x.is_finite())
        };
        let list = |v: &Value| v.as_array().filter(|a| !a.is_empty()).cloned();
        Ok(match kind {
            ParamKind::Int => ParamValue::Int(int(v).ok_or_else(mismatch)?),
            ParamKind::Float => ParamValue::Float(float(v).ok_or_else(mismatch)?),
            ParamKind::IntList => ParamValue::IntList(
                list(v)
                    .ok_or_else(mismatch)?
                    .iter()
                    .map(|x| int(x).ok_or_else(mismatch))
                    .collect::<Result<_>>()?,
            ),
            ParamKind::FloatList => ParamValue::FloatList(
                list(v)
                    .ok_or_else(mismatch)?
                    .iter()
                    .map(|x| float(x).ok_or_else(mismatch))
                    .collect::<Result<_>>()?,
            ),
            ParamKind::Text => ParamValue::Text(v.as_str().ok_or_else(mismatch)?.to_string()),
        })
    }

    /// TOML rendering; floats use the shortest round-trip form.
    pub fn canonical(&self) -> String {
        fn float(x: f64) -> String {
            let s = format!("{x:?}");
            if s.contains(['.', 'e', 'E']) {
                s
            } else {
                format!("{s}.0")
            }
        }
        match self {
            ParamValue::Int(i) => i.to_string(),
            ParamValue::Float(x) => float(*x),
            ParamValue::IntList(v) => format!("[{}]", v.iter().map(u64::to_string).collect::<Vec<_>>().join(", ")),
            ParamValue::FloatList(v) => format!("[{}]", v.iter().map(|x| float(*x)).collect::<Vec<_>>().join(", ")),
            ParamValue::Text(s) => Value::String(s.clone()).to_string(),
        }
    }
}

/// A validated experiment configuration with defaults filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub params: BTreeMap<String, ParamValue>,
    pub output_dir: Option<PathBuf>,
}

/// Reads `path` (if any), applies `key=value` overrides and validates.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| LabError::Config(format!("cannot read {}: {e}", p.display())))?;
            text.parse::<Table>()?
        }
        None => Table::new(),
    };
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| LabError::Config(format!("override '{item}' is not key=value")))?;
        table.insert(key.trim().to_string(), override_value(raw.trim()));
    }
    from_table(table)
}

/// A TOML literal if it parses as one, otherwise the raw text as a string,
/// so `--set operator=exp_filter:lambda=0.5` needs no quoting.
fn override_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn from_table(mut table: Table) -> Result<ExperimentConfig> {
    let experiment = match table.remove("experiment") {
        Some(Value::String(s)) => Experiment::parse(&s)?,
        Some(_) => {
            return Err(LabError::TypeMismatch {
                key: "experiment".into(),
                expected: "a string",
            })
        }
        None => return Err(LabError::MissingParam("experiment".into())),
    };
    let output_dir = match table.remove("output_dir") {
        Some(Value::String(s)) => Some(PathBuf::from(s)),
        Some(_) => {
            return Err(LabError::TypeMismatch {
                key: "output_dir".into(),
                expected: "a string",
            })
        }
        None => None,
    };
    let schema = experiment.schema();
    let mut params = BTreeMap::new();
    for (key, value) in &table {
        let spec = schema
            .iter()
            .find(|s| s.key == key)
            .ok_or_else(|| LabError::UnknownKey(key.clone()))?;
        params.insert(key.clone(), ParamValue::coerce(key, spec.kind, value)?);
    }
    for spec in schema {
        if params.contains_key(spec.key) {
            continue;
        }
        match spec.default {
            ParamDefault::Required => return Err(LabError::MissingParam(spec.key.into())),
            ParamDefault::Optional => {}
            ParamDefault::Literal(literal) => {
                params.insert(
                    spec.key.into(),
                    ParamValue::coerce(spec.key, spec.kind, &override_value(literal))?,
                );
            }
        }
    }
    if let Some(ParamValue::IntList(grid)) = params.get("n_grid") {
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(LabError::Config("n-grid not increasing".into()));
        }
        if grid[0] == 0 {
            return Err(LabError::Config("n-grid entries must be positive".into()));
        }
    }
    Ok(ExperimentConfig {
        experiment,
        params,
        output_dir,
    })
}

impl ExperimentConfig {
    /// Sorted `key = value` lines, starting with the experiment.
    pub fn canonical(&self) -> String {
        self.render(|_| true)
    }

    fn render(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut out = format!("experiment = \"{}\"\n", self.experiment);
        for (k, v) in &self.params {
            if keep(k) {
                out.push_str(&format!("{k} = {}\n", v.canonical()));
            }
        }
        out
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Seed for one grid cell: the first 8 bytes of a digest over the config
    /// without its grid axes, the experiment name and the cell coordinates.
    pub fn cell_seed(&self, coords: &[u64]) -> u64 {
        let schema = self.experiment.schema();
        let base = self.render(|k| !schema.iter().any(|s| s.key == k && s.grid_axis));
        let mut hasher = Sha256::new();
        hasher.update(base.as_bytes());
        hasher.update(self.experiment.name().as_bytes());
        for c in coords {
            hasher.update(c.to_le_bytes());
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    fn get(&self, key: &str) -> Result<&ParamValue> {
        self.params.get(key).ok_or_else(|| LabError::MissingParam(key.into()))
    }

    fn mismatch(key: &str, expected: &'static str) -> LabError {
        LabError::TypeMismatch {
            key: key.into(),
            expected,
        }
    }

    pub fn int(&self, key: &str) -> Result<usize> {
        match self.get(key)? {
            ParamValue::Int(i) => usize::try_from(*i).map_err(|_| Self::mismatch(key, "an integer that fits in usize")),
            _ => Err(Self::mismatch(key, "an integer")),
        }
    }

    pub fn opt_int(&self, key: &str) -> Result<Option<usize>> {
        if self.params.contains_key(key) {
            self.int(key).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn float(&self, key: &str) -> Result<f64> {
        match self.get(key)? {
            ParamValue::Float(x) => Ok(*x),
            _ => Err(Self::mismatch(key, "a number")),
        }
    }

    pub fn int_list(&self, key: &str) -> Result<Vec<usize>> {
        match self.get(key)? {
            ParamValue::IntList(v) => v
                .iter()
                .map(|&i| usize::try_from(i).map_err(|_| Self::mismatch(key, "integers that fit in usize")))
                .collect(),
            _ => Err(Self::mismatch(key, "a list of integers")),
        }
    }

    pub fn float_list(&self, key: &str) -> Result<Vec<f64>> {
        match self.get(key)? {
            ParamValue::FloatList(v) => Ok(v.clone()),
            _ => Err(Self::mismatch(key, "a list of numbers")),
        }
    }

    pub fn text(&self, key: &str) -> Result<&str> {
        match self.get(key)? {
            ParamValue::Text(s) => Ok(s),
            _ => Err(Self::mismatch(key, "a string")),
        }
    }

    /// `output_dir` from the config, else `$RESERVOIR_LAB_OUT`, else `lab-out`.
    pub fn output_root(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("lab-out"))
    }
}

/// Environment variable naming the output root.
pub const OUTPUT_ENV: &str = "RESERVOIR_LAB_OUT";

#[cfg(test)]
mod tests {
    use super::*;

    fn table(text: &str) -> Table {
        text.parse().unwrap()
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = from_table(table("experiment = \"esn_approx\"\noperator = \"identity\"")).unwrap();
        assert_eq!(cfg.int_list("n_grid").unwrap(), vec![400, 1600, 6400]);
        assert_eq!(cfg.float("ridge").unwrap(), 1e-8);
        assert_eq!(cfg.opt_int("warmup").unwrap(), None);
        assert!(cfg.canonical().starts_with("experiment = \"esn_approx\"\nb_m = 1.0\n"));
    }

    #[test]
    fn rejects_bad_input() {
        let err = from_table(table(
            "experiment = \"esn_approx\"\noperator = \"identity\"\nlambda = 3",
        ))
        .unwrap_err();
        assert!(matches!(&err, LabError::UnknownKey(k) if k == "lambda"), "{err}");
        let err = from_table(table(
            "experiment = \"esn_approx\"\noperator = \"identity\"\nn_grid = [400, 200]",
        ))
        .unwrap_err();
        assert!(err.to_string().contains("n-grid not increasing"));
        let err = from_table(table("experiment = \"esn_approx\"")).unwrap_err();
        assert!(matches!(&err, LabError::MissingParam(k) if k == "operator"));
        let err = from_table(table("experiment = \"fixed_point\"\nn = 2.5")).unwrap_err();
        assert!(matches!(&err, LabError::TypeMismatch { key, .. } if key == "n"));
        assert!(from_table(table("experiment = \"nope\"")).is_err());
        assert!(from_table(table("experiment = \"fixed_point\"\nn = -3")).is_err());
        assert!(from_table(table("experiment = \"budget_table\"\nm_grid = []")).is_err());
        assert!(err.is_config());
    }

    #[test]
    fn integers_promote_to_floats() {
        let cfg = from_table(table("experiment = \"deviation\"\nr = 2")).unwrap();
        assert_eq!(cfg.float("r").unwrap(), 2.0);
        assert_eq!(cfg.params["r"].canonical(), "2.0");
    }

    #[test]
    fn override_values() {
        assert_eq!(override_value("3"), Value::Integer(3));
        assert_eq!(
            override_value("[1, 2]"),
            Value::Array(vec![Value::Integer(1), Value::Integer(2)])
        );
        assert_eq!(
            override_value("exp_filter:lambda=0.5"),
            Value::String("exp_filter:lambda=0.5".into())
        );
        assert_eq!(override_value("\"a b\""), Value::String("a b".into()));
    }

    #[test]
    fn cell_seeds_ignore_grid_axes() {
        let a = from_table(table("experiment = \"reconstruction\"\nn_grid = [10, 20]\nseeds = 3")).unwrap();
        let b = from_table(table("experiment = \"reconstruction\"\nn_grid = [20]\nseeds = 7")).unwrap();
        let c = from_table(table("experiment = \"reconstruction\"\nn_grid = [20]\nseed = 1")).unwrap();
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.cell_seed(&[20, 1]), b.cell_seed(&[20, 1]));
        assert_ne!(a.cell_seed(&[20, 1]), a.cell_seed(&[20, 2]));
        assert_ne!(b.cell_seed(&[20, 1]), c.cell_seed(&[20, 1]));
        assert_eq!(a.config_hash().len(), 64);
    }
}
