//! TOML problem descriptions and the registry that turns them into
//! [`ProblemInstance`]s.
//!
//! ```toml
//! name = "example"
//! dim = 1            # state dimension, default 1
//! grid_n = 200       # number of intervals, at least 2
//! exact = "sin"      # optional reference solution: "sin" | "t"
//!
//! [kernel]
//! kind = "exp_nonconv"
//! params = [1.0, 1.0]
//!
//! [rhs]
//! kind = "saturating"
//! params = [1.0]
//!
//! [controls.u]       # default: constant 0
//! kind = "sine"      # constant [c] | sine [amp, freq(, phase)] | values
//! params = [1.0, 1.0]
//!
//! [solver]           # all fields optional
//! k = "auto"         # or a positive number
//! tol = 1e-10
//! max_iter = 500
//! ```
//!
//! A path of the form `builtin:<name>` loads one of the bundled [`PRESETS`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builtins::{self, BuiltinError, KernelChoice, RhsChoice};
use crate::grid::{GridFunction, TimeGrid};
use crate::picard::{SolverConfig, WeightChoice};
use crate::problem::{
    GrowthData, Kernel, KernelBounds, ModelError, ProblemInstance, Rhs, RhsBounds,
};

/// Bundled problem descriptions, addressable as `builtin:<name>`.
pub const PRESETS: &[(&str, &str)] = &[
    ("sin_oracle", include_str!("../configs/sin_oracle.toml")),
    (
        "coercive_linear",
        include_str!("../configs/coercive_linear.toml"),
    ),
    ("nonlinear", include_str!("../configs/nonlinear.toml")),
    ("passthrough", include_str!("../configs/passthrough.toml")),
    (
        "linear_control",
        include_str!("../configs/linear_control.toml"),
    ),
    (
        "linear_violating",
        include_str!("../configs/linear_violating.toml"),
    ),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("unknown kernel `{0}`")]
    UnknownKernel(String),
    #[error("unknown right-hand side `{0}`")]
    UnknownRhs(String),
    #[error("unknown control generator `{0}`")]
    UnknownControl(String),
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error(transparent)]
    Builtin(#[from] BuiltinError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl ConfigError {
    /// Stable machine-readable identifier.
    pub fn code(&self) -> &'static str {
        match self {
            ConfigError::Io { .. } => "io",
            ConfigError::Parse { .. } => "parse",
            ConfigError::UnknownPreset(_) => "unknown_preset",
            ConfigError::UnknownKernel(_) => "unknown_kernel",
            ConfigError::UnknownRhs(_) => "unknown_rhs",
            ConfigError::UnknownControl(_) => "unknown_control",
            ConfigError::DimensionMismatch { .. } => "dimension_mismatch",
            ConfigError::Model(ModelError::DimensionMismatch { .. }) => "dimension_mismatch",
            ConfigError::InvalidValue(_) => "invalid_value",
            ConfigError::Builtin(_) => "invalid_params",
            ConfigError::Model(ModelError::Grid(_)) => "invalid_grid",
            ConfigError::Model(_) => "invalid_model",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub kind: String,
    #[serde(default)]
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSpec {
    pub kind: String,
    #[serde(default)]
    pub params: Vec<f64>,
    /// Node values for `kind = "values"`: one row of length `dim` per node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<Vec<f64>>>,
}

impl Default for ControlSpec {
    fn default() -> Self {
        Self {
            kind: "constant".into(),
            params: vec![0.0],
            values: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlsSpec {
    #[serde(default)]
    pub u: ControlSpec,
    #[serde(default)]
    pub v: ControlSpec,
}

/// `"auto"` or a positive number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightSpec {
    Auto,
    Value(f64),
}

impl Serialize for WeightSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            WeightSpec::Auto => s.serialize_str("auto"),
            WeightSpec::Value(k) => s.serialize_f64(*k),
        }
    }
}

impl<'de> Deserialize<'de> for WeightSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(k) => Ok(WeightSpec::Value(k)),
            Raw::Int(k) => Ok(WeightSpec::Value(k as f64)),
            Raw::Str(s) if s == "auto" => Ok(WeightSpec::Auto),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "k must be \"auto\" or a number, got \"{s}\""
            ))),
        }
    }
}

fn default_tol() -> f64 {
    1e-10
}

fn default_max_iter() -> usize {
    500
}

fn default_k() -> WeightSpec {
    WeightSpec::Auto
}

fn default_dim() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_k")]
    pub k: WeightSpec,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            k: WeightSpec::Auto,
            tol: default_tol(),
            max_iter: default_max_iter(),
        }
    }
}

impl SolverSpec {
    pub fn to_config(&self) -> Result<SolverConfig, ConfigError> {
        let cfg = SolverConfig {
            k: match self.k {
                WeightSpec::Auto => WeightChoice::Auto,
                WeightSpec::Value(k) => WeightChoice::Fixed(k),
            },
            tol: self.tol,
            max_iter: self.max_iter,
            initial: None,
        };
        cfg.validate()
            .map_err(|e| ConfigError::InvalidValue(e.to_string()))?;
        Ok(cfg)
    }
}

/// Closed-form reference solutions a config may declare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExactSolution {
    /// `x(t) = sin t` in every component.
    Sin,
    /// `x(t) = t` in every component.
    T,
}

impl ExactSolution {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            ExactSolution::Sin => t.sin(),
            ExactSolution::T => t,
        }
    }

    pub fn sample(&self, grid: TimeGrid, dim: usize) -> GridFunction {
        GridFunction::from_fn(grid, dim, |t, out| out.fill(self.eval(t)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub name: String,
    #[serde(default = "default_dim")]
    pub dim: usize,
    pub grid_n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<ExactSolution>,
    pub kernel: ComponentSpec,
    pub rhs: ComponentSpec,
    #[serde(default)]
    pub controls: ControlsSpec,
    #[serde(default)]
    pub solver: SolverSpec,
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let column = before
        .rfind('\n')
        .map_or(before.len(), |p| before.len() - p - 1)
        + 1;
    (line, column)
}

impl ProblemConfig {
    pub fn from_toml_str(src: &str) -> Result<Self, ConfigError> {
        toml::from_str(src).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(src, s.start));
            ConfigError::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("problem config serializes")
    }

    /// Reads a config file, or a bundled preset for `builtin:<name>`.
    pub fn load(path: &str) -> Result<Self, ConfigError> {
        if let Some(name) = path.strip_prefix("builtin:") {
            return Self::preset(name);
        }
        let src = std::fs::read_to_string(Path::new(path)).map_err(|e| ConfigError::Io {
            path: path.to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&src)
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let (_, src) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))?;
        Self::from_toml_str(src)
    }

    pub fn solver_config(&self) -> Result<SolverConfig, ConfigError> {
        self.solver.to_config()
    }
}

pub type KernelFactory = Arc<
    dyn Fn(&[f64], usize) -> Result<(Arc<dyn Kernel>, KernelBounds), ConfigError> + Send + Sync,
>;
pub type RhsFactory =
    Arc<dyn Fn(&[f64], usize) -> Result<(Arc<dyn Rhs>, RhsBounds), ConfigError> + Send + Sync>;

/// Named kernel and right-hand-side constructors. Each factory receives the
/// parameter list and the state dimension and returns the evaluator together
/// with its growth metadata.
#[derive(Clone)]
pub struct Registry {
    kernels: BTreeMap<String, KernelFactory>,
    rhs: BTreeMap<String, RhsFactory>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("kernels", &self.kernels.keys().collect::<Vec<_>>())
            .field("rhs", &self.rhs.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Default for Registry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl Registry {
    pub fn empty() -> Self {
        Self {
            kernels: BTreeMap::new(),
            rhs: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        for name in KernelChoice::NAMES {
            reg.register_kernel(name, move |params, n| {
                let choice = KernelChoice::parse(name, params)?.expect("builtin kernel name");
                Ok((
                    builtins::kernel(&choice, n)?,
                    builtins::kernel_bounds(&choice),
                ))
            });
        }
        for name in RhsChoice::NAMES {
            reg.register_rhs(name, move |params, n| {
                let choice = RhsChoice::parse(name, params)?.expect("builtin rhs name");
                Ok((builtins::rhs(&choice, n)?, builtins::rhs_bounds(&choice, n)))
            });
        }
        reg
    }

    /// Adds or replaces a kernel constructor.
    pub fn register_kernel<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&[f64], usize) -> Result<(Arc<dyn Kernel>, KernelBounds), ConfigError>
            + Send
            + Sync
            + 'static,
    {
        self.kernels.insert(name.to_string(), Arc::new(factory));
    }

    /// Adds or replaces a right-hand-side constructor.
    pub fn register_rhs<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&[f64], usize) -> Result<(Arc<dyn Rhs>, RhsBounds), ConfigError>
            + Send
            + Sync
            + 'static,
    {
        self.rhs.insert(name.to_string(), Arc::new(factory));
    }

    pub fn kernel_names(&self) -> impl Iterator<Item = &str> {
        self.kernels.keys().map(String::as_str)
    }

    pub fn rhs_names(&self) -> impl Iterator<Item = &str> {
        self.rhs.keys().map(String::as_str)
    }

    pub fn build(&self, cfg: &ProblemConfig) -> Result<ProblemInstance, ConfigError> {
        if cfg.dim == 0 {
            return Err(ConfigError::InvalidValue("dim must be at least 1".into()));
        }
        let grid = TimeGrid::new(cfg.grid_n).map_err(ModelError::from)?;
        let kf = self
            .kernels
            .get(&cfg.kernel.kind)
            .ok_or_else(|| ConfigError::UnknownKernel(cfg.kernel.kind.clone()))?;
        let rf = self
            .rhs
            .get(&cfg.rhs.kind)
            .ok_or_else(|| ConfigError::UnknownRhs(cfg.rhs.kind.clone()))?;
        let (kernel, kb) = kf(&cfg.kernel.params, cfg.dim)?;
        let (rhs, rb) = rf(&cfg.rhs.params, cfg.dim)?;
        let u = control(&cfg.controls.u, "controls.u", grid, kernel.control_dim())?;
        let v = control(&cfg.controls.v, "controls.v", grid, rhs.control_dim())?;
        let growth = GrowthData::new(kb, rb)?;
        Ok(ProblemInstance::new(kernel, rhs, Arc::new(growth), u, v)?)
    }

    pub fn load(&self, path: &str) -> Result<(ProblemConfig, ProblemInstance), ConfigError> {
        let cfg = ProblemConfig::load(path)?;
        let p = self.build(&cfg)?;
        Ok((cfg, p))
    }
}

/// Loads and builds with the builtin registry.
pub fn load_problem(path: &str) -> Result<ProblemInstance, ConfigError> {
    Ok(Registry::with_builtins().load(path)?.1)
}

fn control(
    spec: &ControlSpec,
    what: &str,
    grid: TimeGrid,
    dim: usize,
) -> Result<GridFunction, ConfigError> {
    let expect = |count: &[usize]| -> Result<(), ConfigError> {
        if !count.contains(&spec.params.len()) {
            return Err(ConfigError::InvalidValue(format!(
                "{what}: `{}` takes {:?} parameters, got {}",
                spec.kind,
                count,
                spec.params.len()
            )));
        }
        if spec.params.iter().any(|p| !p.is_finite()) {
            return Err(ConfigError::InvalidValue(format!(
                "{what}: non-finite parameter"
            )));
        }
        Ok(())
    };
    if spec.kind != "values" && spec.values.is_some() {
        return Err(ConfigError::InvalidValue(format!(
            "{what}: `values` is only allowed with kind = \"values\""
        )));
    }
    match spec.kind.as_str() {
        "constant" => {
            expect(&[1])?;
            Ok(GridFunction::constant(grid, &vec![spec.params[0]; dim]))
        }
        "sine" => {
            expect(&[2, 3])?;
            let (amp, freq) = (spec.params[0], spec.params[1]);
            let phase = spec.params.get(2).copied().unwrap_or(0.0);
            Ok(GridFunction::from_fn(grid, dim, |t, out| {
                out.fill(amp * (freq * t + phase).sin())
            }))
        }
        "values" => {
            expect(&[0])?;
            let rows = spec.values.as_ref().ok_or_else(|| {
                ConfigError::InvalidValue(format!("{what}: kind = \"values\" needs `values`"))
            })?;
            if rows.len() != grid.n_nodes() {
                return Err(ConfigError::DimensionMismatch {
                    what: format!("{what}: node count"),
                    expected: grid.n_nodes(),
                    got: rows.len(),
                });
            }
            let mut flat = Vec::with_capacity(rows.len() * dim);
            for row in rows {
                if row.len() != dim {
                    return Err(ConfigError::DimensionMismatch {
                        what: what.to_string(),
                        expected: dim,
                        got: row.len(),
                    });
                }
                flat.extend_from_slice(row);
            }
            GridFunction::new(grid, dim, flat)
                .map_err(|e| ConfigError::InvalidValue(format!("{what}: {e}")))
        }
        other => Err(ConfigError::UnknownControl(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::DerivCoords;
    use crate::problem::residual_f;

    const ZERO_CONSTANT: &str = r#"
name = "z"
grid_n = 10
[kernel]
kind = "zero"
[rhs]
kind = "constant"
params = [2.5]
"#;

    #[test]
    fn zero_kernel_constant_rhs() {
        let p = Registry::with_builtins()
            .build(&ProblemConfig::from_toml_str(ZERO_CONSTANT).unwrap())
            .unwrap();
        let x = DerivCoords::from_derivative(GridFunction::constant(p.grid(), &[2.5]));
        assert_eq!(residual_f(&p, &x).unwrap().max_norm(), 0.0);
    }

    #[test]
    fn one_interval_is_rejected() {
        let src = ZERO_CONSTANT.replace("grid_n = 10", "grid_n = 1");
        let err = Registry::with_builtins()
            .build(&ProblemConfig::from_toml_str(&src).unwrap())
            .unwrap_err();
        assert_eq!(err.code(), "invalid_grid");
    }

    #[test]
    fn parse_errors_carry_position() {
        let src = "name = \"x\"\ngrid_n = \"ten\"\n";
        match ProblemConfig::from_toml_str(src).unwrap_err() {
            ConfigError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let err = ProblemConfig::from_toml_str("name = [").unwrap_err();
        assert_eq!(err.code(), "parse");
    }

    #[test]
    fn distinct_error_codes() {
        let reg = Registry::with_builtins();
        let build = |src: String| {
            reg.build(&ProblemConfig::from_toml_str(&src).unwrap())
                .unwrap_err()
        };
        assert_eq!(
            build(ZERO_CONSTANT.replace("\"zero\"", "\"nope\"")).code(),
            "unknown_kernel"
        );
        assert_eq!(
            build(ZERO_CONSTANT.replace("\"constant\"", "\"nope\"")).code(),
            "unknown_rhs"
        );
        assert_eq!(
            build(ZERO_CONSTANT.replace("[2.5]", "[1.0, 2.0]")).code(),
            "invalid_params"
        );
        let bad_values = format!(
            "{ZERO_CONSTANT}[controls.v]\nkind = \"values\"\nvalues = [{}]\n",
            ["[1.0, 2.0]"; 11].join(", ")
        );
        assert_eq!(build(bad_values).code(), "dimension_mismatch");
        let short_values =
            format!("{ZERO_CONSTANT}[controls.v]\nkind = \"values\"\nvalues = [[1.0]]\n");
        assert_eq!(build(short_values).code(), "dimension_mismatch");
        let bad_gen = format!("{ZERO_CONSTANT}[controls.u]\nkind = \"square\"\n");
        assert_eq!(build(bad_gen).code(), "unknown_control");
        assert_eq!(
            ProblemConfig::load("builtin:nope").unwrap_err().code(),
            "unknown_preset"
        );
        assert_eq!(
            ProblemConfig::load("/definitely/missing.toml")
                .unwrap_err()
                .code(),
            "io"
        );
    }

    #[test]
    fn weight_spec_forms() {
        let with_k = |k: &str| {
            ProblemConfig::from_toml_str(&format!("{ZERO_CONSTANT}[solver]\nk = {k}\n"))
                .map(|c| c.solver.k)
        };
        assert_eq!(with_k("\"auto\"").unwrap(), WeightSpec::Auto);
        assert_eq!(with_k("4.2").unwrap(), WeightSpec::Value(4.2));
        assert_eq!(with_k("3").unwrap(), WeightSpec::Value(3.0));
        assert!(with_k("\"fast\"").is_err());
    }

    #[test]
    fn presets_round_trip() {
        let reg = Registry::with_builtins();
        for (name, _) in PRESETS {
            let cfg = ProblemConfig::preset(name).unwrap();
            assert_eq!(&cfg.name, name);
            let again = ProblemConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
            assert_eq!(cfg, again);
            let (p, q) = (reg.build(&cfg).unwrap(), reg.build(&again).unwrap());
            assert_eq!(p.controls(), q.controls());
            assert_eq!(p.growth().norms(), q.growth().norms());
            let probe = GridFunction::from_fn(p.grid(), p.dim_n(), |t, o| o.fill(t.cos()));
            let x = DerivCoords::from_derivative(probe);
            assert_eq!(residual_f(&p, &x).unwrap(), residual_f(&q, &x).unwrap());
        }
    }

    #[test]
    fn values_control_round_trip() {
        let rows: Vec<String> = (0..=10).map(|i| format!("[{}]", 0.1 * i as f64)).collect();
        let src = format!(
            "{ZERO_CONSTANT}[controls.u]\nkind = \"values\"\nvalues = [{}]\n",
            rows.join(", ")
        );
        let cfg = ProblemConfig::from_toml_str(&src).unwrap();
        let again = ProblemConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, again);
        let p = Registry::with_builtins().build(&cfg).unwrap();
        assert_eq!(p.controls().u().node(3)[0], 0.1 * 3.0);
    }

    #[test]
    fn user_registered_kernel() {
        let mut reg = Registry::with_builtins();
        reg.register_kernel("doubled", |params, n| {
            let choice = KernelChoice::LinearScaled(2.0 * params[0]);
            Ok((
                builtins::kernel(&choice, n)?,
                builtins::kernel_bounds(&choice),
            ))
        });
        assert!(reg.kernel_names().any(|k| k == "doubled"));
        let src = ZERO_CONSTANT.replace("kind = \"zero\"", "kind = \"doubled\"\nparams = [0.5]");
        let p = reg
            .build(&ProblemConfig::from_toml_str(&src).unwrap())
            .unwrap();
        assert_eq!(p.growth().lip_m(), 1.0);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let src = format!("{ZERO_CONSTANT}\n[solver]\nspeed = 3\n");
        assert_eq!(
            ProblemConfig::from_toml_str(&src).unwrap_err().code(),
            "parse"
        );
    }

    #[test]
    fn line_col_counts_from_one() {
        assert_eq!(line_col("ab\ncd", 0), (1, 1));
        assert_eq!(line_col("ab\ncd", 4), (2, 2));
    }
}
