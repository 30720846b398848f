//! Run configuration in a sectioned `key = value` format.
//!
//! ```text
//! [potential]
//! centre = 1 0 0.5
//! centre = -1 0 0.5
//!
//! [geometry]
//! R = 0.4
//! delta = 0.6
//! epsilon = 0.05
//!
//! [symbols]
//! partition = {0}|{1}
//! partition = {0}|{1}
//!
//! [solver]
//! optimizer_tol = 1e-8
//!
//! [sweep]
//! epsilons = 0.1 0.05 0.025 0.0125
//! ```
//!
//! Every problem found is reported, each with its line and column when it
//! comes from a specific entry.

use std::fmt;
use std::path::PathBuf;

use ncentre_core::exec::Execution;
use ncentre_core::glue::GlueSettings;
use ncentre_core::inner_arcs::{InnerSettings, Partition};
use ncentre_core::outer_arcs::OuterSettings;
use ncentre_core::potential::{Centre, PotentialConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Energy residual bound of accepted arcs.
    pub integration_tol: f64,
    /// Bound on the largest per-junction derivative of F.
    pub optimizer_tol: f64,
    pub c1_tolerance: f64,
    pub max_sweeps: usize,
    /// Initial vectors tried by the multi-start; the first uses `offset`.
    pub starts: usize,
    pub offset: f64,
    pub execution: Execution,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let g = GlueSettings::default();
        Self {
            integration_tol: 1e-9,
            optimizer_tol: g.tol,
            c1_tolerance: g.c1_tolerance,
            max_sweeps: g.max_sweeps,
            starts: 4,
            offset: 0.0,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub epsilons: Vec<f64>,
    /// Midpoint angles of the chord-delta outer pairs (each in both orientations).
    pub outer_pairs: usize,
    pub inner_pairs: usize,
    /// Numbers of inner legs in the interiority experiment.
    pub ns: Vec<usize>,
    /// Random configurations of the gradient check.
    pub gradient_configs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            epsilons: vec![0.1, 0.05, 0.025, 0.0125],
            outer_pairs: 16,
            inner_pairs: 20,
            ns: vec![1, 2, 3],
            gradient_configs: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub potential: PotentialConfig,
    pub partitions: Vec<Partition>,
    /// Explicit junction angles for `export`.
    pub angles: Option<Vec<f64>>,
    pub solver: SolverConfig,
    pub sweep: SweepConfig,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
}

impl RunConfig {
    pub fn glue_settings(&self) -> GlueSettings {
        let s = &self.solver;
        GlueSettings {
            outer: OuterSettings::from_tol(s.integration_tol),
            inner: InnerSettings::from_tol(s.integration_tol),
            tol: s.optimizer_tol,
            c1_tolerance: s.c1_tolerance,
            max_sweeps: s.max_sweeps,
            exec: s.execution,
            ..GlueSettings::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl ConfigError {
    /// Line 0 marks command-line overrides, which carry no position.
    fn at(line: usize, column: usize, message: impl Into<String>) -> Self {
        Self {
            line: (line > 0).then_some(line),
            column: (line > 0).then_some(column),
            message: message.into(),
        }
    }

    fn global(message: impl Into<String>) -> Self {
        Self {
            line: None,
            column: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.column) {
            (Some(l), Some(c)) => write!(f, "line {l}, column {c}: {}", self.message),
            (Some(l), None) => write!(f, "line {l}: {}", self.message),
            _ => write!(f, "{}", self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Debug, Clone)]
struct Entry {
    section: String,
    key: String,
    value: String,
    line: usize,
    /// Column of the value.
    column: usize,
}

const SECTIONS: [&str; 6] = ["potential", "geometry", "symbols", "solver", "sweep", "output"];

fn lex(text: &str, errors: &mut Vec<ConfigError>) -> Vec<Entry> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("");
        let trimmed = content.trim();
        if trimmed.is_empty() {
            continue;
        }
        let indent = content.len() - content.trim_start().len() + 1;
        if let Some(rest) = trimmed.strip_prefix('[') {
            match rest.strip_suffix(']') {
                Some(name) if SECTIONS.contains(&name.trim()) => section = name.trim().to_string(),
                Some(name) if !name.trim().is_empty() => {
                    errors.push(ConfigError::at(line, indent, format!("unknown section [{}]", name.trim())));
                    section = name.trim().to_string();
                }
                _ => errors.push(ConfigError::at(line, indent, "malformed section header")),
            }
            continue;
        }
        let Some(eq) = content.find('=') else {
            errors.push(ConfigError::at(line, indent, "expected `key = value`"));
            continue;
        };
        let key = content[..eq].trim();
        let value = content[eq + 1..].trim();
        if key.is_empty() {
            errors.push(ConfigError::at(line, indent, "missing key before `=`"));
            continue;
        }
        if section.is_empty() {
            errors.push(ConfigError::at(line, indent, format!("`{key}` appears before any section")));
            continue;
        }
        let after = &content[eq + 1..];
        let column = eq + 2 + (after.len() - after.trim_start().len());
        out.push(Entry {
            section: section.clone(),
            key: key.to_string(),
            value: value.to_string(),
            line,
            column,
        });
    }
    out
}

fn parse_f64(e: &Entry, errors: &mut Vec<ConfigError>) -> Option<f64> {
    match e.value.parse::<f64>() {
        Ok(v) if v.is_finite() => Some(v),
        _ => {
            errors.push(ConfigError::at(e.line, e.column, format!("`{}`: expected a number, got `{}`", e.key, e.value)));
            None
        }
    }
}

fn parse_usize(e: &Entry, errors: &mut Vec<ConfigError>) -> Option<usize> {
    e.value.parse::<usize>().map_err(|_| {
        errors.push(ConfigError::at(e.line, e.column, format!("`{}`: expected a non-negative integer, got `{}`", e.key, e.value)));
    }).ok()
}

fn parse_list<T: std::str::FromStr>(e: &Entry, errors: &mut Vec<ConfigError>) -> Option<Vec<T>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for tok in e.value.split(|c: char| c.is_whitespace() || c == ',') {
        if !tok.is_empty() {
            match tok.parse::<T>() {
                Ok(v) => out.push(v),
                Err(_) => {
                    let col = e.column + e.value[offset..].find(tok).map_or(0, |p| p + offset);
                    errors.push(ConfigError::at(e.line, col, format!("`{}`: cannot parse `{tok}`", e.key)));
                    return None;
                }
            }
        }
        offset += tok.len() + 1;
    }
    Some(out)
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigErrors> {
    parse_config_with(text, &[])
}

/// Like [`parse_config`], with `key=value` overrides applied after the file.
/// Keys default to the `[solver]` section; `section.key` selects another.
pub fn parse_config_with(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigErrors> {
    let mut errors = Vec::new();
    let mut entries = lex(text, &mut errors);
    for o in overrides {
        match o.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => {
                let (section, key) = k.trim().split_once('.').unwrap_or(("solver", k.trim()));
                entries.push(Entry {
                    section: section.to_string(),
                    key: key.to_string(),
                    value: v.trim().to_string(),
                    line: 0,
                    column: 0,
                });
            }
            _ => errors.push(ConfigError::global(format!("override `{o}`: expected key=value"))),
        }
    }

    let defaults = PotentialConfig::default();
    let mut centres = Vec::new();
    let (mut radius, mut delta, mut epsilon) = (defaults.radius, defaults.delta, defaults.epsilon);
    let mut labels: Vec<&Entry> = Vec::new();
    let mut angles = None;
    let mut solver = SolverConfig::default();
    let mut sweep = SweepConfig::default();
    let mut out_dir = None;
    let mut seed = 0u64;

    for e in &entries {
        let errs = &mut errors;
        match (e.section.as_str(), e.key.as_str()) {
            ("potential", "centre" | "center") => {
                if let Some(v) = parse_list::<f64>(e, errs) {
                    if v.len() == 3 && v.iter().all(|x| x.is_finite()) {
                        centres.push(Centre::new(v[0], v[1], v[2]));
                    } else {
                        errs.push(ConfigError::at(e.line, e.column, "`centre` needs three numbers: x y mass"));
                    }
                }
            }
            ("geometry", "R" | "radius") => radius = parse_f64(e, errs).unwrap_or(radius),
            ("geometry", "delta") => delta = parse_f64(e, errs).unwrap_or(delta),
            ("geometry", "epsilon") => epsilon = parse_f64(e, errs).unwrap_or(epsilon),
            ("symbols", "partition") => labels.push(e),
            ("symbols", "angles") => angles = parse_list::<f64>(e, errs),
            ("solver", "integration_tol") => solver.integration_tol = parse_f64(e, errs).unwrap_or(solver.integration_tol),
            ("solver", "optimizer_tol") => solver.optimizer_tol = parse_f64(e, errs).unwrap_or(solver.optimizer_tol),
            ("solver", "c1_tolerance") => solver.c1_tolerance = parse_f64(e, errs).unwrap_or(solver.c1_tolerance),
            ("solver", "max_sweeps") => solver.max_sweeps = parse_usize(e, errs).unwrap_or(solver.max_sweeps),
            ("solver", "starts") => solver.starts = parse_usize(e, errs).unwrap_or(solver.starts),
            ("solver", "offset") => solver.offset = parse_f64(e, errs).unwrap_or(solver.offset),
            ("solver", "seed") => seed = e.value.parse().unwrap_or_else(|_| {
                errs.push(ConfigError::at(e.line, e.column, "`seed`: expected an unsigned integer"));
                0
            }),
            ("solver", "execution") => match e.value.as_str() {
                "parallel" => solver.execution = Execution::Parallel,
                "sequential" => solver.execution = Execution::Sequential,
                other => errs.push(ConfigError::at(e.line, e.column, format!("`execution`: expected parallel or sequential, got `{other}`"))),
            },
            ("sweep", "epsilons") => sweep.epsilons = parse_list(e, errs).unwrap_or_default(),
            ("sweep", "outer_pairs") => sweep.outer_pairs = parse_usize(e, errs).unwrap_or(sweep.outer_pairs),
            ("sweep", "inner_pairs") => sweep.inner_pairs = parse_usize(e, errs).unwrap_or(sweep.inner_pairs),
            ("sweep", "ns") => sweep.ns = parse_list(e, errs).unwrap_or_default(),
            ("sweep", "gradient_configs") => sweep.gradient_configs = parse_usize(e, errs).unwrap_or(sweep.gradient_configs),
            ("output", "dir") => out_dir = Some(PathBuf::from(&e.value)),
            (s, k) if SECTIONS.contains(&s) => errs.push(ConfigError::at(e.line, 1, format!("unknown key `{k}` in [{s}]"))),
            (s, _) if e.line == 0 => errs.push(ConfigError::global(format!("unknown section [{s}]"))),
            _ => {}
        }
    }

    if centres.is_empty() {
        centres = defaults.centres.clone();
    }
    let potential = PotentialConfig::new(centres, epsilon, radius, delta);
    errors.extend(potential.violations().into_iter().map(ConfigError::global));

    let n_centres = potential.centres.len();
    let mut partitions = Vec::new();
    for e in &labels {
        match Partition::parse(&e.value, n_centres) {
            Ok(p) => partitions.push(p),
            Err(err) => errors.push(ConfigError::at(e.line, e.column, format!("`partition`: {err}"))),
        }
    }
    if labels.is_empty() {
        match Partition::all_two_block(n_centres).first() {
            Some(p) => partitions = vec![p.clone(); 2],
            None => errors.push(ConfigError::global("a partition needs at least two centres")),
        }
    }
    if let Some(a) = &angles {
        if a.len() != 2 * partitions.len() {
            errors.push(ConfigError::global(format!(
                "`angles` needs {} values for {} partition symbols",
                2 * partitions.len(),
                partitions.len()
            )));
        }
    }

    for (name, v) in [
        ("integration_tol", solver.integration_tol),
        ("optimizer_tol", solver.optimizer_tol),
        ("c1_tolerance", solver.c1_tolerance),
    ] {
        if !(v > 0.0) {
            errors.push(ConfigError::global(format!("{name} must be positive")));
        }
    }
    if solver.starts == 0 {
        errors.push(ConfigError::global("starts must be at least 1"));
    }
    if sweep.epsilons.is_empty() {
        errors.push(ConfigError::global("the epsilon grid must not be empty"));
    }
    if sweep.epsilons.iter().any(|&e| !(e >= 0.0 && e < 0.5 * radius)) {
        errors.push(ConfigError::global("grid epsilons must satisfy 0 <= epsilon < R/2"));
    }
    if sweep.ns.is_empty() || sweep.ns.contains(&0) {
        errors.push(ConfigError::global("ns must be a non-empty list of positive integers"));
    }
    if sweep.outer_pairs < 16 {
        errors.push(ConfigError::global("outer_pairs must be at least 16"));
    }
    if sweep.inner_pairs == 0 || sweep.gradient_configs == 0 {
        errors.push(ConfigError::global("inner_pairs and gradient_configs must be positive"));
    }

    if errors.is_empty() {
        Ok(RunConfig {
            potential,
            partitions,
            angles,
            solver,
            sweep,
            out_dir,
            seed,
        })
    } else {
        Err(ConfigErrors(errors))
    }
}
