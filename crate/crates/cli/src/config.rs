//! Flag parsing, merging with a `--config` file and schema validation.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Map, Value};

use strip_spectra::model::PotentialSpec;

use crate::CliError;

pub const SCHEMA: &str = include_str!("../schema/run_config.schema.json");

#[derive(Debug, Parser)]
#[command(
    name = "strip-spectra",
    version,
    about = "Spectral diagnostics for random Schrodinger operators on a strip"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON run configuration; command-line flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory (default: current directory).
    #[arg(long, global = true)]
    pub out: Option<String>,

    /// Master seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Also write an SVG line chart next to every CSV.
    #[arg(long, global = true)]
    pub plot: bool,

    /// Worker threads.
    #[arg(long, global = true, env = "STRIP_SPECTRA_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct PotentialArgs {
    /// Potential family: zero, diagonal-iid or hermitian-gaussian.
    #[arg(long)]
    pub potential: Option<String>,
    /// Coupling `sigma` of the random potential.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Decay exponent `p` of `sigma (n+1)^{-p}`.
    #[arg(long)]
    pub decay: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the spectrum of the free strip and the common band.
    Bands {
        /// Eigenvalues of A, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        alpha: Vec<f64>,
    },
    /// Density estimate f_n on a grid.
    Density {
        /// Eigenvalues of A, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        alpha: Vec<f64>,
        #[command(flatten)]
        potential: PotentialArgs,
        /// Last site n.
        #[arg(long)]
        depth: Option<usize>,
        /// `a:b:points`
        #[arg(long, value_parser = parse_grid, allow_hyphen_values = true)]
        grid: Option<(f64, f64, usize)>,
        /// Real root vector, comma separated (default e_1).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x: Vec<f64>,
    },
    /// Per-step norms of the Schur recursion at one energy.
    SchurStats {
        /// Eigenvalues of A, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        alpha: Vec<f64>,
        #[command(flatten)]
        potential: PotentialArgs,
        /// Real energy.
        #[arg(long, allow_hyphen_values = true)]
        lambda: Option<f64>,
        /// `a:b`
        #[arg(long, value_parser = parse_interval, allow_hyphen_values = true)]
        interval: Option<(f64, f64)>,
        /// Last site n.
        #[arg(long)]
        depth: Option<usize>,
        /// Boundary index (default m*).
        #[arg(long)]
        m: Option<usize>,
    },
    /// Scan an interval for energies where the rank condition fails.
    RankScan {
        /// Eigenvalues of A, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        alpha: Vec<f64>,
        #[command(flatten)]
        potential: PotentialArgs,
        /// `a:b`
        #[arg(long, value_parser = parse_interval, allow_hyphen_values = true)]
        interval: Option<(f64, f64)>,
        /// Number of grid points.
        #[arg(long)]
        grid_points: Option<usize>,
        /// Last site n.
        #[arg(long)]
        depth: Option<usize>,
        /// Boundary index (default m*).
        #[arg(long)]
        m: Option<usize>,
    },
    /// Cross-check transfer matrices from boundary resolvent data against direct products.
    Verify {
        /// Strip width.
        #[arg(long)]
        l: Option<usize>,
        /// Eigenvalues of A, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        alpha: Vec<f64>,
        #[command(flatten)]
        potential: PotentialArgs,
        /// Last site n.
        #[arg(long)]
        depth: Option<usize>,
        /// Complex spectral parameter, e.g. `0.7+0.3i`.
        #[arg(long, value_parser = parse_complex, allow_hyphen_values = true)]
        z: Option<(f64, f64)>,
        /// Number of random samples.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Monte Carlo ensemble of Schur trajectories with bound checks.
    Mc {
        /// Eigenvalues of A, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        alpha: Vec<f64>,
        #[command(flatten)]
        potential: PotentialArgs,
        /// Number of random samples.
        #[arg(long)]
        samples: Option<usize>,
        /// Last site of every trajectory.
        #[arg(long)]
        n_end: Option<usize>,
        /// Boundary index (default 0).
        #[arg(long)]
        m: Option<usize>,
        /// Energies, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        lambdas: Vec<f64>,
        /// `a:b`
        #[arg(long, value_parser = parse_interval, allow_hyphen_values = true)]
        interval: Option<(f64, f64)>,
        /// Site compared against the last one in the plateau check.
        #[arg(long)]
        plateau_reference: Option<usize>,
    },
    /// Fold a random full-line operator onto a strip of twice the width.
    Fold {
        /// Eigenvalues of A, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        alpha: Vec<f64>,
        /// Last site n.
        #[arg(long)]
        depth: Option<usize>,
        /// Coupling of the full-line potential (default 1).
        #[arg(long)]
        sigma: Option<f64>,
    },
}

fn parse_f64(s: &str) -> Result<f64, String> {
    s.trim().parse::<f64>().map_err(|e| format!("`{s}`: {e}"))
}

pub fn parse_interval(s: &str) -> Result<(f64, f64), String> {
    match s.split(':').collect::<Vec<_>>()[..] {
        [a, b] => Ok((parse_f64(a)?, parse_f64(b)?)),
        _ => Err(format!("expected a:b, got `{s}`")),
    }
}

pub fn parse_grid(s: &str) -> Result<(f64, f64, usize), String> {
    match s.split(':').collect::<Vec<_>>()[..] {
        [a, b, n] => Ok((
            parse_f64(a)?,
            parse_f64(b)?,
            n.trim().parse().map_err(|e| format!("`{n}`: {e}"))?,
        )),
        _ => Err(format!("expected a:b:points, got `{s}`")),
    }
}

/// Parses `re`, `im i`, `re+im i` or `re-im i`.
pub fn parse_complex(s: &str) -> Result<(f64, f64), String> {
    let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    let Some(body) = t.strip_suffix('i').or_else(|| t.strip_suffix('j')) else {
        return Ok((parse_f64(&t)?, 0.0));
    };
    let bytes = body.as_bytes();
    let split = (1..bytes.len())
        .rev()
        .find(|&k| (bytes[k] == b'+' || bytes[k] == b'-') && !matches!(bytes[k - 1], b'e' | b'E'));
    let im = |part: &str| match part {
        "" | "+" => Ok(1.0),
        "-" => Ok(-1.0),
        p => parse_f64(p),
    };
    match split {
        Some(k) => Ok((parse_f64(&body[..k])?, im(&body[k..])?)),
        None => Ok((0.0, im(body)?)),
    }
}

fn insert<T: serde::Serialize>(map: &mut Map<String, Value>, key: &str, value: Option<T>) {
    if let Some(v) = value {
        map.insert(key.into(), json!(v));
    }
}

fn insert_list(map: &mut Map<String, Value>, key: &str, value: &[f64]) {
    if !value.is_empty() {
        map.insert(key.into(), json!(value));
    }
}

fn insert_interval(map: &mut Map<String, Value>, key: &str, value: Option<(f64, f64)>) {
    insert(map, key, value.map(|(a, b)| [a, b]));
}

fn potential_patch(p: &PotentialArgs) -> Option<Map<String, Value>> {
    let mut m = Map::new();
    insert(&mut m, "kind", p.potential.clone());
    insert(&mut m, "sigma", p.sigma);
    insert(&mut m, "p", p.decay);
    (!m.is_empty()).then_some(m)
}

impl Cli {
    pub fn command_name(&self) -> &'static str {
        match self.command {
            Command::Bands { .. } => "bands",
            Command::Density { .. } => "density",
            Command::SchurStats { .. } => "schur-stats",
            Command::RankScan { .. } => "rank-scan",
            Command::Verify { .. } => "verify",
            Command::Mc { .. } => "mc",
            Command::Fold { .. } => "fold",
        }
    }

    /// The flags that were actually given, as a partial run configuration.
    pub fn flag_document(&self) -> (Map<String, Value>, Option<Map<String, Value>>) {
        let mut m = Map::new();
        m.insert("command".into(), json!(self.command_name()));
        insert(&mut m, "out", self.out.clone());
        insert(&mut m, "seed", self.seed);
        insert(&mut m, "threads", self.threads);
        if self.plot {
            m.insert("plot".into(), json!(true));
        }
        let potential = match &self.command {
            Command::Bands { alpha } => {
                insert_list(&mut m, "alpha", alpha);
                None
            }
            Command::Density {
                alpha,
                potential,
                depth,
                grid,
                x,
            } => {
                insert_list(&mut m, "alpha", alpha);
                insert(&mut m, "depth", *depth);
                insert(
                    &mut m,
                    "grid",
                    grid.map(|(a, b, points)| json!({"a": a, "b": b, "points": points})),
                );
                insert_list(&mut m, "x", x);
                potential_patch(potential)
            }
            Command::SchurStats {
                alpha,
                potential,
                lambda,
                interval,
                depth,
                m: bm,
            } => {
                insert_list(&mut m, "alpha", alpha);
                insert(&mut m, "lambda", *lambda);
                insert_interval(&mut m, "interval", *interval);
                insert(&mut m, "depth", *depth);
                insert(&mut m, "m", *bm);
                potential_patch(potential)
            }
            Command::RankScan {
                alpha,
                potential,
                interval,
                grid_points,
                depth,
                m: bm,
            } => {
                insert_list(&mut m, "alpha", alpha);
                insert_interval(&mut m, "interval", *interval);
                insert(&mut m, "grid_points", *grid_points);
                insert(&mut m, "depth", *depth);
                insert(&mut m, "m", *bm);
                potential_patch(potential)
            }
            Command::Verify {
                l,
                alpha,
                potential,
                depth,
                z,
                samples,
            } => {
                insert(&mut m, "l", *l);
                insert_list(&mut m, "alpha", alpha);
                insert(&mut m, "depth", *depth);
                insert(&mut m, "z", z.map(|(re, im)| json!({"re": re, "im": im})));
                insert(&mut m, "samples", *samples);
                potential_patch(potential)
            }
            Command::Mc {
                alpha,
                potential,
                samples,
                n_end,
                m: bm,
                lambdas,
                interval,
                plateau_reference,
            } => {
                insert_list(&mut m, "alpha", alpha);
                insert(&mut m, "num_samples", *samples);
                insert(&mut m, "n_end", *n_end);
                insert(&mut m, "m", *bm);
                insert_list(&mut m, "lambdas", lambdas);
                insert_interval(&mut m, "interval", *interval);
                insert(&mut m, "plateau_reference", *plateau_reference);
                potential_patch(potential)
            }
            Command::Fold {
                alpha,
                depth,
                sigma,
            } => {
                insert_list(&mut m, "alpha", alpha);
                insert(&mut m, "depth", *depth);
                insert(&mut m, "sigma", *sigma);
                None
            }
        };
        (m, potential)
    }

    /// Merged and schema-validated run configuration.
    pub fn resolve(&self) -> Result<Value, CliError> {
        let mut doc = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Config(format!("cannot read {}: {e}", path.display()))
                })?;
                match serde_json::from_str::<Value>(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => {
                        return Err(CliError::Config(format!(
                            "{}: top level must be an object",
                            path.display()
                        )))
                    }
                    Err(e) => return Err(CliError::Config(format!("{}: {e}", path.display()))),
                }
            }
            None => Map::new(),
        };
        if let Some(cmd) = doc.get("command").and_then(Value::as_str) {
            if cmd != self.command_name() {
                return Err(CliError::Config(format!(
                    "config file is for `{cmd}`, but `{}` was invoked",
                    self.command_name()
                )));
            }
        }
        let (flags, potential) = self.flag_document();
        doc.extend(flags);
        if let Some(patch) = potential {
            let entry = doc.entry("potential").or_insert_with(|| json!({}));
            if let Value::Object(p) = entry {
                p.extend(patch);
            }
        }
        let doc = Value::Object(doc);
        validate(&doc)?;
        Ok(doc)
    }
}

pub fn validate(doc: &Value) -> Result<(), CliError> {
    let schema: Value = serde_json::from_str(SCHEMA).expect("bundled schema is valid JSON");
    let compiled = jsonschema::JSONSchema::compile(&schema).expect("bundled schema compiles");
    let result = compiled.validate(doc);
    if let Err(errors) = result {
        let mut lines: Vec<String> = errors
            .map(|e| {
                let path = e.instance_path.to_string();
                format!("  at `{}`: {e}", if path.is_empty() { "/" } else { &path })
            })
            .collect();
        lines.sort();
        lines.dedup();
        return Err(CliError::Config(format!(
            "configuration does not match the schema:\n{}",
            lines.join("\n")
        )));
    }
    Ok(())
}

pub fn typed<T: for<'de> Deserialize<'de>>(doc: &Value) -> Result<T, CliError> {
    serde_json::from_value(doc.clone()).map_err(|e| CliError::Config(e.to_string()))
}

#[derive(Debug, Deserialize)]
pub struct Common {
    #[serde(default)]
    pub out: Option<String>,
    #[serde(default)]
    pub plot: bool,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn zero_potential() -> PotentialSpec {
    PotentialSpec::zero()
}

fn unit_gaussian() -> PotentialSpec {
    PotentialSpec::hermitian_gaussian(1.0, 0.0)
}

#[derive(Debug, Deserialize)]
pub struct BandsConfig {
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
pub struct Grid {
    pub a: f64,
    pub b: f64,
    pub points: usize,
}

#[derive(Debug, Deserialize)]
pub struct DensityConfig {
    pub alpha: Vec<f64>,
    #[serde(default = "zero_potential")]
    pub potential: PotentialSpec,
    pub depth: usize,
    pub grid: Grid,
    #[serde(default)]
    pub x: Vec<f64>,
}

#[derive(Debug, Deserialize)]
pub struct SchurStatsConfig {
    pub alpha: Vec<f64>,
    #[serde(default = "zero_potential")]
    pub potential: PotentialSpec,
    pub lambda: f64,
    pub interval: (f64, f64),
    pub depth: usize,
    pub m: Option<usize>,
}

fn default_grid_points() -> usize {
    401
}

fn default_scan_depth() -> usize {
    400
}

#[derive(Debug, Deserialize)]
pub struct RankScanCliConfig {
    pub alpha: Vec<f64>,
    #[serde(default = "zero_potential")]
    pub potential: PotentialSpec,
    pub interval: (f64, f64),
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_scan_depth")]
    pub depth: usize,
    pub m: Option<usize>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
pub struct ComplexValue {
    pub re: f64,
    pub im: f64,
}

#[derive(Debug, Deserialize)]
pub struct VerifyConfig {
    pub l: usize,
    #[serde(default)]
    pub alpha: Vec<f64>,
    #[serde(default = "unit_gaussian")]
    pub potential: PotentialSpec,
    pub depth: usize,
    pub z: ComplexValue,
    pub samples: usize,
}

#[derive(Debug, Deserialize)]
pub struct McConfig {
    pub alpha: Vec<f64>,
    #[serde(default = "zero_potential")]
    pub potential: PotentialSpec,
    pub num_samples: usize,
    pub n_end: usize,
    #[serde(default)]
    pub m: usize,
    pub lambdas: Vec<f64>,
    pub interval: (f64, f64),
    pub plateau_reference: Option<usize>,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
pub struct FoldConfig {
    pub alpha: Vec<f64>,
    pub depth: usize,
    #[serde(default = "unit")]
    pub sigma: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complex_forms() {
        assert_eq!(parse_complex("0.7+0.3i").unwrap(), (0.7, 0.3));
        assert_eq!(parse_complex("0.7-0.3i").unwrap(), (0.7, -0.3));
        assert_eq!(parse_complex("-1e-3+2e-1i").unwrap(), (-1e-3, 0.2));
        assert_eq!(parse_complex("2.5").unwrap(), (2.5, 0.0));
        assert_eq!(parse_complex("-i").unwrap(), (0.0, -1.0));
        assert_eq!(parse_complex("0.5i").unwrap(), (0.0, 0.5));
        assert!(parse_complex("abc").is_err());
    }

    #[test]
    fn ranges() {
        assert_eq!(parse_interval("-1:1").unwrap(), (-1.0, 1.0));
        assert_eq!(parse_grid("-1:1:512").unwrap(), (-1.0, 1.0, 512));
        assert!(parse_grid("-1:1").is_err());
    }

    #[test]
    fn schema_rejects_unknown_and_missing_fields() {
        assert!(validate(&json!({"command": "bands", "alpha": [0.0, 5.0]})).is_ok());
        assert!(validate(&json!({"command": "bands"})).is_err());
        assert!(validate(&json!({"command": "bands", "alpha": [0.0], "bogus": 1})).is_err());
        let bad = json!({"command": "density", "alpha": [0.0], "depth": 3,
                         "grid": {"a": -1.0, "b": 1.0, "points": 8},
                         "potential": {"kind": "hermitian-gaussian"}});
        assert!(validate(&bad).is_err());
    }
}
