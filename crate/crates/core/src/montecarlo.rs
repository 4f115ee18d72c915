//! Ensembles over the random potential and empirical checks of the
//! trajectory bounds of the Schur recursion.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::{spectral_gap, SpectralGap};
use crate::error::{Error, Result};
use crate::linalg::{self, c, CMat};
use crate::model::{sample_potential_keyed, OperatorModel, StreamKey};
use crate::schur::SchurStepper;
use crate::transfer::{conjugated_step, truncate_with_threshold};

/// Largest tolerated fraction of failed trajectories.
pub const FAILURE_CAP: f64 = 1e-3;

/// Stream key of sample `sample_index` under `master_seed`.
pub fn seed_plan(master_seed: u64, sample_index: u64) -> StreamKey {
    StreamKey::new(master_seed, sample_index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub num_samples: usize,
    /// Last site of every trajectory.
    pub n_end: usize,
    /// First site of every trajectory.
    #[serde(default)]
    pub m: usize,
    /// Real spectral parameters; all must lie in `[a, b]`.
    pub lambdas: Vec<f64>,
    /// Interval defining the uniform gap, truncation threshold and `C_Q`.
    pub interval: (f64, f64),
    pub master_seed: u64,
    /// Plateau check compares the mean of `||X||^4` at `n_end` with the one at this step count.
    #[serde(default)]
    pub plateau_reference: Option<usize>,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::Config("num_samples must be at least 1".into()));
        }
        if self.n_end <= self.m {
            return Err(Error::Config(format!(
                "n_end = {} must exceed m = {}",
                self.n_end, self.m
            )));
        }
        if self.lambdas.is_empty() {
            return Err(Error::Config("lambdas is empty".into()));
        }
        let (a, b) = self.interval;
        if let Some(l) = self.lambdas.iter().find(|&&l| !(a <= l && l <= b)) {
            return Err(Error::Config(format!("lambda {l} outside [{a}, {b}]")));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.n_end - self.m + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub name: String,
    pub theoretical_bound: f64,
    pub empirical: f64,
    /// `theoretical_bound - empirical`.
    pub margin: f64,
    pub pass: bool,
}

impl BoundRecord {
    fn upper(name: &str, bound: f64, empirical: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            theoretical_bound: bound,
            empirical,
            margin: bound - empirical,
            pass: empirical <= bound + tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub records: Vec<BoundRecord>,
    pub samples: usize,
    pub failures: usize,
    pub failure_messages: Vec<String>,
    pub gap: SpectralGap,
}

impl BoundReport {
    pub fn all_pass(&self) -> bool {
        self.records.iter().all(|r| r.pass)
            && (self.failures as f64) <= FAILURE_CAP * self.samples as f64
    }

    pub fn record(&self, name: &str) -> Option<&BoundRecord> {
        self.records.iter().find(|r| r.name == name)
    }
}

/// Per-step statistics at one spectral parameter. Index `k` is the state
/// after consuming site `m + k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub site: usize,
    pub mean_x4: f64,
    pub se_x4: f64,
    /// Running maximum of `mean_x4`.
    pub running_max_x4: f64,
    pub max_z: f64,
    /// `sum_{k <= site} (||mean W_k|| + mean ||W_k||^2)`.
    pub c_w_partial: f64,
    pub truncation_frequency: f64,
    /// `16 C_Q^4 / (e^{2g} - e^g)^2 * E||V_site||^2`.
    pub chebyshev_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaTable {
    pub lambda: f64,
    pub rows: Vec<StepRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub report: BoundReport,
    pub tables: Vec<LambdaTable>,
}

impl EnsembleResult {
    /// Per-step table as CSV (all spectral parameters stacked).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "lambda,site,mean_x4,se_x4,running_max_x4,max_z,c_w_partial,truncation_frequency,chebyshev_bound\n",
        );
        for t in &self.tables {
            for r in &t.rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    t.lambda,
                    r.site,
                    r.mean_x4,
                    r.se_x4,
                    r.running_max_x4,
                    r.max_z,
                    r.c_w_partial,
                    r.truncation_frequency,
                    r.chebyshev_bound
                ));
            }
        }
        out
    }
}

/// One trajectory's contribution at one spectral parameter.
#[derive(Debug, Clone)]
struct Trajectory {
    x4: Vec<f64>,
    z: Vec<f64>,
    /// `log ||D_n^{-1}|| + n log((e^{2g} + e^g) / 2)`, maximized over `n`.
    max_log_decay_excess: f64,
    w: Vec<CMat>,
    w2: Vec<f64>,
}

/// Samples mapped in parallel before each ordered fold.
const CHUNK: usize = 256;

struct LambdaAccumulator {
    s1: Vec<f64>,
    s2: Vec<f64>,
    max_z: Vec<f64>,
    w_sum: Vec<CMat>,
    w2_sum: Vec<f64>,
    max_log_decay_excess: f64,
}

impl LambdaAccumulator {
    fn new(steps: usize, dim: usize) -> Self {
        Self {
            s1: vec![0.0; steps],
            s2: vec![0.0; steps],
            max_z: vec![0.0; steps],
            w_sum: vec![linalg::zeros(dim, dim); steps],
            w2_sum: vec![0.0; steps],
            max_log_decay_excess: f64::NEG_INFINITY,
        }
    }

    fn add(&mut self, t: &Trajectory) {
        for k in 0..self.s1.len() {
            self.s1[k] += t.x4[k];
            self.s2[k] += t.x4[k] * t.x4[k];
            self.max_z[k] = self.max_z[k].max(t.z[k]);
            self.w_sum[k] += &t.w[k];
            self.w2_sum[k] += t.w2[k];
        }
        self.max_log_decay_excess = self.max_log_decay_excess.max(t.max_log_decay_excess);
    }
}

#[derive(Debug, Clone)]
struct SampleStats {
    /// Per site `n` in `m..=n_end`: truncated flag and `||V_n||^2`.
    truncated: Vec<bool>,
    v2: Vec<f64>,
    per_lambda: std::result::Result<Vec<Trajectory>, String>,
}

fn run_sample(
    model: &OperatorModel,
    config: &EnsembleConfig,
    gap: &SpectralGap,
    index: usize,
) -> SampleStats {
    let key = seed_plan(config.master_seed, index as u64);
    let sample = sample_potential_keyed(model, config.n_end + 1, key);
    let truncated = truncate_with_threshold(&sample, gap.threshold());
    let mut flags = vec![false; config.n_end + 1];
    for &n in &truncated.zeroed {
        flags[n] = true;
    }
    let v2 = sample.matrices[config.m..]
        .iter()
        .map(|v| linalg::op_norm(v).powi(2))
        .collect();
    let decay_log = (((2.0 * gap.gap).exp() + gap.gap.exp()) / 2.0).ln();
    let per_lambda = config
        .lambdas
        .iter()
        .map(|&lam| -> Result<Trajectory> {
            let split = gap.split_at(model, c(lam, 0.0));
            let stepper = SchurStepper::from_split(&split)?;
            let mut state = stepper.init();
            let steps = config.steps();
            let mut t = Trajectory {
                x4: Vec::with_capacity(steps),
                z: Vec::with_capacity(steps),
                max_log_decay_excess: f64::NEG_INFINITY,
                w: Vec::with_capacity(steps),
                w2: Vec::with_capacity(steps),
            };
            for site in config.m..=config.n_end {
                let (_, w) = conjugated_step(&split, &truncated.sample, site)?;
                state = stepper.step(&state, &w)?;
                let x_log = state.x_log_norm();
                if !x_log.is_finite() {
                    return Err(Error::Overflow { step: site });
                }
                t.x4.push((4.0 * x_log).exp());
                t.z.push(state.z_norm());
                if split.l_h > 0 {
                    let excess = state.dinv_log_norm() + state.n as f64 * decay_log;
                    t.max_log_decay_excess = t.max_log_decay_excess.max(excess);
                }
                t.w2.push(linalg::op_norm(&w).powi(2));
                t.w.push(w);
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| format!("sample {index}: {e}"));
    SampleStats {
        truncated: flags[config.m..].to_vec(),
        v2,
        per_lambda,
    }
}

/// Runs `num_samples` trajectories at every spectral parameter and checks the
/// bounds on `||Z_n||`, `||D_n^{-1}||`, the plateau of `E||X_n||^4` and the
/// truncation frequency.
pub fn ensemble_run(model: &OperatorModel, config: &EnsembleConfig) -> Result<EnsembleResult> {
    config.validate()?;
    let gap = spectral_gap(model, config.interval.0, config.interval.1)?;
    let steps = config.steps();
    let nl = config.lambdas.len();
    let l2 = 2 * model.l;

    let mut acc: Vec<LambdaAccumulator> =
        (0..nl).map(|_| LambdaAccumulator::new(steps, l2)).collect();
    let mut trunc_hits = vec![0usize; steps];
    let mut v2_sum = vec![0.0; steps];
    let mut failure_messages = Vec::new();
    let mut ok_count = 0usize;
    // parallel map over a chunk, then an ordered fold
    for chunk_start in (0..config.num_samples).step_by(CHUNK) {
        let chunk_end = (chunk_start + CHUNK).min(config.num_samples);
        let stats: Vec<SampleStats> = (chunk_start..chunk_end)
            .into_par_iter()
            .map(|i| run_sample(model, config, &gap, i))
            .collect();
        for s in stats {
            for k in 0..steps {
                trunc_hits[k] += s.truncated[k] as usize;
                v2_sum[k] += s.v2[k];
            }
            match s.per_lambda {
                Ok(ts) => {
                    ok_count += 1;
                    for (a, t) in acc.iter_mut().zip(&ts) {
                        a.add(t);
                    }
                }
                Err(e) => failure_messages.push(e),
            }
        }
    }
    if ok_count == 0 {
        return Err(Error::Config(format!(
            "all {} trajectories failed",
            config.num_samples
        )));
    }
    let count = ok_count as f64;
    let total = config.num_samples as f64;
    let threshold = gap.threshold();
    let trunc_freq: Vec<f64> = trunc_hits.iter().map(|&h| h as f64 / total).collect();
    let cheb: Vec<f64> = v2_sum
        .iter()
        .map(|&v| v / total / (threshold * threshold))
        .collect();

    let mut tables = Vec::with_capacity(nl);
    let mut max_z = 0.0_f64;
    let mut max_decay = f64::NEG_INFINITY;
    let mut plateau_ratio = 0.0_f64;
    for (li, a) in acc.iter().enumerate() {
        let mut rows = Vec::with_capacity(steps);
        let mut running = 0.0_f64;
        let mut c_w = 0.0;
        let mut lambda_max_z = 0.0_f64;
        for k in 0..steps {
            let mean = a.s1[k] / count;
            let var = if count > 1.0 {
                (a.s2[k] / count - mean * mean).max(0.0) * count / (count - 1.0)
            } else {
                0.0
            };
            running = running.max(mean);
            lambda_max_z = lambda_max_z.max(a.max_z[k]);
            c_w += linalg::op_norm(&(&a.w_sum[k] / c(count, 0.0))) + a.w2_sum[k] / count;
            rows.push(StepRow {
                site: config.m + k,
                mean_x4: mean,
                se_x4: (var / count).sqrt(),
                running_max_x4: running,
                max_z: lambda_max_z,
                c_w_partial: c_w,
                truncation_frequency: trunc_freq[k],
                chebyshev_bound: cheb[k],
            });
        }
        max_decay = max_decay.max(a.max_log_decay_excess);
        max_z = max_z.max(lambda_max_z);
        let reference = config
            .plateau_reference
            .unwrap_or(steps / 2)
            .clamp(1, steps);
        let ratio = rows[steps - 1].mean_x4 / rows[reference - 1].mean_x4;
        plateau_ratio = plateau_ratio.max(ratio);
        tables.push(LambdaTable {
            lambda: config.lambdas[li],
            rows,
        });
    }

    let mut records = vec![BoundRecord::upper("sup-z", 1.0, max_z, 1e-12)];
    if gap.l_h > 0 {
        let ratio = max_decay.exp();
        records.push(BoundRecord::upper("d-inverse-decay", 1.0, ratio, 1e-9));
    }
    records.push(BoundRecord::upper("x4-plateau", 1.5, plateau_ratio, 0.0));
    let running_max = tables
        .iter()
        .map(|t| t.rows[steps - 1].running_max_x4)
        .fold(0.0, f64::max);
    records.push(BoundRecord {
        name: "x4-running-max-finite".into(),
        theoretical_bound: f64::MAX,
        empirical: running_max,
        margin: f64::MAX - running_max,
        pass: running_max.is_finite(),
    });
    // frequency within three standard errors of the Chebyshev bound at every site
    let mut worst = f64::NEG_INFINITY;
    for k in 0..steps {
        let p = cheb[k].min(1.0);
        let se = (p * (1.0 - p) / total).sqrt();
        worst = worst.max(trunc_freq[k] - cheb[k] - 3.0 * se);
    }
    records.push(BoundRecord::upper("chebyshev-truncation", 0.0, worst, 0.0));
    let c_w_final = tables
        .iter()
        .map(|t| t.rows[steps - 1].c_w_partial)
        .fold(0.0, f64::max);
    records.push(BoundRecord {
        name: "c-w-partial-sum".into(),
        theoretical_bound: f64::MAX,
        empirical: c_w_final,
        margin: f64::MAX - c_w_final,
        pass: c_w_final.is_finite(),
    });

    let failures = failure_messages.len();
    let report = BoundReport {
        records,
        samples: config.num_samples,
        failures,
        failure_messages,
        gap,
    };
    Ok(EnsembleResult { report, tables })
}
