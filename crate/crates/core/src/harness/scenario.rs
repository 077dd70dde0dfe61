//! Experiment drivers: train one network per seed, pick checkpoints with
//! NC and the baselines from the same run, score every pick against the
//! target oracle.
//!
//! Protocol per trial. The source trajectory is taken on the whole
//! source-validation split, the target trajectory on a fixed probe of `n`
//! unlabelled target samples. NC only sees checkpoints up to the
//! Source-Val peak (the last checkpoint a practitioner would keep), so its
//! grid is `0..=v`. Target-Val@n uses the same `n` probe samples with
//! their labels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::Result;
use crate::harness::task::{generate_shift_task, ShiftSpec, ShiftTask};
use crate::harness::train::{capture_activations, layer_names, run_trajectory, train_with_checkpoints, RunSpec, Tap, TrainRun};
use crate::io::{probe_hash, RunWriter};
use crate::moments::Domain;
use crate::selection::{select_unweighted, select_weighted};

/// Which checkpoints NC is allowed to look at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridCut {
    /// Checkpoints `0..=v`, `v` the Source-Val pick.
    #[default]
    SourceValPeak,
    /// Every checkpoint.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub shift: ShiftSpec,
    /// Training recipe; `seed` is replaced by the trial seed.
    pub run: RunSpec,
    pub tap: Tap,
    pub grid_cut: GridCut,
    /// Oracle peak must precede the Source-Val peak by at least this many
    /// checkpoints for a trial to count as Scenario A.
    pub min_gap: usize,
    /// Hit tolerance as a fraction of the last checkpoint index.
    pub tolerance: f64,
}

/// One network trained for one seed, reusable across probe sizes.
#[derive(Debug, Clone)]
pub struct TrainedTrial {
    pub seed: u64,
    pub task: ShiftTask,
    pub run: TrainRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub n_probe: usize,
    pub oracle_index: usize,
    pub source_val_index: usize,
    pub target_val_index: usize,
    pub nc_weighted_index: usize,
    pub nc_unweighted_index: usize,
    /// No layer diverged, so the weighted rule kept the last grid point.
    pub nc_no_divergence: bool,
    pub acc_oracle: f64,
    pub acc_source_val: f64,
    pub acc_target_val: f64,
    pub acc_nc_weighted: f64,
    pub acc_nc_unweighted: f64,
    /// Oracle precedes Source-Val by at least `min_gap` checkpoints.
    pub qualifies: bool,
    pub hit_weighted: bool,
    pub hit_unweighted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    /// Student-t 95% interval for the mean.
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { n, mean: f64::NAN, std: f64::NAN, ci_lo: f64::NAN, ci_hi: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Self { n, mean, std: 0.0, ci_lo: mean, ci_hi: mean };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std = var.sqrt();
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive dof").inverse_cdf(0.975);
        let half = t * std / (n as f64).sqrt();
        Self { n, mean, std, ci_lo: mean - half, ci_hi: mean + half }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Oracle,
    SourceVal,
    TargetVal,
    NcWeighted,
    NcUnweighted,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Oracle, Method::SourceVal, Method::TargetVal, Method::NcWeighted, Method::NcUnweighted];

    pub fn name(self) -> &'static str {
        match self {
            Method::Oracle => "oracle",
            Method::SourceVal => "source_val",
            Method::TargetVal => "target_val",
            Method::NcWeighted => "nc_weighted",
            Method::NcUnweighted => "nc_unweighted",
        }
    }

    fn accuracy(self, r: &TrialRecord) -> f64 {
        match self {
            Method::Oracle => r.acc_oracle,
            Method::SourceVal => r.acc_source_val,
            Method::TargetVal => r.acc_target_val,
            Method::NcWeighted => r.acc_nc_weighted,
            Method::NcUnweighted => r.acc_nc_unweighted,
        }
    }

    fn index(self, r: &TrialRecord) -> usize {
        match self {
            Method::Oracle => r.oracle_index,
            Method::SourceVal => r.source_val_index,
            Method::TargetVal => r.target_val_index,
            Method::NcWeighted => r.nc_weighted_index,
            Method::NcUnweighted => r.nc_unweighted_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    /// Target accuracy over every trial.
    pub accuracy: Stats,
    /// Target accuracy over qualifying trials only.
    pub accuracy_qualifying: Stats,
    /// Chosen checkpoint index over every trial.
    pub index: Stats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub trials: usize,
    pub qualifying: usize,
    /// Fractions over qualifying trials.
    pub hit_rate_weighted: f64,
    pub hit_rate_unweighted: f64,
    /// Fraction of all trials where weighted NC picked the Source-Val checkpoint.
    pub weighted_equals_source_val: f64,
    pub methods: Vec<MethodSummary>,
}

impl Summary {
    pub fn method(&self, m: Method) -> &MethodSummary {
        self.methods.iter().find(|s| s.method == m).expect("every method is summarised")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub n_probe: usize,
    pub checkpoints: usize,
    pub hit_tolerance: f64,
    pub trials: Vec<TrialRecord>,
    pub summary: Summary,
}

fn fraction(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 / total as f64
    }
}

impl ExperimentReport {
    pub fn from_trials(name: impl Into<String>, n_probe: usize, checkpoints: usize, hit_tolerance: f64, trials: Vec<TrialRecord>) -> Self {
        let qual: Vec<&TrialRecord> = trials.iter().filter(|r| r.qualifies).collect();
        let methods = Method::ALL
            .iter()
            .map(|&m| MethodSummary {
                method: m,
                accuracy: Stats::of(&trials.iter().map(|r| m.accuracy(r)).collect::<Vec<_>>()),
                accuracy_qualifying: Stats::of(&qual.iter().map(|r| m.accuracy(r)).collect::<Vec<_>>()),
                index: Stats::of(&trials.iter().map(|r| m.index(r) as f64).collect::<Vec<_>>()),
            })
            .collect();
        let summary = Summary {
            trials: trials.len(),
            qualifying: qual.len(),
            hit_rate_weighted: fraction(qual.iter().filter(|r| r.hit_weighted).count(), qual.len()),
            hit_rate_unweighted: fraction(qual.iter().filter(|r| r.hit_unweighted).count(), qual.len()),
            weighted_equals_source_val: fraction(
                trials.iter().filter(|r| r.nc_weighted_index == r.source_val_index).count(),
                trials.len(),
            ),
            methods,
        };
        Self { name: name.into(), n_probe, checkpoints, hit_tolerance, trials, summary }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per method: accuracy over all and over qualifying trials,
    /// plus index dispersion.
    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "scenario", "n_probe", "method", "trials", "mean_acc", "std_acc", "ci95_lo", "ci95_hi", "qualifying",
            "mean_acc_qualifying", "mean_index", "std_index", "hit_rate",
        ])
        .map_err(csv_err)?;
        let s = &self.summary;
        for m in &s.methods {
            let hit = match m.method {
                Method::NcWeighted => format!("{}", s.hit_rate_weighted),
                Method::NcUnweighted => format!("{}", s.hit_rate_unweighted),
                _ => String::new(),
            };
            w.write_record([
                self.name.clone(),
                self.n_probe.to_string(),
                m.method.name().to_string(),
                m.accuracy.n.to_string(),
                m.accuracy.mean.to_string(),
                m.accuracy.std.to_string(),
                m.accuracy.ci_lo.to_string(),
                m.accuracy.ci_hi.to_string(),
                s.qualifying.to_string(),
                m.accuracy_qualifying.mean.to_string(),
                m.index.mean.to_string(),
                m.index.std.to_string(),
                hit,
            ])
            .map_err(csv_err)?;
        }
        finish_csv(w)
    }

    /// One row per trial.
    pub fn trials_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.trials {
            w.serialize(r).map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

fn csv_err(e: csv::Error) -> crate::error::Error {
    crate::error::Error::Invalid(format!("csv: {e}"))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| crate::error::Error::Invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn train_trial(cfg: &ScenarioConfig, seed: u64) -> Result<TrainedTrial> {
    let task = generate_shift_task(&cfg.shift, seed)?;
    let spec = RunSpec { seed, ..cfg.run.clone() };
    let run = train_with_checkpoints(&task, &spec)?;
    Ok(TrainedTrial { seed, task, run })
}

/// Scores NC and the baselines on one trained run with an `n`-sample probe.
pub fn evaluate_trial(cfg: &ScenarioConfig, trial: &TrainedTrial, n_probe: usize) -> Result<TrialRecord> {
    let run = &trial.run;
    let probe = trial.task.probe_batch(n_probe, 0);
    let v = run.source_val_index();
    let o = run.oracle().best_index();
    let tv = run.target_val_index(&probe);
    let last = run.len() - 1;
    let upto = match cfg.grid_cut {
        GridCut::SourceValPeak => v,
        GridCut::Full => last,
    };
    let (w, u, no_div) = if upto >= 2 {
        let src = run_trajectory(run, &trial.task.source_val, Domain::Source, upto, cfg.tap)?;
        let tgt = run_trajectory(run, &probe, Domain::Target, upto, cfg.tap)?;
        let wr = select_weighted(&src, &tgt)?;
        let ur = select_unweighted(&src, &tgt)?;
        (wr.chosen_index, ur.chosen_index, wr.no_divergence)
    } else {
        // too few checkpoints for an interval split; keep the last one
        (upto, upto, true)
    };
    let acc = |i: usize| run.oracle().accuracy_at(i);
    let tol = cfg.tolerance * last as f64;
    let hit = |i: usize| (i as f64 - o as f64).abs() <= tol;
    Ok(TrialRecord {
        seed: trial.seed,
        n_probe,
        oracle_index: o,
        source_val_index: v,
        target_val_index: tv,
        nc_weighted_index: w,
        nc_unweighted_index: u,
        nc_no_divergence: no_div,
        acc_oracle: acc(o),
        acc_source_val: acc(v),
        acc_target_val: acc(tv),
        acc_nc_weighted: acc(w),
        acc_nc_unweighted: acc(u),
        qualifies: v >= o + cfg.min_gap,
        hit_weighted: hit(w),
        hit_unweighted: hit(u),
    })
}

fn seeds(base_seed: u64, trials: usize) -> Vec<u64> {
    (0..trials as u64).map(|t| base_seed + t).collect()
}

/// Trains `trials` networks (seeds `base_seed..`) in parallel.
pub fn train_trials(cfg: &ScenarioConfig, trials: usize, base_seed: u64) -> Result<Vec<TrainedTrial>> {
    seeds(base_seed, trials).into_par_iter().map(|s| train_trial(cfg, s)).collect()
}

pub fn report_from(cfg: &ScenarioConfig, trained: &[TrainedTrial], n_probe: usize) -> Result<ExperimentReport> {
    let records = trained
        .par_iter()
        .map(|t| evaluate_trial(cfg, t, n_probe))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport::from_trials(
        cfg.name.clone(),
        n_probe,
        cfg.run.checkpoints,
        cfg.tolerance * (cfg.run.checkpoints - 1) as f64,
        records,
    ))
}

pub fn run_scenario(cfg: &ScenarioConfig, n_probe: usize, trials: usize, base_seed: u64) -> Result<ExperimentReport> {
    if n_probe == 0 {
        return Err(crate::error::Error::Invalid("probe size must be at least 1".into()));
    }
    let trained = train_trials(cfg, trials, base_seed)?;
    report_from(cfg, &trained, n_probe)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_probe: usize,
    pub nc_weighted: Stats,
    pub nc_unweighted: Stats,
    pub target_val: Stats,
    pub source_val: Stats,
    pub oracle: Stats,
    pub hit_rate_weighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub name: String,
    pub trials: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn row(&self, n: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.n_probe == n)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["n_probe", "method", "mean_acc", "ci95_lo", "ci95_hi"]).map_err(csv_err)?;
        for r in &self.rows {
            for (name, s) in [
                ("nc_weighted", &r.nc_weighted),
                ("nc_unweighted", &r.nc_unweighted),
                ("target_val", &r.target_val),
                ("source_val", &r.source_val),
                ("oracle", &r.oracle),
            ] {
                w.write_record([r.n_probe.to_string(), name.into(), s.mean.to_string(), s.ci_lo.to_string(), s.ci_hi.to_string()])
                    .map_err(csv_err)?;
            }
        }
        finish_csv(w)
    }
}

/// Probe-size sweep over one set of trained runs: every `n` sees the same
/// networks, so differences come from the probe alone.
pub fn efficiency_sweep(cfg: &ScenarioConfig, ns: &[usize], trials: usize, base_seed: u64) -> Result<SweepReport> {
    sweep_from(cfg, &train_trials(cfg, trials, base_seed)?, ns)
}

pub fn sweep_from(cfg: &ScenarioConfig, trained: &[TrainedTrial], ns: &[usize]) -> Result<SweepReport> {
    let rows = ns
        .iter()
        .map(|&n| {
            let rep = report_from(cfg, trained, n)?;
            let s = &rep.summary;
            Ok(SweepRow {
                n_probe: n,
                nc_weighted: s.method(Method::NcWeighted).accuracy,
                nc_unweighted: s.method(Method::NcUnweighted).accuracy,
                target_val: s.method(Method::TargetVal).accuracy,
                source_val: s.method(Method::SourceVal).accuracy,
                oracle: s.method(Method::Oracle).accuracy,
                hit_rate_weighted: s.hit_rate_weighted,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport { name: cfg.name.clone(), trials: trained.len(), rows })
}

/// Writes what NC consumes for one trial (source-validation and probe
/// activations at every checkpoint up to `upto`) as NCAD containers plus a
/// manifest in `dir`. Returns the manifest path.
pub fn write_trial_run(
    cfg: &ScenarioConfig,
    trial: &TrainedTrial,
    n_probe: usize,
    upto: usize,
    dir: impl AsRef<std::path::Path>,
) -> Result<std::path::PathBuf> {
    let run = &trial.run;
    if upto >= run.len() {
        return Err(crate::error::Error::Invalid(format!("checkpoint {upto} out of range")));
    }
    let probe = trial.task.probe_batch(n_probe, 0);
    let grid = run.grid();
    let grid = crate::trajectory::HyperparameterGrid::new(grid.name(), grid.values()[..=upto].to_vec())?;
    let layers = layer_names(&run.checkpoints[0], cfg.tap);
    let mut writer = RunWriter::new(&grid, layers, vec![Domain::Source, Domain::Target], probe_hash(&probe.input_bytes()))
        .metadata(serde_json::json!({
            "tool": "nc-core harness",
            "scenario": cfg.name,
            "seed": trial.seed,
            "n_probe": n_probe,
            "severity": trial.task.severity(),
        }));
    for (i, net) in run.checkpoints[..=upto].iter().enumerate() {
        for batch in [
            capture_activations(net, &trial.task.source_val, Domain::Source, cfg.tap),
            capture_activations(net, &probe, Domain::Target, cfg.tap),
        ] {
            for m in &batch.layers {
                writer.push(i, m);
            }
        }
    }
    writer.finish(dir)
}
