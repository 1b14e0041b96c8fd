//! Paired Monte Carlo experiments.
//!
//! Every trial draws one synthetic scene and runs it once per mode with the
//! same seed, so modes within a trial see identical tracks, sun draws and
//! injected yaw errors. Trials run in parallel; results are ordered by trial
//! index and then by mode.
//!
//! CSV columns: `trial, mode, status`, the six trajectory metrics, then the
//! sun audit counts. Each mode also gets a `median` row and an `iqr` row,
//! computed over the trials that completed.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::eval::TrajectoryMetrics;
use crate::pipeline::{
    run_with_detections, trial_seed, ExperimentMode, PipelineError, RunConfig, RunReport, SunMode,
};
use crate::sun::SunMeasurement;
use crate::tracks::{generate_synthetic, load_sun_detections};

#[derive(Clone, Debug, PartialEq)]
pub struct TrialOutcome {
    pub metrics: TrajectoryMetrics,
    pub report: RunReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub mode: ExperimentMode,
    /// Error text for aborted runs.
    pub outcome: Result<TrialOutcome, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonteCarloResult {
    pub trials: usize,
    pub modes: Vec<ExperimentMode>,
    /// Trial-major, mode-minor.
    pub records: Vec<TrialRecord>,
}

const METRIC_COUNT: usize = 9;

fn metric_vector(o: &TrialOutcome) -> [f64; METRIC_COUNT] {
    let m = &o.metrics;
    let s = &o.report.sun;
    [
        m.trans_armse,
        m.trans_armse_en,
        m.rot_armse,
        m.drift.meters,
        m.drift.percent,
        m.drift.en_meters,
        m.drift.en_percent,
        s.generated as f64,
        s.accepted as f64,
    ]
}

/// Median and interquartile range (linear interpolation between order statistics).
pub fn median_iqr(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = p * (v.len() - 1) as f64;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    Some((q(0.5), q(0.75) - q(0.25)))
}

#[derive(Serialize)]
struct Row {
    trial: String,
    mode: &'static str,
    status: String,
    trans_armse_m: Option<f64>,
    trans_armse_en_m: Option<f64>,
    rot_armse_rad: Option<f64>,
    final_drift_m: Option<f64>,
    final_drift_pct: Option<f64>,
    final_drift_en_m: Option<f64>,
    final_drift_en_pct: Option<f64>,
    sun_generated: Option<f64>,
    sun_accepted: Option<f64>,
}

impl Row {
    fn new(trial: String, mode: &'static str, status: String, v: Option<[f64; METRIC_COUNT]>) -> Self {
        let at = |i: usize| v.map(|v| v[i]);
        Self {
            trial,
            mode,
            status,
            trans_armse_m: at(0),
            trans_armse_en_m: at(1),
            rot_armse_rad: at(2),
            final_drift_m: at(3),
            final_drift_pct: at(4),
            final_drift_en_m: at(5),
            final_drift_en_pct: at(6),
            sun_generated: at(7),
            sun_accepted: at(8),
        }
    }
}

impl MonteCarloResult {
    pub fn records_for(&self, mode: ExperimentMode) -> impl Iterator<Item = &TrialRecord> {
        self.records.iter().filter(move |r| r.mode == mode)
    }

    /// One entry per trial; `None` where the run aborted.
    pub fn outcomes(&self, mode: ExperimentMode) -> Vec<Option<&TrialOutcome>> {
        self.records_for(mode).map(|r| r.outcome.as_ref().ok()).collect()
    }

    pub fn completed(&self, mode: ExperimentMode) -> usize {
        self.records_for(mode).filter(|r| r.outcome.is_ok()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.records.iter().all(|r| r.outcome.is_ok())
    }

    fn rows(&self) -> Vec<Row> {
        let mut rows: Vec<Row> = self
            .records
            .iter()
            .map(|r| match &r.outcome {
                Ok(o) => Row::new(r.trial.to_string(), r.mode.name(), "ok".into(), Some(metric_vector(o))),
                Err(e) => Row::new(r.trial.to_string(), r.mode.name(), format!("aborted: {e}"), None),
            })
            .collect();
        for &mode in &self.modes {
            let vectors: Vec<[f64; METRIC_COUNT]> =
                self.outcomes(mode).into_iter().flatten().map(metric_vector).collect();
            let done = vectors.len();
            let status = if done == self.trials {
                "complete".to_string()
            } else {
                format!("incomplete ({done} of {})", self.trials)
            };
            let mut med = [0.0; METRIC_COUNT];
            let mut iqr = [0.0; METRIC_COUNT];
            for i in 0..METRIC_COUNT {
                let col: Vec<f64> = vectors.iter().map(|v| v[i]).collect();
                if let Some((m, q)) = median_iqr(&col) {
                    med[i] = m;
                    iqr[i] = q;
                }
            }
            let have = (done > 0).then_some(());
            rows.push(Row::new("median".into(), mode.name(), status.clone(), have.map(|_| med)));
            rows.push(Row::new("iqr".into(), mode.name(), status, have.map(|_| iqr)));
        }
        rows
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for row in self.rows() {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory csv");
        String::from_utf8(buf).expect("utf-8 csv")
    }
}

/// Runs `trials` paired trials of the synthetic scene in `cfg.synthetic`,
/// once per mode in `cfg.montecarlo.modes`.
pub fn monte_carlo(cfg: &RunConfig, trials: usize) -> Result<MonteCarloResult, PipelineError> {
    cfg.validate()?;
    let Some(synthetic) = &cfg.synthetic else {
        return Err(PipelineError::Config("montecarlo needs a synthetic section".into()));
    };
    if trials == 0 {
        return Err(PipelineError::Config("at least one trial is required".into()));
    }
    let modes = cfg.montecarlo.modes.clone();
    if modes.is_empty() {
        return Err(PipelineError::Config("montecarlo.modes is empty".into()));
    }
    let detections: Vec<(usize, SunMeasurement)> = if modes.contains(&ExperimentMode::File) {
        match &cfg.paths.sun_detections {
            Some(p) => load_sun_detections(p)?,
            None => return Err(PipelineError::Config("file mode needs paths.sun_detections".into())),
        }
    } else {
        Vec::new()
    };

    let per_trial: Vec<Vec<TrialRecord>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let seed = trial_seed(cfg.seed, trial);
            let mut scene = synthetic.clone();
            scene.seed = seed;
            let table = generate_synthetic(&scene, &cfg.intrinsics);
            modes
                .iter()
                .map(|&mode| {
                    let outcome = table.as_ref().map_err(|e| e.to_string()).and_then(|table| {
                        let mut run_cfg = cfg.clone();
                        mode.apply(&mut run_cfg);
                        run_cfg.seed = seed;
                        let truth = run_cfg
                            .truth_trajectory(table)
                            .ok_or_else(|| "synthetic table lacks ground truth".to_string())?;
                        let out = run_with_detections(&run_cfg, table, &detections).map_err(|e| e.to_string())?;
                        let metrics = TrajectoryMetrics::compute(&out.trajectory, &truth).map_err(|e| e.to_string())?;
                        Ok(TrialOutcome {
                            metrics,
                            report: out.report,
                        })
                    });
                    if let Err(e) = &outcome {
                        log::warn!("trial {trial} mode {}: {e}", mode.name());
                    }
                    TrialRecord {
                        trial,
                        seed,
                        mode,
                        outcome,
                    }
                })
                .collect()
        })
        .collect();
    Ok(MonteCarloResult {
        trials,
        modes,
        records: per_trial.into_iter().flatten().collect(),
    })
}

/// Modes used when the command line names a single sun mode: the pure VO baseline plus that mode.
pub fn modes_for(sun: SunMode) -> Vec<ExperimentMode> {
    let other = match sun {
        SunMode::Off => return vec![ExperimentMode::Off],
        SunMode::Oracle => ExperimentMode::Oracle,
        SunMode::Bimodal => ExperimentMode::Bimodal,
        SunMode::File => ExperimentMode::File,
    };
    vec![ExperimentMode::Off, other]
}
