use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{evaluate, generator_predictor, EvalConfig, Network};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::objective::{train_loop, NoCheckpoints, TrainConfig};

/// At most one axis holds several values. An empty list keeps the value from
/// the base training config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambdas: Vec<f32>,
    pub batch_sizes: Vec<usize>,
    /// Also train a λ = 0 model with the seed and batch size of the last
    /// grid point.
    pub control: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            lambdas: vec![50.0, 100.0, 200.0, 400.0],
            batch_sizes: Vec::new(),
            control: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    BatchSize,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::BatchSize => "batch_size",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub inter_error: Option<f64>,
    pub intra_error: Option<f64>,
    /// Why the point produced no errors, when it failed.
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
    pub control: Option<SweepPoint>,
    /// Set when inter-case error moves monotonically along the axis.
    pub trend: Option<String>,
}

impl SweepConfig {
    fn grid(&self, base: &TrainConfig) -> Result<(SweepAxis, Vec<(f32, usize)>)> {
        let or_base = |v: &[f32]| if v.is_empty() { vec![base.lambda_l1] } else { v.to_vec() };
        let (l, b) = (or_base(&self.lambdas), self.batch_sizes.clone());
        let b = if b.is_empty() { vec![base.batch_size] } else { b };
        if l.len() > 1 && b.len() > 1 {
            return Err(Error::Config(
                "sweep varies one axis at a time; give a single lambda or a single batch size".into(),
            ));
        }
        if b.len() > 1 {
            Ok((SweepAxis::BatchSize, b.iter().map(|&bs| (l[0], bs)).collect()))
        } else {
            Ok((SweepAxis::Lambda, l.iter().map(|&lam| (lam, b[0])).collect()))
        }
    }
}

fn run_point(base: &TrainConfig, dataset: &Dataset, eval: &EvalConfig, lambda: f32, batch_size: usize, seed: u64) -> SweepPoint {
    let cfg = TrainConfig {
        lambda_l1: lambda,
        batch_size,
        seed,
        checkpoint_every: None,
        ..base.clone()
    };
    let scores = (|| -> Result<(f64, f64)> {
        let pairs = dataset.train_pairs();
        let out = train_loop(&cfg, &pairs, &mut NoCheckpoints, |_| {})?;
        let g: Network = out.generator;
        let report = evaluate(generator_predictor(&g, eval)?.as_ref(), &dataset.test_cases(), eval)?;
        if !(report.inter_error.is_finite() && report.intra_error.is_finite()) {
            return Err(Error::Data("evaluation produced a non-finite error".into()));
        }
        Ok((report.inter_error, report.intra_error))
    })();
    let (inter_error, intra_error, failure) = match scores {
        Ok((a, b)) => (Some(a), Some(b), None),
        Err(e) => (None, None, Some(e.to_string())),
    };
    SweepPoint {
        lambda,
        batch_size,
        seed,
        inter_error,
        intra_error,
        failure,
    }
}

fn trend(axis: SweepAxis, points: &[SweepPoint]) -> Option<String> {
    let errs: Vec<f64> = points.iter().filter_map(|p| p.inter_error).collect();
    if errs.len() < 2 || errs.len() != points.len() {
        return None;
    }
    let dir = if errs.windows(2).all(|w| w[1] <= w[0]) {
        "decreases"
    } else if errs.windows(2).all(|w| w[1] >= w[0]) {
        "increases"
    } else {
        return None;
    };
    Some(format!("inter_error {dir} monotonically with {}", axis.name()))
}

/// Trains and evaluates one model per grid point. Point `i` trains with seed
/// `base.seed + i`. A failing point is recorded and the sweep continues.
/// `progress` sees each finished point, control last.
pub fn sweep(
    base: &TrainConfig,
    dataset: &Dataset,
    cfg: &SweepConfig,
    eval: &EvalConfig,
    mut progress: impl FnMut(&SweepPoint),
) -> Result<SweepReport> {
    let (axis, grid) = cfg.grid(base)?;
    let mut points = Vec::with_capacity(grid.len());
    for (i, &(lambda, batch_size)) in grid.iter().enumerate() {
        let p = run_point(base, dataset, eval, lambda, batch_size, base.seed.wrapping_add(i as u64));
        progress(&p);
        points.push(p);
    }
    let control = if cfg.control {
        let last = points.last().expect("grid is non-empty");
        let p = run_point(base, dataset, eval, 0.0, last.batch_size, last.seed);
        progress(&p);
        Some(p)
    } else {
        None
    };
    Ok(SweepReport {
        axis,
        trend: trend(axis, &points),
        points,
        control,
    })
}

pub const SWEEP_HEADER: &str = "axis,value,inter_error,intra_error";

/// One row per grid point; failed points leave the error fields empty.
pub fn write_sweep_csv<W: Write>(mut w: W, report: &SweepReport) -> std::io::Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for p in &report.points {
        let value = match report.axis {
            SweepAxis::Lambda => p.lambda.to_string(),
            SweepAxis::BatchSize => p.batch_size.to_string(),
        };
        writeln!(w, "{},{},{},{}", report.axis.name(), value, opt(p.inter_error), opt(p.intra_error))?;
    }
    Ok(())
}
