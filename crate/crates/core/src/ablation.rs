//! Controlled architecture comparisons: every variant on an axis is trained
//! with the same data, seeds and settings, in both supervision regimes.

use std::fmt;
use std::str::FromStr;

use crate::attention::McmOrder;
use crate::config::RunConfig;
use crate::data::{Dataset, Split};
use crate::error::{MpnError, Result};
use crate::mbam::SqueezeVariant;
use crate::model::{ModelConfig, Mpn, NetworkVariant, Regime};
use crate::rng::Rng;
use crate::train::{evaluate, train};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Network,
    Mcm,
    Squeeze,
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::Network => "network",
            AblationAxis::Mcm => "mcm",
            AblationAxis::Squeeze => "squeeze",
        })
    }
}

impl FromStr for AblationAxis {
    type Err = MpnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "network" => Ok(AblationAxis::Network),
            "mcm" => Ok(AblationAxis::Mcm),
            "squeeze" => Ok(AblationAxis::Squeeze),
            _ => Err(MpnError::Config(format!("unknown ablation axis {s:?} (expected network, mcm or squeeze)"))),
        }
    }
}

impl AblationAxis {
    /// The variants on this axis, each applied to `base`.
    pub fn variants(self, base: ModelConfig) -> Vec<(String, ModelConfig)> {
        match self {
            AblationAxis::Network => NetworkVariant::ALL
                .iter()
                .map(|&n| (n.to_string(), ModelConfig { network: n, ..base }))
                .collect(),
            AblationAxis::Mcm => McmOrder::ALL
                .iter()
                .map(|&o| (o.to_string(), ModelConfig { mcm_order: o, ..base }))
                .collect(),
            AblationAxis::Squeeze => SqueezeVariant::ALL
                .iter()
                .map(|&s| (s.to_string(), ModelConfig { squeeze: s, ..base }))
                .collect(),
        }
    }
}

pub const REGIMES: [Regime; 2] = [Regime::Full, Regime::Weak];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    /// Test segment accuracy per regime (in [`REGIMES`] order), one entry per seed.
    pub per_seed: [Vec<f64>; 2],
}

impl AblationRow {
    pub fn mean(&self, regime: Regime) -> f64 {
        let v = &self.per_seed[regime_index(regime)];
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

fn regime_index(r: Regime) -> usize {
    match r {
        Regime::Full => 0,
        Regime::Weak => 1,
    }
}

/// Test accuracy of one trained configuration.
pub fn run_one(ds: &Dataset, rc: &RunConfig, model: ModelConfig, regime: Regime, seed: u64) -> Result<f64> {
    let mut tc = rc.train;
    tc.regime = regime;
    tc.seed = seed;
    let (mpn, store) = Mpn::init::<f32>(model, &mut Rng::new(seed))?;
    let out = train(&mpn, store, &ds.split(Split::Train), &ds.split(Split::Val), &tc, |_| {})?;
    evaluate(&mpn, &out.best_params, &ds.split(Split::Test), regime, tc.schedule.tau_end)
}

/// Train and evaluate every variant on `axis` for each seed and regime.
/// `progress` sees `(variant, regime, seed, accuracy)` after each run.
pub fn run_axis(
    ds: &Dataset,
    rc: &RunConfig,
    axis: AblationAxis,
    seeds: &[u64],
    regimes: &[Regime],
    mut progress: impl FnMut(&str, Regime, u64, f64),
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(MpnError::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for (name, model) in axis.variants(rc.model_config()) {
        let mut row = AblationRow {
            variant: name.clone(),
            per_seed: [Vec::new(), Vec::new()],
        };
        for &regime in regimes {
            for &seed in seeds {
                let acc = run_one(ds, rc, model, regime, seed)?;
                progress(&name, regime, seed, acc);
                row.per_seed[regime_index(regime)].push(acc);
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Tab-separated table with a header row; one row per variant.
pub fn format_table(axis: AblationAxis, rows: &[AblationRow]) -> String {
    let mut s = String::from("axis\tvariant\tfull_accuracy\tweak_accuracy\tseeds\n");
    let cell = |row: &AblationRow, r: Regime| {
        if row.per_seed[regime_index(r)].is_empty() {
            "-".to_string()
        } else {
            format!("{:.4}", row.mean(r))
        }
    };
    for row in rows {
        let n = row.per_seed.iter().map(Vec::len).max().unwrap_or(0);
        s.push_str(&format!(
            "{axis}\t{}\t{}\t{}\t{n}\n",
            row.variant,
            cell(row, Regime::Full),
            cell(row, Regime::Weak)
        ));
    }
    s
}
