//! Multi-seed ablation runs over configuration arms.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalItem};
use crate::localization::LocMetrics;
use crate::params::ModelParams;
use crate::train::{train, Sample};

/// A named set of `key = value` overrides on a base configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub settings: Vec<(String, String)>,
}

impl Arm {
    pub fn new(name: &str, settings: &[(&str, &str)]) -> Self {
        Arm {
            name: name.to_string(),
            settings: settings
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut cfg = base.clone();
        for (k, v) in &self.settings {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Component combinations: shuffle x matching.
pub fn component_arms() -> Vec<Arm> {
    let mut out = Vec::new();
    for (shuffle, s) in [(false, "false"), (true, "true")] {
        for (matching, m) in [(false, "false"), (true, "true")] {
            let name = match (shuffle, matching) {
                (false, false) => "baseline",
                (true, false) => "shuffle",
                (false, true) => "matching",
                (true, true) => "shuffle+matching",
            };
            out.push(Arm::new(
                name,
                &[
                    ("local_shuffle", s),
                    ("global_shuffle", "false"),
                    ("matching", m),
                ],
            ));
        }
    }
    out
}

/// The full pipeline against the arm with neither shuffling nor matching.
pub fn headline_arms() -> Vec<Arm> {
    component_arms()
        .into_iter()
        .filter(|a| a.name == "baseline" || a.name == "shuffle+matching")
        .collect()
}

/// Shuffle strategies with matching on.
pub fn shuffle_arms() -> Vec<Arm> {
    vec![
        Arm::new(
            "no-shuffle",
            &[("local_shuffle", "false"), ("global_shuffle", "false")],
        ),
        Arm::new(
            "global",
            &[("local_shuffle", "false"), ("global_shuffle", "true")],
        ),
        Arm::new(
            "local",
            &[("global_shuffle", "false"), ("local_shuffle", "true")],
        ),
    ]
}

/// Stair scales with the full pipeline.
pub fn mu_arms() -> Vec<Arm> {
    ["0.5", "0.7", "1.0"]
        .iter()
        .map(|mu| Arm::new(&format!("mu={mu}"), &[("mu", mu)]))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub name: String,
    pub per_seed: Vec<(u64, LocMetrics)>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl ArmResult {
    pub fn mean(&self) -> LocMetrics {
        let col = |f: fn(&LocMetrics) -> f64| {
            mean_std(&self.per_seed.iter().map(|(_, m)| f(m)).collect::<Vec<_>>()).0
        };
        LocMetrics {
            top1: col(|m| m.top1),
            top5: col(|m| m.top5),
            gt_known: col(|m| m.gt_known),
        }
    }

    pub fn std(&self) -> LocMetrics {
        let col = |f: fn(&LocMetrics) -> f64| {
            mean_std(&self.per_seed.iter().map(|(_, m)| f(m)).collect::<Vec<_>>()).1
        };
        LocMetrics {
            top1: col(|m| m.top1),
            top5: col(|m| m.top5),
            gt_known: col(|m| m.gt_known),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<ArmResult>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&ArmResult> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// One row per arm, `mean +- std` over seeds for each metric.
    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(3)
            .max(3);
        let mut out = format!(
            "{:<width$}  {:>5}  {:>17}  {:>17}  {:>17}\n",
            "arm", "seeds", "top1_loc", "top5_loc", "gt_known_loc"
        );
        for r in &self.rows {
            let (m, s) = (r.mean(), r.std());
            out.push_str(&format!(
                "{:<width$}  {:>5}  {:>8.4} +- {:<6.4}  {:>8.4} +- {:<6.4}  {:>8.4} +- {:<6.4}\n",
                r.name,
                r.per_seed.len(),
                m.top1,
                s.top1,
                m.top5,
                s.top5,
                m.gt_known,
                s.gt_known
            ));
        }
        out
    }
}

/// Trains every arm once per seed and evaluates it on `test`. `progress`
/// sees `(arm, seed, metrics)` after each run.
pub fn run_ablation<F: FnMut(&str, u64, &LocMetrics)>(
    base: &RunConfig,
    arms: &[Arm],
    seeds: &[u64],
    train_set: &[Sample],
    test: &[EvalItem],
    mut progress: F,
) -> Result<AblationReport> {
    if arms.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one arm and one seed".into(),
        ));
    }
    let mut rows = Vec::with_capacity(arms.len());
    for arm in arms {
        let cfg = arm.apply(base)?;
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut tc = cfg.train.clone();
            tc.seed = seed;
            let mut params = ModelParams::init(&cfg.encoder, seed)?;
            train(&mut params, train_set, &tc, |_| {})?;
            let (_, metrics) = evaluate(&params, test, tc.use_across, cfg.threshold)?;
            progress(&arm.name, seed, &metrics);
            per_seed.push((seed, metrics));
        }
        rows.push(ArmResult {
            name: arm.name.clone(),
            per_seed,
        });
    }
    Ok(AblationReport { rows })
}
