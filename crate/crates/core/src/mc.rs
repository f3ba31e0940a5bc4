//! Replication harness over the synthetic generator.
//!
//! Each replication draws a fresh panel from its own substream of the
//! configured seed, runs the full estimation ladder and the matching
//! baseline on it, and scores every estimator against the generating
//! truth. Replications are handed to a fixed-size thread pool through a
//! shared counter; results land in per-replication slots and are folded
//! in replication order, so a report depends only on the configuration
//! and the replication count, never on the thread count.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dgp::{oracle_effects, simulate_with_rng, DGPConfig, OracleEffects};
use crate::error::{Error, Result};
use crate::inference::Z_CRIT;
use crate::matching::run_psm;
use crate::mle::BinaryLink;
use crate::two_stage::{run_pipeline, StrategyId, StrategySpec};

/// Neighbour count for propensity-score imputation in the matching
/// baseline.
pub const MATCH_IMPUTE_K: usize = 5;

/// Accuracy and testing behaviour of one estimator across replications.
///
/// Ladder rows measure the treatment coefficient on the log-mean scale
/// against the configured effect. The matching row measures the
/// count-scale pair contrast against each replication's own
/// selected-sample truth, since that is the estimand matching can reach.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategySummary {
    pub name: String,
    /// Mean of (estimate - target) over completed replications.
    pub mean_bias: f64,
    pub rmse: f64,
    /// Share of replications whose 95% interval contains the target.
    pub coverage: f64,
    /// Share of replications flagging the uptake residual, among those
    /// where the model carries it; absent when it never does.
    pub reject_xi: Option<f64>,
    /// Same for the uptake residual interacted with treatment.
    pub reject_treat_xi: Option<f64>,
    /// Same for the selection residual.
    pub reject_xi_sel: Option<f64>,
}

/// A replication that errored out, kept in the report instead of
/// aborting the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepFailure {
    pub rep: usize,
    pub message: String,
}

/// Generating truth averaged over completed replications.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OracleSummary {
    pub mean_ate_overall: f64,
    pub mean_ate_selected: f64,
    /// Mean untreated-outcome gap between the arms: the level a naive
    /// contrast absorbs.
    pub mean_upsilon: f64,
}

/// Aggregated outcome of one replicated experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: DGPConfig,
    pub requested_reps: usize,
    pub completed_reps: usize,
    pub failures: Vec<RepFailure>,
    pub oracle: OracleSummary,
    /// Ladder summaries in rung order, then the matching baseline.
    pub strategies: Vec<StrategySummary>,
    /// Share of replications where the matching estimate lands farther
    /// from the selected-sample truth than the full correction's
    /// implied count-scale effect.
    pub psm_worse_share: f64,
    /// Wall-clock seconds, excluded from serialization so a stored
    /// report is a pure function of configuration and replication
    /// count.
    #[serde(skip)]
    pub wall_secs: f64,
}

/// One estimator's draw in one replication.
#[derive(Debug)]
struct StrategyDraw {
    estimate: f64,
    se: f64,
    implied_ate: f64,
    sig_xi: Option<bool>,
    sig_treat_xi: Option<bool>,
    sig_xi_sel: Option<bool>,
}

#[derive(Debug)]
struct Replication {
    oracle: OracleEffects,
    ladder: Vec<StrategyDraw>,
    psm_ate: f64,
    psm_se: f64,
}

fn run_replication(cfg: &DGPConfig, rep: usize) -> Result<Replication> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1 + rep as u64);
    let sim = simulate_with_rng(cfg, &mut rng)?;
    let oracle = oracle_effects(&sim);

    let treat_xi_name = format!("{}_x_xi", sim.data.names.treatment);
    let mut ladder = Vec::with_capacity(StrategyId::ALL.len());
    for id in StrategyId::ALL {
        let run = run_pipeline(&sim.data, StrategySpec::new(id, cfg.family))?;
        let sig = |name: &str| {
            run.irr
                .iter()
                .find(|e| e.name == name)
                .map(|e| e.significant)
        };
        ladder.push(StrategyDraw {
            estimate: run.omega,
            se: run.omega_se,
            implied_ate: run.implied_ate,
            sig_xi: sig("xi"),
            sig_treat_xi: sig(&treat_xi_name),
            sig_xi_sel: sig("xi_sel"),
        });
    }

    let matched = run_psm(&sim.data, BinaryLink::Probit, MATCH_IMPUTE_K)?;
    Ok(Replication {
        oracle,
        ladder,
        psm_ate: matched.ate,
        psm_se: matched.se,
    })
}

fn rejection_share(flags: impl Iterator<Item = Option<bool>>) -> Option<f64> {
    let mut present = 0usize;
    let mut rejected = 0usize;
    for sig in flags.flatten() {
        present += 1;
        if sig {
            rejected += 1;
        }
    }
    if present == 0 {
        None
    } else {
        Some(rejected as f64 / present as f64)
    }
}

/// Run `reps` replications of the configured world on up to `jobs`
/// threads (`0` means one) and aggregate them.
///
/// Replication `r` draws from stream `r + 1` of the config seed, so
/// individual replications can be reproduced in isolation. A failed
/// replication is recorded and skipped by every aggregate; when all of
/// them fail the aggregates are NaN and `completed_reps` is zero.
pub fn run_experiment(cfg: &DGPConfig, reps: usize, jobs: usize) -> Result<ExperimentReport> {
    if reps == 0 {
        return Err(Error::NoReplications);
    }
    cfg.validate()?;
    let start = Instant::now();

    let slots: Mutex<Vec<Option<std::result::Result<Replication, String>>>> =
        Mutex::new((0..reps).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = jobs.max(1).min(reps);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let rep = next.fetch_add(1, Ordering::Relaxed);
                if rep >= reps {
                    break;
                }
                let outcome = run_replication(cfg, rep).map_err(|e| e.to_string());
                slots.lock().expect("result slots poisoned")[rep] = Some(outcome);
            });
        }
    });

    let mut done: Vec<Replication> = Vec::with_capacity(reps);
    let mut failures = Vec::new();
    let filled = slots.into_inner().expect("result slots poisoned");
    for (rep, slot) in filled.into_iter().enumerate() {
        match slot.expect("replication slot left empty") {
            Ok(replication) => done.push(replication),
            Err(message) => failures.push(RepFailure { rep, message }),
        }
    }

    let n = done.len() as f64;
    let mean = |xs: &mut dyn Iterator<Item = f64>| xs.sum::<f64>() / n;

    let mut strategies = Vec::with_capacity(StrategyId::ALL.len() + 1);
    for (k, id) in StrategyId::ALL.iter().enumerate() {
        let errors: Vec<f64> = done
            .iter()
            .map(|r| r.ladder[k].estimate - cfg.omega)
            .collect();
        let covered = done
            .iter()
            .filter(|r| (r.ladder[k].estimate - cfg.omega).abs() <= Z_CRIT * r.ladder[k].se)
            .count();
        strategies.push(StrategySummary {
            name: id.as_str().into(),
            mean_bias: errors.iter().sum::<f64>() / n,
            rmse: (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
            coverage: covered as f64 / n,
            reject_xi: rejection_share(done.iter().map(|r| r.ladder[k].sig_xi)),
            reject_treat_xi: rejection_share(done.iter().map(|r| r.ladder[k].sig_treat_xi)),
            reject_xi_sel: rejection_share(done.iter().map(|r| r.ladder[k].sig_xi_sel)),
        });
    }

    let psm_errors: Vec<f64> = done
        .iter()
        .map(|r| r.psm_ate - r.oracle.ate_selected)
        .collect();
    let psm_covered = done
        .iter()
        .filter(|r| (r.psm_ate - r.oracle.ate_selected).abs() <= Z_CRIT * r.psm_se)
        .count();
    strategies.push(StrategySummary {
        name: "psm".into(),
        mean_bias: psm_errors.iter().sum::<f64>() / n,
        rmse: (psm_errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        coverage: psm_covered as f64 / n,
        reject_xi: None,
        reject_treat_xi: None,
        reject_xi_sel: None,
    });

    let last = StrategyId::ALL.len() - 1;
    let psm_worse = done
        .iter()
        .filter(|r| {
            (r.psm_ate - r.oracle.ate_selected).abs()
                > (r.ladder[last].implied_ate - r.oracle.ate_selected).abs()
        })
        .count();

    let oracle = OracleSummary {
        mean_ate_overall: mean(&mut done.iter().map(|r| r.oracle.ate_overall)),
        mean_ate_selected: mean(&mut done.iter().map(|r| r.oracle.ate_selected)),
        mean_upsilon: mean(&mut done.iter().map(|r| r.oracle.upsilon)),
    };

    Ok(ExperimentReport {
        config: cfg.clone(),
        requested_reps: reps,
        completed_reps: done.len(),
        failures,
        oracle,
        strategies,
        psm_worse_share: psm_worse as f64 / n,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}
