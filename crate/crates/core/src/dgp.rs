//! Synthetic panel generator built around a latent person endowment.
//!
//! Each person draws an endowment `mu` that can load on treatment
//! uptake, on week-level selection, and on the outcome level, and can
//! scale the treatment effect itself. Switching those loadings off
//! yields a clean exogenous world; switching them on reproduces the
//! confounding patterns the estimation ladder is built to absorb. The
//! generator also keeps the potential outcomes it drew, so oracle
//! effects are sample means over hidden truth rather than estimates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ColumnNames, PanelDataset};
use crate::dist::{normal, CountFamily, FamilyKind};
use crate::error::{Error, Result};

/// Generated covariates, in column order. Age is uniform on 65..=95;
/// the binary shares are female 0.65, rural 0.09, comorbid 0.43; the
/// client-group dummies come from one categorical draw with shares
/// dementia 0.06, learning 0.27, physical 0.17, and a 0.50 reference.
pub const COVARIATE_NAMES: [&str; 7] = [
    "age",
    "female",
    "rural",
    "cg_dementia",
    "cg_learning",
    "cg_physical",
    "comorbid",
];

/// Generated instruments: local uptake share uniform on (0.02, 0.22)
/// and a deprivation decile uniform on 1..=10.
pub const INSTRUMENT_NAMES: [&str; 2] = ["area_uptake", "deprivation"];

/// What a structural zero means for the observed panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuralZeroMode {
    /// The person-week never reaches hospital: the row is unselected
    /// and its outcome unobserved. The estimation sample then carries
    /// no excess zeros, so fitting the zero-inflated family on such
    /// data drives the inflation share to its boundary.
    #[default]
    NeverHospitalized,
    /// The person-week is a day case: observed with an outcome of zero.
    DayCase,
}

/// Full description of one synthetic world.
///
/// Coefficient vectors follow fixed layouts: `beta` and
/// `treatment_params` are an intercept followed by one entry per
/// covariate in [`COVARIATE_NAMES`] order; `selection_params` appends a
/// raw-week coefficient to that layout; `instrument_strength` has one
/// entry per instrument in [`INSTRUMENT_NAMES`] order and enters the
/// treatment index only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DGPConfig {
    pub n_persons: usize,
    pub weeks: u32,
    pub census_week: u32,
    /// Log-mean coefficients: intercept, then one per covariate.
    pub beta: Vec<f64>,
    /// Treatment effect on the log mean.
    pub omega: f64,
    /// Scales the endowment inside the treatment effect: the effect a
    /// person experiences is `omega + hetero_scale * mu`.
    pub hetero_scale: f64,
    /// Standard deviation of the endowment `mu`.
    pub endowment_sd: f64,
    /// Endowment loading on the treatment index.
    pub endow_loading_t: f64,
    /// Endowment loading on the selection index.
    pub endow_loading_s: f64,
    /// Endowment loading on the outcome log mean, giving the untreated
    /// potential outcome a confounded level.
    #[serde(default)]
    pub endow_loading_y: f64,
    /// Instrument coefficients in the treatment index.
    pub instrument_strength: Vec<f64>,
    /// Treatment-index coefficients: intercept, then one per covariate.
    pub treatment_params: Vec<f64>,
    /// Selection-index coefficients: intercept, one per covariate, then
    /// the raw-week coefficient.
    pub selection_params: Vec<f64>,
    /// Trend coefficient on the outcome log mean, applied to the
    /// census countdown `trend1`.
    #[serde(default)]
    pub outcome_trend: f64,
    /// Per-week drift added to the treatment effect, for worlds where
    /// the effect is not stable over the window.
    #[serde(default)]
    pub effect_drift: f64,
    /// Outcome family: `nb2`, `zinb`, or `ztnb`.
    pub family: FamilyKind,
    /// NB2 dispersion; zero gives the equidispersed special case.
    pub alpha: f64,
    /// Structural-zero probability, used only by the zero-inflated
    /// family.
    #[serde(default)]
    pub p_inflate: f64,
    #[serde(default)]
    pub structural_zeros: StructuralZeroMode,
    #[serde(default)]
    pub seed: u64,
}

impl DGPConfig {
    /// A world with no endowment loadings: treatment and selection are
    /// exogenous and every estimator on the ladder is unbiased.
    pub fn exogenous() -> Self {
        DGPConfig {
            n_persons: 1000,
            weeks: 5,
            census_week: 5,
            beta: vec![-0.2, 0.012, 0.10, 0.05, 0.30, 0.15, 0.20, 0.35],
            omega: 0.568_f64.ln(),
            hetero_scale: 0.0,
            endowment_sd: 1.0,
            endow_loading_t: 0.0,
            endow_loading_s: 0.0,
            endow_loading_y: 0.0,
            instrument_strength: vec![8.0, -0.12],
            treatment_params: vec![-1.55, 0.01, 0.15, -0.10, 0.25, 0.10, 0.15, 0.20],
            selection_params: vec![0.5, 0.005, 0.05, 0.0, 0.10, 0.05, 0.05, 0.15, -0.10],
            outcome_trend: 0.04,
            effect_drift: 0.0,
            family: FamilyKind::Nb2,
            alpha: 0.8,
            p_inflate: 0.0,
            structural_zeros: StructuralZeroMode::default(),
            seed: 0,
        }
    }

    /// A world where the endowment drives uptake, selection, the
    /// outcome level, and the effect size, at magnitudes in the range
    /// the estimation ladder is designed for.
    pub fn confounded() -> Self {
        DGPConfig {
            hetero_scale: 0.3,
            endow_loading_t: 1.0,
            endow_loading_s: 0.5,
            endow_loading_y: 0.2,
            alpha: 1.142,
            ..DGPConfig::exogenous()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_persons == 0 {
            return fail("n_persons must be at least 1".into());
        }
        if self.weeks == 0 {
            return fail("weeks must be at least 1".into());
        }
        if self.census_week == 0 || self.census_week > self.weeks {
            return fail(format!(
                "census_week must lie in 1..={}, got {}",
                self.weeks, self.census_week
            ));
        }
        let k = COVARIATE_NAMES.len();
        if self.beta.len() != k + 1 {
            return fail(format!(
                "beta needs {} entries (intercept then one per covariate), got {}",
                k + 1,
                self.beta.len()
            ));
        }
        if self.treatment_params.len() != k + 1 {
            return fail(format!(
                "treatment_params needs {} entries (intercept then one per covariate), got {}",
                k + 1,
                self.treatment_params.len()
            ));
        }
        if self.selection_params.len() != k + 2 {
            return fail(format!(
                "selection_params needs {} entries (intercept, covariates, week), got {}",
                k + 2,
                self.selection_params.len()
            ));
        }
        if self.instrument_strength.len() != INSTRUMENT_NAMES.len() {
            return fail(format!(
                "instrument_strength needs {} entries (one per instrument), got {}",
                INSTRUMENT_NAMES.len(),
                self.instrument_strength.len()
            ));
        }
        if self.endowment_sd.is_nan() || self.endowment_sd < 0.0 {
            return fail(format!(
                "endowment_sd must be nonnegative, got {}",
                self.endowment_sd
            ));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return fail(format!("alpha must be nonnegative, got {}", self.alpha));
        }
        if self.family == FamilyKind::Poisson {
            return fail(
                "family must be nb2, zinb, or ztnb; the equidispersed world is nb2 with alpha 0"
                    .into(),
            );
        }
        if !(0.0..1.0).contains(&self.p_inflate) {
            return fail(format!(
                "p_inflate must lie in [0, 1), got {}",
                self.p_inflate
            ));
        }
        if self.p_inflate > 0.0 && self.family != FamilyKind::Zinb {
            return fail(format!(
                "p_inflate is only meaningful for family zinb, got {} with family {}",
                self.p_inflate, self.family
            ));
        }
        Ok(())
    }
}

/// Per-person and per-row quantities the generator knows but an
/// estimator never sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenTruth {
    /// Endowment per person.
    pub mu: Vec<f64>,
    /// Untreated potential outcome per row.
    pub y0: Vec<u64>,
    /// Treated potential outcome per row.
    pub y1: Vec<u64>,
    /// True uptake probability per person, before the uptake shock.
    pub treat_propensity: Vec<f64>,
    /// True selection probability per row, before the selection shock.
    pub select_propensity: Vec<f64>,
}

/// A generated panel together with its hidden truth. The `data` field
/// is a plain observable panel; nothing in it depends on the truth
/// except through the generating process itself.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPanel {
    pub data: PanelDataset,
    pub truth: HiddenTruth,
}

/// Mean potential-outcome contrasts computed from hidden truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleEffects {
    /// Mean of `y1 - y0` over every person-week.
    pub ate_overall: f64,
    /// Mean of `y1 - y0` over the selected person-weeks.
    pub ate_selected: f64,
    /// Mean untreated outcome of the treated arm minus the untreated
    /// arm: the level confounding a naive contrast absorbs. NaN when
    /// either arm is empty.
    pub upsilon: f64,
}

/// Generate one panel from the config's own seed.
pub fn simulate_panel(cfg: &DGPConfig) -> Result<SimulatedPanel> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    simulate_with_rng(cfg, &mut rng)
}

/// Generate one panel from a caller-owned stream, for replication
/// studies that pre-split one stream per replication.
pub fn simulate_with_rng<R: Rng + ?Sized>(cfg: &DGPConfig, rng: &mut R) -> Result<SimulatedPanel> {
    cfg.validate()?;
    let k = COVARIATE_NAMES.len();
    let n_rows = cfg.n_persons * cfg.weeks as usize;

    let mut person = Vec::with_capacity(n_rows);
    let mut week = Vec::with_capacity(n_rows);
    let mut outcome = Vec::with_capacity(n_rows);
    let mut treatment = Vec::with_capacity(n_rows);
    let mut selection = Vec::with_capacity(n_rows);
    let mut covariates: Vec<Vec<f64>> = (0..k).map(|_| Vec::with_capacity(n_rows)).collect();
    let mut instruments: Vec<Vec<f64>> = (0..2).map(|_| Vec::with_capacity(n_rows)).collect();
    let mut cluster = Vec::with_capacity(n_rows);

    let mut mu_all = Vec::with_capacity(cfg.n_persons);
    let mut y0_all = Vec::with_capacity(n_rows);
    let mut y1_all = Vec::with_capacity(n_rows);
    let mut treat_prop = Vec::with_capacity(cfg.n_persons);
    let mut select_prop = Vec::with_capacity(n_rows);

    for p in 0..cfg.n_persons {
        let age = rng.gen_range(65..=95) as f64;
        let female = f64::from(rng.gen_bool(0.65));
        let rural = f64::from(rng.gen_bool(0.09));
        let group: f64 = rng.gen();
        let (dementia, learning, physical) = if group < 0.06 {
            (1.0, 0.0, 0.0)
        } else if group < 0.33 {
            (0.0, 1.0, 0.0)
        } else if group < 0.50 {
            (0.0, 0.0, 1.0)
        } else {
            (0.0, 0.0, 0.0)
        };
        let comorbid = f64::from(rng.gen_bool(0.43));
        let uptake = rng.gen_range(0.02..0.22);
        let deprivation = rng.gen_range(1..=10) as f64;
        let mu = cfg.endowment_sd * rng.sample::<f64, _>(StandardNormal);
        let e_t: f64 = rng.sample(StandardNormal);

        let x = [age, female, rural, dementia, learning, physical, comorbid];
        let z = [uptake, deprivation];
        let lin = |coefs: &[f64]| -> f64 {
            coefs[0] + coefs[1..].iter().zip(&x).map(|(c, v)| c * v).sum::<f64>()
        };
        let t_index = lin(&cfg.treatment_params)
            + cfg
                .instrument_strength
                .iter()
                .zip(&z)
                .map(|(c, v)| c * v)
                .sum::<f64>()
            + cfg.endow_loading_t * mu;
        let treated = u8::from(t_index + e_t > 0.0);
        mu_all.push(mu);
        treat_prop.push(normal::cdf(t_index));

        let base = lin(&cfg.beta) + cfg.endow_loading_y * mu;
        let sel_coef = &cfg.selection_params;

        for w in 1..=cfg.weeks {
            let trend1 = cfg.census_week as f64 - w as f64;
            let s_index = lin(&sel_coef[..=k])
                + sel_coef[k + 1] * w as f64
                + cfg.endow_loading_s * mu;
            let e_s: f64 = rng.sample(StandardNormal);
            let mut selected = u8::from(s_index + e_s > 0.0);
            select_prop.push(normal::cdf(s_index));

            let structural =
                cfg.family == FamilyKind::Zinb && rng.gen::<f64>() < cfg.p_inflate;
            let (y0, y1) = if structural {
                (0, 0)
            } else {
                let effect =
                    cfg.omega + cfg.effect_drift * w as f64 + cfg.hetero_scale * mu;
                let eta0 = base + cfg.outcome_trend * trend1;
                let draw = |lambda: f64, rng: &mut R| -> Result<u64> {
                    let fam = match cfg.family {
                        FamilyKind::Ztnb => CountFamily::Ztnb {
                            lambda,
                            alpha: cfg.alpha,
                        },
                        _ => CountFamily::Nb2 {
                            lambda,
                            alpha: cfg.alpha,
                        },
                    };
                    fam.sample(rng)
                };
                let y0 = draw(eta0.exp(), rng)?;
                let y1 = draw((eta0 + effect).exp(), rng)?;
                (y0, y1)
            };
            if structural && cfg.structural_zeros == StructuralZeroMode::NeverHospitalized {
                selected = 0;
            }

            person.push(p as u64 + 1);
            week.push(w);
            treatment.push(Some(treated));
            selection.push(selected);
            outcome.push((selected == 1).then_some(if treated == 1 { y1 } else { y0 }));
            for (col, v) in covariates.iter_mut().zip(&x) {
                col.push(*v);
            }
            for (col, v) in instruments.iter_mut().zip(&z) {
                col.push(*v);
            }
            cluster.push(p as u64 + 1);
            y0_all.push(y0);
            y1_all.push(y1);
        }
    }

    let data = PanelDataset {
        names: ColumnNames {
            person: "person_id".into(),
            week: "week".into(),
            outcome: "los".into(),
            treatment: "treat".into(),
            selection: "observed".into(),
            cluster: "person_id".into(),
        },
        person,
        week,
        outcome,
        treatment,
        selection,
        covariate_names: COVARIATE_NAMES.iter().map(|s| s.to_string()).collect(),
        covariates,
        instrument_names: INSTRUMENT_NAMES.iter().map(|s| s.to_string()).collect(),
        instruments,
        cluster,
        census_week: cfg.census_week,
    };
    data.validate()?;
    Ok(SimulatedPanel {
        data,
        truth: HiddenTruth {
            mu: mu_all,
            y0: y0_all,
            y1: y1_all,
            treat_propensity: treat_prop,
            select_propensity: select_prop,
        },
    })
}

/// Sample means of the hidden potential-outcome contrasts.
pub fn oracle_effects(panel: &SimulatedPanel) -> OracleEffects {
    let truth = &panel.truth;
    let data = &panel.data;
    let n = data.n_rows();

    let diff =
        |i: usize| -> f64 { truth.y1[i] as f64 - truth.y0[i] as f64 };
    let ate_overall = (0..n).map(diff).sum::<f64>() / n as f64;

    let selected: Vec<usize> = (0..n).filter(|&i| data.selection[i] == 1).collect();
    let ate_selected = if selected.is_empty() {
        f64::NAN
    } else {
        selected.iter().map(|&i| diff(i)).sum::<f64>() / selected.len() as f64
    };

    let mut sum = [0.0f64; 2];
    let mut count = [0usize; 2];
    for i in 0..n {
        if let Some(t) = data.treatment[i] {
            sum[t as usize] += truth.y0[i] as f64;
            count[t as usize] += 1;
        }
    }
    let upsilon = if count[0] == 0 || count[1] == 0 {
        f64::NAN
    } else {
        sum[1] / count[1] as f64 - sum[0] / count[0] as f64
    };

    OracleEffects {
        ate_overall,
        ate_selected,
        upsilon,
    }
}
