//! Result documents and aligned plain-text tables.
//!
//! Fits, matching runs, and experiment batches are serialized as
//! tagged JSON documents so downstream steps can check what they were
//! handed. The renderers turn collections of documents into aligned
//! monospace tables: one column of first-stage marginal effects per
//! stage, one column per fitted model, or one column per ladder rung.

use serde::{Deserialize, Serialize};

use crate::data::PanelDataset;
use crate::error::{Error, Result};
use crate::inference::{AmeEntry, IrrEntry, TestResult};
use crate::matching::MatchResult;
use crate::mc::ExperimentReport;
use crate::mle::BinaryLink;
use crate::two_stage::PipelineResult;

/// Any serialized result the toolkit can write or render.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Document {
    Fit(Box<FitDocument>),
    Psm(MatchDocument),
    Experiment(Box<ExperimentReport>),
}

impl Document {
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Document> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Sample size of one first-stage fit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StageN {
    pub n_obs: usize,
    pub n_clusters: usize,
}

/// Everything a table needs from one pipeline run, detached from the
/// in-memory fit objects so it can travel as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDocument {
    pub strategy: String,
    pub family: String,
    /// Design column whose coefficient is the treatment effect.
    pub effect: String,
    pub treatment_column: String,
    pub selection_column: String,
    pub n_obs: usize,
    pub n_clusters: usize,
    pub loglik: f64,
    /// Dispersion parameter on the natural scale, absent for the
    /// equidispersed family.
    pub alpha: Option<f64>,
    pub irr: Vec<IrrEntry>,
    pub treatment_ame: Vec<AmeEntry>,
    pub selection_ame: Vec<AmeEntry>,
    pub treatment_stage_n: Option<StageN>,
    pub selection_stage_n: Option<StageN>,
    pub weak_instruments: Option<TestResult>,
    pub model_test: TestResult,
    pub dispersion: Option<TestResult>,
    pub omega: f64,
    pub omega_se: f64,
    pub implied_ate: f64,
    pub derived: Vec<String>,
    pub dropped: Vec<String>,
}

impl FitDocument {
    pub fn from_pipeline(panel: &PanelDataset, run: &PipelineResult) -> FitDocument {
        let stage_n = |stage: &Option<crate::two_stage::FirstStage>| {
            stage.as_ref().map(|s| StageN {
                n_obs: s.fit.n_obs,
                n_clusters: s.fit.n_clusters,
            })
        };
        let alpha = if run.spec.family.has_dispersion() {
            run.fit.coef("ln_alpha").ok().map(f64::exp)
        } else {
            None
        };
        FitDocument {
            strategy: run.spec.id.as_str().to_string(),
            family: run.spec.family.as_str().to_string(),
            effect: run.effect_name.clone(),
            treatment_column: panel.names.treatment.clone(),
            selection_column: panel.names.selection.clone(),
            n_obs: run.fit.n_obs,
            n_clusters: run.fit.n_clusters,
            loglik: run.fit.loglik,
            alpha,
            irr: run.irr.clone(),
            treatment_ame: run.treatment_ame.clone(),
            selection_ame: run.selection_ame.clone(),
            treatment_stage_n: stage_n(&run.treatment_stage),
            selection_stage_n: stage_n(&run.selection_stage),
            weak_instruments: run.weak_instruments.clone(),
            model_test: run.model_test.clone(),
            dispersion: run.dispersion.clone(),
            omega: run.omega,
            omega_se: run.omega_se,
            implied_ate: run.implied_ate,
            derived: run.derived.clone(),
            dropped: run.dropped.clone(),
        }
    }
}

/// The matched-contrast estimate and the size of the matched sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchDocument {
    pub link: String,
    pub impute_k: usize,
    pub n_pairs: usize,
    pub n_unmatched: usize,
    pub n_obs: usize,
    pub n_clusters: usize,
    pub ate: f64,
    pub se: f64,
    pub p_value: f64,
}

impl MatchDocument {
    pub fn from_match(link: BinaryLink, impute_k: usize, m: &MatchResult) -> MatchDocument {
        MatchDocument {
            link: link.as_str().to_string(),
            impute_k,
            n_pairs: m.pairs.len(),
            n_unmatched: m.unmatched.len(),
            n_obs: m.score_model.n_obs,
            n_clusters: m.score_model.n_clusters,
            ate: m.ate,
            se: m.se,
            p_value: m.p_value,
        }
    }
}

/// Which table layout to render.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableStyle {
    /// First-stage marginal effects, one column per stage.
    Table3,
    /// Outcome models side by side, one column per fit.
    Table4,
    /// The identification ladder, one column per strategy.
    Table5,
}

impl TableStyle {
    pub fn parse(s: &str) -> Result<TableStyle> {
        match s {
            "table3" => Ok(TableStyle::Table3),
            "table4" => Ok(TableStyle::Table4),
            "table5" => Ok(TableStyle::Table5),
            other => Err(Error::Config(format!(
                "unknown table style `{other}`, expected table3, table4, or table5"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TableStyle::Table3 => "table3",
            TableStyle::Table4 => "table4",
            TableStyle::Table5 => "table5",
        }
    }
}

/// Render a document collection in the requested style.
pub fn render(style: TableStyle, docs: &[Document]) -> Result<String> {
    if docs.is_empty() {
        return Err(Error::Config("no documents to render".into()));
    }
    let mut fits: Vec<&FitDocument> = Vec::new();
    let mut psms: Vec<&MatchDocument> = Vec::new();
    for doc in docs {
        match doc {
            Document::Fit(f) => fits.push(f),
            Document::Psm(m) => psms.push(m),
            Document::Experiment(_) => {
                return Err(Error::Config(format!(
                    "style `{}` renders fit and matching documents, not experiment reports",
                    style.as_str()
                )))
            }
        }
    }
    match style {
        TableStyle::Table3 => {
            if fits.len() != 1 || !psms.is_empty() {
                return Err(Error::Config(
                    "style `table3` takes exactly one fit document".into(),
                ));
            }
            render_table3(fits[0])
        }
        TableStyle::Table4 => {
            if psms.len() > 1 {
                return Err(Error::Config(
                    "style `table4` takes at most one matching document".into(),
                ));
            }
            render_table4(&fits, psms.first().copied())
        }
        TableStyle::Table5 => {
            if !psms.is_empty() {
                return Err(Error::Config(
                    "style `table5` takes fit documents only".into(),
                ));
            }
            render_table5(&fits)
        }
    }
}

/// First-stage marginal effects, one column per estimated stage.
pub fn render_table3(doc: &FitDocument) -> Result<String> {
    struct Stage<'a> {
        header: String,
        ame: &'a [AmeEntry],
        n: Option<StageN>,
    }
    let mut stages: Vec<Stage> = Vec::new();
    if !doc.treatment_ame.is_empty() {
        stages.push(Stage {
            header: format!("P({} = 1)", doc.treatment_column),
            ame: &doc.treatment_ame,
            n: doc.treatment_stage_n,
        });
    }
    if !doc.selection_ame.is_empty() {
        stages.push(Stage {
            header: format!("P({} = 1)", doc.selection_column),
            ame: &doc.selection_ame,
            n: doc.selection_stage_n,
        });
    }
    if stages.is_empty() {
        return Err(Error::Config(format!(
            "strategy `{}` has no first-stage marginal effects to tabulate",
            doc.strategy
        )));
    }

    let mut names: Vec<&str> = Vec::new();
    for stage in &stages {
        for entry in stage.ame {
            if entry.name != "intercept" && !names.contains(&entry.name.as_str()) {
                names.push(&entry.name);
            }
        }
    }

    let mut header = vec![String::new()];
    header.extend(stages.iter().map(|s| s.header.clone()));
    let mut grid = Grid::new(header);
    for name in names {
        let mut cells = vec![name.to_string()];
        for stage in &stages {
            cells.push(
                stage
                    .ame
                    .iter()
                    .find(|e| e.name == name)
                    .map(ame_cell)
                    .unwrap_or_default(),
            );
        }
        grid.push(cells);
    }
    grid.rule();
    let mut obs = vec!["observations".to_string()];
    let mut clu = vec!["clusters".to_string()];
    for stage in &stages {
        obs.push(stage.n.map(|n| thousands(n.n_obs)).unwrap_or_default());
        clu.push(stage.n.map(|n| thousands(n.n_clusters)).unwrap_or_default());
    }
    grid.push(obs);
    grid.push(clu);
    Ok(grid.render())
}

/// Outcome models side by side: rate ratios, then the shared test
/// block, with single-valued rows pinned to the first column that
/// carries them.
pub fn render_table4(fits: &[&FitDocument], psm: Option<&MatchDocument>) -> Result<String> {
    if fits.is_empty() {
        return Err(Error::Config(
            "style `table4` needs at least one fit document".into(),
        ));
    }
    if fits.len() > 3 {
        return Err(Error::Config(
            "style `table4` renders at most three fit columns".into(),
        ));
    }
    let mut header = vec![String::new()];
    for (i, doc) in fits.iter().enumerate() {
        header.push(format!("({}) {}", i + 1, doc.family));
    }
    let mut grid = Grid::new(header);
    push_irr_rows(&mut grid, fits);
    push_tail(&mut grid, fits, psm);
    Ok(grid.render())
}

/// The identification ladder: one column per strategy, s1 through s5.
pub fn render_table5(fits: &[&FitDocument]) -> Result<String> {
    let mut sorted: Vec<&FitDocument> = fits.to_vec();
    sorted.sort_by(|a, b| a.strategy.cmp(&b.strategy));
    let got: Vec<&str> = sorted.iter().map(|d| d.strategy.as_str()).collect();
    if got != ["s1", "s2", "s3", "s4", "s5"] {
        return Err(Error::Config(
            "style `table5` needs one fit document per strategy s1 through s5".into(),
        ));
    }
    let mut header = vec![String::new()];
    header.extend(sorted.iter().map(|d| d.strategy.clone()));
    let mut grid = Grid::new(header);
    push_irr_rows(&mut grid, &sorted);
    push_tail(&mut grid, &sorted, None);
    Ok(grid.render())
}

/// Coefficient rows shared by the model and ladder tables: the union
/// of rate-ratio names in first-appearance order, auxiliary
/// parameters excluded.
fn push_irr_rows(grid: &mut Grid, fits: &[&FitDocument]) {
    let hidden = |name: &str| {
        name == "intercept" || name == "ln_alpha" || name.starts_with("inflate")
    };
    let mut names: Vec<&str> = Vec::new();
    for doc in fits {
        for entry in &doc.irr {
            if !hidden(&entry.name) && !names.contains(&entry.name.as_str()) {
                names.push(&entry.name);
            }
        }
    }
    for name in names {
        let mut cells = vec![name.to_string()];
        for doc in fits {
            cells.push(
                doc.irr
                    .iter()
                    .find(|e| e.name == name)
                    .map(ratio_cell)
                    .unwrap_or_default(),
            );
        }
        grid.push(cells);
    }
}

/// Test block and sample sizes under the coefficient rows.
fn push_tail(grid: &mut Grid, fits: &[&FitDocument], psm: Option<&MatchDocument>) {
    grid.rule();
    if fits.iter().any(|d| d.weak_instruments.is_some()) {
        let mut cells = vec!["weak-instrument Wald".to_string()];
        let mut shown = false;
        for doc in fits {
            let cell = match (&doc.weak_instruments, shown) {
                (Some(t), false) => {
                    shown = true;
                    wald_cell(t)
                }
                _ => String::new(),
            };
            cells.push(cell);
        }
        grid.push(cells);
    }
    let mut model = vec!["model Wald".to_string()];
    model.extend(fits.iter().map(|d| p_cell(&d.model_test)));
    grid.push(model);
    if fits
        .iter()
        .any(|d| d.alpha.is_some() || d.dispersion.is_some())
    {
        let mut cells = vec!["dispersion".to_string()];
        cells.extend(
            fits.iter()
                .map(|d| alpha_cell(d.alpha, d.dispersion.as_ref())),
        );
        grid.push(cells);
    }
    if let Some(m) = psm {
        let mut cells = vec!["psm".to_string()];
        cells.push(psm_cell(m));
        cells.resize(fits.len() + 1, String::new());
        grid.push(cells);
    }
    grid.rule();
    let mut ll = vec!["log likelihood".to_string()];
    ll.extend(fits.iter().map(|d| format!("{:.1}", d.loglik)));
    grid.push(ll);
    let mut obs = vec!["observations".to_string()];
    obs.extend(fits.iter().map(|d| thousands(d.n_obs)));
    grid.push(obs);
    let mut clu = vec!["clusters".to_string()];
    clu.extend(fits.iter().map(|d| thousands(d.n_clusters)));
    grid.push(clu);
}

fn ratio_cell(e: &IrrEntry) -> String {
    format!("{:.3} ({:.2})", e.irr, e.z)
}

fn ame_cell(e: &AmeEntry) -> String {
    format!("{:.3} ({:.2})", e.ame, e.z)
}

fn wald_cell(t: &TestResult) -> String {
    format!("{:.2} ({:.2})", t.statistic, t.p_value)
}

fn p_cell(t: &TestResult) -> String {
    format!("({:.4})", t.p_value)
}

fn alpha_cell(alpha: Option<f64>, lr: Option<&TestResult>) -> String {
    match (alpha, lr) {
        (Some(a), Some(t)) => format!("α={:.3} ({:.2})", a, t.p_value),
        (Some(a), None) => format!("α={a:.3} (-)"),
        (None, Some(t)) => format!("α=0.000 ({:.2})", t.p_value),
        (None, None) => "-".into(),
    }
}

fn psm_cell(d: &MatchDocument) -> String {
    format!("{:.3} ({:.3})", d.ate, d.p_value)
}

/// Group digits of a count with commas.
fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

enum Row {
    Cells(Vec<String>),
    Rule,
}

/// Monospace table with a left-aligned label column and right-aligned
/// value columns, sized to the widest cell of each column.
struct Grid {
    header: Vec<String>,
    rows: Vec<Row>,
}

impl Grid {
    fn new(header: Vec<String>) -> Grid {
        let mut grid = Grid {
            header,
            rows: Vec::new(),
        };
        grid.rule();
        grid
    }

    fn push(&mut self, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.header.len());
        self.rows.push(Row::Cells(cells));
    }

    fn rule(&mut self) {
        self.rows.push(Row::Rule);
    }

    fn render(&self) -> String {
        let width = |s: &str| s.chars().count();
        let mut widths: Vec<usize> = self.header.iter().map(|h| width(h)).collect();
        for row in &self.rows {
            if let Row::Cells(cells) = row {
                for (j, cell) in cells.iter().enumerate() {
                    widths[j] = widths[j].max(width(cell));
                }
            }
        }
        let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
        let format_row = |cells: &[String]| {
            let mut line = String::new();
            for (j, cell) in cells.iter().enumerate() {
                if j > 0 {
                    line.push_str("  ");
                }
                let pad = " ".repeat(widths[j] - width(cell));
                if j == 0 {
                    line.push_str(cell);
                    line.push_str(&pad);
                } else {
                    line.push_str(&pad);
                    line.push_str(cell);
                }
            }
            line.truncate(line.trim_end().len());
            line
        };
        let mut out = format_row(&self.header);
        out.push('\n');
        for row in &self.rows {
            match row {
                Row::Rule => {
                    out.push_str(&"-".repeat(total));
                    out.push('\n');
                }
                Row::Cells(cells) => {
                    out.push_str(&format_row(cells));
                    out.push('\n');
                }
            }
        }
        out
    }
}
