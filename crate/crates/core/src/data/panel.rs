//! Person-week panel container.
//!
//! One row per person-week. The outcome is observed exactly on rows with
//! `selection = 1`; treatment may be missing anywhere (its column is blank
//! there). Covariates and instruments must be complete.

use super::schema::SchemaMap;
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

/// Original column names, kept so emitted files and reports speak the
/// ingested vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnNames {
    pub person: String,
    pub week: String,
    pub outcome: String,
    pub treatment: String,
    pub selection: String,
    pub cluster: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    pub names: ColumnNames,
    pub person: Vec<u64>,
    pub week: Vec<u32>,
    pub outcome: Vec<Option<u64>>,
    pub treatment: Vec<Option<u8>>,
    pub selection: Vec<u8>,
    pub covariate_names: Vec<String>,
    pub covariates: Vec<Vec<f64>>,
    pub instrument_names: Vec<String>,
    pub instruments: Vec<Vec<f64>>,
    pub cluster: Vec<u64>,
    /// Reference week for the countdown trend `trend1 = census_week - week`.
    pub census_week: u32,
}

impl PanelDataset {
    pub fn n_rows(&self) -> usize {
        self.person.len()
    }

    pub fn n_persons(&self) -> usize {
        let mut ids: Vec<u64> = self.person.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    /// Largest observed week index.
    pub fn weeks(&self) -> u32 {
        self.week.iter().copied().max().unwrap_or(0)
    }

    /// Row indices forming the estimation sample: selected and with an
    /// observed treatment status.
    pub fn estimation_rows(&self) -> Vec<usize> {
        (0..self.n_rows())
            .filter(|&i| self.selection[i] == 1 && self.treatment[i].is_some())
            .collect()
    }

    /// Row indices with an observed treatment status (first-stage sample).
    pub fn treatment_rows(&self) -> Vec<usize> {
        (0..self.n_rows())
            .filter(|&i| self.treatment[i].is_some())
            .collect()
    }

    /// Countdown trend for a row: weeks remaining until the census week.
    pub fn trend1(&self, row: usize) -> f64 {
        self.census_week as f64 - self.week[row] as f64
    }

    /// Cross-row invariants; called by `ingest` and the synthetic generator.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_rows();
        for v in [
            self.week.len(),
            self.outcome.len(),
            self.treatment.len(),
            self.selection.len(),
            self.cluster.len(),
        ] {
            if v != n {
                return Err(Error::Config("panel columns have unequal lengths".into()));
            }
        }
        for col in self.covariates.iter().chain(self.instruments.iter()) {
            if col.len() != n {
                return Err(Error::Config("panel columns have unequal lengths".into()));
            }
        }
        for i in 0..n {
            if self.week[i] == 0 {
                return Err(Error::BadValue {
                    row: i,
                    column: self.names.week.clone(),
                    reason: "week indices start at 1".into(),
                });
            }
            if self.outcome[i].is_some() != (self.selection[i] == 1) {
                return Err(Error::SelectionOutcomeMismatch { row: i });
            }
        }
        Ok(())
    }

    // -----------------------------------------------------------------
    // delimited ingestion / emission
    // -----------------------------------------------------------------

    pub fn ingest<R: Read>(reader: R, schema: &SchemaMap) -> Result<Self> {
        schema.validate()?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::UnknownColumn(name.to_string()))
        };

        let i_person = col(&schema.person)?;
        let i_week = col(&schema.week)?;
        let i_outcome = col(&schema.outcome)?;
        let i_treat = col(&schema.treatment)?;
        let i_sel = col(&schema.selection)?;
        let i_cluster = col(schema.cluster_column())?;
        let i_covs: Vec<usize> = schema
            .covariates
            .iter()
            .map(|c| col(c))
            .collect::<Result<_>>()?;
        let i_inst: Vec<usize> = schema
            .instruments
            .iter()
            .map(|c| col(c))
            .collect::<Result<_>>()?;

        let mut out = PanelDataset {
            names: ColumnNames {
                person: schema.person.clone(),
                week: schema.week.clone(),
                outcome: schema.outcome.clone(),
                treatment: schema.treatment.clone(),
                selection: schema.selection.clone(),
                cluster: schema.cluster_column().to_string(),
            },
            person: Vec::new(),
            week: Vec::new(),
            outcome: Vec::new(),
            treatment: Vec::new(),
            selection: Vec::new(),
            covariate_names: schema.covariates.clone(),
            covariates: vec![Vec::new(); schema.covariates.len()],
            instrument_names: schema.instruments.clone(),
            instruments: vec![Vec::new(); schema.instruments.len()],
            cluster: Vec::new(),
            census_week: 0,
        };

        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            let field = |idx: usize| record.get(idx).unwrap_or("");
            let bad = |column: &str, reason: String| Error::BadValue {
                row,
                column: column.to_string(),
                reason,
            };

            out.person.push(field(i_person).parse().map_err(|_| {
                bad(&schema.person, format!("`{}` is not an integer id", field(i_person)))
            })?);
            out.week.push(field(i_week).parse().map_err(|_| {
                bad(&schema.week, format!("`{}` is not a week index", field(i_week)))
            })?);
            out.cluster.push(field(i_cluster).parse().map_err(|_| {
                bad(
                    schema.cluster_column(),
                    format!("`{}` is not an integer id", field(i_cluster)),
                )
            })?);

            let outcome = match field(i_outcome) {
                "" => None,
                s => Some(s.parse::<u64>().map_err(|_| {
                    bad(&schema.outcome, format!("`{s}` is not a non-negative count"))
                })?),
            };
            out.outcome.push(outcome);

            let treatment = match field(i_treat) {
                "" => None,
                "0" => Some(0),
                "1" => Some(1),
                s => {
                    return Err(bad(
                        &schema.treatment,
                        format!("`{s}` is not 0, 1, or blank"),
                    ))
                }
            };
            out.treatment.push(treatment);

            let selection = match field(i_sel) {
                "0" => 0,
                "1" => 1,
                s => return Err(bad(&schema.selection, format!("`{s}` is not 0 or 1"))),
            };
            out.selection.push(selection);

            for (slot, &idx) in i_covs.iter().enumerate() {
                let s = field(idx);
                let v: f64 = s.parse().map_err(|_| {
                    bad(&schema.covariates[slot], format!("`{s}` is not a number"))
                })?;
                if !v.is_finite() {
                    return Err(bad(&schema.covariates[slot], "value is not finite".into()));
                }
                out.covariates[slot].push(v);
            }
            for (slot, &idx) in i_inst.iter().enumerate() {
                let s = field(idx);
                let v: f64 = s.parse().map_err(|_| {
                    bad(&schema.instruments[slot], format!("`{s}` is not a number"))
                })?;
                if !v.is_finite() {
                    return Err(bad(&schema.instruments[slot], "value is not finite".into()));
                }
                out.instruments[slot].push(v);
            }
        }

        out.census_week = schema.census_week.unwrap_or_else(|| out.weeks());
        out.validate()?;
        Ok(out)
    }

    pub fn ingest_path<P: AsRef<Path>>(path: P, schema: &SchemaMap) -> Result<Self> {
        Self::ingest(std::fs::File::open(path)?, schema)
    }

    /// Write the panel back out; blank fields encode missing values and
    /// floats print in shortest round-trip form, so `ingest(emit(d)) == d`.
    pub fn emit<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let separate_cluster = self.names.cluster != self.names.person;

        let mut header: Vec<&str> = vec![
            &self.names.person,
            &self.names.week,
            &self.names.outcome,
            &self.names.treatment,
            &self.names.selection,
        ];
        header.extend(self.covariate_names.iter().map(|s| s.as_str()));
        header.extend(self.instrument_names.iter().map(|s| s.as_str()));
        if separate_cluster {
            header.push(&self.names.cluster);
        }
        wtr.write_record(&header)?;

        for i in 0..self.n_rows() {
            let mut rec: Vec<String> = vec![
                self.person[i].to_string(),
                self.week[i].to_string(),
                self.outcome[i].map(|y| y.to_string()).unwrap_or_default(),
                self.treatment[i].map(|t| t.to_string()).unwrap_or_default(),
                self.selection[i].to_string(),
            ];
            for col in &self.covariates {
                rec.push(format!("{}", col[i]));
            }
            for col in &self.instruments {
                rec.push(format!("{}", col[i]));
            }
            if separate_cluster {
                rec.push(self.cluster[i].to_string());
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn emit_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        self.emit(std::fs::File::create(path)?)
    }

    /// Schema under which `emit` output re-ingests to this panel.
    pub fn schema(&self) -> SchemaMap {
        SchemaMap {
            person: self.names.person.clone(),
            week: self.names.week.clone(),
            outcome: self.names.outcome.clone(),
            treatment: self.names.treatment.clone(),
            selection: self.names.selection.clone(),
            covariates: self.covariate_names.clone(),
            instruments: self.instrument_names.clone(),
            cluster: (self.names.cluster != self.names.person)
                .then(|| self.names.cluster.clone()),
            census_week: Some(self.census_week),
        }
    }
}
