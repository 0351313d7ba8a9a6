//! Balanced outcome panels, role assignment and CSV ingestion.
//!
//! A [`PanelData`] holds a units × periods outcome matrix together with a
//! treatment indicator of the same shape. Period labels are kept verbatim for
//! reporting and mapped to an ordering key (integers, or `YYYY-MM-DD` dates
//! mapped to a day count) which must be strictly increasing.
//!
//! Two file layouts are supported:
//!
//! * long: header `unit,period,outcome[,treated]`, one row per cell;
//! * wide: header `unit,<period>,<period>,...`, one row per unit, with
//!   treatment supplied by an optional sidecar `unit,first_treated_period`.
//!
//! Missing cells are rejected; no imputation is attempted.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::PanelError;

/// Supported on-disk panel layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PanelFormat {
    LongCsv,
    WideCsv,
}

/// Immutable balanced panel of outcomes and treatment indicators.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    outcomes: DMatrix<f64>,
    treated: DMatrix<bool>,
    unit_ids: Vec<String>,
    period_labels: Vec<String>,
    period_keys: Vec<i64>,
}

/// Parses a period label into its ordering key.
pub fn period_key(label: &str) -> Result<i64, PanelError> {
    let trimmed = label.trim();
    if let Ok(v) = trimmed.parse::<i64>() {
        return Ok(v);
    }
    NaiveDate::parse_from_str(trimmed, "%Y-%m-%d")
        .map(|d| i64::from(d.num_days_from_ce()))
        .map_err(|_| PanelError::BadPeriodLabel(label.to_string()))
}

impl PanelData {
    /// Builds a panel, validating shapes, finiteness, unit uniqueness and
    /// strictly increasing period keys.
    pub fn new(
        unit_ids: Vec<String>,
        period_labels: Vec<String>,
        outcomes: DMatrix<f64>,
        treated: Option<DMatrix<bool>>,
    ) -> Result<Self, PanelError> {
        let (n, t) = outcomes.shape();
        if n == 0 || t == 0 {
            return Err(PanelError::Empty);
        }
        if unit_ids.len() != n || period_labels.len() != t {
            return Err(PanelError::Invalid(format!(
                "outcomes are {n}x{t} but {} unit ids and {} period labels were given",
                unit_ids.len(),
                period_labels.len()
            )));
        }
        let treated = treated.unwrap_or_else(|| DMatrix::from_element(n, t, false));
        if treated.shape() != (n, t) {
            return Err(PanelError::Invalid(format!(
                "treated matrix is {}x{}, outcomes are {n}x{t}",
                treated.nrows(),
                treated.ncols()
            )));
        }
        let mut seen = HashSet::new();
        for id in &unit_ids {
            if !seen.insert(id.as_str()) {
                return Err(PanelError::Invalid(format!("duplicate unit id `{id}`")));
            }
        }
        for i in 0..n {
            for s in 0..t {
                if !outcomes[(i, s)].is_finite() {
                    return Err(PanelError::NonNumericOutcome {
                        unit: unit_ids[i].clone(),
                        period: period_labels[s].clone(),
                        value: outcomes[(i, s)].to_string(),
                        line: 0,
                    });
                }
            }
        }
        let period_keys = period_labels
            .iter()
            .map(|l| period_key(l))
            .collect::<Result<Vec<_>, _>>()?;
        if period_keys.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PanelError::Invalid(
                "period labels must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            outcomes,
            treated,
            unit_ids,
            period_labels,
            period_keys,
        })
    }

    /// Convenience constructor with integer period labels.
    pub fn with_integer_periods(
        unit_ids: Vec<String>,
        periods: &[i64],
        outcomes: DMatrix<f64>,
        treated: Option<DMatrix<bool>>,
    ) -> Result<Self, PanelError> {
        let labels = periods.iter().map(|p| p.to_string()).collect();
        Self::new(unit_ids, labels, outcomes, treated)
    }

    pub fn n_units(&self) -> usize {
        self.outcomes.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.outcomes.ncols()
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    pub fn treated(&self) -> &DMatrix<bool> {
        &self.treated
    }

    pub fn outcome(&self, unit: usize, period: usize) -> f64 {
        self.outcomes[(unit, period)]
    }

    pub fn is_treated(&self, unit: usize, period: usize) -> bool {
        self.treated[(unit, period)]
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn period_labels(&self) -> &[String] {
        &self.period_labels
    }

    pub fn period_keys(&self) -> &[i64] {
        &self.period_keys
    }

    pub fn unit_index(&self, id: &str) -> Option<usize> {
        self.unit_ids.iter().position(|u| u == id)
    }

    pub fn period_index(&self, label: &str) -> Option<usize> {
        let key = period_key(label).ok()?;
        self.period_keys.iter().position(|&k| k == key)
    }

    /// Units never treated in any period.
    pub fn never_treated(&self) -> Vec<usize> {
        (0..self.n_units())
            .filter(|&i| (0..self.n_periods()).all(|t| !self.treated[(i, t)]))
            .collect()
    }

    /// Index of the first treated period of `unit`, if any.
    pub fn first_treated_period(&self, unit: usize) -> Option<usize> {
        (0..self.n_periods()).find(|&t| self.treated[(unit, t)])
    }

    /// Copy of the outcomes of `units` over `periods` (rows follow `units`).
    pub fn submatrix(&self, units: &[usize], periods: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(units.len(), periods.len(), |r, c| {
            self.outcomes[(units[r], periods[c])]
        })
    }

    /// Outcome series of one unit over `periods`.
    pub fn series(&self, unit: usize, periods: &[usize]) -> Vec<f64> {
        periods.iter().map(|&t| self.outcomes[(unit, t)]).collect()
    }

    /// SHA-256 of the long-CSV serialization, used as an audit fingerprint.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut buf = Vec::new();
        self.write_long(&mut buf).expect("writing to a Vec cannot fail");
        hex::encode(Sha256::digest(&buf))
    }

    /// Writes the panel in long format.
    pub fn write_long<W: Write>(&self, writer: W) -> Result<(), PanelError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["unit", "period", "outcome", "treated"])?;
        for i in 0..self.n_units() {
            for t in 0..self.n_periods() {
                w.write_record([
                    self.unit_ids[i].as_str(),
                    self.period_labels[t].as_str(),
                    &format_f64(self.outcomes[(i, t)]),
                    if self.treated[(i, t)] { "1" } else { "0" },
                ])?;
            }
        }
        w.flush().map_err(|e| PanelError::Io {
            path: "<writer>".into(),
            source: e,
        })?;
        Ok(())
    }

    /// Writes the panel in wide format plus the treatment sidecar. The sidecar
    /// lists only units that are ever treated; treatment must be absorbing.
    pub fn write_wide<W: Write, S: Write>(&self, writer: W, sidecar: S) -> Result<(), PanelError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["unit".to_string()];
        header.extend(self.period_labels.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n_units() {
            let mut row = vec![self.unit_ids[i].clone()];
            row.extend((0..self.n_periods()).map(|t| format_f64(self.outcomes[(i, t)])));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| PanelError::Io {
            path: "<writer>".into(),
            source: e,
        })?;

        let mut s = csv::Writer::from_writer(sidecar);
        s.write_record(["unit", "first_treated_period"])?;
        for i in 0..self.n_units() {
            if let Some(first) = self.first_treated_period(i) {
                if (first..self.n_periods()).any(|t| !self.treated[(i, t)]) {
                    return Err(PanelError::NonAbsorbingTreatment(self.unit_ids[i].clone()));
                }
                s.write_record([self.unit_ids[i].as_str(), self.period_labels[first].as_str()])?;
            }
        }
        s.flush().map_err(|e| PanelError::Io {
            path: "<sidecar>".into(),
            source: e,
        })?;
        Ok(())
    }
}

fn format_f64(v: f64) -> String {
    // `Display` for f64 is the shortest representation that round-trips.
    format!("{v}")
}

fn open(path: &Path) -> Result<File, PanelError> {
    File::open(path).map_err(|e| PanelError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Loads a panel from disk. Wide files loaded this way carry no treatment;
/// use [`load_wide_panel`] to attach a sidecar.
pub fn load_panel(path: &Path, format: PanelFormat) -> Result<PanelData, PanelError> {
    let file = open(path)?;
    match format {
        PanelFormat::LongCsv => read_long(file),
        PanelFormat::WideCsv => read_wide::<_, File>(file, None),
    }
}

/// Loads a wide panel with an optional `unit,first_treated_period` sidecar.
pub fn load_wide_panel(path: &Path, sidecar: Option<&Path>) -> Result<PanelData, PanelError> {
    let file = open(path)?;
    match sidecar {
        Some(s) => read_wide(file, Some(open(s)?)),
        None => read_wide::<_, File>(file, None),
    }
}

fn header_index(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name))
}

fn parse_outcome(raw: &str, unit: &str, period: &str, line: u64) -> Result<f64, PanelError> {
    match raw.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(PanelError::NonNumericOutcome {
            unit: unit.to_string(),
            period: period.to_string(),
            value: raw.to_string(),
            line,
        }),
    }
}

fn parse_treated(raw: &str, unit: &str, period: &str, line: u64) -> Result<bool, PanelError> {
    match raw.trim() {
        "0" | "" => Ok(false),
        "1" => Ok(true),
        other => Err(PanelError::InvalidTreated {
            unit: unit.to_string(),
            period: period.to_string(),
            value: other.to_string(),
            line,
        }),
    }
}

/// Reads a long-format panel (`unit,period,outcome[,treated]`).
pub fn read_long<R: Read>(reader: R) -> Result<PanelData, PanelError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let unit_col = header_index(&headers, "unit").ok_or_else(|| PanelError::MissingColumn("unit".into()))?;
    let period_col =
        header_index(&headers, "period").ok_or_else(|| PanelError::MissingColumn("period".into()))?;
    let outcome_col =
        header_index(&headers, "outcome").ok_or_else(|| PanelError::MissingColumn("outcome".into()))?;
    let treated_col = header_index(&headers, "treated");

    let mut units: Vec<String> = Vec::new();
    let mut unit_pos: HashMap<String, usize> = HashMap::new();
    // period key -> first-seen label
    let mut periods: HashMap<i64, String> = HashMap::new();
    let mut cells: HashMap<(usize, i64), (f64, bool)> = HashMap::new();

    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let unit = rec.get(unit_col).unwrap_or("").to_string();
        let period = rec.get(period_col).unwrap_or("").to_string();
        let value = parse_outcome(rec.get(outcome_col).unwrap_or(""), &unit, &period, line)?;
        let treated = match treated_col {
            Some(c) => parse_treated(rec.get(c).unwrap_or(""), &unit, &period, line)?,
            None => false,
        };
        let key = period_key(&period)?;
        periods.entry(key).or_insert_with(|| period.clone());
        let u = *unit_pos.entry(unit.clone()).or_insert_with(|| {
            units.push(unit.clone());
            units.len() - 1
        });
        if cells.insert((u, key), (value, treated)).is_some() {
            return Err(PanelError::DuplicateCell { unit, period, line });
        }
    }
    if units.is_empty() {
        return Err(PanelError::Empty);
    }
    let mut keys: Vec<i64> = periods.keys().copied().collect();
    keys.sort_unstable();
    let labels: Vec<String> = keys.iter().map(|k| periods[k].clone()).collect();

    let mut outcomes = DMatrix::zeros(units.len(), keys.len());
    let mut treated = DMatrix::from_element(units.len(), keys.len(), false);
    for (u, unit) in units.iter().enumerate() {
        for (t, key) in keys.iter().enumerate() {
            match cells.get(&(u, *key)) {
                Some(&(v, d)) => {
                    outcomes[(u, t)] = v;
                    treated[(u, t)] = d;
                }
                None => {
                    return Err(PanelError::RaggedPanel {
                        unit: unit.clone(),
                        period: labels[t].clone(),
                    })
                }
            }
        }
    }
    PanelData::new(units, labels, outcomes, Some(treated))
}

/// Reads a wide-format panel and an optional treatment sidecar.
pub fn read_wide<R: Read, S: Read>(reader: R, sidecar: Option<S>) -> Result<PanelData, PanelError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || !headers[0].trim().eq_ignore_ascii_case("unit") {
        return Err(PanelError::MissingColumn("unit".into()));
    }
    let raw_labels: Vec<String> = headers.iter().skip(1).map(|s| s.to_string()).collect();
    if raw_labels.is_empty() {
        return Err(PanelError::Empty);
    }
    let raw_keys = raw_labels
        .iter()
        .map(|l| period_key(l))
        .collect::<Result<Vec<_>, _>>()?;
    let mut order: Vec<usize> = (0..raw_labels.len()).collect();
    order.sort_by_key(|&c| raw_keys[c]);
    for w in order.windows(2) {
        if raw_keys[w[0]] == raw_keys[w[1]] {
            return Err(PanelError::Invalid(format!(
                "duplicate period column `{}`",
                raw_labels[w[1]]
            )));
        }
    }
    let labels: Vec<String> = order.iter().map(|&c| raw_labels[c].clone()).collect();

    let mut units = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let unit = rec.get(0).unwrap_or("").to_string();
        if !seen.insert(unit.clone()) {
            return Err(PanelError::DuplicateCell {
                unit,
                period: "*".into(),
                line,
            });
        }
        let mut row = vec![0.0; labels.len()];
        for (pos, &col) in order.iter().enumerate() {
            let raw = rec.get(col + 1).unwrap_or("");
            if raw.trim().is_empty() {
                return Err(PanelError::RaggedPanel {
                    unit: unit.clone(),
                    period: labels[pos].clone(),
                });
            }
            row[pos] = parse_outcome(raw, &unit, &labels[pos], line)?;
        }
        units.push(unit);
        rows.push(row);
    }
    if units.is_empty() {
        return Err(PanelError::Empty);
    }
    let outcomes = DMatrix::from_fn(units.len(), labels.len(), |r, c| rows[r][c]);
    let mut treated = DMatrix::from_element(units.len(), labels.len(), false);
    if let Some(sidecar) = sidecar {
        let keys: Vec<i64> = order.iter().map(|&c| raw_keys[c]).collect();
        let mut srdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(sidecar);
        let sh = srdr.headers()?.clone();
        let uc = header_index(&sh, "unit").ok_or_else(|| PanelError::MissingColumn("unit".into()))?;
        let pc = header_index(&sh, "first_treated_period")
            .ok_or_else(|| PanelError::MissingColumn("first_treated_period".into()))?;
        for rec in srdr.records() {
            let rec = rec?;
            let unit = rec.get(uc).unwrap_or("").to_string();
            let period = rec.get(pc).unwrap_or("").to_string();
            let u = units
                .iter()
                .position(|x| *x == unit)
                .ok_or_else(|| PanelError::UnknownSidecarUnit(unit.clone()))?;
            let key = period_key(&period)?;
            let first = keys
                .iter()
                .position(|&k| k == key)
                .ok_or_else(|| PanelError::UnknownSidecarPeriod {
                    unit: unit.clone(),
                    period: period.clone(),
                })?;
            for t in first..labels.len() {
                treated[(u, t)] = true;
            }
        }
    }
    PanelData::new(units, labels, outcomes, Some(treated))
}

/// Partition of units and periods into the roles used by the estimators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleAssignment {
    pub unit_of_interest: usize,
    pub controls: Vec<usize>,
    pub instruments: Vec<usize>,
    pub pre_periods: Vec<usize>,
    pub post_periods: Vec<usize>,
}

impl RoleAssignment {
    /// Pre periods `0..first_post`, post periods `first_post..n_periods`.
    pub fn split_at(
        unit_of_interest: usize,
        controls: Vec<usize>,
        instruments: Vec<usize>,
        first_post: usize,
        n_periods: usize,
    ) -> Self {
        Self {
            unit_of_interest,
            controls,
            instruments,
            pre_periods: (0..first_post.min(n_periods)).collect(),
            post_periods: (first_post.min(n_periods)..n_periods).collect(),
        }
    }

    /// Like [`split_at`](Self::split_at), but moves the last `anticipation`
    /// pre periods into the post block.
    pub fn split_with_anticipation(
        unit_of_interest: usize,
        controls: Vec<usize>,
        instruments: Vec<usize>,
        first_post: usize,
        n_periods: usize,
        anticipation: usize,
    ) -> Self {
        Self::split_at(
            unit_of_interest,
            controls,
            instruments,
            first_post.saturating_sub(anticipation),
            n_periods,
        )
    }

    pub fn n_controls(&self) -> usize {
        self.controls.len()
    }

    pub fn n_instruments(&self) -> usize {
        self.instruments.len()
    }

    pub fn t0(&self) -> usize {
        self.pre_periods.len()
    }

    pub fn t1(&self) -> usize {
        self.post_periods.len()
    }

    /// Same roles with a different control/instrument split.
    pub fn with_partition(&self, controls: Vec<usize>, instruments: Vec<usize>) -> Self {
        Self {
            controls,
            instruments,
            ..self.clone()
        }
    }

    /// Same roles restricted to the given pre-treatment periods.
    pub fn with_pre_periods(&self, pre_periods: Vec<usize>) -> Self {
        Self {
            pre_periods,
            ..self.clone()
        }
    }
}

/// One broken role rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoleViolation {
    UnitOutOfBounds { role: &'static str, unit: usize },
    PeriodOutOfBounds { role: &'static str, period: usize },
    DuplicateIndex { role: &'static str, index: usize },
    UnitOfInterestInRole { role: &'static str },
    ControlIsInstrument { unit: usize },
    PeriodInBothBlocks { period: usize },
    PreAfterPost { pre: usize, post: usize },
    UnitOfInterestTreatedPre { period: usize },
    ControlTreated { unit: usize, period: usize },
    InstrumentTreatedPre { unit: usize, period: usize },
}

impl fmt::Display for RoleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::UnitOutOfBounds { role, unit } => write!(f, "{role} unit index {unit} out of bounds"),
            Self::PeriodOutOfBounds { role, period } => {
                write!(f, "{role} period index {period} out of bounds")
            }
            Self::DuplicateIndex { role, index } => write!(f, "index {index} repeated in {role}"),
            Self::UnitOfInterestInRole { role } => write!(f, "unit of interest listed among {role}"),
            Self::ControlIsInstrument { unit } => write!(f, "unit {unit} is both control and instrument"),
            Self::PeriodInBothBlocks { period } => write!(f, "period {period} is both pre and post"),
            Self::PreAfterPost { pre, post } => {
                write!(f, "pre period {pre} does not precede post period {post}")
            }
            Self::UnitOfInterestTreatedPre { period } => {
                write!(f, "unit of interest treated in pre period {period}")
            }
            Self::ControlTreated { unit, period } => write!(f, "control {unit} treated in period {period}"),
            Self::InstrumentTreatedPre { unit, period } => {
                write!(f, "instrument {unit} treated in pre period {period}")
            }
        }
    }
}

impl RoleViolation {
    /// Human-readable message with unit ids and period labels substituted.
    pub fn describe(&self, panel: &PanelData) -> String {
        let u = |i: &usize| panel.unit_ids().get(*i).cloned().unwrap_or_else(|| format!("#{i}"));
        let p = |t: &usize| panel.period_labels().get(*t).cloned().unwrap_or_else(|| format!("#{t}"));
        match self {
            Self::ControlTreated { unit, period } => {
                format!("control `{}` treated in period `{}`", u(unit), p(period))
            }
            Self::InstrumentTreatedPre { unit, period } => {
                format!("instrument `{}` treated in pre period `{}`", u(unit), p(period))
            }
            Self::UnitOfInterestTreatedPre { period } => {
                format!("unit of interest treated in pre period `{}`", p(period))
            }
            Self::ControlIsInstrument { unit } => {
                format!("unit `{}` is both control and instrument", u(unit))
            }
            other => other.to_string(),
        }
    }
}

/// Checks every role rule against the panel; an empty list means valid.
pub fn validate_roles(p: &PanelData, r: &RoleAssignment) -> Vec<RoleViolation> {
    let mut out = Vec::new();
    let n = p.n_units();
    let t = p.n_periods();

    let mut units_ok = true;
    if r.unit_of_interest >= n {
        out.push(RoleViolation::UnitOutOfBounds {
            role: "unit_of_interest",
            unit: r.unit_of_interest,
        });
        units_ok = false;
    }
    for (role, set) in [("controls", &r.controls), ("instruments", &r.instruments)] {
        let mut seen = HashSet::new();
        for &u in set.iter() {
            if u >= n {
                out.push(RoleViolation::UnitOutOfBounds { role, unit: u });
                units_ok = false;
            }
            if !seen.insert(u) {
                out.push(RoleViolation::DuplicateIndex { role, index: u });
            }
            if u == r.unit_of_interest {
                out.push(RoleViolation::UnitOfInterestInRole { role });
            }
        }
    }
    let instrument_set: HashSet<usize> = r.instruments.iter().copied().collect();
    for &c in &r.controls {
        if instrument_set.contains(&c) {
            out.push(RoleViolation::ControlIsInstrument { unit: c });
        }
    }

    let mut periods_ok = true;
    for (role, set) in [("pre_periods", &r.pre_periods), ("post_periods", &r.post_periods)] {
        let mut seen = HashSet::new();
        for &s in set.iter() {
            if s >= t {
                out.push(RoleViolation::PeriodOutOfBounds { role, period: s });
                periods_ok = false;
            }
            if !seen.insert(s) {
                out.push(RoleViolation::DuplicateIndex { role, index: s });
            }
        }
    }
    let post_set: HashSet<usize> = r.post_periods.iter().copied().collect();
    for &s in &r.pre_periods {
        if post_set.contains(&s) {
            out.push(RoleViolation::PeriodInBothBlocks { period: s });
        }
    }
    if let (Some(&max_pre), Some(&min_post)) = (r.pre_periods.iter().max(), r.post_periods.iter().min()) {
        if max_pre >= min_post {
            out.push(RoleViolation::PreAfterPost {
                pre: max_pre,
                post: min_post,
            });
        }
    }

    if units_ok && periods_ok {
        for &s in &r.pre_periods {
            if p.is_treated(r.unit_of_interest, s) {
                out.push(RoleViolation::UnitOfInterestTreatedPre { period: s });
            }
        }
        for &c in &r.controls {
            for &s in r.pre_periods.iter().chain(r.post_periods.iter()) {
                if p.is_treated(c, s) {
                    out.push(RoleViolation::ControlTreated { unit: c, period: s });
                }
            }
        }
        for &k in &r.instruments {
            for &s in &r.pre_periods {
                if p.is_treated(k, s) {
                    out.push(RoleViolation::InstrumentTreatedPre { unit: k, period: s });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const LONG: &str = "unit,period,outcome,treated\na,1,1.0,0\na,2,2.0,0\nb,1,0.0,0\nb,2,1.0,0\n";

    #[test]
    fn long_csv_transcribes_directly() {
        let p = read_long(LONG.as_bytes()).unwrap();
        assert_eq!(p.unit_ids(), &["a".to_string(), "b".to_string()]);
        assert_eq!(p.outcomes(), &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]));
        assert!(p.treated().iter().all(|d| !d));
    }

    #[test]
    fn wide_matches_long() {
        let wide = "unit,1,2\na,1.0,2.0\nb,0.0,1.0\n";
        let p = read_wide::<_, &[u8]>(wide.as_bytes(), None).unwrap();
        assert_eq!(p, read_long(LONG.as_bytes()).unwrap());
    }

    #[test]
    fn ragged_panel_names_the_missing_cell() {
        let csv = "unit,period,outcome\na,1,1.0\nb,1,0.0\nb,2,1.0\n";
        match read_long(csv.as_bytes()) {
            Err(PanelError::RaggedPanel { unit, period }) => {
                assert_eq!(unit, "a");
                assert_eq!(period, "2");
            }
            other => panic!("expected ragged error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_and_non_numeric_cells_are_distinct_errors() {
        let dup = "unit,period,outcome\na,1,1.0\na,1,2.0\n";
        assert!(matches!(
            read_long(dup.as_bytes()),
            Err(PanelError::DuplicateCell { ref unit, ref period, .. }) if unit == "a" && period == "1"
        ));
        let bad = "unit,period,outcome\na,1,x\n";
        assert!(matches!(
            read_long(bad.as_bytes()),
            Err(PanelError::NonNumericOutcome { ref value, .. }) if value == "x"
        ));
        let empty = "unit,period,outcome\na,1,\n";
        assert!(matches!(
            read_long(empty.as_bytes()),
            Err(PanelError::NonNumericOutcome { .. })
        ));
    }

    #[test]
    fn periods_sorted_and_units_in_first_appearance_order() {
        let csv = "unit,period,outcome\nz,2001,1\nz,1999,2\nm,2001,3\nm,1999,4\n";
        let p = read_long(csv.as_bytes()).unwrap();
        assert_eq!(p.unit_ids(), &["z".to_string(), "m".to_string()]);
        assert_eq!(p.period_labels(), &["1999".to_string(), "2001".to_string()]);
        assert_eq!(p.outcome(0, 0), 2.0);
    }

    #[test]
    fn date_labels_map_to_ordered_keys() {
        let csv = "unit,period,outcome\na,2020-02-01,1\na,2020-01-01,2\n";
        let p = read_long(csv.as_bytes()).unwrap();
        assert_eq!(p.period_labels()[0], "2020-01-01");
        assert_eq!(p.period_keys()[1] - p.period_keys()[0], 31);
    }

    #[test]
    fn sidecar_marks_absorbing_treatment() {
        let wide = "unit,1,2,3\na,1,2,3\nb,4,5,6\n";
        let side = "unit,first_treated_period\nb,2\n";
        let p = read_wide(wide.as_bytes(), Some(side.as_bytes())).unwrap();
        assert!(!p.is_treated(1, 0));
        assert!(p.is_treated(1, 1) && p.is_treated(1, 2));
        assert_eq!(p.never_treated(), vec![0]);
    }

    fn panel_with_treatment() -> PanelData {
        // units: 0 interest, 1 control, 2 instrument treated in post, 3 treated everywhere
        let mut d = DMatrix::from_element(4, 4, false);
        d[(0, 2)] = true;
        d[(0, 3)] = true;
        d[(2, 3)] = true;
        for t in 0..4 {
            d[(3, t)] = true;
        }
        PanelData::with_integer_periods(
            (0..4).map(|i| format!("u{i}")).collect(),
            &[1, 2, 3, 4],
            DMatrix::from_fn(4, 4, |i, t| (i * 4 + t) as f64),
            Some(d),
        )
        .unwrap()
    }

    #[test]
    fn valid_assignment_has_no_violations() {
        let p = panel_with_treatment();
        let r = RoleAssignment::split_at(0, vec![1], vec![2], 2, 4);
        assert!(validate_roles(&p, &r).is_empty());
    }

    #[test]
    fn instrument_treated_only_post_is_allowed() {
        let p = panel_with_treatment();
        let r = RoleAssignment::split_at(0, vec![1], vec![2], 2, 4);
        assert!(validate_roles(&p, &r)
            .iter()
            .all(|v| !matches!(v, RoleViolation::InstrumentTreatedPre { .. })));
    }

    #[test]
    fn control_treated_in_post_is_cited() {
        let p = panel_with_treatment();
        let r = RoleAssignment::split_at(0, vec![1, 2], vec![], 2, 4);
        let v = validate_roles(&p, &r);
        assert_eq!(v, vec![RoleViolation::ControlTreated { unit: 2, period: 3 }]);
        assert_eq!(v[0].describe(&p), "control `u2` treated in period `4`");
    }

    #[test]
    fn overlapping_and_misordered_roles() {
        let p = panel_with_treatment();
        let r = RoleAssignment {
            unit_of_interest: 0,
            controls: vec![1, 0],
            instruments: vec![1, 3],
            pre_periods: vec![0, 3],
            post_periods: vec![2, 3],
        };
        let v = validate_roles(&p, &r);
        assert!(v.contains(&RoleViolation::UnitOfInterestInRole { role: "controls" }));
        assert!(v.contains(&RoleViolation::ControlIsInstrument { unit: 1 }));
        assert!(v.contains(&RoleViolation::PeriodInBothBlocks { period: 3 }));
        assert!(v.contains(&RoleViolation::PreAfterPost { pre: 3, post: 2 }));
        assert!(v.contains(&RoleViolation::InstrumentTreatedPre { unit: 3, period: 0 }));
        assert!(v.contains(&RoleViolation::UnitOfInterestTreatedPre { period: 3 }));
    }

    #[test]
    fn out_of_bounds_indices_are_reported_not_panics() {
        let p = panel_with_treatment();
        let r = RoleAssignment::split_at(9, vec![1], vec![], 2, 4);
        assert_eq!(
            validate_roles(&p, &r),
            vec![RoleViolation::UnitOutOfBounds {
                role: "unit_of_interest",
                unit: 9
            }]
        );
    }

    #[test]
    fn anticipation_moves_periods_into_post() {
        let r = RoleAssignment::split_with_anticipation(0, vec![1], vec![], 5, 8, 2);
        assert_eq!(r.pre_periods, vec![0, 1, 2]);
        assert_eq!(r.post_periods, vec![3, 4, 5, 6, 7]);
    }
}
