//! Loading, validation, and writing of the longitudinal measurement panel.
//!
//! The on-disk format is delimited text (comma by default) with one header
//! row. Default column names are `subject_id, years, age, male, dx, mmse`
//! followed by one column per pipeline; a schema file can rename any of them
//! or pin the pipeline column set explicitly. Rows with a missing outcome are
//! dropped (and counted); any other missing or malformed field is an error.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::KvFile;

/// Diagnostic category. CN is the reference level in the design matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dx {
    Cn,
    Mci,
    Ad,
}

impl Dx {
    pub fn as_str(&self) -> &'static str {
        match self {
            Dx::Cn => "CN",
            Dx::Mci => "MCI",
            Dx::Ad => "AD",
        }
    }

    fn parse(s: &str) -> Option<Dx> {
        match s.to_ascii_uppercase().as_str() {
            "CN" => Some(Dx::Cn),
            "MCI" => Some(Dx::Mci),
            "AD" => Some(Dx::Ad),
            _ => None,
        }
    }
}

/// One visit: a subject at a time point with K pipeline measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitRow {
    pub subject_id: String,
    /// Years since the subject's first visit; 0 for the first row.
    pub years: f64,
    /// Age at the initial visit, constant within subject.
    pub age: f64,
    pub male: bool,
    pub dx: Dx,
    /// Outcome score; `None` only before panel construction filters it.
    pub mmse: Option<f64>,
    /// One strictly positive thickness estimate per pipeline, fixed order.
    pub ect: Vec<f64>,
}

/// Column-name mapping for the panel file.
#[derive(Debug, Clone)]
pub struct Schema {
    pub subject_id: String,
    pub years: String,
    pub age: String,
    pub male: String,
    pub dx: String,
    pub mmse: String,
    /// Explicit pipeline columns; `None` means "all remaining columns".
    pub pipelines: Option<Vec<String>>,
    pub delimiter: char,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            subject_id: "subject_id".into(),
            years: "years".into(),
            age: "age".into(),
            male: "male".into(),
            dx: "dx".into(),
            mmse: "mmse".into(),
            pipelines: None,
            delimiter: ',',
        }
    }
}

impl Schema {
    /// Parse a schema mapping from key=value text.
    pub fn parse(text: &str) -> Result<Schema> {
        let mut kv = KvFile::parse(text)?;
        let mut schema = Schema::default();
        for (field, slot) in [
            ("subject_id", &mut schema.subject_id),
            ("years", &mut schema.years),
            ("age", &mut schema.age),
            ("male", &mut schema.male),
            ("dx", &mut schema.dx),
            ("mmse", &mut schema.mmse),
        ] {
            if let Some(v) = kv.take_str(field) {
                if v.is_empty() {
                    return Err(Error::Config(format!("schema field {field} is empty")));
                }
                *slot = v;
            }
        }
        schema.pipelines = kv.take_vec_str("pipelines");
        if let Some(p) = &schema.pipelines {
            if p.len() < 2 {
                return Err(Error::Config("schema needs at least 2 pipeline columns".into()));
            }
        }
        if let Some(d) = kv.take_str("delimiter") {
            let mut chars = d.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => schema.delimiter = c,
                _ => return Err(Error::Config(format!("delimiter must be one character: {d:?}"))),
            }
        }
        kv.finish()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Schema> {
        Schema::parse(&std::fs::read_to_string(path)?)
    }
}

/// The validated observed dataset: N visit rows by K pipelines.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelinePanel {
    rows: Vec<VisitRow>,
    pipeline_names: Vec<String>,
    /// Subject ids in index order; `subject_of_row` points into this.
    subject_ids: Vec<String>,
    subject_of_row: Vec<usize>,
}

/// Load-time bookkeeping the caller may want to surface.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub dropped_missing_mmse: usize,
}

impl PipelinePanel {
    /// Validate raw rows into a panel. Rows with missing mmse are dropped
    /// (counted in the report); everything else must already be complete.
    pub fn from_rows(mut rows: Vec<VisitRow>, pipeline_names: Vec<String>) -> Result<(Self, LoadReport)> {
        let k = pipeline_names.len();
        if k < 2 {
            return Err(Error::Schema(format!("need at least 2 pipelines, got {k}")));
        }
        {
            let mut seen = std::collections::HashSet::new();
            for name in &pipeline_names {
                if !seen.insert(name.as_str()) {
                    return Err(Error::Schema(format!("duplicate pipeline name {name}")));
                }
            }
        }
        let before = rows.len();
        rows.retain(|r| r.mmse.is_some());
        let report = LoadReport { dropped_missing_mmse: before - rows.len() };
        if rows.is_empty() {
            return Err(Error::Schema("panel has no complete rows".into()));
        }
        for row in &rows {
            if row.ect.len() != k {
                return Err(Error::Dimension(format!(
                    "row for subject {} has {} measurements, expected {k}",
                    row.subject_id,
                    row.ect.len()
                )));
            }
            for (j, &v) in row.ect.iter().enumerate() {
                if !v.is_finite() || v <= 0.0 {
                    return Err(Error::Domain(format!(
                        "subject {} has non-positive {} measurement {v}",
                        row.subject_id, pipeline_names[j]
                    )));
                }
            }
            if !row.years.is_finite() || row.years < 0.0 {
                return Err(Error::Domain(format!(
                    "subject {} has invalid years {}",
                    row.subject_id, row.years
                )));
            }
            if !row.age.is_finite() || row.age <= 0.0 {
                return Err(Error::Domain(format!(
                    "subject {} has invalid age {}",
                    row.subject_id, row.age
                )));
            }
            if let Some(m) = row.mmse {
                if !m.is_finite() {
                    return Err(Error::Domain(format!(
                        "subject {} has non-finite mmse",
                        row.subject_id
                    )));
                }
            }
        }
        rows.sort_by(|a, b| {
            a.subject_id
                .cmp(&b.subject_id)
                .then(a.years.partial_cmp(&b.years).expect("finite years"))
        });

        let mut subject_ids: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut subject_of_row = Vec::with_capacity(rows.len());
        for row in &rows {
            let next = subject_ids.len();
            let idx = *index.entry(row.subject_id.clone()).or_insert_with(|| {
                subject_ids.push(row.subject_id.clone());
                next
            });
            subject_of_row.push(idx);
        }

        // Per-subject covariates must agree across visits, and the first
        // retained visit anchors the clock at zero.
        let mut first_of_subject: Vec<Option<usize>> = vec![None; subject_ids.len()];
        for (n, row) in rows.iter().enumerate() {
            let s = subject_of_row[n];
            match first_of_subject[s] {
                None => {
                    first_of_subject[s] = Some(n);
                    if row.years != 0.0 {
                        return Err(Error::Consistency(format!(
                            "subject {}: first visit has years {} (expected 0)",
                            row.subject_id, row.years
                        )));
                    }
                }
                Some(f) => {
                    let first = &rows[f];
                    if row.age != first.age || row.male != first.male || row.dx != first.dx {
                        return Err(Error::Consistency(format!(
                            "subject {}: age/male/dx differ across visits",
                            row.subject_id
                        )));
                    }
                }
            }
        }

        Ok((PipelinePanel { rows, pipeline_names, subject_ids, subject_of_row }, report))
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn n_pipelines(&self) -> usize {
        self.pipeline_names.len()
    }

    pub fn rows(&self) -> &[VisitRow] {
        &self.rows
    }

    pub fn pipeline_names(&self) -> &[String] {
        &self.pipeline_names
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    /// Contiguous 0-based subject index of row n.
    pub fn subject_of_row(&self, n: usize) -> usize {
        self.subject_of_row[n]
    }

    /// Index of a pipeline by name.
    pub fn pipeline_index(&self, name: &str) -> Option<usize> {
        self.pipeline_names.iter().position(|p| p == name)
    }

    /// Serialize in the default column layout with the given delimiter.
    pub fn to_delimited(&self, delimiter: char) -> String {
        let schema = Schema::default();
        let mut out = String::new();
        let d = delimiter;
        let _ = write!(
            out,
            "{}{d}{}{d}{}{d}{}{d}{}{d}{}",
            schema.subject_id, schema.years, schema.age, schema.male, schema.dx, schema.mmse
        );
        for p in &self.pipeline_names {
            let _ = write!(out, "{d}{p}");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(
                out,
                "{}{d}{}{d}{}{d}{}{d}{}{d}{}",
                row.subject_id,
                row.years,
                row.age,
                u8::from(row.male),
                row.dx.as_str(),
                row.mmse.expect("panel rows have mmse")
            );
            for &v in &row.ect {
                let _ = write!(out, "{d}{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_delimited(','))?;
        Ok(())
    }
}

/// Parse panel text under the given schema.
pub fn parse_panel(text: &str, schema: &Schema) -> Result<(PipelinePanel, LoadReport)> {
    let d = schema.delimiter;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Schema("empty file: missing header row".into()))?;
    let columns: Vec<&str> = header.split(d).map(str::trim).collect();

    let find = |name: &str| -> Result<usize> {
        columns
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name}")))
    };
    let c_subject = find(&schema.subject_id)?;
    let c_years = find(&schema.years)?;
    let c_age = find(&schema.age)?;
    let c_male = find(&schema.male)?;
    let c_dx = find(&schema.dx)?;
    let c_mmse = find(&schema.mmse)?;

    let reserved = [c_subject, c_years, c_age, c_male, c_dx, c_mmse];
    let pipeline_cols: Vec<(usize, String)> = match &schema.pipelines {
        Some(names) => {
            let mut cols = Vec::with_capacity(names.len());
            for name in names {
                cols.push((find(name)?, name.clone()));
            }
            cols
        }
        None => columns
            .iter()
            .enumerate()
            .filter(|(i, _)| !reserved.contains(i))
            .map(|(i, c)| (i, c.to_string()))
            .collect(),
    };
    if pipeline_cols.len() < 2 {
        return Err(Error::Schema(format!(
            "need at least 2 pipeline columns, found {}",
            pipeline_cols.len()
        )));
    }

    let missing = |s: &str| s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan");

    let mut rows = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(d).map(str::trim).collect();
        if fields.len() != columns.len() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {} fields, got {}", columns.len(), fields.len()),
            });
        }
        let num = |col: usize, what: &str| -> Result<f64> {
            let s = fields[col];
            if missing(s) {
                return Err(Error::Parse { line: line_no, msg: format!("missing {what} value") });
            }
            s.parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("non-numeric {what} value: {s}"),
            })
        };

        let subject_id = fields[c_subject].to_string();
        if subject_id.is_empty() {
            return Err(Error::Parse { line: line_no, msg: "empty subject id".into() });
        }
        let years = num(c_years, "years")?;
        let age = num(c_age, "age")?;
        let male = match fields[c_male] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("male indicator must be 0 or 1, got {other}"),
                })
            }
        };
        let dx = Dx::parse(fields[c_dx]).ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("dx must be CN, MCI, or AD, got {}", fields[c_dx]),
        })?;
        let mmse = if missing(fields[c_mmse]) {
            None
        } else {
            Some(num(c_mmse, "mmse")?)
        };
        let mut ect = Vec::with_capacity(pipeline_cols.len());
        for (col, name) in &pipeline_cols {
            let v = num(*col, name)?;
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("{name} must be a positive number, got {}", fields[*col]),
                });
            }
            ect.push(v);
        }
        rows.push(VisitRow { subject_id, years, age, male, dx, mmse, ect });
    }

    PipelinePanel::from_rows(rows, pipeline_cols.into_iter().map(|(_, n)| n).collect())
}

/// Load and validate a panel file.
pub fn load_panel(path: &Path, schema: &Schema) -> Result<(PipelinePanel, LoadReport)> {
    parse_panel(&std::fs::read_to_string(path)?, schema)
}

pub const DESIGN_COLUMNS: usize = 6;

/// Fixed-effects design matrix, N x 6 row-major, columns:
/// MCI, AD, initial age, male, MCI*years, AD*years. CN is the omitted
/// reference category.
pub fn design_matrix(panel: &PipelinePanel) -> Vec<f64> {
    let mut x = Vec::with_capacity(panel.n_rows() * DESIGN_COLUMNS);
    for row in panel.rows() {
        let mci = f64::from(row.dx == Dx::Mci);
        let ad = f64::from(row.dx == Dx::Ad);
        x.push(mci);
        x.push(ad);
        x.push(row.age);
        x.push(f64::from(row.male));
        x.push(mci * row.years);
        x.push(ad * row.years);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_panel_text() -> String {
        "subject_id,years,age,male,dx,mmse,p1,p2\n\
         s2,0,80,1,AD,22,6.1,7.2\n\
         s1,0,70,0,cn,29,7.0,8.1\n\
         s1,1.5,70,0,CN,28,6.8,7.9\n"
            .to_string()
    }

    #[test]
    fn loads_and_sorts_small_panel() {
        let (panel, report) = parse_panel(&small_panel_text(), &Schema::default()).unwrap();
        assert_eq!(panel.n_rows(), 3);
        assert_eq!(panel.n_subjects(), 2);
        assert_eq!(panel.n_pipelines(), 2);
        assert_eq!(report.dropped_missing_mmse, 0);
        // Sorted by (subject, years).
        assert_eq!(panel.rows()[0].subject_id, "s1");
        assert_eq!(panel.rows()[1].years, 1.5);
        assert_eq!(panel.rows()[2].subject_id, "s2");
        assert_eq!(panel.subject_of_row(0), 0);
        assert_eq!(panel.subject_of_row(2), 1);
        assert_eq!(panel.pipeline_names(), &["p1".to_string(), "p2".to_string()]);
    }

    #[test]
    fn minimal_panel_single_visit() {
        let text = "subject_id,years,age,male,dx,mmse,p1,p2\ns1,0,70,0,CN,30,7,8\n";
        let (panel, _) = parse_panel(text, &Schema::default()).unwrap();
        assert_eq!(panel.n_rows(), 1);
        assert_eq!(panel.n_subjects(), 1);
    }

    #[test]
    fn drops_rows_with_missing_mmse() {
        let mut text = String::from("subject_id,years,age,male,dx,mmse,p1,p2\n");
        for i in 0..10 {
            let mmse = if i % 3 == 1 { "" } else { "25" };
            // Keep the first visit intact so the years-zero invariant holds.
            let years = if i % 3 == 1 { 1.0 } else { 0.0 };
            text.push_str(&format!("s{i},{years},70,0,CN,{mmse},7,8\n"));
        }
        let (panel, report) = parse_panel(&text, &Schema::default()).unwrap();
        assert_eq!(report.dropped_missing_mmse, 3);
        assert_eq!(panel.n_rows(), 7);
    }

    #[test]
    fn missing_column_names_it() {
        let text = "subject_id,years,age,male,dx,p1,p2\ns1,0,70,0,CN,7,8\n";
        let err = parse_panel(text, &Schema::default()).unwrap_err();
        assert!(err.to_string().contains("mmse"), "{err}");
    }

    #[test]
    fn bad_ect_reports_line_number() {
        let text = "subject_id,years,age,male,dx,mmse,p1,p2\n\
                    s1,0,70,0,CN,30,7,8\n\
                    s1,1,70,0,CN,29,-3,8\n";
        let err = parse_panel(text, &Schema::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("p1"), "{msg}");
    }

    #[test]
    fn nonnumeric_ect_is_rejected() {
        let text = "subject_id,years,age,male,dx,mmse,p1,p2\ns1,0,70,0,CN,30,seven,8\n";
        assert!(parse_panel(text, &Schema::default()).is_err());
    }

    #[test]
    fn inconsistent_covariate_names_subject() {
        let text = "subject_id,years,age,male,dx,mmse,p1,p2\n\
                    s7,0,70,0,CN,30,7,8\n\
                    s7,1,71,0,CN,29,7,8\n";
        let err = parse_panel(text, &Schema::default()).unwrap_err();
        assert!(err.to_string().contains("s7"), "{err}");
    }

    #[test]
    fn unknown_dx_is_rejected() {
        let text = "subject_id,years,age,male,dx,mmse,p1,p2\ns1,0,70,0,other,30,7,8\n";
        let err = parse_panel(text, &Schema::default()).unwrap_err();
        assert!(err.to_string().contains("dx"), "{err}");
    }

    #[test]
    fn first_visit_must_have_zero_years() {
        let text = "subject_id,years,age,male,dx,mmse,p1,p2\ns1,0.5,70,0,CN,30,7,8\n";
        let err = parse_panel(text, &Schema::default()).unwrap_err();
        assert!(err.to_string().contains("years"), "{err}");
    }

    #[test]
    fn schema_renames_columns() {
        let schema = Schema::parse("subject_id = PTID\nmmse = MM\npipelines = b,a\n").unwrap();
        let text = "PTID,years,age,male,dx,MM,a,b,ignored\ns1,0,70,0,CN,30,7,8,99\n";
        let (panel, _) = parse_panel(text, &schema).unwrap();
        assert_eq!(panel.pipeline_names(), &["b".to_string(), "a".to_string()]);
        assert_eq!(panel.rows()[0].ect, vec![8.0, 7.0]);
    }

    #[test]
    fn schema_rejects_unknown_keys() {
        assert!(Schema::parse("subjct_id = PTID\n").is_err());
    }

    #[test]
    fn alternative_delimiter() {
        let schema = Schema::parse("delimiter = ;\n").unwrap();
        let text = "subject_id;years;age;male;dx;mmse;p1;p2\ns1;0;70;0;CN;30;7;8\n";
        let (panel, _) = parse_panel(text, &schema).unwrap();
        assert_eq!(panel.n_rows(), 1);
    }

    #[test]
    fn design_matrix_rows() {
        let text = "subject_id,years,age,male,dx,mmse,p1,p2\n\
                    s1,0,70,0,CN,30,7,8\n\
                    s1,2,70,0,CN,29,7,8\n\
                    s2,0,80,1,AD,24,6,7\n\
                    s2,1.5,80,1,AD,22,6,7\n\
                    s3,0,75,1,MCI,27,7,8\n";
        let (panel, _) = parse_panel(text, &Schema::default()).unwrap();
        let x = design_matrix(&panel);
        // CN female, years 2.
        assert_eq!(&x[6..12], &[0.0, 0.0, 70.0, 0.0, 0.0, 0.0]);
        // AD male, years 1.5.
        assert_eq!(&x[18..24], &[0.0, 1.0, 80.0, 1.0, 0.0, 1.5]);
        // MCI at baseline: interactions zero.
        assert_eq!(&x[24..30], &[1.0, 0.0, 75.0, 1.0, 0.0, 0.0]);
        // Every CN row has zeros in columns 1, 2, 5, 6.
        for (n, row) in panel.rows().iter().enumerate() {
            if row.dx == Dx::Cn {
                for c in [0usize, 1, 4, 5] {
                    assert_eq!(x[n * DESIGN_COLUMNS + c], 0.0);
                }
            }
        }
    }

    #[test]
    fn round_trip_preserves_panel() {
        let (panel, _) = parse_panel(&small_panel_text(), &Schema::default()).unwrap();
        let text = panel.to_delimited(',');
        let (again, report) = parse_panel(&text, &Schema::default()).unwrap();
        assert_eq!(panel, again);
        assert_eq!(report.dropped_missing_mmse, 0);
    }
}
