//! Verdicts, valid-response rate and selectivity.
//!
//! For a set of verdicts with `t` grounded in the queried modality, `u` in
//! the other one and the rest in neither:
//!
//! ```text
//! p_valid     = (t + u) / n
//! selectivity = (t - u) / (t + u)        (absent when t + u = 0)
//! ```
//!
//! Selectivity of zero means "no preference"; with no valid response at all
//! it is reported as absent instead.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, RecordError, Result};
use crate::world::{Condition, Modality, Order, PromptSequence, TokenId};

/// Which source an answer was judged to come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grounding {
    Image,
    #[serde(alias = "text")]
    Caption,
    Neither,
}

impl Grounding {
    fn from_modality(m: Modality) -> Self {
        match m {
            Modality::Image => Grounding::Image,
            Modality::Caption => Grounding::Caption,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictRecord {
    pub id: String,
    pub target: Modality,
    pub grounded_in: Grounding,
}

/// Exact-token judge: an answer is grounded in whichever span's entity
/// token it reproduces.
pub fn judge_toy(
    id: impl Into<String>,
    predicted: TokenId,
    prompt: &PromptSequence,
    target: Modality,
) -> VerdictRecord {
    let grounded_in = if predicted == prompt.answer_token {
        Grounding::from_modality(target)
    } else if predicted == prompt.nontarget_answer_token {
        Grounding::from_modality(target.other())
    } else {
        Grounding::Neither
    };
    VerdictRecord {
        id: id.into(),
        target,
        grounded_in,
    }
}

/// Counts and rates for one cell of a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub n: usize,
    pub n_target: usize,
    pub n_nontarget: usize,
    pub p_valid: f64,
    pub selectivity: Option<f64>,
}

impl Cell {
    pub fn from_counts(n: usize, n_target: usize, n_nontarget: usize) -> Self {
        let valid = n_target + n_nontarget;
        Cell {
            n,
            n_target,
            n_nontarget,
            p_valid: if n == 0 { 0.0 } else { valid as f64 / n as f64 },
            selectivity: (valid > 0).then(|| (n_target as f64 - n_nontarget as f64) / valid as f64),
        }
    }

    pub fn n_neither(&self) -> usize {
        self.n - self.n_target - self.n_nontarget
    }

    fn push(&mut self, v: &VerdictRecord) {
        self.n += 1;
        if v.grounded_in == Grounding::from_modality(v.target) {
            self.n_target += 1;
        } else if v.grounded_in == Grounding::from_modality(v.target.other()) {
            self.n_nontarget += 1;
        }
    }

    fn finish(self) -> Self {
        Cell::from_counts(self.n, self.n_target, self.n_nontarget)
    }

    /// Mean of rates; counts are pooled.
    fn averaged(a: &Cell, b: &Cell) -> Cell {
        let selectivity = match (a.selectivity, b.selectivity) {
            (Some(x), Some(y)) => Some((x + y) / 2.0),
            (Some(x), None) | (None, Some(x)) => Some(x),
            (None, None) => None,
        };
        Cell {
            n: a.n + b.n,
            n_target: a.n_target + b.n_target,
            n_nontarget: a.n_nontarget + b.n_nontarget,
            p_valid: (a.p_valid + b.p_valid) / 2.0,
            selectivity,
        }
    }

    fn empty() -> Self {
        Cell::from_counts(0, 0, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectivityReport {
    pub overall: Cell,
    pub by_target: BTreeMap<Modality, Cell>,
    /// Present only when condition metadata was joined in.
    pub by_condition: BTreeMap<(Condition, Modality), Cell>,
}

impl SelectivityReport {
    pub fn n(&self) -> usize {
        self.overall.n
    }

    pub fn p_valid(&self) -> f64 {
        self.overall.p_valid
    }

    pub fn selectivity(&self) -> Option<f64> {
        self.overall.selectivity
    }

    pub fn target(&self, m: Modality) -> Option<&Cell> {
        self.by_target.get(&m)
    }

    pub fn target_selectivity(&self, m: Modality) -> Option<f64> {
        self.by_target.get(&m).and_then(|c| c.selectivity)
    }
}

/// Builds a report from verdicts.
pub fn compute_report(verdicts: &[VerdictRecord]) -> Result<SelectivityReport> {
    if verdicts.is_empty() {
        return Err(LabError::Domain("cannot compute a report from zero verdicts".into()));
    }
    let mut overall = Cell::empty();
    let mut by_target: BTreeMap<Modality, Cell> = BTreeMap::new();
    for v in verdicts {
        overall.push(v);
        by_target.entry(v.target).or_insert_with(Cell::empty).push(v);
    }
    Ok(SelectivityReport {
        overall: overall.finish(),
        by_target: by_target.into_iter().map(|(k, c)| (k, c.finish())).collect(),
        by_condition: BTreeMap::new(),
    })
}

/// Like [`compute_report`] with an additional (condition, target) breakdown.
pub fn compute_report_by_condition(verdicts: &[(Condition, VerdictRecord)]) -> Result<SelectivityReport> {
    let plain: Vec<VerdictRecord> = verdicts.iter().map(|(_, v)| v.clone()).collect();
    let mut report = compute_report(&plain)?;
    let mut cells: BTreeMap<(Condition, Modality), Cell> = BTreeMap::new();
    for (c, v) in verdicts {
        cells.entry((*c, v.target)).or_insert_with(Cell::empty).push(v);
    }
    report.by_condition = cells.into_iter().map(|(k, c)| (k, c.finish())).collect();
    Ok(report)
}

/// Averages the two order-specific reports cell by cell.
pub fn aggregate_orders(
    image_first: &SelectivityReport,
    caption_first: &SelectivityReport,
) -> Result<SelectivityReport> {
    let same_keys = image_first.by_target.keys().eq(caption_first.by_target.keys())
        && image_first.by_condition.keys().eq(caption_first.by_condition.keys());
    if !same_keys {
        return Err(LabError::Domain("reports have mismatched cell structure".into()));
    }
    Ok(SelectivityReport {
        overall: Cell::averaged(&image_first.overall, &caption_first.overall),
        by_target: image_first
            .by_target
            .iter()
            .map(|(k, a)| (*k, Cell::averaged(a, &caption_first.by_target[k])))
            .collect(),
        by_condition: image_first
            .by_condition
            .iter()
            .map(|(k, a)| (*k, Cell::averaged(a, &caption_first.by_condition[k])))
            .collect(),
    })
}

/// Reads and validates a verdict JSON Lines file. Every bad line is
/// reported, not just the first one.
pub fn ingest_verdicts(path: impl AsRef<Path>) -> Result<Vec<VerdictRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut out = Vec::new();
    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<VerdictRecord>(&line) {
            Ok(rec) => {
                if !seen.insert(rec.id.clone()) {
                    errors.push(RecordError {
                        line: lineno,
                        message: format!("duplicate id {:?}", rec.id),
                    });
                } else {
                    out.push(rec);
                }
            }
            Err(e) => errors.push(RecordError {
                line: lineno,
                message: e.to_string(),
            }),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(LabError::Records {
            path: path.to_path_buf(),
            errors,
        })
    }
}

pub fn write_verdicts(path: impl AsRef<Path>, verdicts: &[VerdictRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for v in verdicts {
        serde_json::to_writer(&mut buf, v)?;
        buf.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| LabError::io(path, e))
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// One flattened report row for CSV output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub condition: String,
    pub text_label: String,
    pub target: String,
    pub order: String,
    #[serde(flatten)]
    pub cell: Cell,
}

pub const REPORT_CSV_HEADER: &str =
    "condition,text_label,target,order,n,n_target,n_nontarget,n_neither,p_valid,selectivity";

impl ReportRow {
    pub fn new(condition: &str, text_label: &str, target: &str, order: &str, cell: Cell) -> Self {
        ReportRow {
            condition: condition.into(),
            text_label: text_label.into(),
            target: target.into(),
            order: order.into(),
            cell,
        }
    }

    pub fn csv_line(&self) -> String {
        let c = &self.cell;
        format!(
            "{},{},{},{},{},{},{},{},{:.6},{}",
            self.condition,
            self.text_label,
            self.target,
            self.order,
            c.n,
            c.n_target,
            c.n_nontarget,
            c.n_neither(),
            c.p_valid,
            fmt_opt(c.selectivity)
        )
    }
}

/// Rows for one report: the overall cell (target `all`) then per target,
/// then per (condition, target) when present.
pub fn report_rows(r: &SelectivityReport, condition: &str, text_label: &str, order: &str) -> Vec<ReportRow> {
    let mut rows = vec![ReportRow::new(condition, text_label, "all", order, r.overall.clone())];
    for (t, c) in &r.by_target {
        rows.push(ReportRow::new(condition, text_label, t.as_str(), order, c.clone()));
    }
    for ((cond, t), c) in &r.by_condition {
        rows.push(ReportRow::new(cond.as_str(), text_label, t.as_str(), order, c.clone()));
    }
    rows
}

pub fn rows_to_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from(REPORT_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// Order label used in report rows for order-averaged cells.
pub fn order_label(order: Option<Order>) -> &'static str {
    order.map(Order::as_str).unwrap_or("mean")
}
