//! Report bundles: table layouts, reference values, configuration and output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use super::{run_scenario, HarnessOptions, ScenarioResult, REDUCED_CANDIDATES};
use crate::correlation::CorrStructure;
use crate::criteria::Criterion;
use crate::error::{GeeError, Result};
use crate::family::Family;
use crate::simgen::scenario::{ALPHAS, SUBJECT_COUNTS, TRUE_STRUCTURES};
use crate::simgen::{Balance, ScenarioSpec};

/// Allowed gap between a simulated and a reference selection proportion.
pub const PROPORTION_TOLERANCE: f64 = 0.05;
/// Allowed gap between a simulated and a reference mean squared error.
pub const MSE_TOLERANCE: f64 = 0.03;

const REFERENCE_PROPORTIONS: &str = include_str!("../../data/reference_proportions.csv");
const REFERENCE_MSE: &str = include_str!("../../data/reference_mse.csv");

/// A reference results table: 1-8 are the full-menu tables, 9 the reduced menu.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TableId(u8);

impl TableId {
    pub const ALL: [TableId; 9] = [
        TableId(1),
        TableId(2),
        TableId(3),
        TableId(4),
        TableId(5),
        TableId(6),
        TableId(7),
        TableId(8),
        TableId(9),
    ];

    pub fn new(number: u8) -> Result<Self> {
        if (1..=9).contains(&number) {
            Ok(TableId(number))
        } else {
            Err(GeeError::Config(format!("table must be 1-9, got {number}")))
        }
    }

    pub fn number(self) -> u8 {
        self.0
    }

    pub fn is_reduced(self) -> bool {
        self.0 == 9
    }

    pub fn candidates(self) -> Vec<CorrStructure> {
        if self.is_reduced() {
            REDUCED_CANDIDATES.to_vec()
        } else {
            CorrStructure::ALL.to_vec()
        }
    }

    fn design(self) -> (Family, Balance, f64) {
        if self.is_reduced() {
            return (Family::Binary, Balance::Balanced, ALPHAS[0]);
        }
        let k = self.0 - 1;
        let family = if k < 4 { Family::Binary } else { Family::Poisson };
        let balance = if (k / 2).is_multiple_of(2) { Balance::Balanced } else { Balance::Unbalanced };
        (family, balance, ALPHAS[usize::from(k % 2)])
    }

    pub fn title(self) -> String {
        let (family, balance, alpha) = self.design();
        let menu = if self.is_reduced() { "Indep, AR1, Exch" } else { "Indep, AR1, Exch, UN" };
        format!("Table {}: {balance} {family} data, alpha = {alpha}, candidates {menu}", self.0)
    }
}

impl FromStr for TableId {
    type Err = GeeError;

    fn from_str(s: &str) -> Result<Self> {
        let n: u8 = s.trim().parse().map_err(|_| GeeError::Config(format!("bad table number '{s}'")))?;
        TableId::new(n)
    }
}

/// Design cells of a table, ordered by true structure then sample size.
pub fn table_cells(table: TableId) -> Vec<ScenarioSpec> {
    let (family, balance, alpha) = table.design();
    let truths: &[CorrStructure] = if table.is_reduced() { &TRUE_STRUCTURES[..2] } else { &TRUE_STRUCTURES };
    let mut out = Vec::new();
    for &truth in truths {
        for n in SUBJECT_COUNTS {
            out.push(ScenarioSpec::new(family, balance, n, truth, alpha).expect("table cells are valid"));
        }
    }
    out
}

/// The full-menu table holding a cell.
pub fn table_of(spec: &ScenarioSpec) -> Option<TableId> {
    TableId::ALL[..8].iter().copied().find(|&t| {
        let (family, balance, alpha) = t.design();
        family == spec.family && balance == spec.balance && alpha == spec.alpha
    })
}

/// Seed for one cell, mixed from the global seed and the cell identity so
/// cells are independent and reproducible regardless of which subset runs.
pub fn cell_seed(global: u64, spec: &ScenarioSpec, table: TableId) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in spec.descriptor().bytes().chain([b'#', table.number()]) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ global.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
struct CellKey {
    table: String,
    family: Family,
    balance: Balance,
    alpha: f64,
    truth: CorrStructure,
    n: usize,
}

impl CellKey {
    fn matches(&self, table: &str, spec: &ScenarioSpec) -> bool {
        self.table == table
            && self.family == spec.family
            && self.balance == spec.balance
            && self.alpha == spec.alpha
            && self.truth == spec.truth
            && self.n == spec.n_subjects
    }
}

/// A reference selection-proportion row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceProportion {
    key: CellKey,
    pub criterion: Criterion,
    /// Proportions for Indep, AR1, Exch, UN (UN absent for the reduced menu).
    pub values: [Option<f64>; 4],
}

/// A reference mean-squared-error row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMse {
    key: CellKey,
    pub parameter: usize,
    pub values: [Option<f64>; 4],
}

fn parse_key(rec: &csv::StringRecord) -> Result<CellKey> {
    let bad = |what: &str| GeeError::Config(format!("reference table: bad {what} in {rec:?}"));
    Ok(CellKey {
        table: rec[0].to_string(),
        family: rec[1].parse()?,
        balance: rec[2].parse()?,
        alpha: rec[3].parse().map_err(|_| bad("alpha"))?,
        truth: rec[4].parse()?,
        n: rec[5].parse().map_err(|_| bad("n"))?,
    })
}

fn parse_values(rec: &csv::StringRecord) -> Result<[Option<f64>; 4]> {
    let mut out = [None; 4];
    for (k, slot) in out.iter_mut().enumerate() {
        let cell = rec[7 + k].trim();
        if !cell.is_empty() {
            *slot = Some(cell.parse().map_err(|_| GeeError::Config(format!("reference table: bad value '{cell}'")))?);
        }
    }
    Ok(out)
}

fn parse_reference<T>(text: &str, row: impl Fn(&csv::StringRecord) -> Result<T>) -> Vec<T> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    reader
        .records()
        .map(|rec| row(&rec.expect("embedded reference csv is well formed")).expect("embedded reference csv parses"))
        .collect()
}

/// All reference selection proportions.
pub fn reference_proportions() -> &'static [ReferenceProportion] {
    static CELLS: OnceLock<Vec<ReferenceProportion>> = OnceLock::new();
    CELLS.get_or_init(|| {
        parse_reference(REFERENCE_PROPORTIONS, |rec| {
            Ok(ReferenceProportion {
                key: parse_key(rec)?,
                criterion: rec[6].parse()?,
                values: parse_values(rec)?,
            })
        })
    })
}

/// All reference mean squared errors.
pub fn reference_mse() -> &'static [ReferenceMse] {
    static CELLS: OnceLock<Vec<ReferenceMse>> = OnceLock::new();
    CELLS.get_or_init(|| {
        parse_reference(REFERENCE_MSE, |rec| {
            let parameter = rec[6]
                .trim_start_matches("beta")
                .parse()
                .map_err(|_| GeeError::Config(format!("bad parameter '{}'", &rec[6])))?;
            Ok(ReferenceMse {
                key: parse_key(rec)?,
                parameter,
                values: parse_values(rec)?,
            })
        })
    })
}

fn structure_slot(s: CorrStructure) -> usize {
    CorrStructure::ALL.iter().position(|&x| x == s).expect("known structure")
}

/// Reference proportion for a cell, criterion and working structure.
pub fn reference_proportion(table: TableId, spec: &ScenarioSpec, criterion: Criterion, structure: CorrStructure) -> Option<f64> {
    let name = table.number().to_string();
    reference_proportions()
        .iter()
        .find(|r| r.criterion == criterion && r.key.matches(&name, spec))
        .and_then(|r| r.values[structure_slot(structure)])
}

/// Reference mean squared error for a cell, coefficient and working structure.
pub fn reference_mse_value(table: TableId, spec: &ScenarioSpec, parameter: usize, structure: CorrStructure) -> Option<f64> {
    if table.is_reduced() {
        return None;
    }
    let name = format!("B{}", table.number());
    reference_mse()
        .iter()
        .find(|r| r.parameter == parameter && r.key.matches(&name, spec))
        .and_then(|r| r.values[structure_slot(structure)])
}

/// Format with `digits` significant digits, trailing zeros removed.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let digits = digits.max(1);
    let magnitude = x.abs().log10().floor() as i32;
    if !(-5..15).contains(&magnitude) {
        return format!("{:.*e}", digits - 1, x);
    }
    let decimals = (digits as i32 - 1 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// What to run and where to write it. Read from `key = value` lines with `#` comments.
///
/// Keys: `tables` (comma-separated 1-9; default all), `scenarios` (comma-separated
/// `family:balance:truth:alpha:n` cells, placed in their full-menu table),
/// `replicates` (default 1000), `seed` (default 1), `out_dir` (default `report`),
/// `precision` (significant digits, default 6), `jobs` (worker threads, 0 = all cores).
#[derive(Debug, Clone, PartialEq)]
pub struct ReportConfig {
    pub tables: Vec<TableId>,
    pub scenarios: Vec<ScenarioSpec>,
    pub replicates: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub precision: usize,
    pub jobs: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            tables: TableId::ALL.to_vec(),
            scenarios: Vec::new(),
            replicates: 1000,
            seed: 1,
            out_dir: PathBuf::from("report"),
            precision: 6,
            jobs: 0,
        }
    }
}

impl ReportConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ReportConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| GeeError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let err = |what: &str| GeeError::Config(format!("line {}: bad {what} '{value}'", lineno + 1));
            let list = || value.split(',').map(str::trim).filter(|s| !s.is_empty());
            match key {
                "tables" => cfg.tables = list().map(TableId::from_str).collect::<Result<_>>()?,
                "scenarios" => cfg.scenarios = list().map(ScenarioSpec::from_str).collect::<Result<_>>()?,
                "replicates" => cfg.replicates = value.parse().map_err(|_| err("replicates"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| err("seed"))?,
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                "precision" => cfg.precision = value.parse().map_err(|_| err("precision"))?,
                "jobs" => cfg.jobs = value.parse().map_err(|_| err("jobs"))?,
                other => return Err(GeeError::Config(format!("line {}: unknown key '{other}'", lineno + 1))),
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Every cell to run, grouped by table, with per-cell seeds and replicate counts applied.
    pub fn cells(&self) -> Vec<(TableId, ScenarioSpec)> {
        let mut out: Vec<(TableId, ScenarioSpec)> = Vec::new();
        let mut push = |table: TableId, spec: ScenarioSpec| {
            if !out.iter().any(|(t, s)| *t == table && s.descriptor() == spec.descriptor()) {
                let seed = cell_seed(self.seed, &spec, table);
                out.push((table, spec.with_replicates(self.replicates).with_seed(seed)));
            }
        };
        for &table in &self.tables {
            for spec in table_cells(table) {
                push(table, spec);
            }
        }
        for spec in &self.scenarios {
            if let Some(table) = table_of(spec) {
                push(table, spec.clone());
            }
        }
        out.sort_by_key(|(t, _)| *t);
        out
    }

    /// Validate every cell (including feasibility) without running anything.
    pub fn validate(&self) -> Result<()> {
        for (_, spec) in self.cells() {
            spec.validate()?;
            spec.check_feasibility()?;
        }
        Ok(())
    }
}

/// What [`replicate_report`] produced.
#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub files: Vec<PathBuf>,
    pub results: Vec<(TableId, ScenarioResult)>,
    /// Reference comparisons outside tolerance.
    pub deviations: usize,
    /// Reference comparisons made.
    pub comparisons: usize,
}

struct Check {
    reference: Option<f64>,
    deviation: Option<f64>,
    flagged: bool,
}

fn check(value: Option<f64>, reference: Option<f64>, tolerance: f64) -> Check {
    match (value, reference) {
        (Some(v), Some(r)) => {
            let d = v - r;
            Check {
                reference: Some(r),
                deviation: Some(d),
                flagged: d.abs() > tolerance,
            }
        }
        _ => Check {
            reference,
            deviation: None,
            flagged: false,
        },
    }
}

/// Run every configured cell and write one selection CSV per table, one MSE
/// CSV per full-menu table and a Markdown summary.
pub fn replicate_report(config: &ReportConfig, options: &HarnessOptions) -> Result<ReportBundle> {
    fs::create_dir_all(&config.out_dir)?;
    let mut results = Vec::new();
    for (table, spec) in config.cells() {
        let r = run_scenario(&spec, &table.candidates(), &Criterion::ALL, options)?;
        results.push((table, r));
    }
    write_report(config, results)
}

fn opt(x: Option<f64>, digits: usize) -> String {
    x.map(|v| format_significant(v, digits)).unwrap_or_default()
}

const SELECTION_HEADER: [&str; 13] = [
    "table",
    "family",
    "balance",
    "alpha",
    "truth",
    "n",
    "criterion",
    "structure",
    "proportion",
    "mc_se",
    "reference",
    "deviation",
    "flag",
];

const MSE_HEADER: [&str; 12] = [
    "table",
    "family",
    "balance",
    "alpha",
    "truth",
    "n",
    "parameter",
    "structure",
    "mse",
    "reference",
    "deviation",
    "flag",
];

/// Writes the combined `selection.csv` and `mse.csv` that hold every row of
/// every table; both are written, header only, even for an empty report.
fn write_report(config: &ReportConfig, results: Vec<(TableId, ScenarioResult)>) -> Result<ReportBundle> {
    let digits = config.precision;
    let all_selection_path = config.out_dir.join("selection.csv");
    let all_mse_path = config.out_dir.join("mse.csv");
    let mut all_selection = csv::Writer::from_path(&all_selection_path)?;
    all_selection.write_record(SELECTION_HEADER)?;
    let mut all_mse = csv::Writer::from_path(&all_mse_path)?;
    all_mse.write_record(MSE_HEADER)?;
    let mut by_table: BTreeMap<TableId, Vec<&ScenarioResult>> = BTreeMap::new();
    for (t, r) in &results {
        by_table.entry(*t).or_default().push(r);
    }
    let mut files = Vec::new();
    let (mut deviations, mut comparisons) = (0, 0);
    let mut md = String::new();
    writeln!(md, "# Working-correlation selection study").ok();
    writeln!(md).ok();
    writeln!(
        md,
        "Replicates per cell: {}. Seed: {}. Proportions are flagged when more than {PROPORTION_TOLERANCE} from the \
         reference value, mean squared errors when more than {MSE_TOLERANCE}. Within each true-structure and \
         sample-size block the highest correct-selection proportion is shown in bold.",
        config.replicates, config.seed
    )
    .ok();

    for (table, cells) in &by_table {
        let path = config.out_dir.join(format!("selection_table_{}.csv", table.number()));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(SELECTION_HEADER)?;
        writeln!(md, "\n## {}\n", table.title()).ok();
        for r in cells {
            let s = &r.spec;
            writeln!(
                md,
                "### True {}, N = {} ({} completed, {} failed{})\n",
                s.truth,
                s.n_subjects,
                r.replicates_completed,
                r.replicates_failed,
                if r.degraded { ", degraded" } else { "" }
            )
            .ok();
            let best = r
                .criteria
                .iter()
                .filter_map(|&c| r.correct_selection(c))
                .fold(f64::NEG_INFINITY, f64::max);
            let header: Vec<String> = r.candidates.iter().map(|c| c.name().to_string()).collect();
            writeln!(md, "| Criterion | {} |", header.join(" | ")).ok();
            writeln!(md, "|---|{}", "---|".repeat(r.candidates.len())).ok();
            for &crit in &r.criteria {
                let mut row = Vec::new();
                for &st in &r.candidates {
                    let p = r.proportion(crit, st);
                    let c = check(p, reference_proportion(*table, s, crit, st), PROPORTION_TOLERANCE);
                    if c.deviation.is_some() {
                        comparisons += 1;
                    }
                    if c.flagged {
                        deviations += 1;
                    }
                    let record = [
                        table.number().to_string(),
                        s.family.name().to_string(),
                        s.balance.to_string(),
                        s.alpha.to_string(),
                        s.truth.name().to_string(),
                        s.n_subjects.to_string(),
                        crit.name().to_string(),
                        st.name().to_string(),
                        opt(p, digits),
                        opt(r.proportion_se(crit, st), digits),
                        opt(c.reference, digits),
                        opt(c.deviation, digits),
                        if c.flagged { "deviates" } else { "ok" }.to_string(),
                    ];
                    w.write_record(&record)?;
                    all_selection.write_record(&record)?;
                    let mut cell = opt(p, 3);
                    if st == s.truth && p == Some(best) {
                        cell = format!("**{cell}**");
                    }
                    if let Some(rf) = c.reference {
                        cell.push_str(&format!(" ({})", format_significant(rf, 3)));
                    }
                    if c.flagged {
                        cell.push_str(" !");
                    }
                    row.push(cell);
                }
                let label = match crit {
                    Criterion::Rj1 => "\\|RJ1-1\\|".to_string(),
                    Criterion::Rj2 => "\\|RJ2-1\\|".to_string(),
                    other => other.name().to_string(),
                };
                writeln!(md, "| {label} | {} |", row.join(" | ")).ok();
            }
            writeln!(md).ok();
        }
        w.flush()?;
        files.push(path);

        if !table.is_reduced() {
            let path = config.out_dir.join(format!("mse_table_B{}.csv", table.number()));
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(MSE_HEADER)?;
            writeln!(md, "### Mean squared errors (Table B{})\n", table.number()).ok();
            writeln!(md, "| Truth | N | Parameter | {} |", CorrStructure::ALL.map(|c| c.name()).join(" | ")).ok();
            writeln!(md, "|---|---|---|{}", "---|".repeat(4)).ok();
            for r in cells {
                let s = &r.spec;
                for j in 0..3 {
                    let mut row = Vec::new();
                    for &st in &r.candidates {
                        let m = r.mse(j, st);
                        let c = check(m, reference_mse_value(*table, s, j, st), MSE_TOLERANCE);
                        if c.deviation.is_some() {
                            comparisons += 1;
                        }
                        if c.flagged {
                            deviations += 1;
                        }
                        let record = [
                            format!("B{}", table.number()),
                            s.family.name().to_string(),
                            s.balance.to_string(),
                            s.alpha.to_string(),
                            s.truth.name().to_string(),
                            s.n_subjects.to_string(),
                            format!("beta{j}"),
                            st.name().to_string(),
                            opt(m, digits),
                            opt(c.reference, digits),
                            opt(c.deviation, digits),
                            if c.flagged { "deviates" } else { "ok" }.to_string(),
                        ];
                        w.write_record(&record)?;
                        all_mse.write_record(&record)?;
                        let mut cell = opt(m, 3);
                        if let Some(rf) = c.reference {
                            cell.push_str(&format!(" ({})", format_significant(rf, 3)));
                        }
                        if c.flagged {
                            cell.push_str(" !");
                        }
                        row.push(cell);
                    }
                    writeln!(md, "| {} | {} | beta{j} | {} |", s.truth, s.n_subjects, row.join(" | ")).ok();
                }
            }
            writeln!(md).ok();
            w.flush()?;
            files.push(path);
        }
    }
    all_selection.flush()?;
    all_mse.flush()?;
    files.push(all_selection_path);
    files.push(all_mse_path);
    if by_table.is_empty() {
        writeln!(md, "\nNo scenario cells configured.").ok();
    } else {
        writeln!(
            md,
            "\nValues in parentheses are the reference figures; `!` marks a deviation beyond tolerance \
             ({deviations} of {comparisons} comparisons)."
        )
        .ok();
    }
    let summary = config.out_dir.join("summary.md");
    fs::write(&summary, md)?;
    files.push(summary);
    Ok(ReportBundle {
        files,
        results,
        deviations,
        comparisons,
    })
}
