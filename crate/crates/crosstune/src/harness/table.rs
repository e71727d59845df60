//! Result tables. Rows are keyed by (eval task, fine-tune task, strategy)
//! and hold one cell per shot count 0..=5, the median over seeds. Values
//! render as percentages with one decimal; a cell with no surviving run
//! renders as an em dash.

use std::collections::BTreeMap;

use super::config::FtStrategy;
use super::runlog::RunRecord;

pub const SHOT_COLUMNS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct TableKey {
    pub eval_task: String,
    pub ft_task: Option<String>,
    pub strategy: FtStrategy,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TableRow {
    /// Median aggregate F1 per shot count; `None` when no run scored it.
    pub cells: [Option<f64>; SHOT_COLUMNS],
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalTable {
    pub rows: BTreeMap<TableKey, TableRow>,
}

fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

impl EvalTable {
    /// Groups per-seed records into rows, taking the median across seeds
    /// for each shot column. Failed runs contribute their error text but
    /// no scores.
    pub fn from_records(records: &[RunRecord]) -> EvalTable {
        let mut grouped: BTreeMap<TableKey, Vec<&RunRecord>> = BTreeMap::new();
        for record in records {
            grouped
                .entry(TableKey {
                    eval_task: record.eval_task.clone(),
                    ft_task: record.ft_task.clone(),
                    strategy: record.strategy,
                })
                .or_default()
                .push(record);
        }
        let mut rows = BTreeMap::new();
        for (key, group) in grouped {
            let mut cells: [Option<f64>; SHOT_COLUMNS] = Default::default();
            for (shot, cell) in cells.iter_mut().enumerate() {
                let values: Vec<f64> = group
                    .iter()
                    .filter_map(|r| r.scores.get(&shot).copied())
                    .collect();
                *cell = median(values);
            }
            let mut seeds: Vec<u64> = group.iter().map(|r| r.seed).collect();
            seeds.sort_unstable();
            let errors: Vec<String> = group
                .iter()
                .filter_map(|r| {
                    r.error
                        .as_ref()
                        .map(|e| format!("seed {}: {e}", r.seed))
                })
                .collect();
            rows.insert(
                key,
                TableRow {
                    cells,
                    seeds,
                    config_hash: group[0].config_hash.clone(),
                    errors,
                },
            );
        }
        EvalTable { rows }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

const EMPTY_CELL: &str = "\u{2014}";

fn format_cell(cell: Option<f64>) -> String {
    match cell {
        Some(v) => format!("{:.1}", v * 100.0),
        None => EMPTY_CELL.to_string(),
    }
}

/// Renders the table; rows come out ordered by (eval task, ft task,
/// strategy), so equal tables give byte-equal reports.
pub fn report(table: &EvalTable, format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            out.push_str("| eval task | ft task | strategy | 0 | 1 | 2 | 3 | 4 | 5 |\n");
            out.push_str("| --- | --- | --- | --- | --- | --- | --- | --- | --- |\n");
            for (key, row) in &table.rows {
                out.push_str(&format!(
                    "| {} | {} | {} |",
                    key.eval_task,
                    key.ft_task.as_deref().unwrap_or(EMPTY_CELL),
                    key.strategy.as_str()
                ));
                for cell in row.cells {
                    out.push_str(&format!(" {} |", format_cell(cell)));
                }
                out.push('\n');
            }
        }
        ReportFormat::Csv => {
            out.push_str("eval_task,ft_task,strategy,shot_0,shot_1,shot_2,shot_3,shot_4,shot_5\n");
            for (key, row) in &table.rows {
                out.push_str(&key.eval_task);
                out.push(',');
                out.push_str(key.ft_task.as_deref().unwrap_or(EMPTY_CELL));
                out.push(',');
                out.push_str(key.strategy.as_str());
                for cell in row.cells {
                    out.push(',');
                    out.push_str(&format_cell(cell));
                }
                out.push('\n');
            }
        }
    }
    out
}
