use std::fs::File;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};

use datasuff_core::ingestion::RowError;
use datasuff_core::{extract_events, parse_log, ColumnMap, EventSet, SampleRecord, ScenarioRules};

pub struct Loaded {
    pub inputs: Vec<String>,
    pub records: usize,
    pub rules: ScenarioRules,
    pub events: EventSet,
}

/// Parses every input and cuts the records into car-following events.
/// Any malformed row aborts the load with the file and line in the message.
pub fn load(paths: &[PathBuf], columns: &ColumnMap, rules: &ScenarioRules) -> Result<Loaded> {
    let mut records: Vec<SampleRecord> = Vec::new();
    for path in paths {
        let file = File::open(path).with_context(|| format!("{}", path.display()))?;
        let parsed = parse_log(file, columns).with_context(|| format!("{}", path.display()))?;
        if let Some(first) = parsed.row_errors.first() {
            bail!("{}", describe(path, first, parsed.row_errors.len()));
        }
        records.extend(parsed.records);
    }
    let events = extract_events(&records, rules);
    Ok(Loaded {
        inputs: paths.iter().map(|p| p.display().to_string()).collect(),
        records: records.len(),
        rules: rules.clone(),
        events,
    })
}

fn describe(path: &std::path::Path, first: &RowError, total: usize) -> String {
    let more = match total {
        1 => String::new(),
        n => format!(" ({} more malformed rows)", n - 1),
    };
    format!("{}:{}: column `{}`: {}{more}", path.display(), first.line, first.column, first.message)
}
