//! Numeric table files: one record per line, comma- or whitespace-separated.

use std::path::Path;

use crate::CliError;

/// Parses rows of floats. Blank lines and lines starting with `#` are skipped;
/// the column count is fixed by the first data row.
pub fn parse_rows(text: &str, origin: &str) -> Result<Vec<Vec<f64>>, CliError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let bad = |msg: String| CliError::Parse { origin: origin.to_string(), line: k + 1, msg };
        let row = trimmed
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .map(|f| match f.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                Ok(_) => Err(bad(format!("non-finite value {f:?}"))),
                Err(_) => Err(bad(format!("not a number: {f:?}"))),
            })
            .collect::<Result<Vec<f64>, _>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(bad(format!("expected {} columns, found {}", first.len(), row.len())));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Parse { origin: origin.to_string(), line: 0, msg: "no data rows".into() });
    }
    Ok(rows)
}

pub fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    parse_rows(&text, &path.display().to_string())
}

/// Parses `a,b,c` into floats.
pub fn parse_vector(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|f| f.trim().parse::<f64>().map_err(|_| format!("not a number: {f:?}")))
        .collect()
}
