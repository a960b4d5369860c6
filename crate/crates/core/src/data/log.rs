use std::path::{Path, PathBuf};

use super::{DataError, Result};

/// One row of the simulator's driving log.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivingLogRecord {
    pub center_path: PathBuf,
    pub left_path: PathBuf,
    pub right_path: PathBuf,
    /// Positive steers right, zero is straight ahead.
    pub steering: f64,
    pub throttle: f64,
    pub brake: f64,
    pub speed: f64,
}

impl DrivingLogRecord {
    /// Formats the row back into log syntax with `precision` decimals for the
    /// numeric columns. Paths are written as given.
    pub fn to_row(&self, precision: usize) -> String {
        format!(
            "{},{},{},{:.p$},{:.p$},{:.p$},{:.p$}",
            self.center_path.display(),
            self.left_path.display(),
            self.right_path.display(),
            self.steering,
            self.throttle,
            self.brake,
            self.speed,
            p = precision
        )
    }
}

pub fn parse_driving_log(path: &Path) -> Result<Vec<DrivingLogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new(""));
    parse_driving_log_str(&text, dir)
}

/// Parses log text, resolving image paths against `base_dir`.
pub fn parse_driving_log_str(text: &str, base_dir: &Path) -> Result<Vec<DrivingLogRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| DataError::Parse {
            row: row_no,
            column: None,
            message: e.to_string(),
        })?;
        if row.len() == 1 && row[0].is_empty() {
            continue;
        }
        if row.len() != 7 {
            return Err(DataError::Parse {
                row: row_no,
                column: None,
                message: format!("expected 7 columns, found {}", row.len()),
            });
        }
        let path = |col: usize| -> Result<PathBuf> {
            resolve_image(&row[col], base_dir).ok_or_else(|| DataError::Parse {
                row: row_no,
                column: Some(col + 1),
                message: "empty image path".into(),
            })
        };
        let number = |col: usize| -> Result<f64> {
            let raw = &row[col];
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(DataError::Parse {
                    row: row_no,
                    column: Some(col + 1),
                    message: format!("`{raw}` is not a finite number"),
                }),
            }
        };
        out.push(DrivingLogRecord {
            center_path: path(0)?,
            left_path: path(1)?,
            right_path: path(2)?,
            steering: number(3)?,
            throttle: number(4)?,
            brake: number(5)?,
            speed: number(6)?,
        });
    }
    Ok(out)
}

/// Recorded paths are frequently absolute paths from another machine, with
/// either separator. Keep only the file name (and an `IMG` parent, which is
/// the simulator's layout) and re-anchor it at the log's directory.
fn resolve_image(recorded: &str, base_dir: &Path) -> Option<PathBuf> {
    let mut parts = recorded.rsplit(['/', '\\']).filter(|p| !p.is_empty());
    let name = parts.next()?;
    let mut resolved = base_dir.to_path_buf();
    if parts.next() == Some("IMG") {
        resolved.push("IMG");
    }
    resolved.push(name);
    Some(resolved)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_and_unix_paths_resolve_by_basename() {
        let base = Path::new("/data/run1");
        assert_eq!(
            resolve_image(r"C:\Users\me\Desktop\IMG\center_1.jpg", base).unwrap(),
            Path::new("/data/run1/IMG/center_1.jpg")
        );
        assert_eq!(
            resolve_image("/home/me/sim/left_2.jpg", base).unwrap(),
            Path::new("/data/run1/left_2.jpg")
        );
        assert!(resolve_image("", base).is_none());
    }

    #[test]
    fn bad_number_names_row_and_column() {
        let text = "a.jpg,b.jpg,c.jpg,0,1,0,3\na.jpg,b.jpg,c.jpg,0,x,0,3\n";
        let err = parse_driving_log_str(text, Path::new(".")).unwrap_err();
        match err {
            DataError::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, Some(5));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn nan_steering_rejected() {
        let err = parse_driving_log_str("a,b,c,NaN,0,0,0", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("column 4"), "{err}");
    }

    #[test]
    fn blank_lines_skipped() {
        let recs =
            parse_driving_log_str("a,b,c,0,0,0,0\n\na,b,c,0.5,0,0,0\n", Path::new(".")).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].steering, 0.5);
    }
}
