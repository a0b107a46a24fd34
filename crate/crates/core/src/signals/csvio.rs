use std::io::{Read, Write};
use std::path::Path;

use super::{MultivariateSeries, Result, SignalsError, FEATURE_NAMES};

const LABEL_COLUMN: &str = "state";

fn mask_column(feature: &str) -> String {
    format!("mask_{feature}")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SignalsError + '_ {
    move |source| SignalsError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(e: csv::Error) -> SignalsError {
    SignalsError::Format(e.to_string())
}

/// Reads a series from CSV with columns `a_lat`, `a_lon` and optional
/// `mask_a_lat`, `mask_a_lon` (0/1) and `state`. Other columns are ignored.
/// Empty or NaN cells become masked-out zeros.
pub fn read_csv<R: Read>(reader: R) -> Result<MultivariateSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);

    let mut value_cols = Vec::new();
    for name in FEATURE_NAMES {
        value_cols
            .push(col(name).ok_or_else(|| {
                SignalsError::Format(format!("missing required column `{name}`"))
            })?);
    }
    let mask_cols: Vec<Option<usize>> =
        FEATURE_NAMES.iter().map(|n| col(&mask_column(n))).collect();
    let label_col = col(LABEL_COLUMN);

    let f_n = FEATURE_NAMES.len();
    let mut values = vec![Vec::new(); f_n];
    let mut mask = vec![Vec::new(); f_n];
    let mut labels = Vec::new();
    let mut any_missing = false;

    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = row + 2;
        let cell = |c: usize| rec.get(c).unwrap_or("");
        for f in 0..f_n {
            let raw = cell(value_cols[f]);
            let parsed = if raw.is_empty() || raw.eq_ignore_ascii_case("nan") {
                None
            } else {
                Some(raw.parse::<f64>().map_err(|e| SignalsError::Parse {
                    line,
                    column: FEATURE_NAMES[f].to_string(),
                    detail: format!("`{raw}`: {e}"),
                })?)
            };
            let observed_flag = match mask_cols[f] {
                Some(c) => match cell(c) {
                    "1" => true,
                    "0" => false,
                    other => {
                        return Err(SignalsError::Parse {
                            line,
                            column: mask_column(FEATURE_NAMES[f]),
                            detail: format!("expected 0 or 1, got `{other}`"),
                        })
                    }
                },
                None => true,
            };
            match parsed {
                Some(v) if observed_flag && v.is_finite() => {
                    values[f].push(v);
                    mask[f].push(true);
                }
                Some(v) if !v.is_finite() && !v.is_nan() => {
                    return Err(SignalsError::Parse {
                        line,
                        column: FEATURE_NAMES[f].to_string(),
                        detail: "infinite value".into(),
                    })
                }
                _ => {
                    values[f].push(0.0);
                    mask[f].push(false);
                    any_missing = true;
                }
            }
        }
        if let Some(c) = label_col {
            let raw = cell(c);
            let l = raw.parse::<u8>().map_err(|e| SignalsError::Parse {
                line,
                column: LABEL_COLUMN.into(),
                detail: format!("`{raw}`: {e}"),
            })?;
            labels.push(l);
        }
    }
    if values[0].is_empty() {
        return Err(SignalsError::Format("no data rows".into()));
    }
    let mut s = MultivariateSeries::new(values)?;
    if any_missing || mask_cols.iter().any(Option::is_some) {
        s = s.with_mask(mask)?;
    }
    if label_col.is_some() {
        s = s
            .with_labels(labels)
            .map_err(|e| SignalsError::Format(e.to_string()))?;
    }
    Ok(s)
}

pub fn load_csv(path: &Path) -> Result<MultivariateSeries> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    read_csv(std::io::BufReader::new(file))
}

/// Writes `t`, the feature columns, mask columns when a mask is present and
/// `state` when labels are present. Floats use shortest round-trip formatting.
pub fn write_csv<W: Write>(s: &MultivariateSeries, writer: W) -> Result<()> {
    if s.n_features() != FEATURE_NAMES.len() {
        return Err(SignalsError::Format(format!(
            "CSV output expects {} features, series has {}",
            FEATURE_NAMES.len(),
            s.n_features()
        )));
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["t".to_string()];
    header.extend(FEATURE_NAMES.iter().map(|n| n.to_string()));
    if s.mask().is_some() {
        header.extend(FEATURE_NAMES.iter().map(|n| mask_column(n)));
    }
    if s.labels().is_some() {
        header.push(LABEL_COLUMN.into());
    }
    w.write_record(&header).map_err(csv_err)?;
    for t in 0..s.len() {
        let mut rec = vec![t.to_string()];
        rec.extend((0..s.n_features()).map(|f| format!("{}", s.feature(f)[t])));
        if let Some(m) = s.mask() {
            rec.extend(
                m.iter()
                    .map(|row| if row[t] { "1" } else { "0" }.to_string()),
            );
        }
        if let Some(l) = s.labels() {
            rec.push(l[t].to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| SignalsError::Format(e.to_string()))
}

pub fn save_csv(s: &MultivariateSeries, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    write_csv(s, std::io::BufWriter::new(file))
}
