//! Result serialization. Every float is rounded to 12 significant digits
//! before it is written, so re-reading a file gives back exactly the
//! written values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::validation::Histogram;

pub const SIGNIFICANT_DIGITS: usize = 12;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write as a table: {0}")]
    NotTabular(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

/// Rounds to `digits` significant digits; non-finite values pass through.
pub fn round_significant(x: f64, digits: usize) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    let digits = digits.clamp(1, 17);
    format!("{:.*e}", digits - 1, x).parse().unwrap_or(x)
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if !(n.is_i64() || n.is_u64()) => {
            if let Some(x) = n.as_f64() {
                if let Some(r) = serde_json::Number::from_f64(round_significant(x, SIGNIFICANT_DIGITS)) {
                    *n = r;
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

/// Pretty JSON with rounded floats and a trailing newline.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String, IoError> {
    let mut v = serde_json::to_value(value)?;
    round_value(&mut v);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

fn cell(v: &Value) -> Result<String, IoError> {
    Ok(match v {
        Value::Null => "NaN".to_string(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => match (n.as_i64(), n.as_u64(), n.as_f64()) {
            (Some(i), _, _) => i.to_string(),
            (_, Some(u), _) => u.to_string(),
            (_, _, Some(x)) => round_significant(x, SIGNIFICANT_DIGITS).to_string(),
            _ => n.to_string(),
        },
        Value::String(s) => s.clone(),
        other => return Err(IoError::NotTabular(format!("nested value {other}"))),
    })
}

/// CSV with a header taken from the first record's field names.
pub fn to_csv_string<T: Serialize>(rows: &[T]) -> Result<String, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Option<Vec<String>> = None;
    for row in rows {
        let Value::Object(map) = serde_json::to_value(row)? else {
            return Err(IoError::NotTabular("record is not a struct".into()));
        };
        let keys: Vec<String> = map.keys().cloned().collect();
        match &header {
            None => {
                w.write_record(&keys)?;
                header = Some(keys);
            }
            Some(h) if *h != keys => return Err(IoError::NotTabular("records differ in fields".into())),
            Some(_) => {}
        }
        let cells = map.values().map(cell).collect::<Result<Vec<_>, _>>()?;
        w.write_record(&cells)?;
    }
    let bytes = w.into_inner().map_err(|e| IoError::NotTabular(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_csv<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, IoError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|rec| rec.map_err(IoError::from)).collect()
}

pub fn read_json<T: DeserializeOwned>(text: &str) -> Result<T, IoError> {
    Ok(serde_json::from_str(text)?)
}

/// One histogram bin, for tabular output.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub frequency: f64,
}

pub fn histogram_bins(h: &Histogram) -> Vec<HistogramBin> {
    let edges = h.edges();
    h.counts
        .iter()
        .zip(h.frequencies())
        .enumerate()
        .map(|(i, (&count, frequency))| HistogramBin {
            lo: edges[i],
            hi: edges[i + 1],
            count,
            frequency,
        })
        .collect()
}

/// Writes `text` to `path`, or to stdout when `path` is `None`.
pub fn write_text(text: &str, path: Option<&Path>) -> Result<(), IoError> {
    match path {
        Some(p) => fs::write(p, text).map_err(|source| IoError::File {
            path: p.to_path_buf(),
            source,
        }),
        None => {
            use std::io::Write;
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(|source| IoError::File {
                path: PathBuf::from("<stdout>"),
                source,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, serde::Deserialize)]
    struct Rec {
        t: f64,
        mean: f64,
        n: usize,
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn rounding_keeps_twelve_digits() {
        assert_eq!(round_significant(std::f64::consts::PI, 12), 3.14159265359);
        assert_eq!(round_significant(-1.234_567_890_123_456e-7, 12), -1.23456789012e-7);
        assert_eq!(round_significant(0.0, 12), 0.0);
        assert!(round_significant(f64::NAN, 12).is_nan());
    }

    #[test]
    fn json_round_trip_is_identity_after_rounding() {
        let v = vec![1.0 / 3.0, 2.0f64.sqrt() * 1e5, -7.25e-9];
        let text = to_json_string(&v).unwrap();
        let back: Vec<f64> = read_json(&text).unwrap();
        let expect: Vec<f64> = v.iter().map(|x| round_significant(*x, 12)).collect();
        assert_eq!(back, expect);
        assert_eq!(to_json_string(&back).unwrap(), text);
    }

    #[test]
    fn csv_header_and_round_trip() {
        let rows = vec![
            Rec { t: 1.0, mean: 0.1 + 0.2, n: 3 },
            Rec { t: 2.0, mean: -1.0 / 7.0, n: 0 },
        ];
        let text = to_csv_string(&rows).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,mean,n");
        let back: Vec<Rec> = read_csv(&text).unwrap();
        assert_eq!(back[0].mean, 0.3);
        assert_eq!(back[1].mean, round_significant(-1.0 / 7.0, 12));
        assert_eq!(to_csv_string(&back).unwrap(), text);
    }

    #[test]
    fn nested_records_are_rejected() {
        #[derive(Serialize)]
        struct Bad {
            v: Vec<f64>,
        }
        assert!(matches!(to_csv_string(&[Bad { v: vec![1.0] }]), Err(IoError::NotTabular(_))));
    }

    #[test]
    fn histogram_csv_loads_back() {
        let h = Histogram::new(&[0.0, 0.1, 0.5, 0.9, 1.0], 4, 0.0, 1.0);
        let text = to_csv_string(&histogram_bins(&h)).unwrap();
        let back: Vec<HistogramBin> = read_csv(&text).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back.iter().map(|b| b.count).sum::<usize>(), 5);
        assert_eq!(back[3].hi, 1.0);
    }
}
