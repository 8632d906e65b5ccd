//! Confusion matrix as CSV: one row per true class, predicted-class counts
//! followed by the row-normalized rates.

use std::path::Path;

use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;

pub type Confusion = [[usize; NUM_CLASSES]; NUM_CLASSES];

fn header() -> Vec<String> {
    let mut h = vec!["true_class".to_string()];
    h.extend((0..NUM_CLASSES).map(|c| format!("count_{c}")));
    h.extend((0..NUM_CLASSES).map(|c| format!("rate_{c}")));
    h
}

pub fn confusion_csv(confusion: &Confusion) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Data(format!("confusion csv: {e}"));
    w.write_record(header()).map_err(csv_err)?;
    for (t, row) in confusion.iter().enumerate() {
        let total: usize = row.iter().sum();
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(|c| c.to_string()));
        rec.extend(row.iter().map(|&c| {
            let rate = if total == 0 { 0.0 } else { c as f64 / total as f64 };
            rate.to_string()
        }));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("confusion csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn emit_confusion(report: &MetricReport, path: &Path) -> Result<()> {
    std::fs::write(path, confusion_csv(&report.confusion)?).map_err(|e| Error::io(path, e))
}

/// Reads the counts back from a file written by [`emit_confusion`].
pub fn read_confusion(path: &Path) -> Result<Confusion> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        detail,
    };
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = [[0; NUM_CLASSES]; NUM_CLASSES];
    let mut seen = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if i >= NUM_CLASSES || rec.len() != 1 + 2 * NUM_CLASSES {
            return Err(bad(format!("unexpected row {i}")));
        }
        for c in 0..NUM_CLASSES {
            out[i][c] = rec[1 + c].parse().map_err(|_| bad(format!("row {i}: bad count {:?}", &rec[1 + c])))?;
        }
        seen += 1;
    }
    if seen != NUM_CLASSES {
        return Err(bad(format!("{seen} rows, expected {NUM_CLASSES}")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates_are_row_normalized() {
        let mut m = [[0; NUM_CLASSES]; NUM_CLASSES];
        m[1] = [1, 3, 0, 0, 0];
        let text = confusion_csv(&m).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "true_class,count_0,count_1,count_2,count_3,count_4,rate_0,rate_1,rate_2,rate_3,rate_4");
        assert_eq!(lines[2], "1,1,3,0,0,0,0.25,0.75,0,0,0");
        assert_eq!(lines[1], "0,0,0,0,0,0,0,0,0,0,0");
    }
}
