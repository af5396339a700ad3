use std::path::Path;

use crate::error::{Error, Result};

/// Value of the leading `version` column.
pub const REPORT_VERSION: u32 = 1;

/// Column order of the report CSV.
pub const REPORT_COLUMNS: [&str; 12] = [
    "version",
    "model",
    "utterance_id",
    "speaker",
    "text_len",
    "a_s",
    "mcd",
    "recon_error",
    "cer",
    "silence_rate",
    "cosine",
    "truncated",
];

/// Per-utterance evaluation row. Optional metrics serialise as empty cells.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub model: String,
    pub utterance_id: String,
    pub speaker: usize,
    pub text_len: usize,
    pub a_s: f64,
    pub mcd: Option<f64>,
    pub recon_error: f64,
    pub cer: f64,
    pub silence_rate: f64,
    pub cosine: Option<f64>,
    pub truncated: bool,
}

impl RunReport {
    pub fn validate(&self) -> Result<()> {
        if !(self.a_s > 0.0 && self.a_s <= 1.0 + 1e-12) {
            return Err(Error::invalid(format!("{}: A_S {} outside (0, 1]", self.utterance_id, self.a_s)));
        }
        if !(0.0..=1.0).contains(&self.silence_rate) {
            return Err(Error::invalid(format!(
                "{}: silence rate {} outside [0, 1]",
                self.utterance_id, self.silence_rate
            )));
        }
        if !(self.cer >= 0.0) || !self.recon_error.is_finite() {
            return Err(Error::invalid(format!("{}: invalid CER or reconstruction error", self.utterance_id)));
        }
        Ok(())
    }

    fn record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            REPORT_VERSION.to_string(),
            self.model.clone(),
            self.utterance_id.clone(),
            self.speaker.to_string(),
            self.text_len.to_string(),
            self.a_s.to_string(),
            opt(self.mcd),
            self.recon_error.to_string(),
            self.cer.to_string(),
            self.silence_rate.to_string(),
            opt(self.cosine),
            self.truncated.to_string(),
        ]
    }

    fn from_record(rec: &csv::StringRecord) -> Result<Self> {
        let bad = |col: &str, v: &str| Error::Format(format!("report column {col}: {v:?}"));
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::Format(format!("report row has {} cells", rec.len())));
        let num = |i: usize| -> Result<f64> {
            let v = field(i)?;
            v.parse().map_err(|_| bad(REPORT_COLUMNS[i], v))
        };
        let int = |i: usize| -> Result<usize> {
            let v = field(i)?;
            v.parse().map_err(|_| bad(REPORT_COLUMNS[i], v))
        };
        let opt = |i: usize| -> Result<Option<f64>> {
            if field(i)?.is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        if rec.len() != REPORT_COLUMNS.len() {
            return Err(Error::Format(format!("report row has {} cells", rec.len())));
        }
        if field(0)? != REPORT_VERSION.to_string() {
            return Err(Error::Format(format!("unsupported report version {:?}", field(0)?)));
        }
        let truncated = field(11)?.parse().map_err(|_| bad("truncated", field(11).unwrap_or("")))?;
        Ok(Self {
            model: field(1)?.to_string(),
            utterance_id: field(2)?.to_string(),
            speaker: int(3)?,
            text_len: int(4)?,
            a_s: num(5)?,
            mcd: opt(6)?,
            recon_error: num(7)?,
            cer: num(8)?,
            silence_rate: num(9)?,
            cosine: opt(10)?,
            truncated,
        })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Writes the header and one row per report.
pub fn write_reports(path: &Path, reports: &[RunReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(REPORT_COLUMNS).map_err(|e| csv_err(path, e))?;
    for r in reports {
        w.write_record(r.record()).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_reports(path: &Path) -> Result<Vec<RunReport>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?;
    if header.iter().ne(REPORT_COLUMNS) {
        return Err(Error::Format(format!("{}: unexpected report header", path.display())));
    }
    rdr.records()
        .map(|r| RunReport::from_record(&r.map_err(|e| csv_err(path, e))?))
        .collect()
}
