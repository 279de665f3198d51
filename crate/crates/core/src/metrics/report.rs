//! Line-delimited evaluation records. The first line is a header naming the
//! format and its fields; every following line is one JSON object with
//! fields in the fixed order `clip_id, estoi, mel_mse, wer, cer, status`.
//! When any clip is listed, a last line summarizes them under
//! `clip_id = "summary"`.

use std::io::Write;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalStatus {
    Ok,
    /// Synthesized and reference mel lengths differed; scored on the overlap.
    Truncated,
    /// The clip could not be scored (for example too short for ESTOI).
    Failed,
    Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub clip_id: String,
    pub estoi: Option<f64>,
    pub mel_mse: Option<f64>,
    pub wer: Option<f64>,
    pub cer: Option<f64>,
    pub status: EvalStatus,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

impl EvalRecord {
    /// Per-field means over the records that carry a value.
    pub fn summary(records: &[EvalRecord]) -> EvalRecord {
        let scored = || records.iter().filter(|r| r.status != EvalStatus::Summary);
        EvalRecord {
            clip_id: "summary".into(),
            estoi: mean(scored().map(|r| r.estoi)),
            mel_mse: mean(scored().map(|r| r.mel_mse)),
            wer: mean(scored().map(|r| r.wer)),
            cer: mean(scored().map(|r| r.cer)),
            status: EvalStatus::Summary,
        }
    }
}

pub const REPORT_HEADER: &str = r#"{"format":"lipmel-eval","version":1,"fields":["clip_id","estoi","mel_mse","wer","cer","status"]}"#;

/// Writes the header, every record and (for a non-empty list) the summary
/// row.
pub fn write_report<W: Write>(w: &mut W, records: &[EvalRecord]) -> std::io::Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    if records.is_empty() {
        return Ok(());
    }
    for r in records
        .iter()
        .chain(std::iter::once(&EvalRecord::summary(records)))
    {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
