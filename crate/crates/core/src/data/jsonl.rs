use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Labels, MotionSample};
use crate::encoders::{MotionSequence, VideoFeatureSequence};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const SCHEMA_NAME: &str = "motalk.samples";
pub const SCHEMA_VERSION: u32 = 1;

/// First line of every dataset file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub schema: String,
    pub version: u32,
}

impl Default for DatasetHeader {
    fn default() -> Self {
        DatasetHeader {
            schema: SCHEMA_NAME.into(),
            version: SCHEMA_VERSION,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    fps: f64,
    motion: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    video: Option<Vec<Vec<f64>>>,
    query: String,
    answer: String,
    labels: Labels,
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn matrix_of(rows: &[Vec<f64>], what: &str) -> std::result::Result<Matrix, String> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(format!("{what} rows have unequal lengths"));
    }
    Matrix::new(rows.len(), cols, rows.concat()).map_err(|e| e.to_string())
}

impl Record {
    fn from_sample(s: &MotionSample) -> Self {
        Record {
            id: s.id.clone(),
            fps: s.motion.fps,
            motion: rows_of(&s.motion.values),
            video: s.video.as_ref().map(|v| rows_of(&v.values)),
            query: s.query.clone(),
            answer: s.answer.clone(),
            labels: s.labels.clone(),
        }
    }

    fn into_sample(self) -> std::result::Result<MotionSample, String> {
        let motion = MotionSequence::new(matrix_of(&self.motion, "motion")?, self.fps).map_err(|e| e.to_string())?;
        let video = match self.video {
            Some(rows) => {
                let values = matrix_of(&rows, "video")?;
                if values.rows() != motion.frames() {
                    return Err(format!(
                        "video has {} frames, motion has {}",
                        values.rows(),
                        motion.frames()
                    ));
                }
                Some(VideoFeatureSequence { values })
            }
            None => None,
        };
        Ok(MotionSample {
            id: self.id,
            motion,
            video,
            query: self.query,
            answer: self.answer,
            labels: self.labels,
        })
    }
}

/// Writes the header line followed by one sample per line. Floats use the
/// shortest representation that parses back to the identical value.
pub fn write_jsonl<W: Write>(mut out: W, samples: &[MotionSample]) -> Result<()> {
    serde_json::to_writer(&mut out, &DatasetHeader::default())?;
    out.write_all(b"\n")?;
    for s in samples {
        serde_json::to_writer(&mut out, &Record::from_sample(s))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Parses a dataset. Blank lines are skipped; an empty input yields no
/// samples. Errors carry the 1-based line number.
pub fn read_jsonl<R: Read>(input: R) -> Result<Vec<MotionSample>> {
    let mut samples = Vec::new();
    let mut seen_header = false;
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::ParseLine { line: lineno, message };
        if !seen_header {
            let header: DatasetHeader = serde_json::from_str(&line).map_err(|e| fail(format!("header: {e}")))?;
            if header.schema != SCHEMA_NAME || header.version != SCHEMA_VERSION {
                return Err(fail(format!(
                    "unsupported schema {} v{} (expected {SCHEMA_NAME} v{SCHEMA_VERSION})",
                    header.schema, header.version
                )));
            }
            seen_header = true;
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        samples.push(record.into_sample().map_err(fail)?);
    }
    Ok(samples)
}

pub fn save_jsonl(path: impl AsRef<Path>, samples: &[MotionSample]) -> Result<()> {
    write_jsonl(BufWriter::new(File::create(path)?), samples)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<MotionSample>> {
    read_jsonl(File::open(path)?)
}
