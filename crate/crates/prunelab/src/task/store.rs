//! Line-delimited JSON records for corpora and evaluation outputs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{EvalRecord, Result, TaskInstance};

/// One instance per line: seed, question, target, gold answer.
pub fn write_instances(path: &Path, instances: &[TaskInstance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_instances(path: &Path) -> Result<Vec<TaskInstance>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Evaluation records add the decoded text and match flag per line.
pub fn write_eval_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
