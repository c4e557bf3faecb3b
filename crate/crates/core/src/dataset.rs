//! Prompt dataset files.
//!
//! One JSON object per line, self-describing and bit-exact under
//! write-then-read (floats are emitted in shortest round-trip form).
//! Complex vectors are stored as interleaved `[re0, im0, re1, im1, ...]`
//! doubles. Channel traces are not stored; they are regenerable from
//! `(seed, params)`.
//!
//! Record schema:
//!
//! ```json
//! {"seed": 42,
//!  "params": {"m1":2, "m2":2, "rho":0.99, "sigma_w":0.1,
//!             "snr_db":30.0, "bits":6, "k":20},
//!  "context_x": [[..2*m1 doubles..], ...K entries],
//!  "context_y": [[..2*m2 doubles..], ...K entries],
//!  "query_y": [..2*m2 doubles..],
//!  "target_x": [..2*m1 doubles..]}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelParams, Prompt};
use crate::error::{Error, Result};
use crate::numerics::ComplexMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub seed: u64,
    pub params: ChannelParams,
    pub context_x: Vec<Vec<f64>>,
    pub context_y: Vec<Vec<f64>>,
    pub query_y: Vec<f64>,
    pub target_x: Vec<f64>,
}

fn interleave(v: &ComplexMatrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * v.rows());
    for z in v.entries() {
        out.push(z.re);
        out.push(z.im);
    }
    out
}

fn deinterleave(v: &[f64]) -> Result<ComplexMatrix> {
    if v.is_empty() || v.len() % 2 != 0 {
        return Err(Error::Parse(format!(
            "interleaved complex vector must have even nonzero length, got {}",
            v.len()
        )));
    }
    let data = v
        .chunks_exact(2)
        .map(|c| Complex64::new(c[0], c[1]))
        .collect();
    Ok(ComplexMatrix::from_vec(v.len() / 2, 1, data))
}

impl PromptRecord {
    pub fn from_prompt(prompt: &Prompt, params: &ChannelParams) -> Self {
        PromptRecord {
            seed: prompt.seed,
            params: params.clone(),
            context_x: prompt.context.iter().map(|(x, _)| interleave(x)).collect(),
            context_y: prompt.context.iter().map(|(_, y)| interleave(y)).collect(),
            query_y: interleave(&prompt.query_y),
            target_x: interleave(&prompt.target_x),
        }
    }

    pub fn to_prompt(&self) -> Result<Prompt> {
        if self.context_x.len() != self.context_y.len() {
            return Err(Error::Parse(format!(
                "context_x has {} entries but context_y has {}",
                self.context_x.len(),
                self.context_y.len()
            )));
        }
        let context = self
            .context_x
            .iter()
            .zip(&self.context_y)
            .map(|(x, y)| Ok((deinterleave(x)?, deinterleave(y)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prompt {
            context,
            query_y: deinterleave(&self.query_y)?,
            target_x: deinterleave(&self.target_x)?,
            seed: self.seed,
        })
    }
}

pub fn write_dataset(path: &Path, records: &[PromptRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<PromptRecord>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PromptRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
