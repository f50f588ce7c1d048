//! Preference samples and the JSONL dataset format.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceQuadruple {
    /// Short context followed by the instruction.
    pub x_s: Vec<u32>,
    /// Long context followed by the same instruction.
    pub x_l: Vec<u32>,
    /// Chosen response, generated from `x_s`.
    pub y_s: Vec<u32>,
    /// Rejected response, generated from `x_l`.
    pub y_l: Vec<u32>,
}

impl PreferenceQuadruple {
    pub fn new(x_s: Vec<u32>, x_l: Vec<u32>, y_s: Vec<u32>, y_l: Vec<u32>) -> Result<Self> {
        if x_s.len() > x_l.len() {
            return Err(invalid(format!("short context ({}) longer than long context ({})", x_s.len(), x_l.len())));
        }
        if y_s.is_empty() || y_l.is_empty() {
            return Err(invalid("responses must be non-empty"));
        }
        Ok(Self { x_s, x_l, y_s, y_l })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    /// `[start, end)` of the short chunk within the document.
    pub span: [usize; 2],
    pub instruction: Vec<u32>,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub chosen_truncated: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub rejected_truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiTurnSample {
    pub doc_id: u64,
    pub c_long: Vec<u32>,
    pub turns: Vec<Turn>,
}

impl MultiTurnSample {
    pub fn new(doc_id: u64, c_long: Vec<u32>, turns: Vec<Turn>) -> Result<Self> {
        let s = Self { doc_id, c_long, turns };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(invalid("a multi-turn sample needs at least one turn"));
        }
        for (i, t) in self.turns.iter().enumerate() {
            let [a, b] = t.span;
            if a > b || b > self.c_long.len() {
                return Err(invalid(format!(
                    "turn {i}: span [{a}, {b}) outside document of length {}",
                    self.c_long.len()
                )));
            }
            if t.chosen.is_empty() || t.rejected.is_empty() {
                return Err(invalid(format!("turn {i}: responses must be non-empty")));
            }
        }
        Ok(())
    }

    pub fn c_short(&self, turn: usize) -> &[u32] {
        let [a, b] = self.turns[turn].span;
        &self.c_long[a..b]
    }

    pub fn quadruple(&self, turn: usize) -> Result<PreferenceQuadruple> {
        let t = self.turns.get(turn).ok_or_else(|| invalid(format!("no turn {turn}")))?;
        let x_s = [self.c_short(turn), &t.instruction].concat();
        let x_l = [&self.c_long[..], &t.instruction].concat();
        PreferenceQuadruple::new(x_s, x_l, t.chosen.clone(), t.rejected.clone())
    }

    /// The document followed by every instruction and its chosen response.
    pub fn long_chosen_sequence(&self) -> Vec<u32> {
        let mut s = self.c_long.clone();
        for t in &self.turns {
            s.extend_from_slice(&t.instruction);
            s.extend_from_slice(&t.chosen);
        }
        s
    }
}

pub fn write_dataset(path: &Path, samples: &[MultiTurnSample]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<MultiTurnSample>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: MultiTurnSample =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        s.validate().map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        out.push(s);
    }
    Ok(out)
}
