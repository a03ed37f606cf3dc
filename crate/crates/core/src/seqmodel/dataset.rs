use std::path::Path;

use crate::control::ControlSample;
use crate::error::{Error, Result};

use super::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetRow {
    pub state: [f64; 4],
    pub action: f64,
    pub action_token: usize,
}

/// State/action pairs with their action tokens. CSV columns:
/// `state0,state1,state2,state3,action,action_token`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActionDataset {
    pub rows: Vec<DatasetRow>,
}

const HEADER: [&str; 6] = ["state0", "state1", "state2", "state3", "action", "action_token"];

impl ActionDataset {
    pub fn from_samples(samples: &[ControlSample], tokenizer: &Tokenizer) -> Result<Self> {
        let rows = samples
            .iter()
            .map(|s| {
                Ok(DatasetRow {
                    state: s.state.to_array(),
                    action: s.action,
                    action_token: tokenizer.tokenize(s.action)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    /// `(state, token)` pairs for training.
    pub fn pairs(&self) -> Vec<([f64; 4], usize)> {
        self.rows.iter().map(|r| (r.state, r.action_token)).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(HEADER).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec: Vec<String> = r.state.iter().map(|v| format!("{v:.16e}")).collect();
            rec.push(format!("{:.16e}", r.action));
            rec.push(r.action_token.to_string());
            wr.write_record(&rec).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers().map_err(csv_err)?.clone();
        if header.iter().collect::<Vec<_>>() != HEADER {
            return Err(Error::Parse(format!("dataset header must be {}", HEADER.join(","))));
        }
        let mut rows = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let num = |k: usize| -> Result<f64> {
                rec.get(k)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Parse(format!("row {}: bad `{}`", i + 1, HEADER[k])))
            };
            let token = rec
                .get(5)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Parse(format!("row {}: bad `action_token`", i + 1)))?;
            rows.push(DatasetRow { state: [num(0)?, num(1)?, num(2)?, num(3)?], action: num(4)?, action_token: token });
        }
        Ok(Self { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}
