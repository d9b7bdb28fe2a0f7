//! Line-delimited JSON rollout files: one rollout per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqmodel::{Rollout, RolloutGroup, Token, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub prompt_id: usize,
    pub tokens: Vec<Token>,
    pub reward: f64,
    /// Per-token behavior log-probs.
    pub logprobs: Vec<f64>,
    pub version: u64,
    /// Index of the group within the file; consecutive lines share it.
    pub group: usize,
}

pub fn write_rollouts<'a, I>(path: &Path, groups: I) -> Result<()>
where
    I: IntoIterator<Item = &'a RolloutGroup>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (gi, group) in groups.into_iter().enumerate() {
        for r in group.rollouts() {
            let rec = RolloutRecord {
                prompt_id: r.prompt_id,
                tokens: r.completion.tokens().to_vec(),
                reward: r.reward,
                logprobs: r.behavior_logprobs.clone(),
                version: r.behavior_version,
                group: gi,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a rollout file back into groups, in file order. Blank lines are skipped.
pub fn read_rollouts(path: &Path) -> Result<Vec<RolloutGroup>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut groups = Vec::new();
    let mut current: Option<(usize, Vec<Rollout>)> = None;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RolloutRecord = serde_json::from_str(&line)
            .map_err(|e| Error::MalformedGroup(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        let rollout = Rollout {
            prompt_id: rec.prompt_id,
            completion: TokenSequence::from(rec.tokens),
            reward: rec.reward,
            behavior_logprob_total: rec.logprobs.iter().sum(),
            behavior_logprobs: rec.logprobs,
            behavior_version: rec.version,
        };
        match &mut current {
            Some((gi, rollouts)) if *gi == rec.group => rollouts.push(rollout),
            _ => {
                if let Some((_, rollouts)) = current.take() {
                    groups.push(RolloutGroup::new(rollouts)?);
                }
                current = Some((rec.group, vec![rollout]));
            }
        }
    }
    if let Some((_, rollouts)) = current {
        groups.push(RolloutGroup::new(rollouts)?);
    }
    Ok(groups)
}
