//! Trajectory CSV with columns `trajectory_id, t, state, action`.

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use mfg_core::estimation::Trajectory;

#[derive(Serialize, Deserialize)]
struct Row {
    trajectory_id: u64,
    t: usize,
    state: usize,
    action: usize,
}

pub fn to_csv(trajectories: &[Trajectory]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for tr in trajectories {
        for (t, &(state, action)) in tr.steps.iter().enumerate() {
            w.serialize(Row {
                trajectory_id: tr.index,
                t,
                state,
                action,
            })?;
        }
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Rows must be grouped by trajectory with `t = 0, 1, …` in order.
pub fn from_csv(text: &str, n_states: usize, n_actions: usize) -> anyhow::Result<Vec<Trajectory>> {
    let mut out: Vec<Trajectory> = Vec::new();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    for (line, row) in rdr.deserialize::<Row>().enumerate() {
        let row = row.with_context(|| format!("row {}", line + 1))?;
        if row.state >= n_states || row.action >= n_actions {
            bail!(
                "row {}: state {} / action {} out of range",
                line + 1,
                row.state,
                row.action
            );
        }
        let start_new = out.last().is_none_or(|tr| tr.index != row.trajectory_id);
        if start_new {
            if row.t != 0 {
                bail!(
                    "row {}: trajectory {} does not start at t = 0",
                    line + 1,
                    row.trajectory_id
                );
            }
            out.push(Trajectory {
                steps: Vec::new(),
                seed: 0,
                index: row.trajectory_id,
            });
        }
        let tr = out.last_mut().expect("pushed above");
        if row.t != tr.steps.len() {
            bail!(
                "row {}: expected t = {}, found {}",
                line + 1,
                tr.steps.len(),
                row.t
            );
        }
        tr.steps.push((row.state, row.action));
    }
    Ok(out)
}
