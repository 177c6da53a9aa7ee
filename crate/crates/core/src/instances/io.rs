//! Native instance files: one self-describing JSON object per line.
//!
//! Coordinates use shortest round-trip float formatting, so
//! `read(write(x)) == x` exactly, field for field.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::{DistributionSpec, Problem, Rounding, TaskSpec, VrpInstance};

#[derive(Serialize, Deserialize)]
struct Record {
    problem: Problem,
    n: usize,
    dist: DistributionSpec,
    seed: u64,
    coords: Vec<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    depot: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    demands_raw: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    capacity_raw: Option<u32>,
}

impl From<&VrpInstance> for Record {
    fn from(inst: &VrpInstance) -> Self {
        Record {
            problem: inst.task.problem,
            n: inst.task.n,
            dist: inst.task.dist,
            seed: inst.seed,
            coords: inst.coords.iter().map(|p| [p.x, p.y]).collect(),
            depot: inst.depot.map(|p| [p.x, p.y]),
            demands_raw: inst.demands_raw.clone(),
            capacity_raw: inst.capacity_raw,
        }
    }
}

impl Record {
    fn into_instance(self, line: usize) -> Result<VrpInstance> {
        if self.coords.len() != self.n {
            return Err(Error::Parse {
                line,
                msg: format!("record declares n={} but has {} coords", self.n, self.coords.len()),
            });
        }
        let inst = VrpInstance {
            task: TaskSpec::new(self.problem, self.n, self.dist),
            seed: self.seed,
            coords: self.coords.iter().map(|c| super::Point::new(c[0], c[1])).collect(),
            depot: self.depot.map(|c| super::Point::new(c[0], c[1])),
            demands_raw: self.demands_raw,
            capacity_raw: self.capacity_raw,
            rounding: Rounding::Exact,
            name: None,
        };
        inst.validate()?;
        Ok(inst)
    }
}

pub fn write_instances(instances: &[VrpInstance], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut w, &Record::from(inst))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_instances(path: impl AsRef<Path>) -> Result<Vec<VrpInstance>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(record.into_instance(i + 1)?);
    }
    Ok(out)
}
