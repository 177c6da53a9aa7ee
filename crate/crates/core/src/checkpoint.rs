//! Checkpoint persistence: a JSON header (version, resolved config, layout,
//! iteration, optimizer statistics, rng root) followed by a length-prefixed
//! little-endian f64 array of parameters.
//!
//! Parameters travel as raw IEEE-754 bytes and the header's f64 arrays use
//! shortest-round-trip JSON numbers, so `load(save(x)) == x` bit for bit
//! and resumed training replays exactly on the same platform.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::meta::{AdamState, MetaState};
use crate::policy::{ParamLayout, PolicyParams};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    /// Resolved config in its canonical flat text form.
    config_text: String,
    config_hash: String,
    iteration: usize,
    layout: ParamLayout,
    outer_adam: AdamState,
    rng_root: u64,
    /// Task-scheduler weights/gaps at save time, for exact resume.
    #[serde(default)]
    scheduler: Option<SchedulerSnapshot>,
}

/// The mutable part of the scheduler; the pool itself is rebuilt
/// deterministically from the rng root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerSnapshot {
    pub weights: Vec<f64>,
    pub gaps: Vec<f64>,
    pub refreshes_done: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: MetaState,
    pub scheduler: Option<SchedulerSnapshot>,
}

pub fn save(
    path: impl AsRef<Path>,
    config: &RunConfig,
    state: &MetaState,
    scheduler: Option<SchedulerSnapshot>,
) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        config_text: config.to_text(),
        config_hash: config.hash(),
        iteration: state.iter,
        layout: state.params.layout.clone(),
        outer_adam: state.outer_adam.clone(),
        rng_root: state.root_seed,
        scheduler,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let values = &state.params.values;
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_bytes = Vec::new();
    // header is the first line
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte).map_err(|_| Error::Parse {
            line: 1,
            msg: "checkpoint truncated before header end".into(),
        })?;
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
    }
    let header: Header = serde_json::from_slice(&header_bytes).map_err(|e| Error::Parse {
        line: 1,
        msg: format!("bad checkpoint header: {}", e),
    })?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedFormat(format!(
            "checkpoint format {} (supported: {})",
            header.format_version, FORMAT_VERSION
        )));
    }
    let config = RunConfig::from_text(&header.config_text)?;
    if config.hash() != header.config_hash {
        return Err(Error::validation("checkpoint config hash mismatch"));
    }

    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let len = u64::from_le_bytes(len_bytes) as usize;
    if len != header.layout.total {
        return Err(Error::validation(format!(
            "parameter count {} does not match layout total {}",
            len, header.layout.total
        )));
    }
    let mut values = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    let params = PolicyParams { values, layout: header.layout };
    let state = MetaState {
        params,
        outer_adam: header.outer_adam,
        iter: header.iteration,
        root_seed: header.rng_root,
    };
    Ok(Checkpoint { config, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_params, ModelConfig};
    use crate::rng::{stream, StreamTag};

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = RunConfig::desk_scale();
        let params =
            init_params(&cfg.model_config(), &mut stream(3, StreamTag::ParamInit, 0)).unwrap();
        let mut state = MetaState::new(params, 42);
        state.iter = 17;
        state.outer_adam.step = 17;
        state.outer_adam.m[0] = 0.1234567890123456789;
        state.outer_adam.v[1] = 1e-300;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save(&path, &cfg, &state).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.state, state);
        for (a, b) in back.state.params.values.iter().zip(&state.params.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_file_rejected() {
        let cfg = RunConfig::desk_scale();
        let params =
            init_params(&cfg.model_config(), &mut stream(3, StreamTag::ParamInit, 0)).unwrap();
        let state = MetaState::new(params, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save(&path, &cfg, &state).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load(&path).is_err());
    }
}
