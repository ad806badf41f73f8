//! Versioned JSON checkpoints for trained weights.
//!
//! A checkpoint is a small envelope around the serialized payload so that a
//! file can be rejected with a clear message when it is not a checkpoint at
//! all, comes from an incompatible version, or holds the wrong kind of
//! weights for the requested operation.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::guess::ConvStack2D;
use crate::hybrid::HybridParams;

const FORMAT: &str = "bctrl-checkpoint";
const VERSION: u32 = 1;

/// Payload discriminator stored in the envelope.
const KIND_GUESS: &str = "conv_stack2d";
const KIND_HYBRID: &str = "hybrid_params";

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    kind: String,
    payload: Value,
}

fn save<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<()> {
    let envelope = Envelope {
        format: FORMAT.to_string(),
        version: VERSION,
        kind: kind.to_string(),
        payload: serde_json::to_value(payload)
            .map_err(|e| Error::Checkpoint(format!("serialization failed: {e}")))?,
    };
    let text = serde_json::to_string_pretty(&envelope)
        .map_err(|e| Error::Checkpoint(format!("serialization failed: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let envelope: Envelope = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: not a checkpoint: {e}", path.display())))?;
    if envelope.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "{}: unrecognized format {:?}",
            path.display(),
            envelope.format
        )));
    }
    if envelope.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {} (expected {VERSION})",
            path.display(),
            envelope.version
        )));
    }
    if envelope.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{}: holds {:?} weights, expected {:?}",
            path.display(),
            envelope.kind,
            kind
        )));
    }
    serde_json::from_value(envelope.payload)
        .map_err(|e| Error::Checkpoint(format!("{}: malformed payload: {e}", path.display())))
}

/// Write guess-network weights.
pub fn save_guess_weights(path: &Path, stack: &ConvStack2D) -> Result<()> {
    save(path, KIND_GUESS, stack)
}

/// Read guess-network weights.
pub fn load_guess_weights(path: &Path) -> Result<ConvStack2D> {
    load(path, KIND_GUESS)
}

/// Write hybrid-optimizer parameters.
pub fn save_hybrid_params(path: &Path, params: &HybridParams) -> Result<()> {
    save(path, KIND_HYBRID, params)
}

/// Read hybrid-optimizer parameters.
pub fn load_hybrid_params(path: &Path) -> Result<HybridParams> {
    load(path, KIND_HYBRID)
}
