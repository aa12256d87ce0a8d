//! Checkpoint files: model parameters optionally followed by optimizer moments.

use std::path::Path;

use super::adamw::AdamW;
use crate::codec::ModelState;
use crate::error::{format_err, Result};

const OPTIMIZER_TAG: [u8; 4] = *b"ADAM";

pub fn checkpoint_bytes(model: &ModelState, opt: Option<&AdamW>) -> Vec<u8> {
    let mut out = model.to_bytes();
    if let Some(opt) = opt {
        out.extend_from_slice(&OPTIMIZER_TAG);
        out.extend_from_slice(&opt.to_bytes());
    }
    out
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ModelState, Option<AdamW>)> {
    let (model, used) = ModelState::from_bytes(bytes)?;
    let rest = &bytes[used..];
    if rest.is_empty() {
        return Ok((model, None));
    }
    if rest.len() < 4 || rest[..4] != OPTIMIZER_TAG {
        return format_err("unexpected bytes after model parameters");
    }
    let (opt, n) = AdamW::from_bytes(&rest[4..], model.params())?;
    if 4 + n != rest.len() {
        return format_err("trailing bytes after optimizer state");
    }
    Ok((model, Some(opt)))
}

pub fn save_checkpoint(path: &Path, model: &ModelState, opt: Option<&AdamW>) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, checkpoint_bytes(model, opt))?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, Option<AdamW>)> {
    parse_checkpoint(&std::fs::read(path)?)
}
