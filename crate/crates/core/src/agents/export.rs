use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::surrogate::{save_bundle, ModelBundle};

/// Directory name the inverse designer loads its surrogate from.
pub const FORWARD_MODEL_NAME: &str = "forward_model";

/// Exports a trained bundle to `out_dir/forward_model`, replacing any
/// previous export. The new bundle is written to a sibling temp directory
/// first, so readers see either the old or the new bundle, never a mix.
pub fn code_modify(bundle: &ModelBundle, out_dir: &Path) -> Result<PathBuf> {
    if !bundle.is_trained() {
        return Err(Error::NotTrained);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let target = out_dir.join(FORWARD_MODEL_NAME);
    let staging = tempfile::Builder::new()
        .prefix(".forward_model.")
        .tempdir_in(out_dir)
        .map_err(|e| Error::io(out_dir, e))?;
    save_bundle(bundle, staging.path())?;

    let retired = out_dir.join(format!(".{FORWARD_MODEL_NAME}.old"));
    if retired.exists() {
        std::fs::remove_dir_all(&retired).map_err(|e| Error::io(&retired, e))?;
    }
    if target.exists() {
        std::fs::rename(&target, &retired).map_err(|e| Error::io(&target, e))?;
    }
    let staged = staging.keep();
    std::fs::rename(&staged, &target).map_err(|e| Error::io(&target, e))?;
    if retired.exists() {
        std::fs::remove_dir_all(&retired).map_err(|e| Error::io(&retired, e))?;
    }
    Ok(target)
}
