//! Adapter for pretrained flow networks that live outside this crate.
//!
//! The artifact at `weights_path` is a JSON manifest naming an executable that
//! speaks a file protocol: it is invoked as
//! `command [args..] --anchor A.png --moving M.png --out F.flo2` and must write
//! a FLO2 flow file for which `warp(moving, flow) ≈ anchor`. The wrapped model
//! is frozen from this crate's point of view; nothing here can update it.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::flowalign::{FlowEstimator, FlowField};
use crate::rawdata::io::{read_flo2, write_png};
use crate::tensor::Image;

/// Environment variable holding the directory of external assets.
pub const ASSET_CACHE_ENV: &str = "MISALIGNED_ISP_CACHE";

#[derive(Debug, Deserialize)]
struct Manifest {
    name: String,
    command: String,
    #[serde(default)]
    args: Vec<String>,
    #[serde(default = "yes")]
    deterministic: bool,
}

fn yes() -> bool {
    true
}

/// Relative paths are looked up under `$MISALIGNED_ISP_CACHE` when it is set.
pub fn resolve_asset_path(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Ok(dir) = std::env::var(ASSET_CACHE_ENV) {
            return Path::new(&dir).join(path);
        }
    }
    path.to_path_buf()
}

#[derive(Debug)]
pub struct ExternalFlow {
    name: String,
    command: PathBuf,
    args: Vec<String>,
    deterministic: bool,
}

static CALLS: AtomicUsize = AtomicUsize::new(0);

/// Load an external estimator manifest.
pub fn external_flow_adapter(weights_path: &Path) -> Result<ExternalFlow> {
    let path = resolve_asset_path(weights_path);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Load {
        path: path.clone(),
        reason: format!(
            "{e}; point flow.weights_path at an estimator manifest (or set {ASSET_CACHE_ENV}), \
             or select flow.estimator = brute_translation | block_match"
        ),
    })?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Load {
        path: path.clone(),
        reason: format!("not an estimator manifest ({e}); expected keys name, command, args"),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let command = if Path::new(&m.command).is_relative() && base.join(&m.command).exists() {
        base.join(&m.command)
    } else {
        PathBuf::from(&m.command)
    };
    Ok(ExternalFlow {
        name: m.name,
        command,
        args: m.args,
        deterministic: m.deterministic,
    })
}

impl FlowEstimator for ExternalFlow {
    fn name(&self) -> &str {
        &self.name
    }

    fn deterministic(&self) -> bool {
        self.deterministic
    }

    fn estimate(&self, anchor: &Image, moving: &Image) -> Result<FlowField> {
        anchor.expect_same_shape(moving)?;
        let id = CALLS.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!("isp-align-flow-{}-{id}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        let (a, m, out) = (dir.join("anchor.png"), dir.join("moving.png"), dir.join("flow.flo2"));
        write_png(&a, anchor)?;
        write_png(&m, moving)?;
        let status = Command::new(&self.command)
            .args(&self.args)
            .arg("--anchor")
            .arg(&a)
            .arg("--moving")
            .arg(&m)
            .arg("--out")
            .arg(&out)
            .status()
            .map_err(|e| Error::Load {
                path: self.command.clone(),
                reason: format!("cannot run external estimator: {e}"),
            })?;
        if !status.success() {
            let _ = std::fs::remove_dir_all(&dir);
            return Err(Error::Load {
                path: self.command.clone(),
                reason: format!("external estimator exited with {status}"),
            });
        }
        let flow = read_flo2(&out);
        let _ = std::fs::remove_dir_all(&dir);
        let flow = flow?;
        let (_, h, w) = anchor.chw();
        if (flow.height(), flow.width()) != (h, w) {
            return Err(Error::dim(format!(
                "external estimator returned {}×{} flow for {h}×{w} images",
                flow.height(),
                flow.width()
            )));
        }
        Ok(flow)
    }
}
