//! Run directories never overwrite an earlier run.

use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use onlineaug_core::config::RunConfig;
use onlineaug_core::Result;

/// `baseline-seed0`, `astn+dvae+pvae-seed3`, ...
pub fn name(run: &RunConfig) -> String {
    let augs = &run.trainer.augmenters;
    let mode = if augs.is_empty() {
        "baseline".to_string()
    } else {
        augs.iter().map(|a| a.name()).collect::<Vec<_>>().join("+")
    };
    format!("{mode}-seed{}", run.seed)
}

/// Creates `root/name`, or `root/name-2`, `root/name-3`, ... if taken.
pub fn create(root: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(root)?;
    for k in 1.. {
        let dir = if k == 1 { root.join(name) } else { root.join(format!("{name}-{k}")) };
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("unbounded suffix search")
}
