//! File staging between the submitting side and task sandboxes.
//!
//! Stage-in copies `source` (absolute, or relative to `base`) to `target`
//! inside the sandbox. Stage-out copies `source` inside the sandbox to
//! `target` (absolute, or relative to `base`). Sandbox-side paths may not
//! leave the sandbox.

use std::fs;
use std::path::{Component, Path, PathBuf};

use thiserror::Error;

use crate::task::StagingDirective;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StagingError {
    #[error("staging source {0} does not exist")]
    SourceMissing(String),
    #[error("staging destination {path} is not writable: {reason}")]
    DestinationUnwritable { path: String, reason: String },
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn inside(sandbox: &Path, p: &str) -> Option<PathBuf> {
    let rel = Path::new(p);
    let escapes = rel
        .components()
        .any(|c| matches!(c, Component::ParentDir | Component::RootDir | Component::Prefix(_)));
    (!escapes).then(|| sandbox.join(rel))
}

fn copy(src: &Path, dst: &Path) -> Result<(), StagingError> {
    if !src.exists() {
        return Err(StagingError::SourceMissing(src.display().to_string()));
    }
    let unwritable = |e: std::io::Error| StagingError::DestinationUnwritable {
        path: dst.display().to_string(),
        reason: e.to_string(),
    };
    if let Some(parent) = dst.parent() {
        fs::create_dir_all(parent).map_err(unwritable)?;
    }
    if src.is_dir() {
        fs::create_dir_all(dst).map_err(unwritable)?;
        let entries = fs::read_dir(src).map_err(|_| StagingError::SourceMissing(src.display().to_string()))?;
        for entry in entries.flatten() {
            copy(&entry.path(), &dst.join(entry.file_name()))?;
        }
        return Ok(());
    }
    fs::copy(src, dst).map(|_| ()).map_err(unwritable)
}

/// Runs every directive in order; stops at the first error.
pub fn stage(
    directives: &[StagingDirective],
    direction: Direction,
    sandbox: &Path,
    base: &Path,
) -> Result<(), StagingError> {
    for d in directives {
        let (src, dst) = match direction {
            Direction::In => {
                let dst = inside(sandbox, &d.target).ok_or_else(|| StagingError::DestinationUnwritable {
                    path: d.target.clone(),
                    reason: "outside the task sandbox".into(),
                })?;
                (resolve(base, &d.source), dst)
            }
            Direction::Out => {
                let src = inside(sandbox, &d.source).ok_or_else(|| StagingError::SourceMissing(d.source.clone()))?;
                (src, resolve(base, &d.target))
            }
        };
        copy(&src, &dst)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn in_and_out() {
        let tmp = tempfile::tempdir().unwrap();
        let base = tmp.path();
        let sandbox = base.join("sb");
        fs::write(base.join("input.txt"), "data").unwrap();
        stage(&[StagingDirective::new("input.txt", "in/input.txt")], Direction::In, &sandbox, base).unwrap();
        assert_eq!(fs::read_to_string(sandbox.join("in/input.txt")).unwrap(), "data");
        stage(&[StagingDirective::new("in/input.txt", "out/result.txt")], Direction::Out, &sandbox, base).unwrap();
        assert_eq!(fs::read_to_string(base.join("out/result.txt")).unwrap(), "data");
    }

    #[test]
    fn missing_source_and_escape() {
        let tmp = tempfile::tempdir().unwrap();
        let sb = tmp.path().join("sb");
        let err = stage(&[StagingDirective::new("nope", "x")], Direction::In, &sb, tmp.path()).unwrap_err();
        assert!(matches!(err, StagingError::SourceMissing(_)));
        fs::write(tmp.path().join("f"), "x").unwrap();
        let err = stage(&[StagingDirective::new("f", "../x")], Direction::In, &sb, tmp.path()).unwrap_err();
        assert!(matches!(err, StagingError::DestinationUnwritable { .. }));
    }

    #[test]
    fn unwritable_destination() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join("f"), "x").unwrap();
        // a regular file where a directory is needed
        fs::write(tmp.path().join("blocker"), "").unwrap();
        let sb = tmp.path().join("sb");
        fs::create_dir_all(&sb).unwrap();
        fs::write(sb.join("r"), "x").unwrap();
        let err = stage(
            &[StagingDirective::new("r", "blocker/r")],
            Direction::Out,
            &sb,
            tmp.path(),
        )
        .unwrap_err();
        assert!(matches!(err, StagingError::DestinationUnwritable { .. }));
    }
}
