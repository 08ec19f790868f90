//! Crash-safe file output.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(".{suffix}-{}", std::process::id()));
    path.with_file_name(name)
}

/// Writes `bytes` to a temporary sibling, syncs it and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::file(parent, e))?;
    }
    let tmp = sibling(path, "tmp");
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::file(path, e)
    })
}

/// Builds a directory under a temporary name with `fill`, then swaps it into
/// place so readers see either the old directory or the complete new one.
pub fn replace_dir_atomic(path: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let staged = sibling(path, "partial");
    if staged.exists() {
        std::fs::remove_dir_all(&staged).map_err(|e| Error::file(&staged, e))?;
    }
    std::fs::create_dir_all(&staged).map_err(|e| Error::file(&staged, e))?;
    if let Err(e) = fill(&staged) {
        let _ = std::fs::remove_dir_all(&staged);
        return Err(e);
    }
    let old = sibling(path, "old");
    let had_old = path.exists();
    if had_old {
        std::fs::rename(path, &old).map_err(|e| Error::file(path, e))?;
    }
    std::fs::rename(&staged, path).map_err(|e| Error::file(path, e))?;
    if had_old {
        std::fs::remove_dir_all(&old).map_err(|e| Error::file(&old, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn failed_fill_leaves_previous_dir() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck");
        replace_dir_atomic(&p, |d| write_atomic(&d.join("x"), b"1")).unwrap();
        let r = replace_dir_atomic(&p, |_| Err(Error::contract("boom")));
        assert!(r.is_err());
        assert_eq!(std::fs::read(p.join("x")).unwrap(), b"1");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
