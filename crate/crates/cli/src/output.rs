//! Atomic file and directory output: everything is staged next to the
//! destination and renamed into place only once complete.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

fn staging_path(dest: &Path, tag: &str) -> PathBuf {
    let name = dest.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    dest.with_file_name(format!(".{}.{}-{}", name, tag, std::process::id()))
}

fn ensure_parent(dest: &Path) -> Result<()> {
    if let Some(parent) = dest.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

pub fn write_file(dest: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(dest)?;
    let tmp = staging_path(dest, "tmp");
    let result = (|| -> Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, dest)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.with_context(|| format!("writing {}", dest.display()))
}

/// Fills a fresh staging directory with `fill` and moves it to `dest`,
/// replacing any previous directory there.
pub fn write_dir<F>(dest: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&Path) -> Result<()>,
{
    ensure_parent(dest)?;
    let tmp = staging_path(dest, "tmp");
    let _ = fs::remove_dir_all(&tmp);
    fs::create_dir_all(&tmp)?;
    if let Err(e) = fill(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    let old = staging_path(dest, "old");
    let had_old = dest.exists();
    if had_old {
        fs::rename(dest, &old).with_context(|| format!("moving aside {}", dest.display()))?;
    }
    if let Err(e) = fs::rename(&tmp, dest) {
        if had_old {
            let _ = fs::rename(&old, dest);
        }
        let _ = fs::remove_dir_all(&tmp);
        return Err(e).with_context(|| format!("writing {}", dest.display()));
    }
    if had_old {
        let _ = fs::remove_dir_all(&old);
    }
    Ok(())
}

/// Writes to `dest` atomically, or to stdout when no path is given.
pub fn emit(dest: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match dest {
        Some(p) => write_file(p, bytes),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_is_replaced_whole() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.json");
        write_file(&p, b"one").unwrap();
        write_file(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn failed_fill_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("net");
        let r = write_dir(&p, |d| {
            fs::write(d.join("x"), b"partial")?;
            anyhow::bail!("boom")
        });
        assert!(r.is_err());
        assert!(!p.exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn directory_is_replaced() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("net");
        write_dir(&p, |d| Ok(fs::write(d.join("old"), b"1")?)).unwrap();
        write_dir(&p, |d| Ok(fs::write(d.join("new"), b"2")?)).unwrap();
        assert!(p.join("new").exists() && !p.join("old").exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
