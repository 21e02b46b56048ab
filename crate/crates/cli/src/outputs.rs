//! Output directory handling. Files are staged under temporary names and
//! only renamed into place by [`Outputs::commit`]; dropping an uncommitted
//! set removes everything it staged, and the directory if it created it.

use std::fs;
use std::path::{Path, PathBuf};

use crate::Failure;

pub struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    staged: Vec<(PathBuf, PathBuf)>,
    committed: bool,
}

impl Outputs {
    pub fn prepare(dir: &Path) -> Result<Self, Failure> {
        if dir.exists() && !dir.is_dir() {
            return Err(Failure::config(format!(
                "--out {} exists and is not a directory",
                dir.display()
            )));
        }
        let created_dir = !dir.exists();
        if created_dir {
            fs::create_dir_all(dir).map_err(|e| {
                Failure::config(format!("cannot create --out {}: {e}", dir.display()))
            })?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            staged: Vec::new(),
            committed: false,
        })
    }

    /// Stages `bytes` to be published as `name`.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        let tmp = self.dir.join(format!(".{name}.partial"));
        fs::write(&tmp, bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", tmp.display())))?;
        self.staged.push((tmp, self.dir.join(name)));
        Ok(())
    }

    pub fn commit(mut self) -> Result<Vec<PathBuf>, Failure> {
        let mut published = Vec::new();
        for (tmp, dst) in &self.staged {
            fs::rename(tmp, dst)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", dst.display())))?;
            published.push(dst.clone());
        }
        self.committed = true;
        Ok(published)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for (tmp, _) in &self.staged {
            let _ = fs::remove_file(tmp);
        }
        if self.created_dir {
            // Only succeeds when nothing else was put there.
            let _ = fs::remove_dir(&self.dir);
        }
    }
}
