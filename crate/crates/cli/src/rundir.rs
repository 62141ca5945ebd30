//! Run-directory bookkeeping: exclusive lock and resolved-config echo.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use spkstyle::config::RunConfig;
use spkstyle::error::{Error, Result};

pub const LOCK_FILE: &str = ".lock";
pub const ECHO_FILE: &str = "run.toml";

/// Held for the lifetime of a command that writes into a run directory.
/// The operating system releases the lock when the process exits.
pub struct RunLock {
    _file: File,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let mut file =
            OpenOptions::new().create(true).truncate(false).write(true).open(&path).map_err(|e| Error::io(&path, e))?;
        match file.try_lock() {
            Ok(()) => {}
            Err(std::fs::TryLockError::WouldBlock) => {
                return Err(Error::Validation(format!("run directory {} is locked by another process", dir.display())))
            }
            Err(std::fs::TryLockError::Error(e)) => return Err(Error::io(&path, e)),
        }
        file.set_len(0).map_err(|e| Error::io(&path, e))?;
        writeln!(file, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
        Ok(RunLock { _file: file })
    }
}

/// Writes the command line, resolved configuration and seed to `path`.
pub fn write_echo(path: &Path, command: &str, config: &RunConfig, seed: u64) -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let text = format!("# {command}\n# argv: {}\n{}", args.join(" "), config.echo(seed));
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Echo location for a command whose output is a single file.
pub fn echo_beside(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".run.toml");
    output.with_file_name(name)
}
