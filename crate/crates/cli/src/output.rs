//! Atomic file emission: content is staged to a temporary name in the target
//! directory and renamed into place, so an interrupted run never leaves a
//! partially written final file.

use std::fs;
use std::io;
use std::path::Path;

use esglm::error::{Error, Result};

/// Fault-injection hook for tests: when this environment variable is set the
/// write aborts between staging and rename, simulating a kill.
pub const FAIL_AFTER_TEMP_ENV: &str = "ESGLM_FAIL_AFTER_TEMP";

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp.{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    fs::write(&tmp, bytes)?;
    if std::env::var_os(FAIL_AFTER_TEMP_ENV).is_some() {
        let _ = fs::remove_file(&tmp);
        return Err(Error::Io(io::Error::other(
            "fault injection: interrupted before rename",
        )));
    }
    if let Err(e) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(Error::Io(e));
    }
    Ok(())
}

/// FNV-1a digest of a byte stream, hex encoded; used to fingerprint the
/// simulated coefficient vector in metadata files.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

pub fn digest_values(values: impl IntoIterator<Item = f64>) -> String {
    let mut buf = String::new();
    for v in values {
        buf.push_str(&format!("{v:.16e},"));
    }
    fnv1a_hex(buf.as_bytes())
}
