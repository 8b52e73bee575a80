use std::fs;
use std::path::{Path, PathBuf};

use crate::CliError;

fn is_pattern(arg: &str) -> bool {
    arg.contains(['*', '?', '['])
}

/// Expand file, directory and glob arguments. Directories contribute their
/// files ending in `.{ext}`, sorted by name. Each argument must match at
/// least one file.
pub fn expand_inputs(args: &[PathBuf], ext: &str) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for arg in args {
        let text = arg.to_string_lossy();
        let mut found = if arg.is_dir() {
            dir_files(arg, ext)?
        } else if !arg.exists() && is_pattern(&text) {
            let paths = glob::glob(&text).map_err(|e| CliError::Usage(format!("bad pattern {text:?}: {e}")))?;
            let mut v = Vec::new();
            for p in paths {
                let p = p.map_err(|e| CliError::Data(e.to_string()))?;
                if p.is_file() {
                    v.push(p);
                }
            }
            v
        } else {
            vec![arg.clone()]
        };
        if found.is_empty() {
            return Err(CliError::Data(format!("{text}: no .{ext} files found")));
        }
        found.sort();
        out.append(&mut found);
    }
    Ok(out)
}

fn dir_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, CliError> {
    let io = |e: std::io::Error| {
        CliError::Core(mmcrf::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    };
    let mut v = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let p = entry.map_err(io)?.path();
        if p.is_file() && p.extension().is_some_and(|x| x == ext) {
            v.push(p);
        }
    }
    Ok(v)
}

/// `dir/<stem of input>.<ext>`.
pub fn output_for(dir: &Path, input: &Path, ext: &str) -> PathBuf {
    let stem = input
        .file_stem()
        .map(|s| s.to_os_string())
        .unwrap_or_else(|| "out".into());
    let mut name = stem;
    name.push(".");
    name.push(ext);
    dir.join(name)
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| {
        CliError::Core(mmcrf::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

pub fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| {
        CliError::Core(mmcrf::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

pub fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| {
        CliError::Core(mmcrf::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}
