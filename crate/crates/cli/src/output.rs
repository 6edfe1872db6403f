use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};
use crate::settings::Settings;

/// Output directory that refuses to overwrite any of the run's inputs.
pub struct Output {
    dir: PathBuf,
    protected: Vec<PathBuf>,
    written: Vec<String>,
}

impl Output {
    pub fn new(dir: &Path, inputs: &[&Path]) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let protected = inputs.iter().filter_map(|p| p.canonicalize().ok()).collect();
        Ok(Self {
            dir: dir.to_path_buf(),
            protected,
            written: Vec::new(),
        })
    }

    pub fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        if let Ok(canonical) = path.canonicalize() {
            if self.protected.contains(&canonical) {
                return Err(CliError::Usage(format!(
                    "refusing to overwrite input file {}",
                    path.display()
                )));
            }
        }
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        self.written.push(name.to_string());
        Ok(BufWriter::new(file))
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = self.create(name)?;
        w.write_all(text.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| CliError::io(&path, e))
    }

    /// Resolved settings plus the list of files this run produced.
    pub fn finish(mut self, settings: &Settings) -> Result<()> {
        let mut text = settings.manifest();
        for name in &self.written {
            text.push_str(&format!("# output {name}\n"));
        }
        self.write_text("manifest.txt", &text)
    }
}
