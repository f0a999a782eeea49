//! Output directory handling and the provenance header of every file.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::Setup;
use crate::CliError;

/// Header lines written at the top of every output file.
#[derive(Debug, Clone)]
pub struct Header {
    pub scenario: String,
    pub contract: String,
    pub eta: Option<f64>,
    pub k_h: Option<usize>,
    pub seed: Option<u64>,
}

impl Header {
    pub fn new(setup: &Setup) -> Self {
        Self {
            scenario: format!(
                "{} ({})",
                setup.scenario.fingerprint(),
                setup.scenario.label()
            ),
            contract: format!("b={} epsilon={} r={}", setup.b, setup.epsilon, setup.rate),
            eta: None,
            k_h: None,
            seed: None,
        }
    }

    pub fn grid(mut self, eta: f64, k_h: usize) -> Self {
        self.eta = Some(eta);
        self.k_h = Some(k_h);
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn lines(&self) -> Vec<(String, String)> {
        let opt = |x: Option<String>| x.unwrap_or_else(|| "-".into());
        vec![
            (
                "version".into(),
                format!("mfdi {}", env!("CARGO_PKG_VERSION")),
            ),
            ("scenario".into(), self.scenario.clone()),
            ("contract".into(), self.contract.clone()),
            ("eta".into(), opt(self.eta.map(|e| e.to_string()))),
            ("k_h".into(), opt(self.k_h.map(|k| k.to_string()))),
            ("seed".into(), opt(self.seed.map(|s| s.to_string()))),
        ]
    }

    fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for (k, v) in self.lines() {
            writeln!(w, "# {k}: {v}")?;
        }
        Ok(())
    }
}

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    /// Writes `name` with the header followed by `body`.
    pub fn write(
        &self,
        name: &str,
        header: &Header,
        body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
    ) -> Result<PathBuf, CliError> {
        let path = self.root.join(name);
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        header
            .write(&mut w)
            .and_then(|_| body(&mut w))
            .and_then(|_| w.flush())
            .map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    /// `summary.txt`: header and `key: value` lines, echoed to stdout.
    pub fn summary(&self, header: &Header, lines: &[(String, String)]) -> Result<(), CliError> {
        self.write("summary.txt", header, |w| {
            for (k, v) in lines {
                writeln!(w, "{k}: {v}")?;
            }
            Ok(())
        })?;
        for (k, v) in header.lines().iter().chain(lines) {
            println!("{k}: {v}");
        }
        Ok(())
    }
}
