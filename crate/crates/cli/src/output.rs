use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

/// Provenance written as the first line of every CSV.
#[derive(Debug, Clone)]
pub struct Header {
    pub config_hash: String,
    pub seed: u64,
    pub grid: &'static str,
}

impl Header {
    /// The timestamp is the last field so reruns differ only there.
    pub fn line(&self) -> String {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        format!("# chiptrap {} config_sha256={} seed={} grid={} generated_unix={}", env!("CARGO_PKG_VERSION"), self.config_hash, self.seed, self.grid, ts)
    }
}

/// Output directory plus header; every file goes through [`Sink::csv`].
#[derive(Debug, Clone)]
pub struct Sink {
    pub dir: PathBuf,
    pub header: Header,
}

impl Sink {
    pub fn new(dir: &Path, header: Header) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), header })
    }

    pub fn csv(&self, name: &str, body: impl FnOnce(&mut Vec<u8>) -> io::Result<()>) -> io::Result<PathBuf> {
        let mut buf = Vec::new();
        writeln!(buf, "{}", self.header.line())?;
        body(&mut buf)?;
        let path = self.dir.join(name);
        fs::write(&path, buf)?;
        Ok(path)
    }
}

/// Data rows of a CSV written by [`Sink::csv`]: comment lines and the column
/// header are dropped.
pub fn read_rows(path: &Path) -> io::Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let cols = lines.next().unwrap_or("").split(',').map(str::to_owned).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_owned).collect()).collect();
    Ok((cols, rows))
}
