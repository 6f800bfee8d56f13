//! Output helpers: atomic file writes, CSV with a config-hash header, and
//! PGM/PPM images.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::config(format!("invalid output path {}", path.display())))?;
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// A CSV table. When a config hash is set it is written as a leading
/// `# config_hash=...` comment line.
#[derive(Debug, Clone, Default)]
pub struct Csv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub config_hash: Option<String>,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            config_hash: None,
        }
    }

    pub fn with_hash(mut self, hash: &str) -> Self {
        self.config_hash = Some(hash.to_string());
        self
    }

    pub fn push_f64(&mut self, row: &[f64]) {
        self.rows.push(row.iter().map(|v| format_f64(*v)).collect());
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        if let Some(h) = &self.config_hash {
            let _ = writeln!(s, "# config_hash={h}");
        }
        s.push_str(&self.header.join(","));
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.render().as_bytes())
    }
}

/// Shortest round-tripping representation.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Binary PGM (P5). A `# config_hash` comment is embedded when given.
pub fn pgm(width: usize, height: usize, pixels: &[u8], hash: Option<&str>) -> Result<Vec<u8>> {
    image_bytes("P5", width, height, 1, pixels, hash)
}

/// Binary PPM (P6), pixels interleaved RGB.
pub fn ppm(width: usize, height: usize, pixels: &[u8], hash: Option<&str>) -> Result<Vec<u8>> {
    image_bytes("P6", width, height, 3, pixels, hash)
}

fn image_bytes(
    magic: &str,
    width: usize,
    height: usize,
    channels: usize,
    pixels: &[u8],
    hash: Option<&str>,
) -> Result<Vec<u8>> {
    if pixels.len() != width * height * channels {
        return Err(Error::domain(format!(
            "{} pixel values for a {width}×{height}×{channels} image",
            pixels.len()
        )));
    }
    let mut head = format!("{magic}\n");
    if let Some(h) = hash {
        let _ = writeln!(head, "# config_hash={h}");
    }
    let _ = write!(head, "{width} {height}\n255\n");
    let mut out = head.into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Maps real values linearly onto `0..=255`; symmetric about zero when
/// `symmetric` so that 0 lands on mid-grey.
pub fn to_grey(values: &[f64], symmetric: bool) -> Vec<u8> {
    let (lo, hi) = if symmetric {
        let m = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        (-m, m)
    } else {
        values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
    };
    if !(hi > lo) {
        return vec![if symmetric { 128 } else { 0 }; values.len()];
    }
    values
        .iter()
        .map(|v| (((v - lo) / (hi - lo)) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_render() {
        let mut c = Csv::new(&["a", "b"]).with_hash("abc");
        c.push_f64(&[1.0, 0.1]);
        assert_eq!(c.render(), "# config_hash=abc\na,b\n1.0,0.1\n");
    }

    #[test]
    fn pgm_header() {
        let b = pgm(2, 1, &[0, 255], None).unwrap();
        assert_eq!(&b[..], b"P5\n2 1\n255\n\x00\xff");
        assert!(pgm(2, 2, &[0], None).is_err());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn grey_mapping() {
        assert_eq!(to_grey(&[0.0, 0.0], true), vec![128, 128]);
        assert_eq!(to_grey(&[-1.0, 0.0, 1.0], true), vec![0, 128, 255]);
    }
}
