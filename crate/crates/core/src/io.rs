//! On-disk formats: the slice container and the dataset manifest.
//!
//! Container layout (little endian throughout):
//! `CMRS` magic, u32 version, u32 dtype code (0 = real32, 1 = complex64 as
//! interleaved re/im f32 pairs), u32 height, u32 width, then the row-major
//! payload. Writers go through a temp file and rename, so partially written
//! files are never observed under the final name.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::kspace::{ComplexGrid, RealImage};

pub const CONTAINER_MAGIC: &[u8; 4] = b"CMRS";
pub const CONTAINER_VERSION: u32 = 1;

const DTYPE_REAL32: u32 = 0;
const DTYPE_COMPLEX64: u32 = 1;

/// Write `bytes` atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".tmp.{}.{}",
        std::process::id(),
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into())
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn container_header(dtype: u32, height: usize, width: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(20);
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<(u32, usize, usize)> {
    if bytes.len() < 20 {
        return Err(Error::Format(format!("{}: truncated header", path.display())));
    }
    if &bytes[0..4] != CONTAINER_MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {}",
            path.display(),
            version
        )));
    }
    let dtype = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    Ok((dtype, h, w))
}

fn check_payload(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() - 20 != expected {
        return Err(Error::Format(format!(
            "{}: payload length {} != expected {}",
            path.display(),
            bytes.len() - 20,
            expected
        )));
    }
    Ok(())
}

/// Write a real image as a real32 container. Values are stored as f32.
pub fn write_real_image(path: &Path, img: &RealImage) -> Result<()> {
    let mut out = container_header(DTYPE_REAL32, img.height(), img.width());
    for &v in img.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_atomic(path, &out)
}

pub fn read_real_image(path: &Path) -> Result<RealImage> {
    let bytes = read_all(path)?;
    let (dtype, h, w) = parse_header(path, &bytes)?;
    if dtype != DTYPE_REAL32 {
        return Err(Error::Format(format!(
            "{}: expected real32 container, found dtype {}",
            path.display(),
            dtype
        )));
    }
    check_payload(path, &bytes, h * w * 4)?;
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    RealImage::new(h, w, data)
}

/// Write a complex grid as interleaved re/im f32 pairs.
pub fn write_complex_grid(path: &Path, grid: &ComplexGrid) -> Result<()> {
    let mut out = container_header(DTYPE_COMPLEX64, grid.height(), grid.width());
    for z in grid.data() {
        out.extend_from_slice(&(z.re as f32).to_le_bytes());
        out.extend_from_slice(&(z.im as f32).to_le_bytes());
    }
    write_atomic(path, &out)
}

pub fn read_complex_grid(path: &Path) -> Result<ComplexGrid> {
    let bytes = read_all(path)?;
    let (dtype, h, w) = parse_header(path, &bytes)?;
    if dtype != DTYPE_COMPLEX64 {
        return Err(Error::Format(format!(
            "{}: expected complex64 container, found dtype {}",
            path.display(),
            dtype
        )));
    }
    check_payload(path, &bytes, h * w * 8)?;
    let data = bytes[20..]
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes(c[0..4].try_into().unwrap()) as f64;
            let im = f32::from_le_bytes(c[4..8].try_into().unwrap()) as f64;
            Complex64::new(re, im)
        })
        .collect();
    ComplexGrid::new(h, w, data)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

/// Coil configuration of a slice pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CoilMode {
    Single,
    Multi(usize),
}

impl CoilMode {
    pub fn as_str(&self) -> String {
        match self {
            CoilMode::Single => "single".into(),
            CoilMode::Multi(n) => format!("multi{}", n),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "single" {
            Ok(CoilMode::Single)
        } else if let Some(n) = s.strip_prefix("multi") {
            let n: usize = n
                .parse()
                .map_err(|_| Error::Format(format!("bad coil mode '{}'", s)))?;
            if n == 0 {
                return Err(Error::Format("multi coil count must be >= 1".into()));
            }
            Ok(CoilMode::Multi(n))
        } else {
            Err(Error::Format(format!("bad coil mode '{}'", s)))
        }
    }
}

/// Dataset split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Split {
    Train,
    Valid,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
        }
    }
}

/// One dataset record. `stem` is the file path relative to the manifest
/// directory without the `_under.cmrs` / `_full.cmrs` suffix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub stem: String,
    pub accel: usize,
    pub coil_mode: CoilMode,
    pub seed: u64,
}

impl ManifestEntry {
    pub fn under_path(&self, root: &Path) -> PathBuf {
        root.join(format!("{}_under.cmrs", self.stem))
    }

    pub fn full_path(&self, root: &Path) -> PathBuf {
        root.join(format!("{}_full.cmrs", self.stem))
    }
}

/// Ordered list of slice-pair records plus the directory they live in.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub split: Split,
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn file_name(split: Split) -> String {
        format!("manifest_{}.tsv", split.as_str())
    }

    /// Serialize as one TSV record per line:
    /// `id<TAB>relative_path<TAB>accel<TAB>coil_mode<TAB>seed`.
    pub fn save(&self) -> Result<PathBuf> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.id,
                e.stem,
                e.accel,
                e.coil_mode.as_str(),
                e.seed
            ));
        }
        let path = self.root.join(Self::file_name(self.split));
        write_atomic(&path, out.as_bytes())?;
        Ok(path)
    }

    /// Load and validate: ids unique, every listed slice file present.
    pub fn load(root: &Path, split: Split) -> Result<Self> {
        let path = root.join(Self::file_name(split));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::Format(format!(
                    "{}:{}: expected 5 tab-separated fields, found {}",
                    path.display(),
                    lineno + 1,
                    fields.len()
                )));
            }
            let entry = ManifestEntry {
                id: fields[0].to_string(),
                stem: fields[1].to_string(),
                accel: fields[2]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad accel '{}'", fields[2])))?,
                coil_mode: CoilMode::parse(fields[3])?,
                seed: fields[4]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad seed '{}'", fields[4])))?,
            };
            if !seen.insert(entry.id.clone()) {
                return Err(Error::Format(format!("duplicate pair id '{}'", entry.id)));
            }
            for p in [entry.under_path(root), entry.full_path(root)] {
                if !p.exists() {
                    return Err(Error::Format(format!(
                        "manifest lists missing file {}",
                        p.display()
                    )));
                }
            }
            entries.push(entry);
        }
        Ok(DatasetManifest {
            split,
            root: root.to_path_buf(),
            entries,
        })
    }
}
