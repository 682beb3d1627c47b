//! Label volumes, the ACSV on-disk volume container, and case manifests.
//!
//! ACSV layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "ACSV"
//! version u32      currently 1
//! dtype   u32      0 = f32, 1 = u8 labels
//! rank    u32
//! extents rank x u64
//! spacing rank x f32   millimeters per voxel along the axis
//! payload product(extents) x dtype size, raw little-endian
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"ACSV";
const VERSION: u32 = 1;

/// Segmentation labels over a (D, H, W) grid. Voxel values are restricted
/// to 0 (background), 1 (necrotic core), 2 (edema), 4 (enhancing tumor).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub voxels: Vec<u8>,
    pub spacing: [f32; 3],
}

pub const VALID_LABELS: [u8; 4] = [0, 1, 2, 4];

impl LabelVolume {
    pub fn new(dims: [usize; 3], voxels: Vec<u8>, spacing: [f32; 3]) -> Result<LabelVolume> {
        let n: usize = dims.iter().product();
        if n == 0 {
            return Err(Error::shape(format!("label volume: zero-extent dims {dims:?}")));
        }
        if voxels.len() != n {
            return Err(Error::shape(format!(
                "label volume: dims {dims:?} need {n} voxels, got {}",
                voxels.len()
            )));
        }
        if let Some(bad) = voxels.iter().find(|v| !VALID_LABELS.contains(v)) {
            return Err(Error::data(format!(
                "label volume: label {bad} outside {{0, 1, 2, 4}}"
            )));
        }
        Ok(LabelVolume { dims, voxels, spacing })
    }

    pub fn zeros(dims: [usize; 3]) -> LabelVolume {
        LabelVolume {
            dims,
            voxels: vec![0; dims.iter().product()],
            spacing: [1.0; 3],
        }
    }

    pub fn numel(&self) -> usize {
        self.voxels.len()
    }

    /// Voxel count per label value, indexed by the label itself.
    pub fn label_counts(&self) -> [usize; 5] {
        let mut counts = [0usize; 5];
        for &v in &self.voxels {
            counts[v as usize] += 1;
        }
        counts
    }
}

fn read_exact(r: &mut impl std::io::Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| {
        Error::format(format!("{}: truncated while reading {what}", path.display()))
    })
}

fn read_u32(r: &mut impl std::io::Read, path: &Path, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path, what)?;
    Ok(u32::from_le_bytes(b))
}

struct Header {
    dtype: u32,
    extents: Vec<usize>,
    spacing: Vec<f32>,
}

fn read_header(r: &mut impl std::io::Read, path: &Path) -> Result<Header> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, path, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(format!(
            "{}: not an ACSV volume (magic {magic:?})",
            path.display()
        )));
    }
    let version = read_u32(r, path, "version")?;
    if version != VERSION {
        return Err(Error::format(format!(
            "{}: unsupported ACSV version {version}",
            path.display()
        )));
    }
    let dtype = read_u32(r, path, "dtype")?;
    if dtype > 1 {
        return Err(Error::format(format!("{}: unknown dtype code {dtype}", path.display())));
    }
    let rank = read_u32(r, path, "rank")? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::format(format!("{}: implausible rank {rank}", path.display())));
    }
    let mut extents = Vec::with_capacity(rank);
    for i in 0..rank {
        let mut b = [0u8; 8];
        read_exact(r, &mut b, path, "extents")?;
        let e = u64::from_le_bytes(b);
        if e == 0 {
            return Err(Error::format(format!("{}: zero extent on axis {i}", path.display())));
        }
        extents.push(e as usize);
    }
    let mut spacing = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        read_exact(r, &mut b, path, "spacing")?;
        spacing.push(f32::from_le_bytes(b));
    }
    Ok(Header { dtype, extents, spacing })
}

fn write_header(w: &mut impl std::io::Write, dtype: u32, extents: &[usize], spacing: &[f32]) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&dtype.to_le_bytes())?;
    w.write_all(&(extents.len() as u32).to_le_bytes())?;
    for &e in extents {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &s in spacing {
        w.write_all(&s.to_le_bytes())?;
    }
    Ok(())
}

/// Writes a real-valued tensor as an ACSV file. `spacing` must give one
/// value per axis.
pub fn write_volume(path: &Path, t: &Tensor, spacing: &[f32]) -> Result<()> {
    if spacing.len() != t.rank() {
        return Err(Error::config(format!(
            "write_volume: {} spacing values for rank {}",
            spacing.len(),
            t.rank()
        )));
    }
    let mut buf = Vec::with_capacity(32 + t.numel() * 4);
    write_header(&mut buf, 0, t.shape(), spacing).expect("vec write");
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(format!("{}: {e}", path.display())))
}

/// Reads a real-valued ACSV file back as (tensor, spacing).
pub fn read_volume(path: &Path) -> Result<(Tensor, Vec<f32>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
    let mut r = std::io::BufReader::new(file);
    let h = read_header(&mut r, path)?;
    if h.dtype != 0 {
        return Err(Error::format(format!(
            "{}: expected real32 volume, found dtype {}",
            path.display(),
            h.dtype
        )));
    }
    let n: usize = h.extents.iter().product();
    let mut payload = vec![0u8; n * 4];
    read_exact(&mut r, &mut payload, path, "payload")?;
    expect_eof(&mut r, path)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((Tensor::new(&h.extents, data)?, h.spacing))
}

/// Writes a label volume as an ACSV file (dtype u8, rank 3).
pub fn write_labels(path: &Path, v: &LabelVolume) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + v.numel());
    write_header(&mut buf, 1, &v.dims, &v.spacing).expect("vec write");
    buf.extend_from_slice(&v.voxels);
    fs::write(path, buf).map_err(|e| Error::io(format!("{}: {e}", path.display())))
}

/// Reads a label ACSV file; the payload is validated against the label set.
pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    let file = fs::File::open(path).map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
    let mut r = std::io::BufReader::new(file);
    let h = read_header(&mut r, path)?;
    if h.dtype != 1 {
        return Err(Error::format(format!(
            "{}: expected label volume, found dtype {}",
            path.display(),
            h.dtype
        )));
    }
    if h.extents.len() != 3 {
        return Err(Error::format(format!(
            "{}: label volume must be rank 3, got rank {}",
            path.display(),
            h.extents.len()
        )));
    }
    let n: usize = h.extents.iter().product();
    let mut voxels = vec![0u8; n];
    read_exact(&mut r, &mut voxels, path, "payload")?;
    expect_eof(&mut r, path)?;
    LabelVolume::new(
        [h.extents[0], h.extents[1], h.extents[2]],
        voxels,
        [h.spacing[0], h.spacing[1], h.spacing[2]],
    )
    .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

fn expect_eof(r: &mut impl std::io::Read, path: &Path) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(()),
        Ok(_) => Err(Error::format(format!(
            "{}: trailing bytes after declared payload",
            path.display()
        ))),
        Err(e) => Err(Error::io(format!("{}: {e}", path.display()))),
    }
}

/// Glioma grade of a training case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grade {
    #[serde(rename = "HGG")]
    Hgg,
    #[serde(rename = "LGG")]
    Lgg,
}

/// One case: the four MR modality volume paths (fixed channel order T1,
/// T1Gd, T2, FLAIR), plus optional labels and grade. Paths are relative to
/// the manifest file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseManifest {
    pub id: String,
    pub t1: PathBuf,
    pub t1gd: PathBuf,
    pub t2: PathBuf,
    pub flair: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grade: Option<Grade>,
}

/// A case loaded into memory: modalities stacked channel-first.
#[derive(Debug, Clone)]
pub struct LoadedCase {
    pub id: String,
    /// Shape [4, D, H, W].
    pub input: Tensor,
    pub labels: Option<LabelVolume>,
    pub grade: Option<Grade>,
    pub spacing: [f32; 3],
}

impl CaseManifest {
    pub fn load(path: &Path) -> Result<CaseManifest> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::format(format!("case manifest: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(format!("{}: {e}", path.display())))
    }

    pub fn modality_paths(&self) -> [&PathBuf; 4] {
        [&self.t1, &self.t1gd, &self.t2, &self.flair]
    }

    /// Reads every volume the manifest lists, checks that extents and
    /// spacing agree across them, and stacks the modalities into one
    /// channel-first tensor.
    pub fn load_case(&self, base: &Path) -> Result<LoadedCase> {
        let mut dims: Option<Vec<usize>> = None;
        let mut spacing: Option<Vec<f32>> = None;
        let mut stacked: Vec<f32> = Vec::new();
        for rel in self.modality_paths() {
            let (t, sp) = read_volume(&base.join(rel))?;
            if t.rank() != 3 {
                return Err(Error::data(format!(
                    "case {}: modality volume {} has rank {}, expected 3",
                    self.id,
                    rel.display(),
                    t.rank()
                )));
            }
            match (&dims, &spacing) {
                (None, _) => {
                    dims = Some(t.shape().to_vec());
                    spacing = Some(sp);
                }
                (Some(d), Some(s)) => {
                    if t.shape() != &d[..] || sp != *s {
                        return Err(Error::data(format!(
                            "case {}: volume {} disagrees on extents or spacing",
                            self.id,
                            rel.display()
                        )));
                    }
                }
                _ => unreachable!(),
            }
            stacked.extend_from_slice(t.data());
        }
        let d = dims.expect("four modalities read");
        let s = spacing.expect("four modalities read");
        let labels = match &self.labels {
            Some(rel) => {
                let lv = read_labels(&base.join(rel))?;
                if lv.dims != [d[0], d[1], d[2]] || lv.spacing != [s[0], s[1], s[2]] {
                    return Err(Error::data(format!(
                        "case {}: labels disagree with modalities on extents or spacing",
                        self.id
                    )));
                }
                Some(lv)
            }
            None => None,
        };
        Ok(LoadedCase {
            id: self.id.clone(),
            input: Tensor::new(&[4, d[0], d[1], d[2]], stacked)?,
            labels,
            grade: self.grade,
            spacing: [s[0], s[1], s[2]],
        })
    }
}

/// Reads `<dir>/<case>/manifest.toml` for every direct subdirectory,
/// sorted by case id so downstream iteration order is reproducible.
pub fn scan_dataset(dir: &Path) -> Result<Vec<(PathBuf, CaseManifest)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("{}: {e}", dir.display())))?;
    let mut cases = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(format!("{}: {e}", dir.display())))?;
        let path = entry.path();
        if path.is_dir() && path.join("manifest.toml").is_file() {
            let m = CaseManifest::load(&path.join("manifest.toml"))?;
            cases.push((path, m));
        }
    }
    if cases.is_empty() {
        return Err(Error::data(format!(
            "{}: no case directories with manifest.toml found",
            dir.display()
        )));
    }
    cases.sort_by(|a, b| a.1.id.cmp(&b.1.id));
    Ok(cases)
}
