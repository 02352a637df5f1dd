//! Per-clip embedding files (`.cmta`) and dataset manifests.
//!
//! Binary layout, all integers and reals little-endian:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "CMTA"
//! 4       2           u16 version (= 1)
//! 6       4           u32 N   (frames)
//! 10      4           u32 d_v (visual width)
//! 14      4           u32 d_e (textual width)
//! 18      1           u8 label (0 = real, 1 = fake)
//! 19      4·N·d_v     visual embeddings, row-major f32
//! ...     4·N·d_e     textual embeddings, row-major f32
//! ```
//!
//! Manifests are UTF-8 CSV files with the header `path,label,subset`. Relative
//! paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CmtaError, LoadError, Result};
use crate::parallel::{self, Execution};
use crate::tensor::Tensor;

pub const CLIP_MAGIC: [u8; 4] = *b"CMTA";
pub const CLIP_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 19;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Real = 0,
    Fake = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Real),
            1 => Ok(Label::Fake),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

/// Paired per-frame visual and textual embeddings of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingClip {
    pub clip_id: String,
    /// `N × d_v`
    pub visual: Tensor<f32>,
    /// `N × d_e`
    pub textual: Tensor<f32>,
    pub label: Label,
}

impl EmbeddingClip {
    pub fn new(
        clip_id: impl Into<String>,
        visual: Tensor<f32>,
        textual: Tensor<f32>,
        label: Label,
    ) -> Result<Self> {
        if visual.shape().len() != 2 || textual.shape().len() != 2 {
            return Err(CmtaError::config("clip embeddings must be 2-D (frames × dim)"));
        }
        if visual.rows() != textual.rows() {
            return Err(CmtaError::config(format!(
                "visual has {} frames but textual has {}",
                visual.rows(),
                textual.rows()
            )));
        }
        Ok(EmbeddingClip {
            clip_id: clip_id.into(),
            visual,
            textual,
            label,
        })
    }

    pub fn frames(&self) -> usize {
        self.visual.rows()
    }

    pub fn visual_dim(&self) -> usize {
        self.visual.cols()
    }

    pub fn textual_dim(&self) -> usize {
        self.textual.cols()
    }

    /// Frames `[start, start + len)`, repeating the final frame past the end.
    pub fn window(&self, start: usize, len: usize) -> EmbeddingClip {
        let n = self.frames();
        let pick = |t: &Tensor<f32>| {
            let mut data = Vec::with_capacity(len * t.cols());
            for k in 0..len {
                data.extend_from_slice(t.row((start + k).min(n - 1)));
            }
            Tensor::new(vec![len, t.cols()], data).expect("valid window")
        };
        EmbeddingClip {
            clip_id: self.clip_id.clone(),
            visual: pick(&self.visual),
            textual: pick(&self.textual),
            label: self.label,
        }
    }

    /// Deterministic window used at evaluation: start `⌊(N − T)/2⌋`.
    pub fn center_clip(&self, len: usize) -> Result<EmbeddingClip> {
        if len == 0 {
            return Err(CmtaError::config("clip length must be positive"));
        }
        Ok(self.window(self.frames().saturating_sub(len) / 2, len))
    }
}

/// Random contiguous window of `len` frames, start uniform on `[0, N − len]`.
/// Clips shorter than `len` are right-padded with their final frame.
pub fn sample_clip<R: Rng + ?Sized>(clip: &EmbeddingClip, len: usize, rng: &mut R) -> Result<EmbeddingClip> {
    if len == 0 {
        return Err(CmtaError::config("clip length must be positive"));
    }
    let max_start = clip.frames().saturating_sub(len);
    let start = rng.random_range(0..=max_start);
    Ok(clip.window(start, len))
}

pub fn encode_clip(clip: &EmbeddingClip) -> Result<Vec<u8>> {
    for (i, v) in clip.visual.data().iter().chain(clip.textual.data()).enumerate() {
        if !v.is_finite() {
            return Err(CmtaError::Data(format!(
                "clip {}: non-finite value at index {i}",
                clip.clip_id
            )));
        }
    }
    let n = clip.frames();
    let mut buf = Vec::with_capacity(payload_len(n, clip.visual_dim(), clip.textual_dim()));
    buf.extend_from_slice(&CLIP_MAGIC);
    buf.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    for dim in [n, clip.visual_dim(), clip.textual_dim()] {
        let d = u32::try_from(dim).map_err(|_| CmtaError::config("extent exceeds u32"))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    buf.push(clip.label.as_u8());
    for v in clip.visual.data().iter().chain(clip.textual.data()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

/// Total file length for a clip with the given extents.
pub fn payload_len(frames: usize, d_v: usize, d_e: usize) -> usize {
    HEADER_LEN + 4 * frames * (d_v + d_e)
}

pub fn decode_clip(bytes: &[u8], clip_id: &str) -> std::result::Result<EmbeddingClip, LoadError> {
    if bytes.len() < 4 {
        return Err(LoadError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != CLIP_MAGIC {
        return Err(LoadError::BadMagic {
            expected: CLIP_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(LoadError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CLIP_VERSION {
        return Err(LoadError::VersionMismatch {
            expected: CLIP_VERSION,
            found: version,
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (n, d_v, d_e) = (u32_at(6), u32_at(10), u32_at(14));
    if n == 0 || d_v == 0 || d_e == 0 {
        return Err(LoadError::Header(format!(
            "extents must be positive (N={n}, d_v={d_v}, d_e={d_e})"
        )));
    }
    let label = Label::try_from(bytes[18]).map_err(LoadError::Header)?;
    let expected = payload_len(n, d_v, d_e);
    if bytes.len() < expected {
        return Err(LoadError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(LoadError::Header(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let mut values = Vec::with_capacity(n * (d_v + d_e));
    for (index, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(LoadError::NonFinite { index });
        }
        values.push(v);
    }
    let textual = values.split_off(n * d_v);
    Ok(EmbeddingClip {
        clip_id: clip_id.to_string(),
        visual: Tensor::new(vec![n, d_v], values).expect("checked extents"),
        textual: Tensor::new(vec![n, d_e], textual).expect("checked extents"),
        label,
    })
}

pub fn write_clip(clip: &EmbeddingClip, path: &Path) -> Result<()> {
    let bytes = encode_clip(clip)?;
    fs::write(path, bytes).map_err(|e| CmtaError::io(path, e))
}

/// Reads a clip; its id is the file stem.
pub fn read_clip(path: &Path) -> Result<EmbeddingClip> {
    let bytes = fs::read(path).map_err(|e| CmtaError::io(path, e))?;
    decode_clip(&bytes, &clip_id_for(path)).map_err(|source| CmtaError::Load {
        path: path.to_path_buf(),
        source,
    })
}

pub fn clip_id_for(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Label,
    pub subset: String,
}

impl ManifestEntry {
    pub fn clip_id(&self) -> String {
        clip_id_for(&self.path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub version: u32,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Manifest {
            entries,
            version: MANIFEST_VERSION,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    /// Writes the CSV. Paths are written as given.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["path", "label", "subset"]).map_err(|e| csv_io(path, e))?;
        for e in &self.entries {
            w.write_record([
                e.path.to_string_lossy().as_ref(),
                &e.label.as_u8().to_string(),
                &e.subset,
            ])
            .map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| CmtaError::io(path, e))
    }

    /// Reads every referenced clip, preserving manifest order.
    pub fn load_clips(&self, exec: Execution) -> Result<Vec<EmbeddingClip>> {
        parallel::map(&self.entries, exec, |e| {
            let clip = read_clip(&e.path)?;
            if clip.label != e.label {
                return Err(CmtaError::Data(format!(
                    "{}: manifest label {} disagrees with file label {}",
                    e.path.display(),
                    e.label.as_u8(),
                    clip.label.as_u8()
                )));
            }
            Ok(clip)
        })
        .into_iter()
        .collect()
    }
}

fn csv_io(path: &Path, e: csv::Error) -> CmtaError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CmtaError::io(path, io),
        other => CmtaError::Data(format!("{}: {other:?}", path.display())),
    }
}

#[derive(Deserialize)]
struct RawRow {
    path: String,
    label: u8,
    subset: String,
}

/// Parses a manifest CSV, resolves relative paths, and checks that every
/// file exists and that clip ids are unique.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| CmtaError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| CmtaError::Data(format!("{}: {e}", path.display())))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "label", "subset"] {
        return Err(CmtaError::Data(format!(
            "{}: expected header `path,label,subset`, found `{}`",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (line, row) in reader.deserialize::<RawRow>().enumerate() {
        let row = row.map_err(|e| CmtaError::Data(format!("{}: row {}: {e}", path.display(), line + 2)))?;
        let label = Label::try_from(row.label)
            .map_err(|m| CmtaError::Data(format!("{}: row {}: {m}", path.display(), line + 2)))?;
        let mut file = PathBuf::from(&row.path);
        if file.is_relative() {
            file = base.join(file);
        }
        if !file.is_file() {
            return Err(CmtaError::io(
                &file,
                std::io::Error::new(std::io::ErrorKind::NotFound, "referenced clip file not found"),
            ));
        }
        let entry = ManifestEntry {
            path: file,
            label,
            subset: row.subset,
        };
        if !seen.insert(entry.clip_id()) {
            return Err(CmtaError::Data(format!(
                "{}: duplicate clip id `{}`",
                path.display(),
                entry.clip_id()
            )));
        }
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(CmtaError::Data(format!("{}: manifest is empty", path.display())));
    }
    Ok(Manifest::new(entries))
}

/// Partitions a manifest into `(train, val)`; `round(n · val_fraction)` entries
/// go to validation (at least one, at most `n − 1`). Both halves keep
/// manifest order.
pub fn split<R: Rng + ?Sized>(manifest: &Manifest, val_fraction: f64, rng: &mut R) -> Result<(Manifest, Manifest)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(CmtaError::config(format!(
            "val_fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let n = manifest.len();
    if n < 2 {
        return Err(CmtaError::Data("need at least two entries to split".into()));
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (e, v) in manifest.entries.iter().zip(is_val) {
        if v {
            val.push(e.clone());
        } else {
            train.push(e.clone());
        }
    }
    Ok((Manifest::new(train), Manifest::new(val)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clip(n: usize, dv: usize, de: usize) -> EmbeddingClip {
        let v = (0..n * dv).map(|i| i as f32 * 0.25 - 1.0).collect();
        let e = (0..n * de).map(|i| (i as f32).sin()).collect();
        EmbeddingClip::new(
            "c",
            Tensor::new(vec![n, dv], v).unwrap(),
            Tensor::new(vec![n, de], e).unwrap(),
            Label::Fake,
        )
        .unwrap()
    }

    fn frame_marks(c: &EmbeddingClip) -> Vec<f32> {
        (0..c.frames()).map(|t| c.visual.at(t, 0)).collect()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = clip(1, 2, 2);
        let bytes = encode_clip(&c).unwrap();
        let back = decode_clip(&bytes, "c").unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_clip(&back).unwrap(), bytes);
    }

    #[test]
    fn payload_length_for_full_size_clip() {
        let c = clip(8, 512, 512);
        let bytes = encode_clip(&c).unwrap();
        assert_eq!(bytes.len(), 2 * 8 * 512 * 4 + HEADER_LEN);
        assert_eq!(bytes.len(), payload_len(8, 512, 512));
    }

    #[test]
    fn distinct_load_errors() {
        let good = encode_clip(&clip(2, 3, 3)).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_clip(&bad, "c"), Err(LoadError::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(
            decode_clip(&bad, "c"),
            Err(LoadError::VersionMismatch { found: 2, .. })
        ));

        let bad = &good[..good.len() - 1];
        assert!(matches!(decode_clip(bad, "c"), Err(LoadError::Truncated { .. })));

        let mut bad = good.clone();
        bad[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_clip(&bad, "c"), Err(LoadError::NonFinite { index: 0 })));

        let mut bad = good;
        bad[18] = 7;
        assert!(matches!(decode_clip(&bad, "c"), Err(LoadError::Header(_))));
    }

    #[test]
    fn write_rejects_non_finite() {
        let mut c = clip(1, 2, 2);
        c.textual.data_mut()[1] = f32::INFINITY;
        assert!(encode_clip(&c).is_err());
    }

    #[test]
    fn sampling_whole_clip_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = clip(8, 1, 1);
        for _ in 0..10 {
            assert_eq!(sample_clip(&c, 8, &mut rng).unwrap(), c);
        }
        let short = clip(3, 1, 1);
        let s = sample_clip(&short, 8, &mut rng).unwrap();
        let m = frame_marks(&short);
        assert_eq!(frame_marks(&s), vec![m[0], m[1], m[2], m[2], m[2], m[2], m[2], m[2]]);
        assert!(sample_clip(&c, 0, &mut rng).is_err());
    }

    #[test]
    fn sampled_start_is_uniform() {
        // N=10, T=8 admits starts {0,1,2}; chi-square with 2 dof, p=0.001 → 13.82.
        let c = clip(10, 1, 1);
        let marks = frame_marks(&c);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 3];
        let draws = 30_000;
        for _ in 0..draws {
            let s = sample_clip(&c, 8, &mut rng).unwrap();
            let start = marks.iter().position(|&m| m == s.visual.at(0, 0)).unwrap();
            let got = frame_marks(&s);
            assert_eq!(got, marks[start..start + 8].to_vec());
            counts[start] += 1;
        }
        let expected = draws as f64 / 3.0;
        let chi2: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 13.82, "chi2={chi2} counts={counts:?}");
    }

    #[test]
    fn center_clip_start() {
        let c = clip(13, 1, 1);
        let m = frame_marks(&c);
        let w = c.center_clip(8).unwrap();
        assert_eq!(frame_marks(&w), m[2..10].to_vec());
    }

    fn manifest(n: usize) -> Manifest {
        Manifest::new(
            (0..n)
                .map(|i| ManifestEntry {
                    path: PathBuf::from(format!("c{i}.cmta")),
                    label: if i % 2 == 0 { Label::Real } else { Label::Fake },
                    subset: "s".into(),
                })
                .collect(),
        )
    }

    #[test]
    fn split_sizes_and_determinism() {
        let m = manifest(10);
        let (tr, va) = split(&m, 0.1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!((tr.len(), va.len()), (9, 1));
        let again = split(&m, 0.1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!((tr.clone(), va.clone()), again);

        let (tr, va) = split(&manifest(4), 0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((tr.len(), va.len()), (2, 2));

        assert!(split(&m, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(split(&m, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn manifest_load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("m.csv");

        fs::write(&mpath, "path,label,subset\n").unwrap();
        assert!(matches!(load_manifest(&mpath), Err(CmtaError::Data(_))));

        fs::write(&mpath, "path,label,subset\nmissing.cmta,0,a\n").unwrap();
        match load_manifest(&mpath) {
            Err(CmtaError::Io { path, .. }) => assert!(path.ends_with("missing.cmta")),
            other => panic!("unexpected {other:?}"),
        }

        write_clip(&clip(1, 2, 2), &dir.path().join("a.cmta")).unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        write_clip(&clip(1, 2, 2), &dir.path().join("sub/a.cmta")).unwrap();
        fs::write(&mpath, "path,label,subset\na.cmta,1,x\nsub/a.cmta,1,x\n").unwrap();
        assert!(matches!(load_manifest(&mpath), Err(CmtaError::Data(m)) if m.contains("duplicate")));

        fs::write(&mpath, "path,label,subset\na.cmta,1,x\n").unwrap();
        let m = load_manifest(&mpath).unwrap();
        assert_eq!(m.entries[0].path, dir.path().join("a.cmta"));
        let clips = m.load_clips(Execution::Sequential).unwrap();
        assert_eq!(clips[0].clip_id, "a");
    }
}
