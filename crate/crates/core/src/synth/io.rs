//! Dataset directory layout and the small image formats it uses.
//!
//! ```text
//! root/manifest.json
//! root/<split>/<id>/frame_-1.ppm frame_0.ppm frame_1.ppm   16-bit binary PPM
//! root/<split>/<id>/depth_0.pfm                              optional
//! root/<split>/<id>/poses.json                               optional
//! root/<split>/<id>/intrinsics.json                          or one at root
//! root/<split>/<id>/object_mask_0.pgm                        optional
//! ```
//!
//! Without a manifest every subdirectory of `root` holding `frame_0.ppm`
//! is one triplet and ground truth is optional.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{synthesize, triplet_seed, FrameTriplet, SceneConfig};
use crate::diff::Array;
use crate::error::{Error, Result};
use crate::geometry::{pose_to_transform, Intrinsics, Pose6DoF};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const FRAME_NAMES: [&str; 3] = ["frame_-1.ppm", "frame_0.ppm", "frame_1.ppm"];
/// Files with this name are ignored by [`dataset_hash`].
pub const RUN_MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub id: String,
    pub seed: u64,
    pub moving_object: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub master_seed: u64,
    pub config: SceneConfig,
    pub config_hash: String,
    pub splits: BTreeMap<String, Vec<TripletRecord>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub axis_angle: [f64; 3],
    pub translation: [f64; 3],
    /// Row-major 4x4 rigid transform.
    pub matrix: [[f64; 4]; 4],
}

impl From<&Pose6DoF> for PoseRecord {
    fn from(p: &Pose6DoF) -> Self {
        PoseRecord {
            axis_angle: p.axis_angle,
            translation: p.translation,
            matrix: pose_to_transform(p).matrix,
        }
    }
}

/// Motions from the target frame to the previous and next frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosesFile {
    pub target_to_prev: PoseRecord,
    pub target_to_next: PoseRecord,
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    while *pos < bytes.len() {
        if bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else if bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Parse a binary PNM header; returns (width, height, maxval, data offset).
fn pnm_header(bytes: &[u8], magic: &str, path: &Path) -> Result<(usize, usize, u32, usize)> {
    let mut pos = 0;
    let bad = |m: &str| Error::format(path, m);
    if header_token(bytes, &mut pos).as_deref() != Some(magic) {
        return Err(bad(&format!("expected {magic} header")));
    }
    let mut num = || -> Result<u64> {
        header_token(bytes, &mut pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("malformed header"))
    };
    let (w, h, maxval) = (num()? as usize, num()? as usize, num()?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("invalid dimensions or maxval"));
    }
    // exactly one whitespace byte separates header and raster
    Ok((w, h, maxval as u32, pos + 1))
}

fn read_samples(bytes: &[u8], offset: usize, count: usize, maxval: u32, path: &Path) -> Result<Vec<f64>> {
    let wide = maxval > 255;
    let need = count * if wide { 2 } else { 1 };
    if bytes.len() < offset + need {
        return Err(Error::format(path, "truncated raster"));
    }
    let raw = &bytes[offset..offset + need];
    let m = maxval as f64;
    Ok(if wide {
        raw.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / m).collect()
    } else {
        raw.iter().map(|&b| b as f64 / m).collect()
    })
}

fn quantize16(v: f64) -> [u8; 2] {
    ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes()
}

/// Write a `[1, 3, H, W]` image in [0, 1] as a 16-bit binary PPM.
pub fn write_ppm(path: &Path, image: &Array) -> Result<()> {
    let (h, w) = match image.shape[..] {
        [1, 3, h, w] => (h, w),
        _ => return Err(Error::shape("write_ppm", &[&image.shape])),
    };
    let mut buf = format!("P6\n{w} {h}\n65535\n").into_bytes();
    for i in 0..h * w {
        for c in 0..3 {
            buf.extend_from_slice(&quantize16(image.data[c * h * w + i]));
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Read an 8- or 16-bit binary PPM into a `[1, 3, H, W]` array in [0, 1].
pub fn read_ppm(path: &Path) -> Result<Array> {
    let bytes = fs::read(path)?;
    let (w, h, maxval, off) = pnm_header(&bytes, "P6", path)?;
    let inter = read_samples(&bytes, off, 3 * w * h, maxval, path)?;
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = inter[3 * i + c];
        }
    }
    Array::new(&[1, 3, h, w], data)
}

/// Write a `[1, 1, H, W]` map in [0, 1] as a 16-bit binary PGM.
pub fn write_pgm(path: &Path, map: &Array) -> Result<()> {
    let (h, w) = match map.shape[..] {
        [1, 1, h, w] => (h, w),
        _ => return Err(Error::shape("write_pgm", &[&map.shape])),
    };
    let mut buf = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in &map.data {
        buf.extend_from_slice(&quantize16(v));
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Array> {
    let bytes = fs::read(path)?;
    let (w, h, maxval, off) = pnm_header(&bytes, "P5", path)?;
    let data = read_samples(&bytes, off, w * h, maxval, path)?;
    Array::new(&[1, 1, h, w], data)
}

/// Write a `[1, 1, H, W]` map as a little-endian greyscale PFM
/// (rows stored bottom to top).
pub fn write_pfm(path: &Path, map: &Array) -> Result<()> {
    let (h, w) = match map.shape[..] {
        [1, 1, h, w] => (h, w),
        _ => return Err(Error::shape("write_pfm", &[&map.shape])),
    };
    let mut buf = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            buf.extend_from_slice(&(map.data[y * w + x] as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<Array> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let bad = |m: &str| Error::format(path, m);
    if header_token(&bytes, &mut pos).as_deref() != Some("Pf") {
        return Err(bad("expected Pf header"));
    }
    let w: usize = header_token(&bytes, &mut pos).and_then(|t| t.parse().ok()).ok_or_else(|| bad("bad width"))?;
    let h: usize = header_token(&bytes, &mut pos).and_then(|t| t.parse().ok()).ok_or_else(|| bad("bad height"))?;
    let scale: f64 = header_token(&bytes, &mut pos).and_then(|t| t.parse().ok()).ok_or_else(|| bad("bad scale"))?;
    let off = pos + 1;
    if bytes.len() < off + 4 * w * h {
        return Err(bad("truncated raster"));
    }
    let mut data = vec![0.0; w * h];
    for (i, c) in bytes[off..off + 4 * w * h].chunks_exact(4).enumerate() {
        let arr = [c[0], c[1], c[2], c[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(arr) } else { f32::from_be_bytes(arr) };
        let (row, col) = (h - 1 - i / w, i % w);
        data[row * w + col] = v as f64;
    }
    Array::new(&[1, 1, h, w], data)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn write_triplet(dir: &Path, t: &FrameTriplet) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, f) in FRAME_NAMES.iter().zip(&t.frames) {
        write_ppm(&dir.join(name), f)?;
    }
    if let Some(d) = &t.depth {
        write_pfm(&dir.join("depth_0.pfm"), d)?;
    }
    if let Some([prev, next]) = &t.poses {
        write_json(
            &dir.join("poses.json"),
            &PosesFile {
                target_to_prev: prev.into(),
                target_to_next: next.into(),
            },
        )?;
    }
    write_json(&dir.join("intrinsics.json"), &t.intrinsics)?;
    if let Some(m) = &t.object_mask {
        write_pgm(&dir.join("object_mask_0.pgm"), m)?;
    }
    Ok(())
}

fn read_triplet(dir: &Path, shared_k: Option<&Intrinsics>) -> Result<FrameTriplet> {
    let frames = [
        read_ppm(&dir.join(FRAME_NAMES[0]))?,
        read_ppm(&dir.join(FRAME_NAMES[1]))?,
        read_ppm(&dir.join(FRAME_NAMES[2]))?,
    ];
    if frames[0].shape != frames[1].shape || frames[1].shape != frames[2].shape {
        return Err(Error::format(dir, "frames differ in size"));
    }
    let (h, w) = (frames[1].shape[2], frames[1].shape[3]);
    let k_path = dir.join("intrinsics.json");
    let intrinsics: Intrinsics = if k_path.exists() {
        read_json(&k_path)?
    } else {
        *shared_k.ok_or_else(|| Error::format(dir, "no intrinsics.json for triplet or dataset"))?
    };
    intrinsics.validate()?;
    if intrinsics.width != w || intrinsics.height != h {
        return Err(Error::format(dir, "intrinsics resolution differs from frames"));
    }
    let depth_path = dir.join("depth_0.pfm");
    let depth = depth_path.exists().then(|| read_pfm(&depth_path)).transpose()?;
    if let Some(d) = &depth {
        if d.shape != [1, 1, h, w] {
            return Err(Error::format(&depth_path, "depth size differs from frames"));
        }
    }
    let poses_path = dir.join("poses.json");
    let poses = if poses_path.exists() {
        let p: PosesFile = read_json(&poses_path)?;
        Some([
            Pose6DoF::new(p.target_to_prev.axis_angle, p.target_to_prev.translation)?,
            Pose6DoF::new(p.target_to_next.axis_angle, p.target_to_next.translation)?,
        ])
    } else {
        None
    };
    let mask_path = dir.join("object_mask_0.pgm");
    let object_mask = mask_path
        .exists()
        .then(|| read_pgm(&mask_path).map(|m| Array { data: m.data.iter().map(|&v| v.round()).collect(), ..m }))
        .transpose()?;
    Ok(FrameTriplet {
        frames,
        depth,
        poses,
        intrinsics,
        object_mask,
    })
}

/// Loaded triplets of one split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Option<DatasetManifest>,
    pub ids: Vec<String>,
    pub triplets: Vec<FrameTriplet>,
}

impl Dataset {
    /// Render and write a dataset with `n_train` and `n_eval` triplets.
    pub fn generate(root: &Path, master_seed: u64, config: &SceneConfig, n_train: usize, n_eval: usize) -> Result<DatasetManifest> {
        config.validate()?;
        fs::create_dir_all(root)?;
        let mut splits = BTreeMap::new();
        for (split, n) in [(Split::Train, n_train), (Split::Eval, n_eval)] {
            let mut records = Vec::with_capacity(n);
            for i in 0..n {
                let id = format!("{i:06}");
                let mut seed = triplet_seed(master_seed, split.name(), i);
                let mut attempt = 0;
                let triplet = loop {
                    match synthesize(seed, config) {
                        Ok(t) => break t,
                        Err(Error::Precondition(_)) if attempt < 16 => {
                            attempt += 1;
                            seed = triplet_seed(seed, "retry", attempt);
                        }
                        Err(e) => return Err(e),
                    }
                };
                write_triplet(&root.join(split.name()).join(&id), &triplet)?;
                records.push(TripletRecord {
                    id,
                    seed,
                    moving_object: triplet.object_mask.is_some(),
                });
            }
            splits.insert(split.name().to_string(), records);
        }
        let manifest = DatasetManifest {
            format_version: DATASET_FORMAT_VERSION,
            master_seed,
            config: config.clone(),
            config_hash: config.hash(),
            splits,
        };
        write_json(&root.join(MANIFEST), &manifest)?;
        Ok(manifest)
    }

    /// Load one split. Without a manifest the split is ignored and every
    /// triplet directory under `root` is loaded.
    pub fn load(root: &Path, split: Split) -> Result<Dataset> {
        if !root.is_dir() {
            return Err(Error::Precondition(format!("dataset directory not found: {}", root.display())));
        }
        let manifest_path = root.join(MANIFEST);
        let shared_k_path = root.join("intrinsics.json");
        let shared_k: Option<Intrinsics> = shared_k_path.exists().then(|| read_json(&shared_k_path)).transpose()?;
        let (manifest, dirs): (Option<DatasetManifest>, Vec<(String, PathBuf)>) = if manifest_path.exists() {
            let m: DatasetManifest = read_json(&manifest_path)?;
            if m.format_version != DATASET_FORMAT_VERSION {
                return Err(Error::format(&manifest_path, format!("unsupported format_version {}", m.format_version)));
            }
            let records = m.splits.get(split.name()).cloned().unwrap_or_default();
            let dirs = records
                .iter()
                .map(|r| (r.id.clone(), root.join(split.name()).join(&r.id)))
                .collect();
            (Some(m), dirs)
        } else {
            let mut dirs: Vec<(String, PathBuf)> = fs::read_dir(root)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.join(FRAME_NAMES[1]).exists())
                .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p))
                .collect();
            dirs.sort();
            (None, dirs)
        };
        let mut ids = Vec::with_capacity(dirs.len());
        let mut triplets = Vec::with_capacity(dirs.len());
        for (id, dir) in dirs {
            triplets.push(read_triplet(&dir, shared_k.as_ref())?);
            ids.push(id);
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            ids,
            triplets,
        })
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn has_ground_truth(&self) -> bool {
        self.triplets.iter().all(|t| t.depth.is_some())
    }
}

fn collect_files(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(&p, base, out)?;
        } else if p.file_name().is_some_and(|n| n != RUN_MANIFEST_NAME) {
            out.push(p.strip_prefix(base).expect("under base").to_path_buf());
        }
    }
    Ok(())
}

/// SHA-256 over every file below `root` (relative path and contents, in
/// sorted order), skipping run manifests.
pub fn dataset_hash(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0u8]);
        h.update(fs::read(root.join(&rel))?);
    }
    Ok(format!("{:x}", h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| (i as f64 * 0.37).fract()).collect();
        let a = Array::new(&[1, 3, 4, 5], data).unwrap();
        let p = dir.path().join("x.ppm");
        write_ppm(&p, &a).unwrap();
        let b = read_ppm(&p).unwrap();
        assert_eq!(b.shape, a.shape);
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() <= 0.5 / 65535.0 + 1e-12));
    }

    #[test]
    fn pfm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = Array::new(&[1, 1, 3, 4], (0..12).map(|i| 1.0 + i as f64 * 0.25).collect()).unwrap();
        let p = dir.path().join("d.pfm");
        write_pfm(&p, &a).unwrap();
        assert_eq!(read_pfm(&p).unwrap(), a);
    }

    #[test]
    fn eight_bit_ppm_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 51, 0, 255, 102]);
        fs::write(&p, bytes).unwrap();
        let a = read_ppm(&p).unwrap();
        assert_eq!(a.data, vec![1.0, 0.0, 0.0, 1.0, 0.2, 0.4]);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ppm");
        fs::write(&p, b"P6\n4 4\n65535\n\x00\x01").unwrap();
        assert!(matches!(read_ppm(&p), Err(Error::Format { .. })));
    }
}
