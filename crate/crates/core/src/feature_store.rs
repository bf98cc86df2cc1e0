//! Feature trajectories, datasets of them, and the FTRJ exchange format.
//!
//! FTRJ layout (little-endian):
//!
//! | offset | size        | field                                          |
//! |--------|-------------|------------------------------------------------|
//! | 0      | 4           | magic `FTRJ`                                   |
//! | 4      | 4           | u32 version (= 1)                              |
//! | 8      | 4           | u32 sample count `n`                           |
//! | 12     | 4           | u32 layer count `L`                            |
//! | 16     | 4           | u32 feature dim `d`                            |
//! | 20     | 1           | u8 flags: bit0 labels, bit1 poison mask        |
//! | 21     | 3           | reserved, zero                                 |
//! | 24     | `4·n·L·d`   | f32 payload, sample-major, layer, dim-minor    |
//! | …      | `4·n`       | u32 labels (if bit0)                           |
//! | …      | `n`         | u8 mask, 0/1 (if bit1)                         |

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::seed;

pub const MAGIC: [u8; 4] = *b"FTRJ";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

const FLAG_LABELS: u8 = 0b01;
const FLAG_MASK: u8 = 0b10;

/// Per-layer feature vectors of one input, an `L × d` matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrajectory {
    layers: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureTrajectory {
    pub fn new(layers: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            layers >= 2,
            Error::InvalidArgument(format!("trajectory needs at least 2 layers, got {layers}"))
        );
        ensure!(
            dim >= 1,
            Error::InvalidArgument("trajectory feature dim must be at least 1".into())
        );
        ensure!(
            data.len() == layers * dim,
            Error::InconsistentDimensions(format!(
                "trajectory data has {} values, expected {layers}×{dim}",
                data.len()
            ))
        );
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                sample: 0,
                layer: pos / dim,
                dim: pos % dim,
            });
        }
        Ok(Self { layers, dim, data })
    }

    /// Builds a trajectory from per-layer f64 rows, rounding to f32.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        ensure!(
            rows.iter().all(|r| r.len() == dim),
            Error::InconsistentDimensions("trajectory rows differ in length".into())
        );
        let data = rows.iter().flatten().map(|&v| v as f32).collect();
        Self::new(rows.len(), dim, data)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layer(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Layer `i` widened to f64.
    pub fn layer_f64(&self, i: usize) -> Vec<f64> {
        self.layer(i).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// An ordered collection of trajectories with optional labels and poison mask.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryDataset {
    pub samples: Vec<FeatureTrajectory>,
    pub labels: Option<Vec<u32>>,
    pub poison_mask: Option<Vec<bool>>,
}

impl TrajectoryDataset {
    pub fn new(
        samples: Vec<FeatureTrajectory>,
        labels: Option<Vec<u32>>,
        poison_mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        let ds = Self {
            samples,
            labels,
            poison_mask,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(L, d)` shared by every sample, `None` when empty.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.layers(), s.dim()))
    }

    /// Number of classes implied by the labels (max label + 1).
    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map(|&m| m as usize + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((l, d)) = self.shape() {
            for (i, s) in self.samples.iter().enumerate() {
                ensure!(
                    s.layers() == l && s.dim() == d,
                    Error::InconsistentDimensions(format!(
                        "sample {i} is {}×{}, expected {l}×{d}",
                        s.layers(),
                        s.dim()
                    ))
                );
            }
        }
        if let Some(labels) = &self.labels {
            ensure!(
                labels.len() == self.len(),
                Error::InconsistentDimensions(format!(
                    "{} labels for {} samples",
                    labels.len(),
                    self.len()
                ))
            );
        }
        if let Some(mask) = &self.poison_mask {
            ensure!(
                mask.len() == self.len(),
                Error::InconsistentDimensions(format!(
                    "{} mask entries for {} samples",
                    mask.len(),
                    self.len()
                ))
            );
        }
        Ok(())
    }

    /// Samples at `indices`, carrying labels and mask along.
    pub fn select(&self, indices: &[usize]) -> TrajectoryDataset {
        TrajectoryDataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            poison_mask: self
                .poison_mask
                .as_ref()
                .map(|m| indices.iter().map(|&i| m[i]).collect()),
        }
    }

    /// Layer `layer` of every sample as f64 rows.
    pub fn layer_matrix(&self, layer: usize) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.layer_f64(layer)).collect()
    }

    /// Appends `other`; both must agree on which optional columns exist.
    pub fn concat(&self, other: &TrajectoryDataset) -> Result<TrajectoryDataset> {
        fn join<T: Clone>(a: &Option<Vec<T>>, b: &Option<Vec<T>>, what: &str) -> Result<Option<Vec<T>>> {
            match (a, b) {
                (Some(x), Some(y)) => Ok(Some(x.iter().chain(y).cloned().collect())),
                (None, None) => Ok(None),
                _ => Err(Error::InconsistentDimensions(format!(
                    "cannot concatenate datasets where only one has {what}"
                ))),
            }
        }
        let out = TrajectoryDataset {
            samples: self.samples.iter().chain(&other.samples).cloned().collect(),
            labels: join(&self.labels, &other.labels, "labels")?,
            poison_mask: join(&self.poison_mask, &other.poison_mask, "a poison mask")?,
        };
        out.validate()?;
        Ok(out)
    }

    /// Serializes to FTRJ bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        ensure!(
            !self.is_empty(),
            Error::InvalidArgument("cannot write an empty dataset".into())
        );
        self.validate()?;
        let (l, d) = self.shape().expect("non-empty");
        let n = self.len();
        let mut flags = 0u8;
        if self.labels.is_some() {
            flags |= FLAG_LABELS;
        }
        if self.poison_mask.is_some() {
            flags |= FLAG_MASK;
        }
        let mut out = Vec::with_capacity(payload_len(n, l, d, flags));
        out.extend_from_slice(&MAGIC);
        for v in [VERSION, to_u32(n)?, to_u32(l)?, to_u32(d)?] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&[flags, 0, 0, 0]);
        for s in &self.samples {
            for v in s.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(labels) = &self.labels {
            for v in labels {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(mask) = &self.poison_mask {
            out.extend(mask.iter().map(|&m| u8::from(m)));
        }
        Ok(out)
    }

    /// Parses FTRJ bytes, validating magic, version, length and finiteness.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(
            bytes.len() >= HEADER_LEN,
            Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len()
            }
        );
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        ensure!(magic == MAGIC, Error::BadMagic(magic));
        let word = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
        let version = word(4);
        ensure!(version == VERSION, Error::BadVersion(version));
        let (n, l, d) = (word(8) as usize, word(12) as usize, word(16) as usize);
        let flags = bytes[20];
        ensure!(
            flags & !(FLAG_LABELS | FLAG_MASK) == 0 && bytes[21..24] == [0, 0, 0],
            Error::InvalidArgument("reserved FTRJ header bits are set".into())
        );
        ensure!(
            l >= 2 && d >= 1,
            Error::InvalidArgument(format!("FTRJ header declares invalid shape {l}×{d}"))
        );
        let expected = payload_len(n, l, d, flags);
        ensure!(
            bytes.len() >= expected,
            Error::Truncated {
                expected,
                found: bytes.len()
            }
        );
        ensure!(
            bytes.len() == expected,
            Error::InvalidArgument(format!(
                "{} trailing bytes after FTRJ payload",
                bytes.len() - expected
            ))
        );

        let mut off = HEADER_LEN;
        let mut samples = Vec::with_capacity(n);
        for si in 0..n {
            let mut data = Vec::with_capacity(l * d);
            for k in 0..l * d {
                let v = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        sample: si,
                        layer: k / d,
                        dim: k % d,
                    });
                }
                data.push(v);
                off += 4;
            }
            samples.push(FeatureTrajectory {
                layers: l,
                dim: d,
                data,
            });
        }
        let labels = if flags & FLAG_LABELS != 0 {
            let v: Vec<u32> = (0..n).map(|i| word(off + 4 * i)).collect();
            off += 4 * n;
            Some(v)
        } else {
            None
        };
        let poison_mask = if flags & FLAG_MASK != 0 {
            let mut v = Vec::with_capacity(n);
            for &b in &bytes[off..off + n] {
                ensure!(
                    b <= 1,
                    Error::InvalidArgument(format!("poison mask byte {b} is not 0/1"))
                );
                v.push(b == 1);
            }
            Some(v)
        } else {
            None
        };
        Ok(Self {
            samples,
            labels,
            poison_mask,
        })
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))
}

fn payload_len(n: usize, l: usize, d: usize, flags: u8) -> usize {
    let mut len = HEADER_LEN + 4 * n * l * d;
    if flags & FLAG_LABELS != 0 {
        len += 4 * n;
    }
    if flags & FLAG_MASK != 0 {
        len += n;
    }
    len
}

/// Writes `dataset` to `path` in FTRJ format, returning the byte count.
pub fn write_trajectories(dataset: &TrajectoryDataset, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let bytes = dataset.to_bytes()?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len())
}

pub fn read_trajectories(path: impl AsRef<Path>) -> Result<TrajectoryDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TrajectoryDataset::from_bytes(&bytes)
}

/// Informational provenance written next to an FTRJ file as `<path>.meta.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Sidecar(pub BTreeMap<String, serde_json::Value>);

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    s.into()
}

pub fn write_sidecar(path: impl AsRef<Path>, meta: &Sidecar) -> Result<()> {
    let target = sidecar_path(path.as_ref());
    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(&target, json).map_err(|e| Error::io(&target, e))
}

pub fn read_sidecar(path: impl AsRef<Path>) -> Result<Option<Sidecar>> {
    let target = sidecar_path(path.as_ref());
    match std::fs::read_to_string(&target) {
        Ok(s) => Ok(Some(serde_json::from_str(&s)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(&target, e)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub calib_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            calib_fraction: 0.5,
            seed: 2025,
        }
    }
}

/// Splits a clean dataset into calibration and validation parts.
///
/// The calibration part holds `⌈n·fraction⌉` samples. With labels present the
/// split is stratified: each class contributes `⌈n_c·fraction⌉` samples, and
/// the overall size is then corrected to the global target by moving whole
/// samples between the two sides, largest classes first.
pub fn split_calib_valid(
    dataset: &TrajectoryDataset,
    cfg: &SplitConfig,
) -> Result<(TrajectoryDataset, TrajectoryDataset)> {
    ensure!(
        cfg.calib_fraction > 0.0 && cfg.calib_fraction < 1.0,
        Error::InvalidArgument(format!(
            "calib_fraction must lie in (0, 1), got {}",
            cfg.calib_fraction
        ))
    );
    let n = dataset.len();
    ensure!(
        n >= 2,
        Error::TooFewSamples(format!("split needs at least 2 samples, got {n}"))
    );
    dataset.validate()?;
    let target = ((n as f64) * cfg.calib_fraction).ceil() as usize;
    let target = target.clamp(1, n - 1);
    let mut rng = seed::rng(cfg.seed, "split_calib_valid");

    let (mut calib_idx, mut valid_idx) = match &dataset.labels {
        None => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let valid = idx.split_off(target);
            (idx, valid)
        }
        Some(labels) => {
            let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
            for (i, &y) in labels.iter().enumerate() {
                by_class.entry(y).or_default().push(i);
            }
            for (y, members) in &by_class {
                ensure!(
                    members.len() >= 2,
                    Error::TooFewSamples(format!(
                        "class {y} has {} sample(s); stratified split needs at least 2",
                        members.len()
                    ))
                );
            }
            let mut groups: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
            for (_, mut members) in by_class {
                members.shuffle(&mut rng);
                let take = ((members.len() as f64) * cfg.calib_fraction).ceil() as usize;
                let take = take.clamp(1, members.len() - 1);
                let rest = members.split_off(take);
                groups.push((members, rest));
            }
            // Per-class ceilings can overshoot the global target; move the
            // surplus back, one sample per class in turn, largest class first.
            let mut order: Vec<usize> = (0..groups.len()).collect();
            order.sort_by_key(|&g| std::cmp::Reverse(groups[g].0.len() + groups[g].1.len()));
            let mut total: usize = groups.iter().map(|g| g.0.len()).sum();
            'outer: while total != target {
                let mut moved = false;
                for &g in &order {
                    if total == target {
                        break 'outer;
                    }
                    let (c, v) = &mut groups[g];
                    if total > target && c.len() > 1 {
                        v.push(c.pop().expect("non-empty"));
                        total -= 1;
                        moved = true;
                    } else if total < target && v.len() > 1 {
                        c.push(v.pop().expect("non-empty"));
                        total += 1;
                        moved = true;
                    }
                }
                if !moved {
                    break;
                }
            }
            let calib = groups.iter().flat_map(|g| g.0.iter().copied()).collect();
            let valid = groups.iter().flat_map(|g| g.1.iter().copied()).collect();
            (calib, valid)
        }
    };
    calib_idx.sort_unstable();
    valid_idx.sort_unstable();
    Ok((dataset.select(&calib_idx), dataset.select(&valid_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(l: usize, d: usize, base: f32) -> FeatureTrajectory {
        FeatureTrajectory::new(l, d, (0..l * d).map(|i| base + i as f32 * 0.25).collect()).unwrap()
    }

    fn toy(n: usize, labels: Option<Vec<u32>>) -> TrajectoryDataset {
        let samples = (0..n).map(|i| traj(3, 4, i as f32)).collect();
        TrajectoryDataset::new(samples, labels, None).unwrap()
    }

    #[test]
    fn byte_count_matches_layout() {
        let ds = toy(2, None);
        let bytes = ds.to_bytes().unwrap();
        assert_eq!(bytes.len(), 24 + 2 * 3 * 4 * 4);
        let ds = TrajectoryDataset {
            poison_mask: Some(vec![true, false]),
            ..toy(2, Some(vec![0, 1]))
        };
        assert_eq!(ds.to_bytes().unwrap().len(), 24 + 96 + 8 + 2);
    }

    #[test]
    fn header_fields_are_little_endian() {
        let ds = TrajectoryDataset {
            poison_mask: Some(vec![false, true]),
            ..toy(2, None)
        };
        let b = ds.to_bytes().unwrap();
        assert_eq!(&b[0..4], b"FTRJ");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..16], &[3, 0, 0, 0]);
        assert_eq!(&b[16..20], &[4, 0, 0, 0]);
        assert_eq!(&b[20..24], &[0b10, 0, 0, 0]);
        assert_eq!(&b[24..28], &0f32.to_le_bytes());
        assert_eq!(&b[b.len() - 2..], &[0, 1]);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let samples = vec![traj(3, 4, 0.0), traj(3, 5, 0.0)];
        let err = TrajectoryDataset::new(samples, None, None).unwrap_err();
        assert!(matches!(err, Error::InconsistentDimensions(_)));
        assert!(err.to_string().contains("inconsistent dimensions"));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = toy(2, None).to_bytes().unwrap();
        b[0..4].copy_from_slice(b"XXXX");
        let err = TrajectoryDataset::from_bytes(&b).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");

        let mut b = toy(2, None).to_bytes().unwrap();
        b[4] = 2;
        assert!(matches!(
            TrajectoryDataset::from_bytes(&b),
            Err(Error::BadVersion(2))
        ));
    }

    #[test]
    fn truncated_payload() {
        let ds = toy(4, None);
        let mut b = ds.to_bytes().unwrap();
        b[8] = 5; // header claims 5 samples, payload holds 4
        let err = TrajectoryDataset::from_bytes(&b).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        assert!(matches!(
            TrajectoryDataset::from_bytes(&b[..10]),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn non_finite_rejected_on_read() {
        let mut b = toy(1, None).to_bytes().unwrap();
        b[24 + 4 * 5..24 + 4 * 6].copy_from_slice(&f32::NAN.to_le_bytes());
        match TrajectoryDataset::from_bytes(&b) {
            Err(Error::NonFinite { sample, layer, dim }) => {
                assert_eq!((sample, layer, dim), (0, 1, 1));
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
        assert!(FeatureTrajectory::new(2, 1, vec![0.0, f32::INFINITY]).is_err());
    }

    #[test]
    fn single_layer_trajectory_rejected() {
        assert!(FeatureTrajectory::new(1, 3, vec![0.0; 3]).is_err());
    }

    #[test]
    fn file_round_trip_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ftrj");
        let ds = TrajectoryDataset {
            poison_mask: Some(vec![true, false, true]),
            ..toy(3, Some(vec![2, 0, 1]))
        };
        let written = write_trajectories(&ds, &path).unwrap();
        assert_eq!(written, std::fs::metadata(&path).unwrap().len() as usize);
        assert_eq!(read_trajectories(&path).unwrap(), ds);

        assert_eq!(read_sidecar(&path).unwrap(), None);
        let mut meta = Sidecar::default();
        meta.0.insert("pooling".into(), "first_token".into());
        write_sidecar(&path, &meta).unwrap();
        assert_eq!(read_sidecar(&path).unwrap(), Some(meta));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = write_trajectories(&toy(2, None), "/nonexistent-dir/x.ftrj").unwrap_err();
        assert_eq!(err.code(), "E_IO");
    }

    #[test]
    fn split_sizes_use_ceiling() {
        let cfg = SplitConfig::default();
        let (c, v) = split_calib_valid(&toy(3, None), &cfg).unwrap();
        assert_eq!((c.len(), v.len()), (2, 1));
        let (c, v) = split_calib_valid(&toy(200, None), &cfg).unwrap();
        assert_eq!((c.len(), v.len()), (100, 100));
        let (c2, v2) = split_calib_valid(&toy(200, None), &cfg).unwrap();
        assert_eq!((c, v), (c2, v2));
    }

    #[test]
    fn split_is_stratified() {
        let labels: Vec<u32> = (0..100).map(|i| (i % 2) as u32).collect();
        let (c, v) = split_calib_valid(&toy(100, Some(labels)), &SplitConfig::default()).unwrap();
        let count = |ds: &TrajectoryDataset, y: u32| {
            ds.labels.as_ref().unwrap().iter().filter(|&&l| l == y).count()
        };
        assert_eq!((count(&c, 0), count(&c, 1)), (25, 25));
        assert_eq!((count(&v, 0), count(&v, 1)), (25, 25));
    }

    #[test]
    fn stratified_split_hits_global_size() {
        // Three classes of 3: per-class ceilings give 2+2+2 = 6, target is ⌈4.5⌉ = 5.
        let labels = vec![0, 0, 0, 1, 1, 1, 2, 2, 2];
        let (c, v) = split_calib_valid(&toy(9, Some(labels)), &SplitConfig::default()).unwrap();
        assert_eq!((c.len(), v.len()), (5, 4));
        let classes: std::collections::BTreeSet<_> = c.labels.unwrap().into_iter().collect();
        assert_eq!(classes.len(), 3);
    }

    #[test]
    fn split_rejects_singleton_class() {
        let err = split_calib_valid(&toy(3, Some(vec![0, 0, 1])), &SplitConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::TooFewSamples(_)));
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let cfg = SplitConfig {
            calib_fraction: 1.0,
            seed: 1,
        };
        assert!(split_calib_valid(&toy(4, None), &cfg).is_err());
    }
}
