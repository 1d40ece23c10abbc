//! Dataset ingestion/synthesis, measurement noise, and the on-disk cache.

pub mod pgm;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{io, Scalar, Tensor};

/// Which half of an experiment a dataset feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

/// Where a dataset came from, for cache sidecars and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "source")]
pub enum Provenance {
    Directory { path: String },
    Synthetic { seed: u64 },
}

/// A stack of grayscale images, shape `[n, 1, side, side]`, values in [0, 1].
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor<f64>,
    split: Split,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(images: Tensor<f64>, split: Split, provenance: Provenance) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != shape[3] {
            return Err(Error::Contract(format!(
                "dataset images must be [n, 1, side, side], got {shape:?}"
            )));
        }
        let side = shape[3];
        if !side.is_power_of_two() {
            return Err(Error::Contract(format!("dataset side {side} must be a power of two")));
        }
        for &v in images.data() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Contract(format!("dataset pixel {v} outside [0, 1]")));
            }
        }
        Ok(Dataset { images, split, provenance })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn side(&self) -> usize {
        self.images.shape()[3]
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn images(&self) -> &Tensor<f64> {
        &self.images
    }

    /// One sample as `[1, 1, side, side]`.
    pub fn image(&self, i: usize) -> Tensor<f64> {
        let area = self.side() * self.side();
        let data = self.images.data()[i * area..(i + 1) * area].to_vec();
        Tensor::from_vec(&[1, 1, self.side(), self.side()], data).expect("inherited shape")
    }

    /// Gather the given sample indices into a `[b, 1, side, side]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f64>> {
        let area = self.side() * self.side();
        let mut data = Vec::with_capacity(indices.len() * area);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Contract(format!(
                    "batch index {i} out of range for dataset of {}",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.images.data()[i * area..(i + 1) * area]);
        }
        Tensor::from_vec(&[indices.len(), 1, self.side(), self.side()], data)
    }

    /// Save as `<stem>.utns` plus a `<stem>.json` sidecar.
    pub fn save_cache(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        io::write_tensor(stem.with_extension("utns"), &self.images)?;
        let sidecar = CacheSidecar {
            count: self.len(),
            side: self.side(),
            split: self.split,
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::json("dataset sidecar", e))?;
        let path = stem.with_extension("json");
        std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Load a dataset written by [`Dataset::save_cache`], cross-checking the
    /// sidecar against the tensor payload.
    pub fn load_cache(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let json_path = stem.with_extension("json");
        let text = std::fs::read_to_string(&json_path)
            .map_err(|e| Error::io(json_path.display().to_string(), e))?;
        let sidecar: CacheSidecar =
            serde_json::from_str(&text).map_err(|e| Error::json("dataset sidecar", e))?;
        let images = io::read_tensor::<f64>(stem.with_extension("utns"))?;
        let ds = Dataset::new(images, sidecar.split, sidecar.provenance)?;
        if ds.len() != sidecar.count || ds.side() != sidecar.side {
            return Err(Error::Contract(format!(
                "dataset cache sidecar disagrees with payload: sidecar {}×{} vs tensor {}×{}",
                sidecar.count,
                sidecar.side,
                ds.len(),
                ds.side()
            )));
        }
        Ok(ds)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheSidecar {
    count: usize,
    side: usize,
    split: Split,
    #[serde(flatten)]
    provenance: Provenance,
}

/// Load every binary PGM/PPM under `path` (sorted by file name), resize to
/// `side`×`side`, and split train/test by a seeded shuffle. Unreadable files
/// are skipped with a warning; an empty result is an error.
pub fn load_dataset(
    path: impl AsRef<Path>,
    side: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let dir = path.as_ref();
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                Some(ref ext) if ext == "pgm" || ext == "ppm"
            )
        })
        .collect();
    files.sort();

    let area = side * side;
    let mut planes: Vec<f64> = Vec::new();
    let mut loaded = 0usize;
    let mut skipped = 0usize;
    for file in &files {
        match pgm::read_netpbm(file) {
            Ok(img) => {
                let plane = pgm::resize_bilinear(&img, side);
                planes.extend(plane.iter().map(|v| v.clamp(0.0, 1.0)));
                loaded += 1;
            }
            Err(err) => {
                skipped += 1;
                eprintln!("warning: skipping {}: {err}", file.display());
            }
        }
    }
    if loaded == 0 {
        return Err(Error::MissingPrerequisite(format!(
            "no readable PGM/PPM images in {} ({skipped} skipped)",
            dir.display()
        )));
    }

    let mut order: Vec<usize> = (0..loaded).collect();
    Rng::new(seed).stream("dataset-split").shuffle(&mut order);
    let n_train = (train_fraction * loaded as f64).round() as usize;

    let gather = |idx: &[usize]| -> Result<Tensor<f64>> {
        let mut data = Vec::with_capacity(idx.len() * area);
        for &i in idx {
            data.extend_from_slice(&planes[i * area..(i + 1) * area]);
        }
        Tensor::from_vec(&[idx.len(), 1, side, side], data)
    };
    let prov = Provenance::Directory { path: dir.display().to_string() };
    let train = Dataset::new(gather(&order[..n_train])?, Split::Train, prov.clone())?;
    let test = Dataset::new(gather(&order[n_train..])?, Split::Test, prov)?;
    Ok((train, test))
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn synth_image(rng: &mut Rng, side: usize) -> Vec<f64> {
    let s = side as f64;
    // Smooth background: base level plus a gentle linear ramp.
    let base = rng.uniform_in(0.25, 0.55);
    let gx = rng.uniform_in(-0.2, 0.2);
    let gy = rng.uniform_in(-0.2, 0.2);
    let mut plane = vec![0.0f64; side * side];
    for y in 0..side {
        for x in 0..side {
            plane[y * side + x] = base + gx * (x as f64 / s) + gy * (y as f64 / s);
        }
    }
    // A few soft-edged shapes at distinct intensity levels.
    let n_shapes = 2 + rng.below(4);
    for _ in 0..n_shapes {
        let cx = rng.uniform_in(0.15, 0.85) * s;
        let cy = rng.uniform_in(0.15, 0.85) * s;
        let rx = rng.uniform_in(0.08, 0.28) * s;
        let ry = rng.uniform_in(0.08, 0.28) * s;
        let delta = rng.uniform_in(0.12, 0.35) * if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        let rectangular = rng.uniform() < 0.4;
        // One-pixel feather so edges are anti-aliased rather than hard.
        let feather = 1.0;
        for y in 0..side {
            for x in 0..side {
                let dx = (x as f64 - cx).abs();
                let dy = (y as f64 - cy).abs();
                let cover = if rectangular {
                    let ex = smoothstep((rx - dx) / feather + 0.5);
                    let ey = smoothstep((ry - dy) / feather + 0.5);
                    ex * ey
                } else {
                    let r = ((dx / rx).powi(2) + (dy / ry).powi(2)).sqrt();
                    // Distance to the unit ellipse in pixels, approximately.
                    let edge = (1.0 - r) * rx.min(ry);
                    smoothstep(edge / feather + 0.5)
                };
                plane[y * side + x] += delta * cover;
            }
        }
    }
    // Mild low-frequency texture.
    let amp = rng.uniform_in(0.01, 0.03);
    let fx = rng.uniform_in(0.5, 2.0) * std::f64::consts::TAU / s;
    let fy = rng.uniform_in(0.5, 2.0) * std::f64::consts::TAU / s;
    let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
    for y in 0..side {
        for x in 0..side {
            plane[y * side + x] += amp * (fx * x as f64 + fy * y as f64 + phase).cos();
        }
    }
    for v in &mut plane {
        *v = v.clamp(0.02, 0.98);
    }
    plane
}

/// Deterministic piecewise-smooth phantom images: shaded background, a few
/// anti-aliased ellipses/rectangles, and faint low-frequency texture.
pub fn synth_dataset(count: usize, side: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Contract("synthetic dataset needs count ≥ 1".into()));
    }
    if !side.is_power_of_two() {
        return Err(Error::Contract(format!("dataset side {side} must be a power of two")));
    }
    let root = Rng::new(seed).stream("synthetic-image");
    let mut data = Vec::with_capacity(count * side * side);
    for i in 0..count {
        let mut rng = root.substream(i as u64);
        data.extend(synth_image(&mut rng, side));
    }
    let images = Tensor::from_vec(&[count, 1, side, side], data)?;
    Dataset::new(images, Split::Train, Provenance::Synthetic { seed })
}

impl Dataset {
    /// Same images with a different split tag (synthetic generation decides
    /// train/test by seed, not by shuffling).
    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

/// Noise standard deviation that realizes `snr_db` for a vector with the
/// given Euclidean norm and length.
pub fn awgn_sigma(norm: f64, len: usize, snr_db: f64) -> f64 {
    (norm * norm / (len as f64 * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// Add white Gaussian noise at the requested signal-to-noise ratio. The
/// noise power is normalized per measurement vector: each leading row of a
/// batched tensor gets its own σ² = ‖row‖² / (len·10^(snr/10)).
pub fn add_awgn<T: Scalar>(y: &Tensor<T>, snr_db: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    let (batch, len) = crate::tensor::batch_split(y.shape());
    if len == 0 {
        return Err(Error::Contract("cannot add noise to an empty tensor".into()));
    }
    let mut out = y.clone();
    for b in 0..batch {
        let row = &mut out.data_mut()[b * len..(b + 1) * len];
        let norm = row.iter().map(|v| v.into_f64().powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Contract(format!(
                "measurement vector {b} is zero; SNR is undefined"
            )));
        }
        let sigma = awgn_sigma(norm, len, snr_db);
        for v in row.iter_mut() {
            *v = *v + T::of_f64(sigma * rng.normal());
        }
    }
    Ok(out)
}
