//! Synthetic multi-scanner PET data: phantoms, frame-averaged short/long
//! scans, scanner profiles, and the volume file format.
//!
//! Volumes are `[x, y, z]` row-major tensors following the profile's
//! resolution order.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::fsio;

/// Longest edge of a desk-scale twin profile.
pub const MINI_MAX_EDGE: usize = 32;
/// Shortest edge of a desk-scale twin, so the default 16³ crop always fits.
pub const MINI_MIN_EDGE: usize = 16;
pub const FRAMES: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScannerProfile {
    pub id: u8,
    pub resolution: [usize; 3],
    /// Millimetres per voxel along each axis.
    pub voxel_spacing: [f64; 3],
    /// Standard deviation of the Gaussian noise added to each frame.
    pub noise_scale: f64,
    /// Point-spread blur width in voxels.
    pub psf_sigma: f64,
}

/// The five acquisition devices. Resolutions and spacings are the published
/// ones; noise and blur widths are simulation choices that differ per device.
pub fn profiles() -> [ScannerProfile; 5] {
    let p = |id, resolution, voxel_spacing, psf_sigma, noise_scale| ScannerProfile {
        id,
        resolution,
        voxel_spacing,
        noise_scale,
        psf_sigma,
    };
    [
        p(1, [192, 192, 136], [1.21875; 3], 0.6, 0.08),
        p(2, [192, 192, 128], [1.21875; 3], 0.7, 0.09),
        p(3, [224, 224, 81], [1.01821, 1.01821, 2.02699], 0.9, 0.10),
        p(4, [128, 128, 90], [2.0; 3], 1.4, 0.14),
        p(5, [128, 128, 63], [2.05941, 2.05941, 2.425], 1.2, 0.12),
    ]
}

pub fn profile(id: u8) -> Result<ScannerProfile> {
    profiles()
        .into_iter()
        .find(|p| p.id == id)
        .ok_or_else(|| Error::Config(format!("unknown scanner id {id} (expected 1..=5)")))
}

impl ScannerProfile {
    /// Desk-scale twin: longest edge scaled to [`MINI_MAX_EDGE`], aspect ratio
    /// kept except that no edge drops below [`MINI_MIN_EDGE`]. Spacing grows
    /// so the physical field of view is unchanged.
    pub fn mini(&self) -> ScannerProfile {
        let longest = *self.resolution.iter().max().expect("three axes") as f64;
        let mut resolution = [0; 3];
        let mut spacing = [0.0; 3];
        for a in 0..3 {
            let scaled =
                (self.resolution[a] as f64 * MINI_MAX_EDGE as f64 / longest).round() as usize;
            resolution[a] = scaled.max(MINI_MIN_EDGE);
            spacing[a] = self.voxel_spacing[a] * self.resolution[a] as f64 / resolution[a] as f64;
        }
        ScannerProfile {
            resolution,
            voxel_spacing: spacing,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution.contains(&0)
            || self.voxel_spacing.iter().any(|&s| s.is_nan() || s <= 0.0)
        {
            return Err(Error::Config(format!(
                "scanner {} needs positive dims and spacings",
                self.id
            )));
        }
        if self.noise_scale < 0.0 || self.psf_sigma < 0.0 {
            return Err(Error::Config(format!(
                "scanner {} has negative noise or blur",
                self.id
            )));
        }
        Ok(())
    }
}

fn dims3(t: &Tensor) -> Result<[usize; 3]> {
    match t.shape() {
        &[a, b, c] => Ok([a, b, c]),
        s => Err(Error::Shape(format!(
            "expected a [x, y, z] volume, got {s:?}"
        ))),
    }
}

/// Sum of 3 to 8 random anisotropic Gaussian blobs, min-max scaled to [0, 1].
pub fn generate_phantom(seed: u64, dims: [usize; 3]) -> Result<Tensor> {
    if dims.iter().any(|&d| d < 8) {
        return Err(Error::Config(format!(
            "phantom dims {dims:?} must all be at least 8"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<([f64; 3], [f64; 3], f64)> = (0..rng.random_range(3..=8))
        .map(|_| {
            let mut center = [0.0; 3];
            let mut sigma = [0.0; 3];
            for a in 0..3 {
                let d = dims[a] as f64;
                center[a] = rng.random_range(0.2..0.8) * d;
                sigma[a] = rng.random_range(0.06..0.2) * d;
            }
            (center, sigma, rng.random_range(0.3..1.0))
        })
        .collect();
    let [_, ny, nz] = dims;
    let raw = Tensor::from_fn(dims, |i| {
        let p = [
            (i / (ny * nz)) as f64,
            ((i / nz) % ny) as f64,
            (i % nz) as f64,
        ];
        blobs
            .iter()
            .map(|(c, s, amp)| {
                let e: f64 = (0..3).map(|a| ((p[a] - c[a]) / s[a]).powi(2)).sum();
                amp * (-0.5 * e).exp()
            })
            .sum()
    });
    let (lo, hi) = raw
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    let range = hi - lo;
    Ok(raw.map(|v| if range > 0.0 { (v - lo) / range } else { 0.0 }))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with replicated borders; `sigma = 0` is identity.
pub fn psf_blur(volume: &Tensor, sigma: f64) -> Result<Tensor> {
    let dims = dims3(volume)?;
    if sigma <= 0.0 {
        return Ok(volume.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let mut data = volume.data().to_vec();
    for axis in 0..3 {
        let stride = match axis {
            0 => dims[1] * dims[2],
            1 => dims[2],
            _ => 1,
        };
        let n = dims[axis] as i64;
        let src = data.clone();
        for (i, out) in data.iter_mut().enumerate() {
            let pos = ((i / stride) % dims[axis]) as i64;
            let base = i as i64 - pos * stride as i64;
            *out = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| {
                    let q = (pos + k as i64 - radius).clamp(0, n - 1);
                    w * src[(base + q * stride as i64) as usize]
                })
                .sum();
        }
    }
    Tensor::new(dims.to_vec(), data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    /// First frame only.
    pub short_scan: Tensor,
    /// Mean of all frames.
    pub long_scan: Tensor,
    pub scanner_id: u8,
    pub phantom_seed: u64,
}

/// Frames are `clamp(blur(phantom) + noise, 0, 1)`; the short scan is the
/// first frame and the long scan the mean of all `n_frames`.
pub fn simulate_scan(
    phantom: &Tensor,
    profile: &ScannerProfile,
    n_frames: usize,
    phantom_seed: u64,
    seed: u64,
) -> Result<VolumeSample> {
    if n_frames == 0 {
        return Err(Error::Config("n_frames must be at least 1".into()));
    }
    let clean = psf_blur(phantom, profile.psf_sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, profile.noise_scale.max(0.0))
        .map_err(|e| Error::Config(format!("noise scale: {e}")))?;
    let mut sum = vec![0.0; clean.numel()];
    let mut first = None;
    for _ in 0..n_frames {
        let frame: Vec<f64> = clean
            .data()
            .iter()
            .map(|&c| {
                let n = if profile.noise_scale > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                (c + n).clamp(0.0, 1.0)
            })
            .collect();
        for (s, f) in sum.iter_mut().zip(&frame) {
            *s += f;
        }
        first.get_or_insert(frame);
    }
    let shape = clean.shape().to_vec();
    let long = sum.into_iter().map(|s| s / n_frames as f64).collect();
    Ok(VolumeSample {
        short_scan: Tensor::new(shape.clone(), first.expect("at least one frame"))?,
        long_scan: Tensor::new(shape, long)?,
        scanner_id: profile.id,
        phantom_seed,
    })
}

fn crop(t: &Tensor, origin: [usize; 3], size: usize) -> Tensor {
    let [_, ny, nz] = dims3(t).expect("checked by caller");
    Tensor::from_fn([size, size, size], |i| {
        let (a, b, c) = (i / (size * size), (i / size) % size, i % size);
        let v = t.data()[((origin[0] + a) * ny + origin[1] + b) * nz + origin[2] + c];
        v.clamp(0.0, 1.0)
    })
}

/// Cuts the same random `crop_size³` window out of both scans. Intensities
/// are already in [0, 1] by construction; the crop only re-clamps.
pub fn crop_normalize(sample: &VolumeSample, crop_size: usize, seed: u64) -> Result<VolumeSample> {
    let dims = dims3(&sample.short_scan)?;
    if sample.long_scan.shape() != sample.short_scan.shape() {
        return Err(Error::shapes(
            "short/long scans",
            sample.short_scan.shape(),
            sample.long_scan.shape(),
        ));
    }
    if crop_size == 0 || dims.iter().any(|&d| d < crop_size) {
        return Err(Error::Shape(format!(
            "crop {crop_size}³ does not fit a {dims:?} volume"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = dims.map(|d| rng.random_range(0..=d - crop_size));
    Ok(VolumeSample {
        short_scan: crop(&sample.short_scan, origin, crop_size),
        long_scan: crop(&sample.long_scan, origin, crop_size),
        ..sample.clone()
    })
}

/// A training/evaluation pair shaped for the models: `[1, s, s, s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub input: Tensor,
    pub target: Tensor,
}

impl Pair {
    pub fn from_sample(sample: &VolumeSample) -> Result<Self> {
        let s = sample.short_scan.shape();
        let shape = [1, s[0], s[1], s[2]];
        Ok(Self {
            input: sample.short_scan.reshape(shape)?,
            target: sample.long_scan.reshape(shape)?,
        })
    }
}

fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a combined word keeps per-sample streams apart.
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` cropped samples from `profile`, reproducible from `seed`.
pub fn synthesize(
    profile: &ScannerProfile,
    count: usize,
    crop_size: usize,
    seed: u64,
) -> Result<Vec<VolumeSample>> {
    profile.validate()?;
    (0..count as u64)
        .map(|i| {
            let phantom_seed = mix_seed(seed, u64::from(profile.id), i);
            let phantom = generate_phantom(phantom_seed, profile.resolution)?;
            let scan = simulate_scan(
                &phantom,
                profile,
                FRAMES,
                phantom_seed,
                mix_seed(phantom_seed, 1, i),
            )?;
            crop_normalize(&scan, crop_size, mix_seed(phantom_seed, 2, i))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    pub scanner_id: u8,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    scanner_id: u8,
    dtype: String,
    byte_order: String,
}

const HEADER_END: &[u8] = b"\n\0";

pub fn encode_volume(tensor: &Tensor, spacing: &[f64], scanner_id: u8) -> Result<Vec<u8>> {
    let header = VolumeHeader {
        dims: tensor.shape().to_vec(),
        spacing: spacing.to_vec(),
        scanner_id,
        dtype: "f64".into(),
        byte_order: "little".into(),
    };
    let mut bytes = serde_json::to_vec(&header).map_err(|e| Error::CorruptHeader(e.to_string()))?;
    bytes.extend_from_slice(HEADER_END);
    bytes.reserve(tensor.numel() * 8);
    for v in tensor.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

pub fn decode_volume(bytes: &[u8]) -> Result<(Tensor, VolumeMeta)> {
    let end = bytes
        .windows(HEADER_END.len())
        .position(|w| w == HEADER_END)
        .ok_or_else(|| Error::CorruptHeader("missing header terminator".into()))?;
    let header: VolumeHeader =
        serde_json::from_slice(&bytes[..end]).map_err(|e| Error::CorruptHeader(e.to_string()))?;
    if header.dtype != "f64" || header.byte_order != "little" {
        return Err(Error::CorruptHeader(format!(
            "unsupported encoding {}/{}",
            header.dtype, header.byte_order
        )));
    }
    if header.dims.is_empty() || header.dims.contains(&0) {
        return Err(Error::CorruptHeader(format!(
            "invalid dims {:?}",
            header.dims
        )));
    }
    let payload = &bytes[end + HEADER_END.len()..];
    if !payload.len().is_multiple_of(8) {
        return Err(Error::TruncatedPayload(payload.len() % 8));
    }
    let found = payload.len() / 8;
    let expected: usize = header.dims.iter().product();
    if found != expected {
        return Err(Error::PayloadMismatch {
            dims: header.dims,
            expected,
            found,
        });
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let tensor = Tensor::new(header.dims.clone(), data)?;
    Ok((
        tensor,
        VolumeMeta {
            dims: header.dims,
            spacing: header.spacing,
            scanner_id: header.scanner_id,
        },
    ))
}

pub fn save_volume(path: &Path, tensor: &Tensor, spacing: &[f64], scanner_id: u8) -> Result<()> {
    fsio::atomic_write(path, &encode_volume(tensor, spacing, scanner_id)?)
}

pub fn load_volume(path: &Path) -> Result<(Tensor, VolumeMeta)> {
    decode_volume(&fsio::read(path)?)
}

/// Writes samples as `NNN.short.vol` / `NNN.long.vol` pairs.
pub fn write_dataset(dir: &Path, samples: &[VolumeSample], spacing: &[f64]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        save_volume(
            &dir.join(format!("{i:03}.short.vol")),
            &s.short_scan,
            spacing,
            s.scanner_id,
        )?;
        save_volume(
            &dir.join(format!("{i:03}.long.vol")),
            &s.long_scan,
            spacing,
            s.scanner_id,
        )?;
    }
    Ok(())
}

/// Loads every `*.short.vol` with a matching `*.long.vol`, in name order.
pub fn read_dataset(dir: &Path) -> Result<Vec<VolumeSample>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut shorts: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.to_string_lossy().ends_with(".short.vol") {
            shorts.push(path);
        }
    }
    shorts.sort();
    let mut samples = Vec::with_capacity(shorts.len());
    for short in shorts {
        let name = short.to_string_lossy().to_string();
        let long = PathBuf::from(format!("{}.long.vol", name.trim_end_matches(".short.vol")));
        if !long.exists() {
            continue;
        }
        let (s, meta) = load_volume(&short)?;
        let (l, _) = load_volume(&long)?;
        if s.shape() != l.shape() {
            return Err(Error::shapes("short/long pair", s.shape(), l.shape()));
        }
        samples.push(VolumeSample {
            short_scan: s,
            long_scan: l,
            scanner_id: meta.scanner_id,
            phantom_seed: 0,
        });
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(samples)
}
