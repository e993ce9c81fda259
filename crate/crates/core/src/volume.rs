//! Synthetic four-channel MRI-like volumes with ground-truth tumor masks.
//!
//! Each volume draws from its own ChaCha8 stream seeded with
//! `spec.seed ^ index`, so volumes can be generated in any order (or in
//! parallel) with identical results. Draw order within a stream:
//! per-channel tissue offsets, per-channel contrast scales, tumor count,
//! then per tumor three semi-axes and a center, then voxel noise channel by
//! channel in x-fastest order.
//!
//! Channel order is fixed: T1, T1ce, T2, FLAIR.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const MODALITIES: [&str; 4] = ["T1", "T1ce", "T2", "FLAIR"];
pub const N_MODALITIES: usize = 4;

const VOLUME_MAGIC: &[u8; 4] = b"MMV1";
const VOLUME_VERSION: u32 = 1;

/// Per-channel intensity model in normalized units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Contrast {
    pub tissue_mean: f64,
    pub tumor_delta: f64,
    pub noise_sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_volumes: usize,
    pub dims: [usize; 3],
    pub tumor_count_range: [usize; 2],
    pub tumor_radius_range: [f64; 2],
    /// T1, T1ce, T2, FLAIR.
    pub modality_contrast: [Contrast; 4],
    /// Semi-axes of the head ellipsoid as a fraction of the half-extent.
    /// Voxels outside are background (zero plus noise). `0` fills the whole
    /// grid with tissue.
    pub brain_extent: f64,
    /// Per-case standard deviation of the tissue offset and the relative
    /// tumor-contrast scale.
    pub case_jitter: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_volumes: 40,
            dims: [32, 32, 32],
            tumor_count_range: [1, 2],
            tumor_radius_range: [3.0, 6.0],
            modality_contrast: [
                Contrast {
                    tissue_mean: 0.45,
                    tumor_delta: -0.02,
                    noise_sd: 0.08,
                },
                Contrast {
                    tissue_mean: 0.40,
                    tumor_delta: 0.03,
                    noise_sd: 0.08,
                },
                Contrast {
                    tissue_mean: 0.35,
                    tumor_delta: 0.12,
                    noise_sd: 0.08,
                },
                Contrast {
                    tissue_mean: 0.30,
                    tumor_delta: 0.14,
                    noise_sd: 0.08,
                },
            ],
            brain_extent: 0.85,
            case_jitter: 0.05,
            seed: 2024,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::invalid("dims", "every axis needs at least 16 voxels"));
        }
        let [cmin, cmax] = self.tumor_count_range;
        if cmin > cmax {
            return Err(Error::invalid("tumor_count_range", "min exceeds max"));
        }
        let [rmin, rmax] = self.tumor_radius_range;
        if !(rmin > 0.0 && rmin <= rmax) {
            return Err(Error::invalid(
                "tumor_radius_range",
                "need 0 < min <= max",
            ));
        }
        if self
            .dims
            .iter()
            .any(|&d| 2.0 * rmax.ceil() + 1.0 > d as f64)
        {
            return Err(Error::invalid(
                "tumor_radius_range",
                "tumors do not fit inside the volume",
            ));
        }
        if !(0.0..=1.0).contains(&self.brain_extent) {
            return Err(Error::invalid("brain_extent", "must lie in [0, 1]"));
        }
        if self.brain_extent > 0.0
            && self
                .dims
                .iter()
                .any(|&d| self.brain_extent * d as f64 / 2.0 < rmax + 1.0)
        {
            return Err(Error::invalid(
                "tumor_radius_range",
                "tumors do not fit inside the brain ellipsoid",
            ));
        }
        if self.case_jitter < 0.0 || !self.case_jitter.is_finite() {
            return Err(Error::invalid("case_jitter", "must be finite and >= 0"));
        }
        for c in &self.modality_contrast {
            if !(c.noise_sd >= 0.0) || !c.noise_sd.is_finite() {
                return Err(Error::invalid("modality_contrast", "noise_sd must be >= 0"));
            }
            if !c.tissue_mean.is_finite() || !c.tumor_delta.is_finite() {
                return Err(Error::invalid("modality_contrast", "values must be finite"));
            }
        }
        let d = |i: usize| self.modality_contrast[i].tumor_delta;
        if d(2).min(d(3)) <= d(0).max(d(1)) {
            return Err(Error::invalid(
                "modality_contrast",
                "T2 and FLAIR tumor_delta must exceed T1 and T1ce",
            ));
        }
        Ok(())
    }
}

/// Axis-aligned ellipsoid in voxel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|i| {
                let t = (p[i] - self.center[i]) / self.semi_axes[i];
                t * t
            })
            .sum::<f64>()
            <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    /// T1, T1ce, T2, FLAIR, each x-fastest.
    pub channels: [Vec<f32>; 4],
    pub mask: Vec<u8>,
    pub case_id: String,
}

impl Volume {
    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        voxel_coords(self.dims, i)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.n_voxels();
        let mut w = ByteWriter::with_capacity(24 + self.case_id.len() + 17 * n);
        w.bytes(VOLUME_MAGIC);
        w.u32(VOLUME_VERSION);
        for &d in &self.dims {
            w.u32(d as u32);
        }
        w.str(&self.case_id);
        for ch in &self.channels {
            for &v in ch {
                w.f32(v);
            }
        }
        w.bytes(&self.mask);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(VOLUME_MAGIC)?;
        let version = r.u32()?;
        if version != VOLUME_VERSION {
            return Err(Error::format(format!(
                "volume version {version}, expected {VOLUME_VERSION}"
            )));
        }
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let case_id = r.str()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format("dims overflow"))?;
        let channels = [r.f32_vec(n)?, r.f32_vec(n)?, r.f32_vec(n)?, r.f32_vec(n)?];
        let mask = r.take(n)?.to_vec();
        r.finish()?;
        Ok(Self {
            dims,
            channels,
            mask,
            case_id,
        })
    }
}

#[inline]
pub fn voxel_coords(dims: [usize; 3], i: usize) -> [usize; 3] {
    let x = i % dims[0];
    let y = (i / dims[0]) % dims[1];
    let z = i / (dims[0] * dims[1]);
    [x, y, z]
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    std::fs::write(path, v.to_bytes())?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    Volume::from_bytes(&std::fs::read(path)?)
}

fn brain_contains(spec: &SynthSpec, p: [f64; 3]) -> bool {
    if spec.brain_extent == 0.0 {
        return true;
    }
    (0..3)
        .map(|i| {
            let c = (spec.dims[i] as f64 - 1.0) / 2.0;
            let a = spec.brain_extent * spec.dims[i] as f64 / 2.0;
            let t = (p[i] - c) / a;
            t * t
        })
        .sum::<f64>()
        <= 1.0
}

/// Tumor centers keep the whole ellipsoid inside the grid and, when a head
/// ellipsoid is configured, inside a copy of it shrunk by the largest
/// semi-axis.
fn place_tumor(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Ellipsoid {
    let [rmin, rmax] = spec.tumor_radius_range;
    let semi_axes = [0; 3].map(|_| {
        if rmin == rmax {
            rmin
        } else {
            rng.gen_range(rmin..=rmax)
        }
    });
    let reach = semi_axes.iter().cloned().fold(0.0, f64::max);
    loop {
        let center = [0, 1, 2].map(|i| {
            let lo = semi_axes[i];
            let hi = spec.dims[i] as f64 - 1.0 - semi_axes[i];
            rng.gen_range(lo..=hi)
        });
        if spec.brain_extent == 0.0 {
            return Ellipsoid { center, semi_axes };
        }
        let inside = (0..3)
            .map(|i| {
                let c = (spec.dims[i] as f64 - 1.0) / 2.0;
                let a = spec.brain_extent * spec.dims[i] as f64 / 2.0 - reach;
                let t = (center[i] - c) / a;
                t * t
            })
            .sum::<f64>()
            <= 1.0;
        if inside {
            return Ellipsoid { center, semi_axes };
        }
    }
}

/// Generates volume `index` of the dataset along with the tumors placed in it.
pub fn synth_volume(spec: &SynthSpec, index: usize) -> Result<(Volume, Vec<Ellipsoid>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ index as u64);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let offsets: [f64; 4] = [0; 4].map(|_| spec.case_jitter * std_normal.sample(&mut rng));
    let scales: [f64; 4] =
        [0; 4].map(|_| (1.0 + spec.case_jitter * std_normal.sample(&mut rng)).max(0.0));
    let [cmin, cmax] = spec.tumor_count_range;
    let count = rng.gen_range(cmin..=cmax);
    let tumors: Vec<Ellipsoid> = (0..count).map(|_| place_tumor(spec, &mut rng)).collect();

    let dims = spec.dims;
    let n: usize = dims.iter().product();
    let mut mask = vec![0u8; n];
    let mut brain = vec![false; n];
    for i in 0..n {
        let c = voxel_coords(dims, i);
        let p = [c[0] as f64, c[1] as f64, c[2] as f64];
        brain[i] = brain_contains(spec, p);
        if tumors.iter().any(|t| t.contains(p)) {
            mask[i] = 1;
        }
    }
    let channels = [0, 1, 2, 3].map(|m| {
        let c = spec.modality_contrast[m];
        let tissue = c.tissue_mean + offsets[m];
        let delta = c.tumor_delta * scales[m];
        let mut ch = vec![0f32; n];
        for i in 0..n {
            let base = if brain[i] {
                tissue + if mask[i] == 1 { delta } else { 0.0 }
            } else {
                0.0
            };
            let noise = if c.noise_sd > 0.0 {
                c.noise_sd * std_normal.sample(&mut rng)
            } else {
                0.0
            };
            ch[i] = (base + noise).clamp(0.0, 1.0) as f32;
        }
        ch
    });
    Ok((
        Volume {
            dims,
            channels,
            mask,
            case_id: format!("case_{index:04}"),
        },
        tumors,
    ))
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<Volume>> {
    spec.validate()?;
    (0..spec.n_volumes)
        .into_par_iter()
        .map(|i| synth_volume(spec, i).map(|(v, _)| v))
        .collect()
}
