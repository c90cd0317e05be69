//! Deterministic generator of paired two-modality feature maps.
//!
//! Each scene stacks four ingredients. A smooth low-frequency background and
//! a common-mode noise draw are added identically to both maps; rectangular
//! objects carry random per-channel signatures whose channels are split into
//! a v-only subset, a t-only subset, and a shared remainder; finally each
//! map receives its own independent noise. The result: subtracting the two
//! maps cancels everything except the complementary object evidence and the
//! independent noise — exactly the situation a cross-modal fuser should
//! exploit.
//!
//! Every sample is a pure function of `(cfg.seed, index)`: the generator
//! seeds a ChaCha8 stream cipher RNG with `cfg.seed` and selects stream
//! `index`, so samples are reproducible bit for bit, individually and in
//! parallel.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FeatureMapPair;
use crate::irdt;
use crate::tensor::Tensor;

/// Parameters of the scene distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub n_objects_min: usize,
    pub n_objects_max: usize,
    /// Object signature amplitude.
    pub a_obj: f64,
    /// Background field amplitude.
    pub a_bg: f64,
    /// Std-dev of the noise added identically to both maps.
    pub sigma_cm: f64,
    /// Std-dev of the per-map independent noise.
    pub sigma_ind: f64,
    /// Fraction of each object's channels visible in only one modality;
    /// the v-only and t-only subsets are disjoint, so rho ≤ 0.5.
    pub rho: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            h: 16,
            w: 16,
            c: 8,
            n_objects_min: 1,
            n_objects_max: 3,
            a_obj: 2.0,
            a_bg: 1.0,
            sigma_cm: 0.5,
            sigma_ind: 0.1,
            rho: 0.4,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h < 1 || self.w < 1 || self.c < 1 {
            return Err(Error::invalid("h/w/c", "extents must be ≥ 1"));
        }
        if self.n_objects_min > self.n_objects_max {
            return Err(Error::invalid("n_objects_min", "must be ≤ n_objects_max"));
        }
        for (name, v) in [
            ("a_obj", self.a_obj),
            ("a_bg", self.a_bg),
            ("sigma_cm", self.sigma_cm),
            ("sigma_ind", self.sigma_ind),
        ] {
            if !(v >= 0.0) {
                return Err(Error::invalid(name, format!("must be ≥ 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid("rho", format!("must be in [0,1], got {}", self.rho)));
        }
        Ok(())
    }
}

/// One rectangular object and its per-modality channel split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneObject {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
    /// Per-channel signed amplitudes, length C.
    pub signature: Vec<f64>,
    pub v_only_channels: Vec<usize>,
    pub t_only_channels: Vec<usize>,
    pub shared_channels: Vec<usize>,
}

impl SceneObject {
    /// Raster-order cell indices the object covers.
    pub fn cells(&self, w: usize) -> impl Iterator<Item = usize> + '_ {
        (self.y0..self.y0 + self.height)
            .flat_map(move |y| (self.x0..self.x0 + self.width).map(move |x| y * w + x))
    }
}

/// One generated scene: the modality pair, the per-cell presence mask, and
/// the object bookkeeping.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub pair: FeatureMapPair,
    /// H×W mask, 1.0 on object cells.
    pub target: Tensor,
    pub meta: Vec<SceneObject>,
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    sigma * rng.sample::<f64, _>(StandardNormal)
}

/// Generates sample `index` of the distribution described by `cfg`.
/// Draw order is fixed (background, objects, common-mode noise, v-noise,
/// t-noise), so outputs are bit-stable across runs and platforms.
pub fn gen_scene(cfg: &SceneConfig, index: u64) -> Result<SceneSample> {
    cfg.validate()?;
    if cfg.rho > 0.5 {
        return Err(Error::invalid(
            "rho",
            format!("disjoint one-modality channel subsets need rho ≤ 0.5, got {}", cfg.rho),
        ));
    }
    let (h, w, c) = (cfg.h, cfg.w, cfg.c);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);

    let mut map_v = Tensor::zeros(&[c, h, w]);
    let mut map_t = Tensor::zeros(&[c, h, w]);
    let mut target = Tensor::zeros(&[h, w]);

    // Background: mean of up to four low-frequency 2-D cosines, identical
    // in both maps and across channels.
    let n_waves = rng.gen_range(1..=4usize);
    let mut field = vec![0.0; h * w];
    for _ in 0..n_waves {
        let fy = rng.gen_range(0..=2usize) as f64;
        let fx = rng.gen_range(0..=2usize) as f64;
        let phase = rng.gen::<f64>() * std::f64::consts::TAU;
        let weight = 0.5 + 0.5 * rng.gen::<f64>();
        for y in 0..h {
            for x in 0..w {
                let arg = std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64) + phase;
                field[y * w + x] += weight * arg.cos();
            }
        }
    }
    for v in field.iter_mut() {
        *v *= cfg.a_bg / n_waves as f64;
    }
    for ch in 0..c {
        for (cell, &b) in field.iter().enumerate() {
            map_v.data_mut()[ch * h * w + cell] += b;
            map_t.data_mut()[ch * h * w + cell] += b;
        }
    }

    // Objects: rectangular blobs with signed per-channel signatures, each
    // split into v-only / t-only / shared channel subsets. Zero amplitude
    // means no objects at all — the degenerate nothing-to-learn dataset —
    // so the target stays empty rather than marking invisible footprints.
    let n_one_sided = (cfg.rho * c as f64).floor() as usize;
    let n_objects = if cfg.a_obj == 0.0 {
        0
    } else {
        rng.gen_range(cfg.n_objects_min..=cfg.n_objects_max)
    };
    let mut meta = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let height = rng.gen_range(2..=5usize).min(h);
        let width = rng.gen_range(2..=5usize).min(w);
        let y0 = rng.gen_range(0..=h - height);
        let x0 = rng.gen_range(0..=w - width);
        let signature: Vec<f64> = (0..c)
            .map(|_| {
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let mag = 0.5 + rng.gen::<f64>();
                cfg.a_obj * sign * mag
            })
            .collect();
        let mut channels: Vec<usize> = (0..c).collect();
        // Fisher–Yates with explicit draws, to keep the stream layout obvious.
        for i in (1..c).rev() {
            let j = rng.gen_range(0..=i);
            channels.swap(i, j);
        }
        let v_only_channels: Vec<usize> = channels[..n_one_sided].to_vec();
        let t_only_channels: Vec<usize> = channels[n_one_sided..2 * n_one_sided].to_vec();
        let shared_channels: Vec<usize> = channels[2 * n_one_sided..].to_vec();

        for y in y0..y0 + height {
            for x in x0..x0 + width {
                let cell = y * w + x;
                target.data_mut()[cell] = 1.0;
                for &ch in v_only_channels.iter().chain(&shared_channels) {
                    map_v.data_mut()[ch * h * w + cell] += signature[ch];
                }
                for &ch in t_only_channels.iter().chain(&shared_channels) {
                    map_t.data_mut()[ch * h * w + cell] += signature[ch];
                }
            }
        }
        meta.push(SceneObject {
            y0,
            x0,
            height,
            width,
            signature,
            v_only_channels,
            t_only_channels,
            shared_channels,
        });
    }

    // Common-mode noise: one draw, both maps.
    for i in 0..c * h * w {
        let n = gauss(&mut rng, cfg.sigma_cm);
        map_v.data_mut()[i] += n;
        map_t.data_mut()[i] += n;
    }
    // Independent noise: separate draws per map.
    for i in 0..c * h * w {
        map_v.data_mut()[i] += gauss(&mut rng, cfg.sigma_ind);
    }
    for i in 0..c * h * w {
        map_t.data_mut()[i] += gauss(&mut rng, cfg.sigma_ind);
    }

    Ok(SceneSample {
        pair: FeatureMapPair::new(map_v, map_t)?,
        target,
        meta,
    })
}

/// Generates `n` consecutive samples starting at stream `first_index`.
pub fn gen_samples(cfg: &SceneConfig, first_index: u64, n: usize) -> Result<Vec<SceneSample>> {
    (0..n).map(|i| gen_scene(cfg, first_index + i as u64)).collect()
}

/// File names of one serialized sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub index: u64,
    pub map_v: String,
    pub map_t: String,
    pub target: String,
}

/// On-disk description of a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator_version: String,
    pub config: SceneConfig,
    pub train: Vec<SampleFiles>,
    pub test: Vec<SampleFiles>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Writes `n_train + n_test` samples as tensor-file triples plus a manifest.
/// Train samples use stream indices `0..n_train`, test samples continue at
/// `n_train`, so the two splits never share a stream. Regenerating with the
/// same config writes byte-identical files.
pub fn gen_dataset(cfg: &SceneConfig, n_train: usize, n_test: usize, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let write_split = |prefix: &str, first: u64, n: usize| -> Result<Vec<SampleFiles>> {
        let mut files = Vec::with_capacity(n);
        for i in 0..n {
            let index = first + i as u64;
            let sample = gen_scene(cfg, index)?;
            let names = SampleFiles {
                index,
                map_v: format!("{prefix}_{i:04}_v.irdt"),
                map_t: format!("{prefix}_{i:04}_t.irdt"),
                target: format!("{prefix}_{i:04}_y.irdt"),
            };
            irdt::write_tensor(&out_dir.join(&names.map_v), &sample.pair.map_v)?;
            irdt::write_tensor(&out_dir.join(&names.map_t), &sample.pair.map_t)?;
            irdt::write_tensor(&out_dir.join(&names.target), &sample.target)?;
            files.push(names);
        }
        Ok(files)
    };

    let manifest = DatasetManifest {
        generator_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        train: write_split("train", 0, n_train)?,
        test: write_split("test", n_train as u64, n_test)?,
    };
    let path = out_dir.join(MANIFEST_NAME);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(&path, e.to_string()))?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a dataset manifest back.
pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Loads one split listed in a manifest. Loaded samples carry no object
/// bookkeeping (only maps and targets are serialized).
pub fn load_split(dir: &Path, files: &[SampleFiles]) -> Result<Vec<SceneSample>> {
    files
        .iter()
        .map(|f| {
            let map_v = irdt::read_tensor(&dir.join(&f.map_v))?;
            let map_t = irdt::read_tensor(&dir.join(&f.map_t))?;
            let target = irdt::read_tensor(&dir.join(&f.target))?;
            Ok(SceneSample {
                pair: FeatureMapPair::new(map_v, map_t)?,
                target,
                meta: Vec::new(),
            })
        })
        .collect()
}
