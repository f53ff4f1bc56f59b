//! Synthetic benchmark generator with known class-discriminative features,
//! plus label-independent pseudo signals for robustness experiments.
//!
//! The generated task has three classes. Features are split into three equal
//! groups; instances of class c carry a geometric mask (circle, triangle or
//! square) filled with a sinusoid inside group c's time-by-feature block,
//! with mask center and size drawn per instance. Everything else is i.i.d.
//! Gaussian noise, so group c is discriminative exactly for class c. Two
//! ground-truth variants are emitted: group c important for class c, and the
//! complement labeling, since a classifier may legitimately key on either.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Benchmark, GroundTruthMask, MtsDataset, Split};
use crate::error::{CafoError, Result};
use crate::parallel::par_map_indexed;
use crate::rng::seed_stream;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 3;
const MASK_RADIUS_LO: f64 = 2.0;
const MASK_RADIUS_HI: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SquidGameConfig {
    pub n_per_class: usize,
    pub t: usize,
    pub d: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub signal_amplitude: f64,
    /// Sinusoid frequency range in cycles per time step.
    pub signal_freq_range: (f64, f64),
    /// Fraction of each class held out as the test split.
    pub test_fraction: f64,
    /// Fold count assigned round-robin within each class's train portion.
    pub num_folds: usize,
}

impl Default for SquidGameConfig {
    fn default() -> Self {
        Self {
            n_per_class: 2000,
            t: 32,
            d: 30,
            seed: 42,
            noise_sigma: 1.0,
            // the masked sinusoid must stand out against unit noise for the
            // recurrence structure to carry class information at this scale
            signal_amplitude: 4.0,
            signal_freq_range: (0.1, 0.45),
            test_fraction: 0.2,
            num_folds: 5,
        }
    }
}

impl SquidGameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 {
            return Err(CafoError::InvalidConfig("n_per_class must be positive".into()));
        }
        if self.d % NUM_CLASSES != 0 {
            return Err(CafoError::InvalidConfig(format!(
                "d = {} must divide into {} equal groups",
                self.d, NUM_CLASSES
            )));
        }
        let width = self.d / NUM_CLASSES;
        let need = (2.0 * MASK_RADIUS_HI + 1.0) as usize;
        if width < need || self.t < need {
            return Err(CafoError::InvalidConfig(format!(
                "blocks of {}x{} cannot hold masks of radius up to {}",
                self.t, width, MASK_RADIUS_HI
            )));
        }
        if !(self.noise_sigma > 0.0) || !(self.signal_amplitude > 0.0) {
            return Err(CafoError::InvalidConfig("sigma and amplitude must be positive".into()));
        }
        let (lo, hi) = self.signal_freq_range;
        if !(lo > 0.0 && hi >= lo && hi <= 0.5) {
            return Err(CafoError::InvalidConfig(
                "frequency range must satisfy 0 < lo <= hi <= 0.5".into(),
            ));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(CafoError::InvalidConfig("test fraction must be in (0, 1)".into()));
        }
        if self.num_folds < 2 {
            return Err(CafoError::InvalidConfig("need at least 2 folds".into()));
        }
        Ok(())
    }

    /// Feature index range of the group owned by `class`.
    pub fn group_of(&self, class: usize) -> std::ops::Range<usize> {
        let width = self.d / NUM_CLASSES;
        class * width..(class + 1) * width
    }
}

#[derive(Clone, Copy)]
enum MaskShape {
    Circle,
    Triangle,
    Square,
}

impl MaskShape {
    fn for_class(class: usize) -> Self {
        match class {
            0 => MaskShape::Circle,
            1 => MaskShape::Triangle,
            _ => MaskShape::Square,
        }
    }

    /// Cell membership; coordinates are (time, local feature), center
    /// (t0, j0), size r (radius or half-side).
    fn contains(&self, t: f64, j: f64, t0: f64, j0: f64, r: f64) -> bool {
        match self {
            MaskShape::Circle => (t - t0).powi(2) + (j - j0).powi(2) <= r * r,
            MaskShape::Triangle => {
                // apex at t0 - r, base of half-width r at t0 + r
                let dt = t - (t0 - r);
                dt >= 0.0 && t <= t0 + r && (j - j0).abs() <= dt / 2.0
            }
            MaskShape::Square => (t - t0).abs() <= r && (j - j0).abs() <= r,
        }
    }
}

/// Generate one instance of the given class. Noise first, then the mask
/// parameters, then the sinusoidal fill; value order is fixed so parallel
/// and serial generation agree.
fn gen_instance(cfg: &SquidGameConfig, class: usize, rng_stream: u64) -> Tensor {
    let mut rng = seed_stream(cfg.seed, rng_stream);
    let (t_len, d) = (cfg.t, cfg.d);
    let mut cells = vec![0.0f64; t_len * d];
    for v in cells.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = z * cfg.noise_sigma;
    }
    let group = cfg.group_of(class);
    let width = group.len();
    let shape = MaskShape::for_class(class);
    // mask parameters; resample until at least one cell falls inside
    let mut marked: Vec<(usize, usize)> = Vec::new();
    for _attempt in 0..16 {
        let r = rng.gen_range(MASK_RADIUS_LO..=MASK_RADIUS_HI);
        let t0 = rng.gen_range(r..=(t_len as f64 - 1.0 - r));
        let j0 = rng.gen_range(r..=(width as f64 - 1.0 - r));
        marked.clear();
        for ti in 0..t_len {
            for jl in 0..width {
                if shape.contains(ti as f64, jl as f64, t0, j0, r) {
                    marked.push((ti, jl));
                }
            }
        }
        if !marked.is_empty() {
            break;
        }
    }
    debug_assert!(!marked.is_empty());
    let (flo, fhi) = cfg.signal_freq_range;
    let freq = if fhi > flo { rng.gen_range(flo..fhi) } else { flo };
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    for &(ti, jl) in &marked {
        let signal =
            cfg.signal_amplitude * (std::f64::consts::TAU * freq * ti as f64 + phase).sin();
        cells[ti * d + (group.start + jl)] = signal;
    }
    // quantize so in-memory data matches the f32 storage format exactly
    for v in cells.iter_mut() {
        *v = *v as f32 as f64;
    }
    Tensor::from_parts(vec![t_len, d], cells)
}

/// Generate the benchmark: train/test splits and both ground-truth variants.
pub fn gen_squidgame(cfg: &SquidGameConfig) -> Result<Benchmark> {
    cfg.validate()?;
    let npc = cfg.n_per_class;
    let n_test_per_class = ((npc as f64) * cfg.test_fraction).round() as usize;
    let n_test_per_class = n_test_per_class.clamp(1, npc - 1);
    let n = NUM_CLASSES * npc;

    let instances = par_map_indexed(n, |g| {
        let class = g / npc;
        gen_instance(cfg, class, g as u64)
    });

    let feature_names: Vec<String> = (0..cfg.d).map(|j| format!("f{}", j)).collect();
    let mut train_instances = Vec::new();
    let mut train_labels = Vec::new();
    let mut train_folds = Vec::new();
    let mut test_instances = Vec::new();
    let mut test_labels = Vec::new();
    for (g, inst) in instances.into_iter().enumerate() {
        let class = g / npc;
        let k = g % npc;
        if k < npc - n_test_per_class {
            train_instances.push(inst);
            train_labels.push(class);
            train_folds.push(k % cfg.num_folds);
        } else {
            test_instances.push(inst);
            test_labels.push(class);
        }
    }
    let n_test = test_instances.len();
    let train = MtsDataset::new(
        train_instances,
        train_labels,
        feature_names.clone(),
        train_folds,
        Split::Train,
        NUM_CLASSES,
    )?;
    let test = MtsDataset::new(
        test_instances,
        test_labels,
        feature_names,
        vec![0; n_test],
        Split::Test,
        NUM_CLASSES,
    )?;

    let variant_a: Vec<Vec<bool>> = (0..NUM_CLASSES)
        .map(|c| (0..cfg.d).map(|j| cfg.group_of(c).contains(&j)).collect())
        .collect();
    let variant_b: Vec<Vec<bool>> = variant_a
        .iter()
        .map(|row| row.iter().map(|&v| !v).collect())
        .collect();
    let ground_truth = GroundTruthMask { variant_a, variant_b };
    ground_truth.validate()?;

    Ok(Benchmark { train, test, ground_truth: Some(ground_truth) })
}

// ----------------------------------------------------------------------
// pseudo signals
// ----------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoKind {
    WhiteNoise,
    Sinusoid,
    Gp,
}

impl PseudoKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "wn" | "whitenoise" => Ok(PseudoKind::WhiteNoise),
            "sin" | "sinusoid" => Ok(PseudoKind::Sinusoid),
            "gp" => Ok(PseudoKind::Gp),
            other => Err(CafoError::InvalidConfig(format!("unknown pseudo kind {:?}", other))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PseudoKind::WhiteNoise => "wn",
            PseudoKind::Sinusoid => "sin",
            PseudoKind::Gp => "gp",
        }
    }
}

const WHITE_NOISE_STD: f64 = 0.3;
const SINUSOID_FREQ: f64 = 0.25;
const GP_LENGTH_SCALE: f64 = 1.0;

/// One pseudo signal of length `t`.
///
/// White noise is N(0, 0.3^2); the sinusoid has amplitude one, frequency
/// 0.25 cycles per step and zero phase; the Gaussian-process draw uses a
/// Matern 3/2 covariance with unit variance over the integer time grid.
pub fn gen_pseudo_signal(kind: PseudoKind, t: usize, seed: u64) -> Result<Vec<f64>> {
    if t < 2 {
        return Err(CafoError::InvalidConfig("pseudo signal needs t >= 2".into()));
    }
    let mut rng = seed_stream(seed, 0x70_73_65_75_64_6f);
    match kind {
        PseudoKind::WhiteNoise => Ok((0..t)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * WHITE_NOISE_STD
            })
            .collect()),
        PseudoKind::Sinusoid => Ok((0..t)
            .map(|k| (std::f64::consts::TAU * SINUSOID_FREQ * k as f64).sin())
            .collect()),
        PseudoKind::Gp => {
            let cov: Vec<f64> = (0..t * t)
                .map(|idx| {
                    let (i, j) = (idx / t, idx % t);
                    matern32((i as f64 - j as f64).abs(), GP_LENGTH_SCALE)
                })
                .collect();
            let chol = cholesky_with_jitter(&cov, t)?;
            let z: Vec<f64> = (0..t).map(|_| rng.sample(StandardNormal)).collect();
            let mut out = vec![0.0; t];
            for i in 0..t {
                let mut acc = 0.0;
                for j in 0..=i {
                    acc += chol[i * t + j] * z[j];
                }
                out[i] = acc;
            }
            Ok(out)
        }
    }
}

fn matern32(d: f64, length_scale: f64) -> f64 {
    let s = 3f64.sqrt() * d / length_scale;
    (1.0 + s) * (-s).exp()
}

/// Lower-triangular Cholesky factor, retrying with an escalating diagonal
/// jitter from 1e-9 up to 1e-3.
fn cholesky_with_jitter(cov: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut jitter = 1e-9;
    while jitter <= 1e-3 {
        if let Some(l) = try_cholesky(cov, n, jitter) {
            return Ok(l);
        }
        jitter *= 10.0;
    }
    Err(CafoError::CholeskyFailed)
}

fn try_cholesky(cov: &[f64], n: usize, jitter: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut acc = cov[i * n + j];
            if i == j {
                acc += jitter;
            }
            for k in 0..j {
                acc -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if acc <= 0.0 {
                    return None;
                }
                l[i * n + i] = acc.sqrt();
            } else {
                l[i * n + j] = acc / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Append one fresh pseudo column per kind to every instance. Labels and
/// folds are untouched; new feature names record the kind.
pub fn inject_pseudo(ds: &MtsDataset, kinds: &[PseudoKind], seed: u64) -> Result<MtsDataset> {
    ds.validate()?;
    if kinds.is_empty() {
        return Ok(ds.clone());
    }
    let t = ds.time_steps();
    let d = ds.num_features();
    let d_new = d + kinds.len();
    let columns: Vec<Result<Vec<Vec<f64>>>> = crate::parallel::par_map_indexed(ds.len(), |i| {
        kinds
            .iter()
            .enumerate()
            .map(|(ki, &kind)| {
                let stream = (i as u64).wrapping_mul(64).wrapping_add(ki as u64);
                gen_pseudo_signal(kind, t, crate::rng::splitmix64(seed) ^ stream)
            })
            .collect()
    });
    let mut instances = Vec::with_capacity(ds.len());
    for (inst, cols) in ds.instances.iter().zip(columns) {
        let cols = cols?;
        let src = inst.data();
        let mut data = Vec::with_capacity(t * d_new);
        for row in 0..t {
            data.extend_from_slice(&src[row * d..(row + 1) * d]);
            for col in &cols {
                data.push(col[row] as f32 as f64);
            }
        }
        instances.push(Tensor::from_parts(vec![t, d_new], data));
    }
    let mut feature_names = ds.feature_names.clone();
    for kind in kinds {
        feature_names.push(format!("pseudo_{}", kind.name()));
    }
    MtsDataset::new(
        instances,
        ds.labels.clone(),
        feature_names,
        ds.folds.clone(),
        ds.split,
        ds.num_classes,
    )
}
