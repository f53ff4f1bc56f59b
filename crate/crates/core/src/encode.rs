//! Image encodings that turn a univariate series into a square channel.
//!
//! Two encoders are provided: the recurrence plot (binary thresholded
//! pairwise distances of delay-embedded vectors) and the Gramian angular
//! summation field (pairwise cosine of summed polar angles after min-max
//! rescaling to [-1, 1]). Both are pure functions of their input, so
//! encoding is embarrassingly parallel across instances and channels.

use serde::{Deserialize, Serialize};

use crate::data::MtsDataset;
use crate::error::{CafoError, Result};
use crate::parallel::par_map_slice;
use crate::tensor::Tensor;

/// Recurrence-plot parameters: time delay, embedding dimension and the
/// threshold as a fraction of the maximum pairwise distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpConfig {
    pub tau: usize,
    pub m: usize,
    pub epsilon_fraction: f64,
}

impl Default for RpConfig {
    fn default() -> Self {
        Self { tau: 1, m: 1, epsilon_fraction: 0.10 }
    }
}

impl RpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 1 || self.m < 1 {
            return Err(CafoError::InvalidConfig("rp: tau and m must be >= 1".into()));
        }
        if !(self.epsilon_fraction > 0.0 && self.epsilon_fraction <= 1.0) {
            return Err(CafoError::InvalidConfig(
                "rp: epsilon fraction must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Number of embedded vectors for a series of length `t`.
    pub fn embedded_len(&self, t: usize) -> Option<usize> {
        let span = (self.m - 1) * self.tau;
        if t >= span + 2 {
            Some(t - span)
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Rp,
    Gaf,
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EncoderKind::Rp => write!(f, "rp"),
            EncoderKind::Gaf => write!(f, "gaf"),
        }
    }
}

/// Encoder selection plus parameters; identifies cache entries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub rp: RpConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { kind: EncoderKind::Rp, rp: RpConfig::default() }
    }
}

impl EncoderConfig {
    /// Stable string identity for cache keys.
    pub fn cache_key(&self) -> String {
        match self.kind {
            EncoderKind::Rp => format!(
                "rp-tau{}-m{}-eps{}",
                self.rp.tau,
                self.rp.m,
                // bit pattern, not display rounding
                self.rp.epsilon_fraction.to_bits()
            ),
            EncoderKind::Gaf => "gaf".to_string(),
        }
    }

    pub fn image_side(&self, t: usize) -> Result<usize> {
        match self.kind {
            EncoderKind::Rp => self.rp.embedded_len(t).ok_or_else(|| {
                CafoError::InvalidConfig(format!(
                    "series of length {} too short for tau={}, m={}",
                    t, self.rp.tau, self.rp.m
                ))
            }),
            EncoderKind::Gaf => {
                if t >= 1 {
                    Ok(t)
                } else {
                    Err(CafoError::InvalidConfig("empty series".into()))
                }
            }
        }
    }
}

/// Per-instance stack of D single-channel L x L images.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedStack {
    /// Shape [D, L, L].
    pub data: Tensor,
    pub encoder: EncoderKind,
    pub instance_id: usize,
}

impl EncodedStack {
    pub fn num_channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn side(&self) -> usize {
        self.data.shape()[1]
    }

    /// New stack keeping only the given channels, in the given order.
    pub fn select_channels(&self, keep: &[usize]) -> EncodedStack {
        let d = self.num_channels();
        let l2 = self.side() * self.side();
        let src = self.data.data();
        let mut out = Vec::with_capacity(keep.len() * l2);
        for &j in keep {
            debug_assert!(j < d);
            out.extend_from_slice(&src[j * l2..(j + 1) * l2]);
        }
        EncodedStack {
            data: Tensor::from_parts(vec![keep.len(), self.side(), self.side()], out),
            encoder: self.encoder,
            instance_id: self.instance_id,
        }
    }
}

/// Recurrence plot of a series: RP[i][j] = 1 when the embedded vectors i and
/// j are within epsilon, with the threshold inclusive (H(0) = 1) so a
/// constant series is fully recurrent.
pub fn encode_rp(series: &[f64], cfg: &RpConfig) -> Result<Tensor> {
    cfg.validate()?;
    if series.iter().any(|v| !v.is_finite()) {
        return Err(CafoError::NonFinite { op: "encode_rp" });
    }
    let t = series.len();
    let l = cfg.embedded_len(t).ok_or_else(|| {
        CafoError::InvalidConfig(format!(
            "series of length {} too short for tau={}, m={}",
            t, cfg.tau, cfg.m
        ))
    })?;
    // squared pairwise distances of the delay-embedded vectors
    let mut d2 = vec![0.0; l * l];
    let mut max_d2 = 0.0f64;
    for i in 0..l {
        for j in (i + 1)..l {
            let mut acc = 0.0;
            for k in 0..cfg.m {
                let diff = series[i + k * cfg.tau] - series[j + k * cfg.tau];
                acc += diff * diff;
            }
            d2[i * l + j] = acc;
            d2[j * l + i] = acc;
            if acc > max_d2 {
                max_d2 = acc;
            }
        }
    }
    let eps = cfg.epsilon_fraction * max_d2.sqrt();
    let out: Vec<f64> = d2
        .iter()
        .map(|&v| if v.sqrt() <= eps { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![l, l], out)
}

/// Gramian angular summation field. The series is min-max rescaled to
/// [-1, 1] (a constant series maps to the midpoint 0), converted to polar
/// angles phi = arccos(x), and the image is cos(phi_i + phi_j).
pub fn encode_gaf(series: &[f64]) -> Result<Tensor> {
    if series.is_empty() {
        return Err(CafoError::InvalidConfig("empty series".into()));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(CafoError::NonFinite { op: "encode_gaf" });
    }
    let t = series.len();
    let lo = series.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = series.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let phi: Vec<f64> = series
        .iter()
        .map(|&x| {
            let scaled = if range == 0.0 { 0.0 } else { 2.0 * (x - lo) / range - 1.0 };
            scaled.clamp(-1.0, 1.0).acos()
        })
        .collect();
    let mut out = vec![0.0; t * t];
    for i in 0..t {
        for j in i..t {
            let v = (phi[i] + phi[j]).cos();
            out[i * t + j] = v;
            out[j * t + i] = v;
        }
    }
    Tensor::new(vec![t, t], out)
}

/// Encode feature `j` of an instance matrix [T, D].
fn encode_channel(instance: &Tensor, j: usize, cfg: &EncoderConfig) -> Result<Tensor> {
    let (t, d) = (instance.shape()[0], instance.shape()[1]);
    let src = instance.data();
    let series: Vec<f64> = (0..t).map(|row| src[row * d + j]).collect();
    match cfg.kind {
        EncoderKind::Rp => encode_rp(&series, &cfg.rp),
        EncoderKind::Gaf => encode_gaf(&series),
    }
}

/// Encode one instance into a [D, L, L] stack, channel j from feature j.
pub fn encode_instance(
    instance: &Tensor,
    instance_id: usize,
    cfg: &EncoderConfig,
) -> Result<EncodedStack> {
    let d = instance.shape()[1];
    let l = cfg.image_side(instance.shape()[0])?;
    let mut data = Vec::with_capacity(d * l * l);
    for j in 0..d {
        let ch = encode_channel(instance, j, cfg)?;
        data.extend_from_slice(ch.data());
    }
    Ok(EncodedStack {
        data: Tensor::from_parts(vec![d, l, l], data),
        encoder: cfg.kind,
        instance_id,
    })
}

/// Encode a whole dataset; one stack per instance, parallel across instances.
pub fn encode_dataset(ds: &MtsDataset, cfg: &EncoderConfig) -> Result<Vec<EncodedStack>> {
    ds.validate()?;
    if ds.is_empty() {
        return Ok(Vec::new());
    }
    cfg.image_side(ds.time_steps())?;
    let indexed: Vec<(usize, &Tensor)> = ds.instances.iter().enumerate().collect();
    let results = par_map_slice(&indexed, |(i, inst)| encode_instance(inst, *i, cfg));
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_series_rp_is_all_ones() {
        let img = encode_rp(&[5.0, 5.0, 5.0, 5.0], &RpConfig::default()).unwrap();
        assert_eq!(img.shape(), &[4, 4]);
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ramp_series_rp_is_identity() {
        // distances 1,2,3 all exceed eps = 0.1 * 3
        let img = encode_rp(&[0.0, 1.0, 2.0, 3.0], &RpConfig::default()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(img.at2(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn two_point_rp() {
        let img = encode_rp(&[0.0, 1.0], &RpConfig::default()).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn rp_rejects_short_or_nonfinite_series() {
        let cfg = RpConfig { tau: 2, m: 3, epsilon_fraction: 0.1 };
        assert!(encode_rp(&[1.0, 2.0, 3.0, 4.0, 5.0], &cfg).is_err()); // L would be 1
        assert!(encode_rp(&[1.0, f64::NAN], &RpConfig::default()).is_err());
    }

    #[test]
    fn gaf_of_prescaled_pair() {
        let img = encode_gaf(&[-1.0, 1.0]).unwrap();
        let want = [1.0, -1.0, -1.0, 1.0];
        for (got, w) in img.data().iter().zip(want) {
            assert!((got - w).abs() < 1e-12);
        }
    }

    #[test]
    fn gaf_constant_series_is_all_minus_one() {
        let img = encode_gaf(&[3.0, 3.0, 3.0]).unwrap();
        for &v in img.data() {
            assert!((v - (-1.0)).abs() < 1e-12);
        }
        let single = encode_gaf(&[7.0]).unwrap();
        assert_eq!(single.shape(), &[1, 1]);
        assert!((single.data()[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaf_diagonal_identity() {
        let series = [0.3, -0.7, 0.9, 0.1];
        let img = encode_gaf(&series).unwrap();
        let lo = series.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = series.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (i, &x) in series.iter().enumerate() {
            let scaled = 2.0 * (x - lo) / (hi - lo) - 1.0;
            let want = 2.0 * scaled * scaled - 1.0; // cos(2 phi) = 2 cos^2(phi) - 1
            assert!((img.at2(i, i) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn dataset_encoding_shapes() {
        use crate::data::Split;
        let instances: Vec<Tensor> = (0..2)
            .map(|i| {
                Tensor::new(
                    vec![4, 3],
                    (0..12).map(|k| (k + i) as f64 * 0.5).collect(),
                )
                .unwrap()
            })
            .collect();
        let ds = MtsDataset::new(
            instances,
            vec![0, 1],
            vec!["f0".into(), "f1".into(), "f2".into()],
            vec![0, 1],
            Split::Train,
            2,
        )
        .unwrap();
        let stacks = encode_dataset(&ds, &EncoderConfig::default()).unwrap();
        assert_eq!(stacks.len(), 2);
        assert_eq!(stacks[0].data.shape(), &[3, 4, 4]);

        let empty = MtsDataset::new(vec![], vec![], vec![], vec![], Split::Train, 1).unwrap();
        assert!(encode_dataset(&empty, &EncoderConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn select_channels_reorders_blocks() {
        let stack = EncodedStack {
            data: Tensor::new(vec![3, 1, 1], vec![10.0, 20.0, 30.0]).unwrap(),
            encoder: EncoderKind::Rp,
            instance_id: 0,
        };
        let sel = stack.select_channels(&[2, 0]);
        assert_eq!(sel.data.data(), &[30.0, 10.0]);
    }
}
