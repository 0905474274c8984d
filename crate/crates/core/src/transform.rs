//! CSI preprocessing: the antenna/frequency to angle/delay 2D-DFT, noise
//! augmentation, the two interpolation variants used to build pseudo
//! datasets, and conversion to normalized magnitude model inputs.
//!
//! Per UE antenna the transform applies a DFT along the BS-port axis
//! (angle) and an inverse DFT along the frequency axis (delay). Under
//! unitary scaling the transform preserves the Frobenius norm and is
//! exactly invertible.

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::CsiTensor;
use crate::error::{Error, Result};

const TAU: f64 = std::f64::consts::TAU;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// 1/sqrt(N) scaling on both axes; Parseval holds.
    Unitary,
    /// Plain DFT / IDFT pair (inverse carries the 1/N).
    None,
}

#[derive(Debug, Clone)]
pub struct AngleDelayMap {
    /// [UE antennas, angle bins, delay bins]; angle bins equal BS ports,
    /// delay bins equal frequency bins.
    pub values: Array3<Complex64>,
    pub norm_mode: NormMode,
}

/// Precomputed DFT matrices for one (ports, bins) geometry. Building the
/// matrices once matters when transforming thousands of samples.
#[derive(Debug, Clone)]
pub struct TransformPlan {
    n_ports: usize,
    n_bins: usize,
    norm: NormMode,
    /// Forward DFT along the antenna axis.
    f_angle: Array2<Complex64>,
    /// Inverse DFT along the frequency axis.
    g_delay: Array2<Complex64>,
    /// Inverses for the round trip.
    f_angle_inv: Array2<Complex64>,
    g_delay_inv: Array2<Complex64>,
}

fn dft_matrix(n: usize, sign: f64, scale: f64) -> Array2<Complex64> {
    Array2::from_shape_fn((n, n), |(r, c)| {
        Complex64::from_polar(scale, sign * TAU * (r * c % n) as f64 / n as f64)
    })
}

impl TransformPlan {
    pub fn new(n_ports: usize, n_bins: usize, norm: NormMode) -> TransformPlan {
        let (sa, sd, sa_inv, sd_inv) = match norm {
            NormMode::Unitary => {
                let a = 1.0 / (n_ports as f64).sqrt();
                let d = 1.0 / (n_bins as f64).sqrt();
                (a, d, a, d)
            }
            NormMode::None => (1.0, 1.0 / n_bins as f64, 1.0 / n_ports as f64, 1.0),
        };
        TransformPlan {
            n_ports,
            n_bins,
            norm,
            f_angle: dft_matrix(n_ports, -1.0, sa),
            g_delay: dft_matrix(n_bins, 1.0, sd),
            f_angle_inv: dft_matrix(n_ports, 1.0, sa_inv),
            g_delay_inv: dft_matrix(n_bins, -1.0, sd_inv),
        }
    }

    pub fn apply(&self, csi: &CsiTensor) -> Result<AngleDelayMap> {
        let shape = csi.shape();
        if shape[1] != self.n_ports || shape[2] != self.n_bins {
            return Err(Error::ShapeMismatch {
                context: "angle-delay transform".into(),
                expected: vec![shape[0], self.n_ports, self.n_bins],
                actual: shape.to_vec(),
            });
        }
        if csi.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::NonFinite("CSI input to angle-delay transform".into()));
        }
        let mut out = Array3::zeros((shape[0], self.n_ports, self.n_bins));
        for u in 0..shape[0] {
            let plane = csi.index_axis(Axis(0), u).to_owned();
            let angled = self.f_angle.dot(&plane);
            out.index_axis_mut(Axis(0), u).assign(&angled.dot(&self.g_delay));
        }
        Ok(AngleDelayMap { values: out, norm_mode: self.norm })
    }

    pub fn invert(&self, map: &AngleDelayMap) -> Result<CsiTensor> {
        let shape = map.values.shape();
        if shape[1] != self.n_ports || shape[2] != self.n_bins {
            return Err(Error::ShapeMismatch {
                context: "angle-delay inverse".into(),
                expected: vec![shape[0], self.n_ports, self.n_bins],
                actual: shape.to_vec(),
            });
        }
        let mut out = Array3::zeros((shape[0], self.n_ports, self.n_bins));
        for u in 0..shape[0] {
            let plane = map.values.index_axis(Axis(0), u).to_owned();
            let unangled = self.f_angle_inv.dot(&plane);
            out.index_axis_mut(Axis(0), u).assign(&unangled.dot(&self.g_delay_inv));
        }
        Ok(out)
    }
}

/// Transform one CSI tensor into the angle-delay domain.
pub fn to_angle_delay(csi: &CsiTensor, norm: NormMode) -> Result<AngleDelayMap> {
    TransformPlan::new(csi.shape()[1], csi.shape()[2], norm).apply(csi)
}

/// Invert an angle-delay map back to the antenna-frequency domain.
pub fn from_angle_delay(map: &AngleDelayMap) -> Result<CsiTensor> {
    TransformPlan::new(map.values.shape()[1], map.values.shape()[2], map.norm_mode).invert(map)
}

/// Add i.i.d. circular complex Gaussian noise with per-element standard
/// deviation `sigma` (variance split evenly between re and im).
pub fn augment_noise(csi: &CsiTensor, sigma: f64, rng: &mut impl Rng) -> Result<CsiTensor> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::config(format!("augment sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(csi.clone());
    }
    let part = sigma / std::f64::consts::SQRT_2;
    let mut out = csi.clone();
    for v in out.iter_mut() {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        *v += Complex64::new(re * part, im * part);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterpVariant {
    /// Linear reconstruction on re/im.
    A,
    /// Nearest-neighbor reconstruction.
    B,
}

/// Decimate the frequency axis by two (keeping even bins) and reconstruct
/// the full grid with the variant's kernel. Deterministic; output shape
/// equals input shape.
pub fn interpolate_variant(csi: &CsiTensor, variant: InterpVariant) -> Result<CsiTensor> {
    let n_k = csi.shape()[2];
    if n_k < 8 {
        return Err(Error::config(format!(
            "interpolation needs at least 8 frequency bins, got {n_k}"
        )));
    }
    let mut out = csi.clone();
    for mut lane in out.lanes_mut(Axis(2)) {
        for k in (1..n_k).step_by(2) {
            lane[k] = match variant {
                InterpVariant::A => {
                    if k + 1 < n_k {
                        (lane[k - 1] + lane[k + 1]) * 0.5
                    } else {
                        lane[k - 1]
                    }
                }
                InterpVariant::B => lane[k - 1],
            };
        }
    }
    Ok(out)
}

/// Model input: per-UE-antenna magnitude of the angle-delay map,
/// max-normalized to [0, 1], stacked as channels.
pub fn model_input(map: &AngleDelayMap) -> Array3<f32> {
    let mags = map.values.mapv(|v| v.norm());
    let peak = mags.iter().cloned().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    mags.mapv(|m| (m * scale) as f32)
}

/// Bulk preprocessing of many CSI tensors with one shared plan.
pub fn preprocess_batch(
    csis: &[&CsiTensor],
    norm: NormMode,
) -> Result<Vec<AngleDelayMap>> {
    if csis.is_empty() {
        return Ok(Vec::new());
    }
    let plan = TransformPlan::new(csis[0].shape()[1], csis[0].shape()[2], norm);
    csis.par_iter().map(|c| plan.apply(c)).collect()
}

/// Preprocess a whole dataset into normalized magnitude tensors, keeping
/// labels and metadata.
pub fn preprocess_dataset(
    ds: &crate::dataset::Dataset,
    norm: NormMode,
) -> Result<crate::dataset::MagnitudeSet> {
    let plan = TransformPlan::new(ds.config.n_bs_ports(), ds.config.n_freq_bins, norm);
    let samples: Vec<crate::dataset::MagnitudeSample> = ds
        .samples
        .par_iter()
        .map(|s| -> Result<crate::dataset::MagnitudeSample> {
            let map = plan.apply(&s.csi)?;
            Ok(crate::dataset::MagnitudeSample {
                id: s.id,
                values: model_input(&map),
                position: s.position,
                sector: s.sector,
                is_los: s.is_los,
            })
        })
        .collect::<Result<_>>()?;
    Ok(crate::dataset::MagnitudeSet {
        samples,
        meta: crate::dataset::ContainerMeta {
            payload: crate::dataset::PayloadKind::AngleDelayMagnitude,
            norm: Some(
                match norm {
                    NormMode::Unitary => "unitary",
                    NormMode::None => "none",
                }
                .to_string(),
            ),
            scene: ds.config.clone(),
        },
        format_version: crate::dataset::DATASET_FORMAT_VERSION,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{synthesize_csi, PathSet};
    use crate::scene::SceneConfig;
    use ndarray::Array3;
    use rand::SeedableRng;

    fn random_csi(dims: (usize, usize, usize), seed: u64) -> CsiTensor {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(dims, |_| {
            Complex64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0))
        })
    }

    fn frob(a: &Array3<Complex64>) -> f64 {
        a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    #[test]
    fn parseval_under_unitary_mode() {
        let csi = random_csi((2, 16, 64), 1);
        let ad = to_angle_delay(&csi, NormMode::Unitary).unwrap();
        let rel = (frob(&ad.values) - frob(&csi)).abs() / frob(&csi);
        assert!(rel < 1e-6, "relative norm drift {rel}");
    }

    #[test]
    fn round_trip_inverts() {
        for norm in [NormMode::Unitary, NormMode::None] {
            let csi = random_csi((2, 8, 32), 2);
            let ad = to_angle_delay(&csi, norm).unwrap();
            let back = from_angle_delay(&ad).unwrap();
            let max_dev = csi
                .iter()
                .zip(back.iter())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            assert!(max_dev < 1e-6, "round trip deviation {max_dev} under {norm:?}");
        }
    }

    #[test]
    fn all_ones_concentrates_at_origin_bin() {
        let csi = Array3::from_elem((1, 8, 32), Complex64::new(1.0, 0.0));
        let ad = to_angle_delay(&csi, NormMode::Unitary).unwrap();
        let total: f64 = ad.values.iter().map(|v| v.norm_sqr()).sum();
        let at_origin = ad.values[[0, 0, 0]].norm_sqr();
        assert!((at_origin - total).abs() < 1e-9 * total);
        assert!(at_origin > 0.0);
    }

    #[test]
    fn single_path_energy_concentrates() {
        // boresight path with delay aligned exactly to a delay bin
        let cfg = SceneConfig {
            n_scatterers: 0,
            n_buildings: 0,
            n_freq_bins: 64,
            bs_array_rows: 4,
            bs_array_cols: 2,
            ..SceneConfig::default()
        };
        let d_star = 5;
        let tau = d_star as f64 / (cfg.n_freq_bins as f64 * cfg.bin_spacing_hz());
        let paths = PathSet {
            delays_s: vec![tau],
            azimuths_rad: vec![0.0],
            elevations_rad: vec![0.0],
            gains: vec![Complex64::new(1.0, 0.0)],
            ue_phases: vec![vec![0.0; cfg.n_ue_ant]],
            is_los: true,
        };
        let csi = synthesize_csi(&paths, [150.0, -100.0], &cfg).unwrap();
        let ad = to_angle_delay(&csi, NormMode::Unitary).unwrap();
        // a bin is one (angle, delay) cell, summed over UE antennas
        let total: f64 = ad.values.iter().map(|v| v.norm_sqr()).sum();
        let bins = ad.values.map_axis(ndarray::Axis(0), |lane| {
            lane.iter().map(|v| v.norm_sqr()).sum::<f64>()
        });
        let peak = bins.iter().cloned().fold(0.0, f64::max);
        assert!(peak / total >= 0.90, "peak fraction {}", peak / total);
        assert!(
            (bins[[0, d_star]] - peak).abs() < 1e-9 * total,
            "peak not at angle 0 / delay {d_star}"
        );
    }

    #[test]
    fn transform_is_linear() {
        let x = random_csi((2, 8, 16), 3);
        let y = random_csi((2, 8, 16), 4);
        let alpha = Complex64::new(0.7, -1.3);
        let lhs = to_angle_delay(&(&x * alpha + &y), NormMode::Unitary).unwrap();
        let rhs = to_angle_delay(&x, NormMode::Unitary).unwrap().values * alpha
            + to_angle_delay(&y, NormMode::Unitary).unwrap().values;
        let max_dev = lhs
            .values
            .iter()
            .zip(rhs.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(max_dev < 1e-9);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut csi = random_csi((1, 4, 16), 5);
        csi[[0, 0, 0]] = Complex64::new(f64::NAN, 0.0);
        assert!(to_angle_delay(&csi, NormMode::Unitary).is_err());
    }

    #[test]
    fn augment_sigma_zero_is_identity() {
        let csi = random_csi((1, 4, 16), 6);
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment_noise(&csi, 0.0, &mut r).unwrap(), csi);
        assert!(augment_noise(&csi, -0.1, &mut r).is_err());
    }

    #[test]
    fn augment_variance_matches_sigma() {
        let csi = Array3::from_elem((10, 100, 100), Complex64::ZERO);
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let out = augment_noise(&csi, 0.1, &mut r).unwrap();
        let var = out.iter().map(|v| v.norm_sqr()).sum::<f64>() / out.len() as f64;
        assert!((var - 0.01).abs() / 0.01 < 0.05, "empirical variance {var}");
    }

    #[test]
    fn interpolation_exact_on_constant() {
        let csi = Array3::from_elem((1, 2, 16), Complex64::new(0.3, -0.7));
        for v in [InterpVariant::A, InterpVariant::B] {
            assert_eq!(interpolate_variant(&csi, v).unwrap(), csi);
        }
    }

    #[test]
    fn interpolation_on_linear_ramp() {
        let csi = Array3::from_shape_fn((1, 1, 16), |(_, _, k)| Complex64::new(k as f64, 0.0));
        let a = interpolate_variant(&csi, InterpVariant::A).unwrap();
        let b = interpolate_variant(&csi, InterpVariant::B).unwrap();
        // linear: exact on interior odd bins; nearest: off by the ramp step
        for k in (1..15).step_by(2) {
            assert!((a[[0, 0, k]].re - k as f64).abs() < 1e-12);
            assert!((b[[0, 0, k]].re - (k - 1) as f64).abs() < 1e-12);
        }
        // trailing odd bin copies its left neighbor under both kernels
        assert_eq!(a[[0, 0, 15]], csi[[0, 0, 14]]);
        assert_eq!(b[[0, 0, 15]], csi[[0, 0, 14]]);
    }

    #[test]
    fn variants_differ_on_random_input() {
        let csi = random_csi((2, 4, 32), 7);
        let a = interpolate_variant(&csi, InterpVariant::A).unwrap();
        let b = interpolate_variant(&csi, InterpVariant::B).unwrap();
        let max_diff = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max);
        assert!(max_diff > 0.0);
    }

    #[test]
    fn too_few_bins_rejected() {
        let csi = random_csi((1, 2, 4), 8);
        assert!(interpolate_variant(&csi, InterpVariant::A).is_err());
    }

    #[test]
    fn model_input_is_normalized() {
        let csi = random_csi((2, 8, 16), 9);
        let ad = to_angle_delay(&csi, NormMode::Unitary).unwrap();
        let x = model_input(&ad);
        let max = x.iter().cloned().fold(0.0f32, f32::max);
        assert!((max - 1.0).abs() < 1e-6);
        assert!(x.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // all-zero map stays at zero without NaN
        let zeros = AngleDelayMap {
            values: Array3::from_elem((1, 2, 8), Complex64::ZERO),
            norm_mode: NormMode::Unitary,
        };
        assert!(model_input(&zeros).iter().all(|&v| v == 0.0));
    }
}
