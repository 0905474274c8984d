//! Multipath channel synthesis: geometric path solving (direct plus one
//! bounce per scatterer), planar-array steering, per-bin frequency response,
//! timing-advance phase ramps, AWGN, and full dataset generation.

use ndarray::{Array1, Array3};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dataset::{CsiTensor, Dataset, Sample, TruthRecord, TruthTable, DATASET_FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::rng;
use crate::scene::{distance3, place_receivers, Scene, SceneConfig, SPEED_OF_LIGHT};

const TAU: f64 = std::f64::consts::TAU;

/// Per-receiver multipath parameters, sorted by delay.
#[derive(Debug, Clone)]
pub struct PathSet {
    pub delays_s: Vec<f64>,
    /// Departure azimuths at the BS.
    pub azimuths_rad: Vec<f64>,
    /// Departure elevations at the BS (negative means downward).
    pub elevations_rad: Vec<f64>,
    pub gains: Vec<Complex64>,
    /// Per-path UE reception phases, one entry per UE antenna.
    pub ue_phases: Vec<Vec<f64>>,
    pub is_los: bool,
}

impl PathSet {
    pub fn len(&self) -> usize {
        self.delays_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delays_s.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.delays_s.len();
        if self.azimuths_rad.len() != n
            || self.elevations_rad.len() != n
            || self.gains.len() != n
            || self.ue_phases.len() != n
        {
            return Err(Error::config("path set field lengths differ"));
        }
        for w in self.delays_s.windows(2) {
            if w[1] < w[0] {
                return Err(Error::config("path delays not sorted"));
            }
        }
        if self.delays_s.iter().any(|&d| d <= 0.0) {
            return Err(Error::config("path delays must be strictly positive"));
        }
        Ok(())
    }
}

fn departure_angles(from: [f64; 3], to: [f64; 3]) -> (f64, f64) {
    let dx = to[0] - from[0];
    let dy = to[1] - from[1];
    let dz = to[2] - from[2];
    (dy.atan2(dx), dz.atan2(f64::hypot(dx, dy)))
}

impl Scene {
    /// Solve the direct and single-bounce paths from the BS to a receiver.
    ///
    /// The direct path carries free-space 1/d amplitude and the carrier
    /// phase; each scatterer contributes one bounce attenuated by total
    /// distance and the scatterer's complex reflection coefficient. When
    /// the direct ray is blocked by a building the LoS amplitude is reduced
    /// by the configured penetration loss instead of being removed.
    pub fn solve_paths(&self, rx_xy: [f64; 2]) -> PathSet {
        let cfg = &self.config;
        let bs = cfg.bs_position;
        let rx = [rx_xy[0], rx_xy[1], cfg.rx_height_m];
        let blocked = self.is_blocked(rx_xy);

        let mut entries: Vec<(f64, f64, f64, Complex64)> =
            Vec::with_capacity(1 + self.scatterers.len());

        let d_direct = distance3(bs, rx);
        let tau = d_direct / SPEED_OF_LIGHT;
        let (az, el) = departure_angles(bs, rx);
        let mut amp = 1.0 / d_direct;
        if blocked {
            amp *= 10f64.powf(-cfg.nlos_penetration_db / 20.0);
        }
        entries.push((tau, az, el, Complex64::from_polar(amp, -TAU * cfg.carrier_hz * tau)));

        for sc in &self.scatterers {
            let d1 = distance3(bs, sc.position);
            let d2 = distance3(sc.position, rx);
            let tau = (d1 + d2) / SPEED_OF_LIGHT;
            let (az, el) = departure_angles(bs, sc.position);
            let gain = sc.reflection
                * Complex64::from_polar(1.0 / (d1 + d2), -TAU * cfg.carrier_hz * tau);
            entries.push((tau, az, el, gain));
        }

        entries.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

        let mut rng_ue = rng::stream(cfg.seed, "ue-phase", &rng::position_words(rx_xy));
        let ue_phases = (0..entries.len())
            .map(|_| (0..cfg.n_ue_ant).map(|_| rng_ue.random_range(0.0..TAU)).collect())
            .collect();

        PathSet {
            delays_s: entries.iter().map(|e| e.0).collect(),
            azimuths_rad: entries.iter().map(|e| e.1).collect(),
            elevations_rad: entries.iter().map(|e| e.2).collect(),
            gains: entries.iter().map(|e| e.3).collect(),
            ue_phases,
            is_los: !blocked,
        }
    }
}

/// Uniform-planar-array steering vector, flattened row-major over
/// (rows, cols). Entries have unit magnitude for every angle pair.
pub fn steering_vector(
    cfg: &SceneConfig,
    boresight_deg: f64,
    azimuth_rad: f64,
    elevation_rad: f64,
) -> Array1<Complex64> {
    let psi = azimuth_rad - boresight_deg.to_radians();
    let k = TAU * cfg.element_spacing_wavelengths;
    let horiz = elevation_rad.cos() * psi.sin();
    let vert = elevation_rad.sin();
    let mut a = Array1::zeros(cfg.n_bs_ports());
    for r in 0..cfg.bs_array_rows {
        for c in 0..cfg.bs_array_cols {
            let phase = k * (c as f64 * horiz + r as f64 * vert);
            a[r * cfg.bs_array_cols + c] = Complex64::from_polar(1.0, phase);
        }
    }
    a
}

/// Narrowband-per-bin frequency response of a path set:
/// H[u, b, k] = sum_p g_p * a_ue(p)[u] * a_bs(p)[b] * exp(-j 2 pi f_k tau_p).
pub fn synthesize_csi(paths: &PathSet, rx_xy: [f64; 2], cfg: &SceneConfig) -> Result<CsiTensor> {
    let sector = cfg
        .sector_of(rx_xy)
        .ok_or_else(|| Error::config("receiver coincides with the BS, sector undefined"))?;
    let boresight = cfg.sector_boresights_deg[sector];

    let (n_u, n_b, n_k) = (cfg.n_ue_ant, cfg.n_bs_ports(), cfg.n_freq_bins);
    let mut h: CsiTensor = Array3::zeros((n_u, n_b, n_k));

    let mut freq_phasor = vec![Complex64::ZERO; n_k];
    for p in 0..paths.len() {
        let a_bs = steering_vector(cfg, boresight, paths.azimuths_rad[p], paths.elevations_rad[p]);
        let tau = paths.delays_s[p];
        for (k, fp) in freq_phasor.iter_mut().enumerate() {
            *fp = Complex64::from_polar(1.0, -TAU * cfg.bin_freq_hz(k) * tau);
        }
        for u in 0..n_u {
            let gu = paths.gains[p] * Complex64::from_polar(1.0, paths.ue_phases[p][u]);
            for b in 0..n_b {
                let gub = gu * a_bs[b];
                let mut row = h.slice_mut(ndarray::s![u, b, ..]);
                let row = row.as_slice_mut().expect("contiguous csi row");
                for (hk, fp) in row.iter_mut().zip(&freq_phasor) {
                    *hk += gub * fp;
                }
            }
        }
    }
    Ok(h)
}

/// Apply the timing-advance phase ramp and additive complex Gaussian noise.
///
/// The ramp multiplies bin k by exp(-j 2 pi f_k ta). Noise variance is set
/// per element so that mean signal power over noise power equals the target
/// SNR; `snr_db = +inf` disables noise entirely.
pub fn apply_ta_and_noise(
    csi: &CsiTensor,
    ta_s: f64,
    snr_db: f64,
    bin_spacing_hz: f64,
    rng: &mut impl Rng,
) -> Result<CsiTensor> {
    if !ta_s.is_finite() || ta_s < 0.0 {
        return Err(Error::NonFinite(format!("timing advance {ta_s}")));
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::NonFinite(format!("snr_db {snr_db}")));
    }
    let noise_enabled = snr_db.is_finite();
    if ta_s == 0.0 && !noise_enabled {
        return Ok(csi.clone());
    }

    let mut out = csi.clone();
    if ta_s > 0.0 {
        let n_k = out.shape()[2];
        let ramp: Vec<Complex64> = (0..n_k)
            .map(|k| Complex64::from_polar(1.0, -TAU * (k as f64 * bin_spacing_hz) * ta_s))
            .collect();
        for mut lane in out.lanes_mut(ndarray::Axis(2)) {
            for (v, r) in lane.iter_mut().zip(&ramp) {
                *v *= r;
            }
        }
    }

    if noise_enabled {
        let n = out.len() as f64;
        let signal_power = out.iter().map(|v| v.norm_sqr()).sum::<f64>() / n;
        let noise_var = signal_power / 10f64.powf(snr_db / 10.0);
        let sigma_part = (noise_var / 2.0).sqrt();
        for v in out.iter_mut() {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            *v += Complex64::new(re * sigma_part, im * sigma_part);
        }
    }
    Ok(out)
}

fn quantize_f32(csi: &mut CsiTensor) {
    for v in csi.iter_mut() {
        *v = Complex64::new(v.re as f32 as f64, v.im as f32 as f64);
    }
}

/// Build one sample; deterministic in (config, seed, id, site).
fn build_sample(scene: &Scene, id: u64, xy: [f64; 2], sector: u8, labeled: bool) -> Result<Sample> {
    let cfg = &scene.config;
    let paths = scene.solve_paths(xy);
    let csi = synthesize_csi(&paths, xy, cfg)?;

    let ta = if cfg.ta_max_s > 0.0 {
        rng::stream(cfg.seed, "ta", &[id]).random_range(0.0..cfg.ta_max_s)
    } else {
        0.0
    };
    let mut noise_rng = rng::stream(cfg.seed, "awgn", &[id]);
    let mut csi = apply_ta_and_noise(&csi, ta, cfg.snr_db, cfg.bin_spacing_hz(), &mut noise_rng)?;
    quantize_f32(&mut csi);

    Ok(Sample {
        id,
        csi,
        position: labeled.then_some(xy),
        sector,
        is_los: paths.is_los,
        origin_sector: sector,
    })
}

/// Which sample ids carry labels: a seeded draw of exactly
/// round(labeled_fraction * n) indices.
fn labeled_mask(cfg: &SceneConfig, n: usize) -> Vec<bool> {
    let want = (cfg.labeled_fraction * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(cfg.seed, "labels", &[]);
    use rand::seq::SliceRandom;
    idx.shuffle(&mut r);
    let mut mask = vec![false; n];
    for &i in idx.iter().take(want.min(n)) {
        mask[i] = true;
    }
    mask
}

/// Generate the full dataset together with the ground-truth table for every
/// receiver. Identical (config, seed) produce byte-identical serialized
/// datasets regardless of thread count.
pub fn generate_with_truth(config: &SceneConfig) -> Result<(Dataset, TruthTable)> {
    let scene = Scene::from_config(config.clone())?;
    let sites = place_receivers(config)?;
    let mask = labeled_mask(config, sites.len());

    let samples: Vec<Sample> = sites
        .par_iter()
        .enumerate()
        .map(|(i, site)| build_sample(&scene, i as u64, site.xy, site.sector, mask[i]))
        .collect::<Result<_>>()?;

    let records = samples
        .iter()
        .zip(&sites)
        .map(|(s, site)| TruthRecord {
            id: s.id,
            position: site.xy,
            sector: site.sector,
            is_los: s.is_los,
        })
        .collect();

    Ok((
        Dataset {
            samples,
            config: config.clone(),
            seed: config.seed,
            format_version: DATASET_FORMAT_VERSION,
        },
        TruthTable { records },
    ))
}

/// Generate the dataset alone.
pub fn generate_dataset(config: &SceneConfig) -> Result<Dataset> {
    Ok(generate_with_truth(config)?.0)
}

/// Streaming generation: samples are produced in deterministic id order and
/// handed to `sink` one at a time, so paper-scale datasets never need to be
/// resident in memory. Parallelism happens inside each chunk.
pub fn generate_streaming(
    config: &SceneConfig,
    chunk: usize,
    mut sink: impl FnMut(Sample, TruthRecord) -> Result<()>,
) -> Result<()> {
    let scene = Scene::from_config(config.clone())?;
    let sites = place_receivers(config)?;
    let mask = labeled_mask(config, sites.len());

    for start in (0..sites.len()).step_by(chunk.max(1)) {
        let end = (start + chunk.max(1)).min(sites.len());
        let block: Vec<Sample> = (start..end)
            .into_par_iter()
            .map(|i| build_sample(&scene, i as u64, sites[i].xy, sites[i].sector, mask[i]))
            .collect::<Result<_>>()?;
        for s in block {
            let i = s.id as usize;
            let rec = TruthRecord {
                id: s.id,
                position: sites[i].xy,
                sector: sites[i].sector,
                is_los: s.is_los,
            };
            sink(s, rec)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Region2;
    use ndarray::s;
    use rand::SeedableRng;

    fn bare_config() -> SceneConfig {
        SceneConfig {
            n_scatterers: 0,
            n_buildings: 0,
            n_rx_per_sector: [4, 4, 4],
            rx_grid_spacing_m: 2.0,
            n_freq_bins: 32,
            bs_array_rows: 4,
            bs_array_cols: 2,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn no_scatterers_single_path_with_geometric_delay() {
        let cfg = bare_config();
        let scene = Scene::from_config(cfg.clone()).unwrap();
        let rx = [399.0, -101.0]; // sector 0, ~299 m ground range
        let paths = scene.solve_paths(rx);
        assert_eq!(paths.len(), 1);
        assert!(paths.is_los);
        let d3 = distance3(cfg.bs_position, [rx[0], rx[1], cfg.rx_height_m]);
        assert!((paths.delays_s[0] - d3 / SPEED_OF_LIGHT).abs() < 1e-18);
        paths.validate().unwrap();
    }

    #[test]
    fn collinear_scatterer_beyond_rx_has_longer_delay() {
        let cfg = bare_config();
        let mut scene = Scene::from_config(cfg.clone()).unwrap();
        // scatterer on the BS->rx ray, 50 m past the receiver
        scene.scatterers.push(crate::scene::Scatterer {
            position: [200.0, -100.0, cfg.rx_height_m],
            reflection: Complex64::new(0.5, 0.0),
        });
        let paths = scene.solve_paths([150.0, -100.0]);
        assert_eq!(paths.len(), 2);
        assert!(paths.delays_s[1] > paths.delays_s[0]);
        assert!(paths.is_los);
    }

    #[test]
    fn bounce_delays_never_beat_line_of_sight() {
        let cfg = SceneConfig {
            n_scatterers: 20,
            n_buildings: 0,
            n_rx_per_sector: [4, 4, 4],
            n_freq_bins: 16,
            ..SceneConfig::default()
        };
        let scene = Scene::from_config(cfg).unwrap();
        for rx in [[150.0, -90.0], [60.0, -30.0], [80.0, -190.0]] {
            let paths = scene.solve_paths(rx);
            assert_eq!(paths.len(), 21);
            let los = paths.delays_s[0];
            assert!(paths.delays_s.iter().all(|&d| d >= los));
        }
    }

    #[test]
    fn steering_vector_entries_are_unit_magnitude() {
        let cfg = SceneConfig::default();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let az = r.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let el = r.random_range(-1.0..1.0f64);
            let a = steering_vector(&cfg, 120.0, az, el);
            for v in a.iter() {
                assert!((v.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    /// Boresight path with zero delay makes every CSI entry equal the gain.
    #[test]
    fn flat_csi_for_boresight_zero_delay_path() {
        let cfg = bare_config();
        let g = Complex64::new(0.3, -0.4);
        let paths = PathSet {
            delays_s: vec![0.0],
            azimuths_rad: vec![0.0], // sector-0 boresight
            elevations_rad: vec![0.0],
            gains: vec![g],
            ue_phases: vec![vec![0.0; cfg.n_ue_ant]],
            is_los: true,
        };
        let h = synthesize_csi(&paths, [150.0, -100.0], &cfg).unwrap();
        for v in h.iter() {
            assert!((v - g).norm() < 1e-12);
        }
    }

    #[test]
    fn adjacent_bin_phase_step_matches_delay() {
        let cfg = bare_config();
        let tau = 1.0e-6;
        let paths = PathSet {
            delays_s: vec![tau],
            azimuths_rad: vec![0.2],
            elevations_rad: vec![-0.1],
            gains: vec![Complex64::new(1.0, 0.0)],
            ue_phases: vec![vec![0.4, 1.3]],
            is_los: true,
        };
        let h = synthesize_csi(&paths, [150.0, -100.0], &cfg).unwrap();
        let expected = -TAU * cfg.bin_spacing_hz() * tau;
        for u in 0..cfg.n_ue_ant {
            for b in 0..cfg.n_bs_ports() {
                for k in 0..cfg.n_freq_bins - 1 {
                    let step = (h[[u, b, k + 1]] * h[[u, b, k]].conj()).arg();
                    let diff = (step - expected).rem_euclid(TAU);
                    let diff = diff.min(TAU - diff);
                    assert!(diff < 1e-9, "step {step} vs {expected}");
                }
            }
        }
    }

    #[test]
    fn opposite_phase_paths_cancel_at_target_bin() {
        let cfg = bare_config();
        let k_star = 20usize;
        let f_star = cfg.bin_freq_hz(k_star);
        let tau1 = 0.4e-6;
        let tau2 = tau1 + 1.0 / (2.0 * f_star); // pi phase gap at k_star
        let paths = PathSet {
            delays_s: vec![tau1, tau2],
            azimuths_rad: vec![0.0, 0.0],
            elevations_rad: vec![0.0, 0.0],
            gains: vec![Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0)],
            ue_phases: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            is_los: true,
        };
        let h = synthesize_csi(&paths, [150.0, -100.0], &cfg).unwrap();
        let cancelled = h.slice(s![.., .., k_star]);
        for v in cancelled.iter() {
            assert!(v.norm() < 1e-9, "expected cancellation, |H| = {}", v.norm());
        }
        // sanity: other bins are not all zero
        assert!(h.slice(s![.., .., 0]).iter().any(|v| v.norm() > 0.5));
    }

    #[test]
    fn ta_zero_noise_disabled_is_identity() {
        let cfg = bare_config();
        let h = Array3::from_shape_fn((2, 8, 32), |(u, b, k)| {
            Complex64::new((u + b) as f64 * 0.1, k as f64 * 0.01)
        });
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let out =
            apply_ta_and_noise(&h, 0.0, f64::INFINITY, cfg.bin_spacing_hz(), &mut r).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn ta_ramp_preserves_magnitudes() {
        let cfg = bare_config();
        let h = Array3::from_shape_fn((2, 8, 32), |(u, b, k)| {
            Complex64::new(((u * 37 + b * 11 + k) % 13) as f64 * 0.1 - 0.5, (k as f64).sin())
        });
        let span = cfg.bin_spacing_hz() * cfg.n_freq_bins as f64;
        let ta = 1.0 / (2.0 * span);
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let out = apply_ta_and_noise(&h, ta, f64::INFINITY, cfg.bin_spacing_hz(), &mut r).unwrap();
        for (a, b) in h.iter().zip(out.iter()) {
            assert!((a.norm() - b.norm()).abs() < 1e-12);
        }
        // known ramp at bin 1
        let expected = -TAU * cfg.bin_spacing_hz() * ta;
        let got = (out[[0, 0, 1]] * h[[0, 0, 1]].conj()).arg();
        assert!((got - expected).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_snr_and_negative_ta() {
        let h = Array3::from_elem((1, 2, 4), Complex64::new(1.0, 0.0));
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!(apply_ta_and_noise(&h, -1.0, 10.0, 1.0, &mut r).is_err());
        assert!(apply_ta_and_noise(&h, 0.0, f64::NAN, 1.0, &mut r).is_err());
        assert!(apply_ta_and_noise(&h, 0.0, f64::NEG_INFINITY, 1.0, &mut r).is_err());
    }

    #[test]
    fn monte_carlo_snr_within_tolerance() {
        // 10^5 elements at 10 dB: empirical ratio within +-0.2 dB
        let h = Array3::from_elem((10, 100, 100), Complex64::new(1.0, 1.0));
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let out = apply_ta_and_noise(&h, 0.0, 10.0, 30e3, &mut r).unwrap();
        let sig = h.iter().map(|v| v.norm_sqr()).sum::<f64>() / h.len() as f64;
        let noise = out
            .iter()
            .zip(h.iter())
            .map(|(o, i)| (o - i).norm_sqr())
            .sum::<f64>()
            / h.len() as f64;
        let snr_emp = 10.0 * (sig / noise).log10();
        assert!((snr_emp - 10.0).abs() < 0.2, "empirical snr {snr_emp}");
    }

    #[test]
    fn csi_norm_bounded_by_gain_sum() {
        let cfg = bare_config();
        let scene = Scene::from_config(SceneConfig { n_scatterers: 10, ..cfg.clone() }).unwrap();
        for rx in [[140.0, -80.0], [30.0, -40.0]] {
            let paths = scene.solve_paths(rx);
            let h = synthesize_csi(&paths, rx, &cfg).unwrap();
            let frob = h.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            let gain_sum: f64 = paths.gains.iter().map(|g| g.norm()).sum();
            let bound = gain_sum * (h.len() as f64).sqrt();
            assert!(frob <= bound * (1.0 + 1e-12), "{frob} > {bound}");
        }
    }

    fn desk_tiny() -> SceneConfig {
        SceneConfig {
            n_rx_per_sector: [12, 6, 9],
            rx_grid_spacing_m: 3.0,
            n_freq_bins: 16,
            bs_array_rows: 2,
            bs_array_cols: 2,
            n_scatterers: 5,
            n_buildings: 3,
            labeled_fraction: 0.25,
            seed: 42,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn generated_counts_and_labels_match_config() {
        let cfg = desk_tiny();
        let (ds, truth) = generate_with_truth(&cfg).unwrap();
        assert_eq!(ds.samples.len(), 27);
        assert_eq!(ds.sector_counts(), [12, 6, 9]);
        let labeled = ds.labeled_indices().len();
        assert_eq!(labeled, (0.25f64 * 27.0).round() as usize);
        assert_eq!(truth.records.len(), 27);
        // labels agree with truth where present
        for s in &ds.samples {
            if let Some(p) = s.position {
                assert_eq!(p, truth.get(s.id).unwrap().position);
            }
        }
    }

    #[test]
    fn paper_geometry_with_tiny_csi_dims() {
        // paper receiver counts, shrunken channel dims to keep this fast
        let cfg = SceneConfig {
            n_freq_bins: 4,
            n_ue_ant: 1,
            bs_array_rows: 1,
            bs_array_cols: 2,
            n_scatterers: 2,
            n_buildings: 2,
            ..SceneConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        assert_eq!(ds.samples.len(), 40_817);
        assert_eq!(ds.sector_counts(), [21_745, 6_764, 12_308]);
        assert_eq!(ds.labeled_indices().len(), 4_082); // round(0.1 * 40817)
    }

    #[test]
    fn full_fraction_labels_everything() {
        let cfg = SceneConfig { labeled_fraction: 1.0, ..desk_tiny() };
        let ds = generate_dataset(&cfg).unwrap();
        assert!(ds.samples.iter().all(|s| s.position.is_some()));
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let cfg = desk_tiny();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.cplb"), dir.path().join("b.cplb"));
        generate_dataset(&cfg).unwrap().save(&p1).unwrap();
        generate_dataset(&cfg).unwrap().save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn streaming_matches_collected_generation() {
        let cfg = desk_tiny();
        let ds = generate_dataset(&cfg).unwrap();
        let mut streamed = Vec::new();
        generate_streaming(&cfg, 5, |s, _| {
            streamed.push(s);
            Ok(())
        })
        .unwrap();
        assert_eq!(streamed.len(), ds.samples.len());
        for (a, b) in streamed.iter().zip(&ds.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.csi, b.csi);
            assert_eq!(a.position, b.position);
        }
    }

    #[test]
    fn blocked_receivers_are_tagged_nlos() {
        let mut cfg = desk_tiny();
        cfg.n_buildings = 0;
        let mut scene = Scene::from_config(cfg.clone()).unwrap();
        scene.buildings.push(crate::scene::Building { center: [130.0, -100.0], radius_m: 5.0 });
        let shadowed = scene.solve_paths([160.0, -100.0]);
        assert!(!shadowed.is_los);
        let clear = scene.solve_paths([100.0, -40.0]);
        assert!(clear.is_los);
        // penetration keeps the direct path present but attenuated
        let open = Scene::from_config(cfg).unwrap();
        let unblocked = open.solve_paths([160.0, -100.0]);
        let ratio = shadowed.gains[0].norm() / unblocked.gains[0].norm();
        assert!((ratio - 0.1).abs() < 1e-9, "20 dB penetration, got ratio {ratio}");
    }

    #[test]
    fn scatterer_region_must_be_ordered() {
        let cfg = SceneConfig {
            scatterer_region: Region2 { min: [10.0, 0.0], max: [-10.0, 5.0] },
            ..desk_tiny()
        };
        assert!(Scene::from_config(cfg).is_err());
    }
}
