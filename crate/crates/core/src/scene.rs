//! Scene geometry for the sectorized outdoor deployment: configuration,
//! receiver placement on a regular grid inside 120-degree sector wedges,
//! and the seeded scatterer / building furniture that shapes multipath.
//!
//! The base station serves three sectors whose boresights are mutually
//! 120 degrees apart. Receivers are grid points inside each wedge, chosen
//! closest-first from the base station so that per-sector counts are exact.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Receivers are never placed closer to the BS than this.
const MIN_PLACEMENT_RADIUS_M: f64 = 5.0;
/// Hard cap on placement radius; a sector that cannot host its receiver
/// count inside this radius is a configuration error.
const MAX_PLACEMENT_RADIUS_M: f64 = 2000.0;

/// Axis-aligned 2D box.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Region2 {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Region2 {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }
}

/// Full description of one synthetic scene.
///
/// Defaults mirror the reference deployment: BS at (100, -100, 30) with an
/// 8x4 port array, 3.5 GHz carrier, 30 kHz subcarrier spacing, 408 measured
/// frequency bins on a comb-8 grid, and 10% labeled receivers.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub bs_position: [f64; 3],
    pub carrier_hz: f64,
    pub subcarrier_spacing_hz: f64,
    pub n_freq_bins: usize,
    /// Measured bins sit every `comb_stride` subcarriers from band start.
    pub comb_stride: usize,
    pub n_ue_ant: usize,
    pub bs_array_rows: usize,
    pub bs_array_cols: usize,
    pub element_spacing_wavelengths: f64,
    pub sector_boresights_deg: [f64; 3],
    pub n_rx_per_sector: [usize; 3],
    pub rx_height_m: f64,
    pub rx_grid_spacing_m: f64,
    pub n_scatterers: usize,
    pub scatterer_region: Region2,
    pub scatterer_height_m: f64,
    /// Magnitude of the per-scatterer complex reflection coefficient.
    pub reflection_coeff_mag: f64,
    pub n_buildings: usize,
    pub building_radius_m: f64,
    /// LoS amplitude attenuation applied when the direct ray is blocked.
    pub nlos_penetration_db: f64,
    pub labeled_fraction: f64,
    pub snr_db: f64,
    pub ta_max_s: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            bs_position: [100.0, -100.0, 30.0],
            carrier_hz: 3.5e9,
            subcarrier_spacing_hz: 30e3,
            n_freq_bins: 408,
            comb_stride: 8,
            n_ue_ant: 2,
            bs_array_rows: 8,
            bs_array_cols: 4,
            element_spacing_wavelengths: 0.5,
            sector_boresights_deg: [0.0, 120.0, 240.0],
            n_rx_per_sector: [21_745, 6_764, 12_308],
            rx_height_m: 1.5,
            rx_grid_spacing_m: 1.0,
            n_scatterers: 24,
            scatterer_region: Region2 { min: [-100.0, -300.0], max: [300.0, 100.0] },
            scatterer_height_m: 10.0,
            reflection_coeff_mag: 0.5,
            n_buildings: 8,
            building_radius_m: 4.0,
            nlos_penetration_db: 20.0,
            labeled_fraction: 0.10,
            snr_db: 20.0,
            ta_max_s: 0.5e-6,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn n_bs_ports(&self) -> usize {
        self.bs_array_rows * self.bs_array_cols
    }

    pub fn total_receivers(&self) -> usize {
        self.n_rx_per_sector.iter().sum()
    }

    /// Spacing between adjacent measured frequency bins.
    pub fn bin_spacing_hz(&self) -> f64 {
        self.subcarrier_spacing_hz * self.comb_stride as f64
    }

    /// Frequency of bin `k` relative to band start.
    pub fn bin_freq_hz(&self, k: usize) -> f64 {
        k as f64 * self.bin_spacing_hz()
    }

    pub fn bs_xy(&self) -> [f64; 2] {
        [self.bs_position[0], self.bs_position[1]]
    }

    /// All validation diagnostics for this config; empty means valid.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut d = Vec::new();
        let positive = [
            ("carrier_hz", self.carrier_hz),
            ("subcarrier_spacing_hz", self.subcarrier_spacing_hz),
            ("rx_grid_spacing_m", self.rx_grid_spacing_m),
            ("element_spacing_wavelengths", self.element_spacing_wavelengths),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                d.push(format!("scene.{name} must be positive and finite, got {v}"));
            }
        }
        let counts = [
            ("n_freq_bins", self.n_freq_bins),
            ("comb_stride", self.comb_stride),
            ("n_ue_ant", self.n_ue_ant),
            ("bs_array_rows", self.bs_array_rows),
            ("bs_array_cols", self.bs_array_cols),
        ];
        for (name, v) in counts {
            if v == 0 {
                d.push(format!("scene.{name} must be at least 1"));
            }
        }
        if self.n_rx_per_sector.iter().any(|&n| n == 0) {
            d.push(format!(
                "scene.n_rx_per_sector entries must be positive, got {:?}",
                self.n_rx_per_sector
            ));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            d.push(format!(
                "scene.labeled_fraction must lie in (0, 1], got {}",
                self.labeled_fraction
            ));
        }
        // Boresights must be mutually 120 degrees apart modulo 360.
        let b = self.sector_boresights_deg;
        for (i, j) in [(0, 1), (1, 2), (2, 0)] {
            let gap = wrap_deg(b[j] - b[i]).abs();
            if (gap - 120.0).abs() > 1e-9 {
                d.push(format!(
                    "scene.sector_boresights_deg must be mutually 120 degrees apart, \
                     sectors {i} and {j} differ by {gap:.6}"
                ));
            }
        }
        if self.scatterer_region.min[0] >= self.scatterer_region.max[0]
            || self.scatterer_region.min[1] >= self.scatterer_region.max[1]
        {
            d.push("scene.scatterer_region must have min < max on both axes".into());
        }
        if !(self.reflection_coeff_mag > 0.0 && self.reflection_coeff_mag <= 1.0) {
            d.push(format!(
                "scene.reflection_coeff_mag must lie in (0, 1], got {}",
                self.reflection_coeff_mag
            ));
        }
        if self.ta_max_s < 0.0 || !self.ta_max_s.is_finite() {
            d.push(format!("scene.ta_max_s must be non-negative, got {}", self.ta_max_s));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            d.push("scene.snr_db must be finite or +inf (noise disabled)".into());
        }
        d
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let d = self.diagnostics();
        if d.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(d.join("; ")))
        }
    }

    /// Sector whose wedge contains the azimuth from the BS to `xy`,
    /// or None closer to the BS than the placement minimum.
    pub fn sector_of(&self, xy: [f64; 2]) -> Option<usize> {
        let dx = xy[0] - self.bs_position[0];
        let dy = xy[1] - self.bs_position[1];
        if dx == 0.0 && dy == 0.0 {
            return None;
        }
        let az = dy.atan2(dx).to_degrees();
        (0..3).find(|&k| in_wedge(az, self.sector_boresights_deg[k]))
    }
}

/// Wrap an angle in degrees to (-180, 180].
pub fn wrap_deg(a: f64) -> f64 {
    let mut x = a % 360.0;
    if x <= -180.0 {
        x += 360.0;
    } else if x > 180.0 {
        x -= 360.0;
    }
    x
}

/// Half-open wedge membership: relative azimuth in (-60, 60].
fn in_wedge(az_deg: f64, boresight_deg: f64) -> bool {
    let rel = wrap_deg(az_deg - boresight_deg);
    rel > -60.0 && rel <= 60.0
}

/// A placed receiver site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceiverSite {
    pub xy: [f64; 2],
    pub sector: u8,
}

/// Lay receivers on a regular grid of the configured spacing inside each
/// sector wedge, taking the points closest to the BS first so that
/// per-sector counts are exact. Fully deterministic.
pub fn place_receivers(config: &SceneConfig) -> Result<Vec<ReceiverSite>> {
    config.ensure_valid()?;
    let s = config.rx_grid_spacing_m;
    let bs = config.bs_xy();

    // Radius needed to host n grid cells in a 120-degree annulus, with margin.
    let mut needed_radius = [0.0f64; 3];
    for k in 0..3 {
        let n = config.n_rx_per_sector[k] as f64;
        let r = (3.0 * n * s * s / std::f64::consts::PI
            + MIN_PLACEMENT_RADIUS_M * MIN_PLACEMENT_RADIUS_M)
            .sqrt()
            + 4.0 * s;
        if r > MAX_PLACEMENT_RADIUS_M {
            return Err(Error::WedgeTooSmall {
                sector: k,
                requested: config.n_rx_per_sector[k],
                spacing_m: s,
                max_radius_m: MAX_PLACEMENT_RADIUS_M,
            });
        }
        needed_radius[k] = r;
    }
    let r_max = needed_radius.iter().cloned().fold(0.0, f64::max);
    let span = (r_max / s).ceil() as i64 + 1;

    // Candidate grid points per sector, keyed for exact deterministic order.
    let mut per_sector: [Vec<(f64, i64, i64)>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for i in -span..=span {
        for j in -span..=span {
            let x = bs[0] + i as f64 * s;
            let y = bs[1] + j as f64 * s;
            let d2 = (i as f64 * s).powi(2) + (j as f64 * s).powi(2);
            if d2 < MIN_PLACEMENT_RADIUS_M * MIN_PLACEMENT_RADIUS_M || d2 > r_max * r_max {
                continue;
            }
            if let Some(k) = config.sector_of([x, y]) {
                per_sector[k].push((d2, i, j));
            }
        }
    }

    let mut sites = Vec::with_capacity(config.total_receivers());
    for (k, cand) in per_sector.iter_mut().enumerate() {
        let want = config.n_rx_per_sector[k];
        if cand.len() < want {
            return Err(Error::WedgeTooSmall {
                sector: k,
                requested: want,
                spacing_m: s,
                max_radius_m: MAX_PLACEMENT_RADIUS_M,
            });
        }
        cand.sort_by(|a, b| {
            a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        });
        for &(_, i, j) in cand.iter().take(want) {
            sites.push(ReceiverSite {
                xy: [bs[0] + i as f64 * s, bs[1] + j as f64 * s],
                sector: k as u8,
            });
        }
    }
    Ok(sites)
}

/// A point scatterer with its complex reflection coefficient.
#[derive(Debug, Clone, Copy)]
pub struct Scatterer {
    pub position: [f64; 3],
    pub reflection: Complex64,
}

/// An opaque building cylinder; the direct ray is NLoS when its 2D segment
/// passes within `radius_m` of the center.
#[derive(Debug, Clone, Copy)]
pub struct Building {
    pub center: [f64; 2],
    pub radius_m: f64,
}

/// Scene furniture generated once per (config, seed).
#[derive(Debug, Clone)]
pub struct Scene {
    pub config: SceneConfig,
    pub scatterers: Vec<Scatterer>,
    pub buildings: Vec<Building>,
}

impl Scene {
    pub fn from_config(config: SceneConfig) -> Result<Scene> {
        config.ensure_valid()?;
        let region = config.scatterer_region;
        let mut rng_s = rng::stream(config.seed, "scatterers", &[]);
        let scatterers = (0..config.n_scatterers)
            .map(|_| {
                let x = rng_s.random_range(region.min[0]..=region.max[0]);
                let y = rng_s.random_range(region.min[1]..=region.max[1]);
                let phase = rng_s.random_range(0.0..std::f64::consts::TAU);
                Scatterer {
                    position: [x, y, config.scatterer_height_m],
                    reflection: Complex64::from_polar(config.reflection_coeff_mag, phase),
                }
            })
            .collect();

        let mut rng_b = rng::stream(config.seed, "buildings", &[]);
        let bs = config.bs_xy();
        let mut buildings = Vec::with_capacity(config.n_buildings);
        while buildings.len() < config.n_buildings {
            let c = [
                rng_b.random_range(region.min[0]..=region.max[0]),
                rng_b.random_range(region.min[1]..=region.max[1]),
            ];
            // keep the BS itself clear of building footprints
            let d = f64::hypot(c[0] - bs[0], c[1] - bs[1]);
            if d > 3.0 * config.building_radius_m + MIN_PLACEMENT_RADIUS_M {
                buildings.push(Building { center: c, radius_m: config.building_radius_m });
            }
        }

        Ok(Scene { config, scatterers, buildings })
    }

    /// Deterministic blockage test: does the BS->rx segment pass within any
    /// building radius (in the horizontal plane)?
    pub fn is_blocked(&self, rx_xy: [f64; 2]) -> bool {
        let bs = self.config.bs_xy();
        self.buildings.iter().any(|b| {
            segment_point_distance(bs, rx_xy, b.center) <= b.radius_m
        })
    }
}

/// Distance from point `p` to segment `a`-`b` in 2D.
fn segment_point_distance(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let denom = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if denom > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / denom).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
    f64::hypot(p[0] - q[0], p[1] - q[1])
}

pub fn distance3(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(counts: [usize; 3], spacing: f64) -> SceneConfig {
        SceneConfig {
            n_rx_per_sector: counts,
            rx_grid_spacing_m: spacing,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn paper_scale_sector_counts() {
        let cfg = SceneConfig::default();
        let sites = place_receivers(&cfg).unwrap();
        let mut counts = [0usize; 3];
        for s in &sites {
            counts[s.sector as usize] += 1;
        }
        assert_eq!(counts, [21_745, 6_764, 12_308]);
        assert_eq!(sites.len(), 40_817);
    }

    #[test]
    fn one_receiver_per_wedge() {
        let cfg = small_config([1, 1, 1], 1.0);
        let sites = place_receivers(&cfg).unwrap();
        assert_eq!(sites.len(), 3);
        for s in &sites {
            let dx = s.xy[0] - cfg.bs_position[0];
            let dy = s.xy[1] - cfg.bs_position[1];
            let az = dy.atan2(dx).to_degrees();
            let rel = wrap_deg(az - cfg.sector_boresights_deg[s.sector as usize]);
            assert!(rel.abs() <= 60.0 + 1e-9, "sector {} rel azimuth {}", s.sector, rel);
        }
    }

    #[test]
    fn nearest_neighbor_distance_equals_spacing() {
        // brute-force pairwise scan
        let cfg = small_config([100, 100, 100], 1.0);
        let sites = place_receivers(&cfg).unwrap();
        for (i, a) in sites.iter().enumerate() {
            let mut nn = f64::INFINITY;
            for (j, b) in sites.iter().enumerate() {
                if i != j {
                    nn = nn.min(f64::hypot(a.xy[0] - b.xy[0], a.xy[1] - b.xy[1]));
                }
            }
            assert!(
                (nn - 1.0).abs() < 1e-9,
                "receiver {i} at {:?} has nearest neighbor {nn}",
                a.xy
            );
        }
    }

    #[test]
    fn placement_is_deterministic() {
        let cfg = small_config([50, 20, 30], 2.0);
        assert_eq!(place_receivers(&cfg).unwrap(), place_receivers(&cfg).unwrap());
    }

    #[test]
    fn impossible_count_names_sector() {
        let cfg = small_config([10, 50_000_000, 10], 1.0);
        match place_receivers(&cfg) {
            Err(Error::WedgeTooSmall { sector, .. }) => assert_eq!(sector, 1),
            other => panic!("expected WedgeTooSmall, got {other:?}"),
        }
    }

    #[test]
    fn boresight_gap_is_checked() {
        let cfg = SceneConfig {
            sector_boresights_deg: [0.0, 100.0, 240.0],
            ..SceneConfig::default()
        };
        assert!(cfg.ensure_valid().is_err());
    }

    #[test]
    fn scene_furniture_is_seeded() {
        let cfg = small_config([5, 5, 5], 2.0);
        let a = Scene::from_config(cfg.clone()).unwrap();
        let b = Scene::from_config(cfg).unwrap();
        assert_eq!(a.scatterers.len(), b.scatterers.len());
        for (x, y) in a.scatterers.iter().zip(&b.scatterers) {
            assert_eq!(x.position, y.position);
            assert_eq!(x.reflection, y.reflection);
        }
    }

    #[test]
    fn segment_distance_basics() {
        assert!((segment_point_distance([0.0, 0.0], [10.0, 0.0], [5.0, 3.0]) - 3.0).abs() < 1e-12);
        assert!((segment_point_distance([0.0, 0.0], [10.0, 0.0], [-4.0, 0.0]) - 4.0).abs() < 1e-12);
    }
}
