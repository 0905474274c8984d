//! Samples, datasets, and the binary container format.
//!
//! One container layout serves both raw complex CSI datasets and
//! preprocessed magnitude tensors. Little-endian throughout:
//!
//! ```text
//! magic "CPLB" | format_version u32 | sample_count u64 | dims u16 x3
//! | meta_len u32 | meta (UTF-8 TOML: payload kind + scene config snapshot)
//! per sample:
//!   id u64 | sector u8 | los u8 | has_label u8 | label f64 x2
//!   | payload: complex -> re/im f32 interleaved in [u][b][k] order
//!   |          magnitude -> f32 in [u][b][k] order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::SceneConfig;

pub const DATASET_MAGIC: [u8; 4] = *b"CPLB";
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Complex channel matrix per receiver: [UE antennas, BS ports, frequency bins].
pub type CsiTensor = Array3<Complex64>;

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: u64,
    pub csi: CsiTensor,
    /// Present iff the sample is labeled.
    pub position: Option<[f64; 2]>,
    pub sector: u8,
    pub is_los: bool,
    /// Sector the sample was measured in. Equal to `sector` except inside
    /// virtual rotated datasets, where `sector` is rewritten to the target.
    pub origin_sector: u8,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub config: SceneConfig,
    pub seed: u64,
    pub format_version: u32,
}

impl Dataset {
    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].position.is_some()).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].position.is_none()).collect()
    }

    pub fn sector_counts(&self) -> [usize; 3] {
        let mut c = [0usize; 3];
        for s in &self.samples {
            c[(s.sector % 3) as usize] += 1;
        }
        c
    }

    pub fn csi_dims(&self) -> [usize; 3] {
        [self.config.n_ue_ant, self.config.n_bs_ports(), self.config.n_freq_bins]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ContainerMeta {
            payload: PayloadKind::CsiComplex,
            norm: None,
            scene: self.config.clone(),
        };
        let dims = self.csi_dims();
        let mut w = ContainerWriter::create(path, &meta, self.samples.len() as u64, dims)?;
        for s in &self.samples {
            w.write_complex(s)?;
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        match read_container(path)? {
            Container::Dataset(d) => Ok(d),
            Container::Magnitudes(_) => Err(Error::format(format!(
                "{} holds preprocessed magnitudes, expected raw complex CSI",
                path.display()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PayloadKind {
    #[serde(rename = "csi-complex")]
    CsiComplex,
    #[serde(rename = "angle-delay-magnitude")]
    AngleDelayMagnitude,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContainerMeta {
    pub payload: PayloadKind,
    /// Normalization tag of a preprocessed file ("unitary" or "none").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm: Option<String>,
    pub scene: SceneConfig,
}

/// A preprocessed sample: magnitude tensor in the angle-delay domain.
#[derive(Debug, Clone)]
pub struct MagnitudeSample {
    pub id: u64,
    pub values: Array3<f32>,
    pub position: Option<[f64; 2]>,
    pub sector: u8,
    pub is_los: bool,
}

#[derive(Debug, Clone)]
pub struct MagnitudeSet {
    pub samples: Vec<MagnitudeSample>,
    pub meta: ContainerMeta,
    pub format_version: u32,
}

impl MagnitudeSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        let dims = match self.samples.first() {
            Some(s) => {
                let sh = s.values.shape();
                [sh[0], sh[1], sh[2]]
            }
            None => return Err(Error::Empty("magnitude set has no samples".into())),
        };
        let mut w = ContainerWriter::create(path, &self.meta, self.samples.len() as u64, dims)?;
        for s in &self.samples {
            w.write_magnitude(s)?;
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<MagnitudeSet> {
        match read_container(path)? {
            Container::Magnitudes(m) => Ok(m),
            Container::Dataset(_) => Err(Error::format(format!(
                "{} holds raw complex CSI, expected preprocessed magnitudes",
                path.display()
            ))),
        }
    }
}

pub enum Container {
    Dataset(Dataset),
    Magnitudes(MagnitudeSet),
}

pub struct ContainerWriter<W: Write> {
    w: W,
    dims: [usize; 3],
    payload: PayloadKind,
    expected: u64,
    written: u64,
}

impl ContainerWriter<BufWriter<File>> {
    pub fn create(
        path: &Path,
        meta: &ContainerMeta,
        count: u64,
        dims: [usize; 3],
    ) -> Result<Self> {
        let file = File::create(path)?;
        Self::new(BufWriter::new(file), meta, count, dims)
    }
}

impl<W: Write> ContainerWriter<W> {
    pub fn new(mut w: W, meta: &ContainerMeta, count: u64, dims: [usize; 3]) -> Result<Self> {
        for d in dims {
            if d == 0 || d > u16::MAX as usize {
                return Err(Error::format(format!("container dim {d} out of u16 range")));
            }
        }
        w.write_all(&DATASET_MAGIC)?;
        w.write_all(&DATASET_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&count.to_le_bytes())?;
        for d in dims {
            w.write_all(&(d as u16).to_le_bytes())?;
        }
        let blob = toml::to_string(meta)
            .map_err(|e| Error::format(format!("meta serialization: {e}")))?;
        w.write_all(&(blob.len() as u32).to_le_bytes())?;
        w.write_all(blob.as_bytes())?;
        Ok(ContainerWriter { w, dims, payload: meta.payload, expected: count, written: 0 })
    }

    fn write_prelude(
        &mut self,
        id: u64,
        sector: u8,
        is_los: bool,
        position: Option<[f64; 2]>,
    ) -> Result<()> {
        self.w.write_all(&id.to_le_bytes())?;
        self.w.write_all(&[sector, u8::from(is_los), u8::from(position.is_some())])?;
        let label = position.unwrap_or([0.0, 0.0]);
        self.w.write_all(&label[0].to_le_bytes())?;
        self.w.write_all(&label[1].to_le_bytes())?;
        Ok(())
    }

    pub fn write_complex(&mut self, s: &Sample) -> Result<()> {
        if self.payload != PayloadKind::CsiComplex {
            return Err(Error::format("container payload is not complex CSI"));
        }
        let shape = s.csi.shape();
        if shape != self.dims {
            return Err(Error::ShapeMismatch {
                context: "container sample".into(),
                expected: self.dims.to_vec(),
                actual: shape.to_vec(),
            });
        }
        self.write_prelude(s.id, s.sector, s.is_los, s.position)?;
        let mut buf = Vec::with_capacity(s.csi.len() * 8);
        for v in s.csi.iter() {
            buf.extend_from_slice(&(v.re as f32).to_le_bytes());
            buf.extend_from_slice(&(v.im as f32).to_le_bytes());
        }
        self.w.write_all(&buf)?;
        self.written += 1;
        Ok(())
    }

    pub fn write_magnitude(&mut self, s: &MagnitudeSample) -> Result<()> {
        if self.payload != PayloadKind::AngleDelayMagnitude {
            return Err(Error::format("container payload is not magnitudes"));
        }
        if s.values.shape() != self.dims {
            return Err(Error::ShapeMismatch {
                context: "container sample".into(),
                expected: self.dims.to_vec(),
                actual: s.values.shape().to_vec(),
            });
        }
        self.write_prelude(s.id, s.sector, s.is_los, s.position)?;
        let mut buf = Vec::with_capacity(s.values.len() * 4);
        for v in s.values.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.w.write_all(&buf)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written != self.expected {
            return Err(Error::format(format!(
                "container declared {} samples but {} were written",
                self.expected, self.written
            )));
        }
        self.w.flush()?;
        Ok(())
    }
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(format!("truncated container while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_container(path: &Path) -> Result<Container> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::format(format!(
            "bad magic {magic:?} in {}, not a dataset container",
            path.display()
        )));
    }
    let version = read_u32(&mut r, "format version")?;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::format(format!("unsupported container version {version}")));
    }
    let count = read_u64(&mut r, "sample count")?;
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let mut b = [0u8; 2];
        read_exact_or_truncated(&mut r, &mut b, "dims")?;
        *d = u16::from_le_bytes(b) as usize;
    }
    let meta_len = read_u32(&mut r, "meta length")? as usize;
    let mut blob = vec![0u8; meta_len];
    read_exact_or_truncated(&mut r, &mut blob, "meta blob")?;
    let meta: ContainerMeta = toml::from_str(
        std::str::from_utf8(&blob).map_err(|e| Error::format(format!("meta not UTF-8: {e}")))?,
    )
    .map_err(|e| Error::format(format!("meta parse: {e}")))?;

    let n_elems = dims[0] * dims[1] * dims[2];
    match meta.payload {
        PayloadKind::CsiComplex => {
            let mut samples = Vec::with_capacity(count as usize);
            let mut buf = vec![0u8; n_elems * 8];
            for _ in 0..count {
                let id = read_u64(&mut r, "sample id")?;
                let mut flags = [0u8; 3];
                read_exact_or_truncated(&mut r, &mut flags, "sample flags")?;
                let lx = read_f64(&mut r, "label x")?;
                let ly = read_f64(&mut r, "label y")?;
                read_exact_or_truncated(&mut r, &mut buf, "csi payload")?;
                let mut data = Vec::with_capacity(n_elems);
                for c in buf.chunks_exact(8) {
                    let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
                    let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]) as f64;
                    data.push(Complex64::new(re, im));
                }
                let csi = Array3::from_shape_vec((dims[0], dims[1], dims[2]), data)
                    .map_err(|e| Error::format(format!("csi shape: {e}")))?;
                samples.push(Sample {
                    id,
                    csi,
                    position: (flags[2] != 0).then_some([lx, ly]),
                    sector: flags[0],
                    is_los: flags[1] != 0,
                    origin_sector: flags[0],
                });
            }
            let seed = meta.scene.seed;
            Ok(Container::Dataset(Dataset {
                samples,
                config: meta.scene,
                seed,
                format_version: version,
            }))
        }
        PayloadKind::AngleDelayMagnitude => {
            let mut samples = Vec::with_capacity(count as usize);
            let mut buf = vec![0u8; n_elems * 4];
            for _ in 0..count {
                let id = read_u64(&mut r, "sample id")?;
                let mut flags = [0u8; 3];
                read_exact_or_truncated(&mut r, &mut flags, "sample flags")?;
                let lx = read_f64(&mut r, "label x")?;
                let ly = read_f64(&mut r, "label y")?;
                read_exact_or_truncated(&mut r, &mut buf, "magnitude payload")?;
                let mut data = Vec::with_capacity(n_elems);
                for c in buf.chunks_exact(4) {
                    data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
                }
                let values = Array3::from_shape_vec((dims[0], dims[1], dims[2]), data)
                    .map_err(|e| Error::format(format!("magnitude shape: {e}")))?;
                samples.push(MagnitudeSample {
                    id,
                    values,
                    position: (flags[2] != 0).then_some([lx, ly]),
                    sector: flags[0],
                    is_los: flags[1] != 0,
                });
            }
            Ok(Container::Magnitudes(MagnitudeSet { samples, meta, format_version: version }))
        }
    }
}

/// Ground-truth positions for every generated receiver, kept outside the
/// dataset container so unlabeled samples stay unlabeled for training.
#[derive(Debug, Clone)]
pub struct TruthRecord {
    pub id: u64,
    pub position: [f64; 2],
    pub sector: u8,
    pub is_los: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TruthTable {
    /// Sorted by id.
    pub records: Vec<TruthRecord>,
}

impl TruthTable {
    pub fn get(&self, id: u64) -> Option<&TruthRecord> {
        self.records.binary_search_by_key(&id, |r| r.id).ok().map(|i| &self.records[i])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        writeln!(f, "id,x,y,sector,los")?;
        for r in &self.records {
            writeln!(
                f,
                "{},{:.9},{:.9},{},{}",
                r.id,
                r.position[0],
                r.position[1],
                r.sector,
                u8::from(r.is_los)
            )?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<TruthTable> {
        let text = std::fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 5 {
                return Err(Error::format(format!(
                    "truth csv line {} has {} fields, expected 5",
                    lineno + 1,
                    parts.len()
                )));
            }
            let parse_f = |s: &str| -> Result<f64> {
                s.trim().parse().map_err(|e| Error::format(format!("truth csv line {}: {e}", lineno + 1)))
            };
            records.push(TruthRecord {
                id: parts[0].trim().parse().map_err(|e| Error::format(format!("truth csv: {e}")))?,
                position: [parse_f(parts[1])?, parse_f(parts[2])?],
                sector: parts[3].trim().parse().map_err(|e| Error::format(format!("truth csv: {e}")))?,
                is_los: parts[4].trim() == "1",
            });
        }
        records.sort_by_key(|r| r.id);
        Ok(TruthTable { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SceneConfig;
    use ndarray::Array3;

    fn tiny_config() -> SceneConfig {
        SceneConfig {
            n_freq_bins: 4,
            n_ue_ant: 1,
            bs_array_rows: 1,
            bs_array_cols: 2,
            n_rx_per_sector: [2, 2, 2],
            ..SceneConfig::default()
        }
    }

    fn tiny_dataset() -> Dataset {
        let cfg = tiny_config();
        let mk = |id: u64, labeled: bool| {
            let data: Vec<Complex64> =
                (0..8).map(|i| Complex64::new(i as f64 + id as f64, -(i as f64))).collect();
            Sample {
                id,
                csi: Array3::from_shape_vec((1, 2, 4), data).unwrap(),
                position: labeled.then_some([1.5 * id as f64, -2.0]),
                sector: (id % 3) as u8,
                is_los: id % 2 == 0,
                origin_sector: (id % 3) as u8,
            }
        };
        Dataset {
            samples: (0..6).map(|i| mk(i, i % 2 == 0)).collect(),
            config: cfg,
            seed: 7,
            format_version: DATASET_FORMAT_VERSION,
        }
    }

    #[test]
    fn complex_round_trip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cplb");
        let ds = tiny_dataset();
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back.samples.len(), ds.samples.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.sector, b.sector);
            assert_eq!(a.is_los, b.is_los);
            assert_eq!(a.position, b.position);
            for (x, y) in a.csi.iter().zip(b.csi.iter()) {
                // values in the test fixture are f32-representable
                assert_eq!(x, y);
            }
        }
        assert_eq!(back.config, ds.config);
    }

    #[test]
    fn truncated_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cplb");
        tiny_dataset().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        match Dataset::load(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cplb");
        std::fs::write(&path, b"NOPEnope").unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn magnitude_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cplb");
        let meta = ContainerMeta {
            payload: PayloadKind::AngleDelayMagnitude,
            norm: Some("unitary".into()),
            scene: tiny_config(),
        };
        let s = MagnitudeSample {
            id: 3,
            values: Array3::from_shape_fn((1, 2, 4), |(_, b, k)| (b * 4 + k) as f32 / 8.0),
            position: None,
            sector: 2,
            is_los: false,
        };
        let mut w = ContainerWriter::create(&path, &meta, 1, [1, 2, 4]).unwrap();
        w.write_magnitude(&s).unwrap();
        w.finish().unwrap();
        match read_container(&path).unwrap() {
            Container::Magnitudes(set) => {
                assert_eq!(set.samples.len(), 1);
                assert_eq!(set.samples[0].values, s.values);
                assert_eq!(set.meta.norm.as_deref(), Some("unitary"));
            }
            _ => panic!("expected magnitude payload"),
        }
        // and loading as a raw dataset must fail loudly
        assert!(Dataset::load(&path).is_err());
    }

    #[test]
    fn truth_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.csv");
        let t = TruthTable {
            records: vec![
                TruthRecord { id: 0, position: [1.25, -3.5], sector: 0, is_los: true },
                TruthRecord { id: 5, position: [100.0, -42.0], sector: 2, is_los: false },
            ],
        };
        t.write_csv(&path).unwrap();
        let back = TruthTable::read_csv(&path).unwrap();
        assert_eq!(back.records.len(), 2);
        assert_eq!(back.get(5).unwrap().position, [100.0, -42.0]);
        assert!(back.get(1).is_none());
    }
}
