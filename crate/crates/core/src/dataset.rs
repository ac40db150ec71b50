//! Initial conditions, trajectory containers and files, and dataset splits.
//!
//! # OMTRAJ1 file layout
//!
//! ```text
//! OMTRAJ1 dim=<d> nx=<n> [ny=<n>] snaps=<S> dt=<f> len=<f> meta=<k=v&k=v...>\n
//! S frames, each nx*ny little-endian f64 in row-major order
//! 8-byte little-endian CRC-64/XZ of the frame bytes
//! ```
//!
//! Floats in the header use the shortest representation that parses back to
//! the same `f64`. `meta` is `application/x-www-form-urlencoded` with keys in
//! sorted order. 2D files assume equal domain lengths on both axes.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use crate::checksum::crc64;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::spectral::{GridSpec, RealGridField};

pub const TRAJ_MAGIC: &str = "OMTRAJ1";

/// Recorded snapshots of one field at uniform spacing `dt_record`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    snapshots: Vec<RealGridField>,
    dt_record: f64,
    meta: BTreeMap<String, String>,
}

impl Trajectory {
    pub fn new(
        snapshots: Vec<RealGridField>,
        dt_record: f64,
        meta: BTreeMap<String, String>,
    ) -> Result<Self> {
        if snapshots.len() < 2 {
            return Err(Error::InvalidField(format!(
                "a trajectory needs at least 2 snapshots, got {}",
                snapshots.len()
            )));
        }
        let grid = snapshots[0].grid();
        if snapshots.iter().any(|s| s.grid() != grid) {
            return Err(Error::InvalidGrid("snapshots use different grids".into()));
        }
        if !(dt_record > 0.0 && dt_record.is_finite()) {
            return Err(Error::Config(format!(
                "dt_record must be positive, got {dt_record}"
            )));
        }
        Ok(Self {
            snapshots,
            dt_record,
            meta,
        })
    }

    pub fn snapshots(&self) -> &[RealGridField] {
        &self.snapshots
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn grid(&self) -> &GridSpec {
        self.snapshots[0].grid()
    }

    pub fn dt_record(&self) -> f64 {
        self.dt_record
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.meta
    }
}

/// Random sinusoidal superposition.
///
/// 1D: `u(x) = A sum_w a_w sin(2 pi k_w x / L + theta_w)`, `k_w` uniform in
/// `1..=max_wavenumber`. 2D: the phase is `2 pi (kx x + ky y)/L + theta_w` with
/// `kx` uniform in `0..=K`, `ky` uniform in `-K..=K`, redrawn while `(kx, ky) = (0, 0)`.
///
/// Draw order per wave: wavenumber(s), phase, amplitude. `A` rescales so that
/// the nodal maximum of `|u|` equals `target_amp`.
#[derive(Debug, Clone, PartialEq)]
pub struct IcConfig {
    pub n_waves: usize,
    pub max_wavenumber: usize,
    pub amplitude_range: (f64, f64),
    pub target_amp: f64,
    pub seed: u64,
}

impl Default for IcConfig {
    fn default() -> Self {
        Self {
            n_waves: 5,
            max_wavenumber: 8,
            amplitude_range: (0.2, 1.0),
            target_amp: 1.0,
            seed: 0,
        }
    }
}

impl IcConfig {
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        let nyquist = grid.points().iter().copied().min().unwrap_or(0) / 2;
        if self.max_wavenumber == 0 || self.max_wavenumber >= nyquist {
            return Err(Error::Config(format!(
                "max_wavenumber must be in 1..{nyquist}, got {}",
                self.max_wavenumber
            )));
        }
        if self.n_waves == 0 {
            return Err(Error::Config("n_waves must be positive".into()));
        }
        if !(self.target_amp > 0.0 && self.target_amp.is_finite()) {
            return Err(Error::Config(format!(
                "target_amp must be positive, got {}",
                self.target_amp
            )));
        }
        let (lo, hi) = self.amplitude_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!(
                "amplitude_range must satisfy 0 < lo <= hi, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

pub fn random_initial_condition(cfg: &IcConfig, grid: &GridSpec) -> Result<RealGridField> {
    cfg.validate(grid)?;
    let mut rng = SplitMix64::new(cfg.seed);
    let kmax = cfg.max_wavenumber as u64;
    let mut waves = Vec::with_capacity(cfg.n_waves);
    for _ in 0..cfg.n_waves {
        let k = if grid.dim() == 1 {
            [1 + rng.below(kmax) as i64, 0]
        } else {
            loop {
                let kx = rng.below(kmax + 1) as i64;
                let ky = rng.below(2 * kmax + 1) as i64 - kmax as i64;
                if kx != 0 || ky != 0 {
                    break [kx, ky];
                }
            }
        };
        let theta = rng.uniform_in(0.0, 2.0 * PI);
        let a = rng.uniform_in(cfg.amplitude_range.0, cfg.amplitude_range.1);
        waves.push((k, theta, a));
    }
    let l = grid.lengths().to_vec();
    let raw = RealGridField::from_fn(grid.clone(), |x| {
        waves
            .iter()
            .map(|&(k, th, a)| {
                let mut phase = 2.0 * PI * k[0] as f64 * x[0] / l[0] + th;
                if l.len() == 2 {
                    phase += 2.0 * PI * k[1] as f64 * x[1] / l[1];
                }
                a * phase.sin()
            })
            .sum()
    })?;
    let peak = raw.max_abs();
    if peak == 0.0 {
        return Err(Error::InvalidField("sampled waves cancel exactly".into()));
    }
    let scale = cfg.target_amp / peak;
    raw.map(|v| v * scale)
}

/// Independent per-trajectory seeds derived from one base seed.
pub fn trajectory_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = SplitMix64::new(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn encode_trajectory(traj: &Trajectory) -> Result<Vec<u8>> {
    let grid = traj.grid();
    if grid.dim() == 2 && grid.lengths()[0] != grid.lengths()[1] {
        return Err(Error::Format(
            "2D trajectories must have equal domain lengths".into(),
        ));
    }
    let meta = form_urlencoded::Serializer::new(String::new())
        .extend_pairs(traj.meta.iter())
        .finish();
    let mut header = format!("{TRAJ_MAGIC} dim={} nx={}", grid.dim(), grid.points()[0]);
    if grid.dim() == 2 {
        header.push_str(&format!(" ny={}", grid.points()[1]));
    }
    header.push_str(&format!(
        " snaps={} dt={} len={} meta={}\n",
        traj.len(),
        fmt_f64(traj.dt_record),
        fmt_f64(grid.lengths()[0]),
        meta
    ));
    let mut payload = Vec::with_capacity(traj.len() * grid.size() * 8);
    for s in &traj.snapshots {
        for v in s.values() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc64(&payload);
    let mut out = header.into_bytes();
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn write_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    std::fs::write(path, encode_trajectory(traj)?)?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let bytes = std::fs::read(path)?;
    decode_trajectory(&bytes, path)
}

/// Parses OMTRAJ1 bytes; `path` is used only in error messages.
pub fn decode_trajectory(bytes: &[u8], path: &Path) -> Result<Trajectory> {
    let magic = format!("{TRAJ_MAGIC} ");
    if !bytes.starts_with(magic.as_bytes()) {
        return Err(Error::MagicMismatch {
            path: path.to_path_buf(),
            expected: TRAJ_MAGIC,
        });
    }
    let truncated = |detail: String| Error::TruncatedFile {
        path: path.to_path_buf(),
        detail,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| truncated("header line is not terminated".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let fields = parse_header_fields(&header[magic.len()..])?;
    let get = |k: &str| {
        fields
            .get(k)
            .ok_or_else(|| Error::Format(format!("header lacks `{k}`")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("`{k}` is not an integer")))
    };
    let parse_f64 = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("`{k}` is not a number")))
    };
    let dim = parse_usize("dim")?;
    let nx = parse_usize("nx")?;
    let snaps = parse_usize("snaps")?;
    let dt = parse_f64("dt")?;
    let len = parse_f64("len")?;
    let grid = match dim {
        1 => GridSpec::new_1d(nx, len)?,
        2 => GridSpec::new_2d(nx, parse_usize("ny")?, len)?,
        d => return Err(Error::Format(format!("unsupported dim {d}"))),
    };
    let meta: BTreeMap<String, String> = form_urlencoded::parse(get("meta")?.as_bytes())
        .into_owned()
        .collect();

    let body = &bytes[nl + 1..];
    let frame_bytes = grid.size() * 8;
    let payload_len = snaps
        .checked_mul(frame_bytes)
        .ok_or_else(|| Error::Format("frame count overflows".into()))?;
    if body.len() < payload_len + 8 {
        return Err(truncated(format!(
            "expected {} body bytes, found {} ({} complete frames)",
            payload_len + 8,
            body.len(),
            body.len() / frame_bytes.max(1)
        )));
    }
    if body.len() > payload_len + 8 {
        return Err(Error::Format(format!(
            "{} unexpected trailing bytes",
            body.len() - payload_len - 8
        )));
    }
    let payload = &body[..payload_len];
    let stored = u64::from_le_bytes(body[payload_len..].try_into().expect("8 bytes"));
    let computed = crc64(payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let snapshots = payload
        .chunks_exact(frame_bytes)
        .map(|frame| {
            let values = frame
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            RealGridField::new(grid.clone(), values)
        })
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(snapshots, dt, meta)
}

/// Splits `key=value` tokens separated by single spaces.
pub(crate) fn parse_header_fields(s: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for tok in s.split(' ').filter(|t| !t.is_empty()) {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("header token `{tok}` is not key=value")))?;
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Format(format!("duplicate header key `{k}`")));
        }
    }
    Ok(out)
}

/// Seeded shuffle, then the first `round(n f_train)` items go to train, the
/// next `round(n f_val)` to validation and the rest to test.
pub fn split_dataset<T>(
    items: Vec<T>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::SplitError(format!(
            "fractions must lie in [0, 1], got ({ft}, {fv}, {fs})"
        )));
    }
    if (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::SplitError(format!(
            "fractions must sum to 1, got {}",
            ft + fv + fs
        )));
    }
    let n = items.len();
    let n_train = (n as f64 * ft).round() as usize;
    let n_val = (n as f64 * fv).round() as usize;
    if n_train + n_val > n {
        return Err(Error::SplitError(format!(
            "{n} items cannot hold {n_train} train and {n_val} validation items"
        )));
    }
    let n_test = n - n_train - n_val;
    for (name, f, size) in [("train", ft, n_train), ("validation", fv, n_val), ("test", fs, n_test)] {
        if f > 0.0 && size == 0 {
            return Err(Error::SplitError(format!(
                "{name} split is empty with {n} items"
            )));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(seed).shuffle(&mut order);
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<T> {
        idx.iter()
            .map(|&i| slots[i].take().expect("each index used once"))
            .collect()
    };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok((train, val, test))
}
