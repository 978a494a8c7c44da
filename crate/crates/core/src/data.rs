//! Synthetic compressed-sensing benchmark: per-sample Gaussian sensing
//! matrices, one column-normalised ground-truth dictionary, and
//! Bernoulli-Gaussian sparse codes.
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! "CSD1"                      4 bytes
//! version                     u32
//! m, n, b, count              u64 × 4
//! train, val, test            u64 × 3
//! Ψ_o                         n·b f64, row-major
//! per instance: Φ, x*, y      m·n + b + m f64
//! ```
//!
//! The generation config is mirrored in a TOML sidecar next to the file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"CSD1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 + 7 * 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Data generation settings; keys missing from a config file take the
/// defaults (m=100, n=128, b=256, p=0.1, 3000/1000/1000 split, noiseless).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Measurements per sample.
    pub m: usize,
    /// Signal dimension.
    pub n: usize,
    /// Dictionary atoms.
    pub b: usize,
    /// Probability that a code entry is non-zero.
    pub p: f64,
    pub num_samples: usize,
    pub split: SplitCounts,
    pub noise_std: f64,
    /// Share one sensing matrix across all samples.
    pub fixed_phi: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            m: 100,
            n: 128,
            b: 256,
            p: 0.1,
            num_samples: 5000,
            split: SplitCounts {
                train: 3000,
                val: 1000,
                test: 1000,
            },
            noise_std: 0.0,
            fixed_phi: false,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.b == 0 {
            return Err(Error::InvalidConfig("m, n and b must be at least 1".into()));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::InvalidConfig(format!("sparsity probability {} not in (0,1)", self.p)));
        }
        if self.split.total() != self.num_samples {
            return Err(Error::InvalidConfig(format!(
                "split {}+{}+{} does not match num_samples {}",
                self.split.train, self.split.val, self.split.test, self.num_samples
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        Ok(())
    }
}

/// One datum: measurements `y = Φ Ψ_o x* (+ noise)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemInstance {
    pub y: Tensor,
    pub phi: Tensor,
    pub x_star: Tensor,
    pub index: usize,
}

impl ProblemInstance {
    pub fn m(&self) -> usize {
        self.phi.rows()
    }

    pub fn n(&self) -> usize {
        self.phi.cols()
    }

    pub fn b(&self) -> usize {
        self.x_star.len()
    }

    /// Noise-free measurement `Φ (Ψ x*)` for a given dictionary.
    pub fn clean_measurement(&self, psi: &Tensor) -> Result<Vec<f64>> {
        let s = psi.matvec(self.x_star.data())?;
        self.phi.matvec(&s)
    }

    pub fn support(&self) -> Vec<usize> {
        support(self.x_star.data())
    }
}

pub fn support(x: &[f64]) -> Vec<usize> {
    x.iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub m: usize,
    pub n: usize,
    pub b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub instances: Vec<ProblemInstance>,
    pub psi_o: Tensor,
    pub dims: Dims,
    pub split: SplitCounts,
    pub format_version: u32,
    /// Generation config, when known (always after `generate`; after `load`
    /// only if the sidecar was present).
    pub config: Option<GenConfig>,
}

impl Dataset {
    pub fn split(&self, which: Split) -> &[ProblemInstance] {
        let SplitCounts { train, val, .. } = self.split;
        match which {
            Split::Train => &self.instances[..train],
            Split::Val => &self.instances[train..train + val],
            Split::Test => &self.instances[train + val..],
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Copy of this dataset with fresh measurement noise of the given std
    /// added to every `y` (the clean part is recomputed from `Ψ_o`).
    pub fn with_noise(&self, noise_std: f64, seed: u64) -> Result<Dataset> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for inst in &mut out.instances {
            let mut y = inst.clean_measurement(&self.psi_o)?;
            if noise_std > 0.0 {
                for v in &mut y {
                    *v += noise_std * rng.sample::<f64, _>(StandardNormal);
                }
            }
            inst.y = Tensor::vector(y);
        }
        if let Some(cfg) = &mut out.config {
            cfg.noise_std = noise_std;
        }
        Ok(out)
    }
}

pub(crate) fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::raw(vec![rows, cols], data)
}

/// Scales every column to unit ℓ2 norm (zero columns are left unchanged).
pub fn normalize_columns(t: &mut Tensor) {
    let norms = t.column_norms();
    let cols = t.cols();
    for (k, v) in t.data_mut().iter_mut().enumerate() {
        let nrm = norms[k % cols];
        if nrm > 0.0 {
            *v /= nrm;
        }
    }
}

/// Standard-Gaussian dictionary with unit-norm columns.
pub fn random_dictionary(rng: &mut impl Rng, n: usize, b: usize) -> Tensor {
    let mut psi = gaussian_matrix(rng, n, b);
    normalize_columns(&mut psi);
    psi
}

fn sparse_code(rng: &mut impl Rng, b: usize, p: f64) -> Tensor {
    let data = (0..b)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            if rng.random_bool(p) {
                v
            } else {
                0.0
            }
        })
        .collect();
    Tensor::vector(data)
}

/// Generates a dataset. Fully determined by `cfg.seed`.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let psi_o = random_dictionary(&mut rng, cfg.n, cfg.b);
    let instances = generate_instances(cfg, &psi_o, &mut rng)?;
    Ok(Dataset {
        instances,
        psi_o,
        dims: Dims {
            m: cfg.m,
            n: cfg.n,
            b: cfg.b,
        },
        split: cfg.split,
        format_version: FORMAT_VERSION,
        config: Some(cfg.clone()),
    })
}

/// Draws `cfg.num_samples` instances against a given dictionary.
pub fn generate_instances(cfg: &GenConfig, psi_o: &Tensor, rng: &mut impl Rng) -> Result<Vec<ProblemInstance>> {
    if psi_o.shape() != [cfg.n, cfg.b] {
        return Err(Error::shape("generate", psi_o.shape(), &[cfg.n, cfg.b]));
    }
    let shared_phi = cfg.fixed_phi.then(|| gaussian_matrix(rng, cfg.m, cfg.n));
    let mut instances = Vec::with_capacity(cfg.num_samples);
    for index in 0..cfg.num_samples {
        let phi = match &shared_phi {
            Some(p) => p.clone(),
            None => gaussian_matrix(rng, cfg.m, cfg.n),
        };
        let x_star = sparse_code(rng, cfg.b, cfg.p);
        let mut inst = ProblemInstance {
            y: Tensor::vector(vec![]),
            phi,
            x_star,
            index,
        };
        let mut y = inst.clean_measurement(psi_o)?;
        if cfg.noise_std > 0.0 {
            for v in &mut y {
                *v += cfg.noise_std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        inst.y = Tensor::vector(y);
        instances.push(inst);
    }
    Ok(instances)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.toml");
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    config: GenConfig,
}

fn put_f64s(buf: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ds: &Dataset) -> Vec<u8> {
    let Dims { m, n, b } = ds.dims;
    let per = m * n + b + m;
    let mut buf = Vec::with_capacity(HEADER_LEN as usize + 8 * (n * b + ds.len() * per));
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&ds.format_version.to_le_bytes());
    for v in [m, n, b, ds.len(), ds.split.train, ds.split.val, ds.split.test] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    put_f64s(&mut buf, ds.psi_o.data());
    for inst in &ds.instances {
        put_f64s(&mut buf, inst.phi.data());
        put_f64s(&mut buf, inst.x_star.data());
        put_f64s(&mut buf, inst.y.data());
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u64(&mut self) -> u64 {
        let v = u64::from_le_bytes(self.bytes[self.pos..self.pos + 8].try_into().unwrap());
        self.pos += 8;
        v
    }

    fn f64s(&mut self, count: usize) -> Vec<f64> {
        let out = self.bytes[self.pos..self.pos + 8 * count]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.pos += 8 * count;
        out
    }
}

fn dim(v: u64, what: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::DimensionOverflow(format!("{what} = {v}")))
}

pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let found = bytes.len() as u64;
    if found < 4 {
        return Err(Error::Truncated { needed: HEADER_LEN, found });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if found < HEADER_LEN {
        return Err(Error::Truncated { needed: HEADER_LEN, found });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut r = Reader { bytes, pos: 8 };
    let raw: Vec<u64> = (0..7).map(|_| r.u64()).collect();
    let names = ["m", "n", "b", "count", "train", "val", "test"];
    let mut d = [0usize; 7];
    for k in 0..7 {
        d[k] = dim(raw[k], names[k])?;
    }
    let [m, n, b, count, train, val, test] = d;
    let overflow = || Error::DimensionOverflow(format!("m={m} n={n} b={b} count={count}"));
    let per = m
        .checked_mul(n)
        .and_then(|mn| mn.checked_add(b))
        .and_then(|v| v.checked_add(m))
        .ok_or_else(overflow)?;
    let floats = n
        .checked_mul(b)
        .and_then(|nb| per.checked_mul(count).and_then(|c| c.checked_add(nb)))
        .ok_or_else(overflow)?;
    let needed = (floats as u64)
        .checked_mul(8)
        .and_then(|v| v.checked_add(HEADER_LEN))
        .ok_or_else(overflow)?;
    if found < needed {
        return Err(Error::Truncated { needed, found });
    }
    if train
        .checked_add(val)
        .and_then(|v| v.checked_add(test))
        .is_none_or(|t| t != count)
    {
        return Err(Error::InvalidConfig(format!(
            "split {train}+{val}+{test} does not match count {count}"
        )));
    }
    let psi_o = Tensor::raw(vec![n, b], r.f64s(n * b));
    let mut instances = Vec::with_capacity(count);
    for index in 0..count {
        let phi = Tensor::raw(vec![m, n], r.f64s(m * n));
        let x_star = Tensor::vector(r.f64s(b));
        let y = Tensor::vector(r.f64s(m));
        instances.push(ProblemInstance { y, phi, x_star, index });
    }
    Ok(Dataset {
        instances,
        psi_o,
        dims: Dims { m, n, b },
        split: SplitCounts { train, val, test },
        format_version: version,
        config: None,
    })
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(ds)).map_err(|e| Error::io(path, e))?;
    if let Some(cfg) = &ds.config {
        let side = sidecar_path(path);
        let text = toml::to_string(&Sidecar {
            format_version: ds.format_version,
            config: cfg.clone(),
        })
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut ds = decode(&bytes)?;
    let side = sidecar_path(path);
    if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sc: Sidecar = toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", side.display())))?;
        let c = &sc.config;
        if (c.m, c.n, c.b) != (ds.dims.m, ds.dims.n, ds.dims.b) || c.split != ds.split {
            return Err(Error::InvalidConfig(format!(
                "manifest {} disagrees with binary header",
                side.display()
            )));
        }
        ds.config = Some(sc.config);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GenConfig {
        GenConfig {
            m: 4,
            n: 6,
            b: 8,
            p: 0.3,
            num_samples: 3,
            split: SplitCounts {
                train: 1,
                val: 1,
                test: 1,
            },
            noise_std: 0.0,
            fixed_phi: false,
            seed,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small(0);
        c.num_samples = 4;
        assert!(c.validate().is_err());
        let mut c = small(0);
        c.p = 1.0;
        assert!(c.validate().is_err());
        let mut c = small(0);
        c.m = 0;
        assert!(c.validate().is_err());
        assert!(small(0).validate().is_ok());
    }

    #[test]
    fn noiseless_measurements_are_exact() {
        let ds = generate(&small(3)).unwrap();
        for inst in &ds.instances {
            let y = inst.clean_measurement(&ds.psi_o).unwrap();
            assert_eq!(y.as_slice(), inst.y.data());
        }
        for n in ds.psi_o.column_norms() {
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_phi_shares_matrix() {
        let mut c = small(1);
        c.fixed_phi = true;
        let ds = generate(&c).unwrap();
        assert!(ds.instances.windows(2).all(|w| w[0].phi == w[1].phi));
        let ds = generate(&small(1)).unwrap();
        assert_ne!(ds.instances[0].phi, ds.instances[1].phi);
    }

    #[test]
    fn decode_errors_are_distinct() {
        let ds = generate(&small(2)).unwrap();
        let bytes = encode(&ds);
        assert_eq!(decode(&bytes).unwrap(), Dataset { config: None, ..ds.clone() });

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::BadMagic(_))));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::VersionMismatch { found: 9, .. })));

        let mut bad = bytes.clone();
        // declare 4 instances while the payload holds 3
        bad[8 + 3 * 8..8 + 4 * 8].copy_from_slice(&4u64.to_le_bytes());
        assert!(matches!(decode(&bad), Err(Error::Truncated { .. })));

        let mut bad = bytes.clone();
        bad[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode(&bad), Err(Error::DimensionOverflow(_))));

        assert!(matches!(decode(&bytes[..20]), Err(Error::Truncated { .. })));
    }
}
