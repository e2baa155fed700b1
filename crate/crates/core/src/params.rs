//! Where layer parameters come from while a model is being assembled.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::archive::{ArchiveTensor, TensorArchive};
use crate::error::{Error, Result};

/// Generator recorded in seeded archives.
pub const RNG_NAME: &str = "xoshiro256++ (seeded via splitmix64)";

pub const DEFAULT_BN_EPS: f32 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight { fan_in: usize },
    ConvBias,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
}

impl ParamKind {
    /// Running statistics are state, not trainable parameters.
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnMean | ParamKind::BnVar)
    }
}

pub trait ParamSource {
    fn fetch(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<Vec<f32>>;
    fn bn_eps(&self) -> f32;
    /// False when only shapes are wanted: values come back empty and no
    /// executable weights are prepared.
    fn materialize(&self) -> bool {
        true
    }
}

/// Source for parameter and flop accounting; allocates nothing.
pub struct ShapeOnly;

impl ParamSource for ShapeOnly {
    fn fetch(&mut self, _name: &str, _shape: &[usize], _kind: ParamKind) -> Result<Vec<f32>> {
        Ok(Vec::new())
    }

    fn bn_eps(&self) -> f32 {
        DEFAULT_BN_EPS
    }

    fn materialize(&self) -> bool {
        false
    }
}

/// Deterministic initializer: conv kernels ~ U(-sqrt(3/fan_in), sqrt(3/fan_in)),
/// biases 0, BN γ=1 β=0 μ=0 σ²=1. Values are drawn in build order from one
/// stream.
pub struct SeededParams {
    rng: Xoshiro256PlusPlus,
    eps: f32,
}

impl SeededParams {
    pub fn new(seed: u64) -> Self {
        SeededParams {
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
            eps: DEFAULT_BN_EPS,
        }
    }
}

pub fn uniform_bound(fan_in: usize) -> f32 {
    (3.0 / fan_in as f64).sqrt() as f32
}

impl ParamSource for SeededParams {
    fn fetch(&mut self, _name: &str, shape: &[usize], kind: ParamKind) -> Result<Vec<f32>> {
        let len: usize = shape.iter().product();
        Ok(match kind {
            ParamKind::ConvWeight { fan_in } => {
                let b = uniform_bound(fan_in);
                (0..len).map(|_| self.rng.random_range(-b..b)).collect()
            }
            ParamKind::ConvBias | ParamKind::BnBeta | ParamKind::BnMean => vec![0.0; len],
            ParamKind::BnGamma | ParamKind::BnVar => vec![1.0; len],
        })
    }

    fn bn_eps(&self) -> f32 {
        self.eps
    }
}

/// Reads parameters from an archive, checking shapes and tracking which keys
/// were consumed so that leftovers can be reported.
pub struct ArchiveParams<'a> {
    archive: &'a TensorArchive,
    used: BTreeSet<String>,
    eps: f32,
}

impl<'a> ArchiveParams<'a> {
    pub fn new(archive: &'a TensorArchive) -> Result<Self> {
        let eps = match archive.metadata.get(crate::archive::meta::BN_EPS) {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("archive bn_eps `{v}` is not a number")))?,
            None => DEFAULT_BN_EPS,
        };
        Ok(ArchiveParams {
            archive,
            used: BTreeSet::new(),
            eps,
        })
    }

    /// Fails on the first archive key that no layer asked for.
    pub fn finish(self) -> Result<()> {
        match self.archive.names().find(|n| !self.used.contains(*n)) {
            Some(name) => Err(Error::UnusedKey(name.to_string())),
            None => Ok(()),
        }
    }
}

impl ParamSource for ArchiveParams<'_> {
    fn fetch(&mut self, name: &str, shape: &[usize], _kind: ParamKind) -> Result<Vec<f32>> {
        let t: &ArchiveTensor = self
            .archive
            .get(name)
            .ok_or_else(|| Error::MissingKey(name.to_string()))?;
        if t.shape != shape {
            return Err(Error::KeyShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape.clone(),
            });
        }
        if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "parameter `{name}` has a non-finite value at element {i}"
            )));
        }
        self.used.insert(name.to_string());
        Ok(t.data.clone())
    }

    fn bn_eps(&self) -> f32 {
        self.eps
    }
}

/// SplitMix64 finalizer over `root` and `index`; gives each image its own
/// stream from a single root seed.
pub fn derive_seed(root: u64, index: u64) -> u64 {
    let mut z = root ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_in_bound_for_3x3_with_16_inputs() {
        let b = uniform_bound(16 * 9);
        assert!((b as f64 - 3f64.sqrt() / 144f64.sqrt()).abs() < 1e-7);
        let mut src = SeededParams::new(3);
        let w = src
            .fetch("w", &[8, 16, 3, 3], ParamKind::ConvWeight { fan_in: 144 })
            .unwrap();
        assert!(w.iter().all(|v| v.abs() <= b));
        assert!(w.iter().any(|v| v.abs() > 0.5 * b));
    }

    #[test]
    fn archive_source_checks_keys_and_shapes() {
        let mut a = TensorArchive::new();
        a.insert("x", ArchiveTensor::new(vec![2], vec![1.0, 2.0]));
        a.insert("extra", ArchiveTensor::new(vec![1], vec![0.0]));
        let mut src = ArchiveParams::new(&a).unwrap();
        assert!(matches!(
            src.fetch("x", &[3], ParamKind::ConvBias),
            Err(Error::KeyShape { .. })
        ));
        assert!(matches!(
            src.fetch("y", &[2], ParamKind::ConvBias),
            Err(Error::MissingKey(k)) if k == "y"
        ));
        assert_eq!(src.fetch("x", &[2], ParamKind::ConvBias).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(src.finish(), Err(Error::UnusedKey(k)) if k == "extra"));
    }

    #[test]
    fn derived_seeds_differ_per_index() {
        let s: BTreeSet<u64> = (0..1000).map(|i| derive_seed(42, i)).collect();
        assert_eq!(s.len(), 1000);
        assert_eq!(derive_seed(42, 5), derive_seed(42, 5));
    }
}
