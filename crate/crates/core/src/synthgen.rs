//! Seeded synthetic feature packs with mean shifts at chosen layers.
//!
//! Every sample draws a shared factor `z ~ N(0, 1)` and independent noise
//! `eps_l ~ N(0, I)` per layer, and layer `l` holds
//! `sqrt(1 - rho) * eps_l + sqrt(rho) * z`. OOD samples add `mu` to the first
//! coordinate of each shifted layer.
//!
//! Randomness: the 64-bit seed is expanded to a ChaCha8 key, and each
//! `(split, sample)` pair reads its own ChaCha8 stream (stream id
//! `split << 48 | sample`), turned into normals by `rand_distr`'s ziggurat
//! `StandardNormal`. Within a sample, `z` is drawn first and then the layers
//! in index order. ChaCha output is platform independent, so packs are
//! byte-identical across machines and thread counts.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurepack::{
    FeatureMatrix, FeaturePack, LayerKind, LayerSpec, PackError, PackManifest, CALIBRATION_SPLIT, TEST_ID_SPLIT,
};

/// Name of the single OOD split in generated packs.
pub const OOD_SPLIT: &str = "ood";
const MAX_SAMPLES: usize = 1 << 48;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error(transparent)]
    Pack(#[from] PackError),
}

impl SynthError {
    pub fn kind(&self) -> &'static str {
        match self {
            SynthError::InvalidSpec(_) => "InvalidSpec",
            SynthError::UnknownScenario(_) => "UnknownScenario",
            SynthError::Pack(e) => e.kind(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub m: usize,
    pub dims: Vec<usize>,
    pub n_cal: usize,
    pub n_id: usize,
    pub n_ood: usize,
    /// 1-based indices of the shifted layers.
    pub shift_layers: BTreeSet<usize>,
    pub shift_magnitude: f64,
    pub correlation: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::InvalidSpec(msg));
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        if self.dims.len() != self.m {
            return bad(format!("{} dims for {} layers", self.dims.len(), self.m));
        }
        if self.dims.contains(&0) {
            return bad("layer dims must be positive".into());
        }
        for (name, n) in [("n_cal", self.n_cal), ("n_id", self.n_id), ("n_ood", self.n_ood)] {
            if n == 0 || n >= MAX_SAMPLES {
                return bad(format!("{name} = {n} is out of range"));
            }
        }
        if let Some(&l) = self.shift_layers.iter().find(|&&l| l == 0 || l > self.m) {
            return bad(format!("shift layer {l} is outside 1..{}", self.m));
        }
        if !(self.shift_magnitude >= 0.0 && self.shift_magnitude.is_finite()) {
            return bad(format!(
                "shift magnitude {} must be finite and nonnegative",
                self.shift_magnitude
            ));
        }
        if !(0.0..1.0).contains(&self.correlation) {
            return bad(format!("correlation {} must lie in [0, 1)", self.correlation));
        }
        Ok(())
    }

    fn layer_specs(&self) -> Vec<LayerSpec> {
        self.dims
            .iter()
            .enumerate()
            .map(|(i, &d)| LayerSpec::new(format!("layer{}", i + 1), LayerKind::Features, d, i + 1))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Null,
    EarlyShift,
    LateShift,
    AllShift,
    CorrelatedEarly,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Null,
        Scenario::EarlyShift,
        Scenario::LateShift,
        Scenario::AllShift,
        Scenario::CorrelatedEarly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Null => "null",
            Scenario::EarlyShift => "early_shift",
            Scenario::LateShift => "late_shift",
            Scenario::AllShift => "all_shift",
            Scenario::CorrelatedEarly => "correlated_early",
        }
    }

    /// Preset: `m = 4`, `d = 32` per layer, `n_cal = 10000`,
    /// `n_id = n_ood = 5000`, `mu = 4`, seed 7. The shifted layers are
    /// none (null), {1} (early), {4} (late) or all of them; the correlated
    /// preset is the early shift with `rho = 0.5`.
    pub fn spec(self) -> SynthSpec {
        let m = 4;
        let (shift_layers, mu, rho): (BTreeSet<usize>, f64, f64) = match self {
            Scenario::Null => (BTreeSet::new(), 0.0, 0.0),
            Scenario::EarlyShift => ([1].into(), 4.0, 0.0),
            Scenario::LateShift => ([m].into(), 4.0, 0.0),
            Scenario::AllShift => ((1..=m).collect(), 4.0, 0.0),
            Scenario::CorrelatedEarly => ([1].into(), 4.0, 0.5),
        };
        SynthSpec {
            m,
            dims: vec![32; m],
            n_cal: 10_000,
            n_id: 5_000,
            n_ood: 5_000,
            shift_layers,
            shift_magnitude: mu,
            correlation: rho,
            seed: 7,
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scenario {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| SynthError::UnknownScenario(s.to_string()))
    }
}

/// Preset spec by scenario name.
pub fn scenario(name: &str) -> Result<SynthSpec, SynthError> {
    Ok(name.parse::<Scenario>()?.spec())
}

struct Sampler<'a> {
    spec: &'a SynthSpec,
    key: [u8; 32],
    width: usize,
    noise_scale: f64,
    factor_scale: f64,
}

impl<'a> Sampler<'a> {
    fn new(spec: &'a SynthSpec) -> Self {
        Self {
            spec,
            key: ChaCha8Rng::seed_from_u64(spec.seed).get_seed(),
            width: spec.dims.iter().sum(),
            noise_scale: (1.0 - spec.correlation).sqrt(),
            factor_scale: spec.correlation.sqrt(),
        }
    }

    /// All layers of one sample, concatenated in index order.
    fn sample(&self, split_id: u64, t: usize, shifted: bool) -> Vec<f32> {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(split_id << 48 | t as u64);
        let z: f64 = StandardNormal.sample(&mut rng);
        let shared = self.factor_scale * z;
        let mut out = Vec::with_capacity(self.width);
        for (i, &d) in self.spec.dims.iter().enumerate() {
            let start = out.len();
            for _ in 0..d {
                let eps: f64 = StandardNormal.sample(&mut rng);
                out.push(self.noise_scale * eps + shared);
            }
            if shifted && self.spec.shift_layers.contains(&(i + 1)) {
                out[start] += self.spec.shift_magnitude;
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }

    fn split(
        &self,
        layers: &[LayerSpec],
        name: &str,
        split_id: u64,
        n: usize,
        shifted: bool,
    ) -> Result<Vec<FeatureMatrix>, SynthError> {
        let samples: Vec<Vec<f32>> = (0..n)
            .into_par_iter()
            .map(|t| self.sample(split_id, t, shifted))
            .collect();
        let mut offset = 0;
        layers
            .iter()
            .map(|layer| {
                let d = layer.dim;
                let mut data = Vec::with_capacity(n * d);
                for s in &samples {
                    data.extend_from_slice(&s[offset..offset + d]);
                }
                offset += d;
                Ok(FeatureMatrix::new(layer.clone(), name, data)?)
            })
            .collect()
    }
}

/// Generates the calibration, test_id and ood splits of `spec`.
pub fn generate(spec: &SynthSpec) -> Result<FeaturePack, SynthError> {
    spec.validate()?;
    let layers = spec.layer_specs();
    let splits: [(&str, usize, bool); 3] = [
        (CALIBRATION_SPLIT, spec.n_cal, false),
        (TEST_ID_SPLIT, spec.n_id, false),
        (OOD_SPLIT, spec.n_ood, true),
    ];
    let sampler = Sampler::new(spec);
    let mut matrices = Vec::with_capacity(layers.len() * splits.len());
    for (split_id, &(name, n, shifted)) in splits.iter().enumerate() {
        matrices.extend(sampler.split(&layers, name, split_id as u64, n, shifted)?);
    }
    let counts: BTreeMap<String, usize> = splits.iter().map(|&(name, n, _)| (name.to_string(), n)).collect();
    let manifest = PackManifest::new(0, layers, counts);
    Ok(FeaturePack::new(manifest, matrices)?)
}
