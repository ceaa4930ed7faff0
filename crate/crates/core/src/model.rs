//! The assembled system: extractor plus the three heads, the configuration
//! they were built from, and the fingerprint that ties checkpoints together.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, Extractor, ModelBundle, EXTRACTOR_PREFIX};
use crate::checkpoint::{hex, CheckpointError};
use crate::error::{Error, Result};
use crate::heads::{
    BoxTarget, FineHead, HeadsConfig, MetaHead, MetaOutput, RoughHead, FINE_PREFIX, META_PREFIX,
    ROUGH_PREFIX,
};
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub backbone: BackboneConfig,
    pub heads: HeadsConfig,
}

impl SystemConfig {
    /// SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

/// Network structure without weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    config: SystemConfig,
    fingerprint: [u8; 32],
    pub extractor: Extractor,
    pub meta: MetaHead,
    pub rough: RoughHead,
    pub fine: FineHead,
}

impl Architecture {
    pub fn new(config: SystemConfig) -> Result<Self> {
        let extractor = Extractor::new(config.backbone.clone())?;
        let features = extractor.output_shape();
        Ok(Self {
            fingerprint: config.fingerprint(),
            meta: MetaHead::new(features, &config.heads)?,
            rough: RoughHead::new(features, &config.heads)?,
            fine: FineHead::new(features, &config.heads)?,
            extractor,
            config,
        })
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    pub fn init_extractor(&self, rng: &mut Rng) -> ModelBundle {
        let mut bundle = ModelBundle::new(self.fingerprint);
        self.extractor.init(&mut bundle, rng);
        bundle
    }

    /// Adds freshly initialized arrays for all three heads.
    pub fn init_heads(&self, bundle: &mut ModelBundle, rng: &mut Rng) {
        self.meta.init(bundle, rng);
        self.rough.init(bundle, rng);
        self.fine.init(bundle, rng);
    }

    pub fn init(&self, rng: &mut Rng) -> ModelBundle {
        let mut bundle = self.init_extractor(rng);
        self.init_heads(&mut bundle, rng);
        bundle
    }

    /// Rejects bundles built for another architecture or missing arrays.
    pub fn check_bundle(&self, bundle: &ModelBundle) -> Result<()> {
        if bundle.fingerprint() != &self.fingerprint {
            return Err(CheckpointError::FingerprintMismatch {
                expected: hex(&self.fingerprint),
                found: hex(bundle.fingerprint()),
            }
            .into());
        }
        let reference = self.init(&mut <Rng as rand::SeedableRng>::seed_from_u64(0));
        for (name, p) in reference.iter() {
            match bundle.get(name) {
                None => return Err(Error::invalid(format!("missing parameter array {name}"))),
                Some(q) if q.tensor.shape() != p.tensor.shape() => {
                    return Err(Error::shape("load", q.tensor.shape(), p.tensor.shape()))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// Checkpoint stem and parameter prefix of each component.
pub const COMPONENTS: [(&str, &str); 4] = [
    ("extractor", EXTRACTOR_PREFIX),
    ("meta", META_PREFIX),
    ("rough", ROUGH_PREFIX),
    ("fine", FINE_PREFIX),
];

/// Architecture plus weights, ready for inference.
#[derive(Clone, Debug)]
pub struct Models {
    pub arch: Architecture,
    pub bundle: ModelBundle,
}

impl Models {
    pub fn new(arch: Architecture, bundle: ModelBundle) -> Result<Self> {
        arch.check_bundle(&bundle)?;
        Ok(Self { arch, bundle })
    }

    pub fn features(&self, image: &Tensor) -> Result<Tensor> {
        self.arch.extractor.extract_features(&self.bundle, image)
    }

    pub fn meta(&self, features: &Tensor) -> Result<MetaOutput> {
        self.arch.meta.meta_forward(&self.bundle, features)
    }

    pub fn rough_scores(&self, features: &Tensor) -> Result<Vec<f64>> {
        self.arch.rough.scores(&self.bundle, features)
    }

    pub fn fine_box(&self, features: &Tensor) -> Result<BoxTarget> {
        self.arch.fine.fine_forward(&self.bundle, features)
    }
}
