use std::path::Path;

use serde::{Deserialize, Serialize};

use super::deviation::DomainStats;
use super::process::{Denoiser, NormExponent};
use super::schedule::{NoiseSchedule, ScheduleParams};
use super::unet::{UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::nn::{load_params, save_params, Tensor};

pub const METADATA_FILE: &str = "metadata.json";
pub const WEIGHTS_FILE: &str = "weights.safetensors";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub schedule: ScheduleParams,
    pub seed: u64,
    /// FNV-1a of the schedule descriptor, as 16 hex digits.
    pub schedule_hash: String,
    pub norm_exponent: u32,
    pub unet: UNetConfig,
    /// Moments of the training conditioning images, for deviation correction.
    pub domain_stats: DomainStats,
}

/// A trained denoiser together with the metadata needed to use it.
#[derive(Clone, Debug)]
pub struct SrCheckpoint {
    pub meta: CheckpointMeta,
    pub unet: UNet,
}

impl SrCheckpoint {
    pub fn new(
        mut unet: UNet,
        schedule: &NoiseSchedule,
        step: usize,
        seed: u64,
        norm: NormExponent,
        domain_stats: DomainStats,
    ) -> Self {
        unet.set_schedule_hash(Some(schedule.hash()));
        let meta = CheckpointMeta {
            step,
            schedule: schedule.params(),
            seed,
            schedule_hash: format!("{:016x}", schedule.hash()),
            norm_exponent: norm.as_int(),
            unet: unet.config(),
            domain_stats,
        };
        Self { meta, unet }
    }

    pub fn save(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(METADATA_FILE), serde_json::to_string_pretty(&self.meta)?)?;
        save_params(&mut self.unet, &dir.join(WEIGHTS_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(METADATA_FILE);
        let text = std::fs::read_to_string(&meta_path).map_err(|_| {
            Error::MissingData(format!("no SR checkpoint metadata at {}", meta_path.display()))
        })?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        let hash = u64::from_str_radix(&meta.schedule_hash, 16)
            .map_err(|e| Error::Checkpoint(format!("bad schedule hash: {e}")))?;
        if hash != meta.schedule.hash() {
            return Err(Error::Checkpoint(format!(
                "stored hash {} does not match schedule {}",
                meta.schedule_hash,
                meta.schedule.descriptor()
            )));
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut unet = UNet::new(meta.unet, &mut rng);
        load_params(&mut unet, &dir.join(WEIGHTS_FILE))?;
        unet.set_schedule_hash(Some(hash));
        Ok(Self { meta, unet })
    }
}

impl Denoiser for SrCheckpoint {
    fn predict_noise(&self, x: &Tensor, y_t: &Tensor, gamma: &[f32]) -> Tensor {
        self.unet.predict_noise(x, y_t, gamma)
    }

    fn schedule_hash(&self) -> Option<u64> {
        self.unet.schedule_hash()
    }
}
