//! Trained models restored from checkpoints, ready for inference.

use std::path::Path;

use log::warn;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalsuite::{sliding_deblur, EvalModel};
use crate::mmpnet::{MmpNet, MmpNetConfig};
use crate::mmprnn::MmpRnn;
use crate::tensor::Tensor;
use crate::trainer::{load_mmpnet, PriorSource};

/// A deblurring network with its frozen prior network, if one was trained with it.
pub struct DeblurModel {
    /// Configuration the checkpoint was trained with.
    pub config: RunConfig,
    pub rnn: MmpRnn<f32>,
    pub mmpnet: Option<MmpNet<f32>>,
}

impl DeblurModel {
    /// Loads a `deblur` checkpoint written by training.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.kind != "deblur" {
            return Err(Error::invalid(format!("{} is a {} checkpoint, not a deblurring one", path.display(), ck.kind)));
        }
        let config: RunConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::format(path, format!("embedded configuration: {e}")))?;
        let mut rnn = MmpRnn::<f32>::new(config.net, 0)?;
        ck.load_store("", rnn.params_mut())?;
        let mmpnet = if ck.tensors.iter().any(|(n, _)| n.starts_with("mmpnet.")) {
            Some(load_mmpnet(&ck, config.mmpnet)?)
        } else {
            None
        };
        Ok(Self { config, rnn, mmpnet })
    }

    /// Prior used at test time: the trained source when its maps are at hand,
    /// MMP-Net otherwise.
    pub fn inference_prior(&self, stored_maps: bool) -> Result<PriorSource> {
        let p = self.config.train.prior;
        Ok(match p {
            PriorSource::None | PriorSource::Mmpnet => p,
            _ if stored_maps => p,
            _ if self.mmpnet.is_some() => {
                warn!("prior `{p:?}` is unavailable for these frames; using MMP-Net");
                PriorSource::Mmpnet
            }
            _ => return Err(Error::invalid(format!("prior `{p:?}` needs stored maps and no MMP-Net is embedded"))),
        })
    }

    pub fn eval_model(&self, tag: &str, stored_maps: bool) -> Result<EvalModel<'_>> {
        Ok(EvalModel {
            tag: tag.to_string(),
            rnn: &self.rnn,
            mmpnet: self.mmpnet.as_ref(),
            prior: self.inference_prior(stored_maps)?,
        })
    }

    /// Motion-magnitude map of one blurry frame.
    pub fn estimate_prior(&self, frame: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.mmpnet.as_ref().ok_or_else(|| Error::invalid("the checkpoint carries no MMP-Net"))?.forward(frame)
    }

    /// Restores plain frames (no stored maps); entry `t` is `None` for the
    /// first and last two frames.
    pub fn deblur_frames(&self, frames: &[Tensor<f32>]) -> Result<Vec<Option<Tensor<f32>>>> {
        let priors = match self.inference_prior(false)? {
            PriorSource::None => None,
            _ if !self.rnn.config().mmam => None,
            _ => Some(frames.iter().map(|f| self.estimate_prior(f)).collect::<Result<Vec<_>>>()?),
        };
        sliding_deblur(&self.rnn, frames, priors.as_deref())
    }
}

/// Loads an MMP-Net from its own checkpoint or from the copy embedded in a
/// deblurring one. The architecture recorded in the checkpoint wins over `fallback`.
pub fn load_prior_net(path: &Path, fallback: MmpNetConfig) -> Result<MmpNet<f32>> {
    let ck = Checkpoint::load(path)?;
    let config = serde_json::from_value::<RunConfig>(ck.config.clone()).map(|c| c.mmpnet).unwrap_or(fallback);
    load_mmpnet(&ck, config)
}
