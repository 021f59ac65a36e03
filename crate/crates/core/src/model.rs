//! Encoder, decoder and head assembled into one segmentation network.

use serde::{Deserialize, Serialize};

use crate::backbone::{Encoder, EncoderConfig};
use crate::decoder::{Decoder, DecoderConfig, SegHead};
use crate::error::{Error, Result};
use crate::layers::{join, Module};
use crate::tensor::io;
use crate::tensor::init::Rng;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn micro(num_classes: usize) -> Self {
        ModelConfig { encoder: EncoderConfig::micro(), decoder: DecoderConfig::micro(num_classes) }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.channels != self.decoder.channels {
            return Err(Error::Config(format!(
                "encoder widths {:?} differ from decoder widths {:?}",
                self.encoder.channels, self.decoder.channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SegModel<T: Float> {
    pub cfg: ModelConfig,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub head: SegHead<T>,
}

impl<T: Float> SegModel<T> {
    pub fn new(seed: u64, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        // Separate streams keep decoder init independent of encoder depth.
        let encoder = Encoder::new(&mut Rng::derive(seed, 1), &cfg.encoder)?;
        let mut rng = Rng::derive(seed, 2);
        let decoder = Decoder::new(&mut rng, &cfg.decoder)?;
        let head = SegHead::new(&mut rng, cfg.decoder.out_channels(), cfg.decoder.num_classes)?;
        Ok(SegModel { cfg: cfg.clone(), encoder, decoder, head })
    }

    /// `[B, 3, H, W]` image to `[B, K, H, W]` logits.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let pyramid = self.encoder.forward(image)?;
        self.head.forward(&self.decoder.forward(&pyramid)?)
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.decoder.num_classes
    }

    /// Replaces parameters by name; every parameter must be present with a
    /// matching shape.
    pub fn load_state(&mut self, entries: &[(String, Tensor<T>)]) -> Result<()> {
        let map: std::collections::HashMap<&str, &Tensor<T>> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut err = None;
        let mut used = 0;
        self.visit("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match map.get(name.as_str()) {
                Some(src) if src.shape() == t.shape() => {
                    *t = src.with_requires_grad(true);
                    used += 1;
                }
                Some(src) => {
                    err = Some(Error::Shape(format!("{name}: checkpoint {:?} vs model {:?}", src.shape(), t.shape())))
                }
                None => err = Some(Error::Format(format!("checkpoint lacks {name}"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if used != entries.len() {
            return Err(Error::Format(format!("checkpoint has {} entries, model uses {used}", entries.len())));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        io::save_archive(&self.named_params(), path)
    }

    pub fn load(cfg: &ModelConfig, path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut m = Self::new(0, cfg)?;
        m.load_state(&io::load_archive(path)?)?;
        Ok(m)
    }
}

impl<T: Float> Module<T> for SegModel<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
}
