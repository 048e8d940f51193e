//! A checkpoint travels with two sidecars: `<ckpt>.cfg` (training config
//! text, which fixes the model shape) and `<ckpt>.vocab`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use promptfuse::numcore::ParamStore;
use promptfuse::toklm::Vocab;
use promptfuse::trainer::TrainConfig;

pub struct Bundle {
    pub params: ParamStore<f32>,
    pub config: TrainConfig,
    pub vocab: Vocab,
}

fn sidecar(ckpt: &Path, ext: &str) -> PathBuf {
    let mut s = OsString::from(ckpt.as_os_str());
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn config_path(ckpt: &Path) -> PathBuf {
    sidecar(ckpt, "cfg")
}

pub fn vocab_path(ckpt: &Path) -> PathBuf {
    sidecar(ckpt, "vocab")
}

impl Bundle {
    pub fn load(ckpt: &Path) -> Result<Self> {
        let vocab = Vocab::read(vocab_path(ckpt))?;
        // the sidecar lists every key, so the base only has to be valid
        let config = TrainConfig::read(config_path(ckpt), TrainConfig::new(vocab.len(), 1))?;
        if config.model.vocab_size != vocab.len() {
            return Err(promptfuse::Error::Data(format!(
                "{}: config expects {} tokens, vocabulary has {}",
                ckpt.display(),
                config.model.vocab_size,
                vocab.len()
            ))
            .into());
        }
        let params = ParamStore::load(ckpt)?;
        let expected = promptfuse::fusion::init_model(&config.model, 0)?;
        let shapes = |p: &ParamStore<f32>| p.iter().map(|(k, t)| (k.to_string(), t.shape().to_vec())).collect::<Vec<_>>();
        if shapes(&params) != shapes(&expected) {
            return Err(promptfuse::Error::Data(format!(
                "{}: parameters do not match the model described by {}",
                ckpt.display(),
                config_path(ckpt).display()
            ))
            .into());
        }
        Ok(Bundle { params, config, vocab })
    }

    pub fn save(&self, ckpt: &Path) -> Result<()> {
        self.params.save(ckpt)?;
        let cfg = config_path(ckpt);
        std::fs::write(&cfg, self.config.to_text()).with_context(|| format!("writing {}", cfg.display()))?;
        self.vocab.write(vocab_path(ckpt))?;
        Ok(())
    }
}
