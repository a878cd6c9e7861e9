use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::info;

use crate::error::{Error, Result};
use crate::model::{load_adapters_for, load_base, save_adapters, save_base, AdapterSet, BaseModel};
use crate::trainer::{write_log, StepRecord};

/// Where trained artifacts live. Results are always memoised in memory;
/// with a root directory they are also written as `<name>.ckpt` plus
/// `<name>.log.jsonl`, and with `resume` an existing checkpoint is loaded
/// instead of retraining.
#[derive(Debug, Default)]
pub struct Store {
    root: Option<PathBuf>,
    resume: bool,
    cache: Mutex<HashMap<String, AdapterSet>>,
}

impl Store {
    pub fn memory() -> Self {
        Store::default()
    }

    pub fn at(root: impl Into<PathBuf>, resume: bool) -> Self {
        Store {
            root: Some(root.into()),
            resume,
            cache: Mutex::default(),
        }
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn path(&self, name: &str, ext: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join(format!("{name}.{ext}")))
    }

    fn prepare(path: &Path) -> Result<()> {
        match path.parent() {
            Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
            None => Ok(()),
        }
    }

    /// Base model stored under `name`, trained by `train` on a miss.
    pub fn base(&self, name: &str, train: impl FnOnce() -> Result<(BaseModel, Vec<StepRecord>)>) -> Result<BaseModel> {
        let ckpt = self.path(name, "ckpt");
        if let Some(p) = ckpt.as_ref().filter(|p| self.resume && p.exists()) {
            info!("reusing {}", p.display());
            return load_base(p);
        }
        let (model, log) = train()?;
        if let Some(p) = ckpt {
            Self::prepare(&p)?;
            write_log(&log, self.path(name, "log.jsonl").expect("rooted store"))?;
            let tmp = p.with_extension("ckpt.partial");
            save_base(&model, &tmp)?;
            std::fs::rename(&tmp, &p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(model)
    }

    /// Adapters stored under `name`; `produce` runs on a miss and may return
    /// a training log.
    pub fn adapters(
        &self,
        name: &str,
        base: &BaseModel,
        produce: impl FnOnce() -> Result<(AdapterSet, Vec<StepRecord>)>,
    ) -> Result<AdapterSet> {
        if let Some(set) = self.cache.lock().expect("store cache poisoned").get(name) {
            return Ok(set.clone());
        }
        let ckpt = self.path(name, "ckpt");
        let set = match ckpt.as_ref().filter(|p| self.resume && p.exists()) {
            Some(p) => {
                info!("reusing {}", p.display());
                load_adapters_for(p, base)?
            }
            None => {
                let (set, log) = produce()?;
                if let Some(p) = ckpt {
                    Self::prepare(&p)?;
                    if !log.is_empty() {
                        write_log(&log, self.path(name, "log.jsonl").expect("rooted store"))?;
                    }
                    let tmp = p.with_extension("ckpt.partial");
                    save_adapters(&set, &tmp)?;
                    std::fs::rename(&tmp, &p).map_err(|e| Error::io(&p, e))?;
                }
                set
            }
        };
        self.cache
            .lock()
            .expect("store cache poisoned")
            .insert(name.to_string(), set.clone());
        Ok(set)
    }
}
