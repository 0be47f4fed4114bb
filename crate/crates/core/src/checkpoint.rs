//! Model checkpoints: every parameter and buffer in creation order, plus a
//! TOML manifest that is enough to rebuild the architecture.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::heads::{HeadOptions, TaskSpec};
use crate::model::Medusa;

pub const FORMAT_VERSION: u32 = 1;
const VERSION_KEY: &str = "format_version";
const MANIFEST_KEY: &str = "model";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadManifest {
    pub task: TaskSpec,
    pub options: HeadOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub heads: Vec<HeadManifest>,
}

impl ModelManifest {
    pub fn of(model: &Medusa) -> Self {
        Self {
            seed: model.seed(),
            backbone: model.backbone_config().clone(),
            heads: model
                .heads()
                .iter()
                .map(|h| HeadManifest {
                    task: h.spec().clone(),
                    options: h.options(),
                })
                .collect(),
        }
    }

    /// A freshly initialized model of this architecture.
    pub fn build(&self) -> Result<Medusa> {
        let mut m = Medusa::new(self.backbone.clone(), self.seed)?;
        for h in &self.heads {
            m.add_head(h.task.clone(), h.options)?;
        }
        Ok(m)
    }
}

pub fn to_archive(model: &Medusa) -> Result<Archive> {
    let mut a = Archive::new();
    a.meta.insert(VERSION_KEY.into(), FORMAT_VERSION.to_string());
    let manifest = toml::to_string(&ModelManifest::of(model)).map_err(|e| Error::Config(e.to_string()))?;
    a.meta.insert(MANIFEST_KEY.into(), manifest);
    for (_, p) in model.store().iter() {
        a.push(&p.name, p.value.clone())?;
    }
    Ok(a)
}

pub fn manifest_of(archive: &Archive) -> Result<ModelManifest> {
    match archive.meta.get(VERSION_KEY) {
        Some(v) if v == &FORMAT_VERSION.to_string() => {}
        Some(v) => {
            return Err(Error::Version(format!(
                "checkpoint format {v}, this build reads {FORMAT_VERSION}"
            )))
        }
        None => return Err(Error::Version("checkpoint carries no format version".into())),
    }
    let text = archive
        .meta
        .get(MANIFEST_KEY)
        .ok_or_else(|| Error::Version("checkpoint carries no model manifest".into()))?;
    toml::from_str(text).map_err(|e| Error::Version(format!("unreadable model manifest: {e}")))
}

pub fn from_archive(archive: &Archive) -> Result<Medusa> {
    let mut model = manifest_of(archive)?.build()?;
    let store = model.store_mut();
    if archive.entries().len() != store.len() {
        return Err(Error::Version(format!(
            "checkpoint holds {} tensors, the manifest describes {}",
            archive.entries().len(),
            store.len()
        )));
    }
    for (name, tensor) in archive.entries() {
        let id = store
            .id(name)
            .ok_or_else(|| Error::Version(format!("unexpected tensor {name}")))?;
        let p = store.get_mut(id);
        if p.value.shape() != tensor.shape() {
            return Err(Error::Version(format!(
                "{name}: shape {:?}, expected {:?}",
                tensor.shape(),
                p.value.shape()
            )));
        }
        p.value = tensor.clone();
    }
    Ok(model)
}

pub fn save(model: &Medusa, path: &Path) -> Result<()> {
    to_archive(model)?.save(path)
}

pub fn load(path: &Path) -> Result<Medusa> {
    from_archive(&Archive::load(path)?)
}
