//! Checkpoint directories:
//!
//! ```text
//! <dir>/manifest.txt        [model] config, [assignment] plans, [tensors] name = shape
//! <dir>/tensors/<name>.txt  one tensor dump per parameter
//! ```

use std::fs;
use std::path::Path;

use crate::config::ConfigDoc;
use crate::tensor::{Scalar, Tensor};

use super::{Model, ModelConfig, ModelError, ParameterStore};

pub struct Checkpoint<T> {
    pub model: Model<T>,
    /// Extra `[meta]` entries written alongside the model.
    pub meta: Vec<(String, String)>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn plan_line(blocks: &[usize]) -> String {
    blocks.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn save_checkpoint<T: Scalar>(
    model: &Model<T>,
    dir: &Path,
    meta: &[(String, String)],
) -> Result<(), ModelError> {
    let tensor_dir = dir.join("tensors");
    fs::create_dir_all(&tensor_dir).map_err(io_err(&tensor_dir))?;

    let mut doc = ConfigDoc::default();
    model.config().write_section(doc.push_section("model"));
    doc.push_section("assignment")
        .set("encoder", plan_line(model.enc_assignment().blocks()))
        .set("decoder", plan_line(model.dec_assignment().blocks()));
    let tensors = doc.push_section("tensors");
    for (_, name, t) in model.store.iter() {
        tensors.set(name, plan_line(t.shape()));
    }
    let m = doc.push_section("meta");
    m.set("precision", T::NAME);
    for (k, v) in meta {
        m.set(k, v);
    }
    let manifest = dir.join("manifest.txt");
    fs::write(&manifest, doc.render()).map_err(io_err(&manifest))?;

    for (_, name, t) in model.store.iter() {
        let path = tensor_dir.join(format!("{name}.txt"));
        fs::write(&path, t.dump()).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Loads a checkpoint into precision `T`, checking every tensor against the
/// shapes in the manifest and the layout the manifest's config implies.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>, ModelError> {
    let manifest = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest).map_err(io_err(&manifest))?;
    let bad = |msg: String| ModelError::Checkpoint(format!("{}: {msg}", manifest.display()));
    let doc = ConfigDoc::parse(&text).map_err(|e| bad(e.to_string()))?;

    let section = |name: &str| doc.section(name).ok_or_else(|| bad(format!("missing [{name}]")));
    let config = ModelConfig::from_section(section("model")?).map_err(|e| bad(e.to_string()))?;
    let layout = ParameterStore::<T>::allocate(&config, 0);
    let (enc, dec) = config.assignments()?;

    let plans = section("assignment")?;
    for (key, plan) in [("encoder", &enc), ("decoder", &dec)] {
        let recorded = plans.entry(key).map(|e| e.value.as_str()).unwrap_or("");
        if recorded != plan_line(plan.blocks()) {
            return Err(bad(format!(
                "{key} assignment `{recorded}` disagrees with the configured plan `{}`",
                plan_line(plan.blocks())
            )));
        }
    }

    let shapes = section("tensors")?;
    if shapes.entries.len() != layout.len() {
        return Err(bad(format!(
            "manifest lists {} tensors, configuration needs {}",
            shapes.entries.len(),
            layout.len()
        )));
    }
    let mut names = Vec::with_capacity(layout.len());
    let mut tensors = Vec::with_capacity(layout.len());
    for (_, name, expected) in layout.iter() {
        let listed = shapes
            .entry(name)
            .ok_or_else(|| bad(format!("tensor `{name}` not listed")))?;
        if listed.value != plan_line(expected.shape()) {
            return Err(bad(format!(
                "tensor `{name}` listed with shape `{}`, expected `{}`",
                listed.value,
                plan_line(expected.shape())
            )));
        }
        let path = dir.join("tensors").join(format!("{name}.txt"));
        let dump = fs::read_to_string(&path).map_err(io_err(&path))?;
        let t = Tensor::<T>::parse_dump(&dump).map_err(|e| bad(format!("{name}: {e}")))?;
        if t.shape() != expected.shape() {
            return Err(bad(format!(
                "tensor file `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                expected.shape()
            )));
        }
        names.push(name.to_string());
        tensors.push(t.trainable());
    }

    let store = ParameterStore::from_parts(names, tensors, &layout);
    let meta = doc
        .section("meta")
        .map(|m| m.entries.iter().map(|e| (e.key.clone(), e.value.clone())).collect())
        .unwrap_or_default();
    Ok(Checkpoint {
        model: Model::from_store(config, store)?,
        meta,
    })
}
