//! Checkpoint directories: one SAT1 file per parameter or buffer plus `manifest.txt`.
//!
//! Manifest lines are either `key = value` (model keys and training state) or
//! `tensor <param|buffer> <name> <dims> f32`.

use std::fmt::Write;
use std::fs;
use std::path::Path;

use crate::data::{parse_kv, SatTensor};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::sanet::{ModelCfg, SegModel};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub iteration: usize,
    pub lr: f64,
    pub val_split: f64,
}

fn file_name(name: &str) -> String {
    format!("{name}.sat")
}

pub fn save_checkpoint(dir: &Path, cfg: &ModelCfg, store: &ParamStore<f32>, state: TrainState) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut m = String::new();
    writeln!(m, "model.kind = {}", cfg.kind).unwrap();
    writeln!(m, "model.classes = {}", cfg.classes).unwrap();
    writeln!(m, "backbone.variant = {}", cfg.backbone).unwrap();
    writeln!(m, "model.sa.ratio = {}", cfg.sa_ratio).unwrap();
    writeln!(m, "model.sa.activation = {}", cfg.sa_activation).unwrap();
    writeln!(m, "model.sa.pool = {}", cfg.sa_pool).unwrap();
    writeln!(m, "epoch = {}", state.epoch).unwrap();
    writeln!(m, "iteration = {}", state.iteration).unwrap();
    writeln!(m, "lr = {}", state.lr).unwrap();
    writeln!(m, "train.val_split = {}", state.val_split).unwrap();
    let mut put = |kind: &str, name: &str, t: &Tensor4<f32>| -> Result<()> {
        writeln!(m, "tensor {kind} {name} {} f32", t.shape()).unwrap();
        SatTensor::from_tensor(t).write(&dir.join(file_name(name)))
    };
    for id in store.ids() {
        put("param", store.name(id), store.value(id))?;
    }
    for id in store.buffer_ids() {
        put("buffer", store.buffer_name(id), store.buffer(id))?;
    }
    fs::write(dir.join("manifest.txt"), m)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub cfg: ModelCfg,
    pub model: SegModel,
    pub store: ParamStore<f32>,
    pub state: TrainState,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|e| Error::Data(format!("cannot read checkpoint manifest in {}: {e}", dir.display())))?;
    let (tensors, kv_lines): (Vec<&str>, Vec<&str>) = text.lines().partition(|l| l.starts_with("tensor "));
    let kv = parse_kv(&kv_lines.join("\n"))?;
    let get = |k: &str| {
        kv.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Data(format!("checkpoint manifest lacks `{k}`")))
    };
    let num = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Data(format!("checkpoint manifest: bad `{k}`")))
    };
    let mut cfg = ModelCfg::new(get("model.kind")?.parse()?, get("backbone.variant")?.parse()?, num("model.classes")? as usize);
    cfg.sa_ratio = num("model.sa.ratio")? as usize;
    cfg.sa_activation = get("model.sa.activation")?.parse()?;
    cfg.sa_pool = get("model.sa.pool")?.parse()?;
    let state = TrainState {
        epoch: num("epoch")? as usize,
        iteration: num("iteration")? as usize,
        lr: num("lr")?,
        val_split: num("train.val_split")?,
    };

    let mut store = ParamStore::new(0);
    let model = SegModel::new(&mut store, cfg.clone())?;
    let expected = store.len() + store.buffer_ids().count();
    if tensors.len() != expected {
        return Err(Error::Data(format!(
            "checkpoint lists {} tensors, model {} needs {expected}",
            tensors.len(),
            cfg.name()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for line in tensors {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [_, kind, name, _, _] = parts.as_slice() else {
            return Err(Error::Data(format!("malformed manifest line `{line}`")));
        };
        if !seen.insert((*kind, *name)) {
            return Err(Error::Data(format!("checkpoint lists `{name}` twice")));
        }
        let t = SatTensor::read(&dir.join(file_name(name)))?.into_tensor()?;
        let slot = match *kind {
            "param" => store.find(name).map(|id| store.value_mut(id)),
            "buffer" => store.find_buffer(name).map(|id| store.buffer_mut(id)),
            _ => None,
        }
        .ok_or_else(|| Error::Data(format!("checkpoint tensor `{name}` ({kind}) is not part of the model")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Data(format!(
                "checkpoint tensor `{name}` has dims {}, model expects {}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(Checkpoint {
        cfg,
        model,
        store,
        state,
    })
}
