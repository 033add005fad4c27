//! Checkpoints: a JSON manifest plus one raw array file of little-endian
//! f64 values. Bit-exact by construction, so a save/load round trip restores
//! predictions exactly.

use super::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::model::{FactorDictionary, FactorizedNet, TaskEntry, TaskFactorState};
use crate::oracle::{ClassComponent, TaskStatistics};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

const MANIFEST: &str = "manifest.json";
const ARRAYS: &str = "arrays.bin";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the array file, in f64 units.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct TaskMeta {
    n_train: usize,
    global_offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    config: ExperimentConfig,
    input_dim: usize,
    frozen: Vec<Vec<bool>>,
    tasks: Vec<TaskMeta>,
    /// Example counts behind each task's feature statistics, one inner entry
    /// per class component.
    stats_counts: Vec<Vec<usize>>,
    tensors: Vec<TensorEntry>,
    /// FNV-1a over the raw array bytes.
    checksum: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Writer {
    entries: Vec<TensorEntry>,
    data: Vec<f64>,
}

impl Writer {
    fn push(&mut self, name: String, shape: Vec<usize>, values: &[f64]) {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        self.entries.push(TensorEntry { name, shape, offset: self.data.len() });
        self.data.extend_from_slice(values);
    }
}

pub fn save(
    dir: &Path,
    config: &ExperimentConfig,
    net: &FactorizedNet,
    stats: &[TaskStatistics],
) -> Result<()> {
    let mut w = Writer { entries: Vec::new(), data: Vec::new() };
    for (l, dict) in net.dicts.iter().enumerate() {
        w.push(format!("dict.{l}.w_a"), dict.w_a.shape().to_vec(), dict.w_a.data());
        w.push(format!("dict.{l}.w_b"), dict.w_b.shape().to_vec(), dict.w_b.data());
    }
    for (t, task) in net.tasks.iter().enumerate() {
        for (l, s) in task.states.iter().enumerate() {
            for (field, tensor) in [
                ("r", &s.r),
                ("post_p_raw", &s.post_p_raw),
                ("c_raw", &s.c_raw),
                ("d_raw", &s.d_raw),
                ("prior_c", &s.prior_c),
                ("prior_d", &s.prior_d),
                ("bias", &s.bias),
            ] {
                w.push(format!("task.{t}.{l}.{field}"), tensor.shape().to_vec(), tensor.data());
            }
        }
    }
    for (t, s) in stats.iter().enumerate() {
        let d = s.dim();
        for (c, comp) in s.components().iter().enumerate() {
            w.push(format!("stats.{t}.{c}.mean"), vec![d], comp.mean());
            w.push(format!("stats.{t}.{c}.cov"), vec![d, d], comp.cov());
        }
    }

    let bytes: Vec<u8> = w.data.iter().flat_map(|x| x.to_le_bytes()).collect();
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        input_dim: net.spec.input_dim,
        frozen: net.dicts.iter().map(|d| d.frozen.clone()).collect(),
        tasks: net
            .tasks
            .iter()
            .map(|t| TaskMeta { n_train: t.n_train, global_offset: t.global_offset })
            .collect(),
        stats_counts: stats
            .iter()
            .map(|s| s.components().iter().map(ClassComponent::count).collect())
            .collect(),
        tensors: w.entries,
        checksum: fnv1a(&bytes),
    };

    std::fs::create_dir_all(dir)
        .map_err(|e| corrupt(format!("cannot create {}: {e}", dir.display())))?;
    std::fs::write(dir.join(ARRAYS), &bytes)
        .map_err(|e| corrupt(format!("writing arrays: {e}")))?;
    std::fs::write(
        dir.join(MANIFEST),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| corrupt(format!("writing manifest: {e}")))?;
    Ok(())
}

struct Reader {
    entries: Vec<TensorEntry>,
    data: Vec<f64>,
}

impl Reader {
    fn take(&self, name: &str) -> Result<Tensor> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        let count: usize = e.shape.iter().product();
        let end = e.offset + count;
        if end > self.data.len() {
            return Err(corrupt(format!("tensor {name} overruns array file")));
        }
        Ok(Tensor::new(e.shape.clone(), self.data[e.offset..end].to_vec()))
    }
}

pub fn load(dir: &Path) -> Result<(ExperimentConfig, FactorizedNet, Vec<TaskStatistics>)> {
    let manifest_text = std::fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| corrupt(format!("reading manifest in {}: {e}", dir.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&manifest_text).map_err(|e| corrupt(format!("manifest: {e}")))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(corrupt(format!(
            "checkpoint schema {} unsupported",
            manifest.schema_version
        )));
    }
    let bytes = std::fs::read(dir.join(ARRAYS))
        .map_err(|e| corrupt(format!("reading arrays: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(corrupt("array file is not a whole number of f64 values"));
    }
    if fnv1a(&bytes) != manifest.checksum {
        return Err(corrupt("array checksum mismatch"));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let reader = Reader { entries: manifest.tensors, data };

    let config = manifest.config;
    config.validate()?;
    let spec = config.model_spec(manifest.input_dim);
    let layers = spec.num_layers();
    if manifest.frozen.len() != layers {
        return Err(corrupt("frozen mask layer count mismatch"));
    }

    let mut dicts = Vec::with_capacity(layers);
    for (l, frozen) in manifest.frozen.into_iter().enumerate() {
        if frozen.len() != spec.truncation {
            return Err(corrupt(format!("layer {l} frozen mask has wrong length")));
        }
        dicts.push(FactorDictionary {
            w_a: reader.take(&format!("dict.{l}.w_a"))?,
            w_b: reader.take(&format!("dict.{l}.w_b"))?,
            frozen,
        });
    }

    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for (t, meta) in manifest.tasks.iter().enumerate() {
        let mut states = Vec::with_capacity(layers);
        for l in 0..layers {
            let grab = |field: &str| reader.take(&format!("task.{t}.{l}.{field}"));
            states.push(TaskFactorState {
                r: grab("r")?,
                post_p_raw: grab("post_p_raw")?,
                c_raw: grab("c_raw")?,
                d_raw: grab("d_raw")?,
                prior_c: grab("prior_c")?,
                prior_d: grab("prior_d")?,
                bias: grab("bias")?,
            });
        }
        tasks.push(TaskEntry { states, n_train: meta.n_train, global_offset: meta.global_offset });
    }

    let mut stats = Vec::with_capacity(manifest.stats_counts.len());
    for (t, counts) in manifest.stats_counts.iter().enumerate() {
        let mut components = Vec::with_capacity(counts.len());
        for (c, &n) in counts.iter().enumerate() {
            let mean = reader.take(&format!("stats.{t}.{c}.mean"))?;
            let cov = reader.take(&format!("stats.{t}.{c}.cov"))?;
            components.push(ClassComponent::from_parts(
                mean.data().to_vec(),
                cov.data().to_vec(),
                n,
            )?);
        }
        stats.push(TaskStatistics::new(components));
    }

    for dict in &dicts {
        let (j, k) = (dict.w_a.rows(), dict.w_a.cols());
        if k != spec.truncation || dict.w_b.rows() != k {
            return Err(corrupt(format!("dictionary shape {j}x{k} disagrees with config")));
        }
    }

    Ok((config, FactorizedNet { spec, dicts, tasks }, stats))
}
