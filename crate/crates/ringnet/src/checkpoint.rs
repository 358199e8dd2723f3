//! Self-describing binary checkpoints.
//!
//! File layout, little-endian throughout:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "RINGCKPT"
//! 8       4     format version (u32) — currently 1
//! 12      1     scalar width in bytes (4 = f32, 8 = f64)
//! 13      3     zero padding
//! 16      8     header length H (u64)
//! 24      H     header: one JSON object (see [`Header`]) carrying the model
//!               config, seed, task list, centering kind, completed round
//!               count, and the tensor table
//! 24+H    ...   tensor payload: each table entry's elements concatenated in
//!               table order, row-major, little-endian, no padding
//! ```
//!
//! The tensor table names every stored tensor (`trunk.{layer}.weights`,
//! `head.{head}.{layer}.bias`, `centering.global`, `centering.{head}`,
//! `velocity.` + any parameter name) with its shape, so the payload is fully
//! decodable without consulting the code that wrote it. Saving the same
//! state twice produces byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::LayerParams;
use crate::model::{Centering, ModelConfig, MultiTaskModel, TaskHead};
use crate::optim::ModelVelocity;
use crate::tensor::{elem_count, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"RINGCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Everything a training run needs to stop and continue bit-identically.
pub struct TrainState<T: Scalar> {
    pub model: MultiTaskModel<T>,
    /// Present for resumable mid-run saves; final checkpoints may drop it.
    pub velocity: Option<ModelVelocity<T>>,
    pub completed_rounds: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum CenteringKind {
    None,
    Global,
    PerTask,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
    tasks: Vec<String>,
    centering: CenteringKind,
    completed_rounds: u64,
    has_velocity: bool,
    tensors: Vec<TensorEntry>,
}

fn collect_tensors<'a, T: Scalar>(state: &'a TrainState<T>) -> Vec<(String, &'a Tensor<T>)> {
    let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
    let push_params = |prefix: String, layers: &'a [LayerParams<T>], out: &mut Vec<(String, &'a Tensor<T>)>| {
        for (i, p) in layers.iter().enumerate() {
            if let Some(w) = &p.weights {
                out.push((format!("{prefix}.{i}.weights"), w));
            }
            if let Some(b) = &p.bias {
                out.push((format!("{prefix}.{i}.bias"), b));
            }
        }
    };
    push_params("trunk".into(), &state.model.trunk, &mut out);
    for (h, head) in state.model.heads.iter().enumerate() {
        push_params(format!("head.{h}"), &head.params, &mut out);
    }
    match &state.model.centering {
        Centering::None => {}
        Centering::Global(mean) => out.push(("centering.global".into(), mean)),
        Centering::PerTask(means) => {
            for (h, mean) in means.iter().enumerate() {
                out.push((format!("centering.{h}"), mean));
            }
        }
    }
    if let Some(vel) = &state.velocity {
        push_params("velocity.trunk".into(), &vel.trunk, &mut out);
        for (h, head) in vel.heads.iter().enumerate() {
            push_params(format!("velocity.head.{h}"), head, &mut out);
        }
    }
    out
}

pub fn write_checkpoint<T: Scalar>(out: &mut dyn Write, state: &TrainState<T>) -> Result<()> {
    if let Some(vel) = &state.velocity {
        if vel.heads.len() != state.model.heads.len() {
            return Err(Error::Checkpoint(format!(
                "velocity covers {} heads, model has {}",
                vel.heads.len(),
                state.model.heads.len()
            )));
        }
    }
    let tensors = collect_tensors(state);
    let header = Header {
        config: state.model.config.clone(),
        seed: state.model.seed,
        tasks: state.model.heads.iter().map(|h| h.task.clone()).collect(),
        centering: match &state.model.centering {
            Centering::None => CenteringKind::None,
            Centering::Global(_) => CenteringKind::Global,
            Centering::PerTask(_) => CenteringKind::PerTask,
        },
        completed_rounds: state.completed_rounds,
        has_velocity: state.velocity.is_some(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&[T::WIDTH, 0, 0, 0])?;
    out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    let mut buf = Vec::new();
    for (_, t) in &tensors {
        buf.clear();
        buf.reserve(t.len() * T::WIDTH as usize);
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, state: &TrainState<T>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut out, state)?;
    out.flush()?;
    Ok(())
}

fn read_header(input: &mut dyn Read) -> Result<(u8, Header)> {
    let mut fixed = [0u8; 24];
    input
        .read_exact(&mut fixed)
        .map_err(|_| Error::Checkpoint("file too short for the fixed header".into()))?;
    if &fixed[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(fixed[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let width = fixed[12];
    let header_len = u64::from_le_bytes(fixed[16..24].try_into().unwrap());
    let mut header_bytes = vec![0u8; header_len as usize];
    input
        .read_exact(&mut header_bytes)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    Ok((width, header))
}

/// Model config, seed, tasks, stored scalar width, and completed rounds —
/// without touching the payload.
pub fn peek_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, u64, Vec<String>, u8, u64)> {
    let mut input = BufReader::new(File::open(path)?);
    let (width, header) = read_header(&mut input)?;
    Ok((header.config, header.seed, header.tasks, width, header.completed_rounds))
}

fn take_params<T: Scalar>(
    prefix: &str,
    reference: &[LayerParams<T>],
    table: &mut std::collections::BTreeMap<String, Tensor<T>>,
) -> Result<Vec<LayerParams<T>>> {
    let mut out = Vec::with_capacity(reference.len());
    for (i, r) in reference.iter().enumerate() {
        let mut take = |part: &str, expect: &Option<Tensor<T>>| -> Result<Option<Tensor<T>>> {
            match expect {
                None => Ok(None),
                Some(model_tensor) => {
                    let name = format!("{prefix}.{i}.{part}");
                    let stored = table
                        .remove(&name)
                        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                    if stored.shape() != model_tensor.shape() {
                        return Err(Error::shape(
                            format!("checkpoint tensor {name}"),
                            format!("{:?}", model_tensor.shape()),
                            format!("{:?}", stored.shape()),
                        ));
                    }
                    Ok(Some(stored))
                }
            }
        };
        out.push(LayerParams { weights: take("weights", &r.weights)?, bias: take("bias", &r.bias)? });
    }
    Ok(out)
}

pub fn read_checkpoint<T: Scalar>(input: &mut dyn Read) -> Result<TrainState<T>> {
    let (width, header) = read_header(input)?;
    if width != T::WIDTH {
        return Err(Error::Checkpoint(format!(
            "stored scalars are {width} bytes wide, requested {} bytes",
            T::WIDTH
        )));
    }
    let mut table = std::collections::BTreeMap::new();
    let mut buf = Vec::new();
    for entry in &header.tensors {
        let bytes = elem_count(&entry.shape) * T::WIDTH as usize;
        buf.resize(bytes, 0);
        input
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("truncated payload at tensor {}", entry.name)))?;
        let data: Vec<T> =
            buf.chunks_exact(T::WIDTH as usize).map(|chunk| T::read_le(chunk)).collect();
        let tensor = Tensor::from_vec(&entry.shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", entry.name)))?;
        if table.insert(entry.name.clone(), tensor).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {}", entry.name)));
        }
    }
    let mut trailer = [0u8; 1];
    if input.read(&mut trailer)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after the tensor payload".into()));
    }

    // Build a reference model to know which layers carry parameters and at
    // what shapes, then swap in the stored tensors.
    let mut model = MultiTaskModel::<T>::new(header.config, header.seed, &header.tasks)?;
    model.trunk = take_params("trunk", &model.trunk.clone(), &mut table)?;
    let mut heads = Vec::with_capacity(model.heads.len());
    for (h, head) in model.heads.iter().enumerate() {
        heads.push(TaskHead {
            task: head.task.clone(),
            params: take_params(&format!("head.{h}"), &head.params, &mut table)?,
        });
    }
    model.heads = heads;
    let centering = match header.centering {
        CenteringKind::None => Centering::None,
        CenteringKind::Global => {
            let mean = table
                .remove("centering.global")
                .ok_or_else(|| Error::Checkpoint("missing tensor centering.global".into()))?;
            Centering::Global(mean)
        }
        CenteringKind::PerTask => {
            let mut means = Vec::with_capacity(model.heads.len());
            for h in 0..model.heads.len() {
                let name = format!("centering.{h}");
                means.push(
                    table
                        .remove(&name)
                        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?,
                );
            }
            Centering::PerTask(means)
        }
    };
    model.set_centering(centering)?;
    let velocity = if header.has_velocity {
        let zero = ModelVelocity::zeros_for(&model);
        let trunk = take_params("velocity.trunk", &zero.trunk, &mut table)?;
        let mut vel_heads = Vec::with_capacity(zero.heads.len());
        for (h, head) in zero.heads.iter().enumerate() {
            vel_heads.push(take_params(&format!("velocity.head.{h}"), head, &mut table)?);
        }
        Some(ModelVelocity { trunk, heads: vel_heads })
    } else {
        None
    };
    if let Some((name, _)) = table.into_iter().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
    }
    Ok(TrainState { model, velocity, completed_rounds: header.completed_rounds })
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<TrainState<T>> {
    let mut input = BufReader::new(File::open(path)?);
    read_checkpoint(&mut input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_cifar_config;
    use crate::optim::{sgd_update, SgdHyper};

    fn sample_state() -> TrainState<f32> {
        let tasks: Vec<String> = ["cat", "dog", "frog"].iter().map(|s| s.to_string()).collect();
        let mut model = MultiTaskModel::<f32>::new(build_cifar_config(), 5, &tasks).unwrap();
        let means: Vec<Tensor<f32>> =
            (0..3).map(|i| Tensor::filled(&[3, 32, 32], 0.1 * (i + 1) as f32)).collect();
        model.set_centering(Centering::PerTask(means)).unwrap();
        let mut velocity = ModelVelocity::zeros_for(&model);
        // Give the velocity non-trivial content so the round trip proves it.
        let hyper = SgdHyper::default();
        let w = model.trunk[0].weights.as_mut().unwrap();
        let v = velocity.trunk[0].weights.as_mut().unwrap();
        let grad = Tensor::filled(w.shape(), 0.25f32);
        sgd_update(w, v, &grad, hyper.lr_weights, hyper.momentum, hyper.weight_decay).unwrap();
        TrainState { model, velocity: Some(velocity), completed_rounds: 4 }
    }

    fn state_checksums(s: &TrainState<f32>) -> Vec<u64> {
        collect_tensors(s).iter().map(|(_, t)| t.checksum()).collect()
    }

    #[test]
    fn round_trip_restores_everything_bit_for_bit() {
        let state = sample_state();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &state).unwrap();
        let back = read_checkpoint::<f32>(&mut buf.as_slice()).unwrap();
        assert_eq!(back.model.config, state.model.config);
        assert_eq!(back.model.seed, 5);
        assert_eq!(back.completed_rounds, 4);
        assert_eq!(back.model.task_ids(), state.model.task_ids());
        assert_eq!(state_checksums(&back), state_checksums(&state));
        assert!(matches!(back.model.centering, Centering::PerTask(_)));
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let state = sample_state();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_checkpoint(&mut a, &state).unwrap();
        write_checkpoint(&mut b, &state).unwrap();
        assert_eq!(a, b);
        // And a loaded state re-saves to the same bytes.
        let back = read_checkpoint::<f32>(&mut a.as_slice()).unwrap();
        let mut c = Vec::new();
        write_checkpoint(&mut c, &back).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn velocity_is_optional() {
        let mut state = sample_state();
        state.velocity = None;
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &state).unwrap();
        let back = read_checkpoint::<f32>(&mut buf.as_slice()).unwrap();
        assert!(back.velocity.is_none());
    }

    #[test]
    fn corrupted_files_are_rejected_with_reasons() {
        let state = sample_state();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &state).unwrap();

        let err_of = |bytes: &[u8]| match read_checkpoint::<f32>(&mut &bytes[..]) {
            Ok(_) => panic!("corrupted checkpoint was accepted"),
            Err(e) => e.to_string(),
        };

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(err_of(&bad_magic).contains("magic"));

        let mut bad_version = buf.clone();
        bad_version[8] = 9;
        assert!(err_of(&bad_version).contains("version 9"));

        assert!(err_of(&buf[..buf.len() - 100]).contains("truncated"));

        let mut extended = buf.clone();
        extended.extend_from_slice(&[0u8; 5]);
        assert!(err_of(&extended).contains("trailing"));
    }

    #[test]
    fn precision_mismatch_is_rejected() {
        let state = sample_state();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &state).unwrap();
        match read_checkpoint::<f64>(&mut buf.as_slice()) {
            Ok(_) => panic!("width mismatch was accepted"),
            Err(e) => assert!(e.to_string().contains("4 bytes wide, requested 8"), "{e}"),
        }
    }

    #[test]
    fn file_round_trip_and_peek() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let state = sample_state();
        save_checkpoint(&path, &state).unwrap();
        let (config, seed, tasks, width, rounds) = peek_checkpoint(&path).unwrap();
        assert_eq!(config, state.model.config);
        assert_eq!(seed, 5);
        assert_eq!(tasks, vec!["cat", "dog", "frog"]);
        assert_eq!(width, 4);
        assert_eq!(rounds, 4);
        let back = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(state_checksums(&back), state_checksums(&state));
    }
}
