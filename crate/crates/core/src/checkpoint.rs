//! Training checkpoints: encoder weights, classifier state, and optimizer
//! moments in one versioned binary file.
//!
//! Little-endian layout: magic `RICP`, `u32` version, the encoder
//! configuration (eight `u32` fields), a scalar block (`u32` count, then
//! name + f64 value each), and a tensor block (`u32` count, then name,
//! rank, dims, f32 data each). Training runs at f32, so a save/load
//! round-trip is bit-exact; truncated or mislabeled files fail to load
//! without yielding partial state.

use crate::binio::{
    expect_magic, read_f32s, read_string, read_u32, write_f32s, write_string, write_u32,
};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::loss::ClassifierState;
use crate::optim::{AdamState, MomentPair};
use ndarray::Array2;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RICP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Complete resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder_config: EncoderConfig,
    pub params: EncoderParams<f32>,
    pub classifier: ClassifierState<f32>,
    pub adam: AdamState<f32>,
    /// Training steps completed so far.
    pub trainer_step: u64,
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_f64<R: Read>(r: &mut R, what: &str) -> Result<f64> {
    let mut buf = [0u8; 8];
    crate::binio::read_bytes(r, &mut buf, what)?;
    Ok(f64::from_le_bytes(buf))
}

fn write_tensor<W: Write>(w: &mut W, name: &str, dims: &[usize], data: &[f32]) -> Result<()> {
    write_string(w, name)?;
    write_u32(w, dims.len() as u32)?;
    let mut len = 1usize;
    for &d in dims {
        write_u32(w, u32::try_from(d).map_err(|_| Error::validation("dim exceeds u32"))?)?;
        len *= d;
    }
    debug_assert_eq!(len, data.len());
    write_f32s(w, data)?;
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Vec<usize>, Vec<f32>)> {
    let name = read_string(r, "tensor name")?;
    let rank = read_u32(r, "tensor rank")? as usize;
    if rank > 8 {
        return Err(Error::format(format!("tensor {name}: implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut len = 1usize;
    for _ in 0..rank {
        let d = read_u32(r, "tensor dim")? as usize;
        dims.push(d);
        len = len
            .checked_mul(d)
            .ok_or_else(|| Error::format(format!("tensor {name}: size overflow")))?;
    }
    let data = read_f32s(r, len, "tensor data")?;
    Ok((name, dims, data))
}

pub fn save_checkpoint_writer<W: Write>(w: &mut W, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(w, CHECKPOINT_VERSION)?;
    let c = &ckpt.encoder_config;
    for v in [
        c.layers, c.region_layers, c.heads, c.dim, c.patch, c.channels, c.image_h, c.image_w,
    ] {
        write_u32(w, u32::try_from(v).map_err(|_| Error::validation("config field exceeds u32"))?)?;
    }

    let scalars: Vec<(&str, f64)> = vec![
        ("classifier.m", ckpt.classifier.margin as f64),
        ("classifier.s", ckpt.classifier.scale as f64),
        ("classifier.ocr_offset", ckpt.classifier.ocr_offset as f64),
        ("trainer.step", ckpt.trainer_step as f64),
        ("adam.step", ckpt.adam.step as f64),
    ];
    write_u32(w, scalars.len() as u32)?;
    for (name, value) in scalars {
        write_string(w, name)?;
        write_f64(w, value)?;
    }

    let encoder_tensors = ckpt.params.tensors();
    let adam_tensor_count = 2 * ckpt.adam.slots.len();
    write_u32(w, (encoder_tensors.len() + 1 + adam_tensor_count) as u32)?;
    for (name, dims, data) in &encoder_tensors {
        write_tensor(w, name, dims, data)?;
    }
    write_tensor(
        w,
        "classifier.centers",
        &[ckpt.classifier.k_total(), ckpt.classifier.dim()],
        ckpt.classifier
            .centers
            .as_slice()
            .expect("owned arrays are standard layout"),
    )?;
    for (name, pair) in &ckpt.adam.slots {
        write_tensor(w, &format!("adam.m.{name}"), &[pair.m.len()], &pair.m)?;
        write_tensor(w, &format!("adam.v.{name}"), &[pair.v.len()], &pair.v)?;
    }
    Ok(())
}

pub fn save_checkpoint_file(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    save_checkpoint_writer(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint_file(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    load_checkpoint_reader(&mut r)
}

pub fn load_checkpoint_reader<R: Read>(r: &mut R) -> Result<Checkpoint> {
    expect_magic(r, CHECKPOINT_MAGIC)?;
    let version = read_u32(r, "checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mut fields = [0usize; 8];
    for (i, what) in [
        "layers", "region_layers", "heads", "dim", "patch", "channels", "image_h", "image_w",
    ]
    .iter()
    .enumerate()
    {
        fields[i] = read_u32(r, what)? as usize;
    }
    let encoder_config = EncoderConfig {
        layers: fields[0],
        region_layers: fields[1],
        heads: fields[2],
        dim: fields[3],
        patch: fields[4],
        channels: fields[5],
        image_h: fields[6],
        image_w: fields[7],
    };
    encoder_config.validate()?;

    let scalar_count = read_u32(r, "scalar count")? as usize;
    let mut scalars = BTreeMap::new();
    for _ in 0..scalar_count {
        let name = read_string(r, "scalar name")?;
        let value = read_f64(r, "scalar value")?;
        scalars.insert(name, value);
    }
    let scalar = |name: &str| -> Result<f64> {
        scalars
            .get(name)
            .copied()
            .ok_or_else(|| Error::format(format!("checkpoint missing scalar {name}")))
    };

    let tensor_count = read_u32(r, "tensor count")? as usize;
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for _ in 0..tensor_count {
        let (name, dims, data) = read_tensor(r)?;
        if tensors.insert(name.clone(), (dims, data)).is_some() {
            return Err(Error::format(format!("duplicate tensor {name}")));
        }
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::format("trailing bytes after checkpoint tensors"));
    }

    // Encoder parameters: fill the zero-initialized layout from the named
    // tensors, demanding an exact name/shape match.
    let mut params = EncoderParams::<f32>::zeros(&encoder_config);
    let mut missing = Vec::new();
    params.for_each_mut(|name, dims, slice| {
        match tensors.remove(name) {
            Some((stored_dims, data)) if stored_dims == dims && data.len() == slice.len() => {
                slice.copy_from_slice(&data);
            }
            Some(_) => missing.push(format!("{name} (shape mismatch)")),
            None => missing.push(name.to_string()),
        }
    });
    if !missing.is_empty() {
        return Err(Error::format(format!(
            "checkpoint does not match the declared encoder config: {}",
            missing.join(", ")
        )));
    }

    let (center_dims, center_data) = tensors
        .remove("classifier.centers")
        .ok_or_else(|| Error::format("checkpoint missing classifier.centers"))?;
    if center_dims.len() != 2 {
        return Err(Error::format("classifier.centers must be rank 2"));
    }
    let centers = Array2::from_shape_vec((center_dims[0], center_dims[1]), center_data)
        .map_err(|e| Error::format(format!("classifier.centers shape: {e}")))?;
    let classifier = ClassifierState::new(
        centers,
        scalar("classifier.m")? as f32,
        scalar("classifier.s")? as f32,
        scalar("classifier.ocr_offset")? as usize,
    )?;

    let mut adam = AdamState::<f32>::new();
    adam.step = scalar("adam.step")? as u64;
    let moment_names: Vec<String> = tensors.keys().cloned().collect();
    for name in moment_names {
        if let Some(param_name) = name.strip_prefix("adam.m.") {
            let (_, m) = tensors.remove(&name).expect("key just listed");
            let v_name = format!("adam.v.{param_name}");
            let (_, v) = tensors
                .remove(&v_name)
                .ok_or_else(|| Error::format(format!("checkpoint missing {v_name}")))?;
            if m.len() != v.len() {
                return Err(Error::format(format!("moment length mismatch for {param_name}")));
            }
            adam.slots.insert(param_name.to_string(), MomentPair { m, v });
        }
    }
    if let Some(stray) = tensors.keys().next() {
        return Err(Error::format(format!("unrecognized tensor {stray}")));
    }

    Ok(Checkpoint {
        encoder_config,
        params,
        classifier,
        adam,
        trainer_step: scalar("trainer.step")? as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamConfig;

    fn sample_checkpoint(seed: u64) -> Checkpoint {
        let encoder_config = EncoderConfig {
            layers: 3,
            region_layers: 1,
            heads: 2,
            dim: 8,
            patch: 4,
            channels: 3,
            image_h: 8,
            image_w: 8,
        };
        let params = EncoderParams::<f32>::init(&encoder_config, seed).unwrap();
        let classifier = ClassifierState::<f32>::init(6, 4, 8, 0.3, 64.0, seed + 1).unwrap();
        // Produce non-trivial optimizer moments by running a couple of
        // updates against synthetic gradients.
        let mut adam = AdamState::<f32>::new();
        let cfg = AdamConfig::new(0.001, 0.2);
        let mut params = params;
        for step in 0..2 {
            adam.begin_step();
            params.for_each_mut(|name, _, slice| {
                let grad: Vec<f32> = slice
                    .iter()
                    .enumerate()
                    .map(|(i, _)| ((i + step) % 5) as f32 * 0.01 - 0.02)
                    .collect();
                adam.update_tensor(&cfg, name, slice, &grad).unwrap();
            });
        }
        Checkpoint {
            encoder_config,
            params,
            classifier,
            adam,
            trainer_step: 2,
        }
    }

    fn tensors_equal(a: &EncoderParams<f32>, b: &EncoderParams<f32>) -> bool {
        let ta = a.tensors();
        let tb = b.tensors();
        ta.len() == tb.len()
            && ta.iter().zip(&tb).all(|((na, da, va), (nb, db, vb))| {
                na == nb
                    && da == db
                    && va.iter().zip(vb.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample_checkpoint(31);
        let mut buf = Vec::new();
        save_checkpoint_writer(&mut buf, &ckpt).unwrap();
        let back = load_checkpoint_reader(&mut buf.as_slice()).unwrap();
        assert!(tensors_equal(&ckpt.params, &back.params));
        assert_eq!(ckpt.classifier, back.classifier);
        assert_eq!(ckpt.adam, back.adam);
        assert_eq!(ckpt.trainer_step, back.trainer_step);
        assert_eq!(ckpt.encoder_config, back.encoder_config);

        // Saving the loaded state again reproduces the bytes.
        let mut again = Vec::new();
        save_checkpoint_writer(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn truncation_anywhere_fails_cleanly() {
        let ckpt = sample_checkpoint(32);
        let mut buf = Vec::new();
        save_checkpoint_writer(&mut buf, &ckpt).unwrap();
        for cut in [3, 9, 20, buf.len() / 2, buf.len() - 1] {
            let view = &buf[..cut];
            assert!(
                load_checkpoint_reader(&mut &view[..]).is_err(),
                "cut at {cut} loaded"
            );
        }
    }

    #[test]
    fn wrong_magic_version_and_trailing_bytes_are_rejected() {
        let ckpt = sample_checkpoint(33);
        let mut buf = Vec::new();
        save_checkpoint_writer(&mut buf, &ckpt).unwrap();

        let mut wrong_magic = buf.clone();
        wrong_magic[0] = b'Q';
        assert!(load_checkpoint_reader(&mut wrong_magic.as_slice()).is_err());

        let mut wrong_version = buf.clone();
        wrong_version[4] = 99;
        assert!(load_checkpoint_reader(&mut wrong_version.as_slice()).is_err());

        let mut trailing = buf.clone();
        trailing.push(7);
        assert!(load_checkpoint_reader(&mut trailing.as_slice()).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt").join("state.ricp");
        let ckpt = sample_checkpoint(34);
        save_checkpoint_file(&path, &ckpt).unwrap();
        let back = load_checkpoint_file(&path).unwrap();
        assert!(tensors_equal(&ckpt.params, &back.params));
        assert_eq!(ckpt.adam, back.adam);
    }

    #[test]
    fn fresh_state_without_moments_round_trips() {
        let encoder_config = EncoderConfig {
            layers: 2,
            region_layers: 1,
            heads: 1,
            dim: 4,
            patch: 4,
            channels: 3,
            image_h: 8,
            image_w: 8,
        };
        let ckpt = Checkpoint {
            params: EncoderParams::<f32>::init(&encoder_config, 1).unwrap(),
            classifier: ClassifierState::<f32>::init(4, 0, 4, 0.3, 64.0, 2).unwrap(),
            adam: AdamState::new(),
            trainer_step: 0,
            encoder_config,
        };
        let mut buf = Vec::new();
        save_checkpoint_writer(&mut buf, &ckpt).unwrap();
        let back = load_checkpoint_reader(&mut buf.as_slice()).unwrap();
        assert_eq!(back.adam.slots.len(), 0);
        assert_eq!(back.trainer_step, 0);
    }
}
