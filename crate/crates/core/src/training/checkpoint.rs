//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic, u32 version, length-prefixed config text, then named
//! blocks (u32 name length, name bytes, u8 dtype tag, u32 rank, u64 dims,
//! little-endian payload). Tags: 1 = f64 tensor, 2 = u64 scalar, 3 = raw
//! bytes (rank 1, dims[0] = byte count).

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::networks::{init_params, ModelBundle};
use crate::training::config::TrainConfig;
use crate::training::optimizer::Adam;
use crate::SeedStream;
use ndarray::IxDyn;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"GMXLCKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable snapshot of the random stream.
#[derive(Debug, Clone, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &SeedStream) -> RngState {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> SeedStream {
        use rand::SeedableRng;
        let mut rng = SeedStream::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to reproduce the rest of a training trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub rng: RngState,
    pub bundle: ModelBundle,
    pub opt_gen: Adam,
    pub opt_disc: Adam,
}

enum Block {
    Tensor(Tensor),
    Scalar(u64),
    Bytes(Vec<u8>),
}

fn write_block(out: &mut Vec<u8>, name: &str, block: &Block) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    match block {
        Block::Tensor(t) => {
            out.push(1u8);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Block::Scalar(v) => {
            out.push(2u8);
            out.extend_from_slice(&0u32.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        Block::Bytes(b) => {
            out.push(3u8);
            out.extend_from_slice(&1u32.to_le_bytes());
            out.extend_from_slice(&(b.len() as u64).to_le_bytes());
            out.extend_from_slice(b);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::parse(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_block(r: &mut Reader) -> Result<(String, Block)> {
    let name_len = r.u32()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::parse("checkpoint block name is not UTF-8"))?;
    let tag = r.take(1)?[0];
    let rank = r.u32()? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u64()? as usize);
    }
    let block = match tag {
        1 => {
            let n: usize = dims.iter().product();
            let bytes = r.take(n * 8)?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Block::Tensor(
                Tensor::from_shape_vec(IxDyn(&dims), data)
                    .map_err(|e| Error::parse(format!("block '{name}': {e}")))?,
            )
        }
        2 => Block::Scalar(r.u64()?),
        3 => {
            let n = *dims.first().unwrap_or(&0);
            Block::Bytes(r.take(n)?.to_vec())
        }
        other => return Err(Error::parse(format!("unknown dtype tag {other}"))),
    };
    Ok((name, block))
}

fn adam_blocks(prefix: &str, opt: &Adam, out: &mut Vec<(String, Block)>) {
    out.push((format!("{prefix}.step"), Block::Scalar(opt.step)));
    for (name, m, v) in &opt.moments {
        out.push((format!("{prefix}.m.{name}"), Block::Tensor(m.clone())));
        out.push((format!("{prefix}.v.{name}"), Block::Tensor(v.clone())));
    }
}

/// Serialize and atomically write (temp file + rename).
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut blocks: Vec<(String, Block)> = Vec::new();
    blocks.push(("meta.step".into(), Block::Scalar(ckpt.step)));
    blocks.push(("rng.seed".into(), Block::Bytes(ckpt.rng.seed.to_vec())));
    blocks.push(("rng.stream".into(), Block::Scalar(ckpt.rng.stream)));
    blocks.push((
        "rng.word_pos".into(),
        Block::Bytes(ckpt.rng.word_pos.to_le_bytes().to_vec()),
    ));
    for (name, view) in ckpt.bundle.named_params() {
        blocks.push((format!("param.{name}"), Block::Tensor(view.to_owned())));
    }
    adam_blocks("opt_gen", &ckpt.opt_gen, &mut blocks);
    adam_blocks("opt_disc", &ckpt.opt_disc, &mut blocks);

    let config_text = ckpt.config.to_config_text();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_text.len() as u64).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(blocks.len() as u64).to_le_bytes());
    for (name, block) in &blocks {
        write_block(&mut out, name, block);
    }

    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&out)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn take_tensor(map: &mut std::collections::BTreeMap<String, Block>, key: &str) -> Result<Tensor> {
    match map.remove(key) {
        Some(Block::Tensor(t)) => Ok(t),
        Some(_) => Err(Error::parse(format!("block '{key}' has wrong dtype"))),
        None => Err(Error::parse(format!("missing block '{key}'"))),
    }
}

fn take_scalar(map: &mut std::collections::BTreeMap<String, Block>, key: &str) -> Result<u64> {
    match map.remove(key) {
        Some(Block::Scalar(v)) => Ok(v),
        Some(_) => Err(Error::parse(format!("block '{key}' has wrong dtype"))),
        None => Err(Error::parse(format!("missing block '{key}'"))),
    }
}

fn take_bytes(map: &mut std::collections::BTreeMap<String, Block>, key: &str) -> Result<Vec<u8>> {
    match map.remove(key) {
        Some(Block::Bytes(b)) => Ok(b),
        Some(_) => Err(Error::parse(format!("block '{key}' has wrong dtype"))),
        None => Err(Error::parse(format!("missing block '{key}'"))),
    }
}

fn load_adam(
    map: &mut std::collections::BTreeMap<String, Block>,
    prefix: &str,
    learning_rate: f64,
    names: &[String],
) -> Result<Adam> {
    let step = take_scalar(map, &format!("{prefix}.step"))?;
    let mut moments = Vec::with_capacity(names.len());
    for name in names {
        let m = take_tensor(map, &format!("{prefix}.m.{name}"))?;
        let v = take_tensor(map, &format!("{prefix}.v.{name}"))?;
        if m.shape() != v.shape() {
            return Err(Error::parse(format!("{prefix} moment shape mismatch for {name}")));
        }
        moments.push((name.clone(), m, v));
    }
    Ok(Adam {
        learning_rate,
        step,
        moments,
    })
}

/// Load and validate a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    let magic = r.take(8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::parse("not a checkpoint file (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let cfg_len = r.u64()? as usize;
    let cfg_text = String::from_utf8(r.take(cfg_len)?.to_vec())
        .map_err(|_| Error::parse("config text is not UTF-8"))?;
    let config = TrainConfig::from_config_text(&cfg_text)?;

    let n_blocks = r.u64()? as usize;
    let mut map = std::collections::BTreeMap::new();
    for _ in 0..n_blocks {
        let (name, block) = read_block(&mut r)?;
        map.insert(name, block);
    }
    if r.pos != buf.len() {
        return Err(Error::parse(format!(
            "trailing bytes after block {n_blocks} (offset {})",
            r.pos
        )));
    }

    let step = take_scalar(&mut map, "meta.step")?;
    let seed_bytes = take_bytes(&mut map, "rng.seed")?;
    let seed: [u8; 32] = seed_bytes
        .try_into()
        .map_err(|_| Error::parse("rng.seed must be 32 bytes"))?;
    let stream = take_scalar(&mut map, "rng.stream")?;
    let wp_bytes = take_bytes(&mut map, "rng.word_pos")?;
    let word_pos = u128::from_le_bytes(
        wp_bytes
            .try_into()
            .map_err(|_| Error::parse("rng.word_pos must be 16 bytes"))?,
    );

    // rebuild the bundle in canonical shape, then overwrite from blocks
    let mut bundle = init_params(&config.to_net_spec(), 0)
        .map_err(|e| Error::parse(format!("checkpoint config yields invalid spec: {e}")))?;
    let mut gen_names = Vec::new();
    let mut disc_names = Vec::new();
    for (name, mut view) in bundle.named_params_mut() {
        let t = take_tensor(&mut map, &format!("param.{name}"))?;
        if t.shape() != view.shape() {
            return Err(Error::parse(format!(
                "param.{name}: shape {:?} does not match config shape {:?}",
                t.shape(),
                view.shape()
            )));
        }
        view.assign(&t);
        if crate::networks::is_discriminator_param(&name) {
            disc_names.push(name);
        } else {
            gen_names.push(name);
        }
    }
    let opt_gen = load_adam(&mut map, "opt_gen", config.learning_rate_gen, &gen_names)?;
    let opt_disc = load_adam(&mut map, "opt_disc", config.learning_rate_disc, &disc_names)?;
    if !map.is_empty() {
        let extra: Vec<_> = map.keys().cloned().collect();
        return Err(Error::parse(format!("unexpected blocks: {extra:?}")));
    }

    Ok(Checkpoint {
        config,
        step,
        rng: RngState {
            seed,
            stream,
            word_pos,
        },
        bundle,
        opt_gen,
        opt_disc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::new_train_state;
    use tempfile::TempDir;

    fn small_config() -> TrainConfig {
        TrainConfig {
            k: 2,
            latent_dim: 3,
            patch_size: 8,
            channel_widths: vec![3, 4],
            steps: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let dir = TempDir::new().unwrap();
        let cfg = small_config();
        let state = new_train_state(&cfg).unwrap();
        let ckpt = state.to_checkpoint(&cfg);
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt, back);
    }

    #[test]
    fn truncated_file_is_parse_error_without_partial_state() {
        let dir = TempDir::new().unwrap();
        let cfg = small_config();
        let state = new_train_state(&cfg).unwrap();
        let path = dir.path().join("b.ckpt");
        save_checkpoint(&state.to_checkpoint(&cfg), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path).unwrap_err(), Error::Parse(_)));
    }

    #[test]
    fn version_mismatch_is_incompatible() {
        let dir = TempDir::new().unwrap();
        let cfg = small_config();
        let state = new_train_state(&cfg).unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&state.to_checkpoint(&cfg), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99; // version field
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            Error::Incompatible(_)
        ));
    }

    #[test]
    fn bad_magic_is_parse_error() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("d.ckpt");
        std::fs::write(&path, b"WRONGMAGIC-and-more-bytes").unwrap();
        assert!(matches!(load_checkpoint(&path).unwrap_err(), Error::Parse(_)));
    }

    #[test]
    fn rng_state_roundtrip_resumes_the_stream() {
        use rand::{Rng, SeedableRng};
        let mut rng = SeedStream::seed_from_u64(77);
        let _burn: f64 = rng.random();
        let snap = RngState::capture(&rng);
        let a: Vec<u64> = (0..8).map(|_| rng.random()).collect();
        let mut restored = snap.restore();
        let b: Vec<u64> = (0..8).map(|_| restored.random()).collect();
        assert_eq!(a, b);
    }
}
