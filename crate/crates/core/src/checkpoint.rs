//! Binary checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "TINC"  u32 version  u64 config_hash  u32 kind
//! u32 len + label      u32 len + config text
//! u64 epoch            [u8; 32] rng seed  u64 rng stream  u128 rng word position
//! u64 optimizer step   u32 array count
//! per array: u32 len + name, u64 rows, u64 cols, rows·cols f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{config_hash, config_to_text, parse_config};
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::train::{FinetuneOutcome, PoseModel, PretrainState, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TINC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Pretrain,
    Finetune,
}

impl CheckpointKind {
    fn code(self) -> u32 {
        match self {
            CheckpointKind::Pretrain => 0,
            CheckpointKind::Finetune => 1,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(CheckpointKind::Pretrain),
            1 => Ok(CheckpointKind::Finetune),
            _ => Err(Error::Data(format!("unknown checkpoint kind {c}"))),
        }
    }
}

/// Exact position of a `ChaCha8Rng` stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config_hash: u64,
    /// Mode of a pretraining run, or the init variant of a finetuned model.
    pub label: String,
    pub config_text: String,
    pub epoch: u64,
    pub rng: RngState,
    pub optimizer_step: u64,
    pub arrays: Vec<(String, Matrix)>,
}

fn adam_arrays(names: &[String], m: &[Matrix], v: &[Matrix]) -> Vec<(String, Matrix)> {
    let mut out = Vec::with_capacity(names.len() * 2);
    for (n, x) in names.iter().zip(m) {
        out.push((format!("adam.m.{n}"), x.clone()));
    }
    for (n, x) in names.iter().zip(v) {
        out.push((format!("adam.v.{n}"), x.clone()));
    }
    out
}

impl Checkpoint {
    pub fn from_pretrain(state: &PretrainState) -> Self {
        let mode = state.config.mode;
        let mut arrays: Vec<(String, Matrix)> = state.net.tensors().into_iter().map(|(n, m)| (n, m.clone())).collect();
        let scheduled: Vec<String> = state
            .net
            .tensors()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| n.starts_with("enc.") || n.starts_with("dec.") || (mode.trains_latents() && !n.starts_with("head.")))
            .collect();
        arrays.extend(adam_arrays(&scheduled, &state.adam.m, &state.adam.v));
        Self {
            kind: CheckpointKind::Pretrain,
            config_hash: config_hash(&state.config),
            label: mode.to_string(),
            config_text: config_to_text(&state.config),
            epoch: state.epoch as u64,
            rng: RngState::capture(&state.rng),
            optimizer_step: state.adam.step,
            arrays,
        }
    }

    pub fn from_finetune(config: &TrainConfig, label: &str, model: &PoseModel, outcome: &FinetuneOutcome) -> Self {
        let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
        let mut arrays: Vec<(String, Matrix)> = model.tensors().into_iter().map(|(n, m)| (n, m.clone())).collect();
        arrays.extend(adam_arrays(&names, &outcome.adam.m, &outcome.adam.v));
        Self {
            kind: CheckpointKind::Finetune,
            config_hash: config_hash(config),
            label: label.to_string(),
            config_text: config_to_text(config),
            epoch: config.finetune_epochs as u64,
            rng: RngState::capture(&outcome.rng),
            optimizer_step: outcome.adam.step,
            arrays,
        }
    }

    /// The stored config, checked against the stored hash.
    pub fn config(&self) -> Result<TrainConfig> {
        let cfg = parse_config(&self.config_text).map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
        if config_hash(&cfg) != self.config_hash {
            return Err(Error::Data("checkpoint config does not match its hash".into()));
        }
        Ok(cfg)
    }

    pub fn array(&self, name: &str) -> Result<&Matrix> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Data(format!("checkpoint has no array {name:?}")))
    }

    fn fill(&self, names: &[String], dst: Vec<&mut Matrix>) -> Result<()> {
        for (n, d) in names.iter().zip(dst) {
            let src = self.array(n)?;
            if src.shape() != d.shape() {
                return Err(Error::Data(format!(
                    "checkpoint array {n:?} is {:?}, model expects {:?}",
                    src.shape(),
                    d.shape()
                )));
            }
            *d = src.clone();
        }
        Ok(())
    }

    pub fn to_pretrain(&self) -> Result<PretrainState> {
        if self.kind != CheckpointKind::Pretrain {
            return Err(Error::Data("not a pretraining checkpoint".into()));
        }
        let cfg = self.config()?;
        let mut st = PretrainState::new(&cfg)?;
        let names: Vec<String> = st.net.tensors().into_iter().map(|(n, _)| n).collect();
        self.fill(&names, st.net.tensors_mut())?;
        let mode = cfg.mode;
        let scheduled: Vec<String> = names
            .iter()
            .filter(|n| n.starts_with("enc.") || n.starts_with("dec.") || (mode.trains_latents() && !n.starts_with("head.")))
            .cloned()
            .collect();
        let m_names: Vec<String> = scheduled.iter().map(|n| format!("adam.m.{n}")).collect();
        let v_names: Vec<String> = scheduled.iter().map(|n| format!("adam.v.{n}")).collect();
        self.fill(&m_names, st.adam.m.iter_mut().collect())?;
        self.fill(&v_names, st.adam.v.iter_mut().collect())?;
        st.adam.step = self.optimizer_step;
        st.rng = self.rng.restore();
        st.epoch = self.epoch as usize;
        Ok(st)
    }

    /// Finetuned encoder and head.
    pub fn to_pose(&self) -> Result<(TrainConfig, PoseModel)> {
        if self.kind != CheckpointKind::Finetune {
            return Err(Error::Data("not a finetuned checkpoint".into()));
        }
        let cfg = self.config()?;
        let net = crate::train::Network::init(&cfg)?;
        let mut model = PoseModel::from_pretrained(&net.model, cfg.seed);
        let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
        self.fill(&names, model.tensors_mut())?;
        Ok((cfg, model))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.config_hash.to_le_bytes())?;
        w.write_all(&self.kind.code().to_le_bytes())?;
        write_str(w, &self.label)?;
        write_str(w, &self.config_text)?;
        w.write_all(&self.epoch.to_le_bytes())?;
        w.write_all(&self.rng.seed)?;
        w.write_all(&self.rng.stream.to_le_bytes())?;
        w.write_all(&self.rng.word_pos.to_le_bytes())?;
        w.write_all(&self.optimizer_step.to_le_bytes())?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, m) in &self.arrays {
            write_str(w, name)?;
            w.write_all(&(m.rows() as u64).to_le_bytes())?;
            w.write_all(&(m.cols() as u64).to_le_bytes())?;
            for v in m.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let magic: [u8; 4] = read_array(r)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(read_array(r)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let config_hash = u64::from_le_bytes(read_array(r)?);
        let kind = CheckpointKind::from_code(u32::from_le_bytes(read_array(r)?))?;
        let label = read_str(r)?;
        let config_text = read_str(r)?;
        let epoch = u64::from_le_bytes(read_array(r)?);
        let seed: [u8; 32] = read_array(r)?;
        let stream = u64::from_le_bytes(read_array(r)?);
        let word_pos = u128::from_le_bytes(read_array(r)?);
        let optimizer_step = u64::from_le_bytes(read_array(r)?);
        let count = u32::from_le_bytes(read_array(r)?);
        let mut arrays = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = read_str(r)?;
            let rows = u64::from_le_bytes(read_array(r)?) as usize;
            let cols = u64::from_le_bytes(read_array(r)?) as usize;
            let len = rows
                .checked_mul(cols)
                .filter(|&n| n <= 1 << 32)
                .ok_or_else(|| Error::Data(format!("array {name:?} has an implausible shape {rows}×{cols}")))?;
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from_le_bytes(read_array(r)?));
            }
            arrays.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Data("trailing bytes after checkpoint arrays".into()));
        }
        Ok(Self {
            kind,
            config_hash,
            label,
            config_text,
            epoch,
            rng: RngState { seed, stream, word_pos },
            optimizer_step,
            arrays,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    /// Writes to a sibling temp file first, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?;
        Self::read_from(&mut BufReader::new(f)).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Data("checkpoint is truncated".into())
        } else {
            Error::Io(e)
        }
    })?;
    Ok(b)
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = u32::from_le_bytes(read_array(r)?) as usize;
    if len > 1 << 24 {
        return Err(Error::Data(format!("implausible string length {len}")));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).map_err(|_| Error::Data("checkpoint is truncated".into()))?;
    String::from_utf8(b).map_err(|_| Error::Data("checkpoint string is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_dataset;
    use crate::train::{run_finetune, run_pretrain, Mode};
    use rand::RngCore;

    fn tiny() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            d: 8,
            r: 2,
            n_emb: 3,
            emb_hidden: 4,
            hidden1: 10,
            hidden2: 8,
            head_hidden: 6,
            img_size: 8,
            n_train: 16,
            n_val: 4,
            n_test: 4,
            finetune_epochs: 1,
            finetune_batch_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..17 {
            a.next_u32();
        }
        let mut b = RngState::capture(&a).restore();
        for _ in 0..50 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn pretrain_round_trip_is_bit_exact() {
        for mode in Mode::ALL {
            let cfg = TrainConfig { mode, ..tiny() };
            let data = make_dataset(&cfg.data_config()).unwrap();
            let mut st = PretrainState::new(&cfg).unwrap();
            run_pretrain(&mut st, &data, "t", |_, _| Ok(())).unwrap();
            let ck = Checkpoint::from_pretrain(&st);
            let bytes = ck.to_bytes();
            let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
            let restored = back.to_pretrain().unwrap();
            assert_eq!(restored.net, st.net);
            assert_eq!(restored.adam, st.adam);
            assert_eq!(restored.epoch, st.epoch);
            assert_eq!(RngState::capture(&restored.rng), RngState::capture(&st.rng));
            // save, load, save again
            assert_eq!(Checkpoint::from_pretrain(&restored).to_bytes(), bytes);
        }
    }

    #[test]
    fn finetune_round_trip() {
        let cfg = tiny();
        let data = make_dataset(&cfg.data_config()).unwrap();
        let init = crate::model::ModelParams::init(cfg.dims(), 0).unwrap();
        let (model, out) = run_finetune(&init, &cfg, &data, "f", "random").unwrap();
        let ck = Checkpoint::from_finetune(&cfg, "random", &model, &out);
        let back = Checkpoint::read_from(&mut ck.to_bytes().as_slice()).unwrap();
        let (c2, m2) = back.to_pose().unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(m2, model);
        assert_eq!(back.label, "random");
        assert!(back.to_pretrain().is_err());
    }

    #[test]
    fn rejects_corruption() {
        let st = PretrainState::new(&tiny()).unwrap();
        let bytes = Checkpoint::from_pretrain(&st).to_bytes();
        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&2u32.to_le_bytes());
        match Checkpoint::read_from(&mut bad.as_slice()) {
            Err(Error::Data(m)) => assert!(m.contains("version 2"), "{m}"),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(&mut bad.as_slice()).is_err());
        assert!(Checkpoint::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::read_from(&mut long.as_slice()).is_err());
        let mut bad = bytes;
        bad[8] ^= 1;
        let ck = Checkpoint::read_from(&mut bad.as_slice()).unwrap();
        assert!(matches!(ck.to_pretrain(), Err(Error::Data(_))));
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let ck = Checkpoint::from_pretrain(&PretrainState::new(&tiny()).unwrap());
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
        match Checkpoint::load(&dir.path().join("missing.ckpt")) {
            Err(Error::Data(m)) => assert!(m.contains("missing.ckpt")),
            other => panic!("{other:?}"),
        }
    }
}
