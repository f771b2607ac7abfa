//! On-disk formats: datasets, checkpoints and metrics streams.
//!
//! Binary files are little-endian throughout and end with a CRC-32 of every
//! preceding byte. Byte layouts are described in `docs/formats.md`.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::envs::{Dataset, Transition};
use crate::error::{Error, Result};
use crate::nn::{AdamState, Mlp};
use crate::trainer::{AlphaState, MetricsRecord, MetricsSink, TrainConfig, TrainerState};

pub const DATASET_MAGIC: &[u8; 8] = b"EDPQDATA";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EDPQCKPT";
pub const FORMAT_VERSION: u32 = 1;

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|source| Error::Open {
        path: path.to_path_buf(),
        source,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Open {
        path: path.to_path_buf(),
        source,
    })
}

/// Appends little-endian fields to a byte buffer.
#[derive(Default)]
struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

/// Cursor over a byte slice that reports shortfalls as [`Error::Truncated`].
struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Truncated {
                needed: self.pos.saturating_add(n),
                available: self.buf.len(),
            });
        };
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| Error::DimensionInconsistent(format!("non UTF-8 text field: {e}")))
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Splits off and verifies the trailing checksum, then checks magic and
/// version.
fn open_frame<'a>(bytes: &'a [u8], magic: &[u8; 8], kind: &'static str) -> Result<Decoder<'a>> {
    if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
        return Err(Error::BadMagic(kind));
    }
    let mut head = Decoder { buf: bytes, pos: magic.len() };
    let version = head.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < head.pos + 4 {
        return Err(Error::Truncated {
            needed: head.pos + 4,
            available: bytes.len(),
        });
    }
    let body_end = bytes.len() - 4;
    Ok(Decoder {
        buf: &bytes[..body_end],
        pos: head.pos,
    })
}

fn verify_checksum(bytes: &[u8]) -> Result<()> {
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("four bytes"));
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(())
}

// ---------------------------------------------------------------- datasets

/// Serializes a dataset. Records are `(s, a, r, s′, done)` as `f64`s with
/// `done` stored as `0.0` or `1.0`.
pub fn encode_dataset(data: &Dataset) -> Vec<u8> {
    let mut e = Encoder::default();
    e.bytes(DATASET_MAGIC);
    e.u32(FORMAT_VERSION);
    e.str(&data.env);
    e.u64(data.seed);
    e.u64(data.transitions.len() as u64);
    e.u32(data.state_dim as u32);
    e.u32(data.action_dim as u32);
    for t in &data.transitions {
        t.state.iter().for_each(|&v| e.f64(v));
        t.action.iter().for_each(|&v| e.f64(v));
        e.f64(t.reward);
        t.next_state.iter().for_each(|&v| e.f64(v));
        e.f64(if t.done { 1.0 } else { 0.0 });
    }
    e.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut d = open_frame(bytes, DATASET_MAGIC, "dataset")?;
    let env = d.str()?;
    let seed = d.u64()?;
    let count = d.u64()? as usize;
    let state_dim = d.u32()? as usize;
    let action_dim = d.u32()? as usize;
    if state_dim == 0 || action_dim == 0 || count == 0 {
        return Err(Error::DimensionInconsistent(format!(
            "header declares {count} records of state dim {state_dim}, action dim {action_dim}"
        )));
    }
    let width = 2 * state_dim + action_dim + 2;
    let payload = count
        .checked_mul(width * 8)
        .ok_or_else(|| Error::DimensionInconsistent("record count overflows".into()))?;
    if d.remaining() < payload {
        return Err(Error::Truncated {
            needed: d.pos + payload + 4,
            available: bytes.len(),
        });
    }
    if d.remaining() > payload {
        return Err(Error::DimensionInconsistent(format!(
            "payload holds {} bytes, header implies {payload}",
            d.remaining()
        )));
    }
    verify_checksum(bytes)?;
    let mut transitions = Vec::with_capacity(count);
    for i in 0..count {
        let state = d.f64s(state_dim)?;
        let action = d.f64s(action_dim)?;
        let reward = d.f64()?;
        let next_state = d.f64s(state_dim)?;
        let done = match d.f64()? {
            v if v == 0.0 => false,
            v if v == 1.0 => true,
            v => {
                return Err(Error::DimensionInconsistent(format!(
                    "record {i} has done flag {v}"
                )))
            }
        };
        transitions.push(Transition {
            state,
            action,
            reward,
            next_state,
            done,
        });
    }
    Dataset::new(transitions, env, seed, state_dim, action_dim)
}

pub fn save_dataset(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let mut f = create(path)?;
    f.write_all(&encode_dataset(data))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&read_file(path.as_ref())?)
}

// ------------------------------------------------------------- checkpoints

/// One named array in a checkpoint manifest. `offset` counts `f64`s from the
/// start of the payload.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ManifestEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parsed checkpoint contents before they are bound to a trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state_dim: usize,
    pub action_dim: usize,
    pub step: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub manifest: Vec<ManifestEntry>,
    pub payload: Vec<f64>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Result<(&ManifestEntry, &[f64])> {
        let entry = self
            .manifest
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::MissingArray(name.to_string()))?;
        Ok((entry, &self.payload[entry.offset..entry.offset + entry.len()]))
    }
}

#[derive(Default)]
struct ArrayWriter {
    manifest: Vec<ManifestEntry>,
    payload: Vec<f64>,
}

impl ArrayWriter {
    fn push(&mut self, name: String, shape: Vec<usize>, values: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.manifest.push(ManifestEntry {
            name,
            shape,
            offset: self.payload.len(),
        });
        self.payload.extend_from_slice(values);
    }

    fn mlp(&mut self, prefix: &str, net: &Mlp) {
        let w = net.widths();
        for l in 0..net.layers() {
            let (wr, br) = net.layer_ranges(l);
            let p = net.params();
            self.push(format!("{prefix}.layer{l}.weight"), vec![w[l], w[l + 1]], &p[wr]);
            self.push(format!("{prefix}.layer{l}.bias"), vec![w[l + 1]], &p[br]);
        }
    }

    fn adam(&mut self, prefix: &str, opt: &AdamState) {
        self.push(format!("{prefix}.m"), vec![opt.m.len()], &opt.m);
        self.push(format!("{prefix}.v"), vec![opt.v.len()], &opt.v);
        self.push(format!("{prefix}.step"), vec![1], &[opt.step as f64]);
    }
}

/// Collects every array of a trainer under stable names.
fn trainer_arrays(state: &TrainerState) -> ArrayWriter {
    let mut w = ArrayWriter::default();
    w.mlp("policy", &state.policy.noise_net);
    w.mlp("target_policy", &state.target_policy.noise_net);
    for (m, (net, target)) in state
        .critic
        .members
        .iter()
        .zip(&state.critic.targets)
        .enumerate()
    {
        w.mlp(&format!("critic{m}"), net);
        w.mlp(&format!("critic{m}_target"), target);
    }
    w.adam("policy_opt", &state.policy_opt);
    for (m, opt) in state.critic_opts.iter().enumerate() {
        w.adam(&format!("critic{m}_opt"), opt);
    }
    if let AlphaState::Auto { net, opt } = &state.alpha {
        w.mlp("alpha", net);
        w.adam("alpha_opt", opt);
    }
    w
}

pub fn encode_checkpoint(state: &TrainerState) -> Result<Vec<u8>> {
    let arrays = trainer_arrays(state);
    let config = serde_json::to_string(&state.config)?;
    let mut e = Encoder::default();
    e.bytes(CHECKPOINT_MAGIC);
    e.u32(FORMAT_VERSION);
    e.str(&config);
    e.u32(state.policy.state_dim as u32);
    e.u32(state.policy.action_dim as u32);
    e.u64(state.step);
    e.bytes(&state.rng.get_seed());
    e.u64(state.rng.get_stream());
    e.u128(state.rng.get_word_pos());
    e.u32(arrays.manifest.len() as u32);
    for entry in &arrays.manifest {
        e.str(&entry.name);
        e.u8(entry.shape.len() as u8);
        entry.shape.iter().for_each(|&s| e.u64(s as u64));
        e.u64(entry.offset as u64);
    }
    e.u64(arrays.payload.len() as u64);
    arrays.payload.iter().for_each(|&v| e.f64(v));
    Ok(e.finish())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut d = open_frame(bytes, CHECKPOINT_MAGIC, "checkpoint")?;
    let config: TrainConfig = serde_json::from_str(&d.str()?)?;
    let state_dim = d.u32()? as usize;
    let action_dim = d.u32()? as usize;
    let step = d.u64()?;
    let rng_seed = d.array::<32>()?;
    let rng_stream = d.u64()?;
    let rng_word_pos = d.u128()?;
    let entries = d.u32()? as usize;
    let mut manifest = Vec::with_capacity(entries.min(1 << 16));
    for _ in 0..entries {
        let name = d.str()?;
        let ndim = d.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| d.u64().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = d.u64()? as usize;
        manifest.push(ManifestEntry { name, shape, offset });
    }
    let len = d.u64()? as usize;
    let payload_bytes = len
        .checked_mul(8)
        .ok_or_else(|| Error::DimensionInconsistent("payload length overflows".into()))?;
    if d.remaining() < payload_bytes {
        return Err(Error::Truncated {
            needed: d.pos + payload_bytes + 4,
            available: bytes.len(),
        });
    }
    if d.remaining() > payload_bytes {
        return Err(Error::DimensionInconsistent(format!(
            "payload holds {} bytes, header declares {payload_bytes}",
            d.remaining()
        )));
    }
    verify_checksum(bytes)?;
    for entry in &manifest {
        let end = entry.offset.checked_add(entry.len());
        if end.is_none_or(|end| end > len) {
            return Err(Error::DimensionInconsistent(format!(
                "array `{}` at offset {} with shape {:?} exceeds the {len}-value payload",
                entry.name, entry.offset, entry.shape
            )));
        }
    }
    let payload = d.f64s(len)?;
    Ok(Checkpoint {
        config,
        state_dim,
        action_dim,
        step,
        rng_seed,
        rng_stream,
        rng_word_pos,
        manifest,
        payload,
    })
}

fn fetch<'a>(ck: &'a Checkpoint, name: &str, shape: &[usize]) -> Result<&'a [f64]> {
    let (entry, values) = ck.array(name)?;
    if entry.shape != shape {
        return Err(Error::ShapeMismatch {
            name: name.to_string(),
            expected: shape.to_vec(),
            got: entry.shape.clone(),
        });
    }
    Ok(values)
}

fn restore_mlp(ck: &Checkpoint, prefix: &str, net: &mut Mlp) -> Result<()> {
    let w = net.widths().to_vec();
    let mut params = net.params().to_vec();
    for l in 0..net.layers() {
        let (wr, br) = net.layer_ranges(l);
        params[wr].copy_from_slice(fetch(ck, &format!("{prefix}.layer{l}.weight"), &[w[l], w[l + 1]])?);
        params[br].copy_from_slice(fetch(ck, &format!("{prefix}.layer{l}.bias"), &[w[l + 1]])?);
    }
    net.set_params(&params)
}

fn restore_adam(ck: &Checkpoint, prefix: &str, opt: &mut AdamState) -> Result<()> {
    let n = opt.m.len();
    opt.m.copy_from_slice(fetch(ck, &format!("{prefix}.m"), &[n])?);
    opt.v.copy_from_slice(fetch(ck, &format!("{prefix}.v"), &[n])?);
    opt.step = fetch(ck, &format!("{prefix}.step"), &[1])?[0] as u64;
    Ok(())
}

impl Checkpoint {
    /// Rebuilds a trainer under `config`, which must describe the same
    /// architecture as the saved one. Every array is shape-checked.
    pub fn restore_with(&self, config: &TrainConfig) -> Result<TrainerState> {
        let mut state = TrainerState::new(config, self.state_dim, self.action_dim)?;
        restore_mlp(self, "policy", &mut state.policy.noise_net)?;
        restore_mlp(self, "target_policy", &mut state.target_policy.noise_net)?;
        let members = state.critic.members.len();
        if self.array(&format!("critic{members}.layer0.weight")).is_ok() {
            return Err(Error::ShapeMismatch {
                name: "critic ensemble".into(),
                expected: vec![members],
                got: vec![self.count_members()],
            });
        }
        for m in 0..members {
            restore_mlp(self, &format!("critic{m}"), &mut state.critic.members[m])?;
            restore_mlp(self, &format!("critic{m}_target"), &mut state.critic.targets[m])?;
            restore_adam(self, &format!("critic{m}_opt"), &mut state.critic_opts[m])?;
        }
        restore_adam(self, "policy_opt", &mut state.policy_opt)?;
        if let AlphaState::Auto { net, opt } = &mut state.alpha {
            restore_mlp(self, "alpha", net)?;
            restore_adam(self, "alpha_opt", opt)?;
        }
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        state.rng = rng;
        state.step = self.step;
        Ok(state)
    }

    /// Rebuilds the trainer under the configuration stored in the file.
    pub fn restore(&self) -> Result<TrainerState> {
        self.restore_with(&self.config)
    }

    fn count_members(&self) -> usize {
        (0..)
            .take_while(|m| self.array(&format!("critic{m}.layer0.weight")).is_ok())
            .count()
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, state: &TrainerState) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    let mut f = create(path.as_ref())?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Loads a checkpoint and rebuilds the trainer it was saved from.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainerState> {
    decode_checkpoint(&read_file(path.as_ref())?)?.restore()
}

// ----------------------------------------------------------------- metrics

/// Append-only JSON-lines metrics file. Steps must strictly increase; lines
/// are buffered and flushed at epoch boundaries.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
    last_step: Option<u64>,
}

impl MetricsWriter {
    /// Creates (truncating) `path`.
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        Ok(Self {
            out: BufWriter::new(create(&path)?),
            path,
            last_step: None,
        })
    }

    /// Opens `path` for appending, continuing after its last recorded step.
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let last_step = if path.exists() {
            read_metrics(&path)?.last().map(|r| r.step)
        } else {
            None
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| Error::Open {
                path: path.clone(),
                source,
            })?;
        Ok(Self {
            out: BufWriter::new(file),
            path,
            last_step,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        if let Some(previous) = self.last_step {
            if rec.step <= previous {
                return Err(Error::StepRegression {
                    previous,
                    got: rec.step,
                });
            }
        }
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        self.last_step = Some(rec.step);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

impl MetricsSink for MetricsWriter {
    fn record(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.write(rec)
    }

    fn epoch_end(&mut self) -> Result<()> {
        self.flush()
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

pub fn parse_metrics_line(line: &str) -> Result<MetricsRecord> {
    Ok(serde_json::from_str(line)?)
}

/// Reads a metrics file, checking that steps strictly increase.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Open {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out: Vec<MetricsRecord> = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_metrics_line(&line)?;
        if let Some(prev) = out.last() {
            if rec.step <= prev.step {
                return Err(Error::StepRegression {
                    previous: prev.step,
                    got: rec.step,
                });
            }
        }
        out.push(rec);
    }
    Ok(out)
}
