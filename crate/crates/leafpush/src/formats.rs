//! On-disk formats: frame dumps, PPM previews, checkpoints, metrics and
//! evaluation reports.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use leafpush_core::eval::{EvalReport, StepStats, TrialRecord};
use leafpush_core::nn::{Network, NetworkConfig};
use leafpush_core::ppo::{Adam, Learner, RunningScaler, Snapshot, TrainMetrics};
use leafpush_core::render::Frame;
use serde::{Deserialize, Serialize};

pub const FRAME_MAGIC: [u8; 4] = *b"LPFR";
pub const FRAME_VERSION: u32 = 1;
pub const FRAME_CHANNELS: u32 = 5;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated input at byte {0}")]
    Truncated(usize),
    #[error("{0}")]
    Invalid(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {got:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(FormatError::Truncated(self.buf.len()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("four bytes");
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn len(&mut self) -> Result<usize, FormatError> {
        usize::try_from(self.u64()?).map_err(|_| FormatError::Invalid("length overflows usize".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let bytes = self.take(n.checked_mul(4).ok_or(FormatError::Truncated(self.buf.len()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let bytes = self.take(n.checked_mul(8).ok_or(FormatError::Truncated(self.buf.len()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect())
    }

    fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(FormatError::Invalid(format!(
                "{} trailing bytes after offset {}",
                self.buf.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }
}

/// Frame as `LPFR` header (version, width, height, channels) followed by
/// R, G, B, alpha and depth planes of little-endian f32, row-major.
pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let n = frame.pixel_count();
    let mut out = Vec::with_capacity(20 + 4 * 5 * n);
    out.extend_from_slice(&FRAME_MAGIC);
    for v in [FRAME_VERSION, frame.width as u32, frame.height as u32, FRAME_CHANNELS] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for c in 0..3 {
        for i in 0..n {
            out.extend_from_slice(&frame.rgb[3 * i + c].to_le_bytes());
        }
    }
    for plane in [&frame.alpha, &frame.depth] {
        for v in plane.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_frame(bytes: &[u8]) -> Result<Frame, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(FRAME_MAGIC)?;
    let version = r.u32()?;
    if version != FRAME_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let channels = r.u32()?;
    if channels != FRAME_CHANNELS {
        return Err(FormatError::Invalid(format!("frame has {channels} channels, expected {FRAME_CHANNELS}")));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| FormatError::Invalid("frame dimensions overflow".into()))?;
    let planes: Vec<Vec<f32>> = (0..3).map(|_| r.f32s(n)).collect::<Result<_, _>>()?;
    let alpha = r.f32s(n)?;
    let depth = r.f32s(n)?;
    r.finish()?;
    let mut rgb = vec![0.0; 3 * n];
    for (c, plane) in planes.iter().enumerate() {
        for i in 0..n {
            rgb[3 * i + c] = plane[i];
        }
    }
    Ok(Frame {
        width,
        height,
        rgb,
        alpha,
        depth,
    })
}

/// Binary PPM (P6) of the RGB channels.
pub fn frame_to_ppm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend(frame.rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Write `bytes` to a sibling temporary file and rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScalerMeta {
    count: f64,
    epsilon: f64,
    clip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    network: NetworkConfig,
    lr: f64,
    env_steps: u64,
    updates: usize,
    episode_counters: Vec<u64>,
    seed: u64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_epsilon: f64,
    adam_t: u64,
    obs_scaler: ScalerMeta,
    value_scaler: ScalerMeta,
}

/// Named tensor of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn scaler_meta(s: &RunningScaler) -> ScalerMeta {
    ScalerMeta {
        count: s.count,
        epsilon: s.epsilon,
        clip: s.clip,
    }
}

/// The named tensors stored for a snapshot, policy tensors first.
pub fn snapshot_tensors(snap: &Snapshot) -> Result<Vec<Tensor>, FormatError> {
    let net = Network::new(snap.network.clone()).map_err(|e| FormatError::Invalid(e.to_string()))?;
    let l = &snap.learner;
    if l.params.len() != net.param_count() {
        return Err(FormatError::Invalid(format!(
            "snapshot has {} parameters, network needs {}",
            l.params.len(),
            net.param_count()
        )));
    }
    let mut out: Vec<Tensor> = net
        .layout()
        .iter()
        .map(|t| Tensor {
            name: format!("policy.{}", t.name),
            shape: t.shape.clone(),
            data: l.params[t.offset..t.offset + t.len()].to_vec(),
        })
        .collect();
    let flat = |name: &str, v: &[f64]| Tensor {
        name: name.into(),
        shape: vec![v.len()],
        data: v.to_vec(),
    };
    out.push(flat("adam.m", &l.adam.m));
    out.push(flat("adam.v", &l.adam.v));
    out.push(flat("obs_scaler.mean", &l.obs_scaler.mean));
    out.push(flat("obs_scaler.m2", &l.obs_scaler.m2));
    out.push(flat("value_scaler.mean", &l.value_scaler.mean));
    out.push(flat("value_scaler.m2", &l.value_scaler.m2));
    Ok(out)
}

/// `LPCK` magic, version, JSON metadata block, then the tensor table: for each
/// tensor its name, rank, dimensions and little-endian f64 values.
pub fn encode_checkpoint(snap: &Snapshot) -> Result<Vec<u8>, FormatError> {
    let l = &snap.learner;
    let meta = CheckpointMeta {
        network: snap.network.clone(),
        lr: l.lr,
        env_steps: snap.env_steps,
        updates: snap.updates,
        episode_counters: snap.episode_counters.clone(),
        seed: snap.seed,
        adam_beta1: l.adam.beta1,
        adam_beta2: l.adam.beta2,
        adam_epsilon: l.adam.epsilon,
        adam_t: l.adam.t,
        obs_scaler: scaler_meta(&l.obs_scaler),
        value_scaler: scaler_meta(&l.value_scaler),
    };
    let meta = serde_json::to_vec(&meta)?;
    let tensors = snapshot_tensors(snap)?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in &tensors {
        out.extend_from_slice(&(t.name.len() as u64).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u64).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Read the tensor table without interpreting it.
pub fn read_tensor_table(bytes: &[u8]) -> Result<(serde_json::Value, Vec<Tensor>), FormatError> {
    let (meta, tensors) = parse_checkpoint(bytes)?;
    Ok((serde_json::from_slice(meta)?, tensors))
}

fn parse_checkpoint(bytes: &[u8]) -> Result<(&[u8], Vec<Tensor>), FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let meta_len = r.len()?;
    let meta = r.take(meta_len)?;
    let count = r.len()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.len()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| FormatError::Invalid("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.len()?;
        let mut shape = Vec::new();
        for _ in 0..rank {
            shape.push(r.len()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| FormatError::Invalid(format!("tensor `{name}` size overflows")))?;
        let data = r.f64s(n)?;
        tensors.push(Tensor { name, shape, data });
    }
    r.finish()?;
    Ok((meta, tensors))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Snapshot, FormatError> {
    let (meta, tensors) = parse_checkpoint(bytes)?;
    let meta: CheckpointMeta = serde_json::from_slice(meta)?;
    let net = Network::new(meta.network.clone()).map_err(|e| FormatError::Invalid(e.to_string()))?;
    let find = |name: &str, shape: &[usize]| -> Result<Vec<f64>, FormatError> {
        let t = tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| FormatError::MissingTensor(name.into()))?;
        if t.shape != shape {
            return Err(FormatError::TensorShape {
                name: name.into(),
                expected: shape.to_vec(),
                got: t.shape.clone(),
            });
        }
        Ok(t.data.clone())
    };
    let n = net.param_count();
    let mut params = vec![0.0; n];
    for info in net.layout() {
        let data = find(&format!("policy.{}", info.name), &info.shape)?;
        params[info.offset..info.offset + info.len()].copy_from_slice(&data);
    }
    let input = net.input_dim();
    let scaler = |prefix: &str, dim: usize, m: &ScalerMeta| -> Result<RunningScaler, FormatError> {
        Ok(RunningScaler {
            count: m.count,
            mean: find(&format!("{prefix}.mean"), &[dim])?,
            m2: find(&format!("{prefix}.m2"), &[dim])?,
            epsilon: m.epsilon,
            clip: m.clip,
        })
    };
    Ok(Snapshot {
        network: meta.network,
        learner: Learner {
            params,
            adam: Adam {
                beta1: meta.adam_beta1,
                beta2: meta.adam_beta2,
                epsilon: meta.adam_epsilon,
                m: find("adam.m", &[n])?,
                v: find("adam.v", &[n])?,
                t: meta.adam_t,
            },
            lr: meta.lr,
            obs_scaler: scaler("obs_scaler", input, &meta.obs_scaler)?,
            value_scaler: scaler("value_scaler", 1, &meta.value_scaler)?,
        },
        env_steps: meta.env_steps,
        updates: meta.updates,
        episode_counters: meta.episode_counters,
        seed: meta.seed,
    })
}

pub fn save_checkpoint(path: &Path, snap: &Snapshot) -> Result<(), FormatError> {
    write_atomic(path, &encode_checkpoint(snap)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Snapshot, FormatError> {
    decode_checkpoint(&fs::read(path)?)
}

/// One row of the training metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub success_rate: f64,
    pub kl: f64,
    pub lr: f64,
    pub clip_fraction: f64,
}

impl From<&TrainMetrics> for MetricsRow {
    fn from(m: &TrainMetrics) -> Self {
        Self {
            step: m.step,
            episode_return: m.episode_return,
            success_rate: m.success_rate,
            kl: m.kl,
            lr: m.lr,
            clip_fraction: m.clip_fraction,
        }
    }
}

pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    /// Create `path`, or append to it when `append` is set and it exists.
    pub fn create(path: &Path, append: bool) -> Result<Self, FormatError> {
        let exists = append && path.exists();
        let file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(exists)
            .truncate(!exists)
            .open(path)?;
        let inner = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<(), FormatError> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, FormatError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrialRow {
    trial_id: usize,
    plant_id: usize,
    fruit_cell: Option<usize>,
    config_id: Option<usize>,
    seed: u64,
    success: bool,
    steps: usize,
    final_occlusion_fraction: f64,
}

/// Trials as CSV, one row each, in a fixed column order.
pub fn write_eval_csv<W: Write>(out: W, trials: &[TrialRecord]) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(out);
    for t in trials {
        w.serialize(TrialRow {
            trial_id: t.trial_id,
            plant_id: t.plant_id,
            fruit_cell: t.fruit_cell,
            config_id: t.config_id,
            seed: t.seed,
            success: t.success,
            steps: t.steps,
            final_occlusion_fraction: t.final_occlusion_fraction,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_eval_csv(path: &Path) -> Result<Vec<TrialRecord>, FormatError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<TrialRow>()
        .map(|row| {
            let t = row?;
            Ok(TrialRecord {
                trial_id: t.trial_id,
                plant_id: t.plant_id,
                fruit_cell: t.fruit_cell,
                config_id: t.config_id,
                seed: t.seed,
                success: t.success,
                steps: t.steps,
                final_occlusion_fraction: t.final_occlusion_fraction,
            })
        })
        .collect()
}

/// Aggregates written next to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub success_rate: f64,
    pub steps: Option<StepStats>,
    pub heatmap: Vec<Vec<u32>>,
}

impl From<&EvalReport> for EvalSummary {
    fn from(r: &EvalReport) -> Self {
        Self {
            success_rate: r.success_rate,
            steps: r.steps,
            heatmap: r.heatmap.clone(),
        }
    }
}

/// Write `eval.csv` and `eval.json` into `dir`.
pub fn write_eval_report(dir: &Path, report: &EvalReport) -> Result<(), FormatError> {
    fs::create_dir_all(dir)?;
    let mut csv_out = BufWriter::new(File::create(dir.join("eval.csv"))?);
    write_eval_csv(&mut csv_out, &report.trials)?;
    csv_out.flush()?;
    let json = serde_json::to_string_pretty(&EvalSummary::from(report))?;
    fs::write(dir.join("eval.json"), json + "\n")?;
    Ok(())
}
