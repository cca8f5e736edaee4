//! Binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "TSEGCKPT"
//! version      u8       1
//! classes      u32
//! hidden       u32
//! neighbors    u32
//! iteration    u64
//! config hash  32 bytes
//! parameters   f64s: w1 (6×H), b1 (1×H), w2 (H×H), b2 (1×H), weight (H×C), bias (1×C)
//! flags        u8       bit 0: optimizer moments follow, bit 1: RNG state follows
//! [moments]    backbone step u64, first ×4, second ×4; classifier step u64, first ×2, second ×2
//! [rng]        ChaCha8 seed 32 bytes, stream u64, word position u128
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tailseg_core::loss::GradRatioTracker;
use tailseg_core::model::{BackboneParams, ClassifierParams, INPUT_DIM};
use tailseg_core::pseudolabel::PseudoLabelSet;
use tailseg_core::trainer::{OptimizerState, RunState};
use tailseg_core::Tensor;

pub const MAGIC: &[u8; 8] = b"TSEGCKPT";
pub const VERSION: u8 = 1;

const FLAG_MOMENTS: u8 = 1;
const FLAG_RNG: u8 = 2;
/// Refuses absurd dimensions before allocating.
const MAX_DIM: u32 = 1 << 16;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub backbone: OptimizerState,
    pub classifier: OptimizerState,
}

#[derive(Debug, Clone, PartialEq)]
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
    pub classes: u32,
    pub hidden: u32,
    pub neighbors: u32,
    pub iteration: u64,
    pub config_hash: [u8; 32],
    pub backbone: BackboneParams,
    pub classifier: ClassifierParams,
    pub moments: Option<Moments>,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn from_state(state: &RunState, neighbors: usize, config_hash: [u8; 32]) -> Self {
        Self {
            classes: state.classifier.classes() as u32,
            hidden: state.backbone.hidden() as u32,
            neighbors: neighbors as u32,
            iteration: state.iteration as u64,
            config_hash,
            backbone: state.backbone.clone(),
            classifier: state.classifier.clone(),
            moments: Some(Moments {
                backbone: state.backbone_opt.clone(),
                classifier: state.classifier_opt.clone(),
            }),
            rng: Some(RngState::capture(&state.rng)),
        }
    }

    /// A resumable state. Pseudo labels and gradient statistics are rebuilt
    /// by the next I-step, so they start empty.
    pub fn to_state(&self) -> Result<RunState, CheckpointError> {
        let missing = |what: &str| CheckpointError::Corrupt {
            offset: 0,
            reason: format!("checkpoint carries no {what}; cannot resume"),
        };
        let moments = self.moments.clone().ok_or_else(|| missing("optimizer moments"))?;
        let rng = self.rng.as_ref().ok_or_else(|| missing("RNG state"))?.restore();
        Ok(RunState {
            backbone: self.backbone.clone(),
            classifier: self.classifier.clone(),
            backbone_opt: moments.backbone,
            classifier_opt: moments.classifier,
            iteration: self.iteration as usize,
            pseudo: PseudoLabelSet::default(),
            tracker: GradRatioTracker::new(self.classes as usize),
            rng,
            generations: self.iteration as usize,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.classes.to_le_bytes());
        out.extend_from_slice(&self.hidden.to_le_bytes());
        out.extend_from_slice(&self.neighbors.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.backbone.to_le_bytes());
        out.extend_from_slice(&self.classifier.to_le_bytes());
        let flags = if self.moments.is_some() { FLAG_MOMENTS } else { 0 } | if self.rng.is_some() { FLAG_RNG } else { 0 };
        out.push(flags);
        if let Some(m) = &self.moments {
            for opt in [&m.backbone, &m.classifier] {
                out.extend_from_slice(&opt.step.to_le_bytes());
                for t in opt.first.iter().chain(&opt.second) {
                    t.write_le(&mut out);
                }
            }
        }
        if let Some(r) = &self.rng {
            out.extend_from_slice(&r.seed);
            out.extend_from_slice(&r.stream.to_le_bytes());
            out.extend_from_slice(&r.word_pos.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(r.corrupt_at(0, "bad magic bytes"));
        }
        let version = r.u8("version")?;
        if version != VERSION {
            return Err(r.corrupt_at(8, format!("unsupported version {version}")));
        }
        let classes = r.dim("classes")?;
        let hidden = r.dim("hidden width")?;
        let neighbors = r.u32("neighbors")?;
        let iteration = r.u64("iteration")?;
        let config_hash: [u8; 32] = r.take(32, "config hash")?.try_into().expect("32 bytes");
        let (c, h) = (classes as usize, hidden as usize);
        let backbone = BackboneParams {
            w1: r.tensor(INPUT_DIM, h)?,
            b1: r.tensor(1, h)?,
            w2: r.tensor(h, h)?,
            b2: r.tensor(1, h)?,
        };
        let classifier = ClassifierParams {
            weight: r.tensor(h, c)?,
            bias: r.tensor(1, c)?,
        };
        let flags_at = r.pos;
        let flags = r.u8("flags")?;
        if flags & !(FLAG_MOMENTS | FLAG_RNG) != 0 {
            return Err(r.corrupt_at(flags_at, format!("unknown flags {flags:#04x}")));
        }
        let moments = if flags & FLAG_MOMENTS != 0 {
            let backbone_shapes = [(INPUT_DIM, h), (1, h), (h, h), (1, h)];
            let classifier_shapes = [(h, c), (1, c)];
            Some(Moments {
                backbone: r.optimizer(&backbone_shapes)?,
                classifier: r.optimizer(&classifier_shapes)?,
            })
        } else {
            None
        };
        let rng = if flags & FLAG_RNG != 0 {
            Some(RngState {
                seed: r.take(32, "rng seed")?.try_into().expect("32 bytes"),
                stream: r.u64("rng stream")?,
                word_pos: u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes")),
            })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(r.corrupt_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            classes,
            hidden,
            neighbors,
            iteration,
            config_hash,
            backbone,
            classifier,
            moments,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Shapes, norms and header fields, one per line.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let hash: String = self.config_hash.iter().map(|b| format!("{b:02x}")).collect();
        s += &format!("iteration    {}\n", self.iteration);
        s += &format!("config hash  {hash}\n");
        s += &format!("classes      {}\nhidden       {}\nneighbors    {}\n", self.classes, self.hidden, self.neighbors);
        let b = &self.backbone;
        let c = &self.classifier;
        let named: [(&str, &Tensor); 6] = [
            ("backbone.w1", &b.w1),
            ("backbone.b1", &b.b1),
            ("backbone.w2", &b.w2),
            ("backbone.b2", &b.b2),
            ("classifier.weight", &c.weight),
            ("classifier.bias", &c.bias),
        ];
        for (name, t) in named {
            let (r, k) = t.shape();
            s += &format!("{name:<18} {r:>3} x {k:<3}  norm {:.6}\n", t.frobenius_norm());
        }
        match &self.moments {
            Some(m) => s += &format!("adam steps   backbone {}, classifier {}\n", m.backbone.step, m.classifier.step),
            None => s += "adam steps   none stored\n",
        }
        s += &format!("rng state    {}\n", if self.rng.is_some() { "stored" } else { "none" });
        s
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt_at(&self, offset: usize, reason: impl Into<String>) -> CheckpointError {
        CheckpointError::Corrupt {
            offset,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt_at(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn dim(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let at = self.pos;
        let v = self.u32(what)?;
        if v == 0 || v > MAX_DIM {
            return Err(self.corrupt_at(at, format!("implausible {what} {v}")));
        }
        Ok(v)
    }

    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor, CheckpointError> {
        let at = self.pos;
        let raw = self.take(rows * cols * 8, "parameters")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(self.corrupt_at(at + 8 * k, "non-finite value"));
        }
        Ok(Tensor::new(rows, cols, data).expect("sized above"))
    }

    fn optimizer(&mut self, shapes: &[(usize, usize)]) -> Result<OptimizerState, CheckpointError> {
        let step = self.u64("optimizer step")?;
        let first = shapes
            .iter()
            .map(|&(r, c)| self.tensor(r, c))
            .collect::<Result<Vec<_>, _>>()?;
        let second_at = self.pos;
        let second = shapes
            .iter()
            .map(|&(r, c)| self.tensor(r, c))
            .collect::<Result<Vec<_>, _>>()?;
        if second.iter().flat_map(|t| t.data()).any(|&v| v < 0.0) {
            return Err(self.corrupt_at(second_at, "negative second moment"));
        }
        Ok(OptimizerState { first, second, step })
    }
}
