//! Bit-exact binary container for embeddings, labels, weights, banks and
//! checkpoints. Every section starts with the magic `PDAE`, a format
//! version and a section tag, all little-endian; declared sizes must match
//! the payload exactly and readers reject anything else with the byte
//! offset of the failure.

use std::path::Path;

use crate::alignment::{ClassSupport, FeatureBank};
use crate::encoder::Domain;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"PDAE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SectionTag {
    Embeddings = 1,
    Labels = 2,
    Weights = 3,
    Bank = 4,
    Checkpoint = 5,
    /// Target ground truth, readable only by evaluation code paths.
    EvalLabels = 6,
}

impl SectionTag {
    fn from_u32(v: u32, offset: u64) -> Result<Self> {
        Ok(match v {
            1 => SectionTag::Embeddings,
            2 => SectionTag::Labels,
            3 => SectionTag::Weights,
            4 => SectionTag::Bank,
            5 => SectionTag::Checkpoint,
            6 => SectionTag::EvalLabels,
            other => {
                return Err(Error::Format {
                    offset,
                    msg: format!("unknown section tag {other}"),
                })
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn from_u8(v: u8, offset: u64) -> Result<Self> {
        match v {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Format { offset, msg: format!("unknown dtype code {other}") }),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Serialized RNG position, enough to resume a `ChaCha8Rng` exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &rand_chacha::ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything a resumed run needs besides the dataset and config file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: u64,
    pub epochs_done: u32,
    pub rng: RngState,
    /// Named learnable tensors in a stable order.
    pub tensors: Vec<(String, Tensor)>,
}

// ── writing ──────────────────────────────────────────────────────────

struct SectionBuf {
    bytes: Vec<u8>,
}

impl SectionBuf {
    fn new(tag: SectionTag) -> Self {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(tag as u32).to_le_bytes());
        SectionBuf { bytes }
    }

    fn u8(&mut self, v: u8) {
        self.bytes.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn u128(&mut self, v: u128) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn matrix_body(&mut self, t: &Tensor, dtype: Dtype) {
        self.u64(t.rows() as u64);
        self.u64(t.cols() as u64);
        self.u8(dtype as u8);
        match dtype {
            Dtype::F64 => {
                for v in t.data() {
                    self.bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F32 => {
                for v in t.data() {
                    self.bytes.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
    }
}

fn labels_section(tag: SectionTag, ids: &[u32]) -> Vec<u8> {
    let mut s = SectionBuf::new(tag);
    s.u64(ids.len() as u64);
    for id in ids {
        s.u32(*id);
    }
    s.bytes
}

pub fn matrix_section(tag: SectionTag, matrix: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    if !matrix.is_finite() {
        return Err(Error::Numerical("refusing to write non-finite values".into()));
    }
    let mut s = SectionBuf::new(tag);
    s.matrix_body(matrix, dtype);
    Ok(s.bytes)
}

pub fn bank_section(bank: &FeatureBank, dtype: Dtype) -> Result<Vec<u8>> {
    if !bank.centroids.is_finite() {
        return Err(Error::Numerical("refusing to write non-finite bank".into()));
    }
    let mut s = SectionBuf::new(SectionTag::Bank);
    s.u8(match bank.domain {
        Domain::Source => 0,
        Domain::Target => 1,
    });
    s.u32(bank.shots as u32);
    s.matrix_body(&bank.centroids, dtype);
    Ok(s.bytes)
}

fn checkpoint_section(cp: &Checkpoint) -> Vec<u8> {
    let mut s = SectionBuf::new(SectionTag::Checkpoint);
    s.u64(cp.config_hash);
    s.u64(cp.step);
    s.u32(cp.epochs_done);
    s.bytes.extend_from_slice(&cp.rng.seed);
    s.u64(cp.rng.stream);
    s.u128(cp.rng.word_pos);
    s.u32(cp.tensors.len() as u32);
    for (name, t) in &cp.tensors {
        s.u16(name.len() as u16);
        s.bytes.extend_from_slice(name.as_bytes());
        s.matrix_body(t, Dtype::F64);
    }
    s.bytes
}

/// Write an embeddings section, optionally followed by a labels section.
pub fn write_embeddings(
    path: &Path,
    matrix: &Tensor,
    labels: Option<&[u32]>,
    dtype: Dtype,
) -> Result<()> {
    let mut bytes = matrix_section(SectionTag::Embeddings, matrix, dtype)?;
    if let Some(ids) = labels {
        bytes.extend(labels_section(SectionTag::Labels, ids));
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Target-side dataset file: embeddings plus ground truth in the
/// evaluation-only section, invisible to the training loader.
pub fn write_embeddings_with_eval_labels(
    path: &Path,
    matrix: &Tensor,
    eval_labels: &[u32],
    dtype: Dtype,
) -> Result<()> {
    let mut bytes = matrix_section(SectionTag::Embeddings, matrix, dtype)?;
    bytes.extend(labels_section(SectionTag::EvalLabels, eval_labels));
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn write_bank(path: &Path, bank: &FeatureBank) -> Result<()> {
    std::fs::write(path, bank_section(bank, Dtype::F64)?)?;
    Ok(())
}

pub fn write_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint_section(cp))?;
    Ok(())
}

// ── reading ──────────────────────────────────────────────────────────

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format { offset: self.pos as u64, msg: msg.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.fail(format!(
                "truncated: need {n} bytes for {what}, have {}",
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().unwrap()))
    }

    fn is_eof(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn section_header(&mut self) -> Result<SectionTag> {
        let magic_at = self.pos as u64;
        let magic = self.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: magic_at,
                msg: format!("bad magic {magic:02x?}, expected {MAGIC:02x?}"),
            });
        }
        let version_at = self.pos as u64;
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                offset: version_at,
                msg: format!("unsupported format version {version}"),
            });
        }
        let tag_at = self.pos as u64;
        let tag = self.u32("section tag")?;
        SectionTag::from_u32(tag, tag_at)
    }

    fn matrix_body(&mut self) -> Result<Tensor> {
        let rows = self.u64("row count")? as usize;
        let cols = self.u64("column count")? as usize;
        let dtype_at = self.pos as u64;
        let dtype = Dtype::from_u8(self.u8("dtype code")?, dtype_at)?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| self.fail("matrix size overflows"))?;
        let payload = self.take(n * dtype.width(), "matrix payload")?;
        let data: Vec<f64> = match dtype {
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
        };
        Tensor::new(rows, cols, data)
    }

    fn labels_body(&mut self) -> Result<Vec<u32>> {
        let count = self.u64("label count")? as usize;
        let payload = self.take(count * 4, "label payload")?;
        Ok(payload
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

/// A parsed section. Eval labels surface under their own variant so a
/// training loader can structurally refuse them.
#[derive(Debug, Clone)]
pub enum Section {
    Embeddings(Tensor),
    Labels(Vec<u32>),
    Weights(Tensor),
    Bank { domain: Domain, shots: usize, centroids: Tensor },
    Checkpoint(Checkpoint),
    EvalLabels(Vec<u32>),
}

pub fn read_sections(bytes: &[u8]) -> Result<Vec<Section>> {
    let mut r = Reader::new(bytes);
    let mut out = Vec::new();
    while !r.is_eof() {
        let tag = r.section_header()?;
        let section = match tag {
            SectionTag::Embeddings => Section::Embeddings(r.matrix_body()?),
            SectionTag::Weights => Section::Weights(r.matrix_body()?),
            SectionTag::Labels => Section::Labels(r.labels_body()?),
            SectionTag::EvalLabels => Section::EvalLabels(r.labels_body()?),
            SectionTag::Bank => {
                let domain_at = r.pos as u64;
                let domain = match r.u8("bank domain")? {
                    0 => Domain::Source,
                    1 => Domain::Target,
                    other => {
                        return Err(Error::Format {
                            offset: domain_at,
                            msg: format!("unknown bank domain {other}"),
                        })
                    }
                };
                let shots = r.u32("bank shots")? as usize;
                Section::Bank { domain, shots, centroids: r.matrix_body()? }
            }
            SectionTag::Checkpoint => {
                let config_hash = r.u64("config hash")?;
                let step = r.u64("step count")?;
                let epochs_done = r.u32("epochs done")?;
                let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
                let stream = r.u64("rng stream")?;
                let word_pos = r.u128("rng word position")?;
                let n = r.u32("tensor count")? as usize;
                let mut tensors = Vec::with_capacity(n);
                for _ in 0..n {
                    let name_len = r.u16("tensor name length")? as usize;
                    let name_at = r.pos as u64;
                    let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                        .map_err(|_| Error::Format {
                            offset: name_at,
                            msg: "tensor name is not utf-8".into(),
                        })?
                        .to_string();
                    tensors.push((name, r.matrix_body()?));
                }
                Section::Checkpoint(Checkpoint {
                    config_hash,
                    step,
                    epochs_done,
                    rng: RngState { seed, stream, word_pos },
                    tensors,
                })
            }
        };
        out.push(section);
    }
    Ok(out)
}

fn read_file_sections(path: &Path) -> Result<Vec<Section>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    read_sections(&bytes)
}

/// Embedding matrix plus training labels if present. Eval-only label
/// sections are *not* returned through this path.
pub fn read_embeddings(path: &Path) -> Result<(Tensor, Option<Vec<u32>>)> {
    let mut matrix = None;
    let mut labels = None;
    for section in read_file_sections(path)? {
        match section {
            Section::Embeddings(t) if matrix.is_none() => matrix = Some(t),
            Section::Labels(ids) if labels.is_none() => labels = Some(ids),
            Section::EvalLabels(_) => {} // structurally invisible to training
            other => {
                return Err(Error::Data(format!(
                    "unexpected extra section {:?} in {}",
                    section_name(&other),
                    path.display()
                )))
            }
        }
    }
    let matrix = matrix.ok_or_else(|| {
        Error::Data(format!("{} holds no embeddings section", path.display()))
    })?;
    Ok((matrix, labels))
}

/// Ground-truth labels from the evaluation-only section.
pub fn read_eval_labels(path: &Path) -> Result<Vec<u32>> {
    for section in read_file_sections(path)? {
        if let Section::EvalLabels(ids) = section {
            return Ok(ids);
        }
    }
    Err(Error::Data(format!(
        "{} holds no evaluation-labels section",
        path.display()
    )))
}

pub fn read_bank(path: &Path) -> Result<FeatureBank> {
    for section in read_file_sections(path)? {
        if let Section::Bank { domain, shots, centroids } = section {
            let k = centroids.rows();
            return Ok(FeatureBank {
                centroids,
                domain,
                shots,
                support: vec![ClassSupport { sample_ids: vec![], confidences: vec![] }; k],
            });
        }
    }
    Err(Error::Data(format!("{} holds no bank section", path.display())))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    for section in read_file_sections(path)? {
        if let Section::Checkpoint(cp) = section {
            return Ok(cp);
        }
    }
    Err(Error::Data(format!(
        "{} holds no checkpoint section",
        path.display()
    )))
}

fn section_name(s: &Section) -> &'static str {
    match s {
        Section::Embeddings(_) => "embeddings",
        Section::Labels(_) => "labels",
        Section::Weights(_) => "weights",
        Section::Bank { .. } => "bank",
        Section::Checkpoint(_) => "checkpoint",
        Section::EvalLabels(_) => "eval_labels",
    }
}
