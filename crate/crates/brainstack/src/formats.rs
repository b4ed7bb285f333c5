//! Binary checkpoint (`BSTK`) and trial (`SSEG`) files. All integers and
//! samples are little-endian; samples and parameter values are `f32`.

use std::fs;
use std::path::Path;

use brainstack_core::data::{DataError, Trial, TrialSet};
use brainstack_core::params::ParamStore;
use brainstack_core::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BSTK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const TRIALS_MAGIC: [u8; 4] = *b"SSEG";
pub const TRIALS_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic {found:?} at byte 0 (expected {expected:?})")]
    Magic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} at byte 4 (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("file truncated at byte {offset}: needed {needed} more bytes for {what}")]
    Truncated { offset: usize, needed: usize, what: &'static str },
    #[error("invalid {what} at byte {offset}: {detail}")]
    Invalid { offset: usize, what: &'static str, detail: String },
    #[error("{} trailing bytes after byte {offset}", .extra)]
    Trailing { offset: usize, extra: usize },
    #[error("value too large for the file format: {0}")]
    TooLarge(&'static str),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let left = self.buf.len() - self.pos;
        if left < n {
            return Err(FormatError::Truncated { offset: self.buf.len(), needed: n - left, what });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], FormatError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn string(&mut self, len: usize, what: &'static str) -> Result<String, FormatError> {
        let at = self.pos;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|e| FormatError::Invalid { offset: at, what, detail: e.to_string() })
    }

    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>, FormatError> {
        let bytes = n.checked_mul(4).ok_or(FormatError::TooLarge(what))?;
        let raw = self.take(bytes, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect())
    }

    fn header(&mut self, magic: [u8; 4], version: u32) -> Result<(), FormatError> {
        let found = self.array::<4>("magic")?;
        if found != magic {
            return Err(FormatError::Magic { expected: magic, found });
        }
        let v = self.u32("version")?;
        if v != version {
            return Err(FormatError::Version { expected: version, found: v });
        }
        Ok(())
    }

    fn finish(self) -> Result<(), FormatError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            extra => Err(FormatError::Trailing { offset: self.pos, extra }),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &'static str) -> Result<(), FormatError> {
    let v = u32::try_from(v).map_err(|_| FormatError::TooLarge(what))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str16(out: &mut Vec<u8>, s: &str, what: &'static str) -> Result<(), FormatError> {
    let n = u16::try_from(s.len()).map_err(|_| FormatError::TooLarge(what))?;
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(|source| FormatError::Io { path: path.display().to_string(), source })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    fs::write(path, bytes).map_err(|source| FormatError::Io { path: path.display().to_string(), source })
}

/// Named tensors in file order.
pub type NamedTensors = Vec<(String, Tensor)>;

pub fn encode_checkpoint<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>, FormatError> {
    let entries: Vec<(&str, &Tensor)> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, entries.len(), "parameter count")?;
    for (name, t) in entries {
        put_str16(&mut out, name, "parameter name")?;
        out.push(u8::try_from(t.rank()).map_err(|_| FormatError::TooLarge("rank"))?);
        for &d in t.shape() {
            put_u32(&mut out, d, "dimension")?;
        }
        put_f32s(&mut out, t.data());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NamedTensors, FormatError> {
    let mut r = Reader::new(bytes);
    r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let count = r.u32("parameter count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = r.string(len, "parameter name")?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let at = r.pos;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(FormatError::TooLarge("shape"))?;
        let values = r.f32s(n, "parameter values")?;
        let t = Tensor::new(shape, values)
            .map_err(|e| FormatError::Invalid { offset: at, what: "tensor", detail: e.to_string() })?;
        out.push((name, t));
    }
    r.finish()?;
    Ok(out)
}

/// Writes every parameter and batch-norm buffer of `store`.
pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<(), FormatError> {
    write_file(path, &encode_checkpoint(store.named_tensors())?)
}

pub fn load_checkpoint(path: &Path) -> Result<NamedTensors, FormatError> {
    decode_checkpoint(&read_file(path)?)
}

pub fn encode_trials(ts: &TrialSet) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(24 + ts.len() * (16 + 4 * ts.channels * ts.time_len));
    out.extend_from_slice(&TRIALS_MAGIC);
    out.extend_from_slice(&TRIALS_VERSION.to_le_bytes());
    put_u32(&mut out, ts.channels, "channel count")?;
    put_u32(&mut out, ts.time_len, "time length")?;
    put_u32(&mut out, ts.num_classes, "class count")?;
    put_u32(&mut out, ts.len(), "trial count")?;
    for t in &ts.trials {
        out.extend_from_slice(&t.trial_id.to_le_bytes());
        put_str16(&mut out, &t.subject, "subject")?;
        out.extend_from_slice(&t.session.to_le_bytes());
        put_u32(&mut out, t.label, "label")?;
        put_f32s(&mut out, t.x.data());
    }
    Ok(out)
}

pub fn decode_trials(bytes: &[u8]) -> Result<TrialSet, FormatError> {
    let mut r = Reader::new(bytes);
    r.header(TRIALS_MAGIC, TRIALS_VERSION)?;
    let c = r.u32("channel count")? as usize;
    let t = r.u32("time length")? as usize;
    let k = r.u32("class count")? as usize;
    let n = r.u32("trial count")? as usize;
    let samples = c.checked_mul(t).ok_or(FormatError::TooLarge("trial shape"))?;
    let mut trials = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let trial_id = r.u32("trial id")?;
        let len = r.u16("subject length")? as usize;
        let subject = r.string(len, "subject")?;
        let session = r.u32("session id")?;
        let at = r.pos;
        let label = r.u32("label")? as usize;
        if label >= k {
            return Err(FormatError::Invalid { offset: at, what: "label", detail: format!("{label} >= {k} classes") });
        }
        let x = Tensor::new(vec![c, t], r.f32s(samples, "trial samples")?).expect("sized");
        trials.push(Trial { x, label, subject, session, trial_id });
    }
    r.finish()?;
    Ok(TrialSet::new(c, t, k, trials)?)
}

pub fn save_trials(path: &Path, ts: &TrialSet) -> Result<(), FormatError> {
    write_file(path, &encode_trials(ts)?)
}

pub fn load_trials(path: &Path) -> Result<TrialSet, FormatError> {
    decode_trials(&read_file(path)?)
}
