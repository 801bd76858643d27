//! Binary file formats and line-oriented text formats.
//!
//! Corpus files (`FAGG`) hold embedding sets as little-endian f32; parameter
//! files (`FAGP`) hold aggregation parameters and the margin head as f64;
//! checkpoint files (`FAGC`) wrap a parameter block with training state.
//! Readers fail closed: malformed input never yields a partial result.

use std::fs;
use std::path::Path;

use crate::attention::{AttentionParams, Mode};
use crate::grad::MarginHead;
use crate::pool::NanParams;
use crate::rng::PRNG_TAG;
use crate::synth::LabeledCorpus;
use crate::trainer::{Checkpoint, LossRecord, Model};
use crate::types::{FeatureSet, FeatureVector};
use crate::{Error, Result};

pub const CORPUS_MAGIC: [u8; 4] = *b"FAGG";
pub const PARAMS_MAGIC: [u8; 4] = *b"FAGP";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FAGC";
pub const FORMAT_VERSION: u16 = 1;

const MODE_LINEAR: u8 = 1;
const MODE_CASCADED: u8 = 2;
const MODE_FRAME_LEVEL: u8 = 3;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                needed: self.pos + n - self.buf.len(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let got: [u8; 4] = self.take(4)?.try_into().unwrap();
        if got != expected {
            return Err(Error::BadMagic { expected, got });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u16()?;
        if v != FORMAT_VERSION {
            return Err(Error::VersionMismatch(v));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::TrailingBytes(self.buf.len() - self.pos));
        }
        Ok(())
    }
}

fn push_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

// ---------------------------------------------------------------------------
// Corpus format
// ---------------------------------------------------------------------------

pub fn encode_corpus(corpus: &LabeledCorpus) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CORPUS_MAGIC);
    push_u16(&mut buf, FORMAT_VERSION);
    push_u32(&mut buf, corpus.dim as u32);
    push_u32(&mut buf, corpus.sets.len() as u32);
    buf.extend_from_slice(&PRNG_TAG);
    for set in &corpus.sets {
        if set.dim() != corpus.dim {
            return Err(Error::DimensionMismatch {
                expected: corpus.dim,
                got: set.dim(),
            });
        }
        let id = set.set_id.as_bytes();
        push_u32(&mut buf, id.len() as u32);
        buf.extend_from_slice(id);
        push_u32(&mut buf, set.label);
        push_u32(&mut buf, set.len() as u32);
        for frame in set.frames() {
            for &v in frame.values() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(buf)
}

pub fn decode_corpus(bytes: &[u8]) -> Result<LabeledCorpus> {
    let mut r = Reader::new(bytes);
    r.magic(CORPUS_MAGIC)?;
    r.version()?;
    let dim = r.u32()? as usize;
    let set_count = r.u32()? as usize;
    r.take(16)?; // prng tag, informational
    if dim == 0 {
        return Err(Error::CountMismatch("dim must be >= 1".into()));
    }
    let mut sets = Vec::with_capacity(set_count);
    for _ in 0..set_count {
        let id_len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| Error::CountMismatch("set id is not valid UTF-8".into()))?
            .to_string();
        let label = r.u32()?;
        let frame_count = r.u32()? as usize;
        if frame_count == 0 {
            return Err(Error::CountMismatch(format!(
                "set `{id}` declares zero frames"
            )));
        }
        let mut frames = Vec::with_capacity(frame_count);
        for _ in 0..frame_count {
            let mut vals = Vec::with_capacity(dim);
            for _ in 0..dim {
                vals.push(r.f32()? as f64);
            }
            frames.push(FeatureVector::new(vals)?);
        }
        sets.push(FeatureSet::new(frames, label, id)?);
    }
    r.finish()?;
    // centroids are generation-time diagnostics and are not persisted
    Ok(LabeledCorpus {
        sets,
        dim,
        identity_centroids: Vec::new(),
    })
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &LabeledCorpus) -> Result<()> {
    fs::write(path, encode_corpus(corpus)?)?;
    Ok(())
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<LabeledCorpus> {
    decode_corpus(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Parameter format
// ---------------------------------------------------------------------------

fn mode_tag(model: &Model) -> u8 {
    match model {
        Model::Attention(p) => match p.mode {
            Mode::LinearSingleBlock => MODE_LINEAR,
            Mode::CascadedTanh => MODE_CASCADED,
        },
        Model::FrameLevel(_) => MODE_FRAME_LEVEL,
    }
}

/// Serialize a trained model plus its head. The frame-level baseline stores
/// its kernel as a rank-one Q1 (every row equal to q), which aggregates
/// identically in linear mode and round-trips exactly.
pub fn encode_params(model: &Model, head: &MarginHead) -> Result<Vec<u8>> {
    let dim = model.dim();
    if head.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: head.dim(),
        });
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(&PARAMS_MAGIC);
    push_u16(&mut buf, FORMAT_VERSION);
    push_u32(&mut buf, dim as u32);
    push_u32(&mut buf, head.num_classes() as u32);
    buf.push(mode_tag(model));
    push_f64s(&mut buf, &[head.margin_m, head.scale_s]);
    let zeros_vec = vec![0.0; dim];
    let zeros_mat = vec![0.0; dim * dim];
    match model {
        Model::Attention(p) => {
            push_f64s(&mut buf, &p.q1);
            push_f64s(&mut buf, &p.b1);
            push_f64s(&mut buf, &p.q2);
            push_f64s(&mut buf, &p.b2);
        }
        Model::FrameLevel(p) => {
            for _ in 0..dim {
                push_f64s(&mut buf, p.q.values());
            }
            push_f64s(&mut buf, &zeros_vec);
            push_f64s(&mut buf, &zeros_mat);
            push_f64s(&mut buf, &zeros_vec);
        }
    }
    push_f64s(&mut buf, &head.class_weights);
    Ok(buf)
}

fn decode_params_body(r: &mut Reader) -> Result<(Model, MarginHead)> {
    r.magic(PARAMS_MAGIC)?;
    r.version()?;
    let dim = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let tag = r.u8()?;
    let margin_m = r.f64()?;
    let scale_s = r.f64()?;
    if dim == 0 || num_classes == 0 {
        return Err(Error::CountMismatch(
            "dim and num_classes must be >= 1".into(),
        ));
    }
    let q1 = r.f64_vec(dim * dim)?;
    let b1 = r.f64_vec(dim)?;
    let q2 = r.f64_vec(dim * dim)?;
    let b2 = r.f64_vec(dim)?;
    let class_weights = r.f64_vec(num_classes * dim)?;

    let model = match tag {
        MODE_LINEAR => Model::Attention(AttentionParams::linear(dim, q1)?),
        MODE_CASCADED => Model::Attention(AttentionParams::cascaded(dim, q1, b1, q2, b2)?),
        MODE_FRAME_LEVEL => {
            // rows must all equal the kernel
            let q = q1[..dim].to_vec();
            for row in q1.chunks(dim) {
                if row != &q[..] {
                    return Err(Error::CountMismatch(
                        "frame-level params with non-rank-one kernel".into(),
                    ));
                }
            }
            Model::FrameLevel(NanParams {
                q: FeatureVector::new(q)?,
            })
        }
        other => return Err(Error::UnknownMode(other)),
    };
    let mut rng = crate::rng::SplitMix64::new(0);
    let mut head = MarginHead::random_unit(dim, num_classes, &mut rng);
    head.class_weights = class_weights;
    head.margin_m = margin_m;
    head.scale_s = scale_s;
    Ok((model, head))
}

pub fn decode_params(bytes: &[u8]) -> Result<(Model, MarginHead)> {
    let mut r = Reader::new(bytes);
    let out = decode_params_body(&mut r)?;
    r.finish()?;
    Ok(out)
}

pub fn write_params(path: impl AsRef<Path>, model: &Model, head: &MarginHead) -> Result<()> {
    fs::write(path, encode_params(model, head)?)?;
    Ok(())
}

pub fn read_params(path: impl AsRef<Path>) -> Result<(Model, MarginHead)> {
    decode_params(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    push_u16(&mut buf, FORMAT_VERSION);
    push_u32(&mut buf, ckpt.epoch as u32);
    buf.extend_from_slice(&ckpt.rng_state.to_le_bytes());
    buf.extend_from_slice(&ckpt.running_loss.to_le_bytes());
    buf.extend_from_slice(&encode_params(&ckpt.model, &ckpt.head)?);
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version()?;
    let epoch = r.u32()? as usize;
    let rng_state = r.u64()?;
    let running_loss = r.f64()?;
    let (model, head) = decode_params_body(&mut r)?;
    r.finish()?;
    Ok(Checkpoint {
        model,
        head,
        epoch,
        running_loss,
        rng_state,
    })
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Text formats
// ---------------------------------------------------------------------------

/// Pairs file: one `set_id_a<TAB>set_id_b<TAB>{0|1}` per line.
pub fn parse_pairs(text: &str) -> Result<crate::eval::PairList> {
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (a, b, flag) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(flag), None) => (a, b, flag),
            _ => {
                return Err(Error::CountMismatch(format!(
                    "pairs line {}: expected 3 tab-separated fields",
                    lineno + 1
                )))
            }
        };
        let same = match flag {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::CountMismatch(format!(
                    "pairs line {}: label must be 0 or 1, got `{other}`",
                    lineno + 1
                )))
            }
        };
        pairs.push((a.to_string(), b.to_string(), same));
    }
    crate::eval::PairList::new(pairs)
}

pub fn format_pairs(pairs: &crate::eval::PairList) -> String {
    let mut out = String::new();
    for (a, b, same) in &pairs.pairs {
        out.push_str(&format!("{a}\t{b}\t{}\n", u8::from(*same)));
    }
    out
}

/// Loss history: one `epoch<TAB>batch<TAB>loss` per line.
pub fn format_loss_history(history: &[LossRecord]) -> String {
    let mut out = String::new();
    for r in history {
        out.push_str(&format!("{}\t{}\t{:.9}\n", r.epoch, r.batch, r.loss));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};
    use crate::trainer::{train, Model, ModelKind, TrainConfig};

    fn corpus() -> LabeledCorpus {
        generate(&SynthConfig {
            dim: 6,
            num_identities: 2,
            sets_per_identity: 1,
            frames_per_set_min: 2,
            frames_per_set_max: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn corpus_roundtrip_within_f32() {
        let c = corpus();
        let bytes = encode_corpus(&c).unwrap();
        let back = decode_corpus(&bytes).unwrap();
        assert_eq!(back.sets.len(), c.sets.len());
        for (a, b) in c.sets.iter().zip(&back.sets) {
            assert_eq!(a.set_id, b.set_id);
            assert_eq!(a.label, b.label);
            assert_eq!(a.len(), b.len());
            for (fa, fb) in a.frames().iter().zip(b.frames()) {
                for (x, y) in fa.values().iter().zip(fb.values()) {
                    assert!((x - y).abs() <= f32::EPSILON as f64 * x.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn corpus_encoding_is_deterministic() {
        let c = corpus();
        assert_eq!(encode_corpus(&c).unwrap(), encode_corpus(&c).unwrap());
    }

    #[test]
    fn corpus_bad_magic() {
        let mut bytes = encode_corpus(&corpus()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            decode_corpus(&bytes),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn corpus_version_mismatch() {
        let mut bytes = encode_corpus(&corpus()).unwrap();
        bytes[4] = 99;
        assert!(matches!(
            decode_corpus(&bytes),
            Err(Error::VersionMismatch(_))
        ));
    }

    #[test]
    fn corpus_truncation_fails_closed() {
        let bytes = encode_corpus(&corpus()).unwrap();
        // cut mid-frame
        let cut = &bytes[..bytes.len() - 7];
        assert!(matches!(
            decode_corpus(cut),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn corpus_trailing_bytes_rejected() {
        let mut bytes = encode_corpus(&corpus()).unwrap();
        bytes.push(0);
        assert!(matches!(
            decode_corpus(&bytes),
            Err(Error::TrailingBytes(1))
        ));
    }

    #[test]
    fn corpus_dim_payload_mismatch() {
        let mut bytes = encode_corpus(&corpus()).unwrap();
        // inflate the declared dim; payload no longer covers it
        bytes[6..10].copy_from_slice(&100u32.to_le_bytes());
        assert!(decode_corpus(&bytes).is_err());
    }

    fn trained(mode: ModelKind) -> Checkpoint {
        let c = generate(&SynthConfig {
            dim: 5,
            num_identities: 2,
            sets_per_identity: 2,
            frames_per_set_min: 2,
            frames_per_set_max: 4,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            frames_per_sampled_set_min: 2,
            frames_per_sampled_set_max: 3,
            mode,
            ..Default::default()
        };
        train(&c, &cfg).unwrap().0
    }

    #[test]
    fn params_roundtrip_lossless_all_modes() {
        for mode in [
            ModelKind::LinearSingleBlock,
            ModelKind::CascadedTanh,
            ModelKind::FrameLevel,
        ] {
            let ckpt = trained(mode);
            let bytes = encode_params(&ckpt.model, &ckpt.head).unwrap();
            let (model, head) = decode_params(&bytes).unwrap();
            assert_eq!(model, ckpt.model, "mode {mode:?}");
            assert_eq!(head, ckpt.head);
        }
    }

    #[test]
    fn params_truncation_and_unknown_mode() {
        let ckpt = trained(ModelKind::CascadedTanh);
        let bytes = encode_params(&ckpt.model, &ckpt.head).unwrap();
        assert!(matches!(
            decode_params(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
        let mut bad = bytes;
        bad[14] = 42; // mode tag
        assert!(matches!(decode_params(&bad), Err(Error::UnknownMode(42))));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let ckpt = trained(ModelKind::FrameLevel);
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert!(matches!(back.model, Model::FrameLevel(_)));
    }

    #[test]
    fn pairs_text_roundtrip_and_errors() {
        let pairs = crate::eval::PairList::new(vec![
            ("a".into(), "b".into(), true),
            ("a".into(), "c".into(), false),
        ])
        .unwrap();
        let text = format_pairs(&pairs);
        assert_eq!(parse_pairs(&text).unwrap(), pairs);

        assert!(parse_pairs("a\tb\n").is_err());
        assert!(parse_pairs("a\tb\t2\n").is_err());
    }

    #[test]
    fn loss_history_format() {
        let h = vec![LossRecord {
            epoch: 0,
            batch: 3,
            loss: 1.5,
        }];
        assert_eq!(format_loss_history(&h), "0\t3\t1.500000000\n");
    }
}
