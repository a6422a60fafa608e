//! The ATNM binary format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic "ATNM" | version u32 = 1
//! utterance_id: u32 byte length + UTF-8
//! L u32 | Hh u32 | K u32 | T u32 | frame_duration_ms f32
//! K token records: u32 byte length + UTF-8 text + i32 word_index (-1 = none)
//! L*Hh*K*T f32 weights, index order (layer, head, token, frame)
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::TokenRecord;
use crate::error::{Error, Result};
use crate::head_filter::HeadId;
use crate::map::AttentionMap;

pub const ATNM_MAGIC: &[u8; 4] = b"ATNM";
pub const ATNM_VERSION: u32 = 1;

/// Rows whose sum is off by more than this are renormalized on load.
const RENORMALIZE_TOLERANCE: f64 = 1e-3;

/// All per-head cross-attention maps of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    pub utterance_id: String,
    pub num_layers: usize,
    pub heads_per_layer: usize,
    pub num_tokens: usize,
    pub num_frames: usize,
    /// Stored in milliseconds as in the file so round trips are exact.
    pub frame_duration_ms: f32,
    pub tokens: Vec<TokenRecord>,
    weights: Vec<f32>,
    /// Number of rows renormalized while loading.
    pub renormalized_rows: usize,
}

impl AttentionDump {
    /// Build a dump, validating every invariant. Rows whose sum deviates from 1
    /// by more than 1e-3 are renormalized and counted in `renormalized_rows`.
    pub fn new(
        utterance_id: impl Into<String>,
        num_layers: usize,
        heads_per_layer: usize,
        frame_duration_ms: f32,
        tokens: Vec<TokenRecord>,
        num_frames: usize,
        weights: Vec<f32>,
    ) -> Result<Self> {
        let mut dump = AttentionDump {
            utterance_id: utterance_id.into(),
            num_layers,
            heads_per_layer,
            num_tokens: tokens.len(),
            num_frames,
            frame_duration_ms,
            tokens,
            weights,
            renormalized_rows: 0,
        };
        dump.validate_header()?;
        let expected = dump.payload_len()?;
        if dump.weights.len() != expected {
            return Err(Error::Length(format!(
                "expected {expected} weights for {}x{}x{}x{}, got {}",
                num_layers,
                heads_per_layer,
                dump.num_tokens,
                num_frames,
                dump.weights.len()
            )));
        }
        dump.validate_weights()?;
        Ok(dump)
    }

    pub fn frame_duration(&self) -> f64 {
        f64::from(self.frame_duration_ms) / 1000.0
    }

    pub fn num_heads(&self) -> usize {
        self.num_layers * self.heads_per_layer
    }

    /// Every head in (layer, head) order.
    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        let hh = self.heads_per_layer;
        (0..self.num_layers).flat_map(move |l| (0..hh).map(move |h| HeadId::new(l, h)))
    }

    pub fn contains(&self, head: HeadId) -> bool {
        head.layer < self.num_layers && head.head < self.heads_per_layer
    }

    /// Indices of tokens that carry a word (non-special rows).
    pub fn speech_rows(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| !t.is_special())
            .map(|(i, _)| i)
            .collect()
    }

    /// The raw K×T weights of one head.
    pub fn head_weights(&self, head: HeadId) -> Result<&[f32]> {
        if !self.contains(head) {
            return Err(Error::domain(format!(
                "head {head} out of range for {} layers x {} heads",
                self.num_layers, self.heads_per_layer
            )));
        }
        let size = self.num_tokens * self.num_frames;
        let offset = (head.layer * self.heads_per_layer + head.head) * size;
        Ok(&self.weights[offset..offset + size])
    }

    pub fn head_map(&self, head: HeadId) -> Result<AttentionMap> {
        let w = self.head_weights(head)?;
        AttentionMap::new(
            self.num_tokens,
            self.num_frames,
            w.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    /// One head restricted to the given token rows.
    pub fn head_map_rows(&self, head: HeadId, rows: &[usize]) -> Result<AttentionMap> {
        let w = self.head_weights(head)?;
        let t = self.num_frames;
        let mut data = Vec::with_capacity(rows.len() * t);
        for &r in rows {
            if r >= self.num_tokens {
                return Err(Error::domain(format!("token row {r} out of range")));
            }
            data.extend(w[r * t..(r + 1) * t].iter().map(|&v| f64::from(v)));
        }
        AttentionMap::new(rows.len(), t, data)
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    fn payload_len(&self) -> Result<usize> {
        [self.heads_per_layer, self.num_tokens, self.num_frames]
            .iter()
            .try_fold(self.num_layers, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Length("declared tensor size overflows".into()))
    }

    fn validate_header(&self) -> Result<()> {
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("heads_per_layer", self.heads_per_layer),
            ("num_tokens", self.num_tokens),
            ("num_frames", self.num_frames),
        ] {
            if v == 0 {
                return Err(Error::Format(format!("{name} must be positive")));
            }
        }
        if !(self.frame_duration_ms.is_finite() && self.frame_duration_ms > 0.0) {
            return Err(Error::Format(format!(
                "frame duration must be positive, got {} ms",
                self.frame_duration_ms
            )));
        }
        let mut last = None;
        for (k, tok) in self.tokens.iter().enumerate() {
            if let Some(w) = tok.word_index {
                if last.is_some_and(|prev| w < prev) {
                    return Err(Error::Data(format!(
                        "token {k} has word index {w} after {}",
                        last.unwrap_or_default()
                    )));
                }
                last = Some(w);
            }
        }
        Ok(())
    }

    fn validate_weights(&mut self) -> Result<()> {
        let (k, t) = (self.num_tokens, self.num_frames);
        let mut renormalized = 0;
        for (idx, row) in self.weights.chunks_exact_mut(t).enumerate() {
            let (layer, head, tok) = (
                idx / (k * self.heads_per_layer),
                (idx / k) % self.heads_per_layer,
                idx % k,
            );
            let mut sum = 0.0f64;
            for (frame, &v) in row.iter().enumerate() {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Data(format!(
                        "invalid weight {v} at layer {layer}, head {head}, row {tok}, frame {frame}"
                    )));
                }
                sum += f64::from(v);
            }
            if sum <= 0.0 {
                return Err(Error::Data(format!(
                    "row with zero attention mass at layer {layer}, head {head}, row {tok}"
                )));
            }
            if (sum - 1.0).abs() > RENORMALIZE_TOLERANCE {
                for v in row.iter_mut() {
                    *v = (f64::from(*v) / sum) as f32;
                }
                renormalized += 1;
            }
        }
        if renormalized > 0 {
            log::warn!("{}: renormalized {renormalized} attention rows", self.utterance_id);
        }
        self.renormalized_rows = renormalized;
        Ok(())
    }
}

pub fn write_dump<W: Write>(dump: &AttentionDump, mut sink: W) -> Result<()> {
    let bytes = encode(dump)?;
    sink.write_all(&bytes)
        .and_then(|_| sink.flush())
        .map_err(|e| Error::io(format!("writing dump {}", dump.utterance_id), e))
}

pub fn write_dump_file(dump: &AttentionDump, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write_dump(dump, BufWriter::new(file))
}

fn encode(dump: &AttentionDump) -> Result<Vec<u8>> {
    if dump.tokens.len() != dump.num_tokens || dump.weights.len() != dump.payload_len()? {
        return Err(Error::domain(
            "dump shape is inconsistent with its token table or payload",
        ));
    }
    let mut out = Vec::with_capacity(64 + dump.weights.len() * 4);
    out.extend_from_slice(ATNM_MAGIC);
    out.extend_from_slice(&ATNM_VERSION.to_le_bytes());
    put_str(&mut out, &dump.utterance_id)?;
    for d in [dump.num_layers, dump.heads_per_layer, dump.num_tokens, dump.num_frames] {
        out.extend_from_slice(&to_u32(d)?.to_le_bytes());
    }
    out.extend_from_slice(&dump.frame_duration_ms.to_le_bytes());
    for tok in &dump.tokens {
        put_str(&mut out, &tok.text)?;
        let idx = match tok.word_index {
            None => -1i32,
            Some(w) => i32::try_from(w).map_err(|_| Error::domain(format!("word index {w} exceeds i32")))?,
        };
        out.extend_from_slice(&idx.to_le_bytes());
    }
    for w in &dump.weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    Ok(out)
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::domain(format!("{v} does not fit in u32")))
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    out.extend_from_slice(&to_u32(s.len())?.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn read_dump<R: Read>(mut source: R) -> Result<AttentionDump> {
    let mut bytes = Vec::new();
    source
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("reading dump", e))?;
    decode(&bytes)
}

pub fn read_dump_file(path: impl AsRef<Path>) -> Result<AttentionDump> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_dump(std::io::BufReader::new(file))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(Error::Length(format!(
                "{what}: need {n} bytes at offset {}, only {remaining} left",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        let b = self.take(4, what)?;
        Ok(i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format(format!("{what} is not valid UTF-8")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn decode(bytes: &[u8]) -> Result<AttentionDump> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur
        .take(4, "magic")
        .map_err(|_| Error::Format("file too short for ATNM magic".into()))?;
    if magic != ATNM_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(magic))));
    }
    let version = cur.u32("version")?;
    if version != ATNM_VERSION {
        return Err(Error::Format(format!("unsupported ATNM version {version}")));
    }
    let utterance_id = cur.string("utterance id")?;
    let num_layers = cur.u32("num_layers")? as usize;
    let heads_per_layer = cur.u32("heads_per_layer")? as usize;
    let num_tokens = cur.u32("num_tokens")? as usize;
    let num_frames = cur.u32("num_frames")? as usize;
    let frame_duration_ms = cur.f32("frame duration")?;
    if num_layers == 0 || heads_per_layer == 0 || num_tokens == 0 || num_frames == 0 {
        return Err(Error::Format(format!(
            "dimensions must be positive, got L={num_layers} H={heads_per_layer} K={num_tokens} T={num_frames}"
        )));
    }

    let mut tokens = Vec::with_capacity(num_tokens.min(cur.remaining() / 8));
    for k in 0..num_tokens {
        let text = cur.string(&format!("token {k} text"))?;
        let idx = cur.i32(&format!("token {k} word index"))?;
        let word_index = match idx {
            -1 => None,
            i if i >= 0 => Some(i as u32),
            i => return Err(Error::Format(format!("token {k} has invalid word index {i}"))),
        };
        tokens.push(TokenRecord { text, word_index });
    }

    let count = [heads_per_layer, num_tokens, num_frames]
        .iter()
        .try_fold(num_layers, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4).map(|b| (n, b)));
    let (count, byte_len) = count.ok_or_else(|| Error::Length("declared tensor size overflows".into()))?;
    let payload = cur.take(byte_len, "attention payload")?;
    if cur.remaining() != 0 {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            cur.remaining()
        )));
    }
    let mut weights = Vec::with_capacity(count);
    weights.extend(
        payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
    );

    AttentionDump::new(
        utterance_id,
        num_layers,
        heads_per_layer,
        frame_duration_ms,
        tokens,
        num_frames,
        weights,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn she_dump() -> AttentionDump {
        let tokens = vec![
            TokenRecord::new("S", Some(0)),
            TokenRecord::new("h", Some(0)),
            TokenRecord::new("e", Some(0)),
        ];
        let mut weights = vec![0.0f32; 2 * 3 * 4];
        for head in 0..2 {
            for k in 0..3 {
                weights[head * 12 + k * 4 + k] = 0.75;
                weights[head * 12 + k * 4 + 3] += 0.25;
            }
        }
        AttentionDump::new("utt1", 1, 2, 20.0, tokens, 4, weights).unwrap()
    }

    fn encoded(d: &AttentionDump) -> Vec<u8> {
        let mut buf = Vec::new();
        write_dump(d, &mut buf).unwrap();
        buf
    }

    #[test]
    fn minimal_dump_round_trips() {
        let d = AttentionDump::new("u", 1, 1, 20.0, vec![TokenRecord::new("a", Some(0))], 1, vec![1.0]).unwrap();
        let bytes = encoded(&d);
        // magic, version, id, 4 dims, frame duration, one token, one weight
        assert_eq!(bytes.len(), 4 + 4 + (4 + 1) + 16 + 4 + (4 + 1 + 4) + 4);
        assert_eq!(read_dump(&bytes[..]).unwrap(), d);
    }

    #[test]
    fn character_dump_round_trips_field_for_field() {
        let d = she_dump();
        let back = read_dump(&encoded(&d)[..]).unwrap();
        assert_eq!(back.utterance_id, "utt1");
        assert_eq!(back.tokens, d.tokens);
        assert_eq!(back.weights(), d.weights());
        assert_eq!(back.frame_duration(), 0.02);
        assert_eq!(back, d);
    }

    #[test]
    fn writes_are_byte_identical() {
        let d = she_dump();
        assert_eq!(encoded(&d), encoded(&d));
    }

    #[test]
    fn header_layout_is_little_endian() {
        let bytes = encoded(&she_dump());
        assert_eq!(&bytes[..4], b"ATNM");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[4, 0, 0, 0]);
        assert_eq!(&bytes[12..16], b"utt1");
        assert_eq!(&bytes[32..36], &20.0f32.to_le_bytes());
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = encoded(&she_dump());
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_dump(&bytes[..]), Err(Error::Format(_))));
    }

    #[test]
    fn bad_version_is_a_format_error() {
        let mut bytes = encoded(&she_dump());
        bytes[4] = 2;
        assert!(matches!(read_dump(&bytes[..]), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_a_length_error() {
        let bytes = encoded(&she_dump());
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(read_dump(cut), Err(Error::Length(_))));
    }

    #[test]
    fn oversized_declared_shape_is_a_length_error() {
        let mut bytes = encoded(&she_dump());
        // T lives right before the frame duration
        bytes[28..32].copy_from_slice(&1_000_000u32.to_le_bytes());
        assert!(matches!(read_dump(&bytes[..]), Err(Error::Length(_))));
    }

    #[test]
    fn nan_and_negative_weights_name_their_location() {
        let d = she_dump();
        let mut bytes = encoded(&d);
        let payload_start = bytes.len() - d.weights().len() * 4;
        // layer 0, head 1, row 2, frame 0
        let at = payload_start + (12 + 2 * 4) * 4;
        bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        match read_dump(&bytes[..]) {
            Err(Error::Data(msg)) => assert!(msg.contains("head 1") && msg.contains("row 2"), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
        bytes[at..at + 4].copy_from_slice(&(-0.5f32).to_le_bytes());
        assert!(matches!(read_dump(&bytes[..]), Err(Error::Data(_))));
    }

    #[test]
    fn drifting_rows_are_renormalized_and_counted() {
        let tokens = vec![TokenRecord::new("a", Some(0)), TokenRecord::new("b", Some(0))];
        // first row sums to 1.002, second to 1.00005
        let d = AttentionDump::new("u", 1, 1, 20.0, tokens, 2, vec![0.502, 0.5, 0.5, 0.50005]).unwrap();
        assert_eq!(d.renormalized_rows, 1);
        let s: f32 = d.weights()[..2].iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert_eq!(d.weights()[3], 0.50005);
    }

    #[test]
    fn decreasing_word_index_is_rejected() {
        let tokens = vec![TokenRecord::new("a", Some(1)), TokenRecord::new("b", Some(0))];
        let r = AttentionDump::new("u", 1, 1, 20.0, tokens, 1, vec![1.0, 1.0]);
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = encoded(&she_dump());
        bytes.push(0);
        assert!(read_dump(&bytes[..]).is_err());
    }

    #[test]
    fn special_tokens_round_trip_as_none() {
        let tokens = vec![TokenRecord::special("<|en|>"), TokenRecord::new("a", Some(0))];
        let d = AttentionDump::new("u", 1, 1, 20.0, tokens, 1, vec![1.0, 1.0]).unwrap();
        let back = read_dump(&encoded(&d)[..]).unwrap();
        assert_eq!(back.tokens[0].word_index, None);
        assert_eq!(back.speech_rows(), vec![1]);
    }
}
