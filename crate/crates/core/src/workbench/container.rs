//! Binary feature container and plain-text transcripts.
//!
//! Container layout, all integers little-endian `u32`, floats `f32`:
//!
//! ```text
//! magic "RNNTFEAT" | version | D
//! per utterance: id_len id | speaker_len speaker | aux_len aux[aux_len] | T D_u | T*D_u row-major values
//! ```
//!
//! An empty speaker string means "no speaker". Utterances run to end of file.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::{Utterance, Vocabulary};
use crate::error::{Error, Result};
use crate::lattice::LabelSequence;
use crate::numerics::Array2;

pub const FEATURE_MAGIC: &[u8; 8] = b"RNNTFEAT";
pub const FEATURE_VERSION: u32 = 1;

/// One utterance's features as stored in a container.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    pub speaker: Option<String>,
    pub aux: Option<Vec<f64>>,
    pub frames: Array2,
}

impl FeatureSequence {
    pub fn from_utterance(u: &Utterance) -> Self {
        Self {
            id: u.id.clone(),
            speaker: (!u.speaker.is_empty()).then(|| u.speaker.clone()),
            aux: u.aux.clone(),
            frames: u.features.clone(),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Ingest(format!("{what} {v} does not fit the container")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str, what: &str) -> Result<()> {
    put_u32(out, s.len(), what)?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Serializes sequences; values are stored as `f32`.
pub fn encode_features(seqs: &[FeatureSequence]) -> Result<Vec<u8>> {
    let dim = seqs.first().map_or(0, |s| s.frames.cols());
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    put_u32(&mut out, dim, "feature dimension")?;
    for s in seqs {
        put_str(&mut out, &s.id, "id length")?;
        put_str(&mut out, s.speaker.as_deref().unwrap_or(""), "speaker length")?;
        let aux = s.aux.as_deref().unwrap_or(&[]);
        put_u32(&mut out, aux.len(), "aux length")?;
        for &v in aux {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        put_u32(&mut out, s.frames.rows(), "frame count")?;
        put_u32(&mut out, s.frames.cols(), "feature dimension")?;
        for &v in s.frames.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_features(path: &Path, seqs: &[FeatureSequence]) -> Result<()> {
    let bytes = encode_features(seqs)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Ingest(format!(
                "truncated container at byte offset {}: needed {n} bytes for {what}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let at = self.pos;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Ingest(format!("{what} at byte offset {at} is not UTF-8")))
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Ingest(format!("{what} size overflows")))?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect())
    }
}

/// Parses and validates a container: header, constant dimension, finite
/// values and unique ids.
pub fn decode_features(bytes: &[u8]) -> Result<Vec<FeatureSequence>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != FEATURE_MAGIC {
        return Err(Error::Ingest("malformed header: bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != FEATURE_VERSION as usize {
        return Err(Error::Ingest(format!("malformed header: unsupported version {version}")));
    }
    let dim = r.u32("feature dimension")?;
    let mut out: Vec<FeatureSequence> = Vec::new();
    let mut seen = BTreeMap::new();
    while r.pos < bytes.len() {
        let id = r.string("utterance id")?;
        let speaker = r.string("speaker")?;
        let aux_len = r.u32("aux length")?;
        let aux = r.floats(aux_len, "aux vector")?;
        let frames = r.u32("frame count")?;
        let d = r.u32("feature dimension")?;
        if d != dim {
            let reference = out.first().map_or("the container header".to_string(), |f| format!("utterance {}", f.id));
            return Err(Error::Ingest(format!("dimension drift: utterance {id} has D={d} but {reference} has D={dim}")));
        }
        let values = r.floats(frames.saturating_mul(d), "feature values")?;
        if values.iter().chain(&aux).any(|v| !v.is_finite()) {
            return Err(Error::Ingest(format!("utterance {id} contains non-finite values")));
        }
        if seen.insert(id.clone(), ()).is_some() {
            return Err(Error::Ingest(format!("duplicate utterance id {id}")));
        }
        out.push(FeatureSequence {
            id,
            speaker: (!speaker.is_empty()).then_some(speaker),
            aux: (aux_len > 0).then_some(aux),
            frames: Array2::from_vec(frames, d, values)?,
        });
    }
    Ok(out)
}

pub fn ingest_features(path: &Path) -> Result<Vec<FeatureSequence>> {
    let bytes = fs::read(path)?;
    decode_features(&bytes).map_err(|e| match e {
        Error::Ingest(m) => Error::Ingest(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// `id<TAB>text` lines.
pub fn write_transcripts<'a>(path: &Path, rows: impl IntoIterator<Item = (&'a str, String)>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (id, text) in rows {
        if id.contains(['\t', '\n']) || text.contains(['\t', '\n']) {
            return Err(Error::Ingest(format!("transcript for {id:?} contains a tab or newline")));
        }
        writeln!(w, "{id}\t{text}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_transcripts(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            l.split_once('\t')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| Error::Ingest(format!("{}:{}: expected `id<TAB>text`", path.display(), i + 1)))
        })
        .collect()
}

/// Joins features with transcripts by id, keeping the container's order.
pub fn assemble(features: Vec<FeatureSequence>, transcripts: &[(String, String)], vocab: &Vocabulary) -> Result<Vec<Utterance>> {
    let by_id: BTreeMap<&str, &str> = transcripts.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    features
        .into_iter()
        .map(|f| {
            let text = by_id.get(f.id.as_str()).ok_or_else(|| Error::Ingest(format!("no transcript for utterance {}", f.id)))?;
            let labels = vocab.encode(text).map_err(|e| Error::Ingest(format!("utterance {}: {e}", f.id)))?;
            Ok(Utterance {
                speaker: f.speaker.unwrap_or_default(),
                id: f.id,
                features: f.frames,
                aux: f.aux,
                labels,
            })
        })
        .collect()
}

pub fn write_split(dir: &Path, name: &str, utts: &[Utterance], vocab: &Vocabulary) -> Result<()> {
    let seqs: Vec<FeatureSequence> = utts.iter().map(FeatureSequence::from_utterance).collect();
    write_features(&dir.join(format!("{name}.feats")), &seqs)?;
    write_transcripts(&dir.join(format!("{name}.txt")), utts.iter().map(|u| (u.id.as_str(), vocab.decode(u.labels.labels()))))
}

pub fn read_split(dir: &Path, name: &str, vocab: &Vocabulary) -> Result<Vec<Utterance>> {
    let feats = ingest_features(&dir.join(format!("{name}.feats")))?;
    let txt = read_transcripts(&dir.join(format!("{name}.txt")))?;
    assemble(feats, &txt, vocab)
}

/// Text-only corpus, one transcript per line.
pub fn write_text(path: &Path, texts: &[LabelSequence], vocab: &Vocabulary) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for t in texts {
        writeln!(w, "{}", vocab.decode(t.labels()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_text(path: &Path, vocab: &Vocabulary) -> Result<Vec<LabelSequence>> {
    fs::read_to_string(path)?.lines().map(|l| vocab.encode(l)).collect()
}

/// Appends first and second time differences to every frame, turning `D`
/// into `3D`. Differences use the regression window `±window`, with edge
/// frames repeated.
pub fn append_deltas(features: &Array2, window: usize) -> Result<Array2> {
    if window == 0 {
        return Err(Error::Config("delta window must be >= 1".into()));
    }
    let delta = |x: &Array2| -> Array2 {
        let (t, d) = x.shape();
        let norm: f64 = 2.0 * (1..=window).map(|k| (k * k) as f64).sum::<f64>();
        let mut out = Array2::zeros(t, d);
        if t == 0 {
            return out;
        }
        for i in 0..t {
            for k in 1..=window {
                let next = x.row((i + k).min(t - 1));
                let prev = x.row(i.saturating_sub(k));
                for (o, (a, b)) in out.row_mut(i).iter_mut().zip(next.iter().zip(prev)) {
                    *o += k as f64 * (a - b) / norm;
                }
            }
        }
        out
    };
    let d1 = delta(features);
    let d2 = delta(&d1);
    features.hconcat(&d1)?.hconcat(&d2)
}
