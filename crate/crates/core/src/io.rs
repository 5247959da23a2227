//! File formats: record streams, text-embedding sidecars, cache snapshots,
//! results files and JSON configs.
//!
//! Streams are line-delimited JSON with a header on line 1. Large streams may
//! instead use the binary layout: the magic `TTASTRM1`, a little-endian `u32`
//! header length and the JSON header, then one length-prefixed record per image
//! with 32-bit floats.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::mpsc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::domain::{
    validate_record, AdaptConfig, BoundingBox, CacheState, ClassDist, FeatureVec, ImageRecord,
    ProposalRecord, TaskMode,
};
use crate::error::{Error, Result};
use crate::pipeline::{ImageResult, Readout, RunStats, Session, SessionResult};
use crate::surrogate::PrototypeBank;

pub const STREAM_FORMAT: &str = "tta-stream";
pub const SNAPSHOT_FORMAT: &str = "tta-snapshot";
pub const RESULTS_FORMAT: &str = "tta-results";
pub const SIDECAR_FORMAT: &str = "tta-text-embeddings";
/// Version written and accepted by every reader in this crate.
pub const FORMAT_VERSION: u32 = 1;
pub const BINARY_MAGIC: &[u8; 8] = b"TTASTRM1";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    #[default]
    Jsonl,
    Binary,
}

/// First line of a stream file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub format: String,
    pub version: u32,
    pub task: TaskMode,
    pub k: usize,
    pub d: usize,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub encoding: Encoding,
    /// Path of the text-embedding sidecar, relative to the stream file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_embeddings: Option<String>,
}

impl StreamHeader {
    pub fn new(task: TaskMode, k: usize, d: usize, class_names: Vec<String>) -> Self {
        StreamHeader {
            format: STREAM_FORMAT.into(),
            version: FORMAT_VERSION,
            task,
            k,
            d,
            class_names,
            precision: Precision::F64,
            encoding: Encoding::Jsonl,
            text_embeddings: None,
        }
    }

    /// Engine configuration with defaults for this stream's task, K and d.
    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig::new(self.task, self.k, self.d)
    }

    fn check(&self, line: usize) -> Result<()> {
        if self.format != STREAM_FORMAT {
            return Err(Error::schema(
                line,
                format!("format `{}` is not a stream", self.format),
            ));
        }
        if self.k == 0 || self.d == 0 {
            return Err(Error::schema(line, "k and d must be positive"));
        }
        if self.class_names.len() != self.k {
            return Err(Error::schema(
                line,
                format!("{} class names for k = {}", self.class_names.len(), self.k),
            ));
        }
        Ok(())
    }
}

fn check_version(found: u32) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found,
            supported: FORMAT_VERSION,
        });
    }
    Ok(())
}

/// Parses a header, checking `format` and `version` before the typed fields so
/// that newer files report a version error rather than a field error.
fn parse_header<T: DeserializeOwned>(text: &str, format: &str, line: usize) -> Result<T> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::schema(line, format!("header: {e}")))?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(f) if f == format => {}
        Some(f) => {
            return Err(Error::schema(
                line,
                format!("expected format `{format}`, found `{f}`"),
            ))
        }
        None => return Err(Error::schema(line, "header has no `format` field")),
    }
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::schema(line, "header has no integer `version` field"))?;
    check_version(u32::try_from(version).unwrap_or(u32::MAX))?;
    serde_json::from_value(value).map_err(|e| Error::schema(line, format!("header: {e}")))
}

/// Maps a validation failure on a record to a schema error naming the line.
fn record_error(line: usize, image_id: &str, e: Error) -> Error {
    match e {
        Error::Schema { .. } | Error::Io(_) => e,
        other => Error::schema(line, format!("record `{image_id}`: {other}")),
    }
}

/// Undoes 32-bit rounding: unit-normalizes the feature and rescales the
/// distribution onto the simplex.
fn requantize(p: &mut ProposalRecord) {
    if let Ok(f) = FeatureVec::normalized(p.feature.as_slice().to_vec()) {
        p.feature = f;
    }
    let probs = std::mem::replace(&mut p.init_pred, ClassDist::from_raw(Vec::new())).into_inner();
    let sum: f64 = probs.iter().sum();
    p.init_pred = ClassDist::from_raw(if sum > 0.0 {
        probs.into_iter().map(|v| v / sum).collect()
    } else {
        probs
    });
}

enum Source {
    Jsonl(std::io::Lines<BufReader<File>>),
    Binary(BufReader<File>),
}

/// Lazy reader yielding one validated image at a time.
pub struct StreamReader {
    header: StreamHeader,
    cfg: AdaptConfig,
    source: Source,
    line: usize,
    done: bool,
}

impl StreamReader {
    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    /// Line (or record ordinal for binary files) of the last record read.
    pub fn line(&self) -> usize {
        self.line
    }

    fn next_jsonl(&mut self) -> Option<Result<ImageRecord>> {
        let Source::Jsonl(lines) = &mut self.source else {
            unreachable!()
        };
        loop {
            let text = match lines.next()? {
                Ok(t) => t,
                Err(e) => return Some(Err(e.into())),
            };
            self.line += 1;
            if text.trim().is_empty() {
                continue;
            }
            let line = self.line;
            let rec: ImageRecord = match serde_json::from_str(&text) {
                Ok(r) => r,
                Err(e) => return Some(Err(Error::schema(line, e.to_string()))),
            };
            return Some(self.finish_record(rec));
        }
    }

    fn next_binary(&mut self) -> Option<Result<ImageRecord>> {
        let Source::Binary(r) = &mut self.source else {
            unreachable!()
        };
        let len = match r.read_u32::<LittleEndian>() {
            Ok(n) => n as usize,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return None,
            Err(e) => return Some(Err(e.into())),
        };
        self.line += 1;
        let line = self.line;
        let mut buf = vec![0u8; len];
        if let Err(e) = r.read_exact(&mut buf) {
            return Some(Err(Error::schema(line, format!("truncated record: {e}"))));
        }
        let rec = match decode_binary_record(&buf, self.header.k, self.header.d) {
            Ok(rec) => rec,
            Err(msg) => return Some(Err(Error::schema(line, msg))),
        };
        Some(self.finish_record(rec))
    }

    fn finish_record(&mut self, mut rec: ImageRecord) -> Result<ImageRecord> {
        if self.header.precision == Precision::F32 {
            rec.proposals.iter_mut().for_each(requantize);
        }
        let id = rec.image_id.clone();
        validate_record(rec, &self.cfg).map_err(|e| record_error(self.line, &id, e))
    }
}

impl Iterator for StreamReader {
    type Item = Result<ImageRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let item = match self.source {
            Source::Jsonl(_) => self.next_jsonl(),
            Source::Binary(_) => self.next_binary(),
        };
        if matches!(item, None | Some(Err(_))) {
            self.done = true;
        }
        item
    }
}

/// Opens a stream file of either encoding and reads its header.
pub fn read_stream(path: impl AsRef<Path>) -> Result<StreamReader> {
    let mut reader = BufReader::new(File::open(path)?);
    let is_binary = {
        let head = reader.fill_buf()?;
        head.len() >= BINARY_MAGIC.len() && &head[..BINARY_MAGIC.len()] == BINARY_MAGIC
    };
    if is_binary {
        reader.consume(BINARY_MAGIC.len());
        let len = reader.read_u32::<LittleEndian>()? as usize;
        let mut buf = vec![0u8; len];
        reader
            .read_exact(&mut buf)
            .map_err(|e| Error::schema(1, format!("truncated header: {e}")))?;
        let text = String::from_utf8(buf).map_err(|e| Error::schema(1, e.to_string()))?;
        let header: StreamHeader = parse_header(&text, STREAM_FORMAT, 1)?;
        header.check(1)?;
        return Ok(StreamReader {
            cfg: header.adapt_config(),
            header,
            source: Source::Binary(reader),
            line: 1,
            done: false,
        });
    }
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::schema(1, "empty file, expected a header line"))??;
    let header: StreamHeader = parse_header(&first, STREAM_FORMAT, 1)?;
    header.check(1)?;
    Ok(StreamReader {
        cfg: header.adapt_config(),
        header,
        source: Source::Jsonl(lines),
        line: 1,
        done: false,
    })
}

/// Reads a whole stream into memory.
pub fn read_stream_all(path: impl AsRef<Path>) -> Result<(StreamHeader, Vec<ImageRecord>)> {
    let reader = read_stream(path)?;
    let header = reader.header().clone();
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}

fn to_f32(values: &[f64]) -> Vec<f64> {
    values.iter().map(|&v| f64::from(v as f32)).collect()
}

fn downcast(p: &ProposalRecord) -> ProposalRecord {
    let bx = |b: &BoundingBox| BoundingBox {
        x: f64::from(b.x as f32),
        y: f64::from(b.y as f32),
        w: f64::from(b.w as f32),
        h: f64::from(b.h as f32),
    };
    ProposalRecord {
        feature: FeatureVec::from_raw(to_f32(p.feature.as_slice())),
        bbox: p.bbox.as_ref().map(bx),
        init_pred: ClassDist::from_raw(to_f32(p.init_pred.as_slice())),
        gt_label: p.gt_label,
        gt_box: p.gt_box.as_ref().map(bx),
    }
}

/// Writes a stream in the encoding and precision declared by `header`.
/// Binary streams are always 32-bit.
pub fn write_stream<'a, I>(path: impl AsRef<Path>, header: &StreamHeader, records: I) -> Result<()>
where
    I: IntoIterator<Item = &'a ImageRecord>,
{
    let mut header = header.clone();
    header.format = STREAM_FORMAT.into();
    header.version = FORMAT_VERSION;
    let mut w = BufWriter::new(File::create(path)?);
    match header.encoding {
        Encoding::Jsonl => {
            serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
            for rec in records {
                if header.precision == Precision::F32 {
                    let low = ImageRecord {
                        image_id: rec.image_id.clone(),
                        proposals: rec.proposals.iter().map(downcast).collect(),
                    };
                    serde_json::to_writer(&mut w, &low).map_err(std::io::Error::from)?;
                } else {
                    serde_json::to_writer(&mut w, rec).map_err(std::io::Error::from)?;
                }
                w.write_all(b"\n")?;
            }
        }
        Encoding::Binary => {
            header.precision = Precision::F32;
            let text = serde_json::to_vec(&header).map_err(std::io::Error::from)?;
            w.write_all(BINARY_MAGIC)?;
            w.write_u32::<LittleEndian>(text.len() as u32)?;
            w.write_all(&text)?;
            for rec in records {
                let buf = encode_binary_record(rec)?;
                w.write_u32::<LittleEndian>(buf.len() as u32)?;
                w.write_all(&buf)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

const HAS_BOX: u8 = 1;
const HAS_LABEL: u8 = 2;
const HAS_GT_BOX: u8 = 4;

fn write_box(buf: &mut Vec<u8>, b: &BoundingBox) -> std::io::Result<()> {
    for v in [b.x, b.y, b.w, b.h] {
        buf.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

fn encode_binary_record(rec: &ImageRecord) -> std::io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.write_u32::<LittleEndian>(rec.image_id.len() as u32)?;
    buf.extend_from_slice(rec.image_id.as_bytes());
    buf.write_u32::<LittleEndian>(rec.proposals.len() as u32)?;
    for p in &rec.proposals {
        let flags = (u8::from(p.bbox.is_some()) * HAS_BOX)
            | (u8::from(p.gt_label.is_some()) * HAS_LABEL)
            | (u8::from(p.gt_box.is_some()) * HAS_GT_BOX);
        buf.write_u8(flags)?;
        buf.write_u32::<LittleEndian>(p.feature.dim() as u32)?;
        buf.write_u32::<LittleEndian>(p.init_pred.k() as u32)?;
        for &v in p.feature.as_slice().iter().chain(p.init_pred.as_slice()) {
            buf.write_f32::<LittleEndian>(v as f32)?;
        }
        if let Some(b) = &p.bbox {
            write_box(&mut buf, b)?;
        }
        if let Some(l) = p.gt_label {
            buf.write_u32::<LittleEndian>(l as u32)?;
        }
        if let Some(b) = &p.gt_box {
            write_box(&mut buf, b)?;
        }
    }
    Ok(buf)
}

fn decode_binary_record(
    buf: &[u8],
    k: usize,
    d: usize,
) -> std::result::Result<ImageRecord, String> {
    let mut r = buf;
    let err = |e: std::io::Error| format!("truncated record: {e}");
    let read_box = |r: &mut &[u8]| -> std::result::Result<BoundingBox, String> {
        let mut v = [0.0; 4];
        for x in &mut v {
            *x = f64::from(r.read_f32::<LittleEndian>().map_err(err)?);
        }
        Ok(BoundingBox {
            x: v[0],
            y: v[1],
            w: v[2],
            h: v[3],
        })
    };
    let id_len = r.read_u32::<LittleEndian>().map_err(err)? as usize;
    if id_len > r.len() {
        return Err("image id overruns the record".into());
    }
    let image_id = String::from_utf8(r[..id_len].to_vec()).map_err(|e| e.to_string())?;
    r = &r[id_len..];
    let n = r.read_u32::<LittleEndian>().map_err(err)? as usize;
    let mut proposals = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let flags = r.read_u8().map_err(err)?;
        let pd = r.read_u32::<LittleEndian>().map_err(err)? as usize;
        let pk = r.read_u32::<LittleEndian>().map_err(err)? as usize;
        if pd != d || pk != k {
            return Err(format!(
                "proposal is {pd}×{pk}, header declares d = {d}, k = {k}"
            ));
        }
        let mut read_vec = |len: usize| -> std::result::Result<Vec<f64>, String> {
            (0..len)
                .map(|_| r.read_f32::<LittleEndian>().map(f64::from).map_err(err))
                .collect()
        };
        let feature = read_vec(pd)?;
        let init_pred = read_vec(pk)?;
        let bbox = if flags & HAS_BOX != 0 {
            Some(read_box(&mut r)?)
        } else {
            None
        };
        let gt_label = if flags & HAS_LABEL != 0 {
            Some(r.read_u32::<LittleEndian>().map_err(err)? as usize)
        } else {
            None
        };
        let gt_box = if flags & HAS_GT_BOX != 0 {
            Some(read_box(&mut r)?)
        } else {
            None
        };
        proposals.push(ProposalRecord {
            feature: FeatureVec::from_raw(feature),
            bbox,
            init_pred: ClassDist::from_raw(init_pred),
            gt_label,
            gt_box,
        });
    }
    if !r.is_empty() {
        return Err(format!("{} trailing bytes in record", r.len()));
    }
    Ok(ImageRecord {
        image_id,
        proposals,
    })
}

/// Text embeddings that produced a stream's initial predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbeddings {
    pub format: String,
    pub version: u32,
    pub class_names: Vec<String>,
    /// `clip` or `gdino`: which initial-prediction form was used.
    pub head: String,
    pub logit_scale: f64,
    pub embeddings: Vec<FeatureVec>,
}

impl TextEmbeddings {
    pub fn from_bank(bank: &PrototypeBank, class_names: Vec<String>, task: TaskMode) -> Self {
        TextEmbeddings {
            format: SIDECAR_FORMAT.into(),
            version: FORMAT_VERSION,
            class_names,
            head: match task {
                TaskMode::Recognition => "clip".into(),
                TaskMode::Detection => "gdino".into(),
            },
            logit_scale: bank.logit_scale,
            embeddings: bank.text_embeds.clone(),
        }
    }

    pub fn to_bank(&self) -> Result<PrototypeBank> {
        Ok(PrototypeBank::new(self.embeddings.clone())?.with_logit_scale(self.logit_scale))
    }
}

pub fn write_text_embeddings(path: impl AsRef<Path>, sidecar: &TextEmbeddings) -> Result<()> {
    write_json(path, sidecar)
}

pub fn read_text_embeddings(path: impl AsRef<Path>) -> Result<TextEmbeddings> {
    let text = std::fs::read_to_string(path)?;
    parse_header(&text, SIDECAR_FORMAT, 1)
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    format: String,
    version: u32,
    cache: CacheState,
}

/// Writes a cache snapshot; 64-bit values round-trip bit-exactly.
pub fn write_snapshot(path: impl AsRef<Path>, cache: &CacheState) -> Result<()> {
    write_json(
        path,
        &Snapshot {
            format: SNAPSHOT_FORMAT.into(),
            version: FORMAT_VERSION,
            cache: cache.clone(),
        },
    )
}

pub fn read_snapshot(path: impl AsRef<Path>) -> Result<CacheState> {
    let text = std::fs::read_to_string(path)?;
    let snap: Snapshot = parse_header(&text, SNAPSHOT_FORMAT, 1)?;
    Ok(snap.cache)
}

/// Line 1 of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsHeader {
    pub format: String,
    pub version: u32,
    pub config: AdaptConfig,
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(default)]
    pub variant: Option<String>,
    pub cache_trace: Vec<usize>,
    #[serde(default)]
    pub warmup_images: usize,
    #[serde(default)]
    pub readout: Readout,
    pub stats: RunStats,
    pub cache: CacheState,
}

/// Writes a session as a header line followed by one line per image.
pub fn write_results(
    path: impl AsRef<Path>,
    result: &SessionResult,
    class_names: &[String],
    variant: Option<&str>,
) -> Result<()> {
    let header = ResultsHeader {
        format: RESULTS_FORMAT.into(),
        version: FORMAT_VERSION,
        config: result.config.clone(),
        class_names: class_names.to_vec(),
        variant: variant.map(str::to_owned),
        cache_trace: result.cache_trace.clone(),
        warmup_images: result.warmup_images,
        readout: result.readout,
        stats: result.stats.clone(),
        cache: result.cache.clone(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for img in &result.images {
        serde_json::to_writer(&mut w, img).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: impl AsRef<Path>) -> Result<(ResultsHeader, SessionResult)> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::schema(1, "empty file, expected a header line"))??;
    let header: ResultsHeader = parse_header(&first, RESULTS_FORMAT, 1)?;
    let mut images = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let img: ImageResult =
            serde_json::from_str(&line).map_err(|e| Error::schema(i + 2, e.to_string()))?;
        images.push(img);
    }
    if images.len() != header.cache_trace.len() {
        return Err(Error::schema(
            1,
            format!(
                "{} images but a cache trace of length {}",
                images.len(),
                header.cache_trace.len()
            ),
        ));
    }
    let result = SessionResult {
        config: header.config.clone(),
        images,
        cache: header.cache.clone(),
        cache_trace: header.cache_trace.clone(),
        warmup_images: header.warmup_images,
        readout: header.readout,
        stats: header.stats.clone(),
    };
    Ok((header, result))
}

/// Pretty-printed JSON file.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Reads a JSON config file; parse failures are configuration errors.
pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Runs a session with the reader on its own thread, handing images over a
/// queue of at most `capacity` records.
pub fn run_pipelined<I>(records: I, session: Session, capacity: usize) -> Result<SessionResult>
where
    I: Iterator<Item = Result<ImageRecord>> + Send,
{
    let (tx, rx) = mpsc::sync_channel::<Result<ImageRecord>>(capacity.max(1));
    std::thread::scope(|scope| {
        scope.spawn(move || {
            for rec in records {
                let stop = rec.is_err();
                if tx.send(rec).is_err() || stop {
                    break;
                }
            }
        });
        let mut session = session;
        for rec in rx {
            session.process(rec?)?;
        }
        Ok(session.finish())
    })
}
