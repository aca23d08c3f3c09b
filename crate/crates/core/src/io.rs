//! On-disk formats.
//!
//! * Embedding file: `"GCDE"`, version `u32`, `n` `u64`, `dim` `u64`, then
//!   `n * dim` `f64` values row-major. Everything little-endian.
//! * Checkpoint: `"GCDE-CKPT"`, version `u32`, input dim, hidden dim and block
//!   count as `u64`, then the parameters as `f64` in flat order (per block
//!   `w1`, `b1`, `w2`, `b2`, each row-major).
//! * Metadata: CSV with header `sample_id,source_id,label,split,truth`.
//! * Assignments, training configs and reports: pretty JSON.
//! * Training log: tab-separated, one line per epoch.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::dataset::{Assignment, Dataset, EmbeddingMatrix, SampleMeta, Split};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::trainer::EpochLoss;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"GCDE";
pub const CHECKPOINT_MAGIC: &[u8; 9] = b"GCDE-CKPT";
pub const FORMAT_VERSION: u32 = 1;
pub const METADATA_HEADER: [&str; 5] = ["sample_id", "source_id", "label", "split", "truth"];
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor over a byte buffer with path-tagged errors.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::format(
                self.path,
                format!("truncated while reading {what} at byte {}", self.pos),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::format(self.path, format!("{what} {v} does not fit in memory")))
    }

    fn magic(&mut self, expected: &[u8]) -> Result<()> {
        let got = self.take(expected.len(), "magic")?;
        if got != expected {
            return Err(Error::format(
                self.path,
                format!(
                    "bad magic: expected {:?}, found {:?}",
                    String::from_utf8_lossy(expected),
                    String::from_utf8_lossy(got)
                ),
            ));
        }
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::format(
                self.path,
                format!("unsupported version {version}, expected {FORMAT_VERSION}"),
            ));
        }
        Ok(())
    }

    /// Exactly `count` floats, and nothing after them.
    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let expected = count.checked_mul(8).ok_or_else(|| Error::format(self.path, "payload size overflows"))?;
        let remaining = self.bytes.len() - self.pos;
        if remaining != expected {
            return Err(Error::format(
                self.path,
                format!("payload is {remaining} bytes, header implies {expected}"),
            ));
        }
        Ok(self
            .take(expected, "payload")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn encode_embeddings(e: &EmbeddingMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + e.as_slice().len() * 8);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(e.n_samples() as u64).to_le_bytes());
    out.extend_from_slice(&(e.dim() as u64).to_le_bytes());
    for v in e.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// `path` is only used in diagnostics.
pub fn decode_embeddings(bytes: &[u8], path: &Path) -> Result<EmbeddingMatrix> {
    let mut r = Reader { bytes, pos: 0, path };
    r.magic(EMBEDDING_MAGIC)?;
    let n = r.usize("row count")?;
    let dim = r.usize("dimension")?;
    let count = n
        .checked_mul(dim)
        .ok_or_else(|| Error::format(path, "n * dim overflows"))?;
    let values = r.f64s(count)?;
    EmbeddingMatrix::from_vec(n, dim, values).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_embeddings(path: &Path, e: &EmbeddingMatrix) -> Result<()> {
    write_bytes(path, &encode_embeddings(e))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    decode_embeddings(&read_bytes(path)?, path)
}

pub fn encode_checkpoint(p: &EncoderParams) -> Vec<u8> {
    let flat = p.to_flat();
    let mut out = Vec::with_capacity(37 + flat.len() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for dim in [p.input_dim(), p.hidden_dim(), p.n_blocks()] {
        out.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<EncoderParams> {
    let mut r = Reader { bytes, pos: 0, path };
    r.magic(CHECKPOINT_MAGIC)?;
    let input = r.usize("input dim")?;
    let hidden = r.usize("hidden dim")?;
    let blocks = r.usize("block count")?;
    let mut p = EncoderParams::zeros(input, hidden, blocks).map_err(|e| Error::format(path, e.to_string()))?;
    let flat = r.f64s(p.n_params())?;
    if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(path, format!("parameter {i} is not finite")));
    }
    p.set_flat(&flat)?;
    Ok(p)
}

pub fn write_checkpoint(path: &Path, p: &EncoderParams) -> Result<()> {
    write_bytes(path, &encode_checkpoint(p))
}

pub fn read_checkpoint(path: &Path) -> Result<EncoderParams> {
    decode_checkpoint(&read_bytes(path)?, path)
}

fn opt_usize(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn encode_metadata(meta: &[SampleMeta]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("metadata encoding: {e}"));
    w.write_record(METADATA_HEADER).map_err(csv_err)?;
    for m in meta {
        w.write_record([
            m.sample_id.as_str(),
            m.source_id.as_str(),
            &opt_usize(m.label),
            m.split.as_str(),
            &opt_usize(m.truth),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidArgument(format!("metadata encoding: {e}")))
}

fn parse_opt_usize(field: &str, column: &str, row: usize, path: &Path) -> Result<Option<usize>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| Error::format(path, format!("row {row}: {column} {field:?} is not a non-negative integer")))
}

/// Data rows are numbered from 1; the header is row 0.
pub fn decode_metadata(bytes: &[u8], path: &Path) -> Result<Vec<SampleMeta>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = r
        .headers()
        .map_err(|e| Error::format(path, format!("header: {e}")))?
        .clone();
    if header.iter().ne(METADATA_HEADER) {
        return Err(Error::format(
            path,
            format!("header must be {:?}, found {:?}", METADATA_HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::format(path, format!("row {row}: {e}")))?;
        let split = rec[3]
            .parse::<Split>()
            .map_err(|e| Error::format(path, format!("row {row}: {e}")))?;
        out.push(SampleMeta {
            sample_id: rec[0].to_string(),
            source_id: rec[1].to_string(),
            label: parse_opt_usize(&rec[2], "label", row, path)?,
            split,
            truth: parse_opt_usize(&rec[4], "truth", row, path)?,
        });
    }
    Ok(out)
}

pub fn write_metadata(path: &Path, meta: &[SampleMeta]) -> Result<()> {
    write_bytes(path, &encode_metadata(meta)?)
}

pub fn read_metadata(path: &Path) -> Result<Vec<SampleMeta>> {
    decode_metadata(&read_bytes(path)?, path)
}

/// Which columns of the metadata file the caller may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruthAccess {
    /// Evaluation: keep the `truth` column.
    Evaluation,
    /// Training: drop the `truth` column on load.
    Training,
}

/// Load and validate a dataset. Any validation violation aborts.
pub fn load_dataset(embedding_path: &Path, metadata_path: &Path, access: TruthAccess) -> Result<Dataset> {
    let features = read_embeddings(embedding_path)?;
    let mut meta = read_metadata(metadata_path)?;
    if meta.len() != features.n_samples() {
        return Err(Error::format(
            metadata_path,
            format!(
                "metadata has {} rows but {} holds {} embeddings",
                meta.len(),
                embedding_path.display(),
                features.n_samples()
            ),
        ));
    }
    if access == TruthAccess::Training {
        for m in &mut meta {
            m.truth = None;
        }
    }
    Dataset::new(meta, features)
}

pub fn save_dataset(embedding_path: &Path, metadata_path: &Path, d: &Dataset) -> Result<()> {
    write_embeddings(embedding_path, &d.features)?;
    write_metadata(metadata_path, &d.meta)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

/// How an assignment was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringEcho {
    pub method: String,
    pub k: Option<usize>,
    pub delta: Option<f64>,
    pub seed: Option<u64>,
    pub max_iter: Option<usize>,
    pub n_restarts: Option<usize>,
    pub inertia: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentFile {
    pub clustering: ClusteringEcho,
    #[serde(flatten)]
    pub assignment: Assignment,
}

pub fn read_assignment(path: &Path) -> Result<AssignmentFile> {
    let file: AssignmentFile = read_json(path)?;
    // re-run the range check that deserialization skips
    Assignment::new(file.assignment.cluster_of.clone(), file.assignment.n_clusters)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(file)
}

/// Training settings written next to a trained encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEcho {
    pub config: TrainConfig,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_samples: usize,
    pub n_old: usize,
    pub n_new: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub artifact_version: String,
    pub seed: u64,
    pub dataset: DatasetSummary,
    pub train: Option<TrainEcho>,
    pub clustering: ClusteringEcho,
    pub n_clusters: usize,
    pub nmi_normalization: String,
    pub silhouette_distance: String,
    pub metrics: MetricReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub duration_secs: Option<f64>,
}

impl ReportFile {
    pub fn new(
        seed: u64,
        d: &Dataset,
        train: Option<TrainEcho>,
        clustering: ClusteringEcho,
        n_clusters: usize,
        metrics: MetricReport,
    ) -> Self {
        Self {
            artifact_version: ARTIFACT_VERSION.to_string(),
            seed,
            dataset: DatasetSummary {
                n_samples: d.n_samples(),
                n_old: d.indices_of(Split::Labelled).len(),
                n_new: d.indices_of(Split::Unlabelled).len(),
            },
            train,
            clustering,
            n_clusters,
            nmi_normalization: "arithmetic".into(),
            silhouette_distance: "euclidean".into(),
            metrics,
            duration_secs: None,
        }
    }
}

pub const TRAIN_LOG_HEADER: &str = "epoch\tl_scl\tl_u\tl_cl\tskipped_scl\tskipped_u";

pub fn train_log_line(e: &EpochLoss) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}",
        e.epoch, e.supervised, e.unsupervised, e.total, e.skipped_supervised, e.skipped_unsupervised
    )
}

/// Standard file names inside an output directory.
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn create(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))
    }

    pub fn features(&self) -> PathBuf {
        self.dir.join("features.gcde")
    }
    pub fn metadata(&self) -> PathBuf {
        self.dir.join("metadata.csv")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("encoder.ckpt")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.dir.join("embeddings.gcde")
    }
    pub fn train_log(&self) -> PathBuf {
        self.dir.join("train.log")
    }
    pub fn train_config(&self) -> PathBuf {
        self.dir.join("train_config.json")
    }
    pub fn assignment(&self) -> PathBuf {
        self.dir.join("assignment.json")
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, SynthConfig};
    use crate::encoder::encoder_init;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn embedding_header_layout() {
        let e = EmbeddingMatrix::from_rows(&[vec![1.0, -2.5], vec![0.0, 3.0]]).unwrap();
        let b = encode_embeddings(&e);
        assert_eq!(&b[..4], b"GCDE");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..16], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[16..24], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[24..32], &1.0f64.to_le_bytes());
        assert_eq!(&b[32..40], &(-2.5f64).to_le_bytes());
        assert_eq!(b.len(), 24 + 4 * 8);
        assert_eq!(decode_embeddings(&b, p()).unwrap(), e);
    }

    #[test]
    fn embedding_rejects_corruption() {
        let e = EmbeddingMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = encode_embeddings(&e);
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_embeddings(&bad, p()).unwrap_err().to_string().contains("magic"));
        let mut bad = b.clone();
        bad[4] = 2;
        assert!(decode_embeddings(&bad, p()).unwrap_err().to_string().contains("version"));
        assert!(decode_embeddings(&b[..b.len() - 1], p()).is_err());
        let mut long = b.clone();
        long.push(0);
        assert!(decode_embeddings(&long, p()).is_err());
        let mut nan = b;
        nan[24..32].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(decode_embeddings(&nan, p()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = encoder_init(3, 5, 2, 9).unwrap();
        let b = encode_checkpoint(&params);
        assert_eq!(&b[..9], b"GCDE-CKPT");
        assert_eq!(b.len(), 9 + 4 + 24 + params.n_params() * 8);
        assert_eq!(decode_checkpoint(&b, p()).unwrap(), params);
        assert!(decode_checkpoint(&b[..b.len() - 8], p()).is_err());
        assert!(decode_embeddings(&b, p()).is_err());
    }

    #[test]
    fn metadata_round_trip_and_empty_fields() {
        let d = generate(&SynthConfig {
            n_old_classes: 2,
            n_new_classes: 1,
            sources_per_class: 2,
            clips_per_source: 2,
            dim: 3,
            ..Default::default()
        })
        .unwrap();
        let bytes = encode_metadata(&d.meta).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("sample_id,source_id,label,split,truth"));
        assert_eq!(lines.next(), Some("class00-rec00-clip000,class00-rec00,0,labelled,"));
        assert_eq!(text.lines().last(), Some("class02-rec01-clip001,class02-rec01,,unlabelled,2"));
        assert_eq!(decode_metadata(&bytes, p()).unwrap(), d.meta);
    }

    #[test]
    fn metadata_errors_name_rows() {
        let bad_header = b"id,source_id,label,split,truth\n";
        assert!(decode_metadata(bad_header, p()).unwrap_err().to_string().contains("header"));
        let bad_label = b"sample_id,source_id,label,split,truth\na,s,0,labelled,\nb,s,x,labelled,\n";
        let msg = decode_metadata(bad_label, p()).unwrap_err().to_string();
        assert!(msg.contains("row 2") && msg.contains("label"), "{msg}");
        let bad_split = b"sample_id,source_id,label,split,truth\na,s,0,train,\n";
        assert!(decode_metadata(bad_split, p()).unwrap_err().to_string().contains("row 1"));
        let short = b"sample_id,source_id,label,split,truth\na,s,0\n";
        assert!(decode_metadata(short, p()).is_err());
    }
}
