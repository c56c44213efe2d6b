//! Embedding datasets on disk, prompt banks, and the synthetic fixture generator.
//!
//! A dataset at prefix `p` is two files: `p.cemb` holds the vectors and
//! `p.jsonl` the manifest, one record per row in the same order.
//!
//! `.cemb` layout (all little-endian):
//!
//! | bytes | content                         |
//! |-------|---------------------------------|
//! | 0–3   | ASCII `CEMB`                    |
//! | 4–7   | version, u32 = 1                |
//! | 8–11  | dim, u32                        |
//! | 12–19 | count, u64                      |
//! | 20–   | count·dim f32, row-major        |

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{dot, l2_norm, DenseMatrix};
use crate::taxonomy::{PromptTemplate, Taxonomy};

pub const CEMB_MAGIC: [u8; 4] = *b"CEMB";
pub const CEMB_VERSION: u32 = 1;
pub const CEMB_HEADER_LEN: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingFileHeader {
    pub version: u32,
    pub dim: u32,
    pub count: u64,
}

impl EmbeddingFileHeader {
    pub fn encode(&self) -> [u8; CEMB_HEADER_LEN] {
        let mut out = [0u8; CEMB_HEADER_LEN];
        out[0..4].copy_from_slice(&CEMB_MAGIC);
        out[4..8].copy_from_slice(&self.version.to_le_bytes());
        out[8..12].copy_from_slice(&self.dim.to_le_bytes());
        out[12..20].copy_from_slice(&self.count.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CEMB_HEADER_LEN {
            return Err(Error::TruncatedPayload {
                expected: CEMB_HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        if bytes[0..4] != CEMB_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CEMB_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if dim == 0 {
            return Err(Error::InvalidConfig("embedding file declares dim 0".into()));
        }
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        Ok(Self {
            version,
            dim,
            count,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Captions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sc: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ic: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ssc: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub captions: Option<Captions>,
}

impl ManifestRecord {
    pub fn new(id: impl Into<String>, label: Option<String>) -> Self {
        Self {
            id: id.into(),
            label,
            captions: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    vectors: DenseMatrix,
    manifest: Vec<ManifestRecord>,
}

impl EmbeddingDataset {
    pub fn new(vectors: DenseMatrix, manifest: Vec<ManifestRecord>) -> Result<Self> {
        if vectors.cols() == 0 {
            return Err(Error::InvalidConfig(
                "embedding dim must be positive".into(),
            ));
        }
        if vectors.rows() != manifest.len() {
            return Err(Error::ManifestMismatch {
                vectors: vectors.rows(),
                records: manifest.len(),
            });
        }
        if !vectors.is_finite() {
            return Err(Error::NonFinite);
        }
        for rec in &manifest {
            if rec.captions.as_ref().is_some_and(|c| c.ssc.len() > 5) {
                return Err(Error::InvalidConfig(format!(
                    "record {:?} has more than 5 ssc captions",
                    rec.id
                )));
            }
        }
        Ok(Self { vectors, manifest })
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vectors(&self) -> &DenseMatrix {
        &self.vectors
    }

    pub fn manifest(&self) -> &[ManifestRecord] {
        &self.manifest
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            vectors: self.vectors.select_rows(indices),
            manifest: indices.iter().map(|&i| self.manifest[i].clone()).collect(),
        }
    }

    /// Fine-class index of every row's label under `tax`.
    pub fn label_indices(&self, tax: &Taxonomy) -> Result<Vec<usize>> {
        self.manifest
            .iter()
            .map(|rec| {
                let label = rec
                    .label
                    .as_deref()
                    .ok_or_else(|| Error::UnknownClass(format!("<unlabelled row {}>", rec.id)))?;
                tax.fine_index(label)
                    .ok_or_else(|| Error::UnknownClass(label.to_string()))
            })
            .collect()
    }

    /// Fine-class label of every row, validated against `tax`.
    pub fn labels(&self, tax: &Taxonomy) -> Result<Vec<String>> {
        let idx = self.label_indices(tax)?;
        Ok(idx
            .into_iter()
            .map(|i| tax.fine_classes()[i].clone())
            .collect())
    }

    /// Splits row indices per label into consecutive groups of the given
    /// fractions after a seeded shuffle. The last group takes the remainder.
    pub fn stratified_split(&self, fractions: &[f64], seed: u64) -> Vec<Vec<usize>> {
        let mut by_label: BTreeMap<Option<&str>, Vec<usize>> = BTreeMap::new();
        for (i, rec) in self.manifest.iter().enumerate() {
            by_label.entry(rec.label.as_deref()).or_default().push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut parts = vec![Vec::new(); fractions.len()];
        for (_, mut rows) in by_label {
            rows.shuffle(&mut rng);
            let n = rows.len();
            let mut start = 0;
            for (k, frac) in fractions.iter().enumerate() {
                let end = if k + 1 == fractions.len() {
                    n
                } else {
                    (start + (frac * n as f64).round() as usize).min(n)
                };
                parts[k].extend_from_slice(&rows[start..end]);
                start = end;
            }
        }
        for p in &mut parts {
            p.sort_unstable();
        }
        parts
    }
}

fn strip_known_extension(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("cemb" | "jsonl") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = strip_known_extension(prefix).into_os_string();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn cemb_path(prefix: impl AsRef<Path>) -> PathBuf {
    with_suffix(prefix.as_ref(), "cemb")
}

pub fn manifest_path(prefix: impl AsRef<Path>) -> PathBuf {
    with_suffix(prefix.as_ref(), "jsonl")
}

/// Serializes vectors into `.cemb` bytes.
pub fn encode_cemb(vectors: &DenseMatrix) -> Result<Vec<u8>> {
    if !vectors.is_finite() {
        return Err(Error::NonFinite);
    }
    let header = EmbeddingFileHeader {
        version: CEMB_VERSION,
        dim: u32::try_from(vectors.cols())
            .map_err(|_| Error::InvalidConfig("dim exceeds u32".into()))?,
        count: vectors.rows() as u64,
    };
    let mut out = Vec::with_capacity(CEMB_HEADER_LEN + vectors.as_slice().len() * 4);
    out.extend_from_slice(&header.encode());
    for &v in vectors.as_slice() {
        let narrowed = v as f32;
        if !narrowed.is_finite() {
            return Err(Error::NonFinite);
        }
        out.extend_from_slice(&narrowed.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_cemb(bytes: &[u8]) -> Result<DenseMatrix> {
    let header = EmbeddingFileHeader::decode(bytes)?;
    let payload = &bytes[CEMB_HEADER_LEN..];
    let expected = header
        .count
        .checked_mul(header.dim as u64)
        .and_then(|n| n.checked_mul(4))
        .ok_or(Error::TruncatedPayload {
            expected: u64::MAX,
            actual: payload.len() as u64,
        })?;
    if expected != payload.len() as u64 {
        return Err(Error::TruncatedPayload {
            expected,
            actual: payload.len() as u64,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    DenseMatrix::from_vec(header.count as usize, header.dim as usize, data)
}

pub fn write_cemb(vectors: &DenseMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_cemb(vectors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_cemb(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cemb(&bytes)
}

pub fn write_manifest(records: &[ManifestRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, rec).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
    }
    Ok(out)
}

/// Writes `<path>.cemb` and `<path>.jsonl`.
pub fn write_embeddings(ds: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_cemb(&ds.vectors, cemb_path(path))?;
    write_manifest(&ds.manifest, manifest_path(path))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let vectors = read_cemb(cemb_path(path))?;
    let manifest = read_manifest(manifest_path(path))?;
    EmbeddingDataset::new(vectors, manifest)
}

/// One row of a prompt bank JSON file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub prompt: String,
    /// Fine class or registered synonym.
    pub class: String,
    /// When present, must match the `id` of the aligned embedding manifest row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    entries: Vec<PromptEntry>,
    embeddings: DenseMatrix,
}

impl PromptBank {
    pub fn new(entries: Vec<PromptEntry>, embeddings: DenseMatrix, tax: &Taxonomy) -> Result<Self> {
        if entries.len() != embeddings.rows() {
            return Err(Error::BankMisaligned(format!(
                "{} prompts but {} embedding rows",
                entries.len(),
                embeddings.rows()
            )));
        }
        for e in &entries {
            tax.resolve_prompt_class(&e.class)?;
        }
        Ok(Self {
            entries,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn entries(&self) -> &[PromptEntry] {
        &self.entries
    }

    pub fn embeddings(&self) -> &DenseMatrix {
        &self.embeddings
    }
}

pub fn read_prompt_entries(path: impl AsRef<Path>) -> Result<Vec<PromptEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_prompt_entries(entries: &[PromptEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(entries).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Loads a prompt array and its embeddings; row `i` of the embedding file
/// belongs to prompt `i`. If a manifest sits next to the embeddings, entries
/// that carry an `id` are checked against it.
pub fn load_prompt_bank(
    prompts_path: impl AsRef<Path>,
    embeddings_path: impl AsRef<Path>,
    tax: &Taxonomy,
) -> Result<PromptBank> {
    let entries = read_prompt_entries(prompts_path)?;
    let embeddings_path = embeddings_path.as_ref();
    let embeddings = read_cemb(cemb_path(embeddings_path))?;
    let manifest_file = manifest_path(embeddings_path);
    if manifest_file.exists() {
        let manifest = read_manifest(&manifest_file)?;
        if manifest.len() != embeddings.rows() {
            return Err(Error::ManifestMismatch {
                vectors: embeddings.rows(),
                records: manifest.len(),
            });
        }
        for (i, (entry, rec)) in entries.iter().zip(&manifest).enumerate() {
            if let Some(id) = &entry.id {
                if *id != rec.id {
                    return Err(Error::BankMisaligned(format!(
                        "prompt {i} has id {id:?} but embedding row {i} is {:?}",
                        rec.id
                    )));
                }
            }
        }
    }
    PromptBank::new(entries, embeddings, tax)
}

/// Parameters of the synthetic fixture.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub classes: Vec<String>,
    pub n_per_class: usize,
    pub dim: usize,
    /// 0 makes all prototypes identical; large values make them near-orthogonal.
    pub separation: f64,
    /// Expected L2 norm of the Gaussian perturbation added to each prototype.
    pub noise: f64,
    /// Weight of the class prototype inside each image-caption embedding.
    /// 0 makes image captions independent of the class.
    pub ic_signal: f64,
    /// Synonyms per class; each gets a prompt row near its class prototype.
    pub synonyms: IndexMap<String, Vec<String>>,
    pub template: PromptTemplate,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(classes: Vec<String>, n_per_class: usize, dim: usize, seed: u64) -> Self {
        Self {
            classes,
            n_per_class,
            dim,
            separation: 4.0,
            noise: 1.0,
            ic_signal: 0.0,
            synonyms: IndexMap::new(),
            template: PromptTemplate::default(),
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    /// Labelled image embeddings, class-major order.
    pub images: EmbeddingDataset,
    /// Image-caption embeddings aligned row-for-row with `images`.
    pub image_captions: EmbeddingDataset,
    /// Prompt embeddings; the first row of each class is its prototype.
    pub prompts: EmbeddingDataset,
    pub bank_entries: Vec<PromptEntry>,
}

impl SynthOutput {
    pub fn bank(&self, tax: &Taxonomy) -> Result<PromptBank> {
        PromptBank::new(
            self.bank_entries.clone(),
            self.prompts.vectors().clone(),
            tax,
        )
    }
}

const SYNONYM_JITTER: f64 = 0.3;

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = l2_norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn perturbed(rng: &mut ChaCha8Rng, base: &[f64], scale: f64) -> Vec<f64> {
    let step = scale / (base.len() as f64).sqrt();
    let g = gaussian(rng, base.len());
    normalized(base.iter().zip(&g).map(|(b, z)| b + step * z).collect())
}

/// Generates unit prototypes `normalize(s·q_k + mean(q))` from an orthonormal
/// set `q`, then noisy unit image embeddings around them. Pairwise prototype
/// cosine is `(2s + 1) / (K·s² + 2s + 1)`, which falls to 0 as `s` grows.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthOutput> {
    let k = cfg.classes.len();
    if k == 0 || cfg.n_per_class == 0 {
        return Err(Error::InvalidConfig(
            "need at least one class and one sample per class".into(),
        ));
    }
    if cfg.dim < 2 {
        return Err(Error::InvalidConfig("dim must be at least 2".into()));
    }
    if k > cfg.dim {
        return Err(Error::InvalidConfig(format!(
            "{k} classes cannot get distinct directions in dim {}",
            cfg.dim
        )));
    }
    if !(cfg.separation >= 0.0 && cfg.noise >= 0.0 && cfg.ic_signal >= 0.0) {
        return Err(Error::InvalidConfig(
            "separation, noise and ic_signal must be nonnegative".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = cfg.dim;

    // Gram-Schmidt on Gaussian draws.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = gaussian(&mut rng, dim);
        for q in &basis {
            let p = dot(&v, q);
            v.iter_mut().zip(q).for_each(|(x, qi)| *x -= p * qi);
        }
        if l2_norm(&v) > 1e-6 {
            basis.push(normalized(v));
        }
    }
    let mut mean = vec![0.0; dim];
    for q in &basis {
        mean.iter_mut()
            .zip(q)
            .for_each(|(m, qi)| *m += qi / k as f64);
    }
    let prototypes: Vec<Vec<f64>> = basis
        .iter()
        .map(|q| {
            normalized(
                q.iter()
                    .zip(&mean)
                    .map(|(qi, m)| cfg.separation * qi + m)
                    .collect(),
            )
        })
        .collect();

    let mut prompt_rows = Vec::new();
    let mut prompt_records = Vec::new();
    let mut bank_entries = Vec::new();
    for (class, proto) in cfg.classes.iter().zip(&prototypes) {
        let mut push = |term: &str, row: Vec<f64>| {
            let prompt = cfg.template.render(term);
            prompt_rows.push(row);
            prompt_records.push(ManifestRecord {
                id: term.to_string(),
                label: Some(class.clone()),
                captions: Some(Captions {
                    sc: Some(prompt.clone()),
                    ..Captions::default()
                }),
            });
            bank_entries.push(PromptEntry {
                prompt,
                class: term.to_string(),
                id: Some(term.to_string()),
            });
        };
        push(class, proto.clone());
        for syn in cfg.synonyms.get(class).map(Vec::as_slice).unwrap_or(&[]) {
            let row = perturbed(&mut rng, proto, SYNONYM_JITTER);
            push(syn, row);
        }
    }

    let mut image_rows = Vec::with_capacity(k * cfg.n_per_class);
    let mut image_records = Vec::with_capacity(k * cfg.n_per_class);
    for (ci, (class, proto)) in cfg.classes.iter().zip(&prototypes).enumerate() {
        let ssc: Vec<String> = cfg
            .synonyms
            .get(class)
            .map(|s| s.iter().map(|t| cfg.template.render(t)).collect())
            .unwrap_or_default();
        for j in 0..cfg.n_per_class {
            let id = format!("img-{ci:03}-{j:05}");
            image_rows.push(perturbed(&mut rng, proto, cfg.noise));
            image_records.push(ManifestRecord {
                id: id.clone(),
                label: Some(class.clone()),
                captions: Some(Captions {
                    sc: Some(cfg.template.render(class)),
                    ic: Some(format!("a photo that contains sample {id}")),
                    ssc: ssc.clone(),
                }),
            });
        }
    }

    let mut ic_rows = Vec::with_capacity(image_rows.len());
    for rec in &image_records {
        let ci = cfg
            .classes
            .iter()
            .position(|c| Some(c) == rec.label.as_ref())
            .expect("label from class list");
        let g = gaussian(&mut rng, dim);
        let scale = 1.0 / (dim as f64).sqrt();
        ic_rows.push(normalized(
            prototypes[ci]
                .iter()
                .zip(&g)
                .map(|(p, z)| cfg.ic_signal * p + scale * z)
                .collect(),
        ));
    }
    let ic_records = image_records
        .iter()
        .map(|r| ManifestRecord {
            id: r.id.clone(),
            label: r.label.clone(),
            captions: r.captions.as_ref().map(|c| Captions {
                ic: c.ic.clone(),
                ..Captions::default()
            }),
        })
        .collect();

    Ok(SynthOutput {
        images: EmbeddingDataset::new(DenseMatrix::from_rows(dim, &image_rows)?, image_records)?,
        image_captions: EmbeddingDataset::new(DenseMatrix::from_rows(dim, &ic_rows)?, ic_records)?,
        prompts: EmbeddingDataset::new(DenseMatrix::from_rows(dim, &prompt_rows)?, prompt_records)?,
        bank_entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::cosine_similarity;

    fn names(n: usize) -> Vec<String> {
        Taxonomy::parrott().fine_classes()[..n].to_vec()
    }

    fn tiny_dataset(rows: usize, dim: usize) -> EmbeddingDataset {
        let data = (0..rows * dim).map(|i| i as f64 * 0.25 - 1.0).collect();
        let manifest = (0..rows)
            .map(|i| ManifestRecord::new(format!("r{i}"), Some("optimism".into())))
            .collect();
        EmbeddingDataset::new(DenseMatrix::from_vec(rows, dim, data).unwrap(), manifest).unwrap()
    }

    #[test]
    fn file_size_matches_format() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("x");
        write_embeddings(&tiny_dataset(3, 512), &prefix).unwrap();
        assert_eq!(fs::metadata(cemb_path(&prefix)).unwrap().len(), 6164);
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("empty");
        let ds = EmbeddingDataset::new(DenseMatrix::zeros(0, 16), vec![]).unwrap();
        write_embeddings(&ds, &prefix).unwrap();
        assert_eq!(fs::metadata(cemb_path(&prefix)).unwrap().len(), 20);
        let back = read_embeddings(&prefix).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.dim(), 16);
    }

    #[test]
    fn round_trip_preserves_values_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("rt");
        let ds = tiny_dataset(2, 4);
        write_embeddings(&ds, &prefix).unwrap();
        let back = read_embeddings(prefix.with_extension("cemb")).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let mut bytes = encode_cemb(tiny_dataset(2, 3).vectors()).unwrap();
        let mut bad = bytes.clone();
        bad[0..4].copy_from_slice(b"XEMB");
        assert!(matches!(decode_cemb(&bad), Err(Error::BadMagic)));
        assert_eq!(decode_cemb(&bad).unwrap_err().to_string(), "bad magic");

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            decode_cemb(&bad),
            Err(Error::UnsupportedVersion(2))
        ));

        // header says 5 rows, payload has 2
        bytes[12..20].copy_from_slice(&5u64.to_le_bytes());
        let err = decode_cemb(&bytes).unwrap_err();
        assert!(err.to_string().starts_with("truncated payload"), "{err}");
    }

    #[test]
    fn manifest_length_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("mm");
        let ds = tiny_dataset(2, 3);
        write_embeddings(&ds, &prefix).unwrap();
        write_manifest(&ds.manifest()[..1], manifest_path(&prefix)).unwrap();
        assert!(matches!(
            read_embeddings(&prefix),
            Err(Error::ManifestMismatch {
                vectors: 2,
                records: 1
            })
        ));
    }

    #[test]
    fn manifest_wire_format() {
        let rec = ManifestRecord {
            id: "a".into(),
            label: None,
            captions: None,
        };
        assert_eq!(
            serde_json::to_string(&rec).unwrap(),
            r#"{"id":"a","label":null,"captions":null}"#
        );
        let parsed: ManifestRecord = serde_json::from_str(
            r#"{"id":"b","label":"zest","captions":{"sc":"s","ic":"i","ssc":["x","y"]}}"#,
        )
        .unwrap();
        assert_eq!(parsed.captions.unwrap().ssc, vec!["x", "y"]);
    }

    #[test]
    fn prompt_bank_loading() {
        let tax = Taxonomy::parrott();
        let dir = tempfile::tempdir().unwrap();
        let prompts = dir.path().join("bank.json");
        let emb = dir.path().join("bank");

        write_prompt_entries(
            &[PromptEntry {
                prompt: "a photo that seems to express positivity".into(),
                class: "positivity".into(),
                id: None,
            }],
            &prompts,
        )
        .unwrap();
        write_cemb(
            &DenseMatrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap(),
            cemb_path(&emb),
        )
        .unwrap();
        let bank = load_prompt_bank(&prompts, &emb, &tax).unwrap();
        assert_eq!(bank.len(), 1);
        assert_eq!(
            tax.resolve_prompt_class(&bank.entries()[0].class).unwrap(),
            "optimism"
        );

        write_cemb(&DenseMatrix::zeros(2, 2), cemb_path(&emb)).unwrap();
        assert!(matches!(
            load_prompt_bank(&prompts, &emb, &tax),
            Err(Error::BankMisaligned(_))
        ));

        write_prompt_entries(
            &[PromptEntry {
                prompt: "x".into(),
                class: "notaclass".into(),
                id: None,
            }],
            &prompts,
        )
        .unwrap();
        write_cemb(&DenseMatrix::zeros(1, 2), cemb_path(&emb)).unwrap();
        assert!(matches!(
            load_prompt_bank(&prompts, &emb, &tax),
            Err(Error::UnknownClass(_))
        ));
    }

    #[test]
    fn full_sc_bank_has_one_prompt_per_class() {
        let tax = Taxonomy::parrott();
        let entries: Vec<PromptEntry> = tax
            .expand_prompts(tax.prompt_template(), false)
            .into_iter()
            .map(|p| PromptEntry {
                prompt: p.prompt,
                class: p.term,
                id: None,
            })
            .collect();
        let bank = PromptBank::new(entries, DenseMatrix::zeros(25, 4), &tax).unwrap();
        assert_eq!(bank.len(), 25);
    }

    #[test]
    fn bank_ids_checked_against_manifest() {
        let tax = Taxonomy::parrott();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = SynthConfig::new(names(2), 1, 4, 3);
        cfg.noise = 0.0;
        let out = synth_dataset(&cfg).unwrap();
        let prompts = dir.path().join("bank.json");
        let emb = dir.path().join("bank");
        write_embeddings(&out.prompts, &emb).unwrap();
        let mut entries = out.bank_entries.clone();
        write_prompt_entries(&entries, &prompts).unwrap();
        load_prompt_bank(&prompts, &emb, &tax).unwrap();
        entries.swap(0, 1);
        write_prompt_entries(&entries, &prompts).unwrap();
        assert!(matches!(
            load_prompt_bank(&prompts, &emb, &tax),
            Err(Error::BankMisaligned(_))
        ));
    }

    #[test]
    fn synth_is_deterministic_and_validated() {
        let cfg = SynthConfig::new(names(3), 5, 8, 7);
        let a = synth_dataset(&cfg).unwrap();
        let b = synth_dataset(&cfg).unwrap();
        assert_eq!(
            encode_cemb(a.images.vectors()).unwrap(),
            encode_cemb(b.images.vectors()).unwrap()
        );
        assert_eq!(a.images.manifest(), b.images.manifest());
        assert_eq!(a.images.len(), 15);
        assert_eq!(a.prompts.len(), 3);
        for row in a.images.vectors().iter_rows() {
            assert!((l2_norm(row) - 1.0).abs() < 1e-12);
        }
        assert_eq!(
            a.images.manifest()[0]
                .captions
                .as_ref()
                .unwrap()
                .sc
                .as_deref(),
            Some("a photo that seems to express affection")
        );

        let too_many = SynthConfig::new(names(3), 5, 2, 7);
        assert!(matches!(
            synth_dataset(&too_many),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn synth_prototype_cosine_follows_separation() {
        for &(k, s) in &[(3usize, 0.0f64), (3, 1.0), (5, 4.0)] {
            let mut cfg = SynthConfig::new(names(k), 1, 16, 11);
            cfg.separation = s;
            let out = synth_dataset(&cfg).unwrap();
            let kf = k as f64;
            let expected = (2.0 * s / kf + 1.0 / kf) / (s * s + 2.0 * s / kf + 1.0 / kf);
            let p = out.prompts.vectors();
            let c = cosine_similarity(p.row(0), p.row(1)).unwrap();
            assert!(
                (c - expected).abs() < 1e-12,
                "k={k} s={s}: {c} vs {expected}"
            );
        }
    }

    #[test]
    fn synth_synonyms_become_prompt_rows() {
        let tax = Taxonomy::parrott();
        let mut cfg = SynthConfig::new(names(2), 2, 8, 1);
        for c in &cfg.classes.clone() {
            cfg.synonyms.insert(c.clone(), tax.synonyms_of(c).to_vec());
        }
        let out = synth_dataset(&cfg).unwrap();
        assert_eq!(out.prompts.len(), 12);
        let bank = out.bank(&tax).unwrap();
        assert_eq!(
            tax.resolve_prompt_class(&bank.entries()[1].class).unwrap(),
            names(1)[0]
        );
        assert_eq!(
            out.images.manifest()[0]
                .captions
                .as_ref()
                .unwrap()
                .ssc
                .len(),
            5
        );
    }

    #[test]
    fn stratified_split_partitions_rows() {
        let out = synth_dataset(&SynthConfig::new(names(3), 10, 8, 2)).unwrap();
        let parts = out.images.stratified_split(&[0.6, 0.2, 0.2], 5);
        assert_eq!(
            parts.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![18, 6, 6]
        );
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
        assert_eq!(parts, out.images.stratified_split(&[0.6, 0.2, 0.2], 5));
    }

    proptest::proptest! {
        #[test]
        fn rewrite_is_byte_identical(
            rows in 0usize..6,
            dim in 1usize..9,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = gaussian(&mut rng, rows * dim);
            let m = DenseMatrix::from_vec(rows, dim, data).unwrap();
            let first = encode_cemb(&m).unwrap();
            let second = encode_cemb(&decode_cemb(&first).unwrap()).unwrap();
            proptest::prop_assert_eq!(first.len(), 20 + rows * dim * 4);
            proptest::prop_assert_eq!(first, second);
        }

        #[test]
        fn any_length_disagreement_is_rejected(
            rows in 1usize..5,
            dim in 1usize..5,
            cut in 1usize..4,
        ) {
            let bytes = encode_cemb(&DenseMatrix::zeros(rows, dim)).unwrap();
            proptest::prop_assert!(decode_cemb(&bytes[..bytes.len() - cut]).is_err());
            let mut longer = bytes.clone();
            longer.extend_from_slice(&vec![0u8; cut]);
            proptest::prop_assert!(decode_cemb(&longer).is_err());
        }
    }
}
