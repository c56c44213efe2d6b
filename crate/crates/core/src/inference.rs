//! Cosine-argmax over prompt banks, softmax-argmax for the classifier head,
//! with taxonomy rollup attached to every prediction.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::PromptBank;
use crate::error::{Error, Result};
use crate::heads::{forward_ce, forward_proj, ContrastiveHead, CrossEntropyHead};
use crate::numcore::{argmax, cosine_similarity, softmax, DenseMatrix};
use crate::taxonomy::{Level, Taxonomy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub fine: String,
    pub primary: String,
    pub valence: String,
    /// Winning bank row, or class index for the classifier head.
    pub m_hat: usize,
    /// Cosine per bank row, or softmax probability per class.
    pub scores: Vec<f64>,
}

impl Prediction {
    fn resolve(fine: &str, m_hat: usize, scores: Vec<f64>, tax: &Taxonomy) -> Result<Self> {
        Ok(Self {
            fine: fine.to_string(),
            primary: tax.rollup(fine, Level::Primary)?.to_string(),
            valence: tax.rollup(fine, Level::Valence)?.to_string(),
            m_hat,
            scores,
        })
    }

    pub fn at_level(&self, level: Level) -> &str {
        match level {
            Level::Fine => &self.fine,
            Level::Primary => &self.primary,
            Level::Valence => &self.valence,
        }
    }
}

/// Cosine against every bank row, then argmax. `projection` need not be normalized.
pub fn match_bank(projection: &[f64], bank: &PromptBank, tax: &Taxonomy) -> Result<Prediction> {
    if bank.is_empty() {
        return Err(Error::EmptyInput);
    }
    if projection.len() != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            actual: projection.len(),
        });
    }
    let scores = bank
        .embeddings()
        .iter_rows()
        .map(|row| cosine_similarity(projection, row))
        .collect::<Result<Vec<_>>>()?;
    let m_hat = argmax(&scores).ok_or(Error::NonFinite)?;
    let fine = tax.resolve_prompt_class(&bank.entries()[m_hat].class)?;
    Prediction::resolve(fine, m_hat, scores, tax)
}

fn single_row(image: &[f64]) -> Result<DenseMatrix> {
    DenseMatrix::from_vec(1, image.len(), image.to_vec())
}

pub fn classify_contrastive(
    head: &ContrastiveHead,
    image: &[f64],
    bank: &PromptBank,
    tax: &Taxonomy,
) -> Result<Prediction> {
    let proj = forward_proj(head, &single_row(image)?)?.output;
    match_bank(proj.row(0), bank, tax)
}

pub fn classify_zeroshot(image: &[f64], bank: &PromptBank, tax: &Taxonomy) -> Result<Prediction> {
    let normalized = single_row(image)?.normalize_rows()?;
    match_bank(normalized.row(0), bank, tax)
}

fn check_ce(head: &CrossEntropyHead, tax: &Taxonomy) -> Result<()> {
    let fingerprint = tax.fingerprint();
    if head.meta.fingerprint != fingerprint || head.n_classes() != tax.fine_classes().len() {
        return Err(Error::TaxonomyMismatch {
            model: head.meta.fingerprint.clone(),
            target: fingerprint,
        });
    }
    Ok(())
}

fn ce_prediction(logits: &[f64], tax: &Taxonomy) -> Result<Prediction> {
    let probs = softmax(logits)?;
    let m_hat = argmax(&probs).ok_or(Error::NonFinite)?;
    Prediction::resolve(&tax.fine_classes()[m_hat], m_hat, probs, tax)
}

pub fn classify_ce(head: &CrossEntropyHead, image: &[f64], tax: &Taxonomy) -> Result<Prediction> {
    check_ce(head, tax)?;
    let logits = forward_ce(head, &single_row(image)?)?.output;
    ce_prediction(logits.row(0), tax)
}

pub fn classify_contrastive_batch(
    head: &ContrastiveHead,
    images: &DenseMatrix,
    bank: &PromptBank,
    tax: &Taxonomy,
) -> Result<Vec<Prediction>> {
    let proj = forward_proj(head, images)?.output;
    (0..proj.rows())
        .into_par_iter()
        .map(|i| match_bank(proj.row(i), bank, tax))
        .collect()
}

pub fn classify_zeroshot_batch(
    images: &DenseMatrix,
    bank: &PromptBank,
    tax: &Taxonomy,
) -> Result<Vec<Prediction>> {
    let normalized = images.normalize_rows()?;
    (0..normalized.rows())
        .into_par_iter()
        .map(|i| match_bank(normalized.row(i), bank, tax))
        .collect()
}

pub fn classify_ce_batch(
    head: &CrossEntropyHead,
    images: &DenseMatrix,
    tax: &Taxonomy,
) -> Result<Vec<Prediction>> {
    check_ce(head, tax)?;
    let logits = forward_ce(head, images)?.output;
    (0..logits.rows())
        .into_par_iter()
        .map(|i| ce_prediction(logits.row(i), tax))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub fine: String,
    pub level6: String,
    pub level2: String,
    pub m_hat: usize,
    pub scores: Vec<f64>,
}

impl PredictionRecord {
    pub fn new(id: impl Into<String>, p: &Prediction) -> Self {
        Self {
            id: id.into(),
            fine: p.fine.clone(),
            level6: p.primary.clone(),
            level2: p.valence.clone(),
            m_hat: p.m_hat,
            scores: p.scores.clone(),
        }
    }
}

pub fn write_predictions(records: &[PredictionRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::PromptEntry;
    use crate::heads::{init_head, Head, HeadKind, ModelMeta, TwoLayer};

    fn bank(tax: &Taxonomy, classes: &[&str], rows: Vec<Vec<f64>>) -> PromptBank {
        let entries = classes
            .iter()
            .map(|c| PromptEntry {
                prompt: tax.prompt_template().render(c),
                class: c.to_string(),
                id: None,
            })
            .collect();
        let dim = rows[0].len();
        PromptBank::new(entries, DenseMatrix::from_rows(dim, &rows).unwrap(), tax).unwrap()
    }

    fn axis(dim: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        v
    }

    #[test]
    fn single_prompt_bank_wins() {
        let tax = Taxonomy::parrott();
        let b = bank(&tax, &["relief"], vec![vec![0.3, -1.0, 2.0]]);
        let p = classify_zeroshot(&[1.0, 1.0, 1.0], &b, &tax).unwrap();
        assert_eq!((p.fine.as_str(), p.m_hat), ("relief", 0));
        assert_eq!(p.scores.len(), 1);
    }

    #[test]
    fn aligned_row_wins() {
        let tax = Taxonomy::parrott();
        let b = bank(
            &tax,
            &["rage", "zest", "horror"],
            (0..3).map(|k| axis(4, k)).collect(),
        );
        let p = classify_zeroshot(&axis(4, 2), &b, &tax).unwrap();
        assert_eq!(p.fine, "horror");
        assert_eq!(p.primary, "fear");
        assert_eq!(p.valence, "negative");
        let scaled: Vec<f64> = axis(4, 2).iter().map(|x| x * 3.0).collect();
        assert_eq!(classify_zeroshot(&scaled, &b, &tax).unwrap().m_hat, 2);
    }

    #[test]
    fn synonym_prompt_resolves_to_fine_class() {
        let tax = Taxonomy::parrott();
        let b = bank(&tax, &["rage", "positivity"], vec![axis(3, 0), axis(3, 1)]);
        let p = classify_zeroshot(&[0.1, 0.9, 0.0], &b, &tax).unwrap();
        assert_eq!(p.fine, "optimism");
        assert_eq!(p.valence, "positive");
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let tax = Taxonomy::parrott();
        let b = bank(&tax, &["rage", "zest"], vec![axis(2, 0), axis(2, 0)]);
        assert_eq!(classify_zeroshot(&[1.0, 0.5], &b, &tax).unwrap().m_hat, 0);
    }

    #[test]
    fn zeroshot_matches_identity_head() {
        let tax = Taxonomy::parrott();
        let b = bank(
            &tax,
            &["rage", "zest", "pride"],
            vec![
                vec![0.2, -0.4, 1.0],
                vec![-1.0, 0.3, 0.3],
                vec![0.5, 0.5, -0.1],
            ],
        );
        let id = ContrastiveHead::identity(3);
        for image in [[0.3, -2.0, 0.7], [-1.0, -1.0, 0.2], [4.0, 0.1, 0.1]] {
            let a = classify_zeroshot(&image, &b, &tax).unwrap();
            let c = classify_contrastive(&id, &image, &b, &tax).unwrap();
            assert_eq!(a, c);
        }
    }

    #[test]
    fn errors() {
        let tax = Taxonomy::parrott();
        let b = bank(&tax, &["rage"], vec![axis(3, 0)]);
        assert!(matches!(
            classify_zeroshot(&[0.0; 3], &b, &tax),
            Err(Error::ZeroNorm)
        ));
        assert!(matches!(
            classify_zeroshot(&[1.0; 4], &b, &tax),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_ce_head_is_uniform_and_picks_first() {
        let tax = Taxonomy::parrott();
        let head = CrossEntropyHead {
            net: TwoLayer::zeros(4, 3, 25),
            meta: ModelMeta {
                fingerprint: tax.fingerprint(),
                seed: 0,
            },
        };
        let p = classify_ce(&head, &[1.0, 0.0, 0.0, 0.0], &tax).unwrap();
        assert_eq!(p.m_hat, 0);
        assert_eq!(p.fine, tax.fine_classes()[0]);
        assert!(p.scores.iter().all(|&s| (s - 0.04).abs() < 1e-15));
    }

    #[test]
    fn dominant_logit_wins() {
        let tax = Taxonomy::parrott();
        let mut net = TwoLayer::zeros(2, 2, 25);
        net.output.bias[7] = 50.0;
        let head = CrossEntropyHead {
            net,
            meta: ModelMeta {
                fingerprint: tax.fingerprint(),
                seed: 0,
            },
        };
        let p = classify_ce(&head, &[1.0, 1.0], &tax).unwrap();
        assert_eq!(p.m_hat, 7);
        assert!(p.scores[7] > 1.0 - 1e-15);
    }

    #[test]
    fn ce_rejects_other_taxonomy() {
        let tax = Taxonomy::parrott();
        let head = init_head(HeadKind::CrossEntropy, 4, 25, 1).unwrap();
        let Head::CrossEntropy(mut head) = head else {
            unreachable!()
        };
        head.meta.fingerprint = tax.fingerprint();
        let eight = Taxonomy::flat(&[
            (
                "positive",
                &["amusement", "awe", "contentment", "excitement"],
            ),
            ("negative", &["anger", "disgust", "fear", "sadness"]),
        ])
        .unwrap();
        assert!(matches!(
            classify_ce(&head, &[1.0; 4], &eight),
            Err(Error::TaxonomyMismatch { .. })
        ));
        assert!(classify_ce(&head, &[1.0; 4], &tax).is_ok());
    }

    #[test]
    fn batch_matches_single() {
        let tax = Taxonomy::parrott();
        let Head::Contrastive(head) = init_head(HeadKind::Contrastive, 6, 25, 3).unwrap() else {
            unreachable!()
        };
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|k| {
                (0..512)
                    .map(|j| ((j * 7 + k * 13) % 11) as f64 - 5.0)
                    .collect()
            })
            .collect();
        let b = bank(&tax, &["rage", "zest", "pride", "envy", "relief"], rows);
        let images: Vec<Vec<f64>> = (0..9)
            .map(|i| (0..6).map(|j| ((i * 5 + j * 3) % 7) as f64 - 2.5).collect())
            .collect();
        let m = DenseMatrix::from_rows(6, &images).unwrap();
        let batch = classify_contrastive_batch(&head, &m, &b, &tax).unwrap();
        for (img, p) in images.iter().zip(&batch) {
            assert_eq!(&classify_contrastive(&head, img, &b, &tax).unwrap(), p);
        }
    }

    #[test]
    fn prediction_export_keys() {
        let p = Prediction {
            fine: "zest".into(),
            primary: "joy".into(),
            valence: "positive".into(),
            m_hat: 3,
            scores: vec![0.5],
        };
        let v = serde_json::to_value(PredictionRecord::new("a", &p)).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["fine", "id", "level2", "level6", "m_hat", "scores"]);
    }
}
