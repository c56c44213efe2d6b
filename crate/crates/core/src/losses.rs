//! Cross-entropy and the symmetric image–text contrastive loss, with
//! analytic gradients with respect to the head outputs.

use crate::error::{Error, Result};
use crate::numcore::{dot, l2_norm, log_sum_exp, softmax, DenseMatrix};

/// Paired image projections and caption embeddings; row `i` of each forms a pair.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub image_projections: DenseMatrix,
    pub text_embeddings: DenseMatrix,
    pub labels: Option<Vec<usize>>,
}

/// Mean negative log-likelihood of the labelled class and its gradient
/// `(softmax − one_hot) / N` with respect to the logits.
pub fn cross_entropy_loss(logits: &DenseMatrix, labels: &[usize]) -> Result<(f64, DenseMatrix)> {
    let n = logits.rows();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: labels.len(),
        });
    }
    let k = logits.cols();
    let mut grad = DenseMatrix::zeros(n, k);
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let row = logits.row(i);
        total += log_sum_exp(row)? - row[label];
        let probs = softmax(row)?;
        let g = grad.row_mut(i);
        for (gj, p) in g.iter_mut().zip(&probs) {
            *gj = p / n as f64;
        }
        g[label] -= 1.0 / n as f64;
    }
    Ok((total / n as f64, grad))
}

/// `(L_img + L_text) / 2` over the cosine-similarity matrix
/// `S[i][j] = cos(image_i, text_j) / temperature`, where `L_img` averages the
/// row-softmax NLL of the diagonal and `L_text` the column-softmax NLL.
///
/// The returned gradient is with respect to the image projections only; text
/// embeddings are constants. Both halves contribute, since image projections
/// appear in the column normalizers too.
pub fn contrastive_loss_with_temperature(
    batch: &TrainBatch,
    temperature: f64,
) -> Result<(f64, DenseMatrix)> {
    let images = &batch.image_projections;
    let texts = &batch.text_embeddings;
    let n = images.rows();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if texts.rows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: texts.rows(),
        });
    }
    if texts.cols() != images.cols() {
        return Err(Error::DimensionMismatch {
            expected: images.cols(),
            actual: texts.cols(),
        });
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }

    let image_norms: Vec<f64> = images.iter_rows().map(l2_norm).collect();
    let text_norms: Vec<f64> = texts.iter_rows().map(l2_norm).collect();
    if image_norms
        .iter()
        .chain(&text_norms)
        .any(|&v| v.is_nan() || v <= 0.0)
    {
        return Err(Error::ZeroNorm);
    }
    let unit_images = images.normalize_rows()?;
    let unit_texts = texts.normalize_rows()?;
    let cos = unit_images.matmul_transpose(&unit_texts)?;
    let mut logits = cos.clone();
    logits
        .as_mut_slice()
        .iter_mut()
        .for_each(|v| *v /= temperature);

    // row softmax P (image → texts), column softmax Q (text → images)
    let mut row_probs = DenseMatrix::zeros(n, n);
    let mut loss_img = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        loss_img += log_sum_exp(row)? - row[i];
        row_probs.row_mut(i).copy_from_slice(&softmax(row)?);
    }
    let mut col_probs = DenseMatrix::zeros(n, n);
    let mut loss_text = 0.0;
    let mut column = vec![0.0; n];
    for j in 0..n {
        for (i, c) in column.iter_mut().enumerate() {
            *c = logits.get(i, j);
        }
        loss_text += log_sum_exp(&column)? - column[j];
        for (i, p) in softmax(&column)?.into_iter().enumerate() {
            col_probs.set(i, j, p);
        }
    }
    let loss = 0.5 * (loss_img + loss_text) / n as f64;

    // dL/dS[i][j] = (P[i][j] + Q[i][j] − 2δ_ij) / (2N)
    let mut grad_logits = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 2.0 } else { 0.0 };
            let g = (row_probs.get(i, j) + col_probs.get(i, j) - delta) / (2.0 * n as f64);
            grad_logits.set(i, j, g / temperature);
        }
    }

    // d cos(u, t̂)/du = (t̂ − cos·û) / ‖u‖
    let mut grad = DenseMatrix::zeros(n, images.cols());
    for i in 0..n {
        let g_row = grad_logits.row(i);
        let u_hat = unit_images.row(i);
        let out = grad.row_mut(i);
        let mut along_u = 0.0;
        for j in 0..n {
            let g = g_row[j];
            along_u += g * cos.get(i, j);
            for (o, t) in out.iter_mut().zip(unit_texts.row(j)) {
                *o += g * t;
            }
        }
        for (o, u) in out.iter_mut().zip(u_hat) {
            *o = (*o - along_u * u) / image_norms[i];
        }
    }
    Ok((loss, grad))
}

/// The contrastive loss with no temperature: raw `exp(cosine)` terms.
pub fn contrastive_loss(batch: &TrainBatch) -> Result<(f64, DenseMatrix)> {
    contrastive_loss_with_temperature(batch, 1.0)
}

/// Mean cosine of each image projection with its own caption; handy for logs.
pub fn mean_pair_cosine(batch: &TrainBatch) -> Result<f64> {
    let n = batch.image_projections.rows();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let mut total = 0.0;
    for i in 0..n {
        let (a, b) = (batch.image_projections.row(i), batch.text_embeddings.row(i));
        let denom = l2_norm(a) * l2_norm(b);
        if denom.is_nan() || denom <= 0.0 {
            return Err(Error::ZeroNorm);
        }
        total += dot(a, b) / denom;
    }
    Ok(total / n as f64)
}
