//! Bidirectional retrieval metrics.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// `images · textsᵀ` for L2-normalized rows.
pub fn similarity_matrix(images: &Tensor, texts: &Tensor) -> Result<Tensor> {
    let (_, d) = images.dims2("similarity_matrix")?;
    let (_, d2) = texts.dims2("similarity_matrix")?;
    if d != d2 {
        return Err(Error::Input(format!("embedding widths differ: {d} vs {d2}")));
    }
    images.matmul(&texts.transpose()?)
}

/// Position of item `j` when row `scores` is sorted by descending score,
/// ties going to the lower index.
fn rank_of(scores: &[f64], j: usize) -> usize {
    let s = scores[j];
    scores.iter().enumerate().filter(|&(i, &v)| v > s || (v == s && i < j)).count()
}

/// Fraction of queries (rows of `scores`) with a relevant item in the top `k`.
pub fn recall_at_k(scores: &Tensor, relevant: &[Vec<usize>], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::Input("recall@K needs K >= 1".into()));
    }
    let (n, m) = scores.dims2("recall_at_k")?;
    if relevant.len() != n {
        return Err(Error::Input(format!("{} ground-truth entries for {n} queries", relevant.len())));
    }
    if n == 0 {
        return Err(Error::Input("recall@K over zero queries".into()));
    }
    if let Some(q) = relevant.iter().position(|r| r.is_empty() || r.iter().any(|&j| j >= m)) {
        return Err(Error::Input(format!("query {q} has no valid relevant index among {m} items")));
    }
    let hits = (0..n)
        .into_par_iter()
        .filter(|&q| {
            let row = scores.row_slice(q);
            relevant[q].iter().any(|&j| rank_of(row, j) < k)
        })
        .count();
    Ok(hits as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalResult {
    /// Image query, caption results: R@1, R@5, R@10.
    pub text: [f64; 3],
    /// Caption query, image results: R@1, R@5, R@10.
    pub image: [f64; 3],
    pub mr: f64,
}

impl RetrievalResult {
    pub fn from_recalls(text: [f64; 3], image: [f64; 3]) -> Self {
        let mr = text.iter().chain(&image).sum::<f64>() / 6.0;
        Self { text, image, mr }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "direction,k,recall").unwrap();
        for (dir, vals) in [("text", self.text), ("image", self.image)] {
            for (k, v) in RECALL_KS.iter().zip(vals) {
                writeln!(out, "{dir},{k},{v}").unwrap();
            }
        }
        writeln!(out, "mr,,{}", self.mr).unwrap();
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Both retrieval directions from a precomputed `images × captions` score
/// matrix and each image's caption indices.
pub fn evaluate_scores(scores: &Tensor, captions_of: &[Vec<usize>]) -> Result<RetrievalResult> {
    let (n, m) = scores.dims2("evaluate")?;
    if captions_of.len() != n {
        return Err(Error::Input(format!("{} caption lists for {n} images", captions_of.len())));
    }
    if let Some(i) = captions_of.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("image {i} has no captions")));
    }
    let mut image_of = vec![usize::MAX; m];
    for (i, caps) in captions_of.iter().enumerate() {
        for &c in caps {
            image_of[c] = i;
        }
    }
    if image_of.contains(&usize::MAX) {
        return Err(Error::Data("caption not assigned to any image".into()));
    }
    let t2i_truth: Vec<Vec<usize>> = image_of.into_iter().map(|i| vec![i]).collect();
    let transposed = scores.transpose()?;
    let mut text = [0.0; 3];
    let mut image = [0.0; 3];
    for (slot, &k) in RECALL_KS.iter().enumerate() {
        text[slot] = recall_at_k(scores, captions_of, k)?;
        image[slot] = recall_at_k(&transposed, &t2i_truth, k)?;
    }
    Ok(RetrievalResult::from_recalls(text, image))
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<RetrievalResult> {
    if data.num_images() == 0 {
        return Err(Error::Data(format!("split `{}` has no images", data.name)));
    }
    let (img, txt) = model.retrieval_embeddings(data)?;
    let scores = similarity_matrix(&img, &txt)?;
    let captions_of: Vec<Vec<usize>> = data.images.iter().map(|i| i.captions.clone()).collect();
    evaluate_scores(&scores, &captions_of)
}

/// Caption indices ranked for one image, best first.
pub fn rank_captions(scores: &Tensor, image: usize, k: usize) -> Vec<usize> {
    let row = scores.row_slice(image);
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_similarity_is_one() {
        let v = Tensor::row(vec![0.6, 0.8]);
        assert!((similarity_matrix(&v, &v).unwrap().item().unwrap() - 1.0).abs() < 1e-15);
        assert!(similarity_matrix(&v, &Tensor::row(vec![1.0])).is_err());
    }

    #[test]
    fn diagonal_ranking_is_perfect() {
        let s = Tensor::eye(5);
        let gt: Vec<Vec<usize>> = (0..5).map(|i| vec![i]).collect();
        assert_eq!(recall_at_k(&s, &gt, 1).unwrap(), 1.0);
        assert!(recall_at_k(&s, &gt, 0).is_err());
    }

    #[test]
    fn ties_prefer_lower_index() {
        let s = Tensor::ones(&[2, 3]);
        assert_eq!(recall_at_k(&s, &[vec![0], vec![2]], 1).unwrap(), 0.5);
        assert_eq!(recall_at_k(&s, &[vec![0], vec![2]], 3).unwrap(), 1.0);
        assert_eq!(rank_captions(&s, 0, 2), vec![0, 1]);
    }

    #[test]
    fn separable_toy_scores_everything() {
        // two images, each with two captions scoring higher on its own image
        let s = Tensor::from_rows(&[vec![0.9, 0.8, 0.1, 0.2], vec![0.1, 0.0, 0.7, 0.9]]).unwrap();
        let r = evaluate_scores(&s, &[vec![0, 1], vec![2, 3]]).unwrap();
        assert_eq!(r.text, [1.0; 3]);
        assert_eq!(r.image, [1.0; 3]);
        assert_eq!(r.mr, 1.0);
        assert!(matches!(evaluate_scores(&s, &[vec![0, 1, 2, 3], vec![]]), Err(Error::Data(_))));
    }
}
