//! Ranking and mAP / CMC evaluation of query-gallery retrieval.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ranks reported by [`map_cmc`].
pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Debug)]
pub struct RetrievalSet {
    /// `[F, M]`, one embedding per column.
    pub embeddings: Tensor,
    pub ids: Vec<usize>,
    pub cameras: Vec<usize>,
}

impl RetrievalSet {
    pub fn new(embeddings: Tensor, ids: Vec<usize>, cameras: Vec<usize>) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.cols() != ids.len() || ids.len() != cameras.len() || ids.is_empty() {
            return Err(Error::Shape(format!(
                "retrieval set: embeddings {:?}, {} ids, {} cameras",
                embeddings.dims(),
                ids.len(),
                cameras.len()
            )));
        }
        Ok(Self { embeddings, ids, cameras })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Metric {
    Euclidean,
    /// Euclidean distance between L2-normalized embeddings.
    #[default]
    NormalizedEuclidean,
    /// `1 - cos`.
    Cosine,
}

/// Columns scaled to unit length (zero columns are left as they are).
pub fn l2_normalize(x: &Tensor) -> Tensor {
    let (f, m) = (x.rows(), x.cols());
    let norms: Vec<f64> = (0..m).map(|c| (0..f).map(|r| x.at(r, c).powi(2)).sum::<f64>().sqrt()).collect();
    Tensor::from_fn(&[f, m], |i| {
        let n = norms[i % m];
        if n > 0.0 {
            x.data()[i] / n
        } else {
            x.data()[i]
        }
    })
}

/// Distance table `[query][gallery]`.
pub fn distance_matrix(query: &Tensor, gallery: &Tensor, metric: Metric) -> Result<Vec<Vec<f64>>> {
    if query.rows() != gallery.rows() {
        return Err(Error::Shape(format!("feature dims differ: {} vs {}", query.rows(), gallery.rows())));
    }
    let (q, g) = match metric {
        Metric::Euclidean => (query.clone(), gallery.clone()),
        Metric::NormalizedEuclidean | Metric::Cosine => (l2_normalize(query), l2_normalize(gallery)),
    };
    let f = q.rows();
    Ok((0..q.cols())
        .into_par_iter()
        .map(|i| {
            (0..g.cols())
                .map(|j| match metric {
                    Metric::Cosine => 1.0 - (0..f).map(|r| q.at(r, i) * g.at(r, j)).sum::<f64>(),
                    _ => (0..f).map(|r| (q.at(r, i) - g.at(r, j)).powi(2)).sum::<f64>().sqrt(),
                })
                .collect()
        })
        .collect())
}

/// Gallery indices per query, nearest first, with gallery entries sharing
/// both identity and camera with the query removed.
pub fn rank(query: &RetrievalSet, gallery: &RetrievalSet, metric: Metric) -> Result<Vec<Vec<usize>>> {
    let dist = distance_matrix(&query.embeddings, &gallery.embeddings, metric)?;
    dist.into_iter()
        .enumerate()
        .map(|(qi, row)| {
            let mut idx: Vec<usize> = (0..gallery.len())
                .filter(|&j| !(gallery.ids[j] == query.ids[qi] && gallery.cameras[j] == query.cameras[qi]))
                .collect();
            if idx.is_empty() {
                return Err(Error::Invalid(format!("query {qi}: gallery empty after camera exclusion")));
            }
            idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            Ok(idx)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalReport {
    pub map: f64,
    /// At [`CMC_RANKS`].
    pub cmc: [f64; 3],
    pub evaluated: usize,
    /// Queries without any true match in their ranking.
    pub skipped: usize,
}

/// Average precision of one ranking given which entries are matches.
pub fn average_precision(hits: impl IntoIterator<Item = bool>) -> Option<f64> {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (i, hit) in hits.into_iter().enumerate() {
        if hit {
            found += 1;
            sum += found as f64 / (i + 1) as f64;
        }
    }
    (found > 0).then(|| sum / found as f64)
}

pub fn map_cmc(rankings: &[Vec<usize>], query_ids: &[usize], gallery_ids: &[usize]) -> Result<RetrievalReport> {
    if rankings.len() != query_ids.len() {
        return Err(Error::Shape(format!("{} rankings for {} queries", rankings.len(), query_ids.len())));
    }
    let mut ap_sum = 0.0;
    let mut cmc = [0.0; 3];
    let mut evaluated = 0;
    let mut skipped = 0;
    for (ranking, &qid) in rankings.iter().zip(query_ids) {
        let hits: Vec<bool> = ranking.iter().map(|&g| gallery_ids[g] == qid).collect();
        let Some(ap) = average_precision(hits.iter().copied()) else {
            skipped += 1;
            continue;
        };
        evaluated += 1;
        ap_sum += ap;
        let first = hits.iter().position(|&h| h).expect("has a hit");
        for (slot, &k) in cmc.iter_mut().zip(&CMC_RANKS) {
            if first < k {
                *slot += 1.0;
            }
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} queries without a gallery match were skipped");
    }
    if evaluated == 0 {
        return Err(Error::Invalid("no query has a gallery match".into()));
    }
    let n = evaluated as f64;
    Ok(RetrievalReport { map: ap_sum / n, cmc: cmc.map(|c| c / n), evaluated, skipped })
}

/// Ranks and scores in one call.
pub fn evaluate(query: &RetrievalSet, gallery: &RetrievalSet, metric: Metric) -> Result<RetrievalReport> {
    let r = rank(query, gallery, metric)?;
    map_cmc(&r, &query.ids, &gallery.ids)
}
