//! Cosine top-k retrieval, Recall@K and average precision.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rayon::prelude::*;

use crate::data::{DatasetManifest, LoadedLocation, Split};
use crate::error::{BggError, Result};
use crate::fanout;
use crate::model::{Describer, Descriptor};

/// Cut-offs reported by [`evaluate`].
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Immutable gallery of normalized descriptors.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    dim: usize,
    rows: Vec<f64>,
    ids: Vec<u32>,
    labels: Vec<u32>,
}

impl RetrievalIndex {
    /// `ids` must be unique; `labels` carry the location of each row.
    pub fn new(descs: &[Descriptor], ids: Vec<u32>, labels: Vec<u32>) -> Result<Self> {
        if descs.len() != ids.len() || ids.len() != labels.len() {
            return Err(BggError::dim(
                "RetrievalIndex",
                format!("{} rows, {} ids, {} labels", descs.len(), ids.len(), labels.len()),
            ));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(BggError::Usage("index ids must be unique".into()));
        }
        let dim = descs.first().map_or(0, Descriptor::dim);
        let mut rows = Vec::with_capacity(descs.len() * dim);
        for d in descs {
            if d.dim() != dim {
                return Err(BggError::dim(
                    "RetrievalIndex",
                    format!("row width {} vs {dim}", d.dim()),
                ));
            }
            if !d.l2_normalized {
                return Err(BggError::Usage("index rows must be L2-normalized".into()));
            }
            rows.extend_from_slice(d.vec.data());
        }
        Ok(Self { dim, rows, ids, labels })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// All rows ranked against `q`: `(row, similarity)`.
    fn rank_all(&self, q: &Descriptor) -> Result<Vec<(usize, f64)>> {
        if self.is_empty() {
            return Err(BggError::Usage("query against an empty index".into()));
        }
        if q.dim() != self.dim {
            return Err(BggError::dim(
                "query_topk",
                format!("query width {} vs {}", q.dim(), self.dim),
            ));
        }
        let qv = q.vec.data();
        let mut scored: Vec<(usize, f64)> = self
            .rows
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(i, r)| (i, r.iter().zip(qv).map(|(a, b)| a * b).sum()))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then(self.ids[a.0].cmp(&self.ids[b.0]))
        });
        Ok(scored)
    }
}

/// Top `k` `(id, similarity)` pairs: descending similarity, ties by
/// ascending id.
pub fn query_topk(index: &RetrievalIndex, q: &Descriptor, k: usize) -> Result<Vec<(u32, f64)>> {
    if k > index.len() {
        return Err(BggError::Usage(format!("k = {k} exceeds index size {}", index.len())));
    }
    let ranked = index.rank_all(q)?;
    Ok(ranked.into_iter().take(k).map(|(i, s)| (index.ids[i], s)).collect())
}

/// Fraction of queries whose best relevant rank (1-based) is at most `k`.
pub fn recall_at_k(ranks: &[Vec<usize>], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let hits = ranks.iter().filter(|r| r.iter().min().is_some_and(|&m| m <= k)).count();
    hits as f64 / ranks.len() as f64
}

/// Non-interpolated AP: mean over relevant positions `p` of the precision at `p`.
pub fn average_precision(flags: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            hits += 1;
            acc += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(BggError::Usage(
            "average precision needs at least one relevant item".into(),
        ));
    }
    Ok(acc / hits as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Direction {
    /// Query views searched against the reference gallery.
    QueryToReference,
    /// References searched against the query gallery.
    ReferenceToQuery,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::QueryToReference => "query_to_reference",
            Direction::ReferenceToQuery => "reference_to_query",
        }
    }
}

/// Which directions to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DirectionSel {
    QueryToReference,
    ReferenceToQuery,
    Both,
}

impl DirectionSel {
    pub fn directions(self) -> Vec<Direction> {
        match self {
            DirectionSel::QueryToReference => vec![Direction::QueryToReference],
            DirectionSel::ReferenceToQuery => vec![Direction::ReferenceToQuery],
            DirectionSel::Both => vec![Direction::QueryToReference, Direction::ReferenceToQuery],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "q2r" | "query_to_reference" | "drone2sat" => Ok(Self::QueryToReference),
            "r2q" | "reference_to_query" | "sat2drone" => Ok(Self::ReferenceToQuery),
            "both" => Ok(Self::Both),
            _ => Err(BggError::Usage(format!("unknown direction '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub recall_at: BTreeMap<usize, f64>,
    pub mean_ap: f64,
    /// 1-based ranks of the relevant gallery items, per query.
    pub ranks: Vec<Vec<usize>>,
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> f64 {
        self.recall_at
            .get(&k)
            .copied()
            .unwrap_or_else(|| recall_at_k(&self.ranks, k))
    }

    pub fn queries(&self) -> usize {
        self.ranks.len()
    }
}

/// Ranks every query against `index`, where a gallery row is relevant iff
/// its label equals the query label.
pub fn run_queries(
    index: &RetrievalIndex,
    queries: &[Descriptor],
    labels: &[u32],
    direction: Direction,
) -> Result<RetrievalReport> {
    if queries.is_empty() {
        return Err(BggError::Usage("no queries to evaluate".into()));
    }
    let mut ranks = Vec::with_capacity(queries.len());
    let mut ap_sum = 0.0;
    for (q, &label) in queries.iter().zip(labels) {
        let ranked = index.rank_all(q)?;
        let flags: Vec<bool> = ranked.iter().map(|&(i, _)| index.labels[i] == label).collect();
        ap_sum += average_precision(&flags)?;
        ranks.push(
            flags
                .iter()
                .enumerate()
                .filter(|(_, &f)| f)
                .map(|(p, _)| p + 1)
                .collect(),
        );
    }
    let recall_at = RECALL_KS.iter().map(|&k| (k, recall_at_k(&ranks, k))).collect();
    Ok(RetrievalReport {
        direction,
        recall_at,
        mean_ap: ap_sum / queries.len() as f64,
        ranks,
    })
}

/// Describes every reference and query once, then evaluates the selected
/// directions from that single pass.
pub fn evaluate_locations<D: Describer + ?Sized>(
    describer: &D,
    locations: &[LoadedLocation],
    sel: DirectionSel,
) -> Result<Vec<RetrievalReport>> {
    if locations.is_empty() {
        return Err(BggError::Usage("evaluation split is empty".into()));
    }
    let refs: Vec<(u32, &crate::tensor::Tensor)> = locations.iter().map(|l| (l.location_id, &l.reference)).collect();
    let qs: Vec<(u32, &crate::tensor::Tensor)> = locations
        .iter()
        .flat_map(|l| l.queries.iter().map(move |q| (l.location_id, q)))
        .collect();
    let describe = |items: &[(u32, &crate::tensor::Tensor)]| -> Result<Vec<Descriptor>> {
        fanout::pool().install(|| {
            items
                .par_iter()
                .map(|(loc, im)| describer.describe_labeled(im, *loc))
                .collect()
        })
    };
    let ref_desc = describe(&refs)?;
    let q_desc = describe(&qs)?;
    let ref_labels: Vec<u32> = refs.iter().map(|r| r.0).collect();
    let q_labels: Vec<u32> = qs.iter().map(|q| q.0).collect();
    let mut out = Vec::new();
    for dir in sel.directions() {
        let report = match dir {
            Direction::QueryToReference => {
                let index = RetrievalIndex::new(&ref_desc, ref_labels.clone(), ref_labels.clone())?;
                run_queries(&index, &q_desc, &q_labels, dir)?
            }
            Direction::ReferenceToQuery => {
                let ids = (0..q_desc.len() as u32).collect();
                let index = RetrievalIndex::new(&q_desc, ids, q_labels.clone())?;
                run_queries(&index, &ref_desc, &ref_labels, dir)?
            }
        };
        out.push(report);
    }
    Ok(out)
}

/// [`evaluate_locations`] on the test split of a dataset.
pub fn evaluate<D: Describer + ?Sized>(
    describer: &D,
    manifest: &DatasetManifest,
    sel: DirectionSel,
) -> Result<Vec<RetrievalReport>> {
    let test = manifest.load_split(Split::Test)?;
    evaluate_locations(describer, &test, sel)
}

/// `direction,k,value` rows; the AP row uses `k = AP`.
pub fn reports_csv(reports: &[RetrievalReport]) -> String {
    let mut s = String::from("direction,k,value\n");
    for r in reports {
        for (k, v) in &r.recall_at {
            let _ = writeln!(s, "{},{k},{v:.6}", r.direction.as_str());
        }
        let _ = writeln!(s, "{},AP,{:.6}", r.direction.as_str(), r.mean_ap);
    }
    s
}

pub struct Summary<'a>(pub &'a [RetrievalReport]);

impl fmt::Display for Summary<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in self.0 {
            write!(f, "{:<20} queries={:<4}", r.direction.as_str(), r.queries())?;
            for (k, v) in &r.recall_at {
                write!(f, " R@{k}={:.2}%", 100.0 * v)?;
            }
            writeln!(f, " AP={:.2}%", 100.0 * r.mean_ap)?;
        }
        Ok(())
    }
}
