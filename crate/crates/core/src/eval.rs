//! Retrieval evaluation: cosine distances, the cross-camera filtering
//! protocol, average precision / mAP and CMC rank-k accuracy.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleMeta {
    pub identity: u32,
    pub camera: u32,
}

/// Gallery filtering rule applied per query before ranking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Exclude gallery samples sharing BOTH identity and camera with the
    /// query (the standard benchmark junk rule). Default.
    SameCamSameId,
    /// Exclude every gallery sample from the query's camera (the literal
    /// cross-camera reading).
    SameCam,
}

impl Protocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::SameCamSameId => "same_cam_same_id",
            Protocol::SameCam => "same_cam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "same_cam_same_id" => Ok(Protocol::SameCamSameId),
            "same_cam" => Ok(Protocol::SameCam),
            other => Err(Error::invalid("protocol", other.to_string())),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Pairwise cosine distances 1 - cos(q_i, g_j) in [0, 2]. Zero-norm rows
/// are rejected with their index.
pub fn cosine_distance_matrix<F: Scalar>(
    queries: &Tensor<F>,
    gallery: &Tensor<F>,
) -> Result<Vec<Vec<F>>> {
    if queries.rank() != 2 || gallery.rank() != 2 || queries.shape()[1] != gallery.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "cosine_distance_matrix",
            lhs: queries.shape().to_vec(),
            rhs: gallery.shape().to_vec(),
        });
    }
    let d = queries.shape()[1];
    let norms = |t: &Tensor<F>, side: &str| -> Result<Vec<F>> {
        (0..t.shape()[0])
            .map(|i| {
                let row = &t.data()[i * d..(i + 1) * d];
                let mut acc = F::zero();
                for &v in row {
                    acc += v * v;
                }
                let n = acc.sqrt();
                if n == F::zero() {
                    Err(Error::Numeric(format!(
                        "zero-norm embedding at {} row {}",
                        side, i
                    )))
                } else {
                    Ok(n)
                }
            })
            .collect()
    };
    let qn = norms(queries, "query")?;
    let gn = norms(gallery, "gallery")?;
    let mut out = Vec::with_capacity(qn.len());
    for i in 0..qn.len() {
        let qrow = &queries.data()[i * d..(i + 1) * d];
        let mut row = Vec::with_capacity(gn.len());
        for j in 0..gn.len() {
            let grow = &gallery.data()[j * d..(j + 1) * d];
            let mut dot = F::zero();
            for k in 0..d {
                dot += qrow[k] * grow[k];
            }
            row.push(F::one() - dot / (qn[i] * gn[j]));
        }
        out.push(row);
    }
    Ok(out)
}

/// Validity mask over the gallery for one query: `true` keeps the sample.
pub fn filter_valid(query: SampleMeta, gallery: &[SampleMeta], protocol: Protocol) -> Vec<bool> {
    gallery
        .iter()
        .map(|g| match protocol {
            Protocol::SameCamSameId => !(g.identity == query.identity && g.camera == query.camera),
            Protocol::SameCam => g.camera != query.camera,
        })
        .collect()
}

/// Average precision of a ranked binary relevance list: mean of
/// precision@k over the relevant positions. `None` when nothing is
/// relevant (the caller drops such queries).
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (k, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            acc += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        None
    } else {
        Some(acc / hits as f64)
    }
}

/// CMC curve from 1-based first-match ranks: entry k-1 is the fraction of
/// queries whose first relevant result appears at rank <= k.
pub fn cmc_from_first_ranks(first_ranks: &[usize], max_rank: usize) -> Vec<f64> {
    let n = first_ranks.len().max(1);
    let mut cmc = vec![0.0; max_rank];
    for &r in first_ranks {
        if r >= 1 && r <= max_rank {
            cmc[r - 1] += 1.0;
        }
    }
    let mut acc = 0.0;
    for v in &mut cmc {
        acc += *v;
        *v = acc / n as f64;
    }
    cmc
}

#[derive(Clone, Debug)]
pub struct QueryResult {
    pub index: usize,
    /// `None` for queries with no valid match (dropped from averages).
    pub ap: Option<f64>,
    /// 1-based rank of the first relevant gallery sample.
    pub first_rank: Option<usize>,
    /// Kept gallery indices in ranked order, truncated to `top_k`.
    pub ranked: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub per_query: Vec<QueryResult>,
    pub map: f64,
    /// CMC over ranks 1..=gallery size.
    pub cmc: Vec<f64>,
    pub valid_queries: usize,
    pub dropped_queries: Vec<usize>,
    pub protocol: Protocol,
}

impl EvalReport {
    pub fn cmc_at(&self, rank: usize) -> f64 {
        if rank == 0 || self.cmc.is_empty() {
            return 0.0;
        }
        self.cmc[rank.min(self.cmc.len()) - 1]
    }
}

/// Full protocol: distance matrix, per-query filtering, ranking with ties
/// broken by ascending gallery index, AP and first-match rank, averaged
/// over queries that retain at least one true match.
pub fn evaluate<F: Scalar>(
    query_emb: &Tensor<F>,
    query_meta: &[SampleMeta],
    gallery_emb: &Tensor<F>,
    gallery_meta: &[SampleMeta],
    protocol: Protocol,
    top_k: usize,
) -> Result<EvalReport> {
    let nq = query_emb.shape()[0];
    let ng = gallery_emb.shape()[0];
    if query_meta.len() != nq || gallery_meta.len() != ng {
        return Err(Error::invalid(
            "evaluate",
            format!(
                "metadata length mismatch: {} queries / {} rows, {} gallery / {} rows",
                query_meta.len(),
                nq,
                gallery_meta.len(),
                ng
            ),
        ));
    }
    let dist = cosine_distance_matrix(query_emb, gallery_emb)?;
    let mut per_query = Vec::with_capacity(nq);
    let mut aps = Vec::new();
    let mut first_ranks = Vec::new();
    let mut dropped = Vec::new();
    for qi in 0..nq {
        let keep = filter_valid(query_meta[qi], gallery_meta, protocol);
        let mut order: Vec<usize> = (0..ng).filter(|&j| keep[j]).collect();
        order.sort_by(|&a, &b| {
            dist[qi][a]
                .partial_cmp(&dist[qi][b])
                .unwrap()
                .then(a.cmp(&b))
        });
        let relevance: Vec<bool> = order
            .iter()
            .map(|&j| gallery_meta[j].identity == query_meta[qi].identity)
            .collect();
        let ap = average_precision(&relevance);
        let first_rank = relevance.iter().position(|&r| r).map(|p| p + 1);
        match ap {
            Some(v) => {
                aps.push(v);
                first_ranks.push(first_rank.unwrap());
            }
            None => dropped.push(qi),
        }
        per_query.push(QueryResult {
            index: qi,
            ap,
            first_rank,
            ranked: order.into_iter().take(top_k).collect(),
        });
    }
    if aps.is_empty() {
        return Err(Error::invalid(
            "evaluate",
            "no query retains a valid match under this protocol",
        ));
    }
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    let cmc = cmc_from_first_ranks(&first_ranks, ng);
    Ok(EvalReport {
        per_query,
        map,
        cmc,
        valid_queries: aps.len(),
        dropped_queries: dropped,
        protocol,
    })
}

// ---------------------------------------------------------------------
// File interfaces
// ---------------------------------------------------------------------

/// Embedding file: u64 count, u64 dim, then count*dim little-endian f64.
pub fn write_embeddings(path: &Path, emb: &Tensor<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + emb.len() * 8);
    buf.extend_from_slice(&(emb.shape()[0] as u64).to_le_bytes());
    buf.extend_from_slice(&(emb.shape()[1] as u64).to_le_bytes());
    for &v in emb.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<Tensor<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::format(path, "truncated header"));
    }
    let count = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let dim = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let expected = 16 + count * dim * 8;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {} bytes for {}x{}, got {}", expected, count, dim, bytes.len()),
        ));
    }
    let data: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(vec![count, dim], data)
}

pub fn write_meta_csv(path: &Path, meta: &[SampleMeta]) -> Result<()> {
    let mut out = String::from("index,identity,camera\n");
    for (i, m) in meta.iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", i, m.identity, m.camera));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `metric,value` summary rows.
pub fn write_report_csv(path: &Path, report: &EvalReport, cmc_ranks: &[usize]) -> Result<()> {
    let mut out = String::from("metric,value\n");
    out.push_str(&format!("protocol,{}\n", report.protocol));
    out.push_str(&format!("mAP,{:.17e}\n", report.map));
    for &r in cmc_ranks {
        out.push_str(&format!("cmc_{},{:.17e}\n", r, report.cmc_at(r)));
    }
    out.push_str(&format!("valid_queries,{}\n", report.valid_queries));
    out.push_str(&format!("dropped_queries,{}\n", report.dropped_queries.len()));
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_per_query_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut out = String::from("query_index,ap,first_match_rank\n");
    for q in &report.per_query {
        match (q.ap, q.first_rank) {
            (Some(ap), Some(r)) => out.push_str(&format!("{},{:.17e},{}\n", q.index, ap, r)),
            _ => out.push_str(&format!("{},,\n", q.index)),
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Ranked-list dump: top-k kept gallery indices per query.
pub fn write_ranked_list_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut out = String::from("query_index,rank,gallery_index\n");
    for q in &report.per_query {
        for (r, &g) in q.ranked.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", q.index, r + 1, g));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
