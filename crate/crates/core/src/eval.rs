//! Re-identification retrieval evaluation: cosine-distance ranking with
//! deterministic tie-breaks, CMC and mAP, the cross-camera exclusion rule,
//! and the repeated probe/gallery draw protocol.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// CMC ranks reported everywhere.
pub const CMC_RANKS: [usize; 5] = [1, 5, 10, 20, 25];

/// L2-normalized feature rows with identity and camera labels.
#[derive(Debug, Clone)]
pub struct GalleryIndex {
    features: Vec<f64>,
    dim: usize,
    pub ids: Vec<u32>,
    pub cams: Vec<u32>,
}

impl GalleryIndex {
    /// Builds an index from raw `[count, D]` features; rows are
    /// L2-normalized here so lookups are pure dot products.
    pub fn new(features: &Tensor, ids: Vec<u32>, cams: Vec<u32>) -> Result<Self> {
        if features.ndim() != 2 {
            return Err(Error::InvalidArg {
                op: "gallery_index",
                msg: format!("expected [count, D], got {:?}", features.shape()),
            });
        }
        let (count, dim) = (features.shape()[0], features.shape()[1]);
        if ids.len() != count || cams.len() != count {
            return Err(Error::InvalidArg {
                op: "gallery_index",
                msg: format!(
                    "{} features vs {} ids / {} cams",
                    count,
                    ids.len(),
                    cams.len()
                ),
            });
        }
        let mut data = vec![0.0f64; count * dim];
        for r in 0..count {
            let row = &features.data()[r * dim..(r + 1) * dim];
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            let denom = norm.max(1e-12);
            for (j, &v) in row.iter().enumerate() {
                data[r * dim + j] = v as f64 / denom;
            }
        }
        Ok(GalleryIndex {
            features: data,
            dim,
            ids,
            cams,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Unit-norm invariant check (±1e-5), for callers asserting the
    /// contract after construction.
    pub fn rows_unit_norm(&self) -> bool {
        (0..self.len()).all(|r| {
            let n: f64 = self.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            (n - 1.0).abs() < 1e-5 || n < 1e-9
        })
    }
}

/// One query's ranked gallery (indices into the original gallery, after
/// any exclusion), closest first, ties broken by ascending index.
#[derive(Debug, Clone)]
pub struct Ranking {
    pub query: usize,
    pub gallery_order: Vec<usize>,
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

fn rank_one(
    query_row: &[f64],
    gallery: &GalleryIndex,
    keep: impl Fn(usize) -> bool,
) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = (0..gallery.len())
        .filter(|&g| keep(g))
        .map(|g| (cosine_distance(query_row, gallery.row(g)), g))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, g)| g).collect()
}

/// Ranks every query against the gallery by ascending cosine distance.
///
/// With the cross-camera filter on, gallery entries sharing both the id and
/// the camera of the query are removed before ranking. Queries whose valid
/// gallery is empty are skipped and reported.
pub fn rank_queries(
    queries: &GalleryIndex,
    gallery: &GalleryIndex,
    cross_camera_filter: bool,
) -> (Vec<Ranking>, Vec<usize>) {
    let mut rankings = Vec::with_capacity(queries.len());
    let mut skipped = Vec::new();
    for q in 0..queries.len() {
        let order = rank_one(queries.row(q), gallery, |g| {
            !(cross_camera_filter
                && gallery.ids[g] == queries.ids[q]
                && gallery.cams[g] == queries.cams[q])
        });
        if order.is_empty() {
            skipped.push(q);
        } else {
            rankings.push(Ranking {
                query: q,
                gallery_order: order,
            });
        }
    }
    (rankings, skipped)
}

/// Retrieval metrics. CMC is non-decreasing in k; every value is in [0, 1].
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// (k, accuracy) for k in [`CMC_RANKS`].
    pub cmc: Vec<(usize, f64)>,
    pub map: f64,
    /// Per counted query, in ranking order.
    pub aps: Vec<f64>,
    pub queries_counted: usize,
    pub queries_skipped: usize,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc[0].1
    }
}

/// CMC and mAP from rankings. A query with no relevant gallery item left is
/// skipped (and counted as such). AP is the mean of precision-at-hit over
/// the query's relevant items.
pub fn cmc_map(rankings: &[Ranking], query_ids: &[u32], gallery_ids: &[u32]) -> EvalReport {
    let mut first_hits: Vec<usize> = Vec::new();
    let mut aps: Vec<f64> = Vec::new();
    let mut skipped = 0usize;

    for ranking in rankings {
        let qid = query_ids[ranking.query];
        let mut hits = 0usize;
        let mut precision_sum = 0.0f64;
        let mut first_hit = None;
        for (pos, &g) in ranking.gallery_order.iter().enumerate() {
            if gallery_ids[g] == qid {
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
                if first_hit.is_none() {
                    first_hit = Some(pos + 1);
                }
            }
        }
        match first_hit {
            Some(rank) => {
                first_hits.push(rank);
                aps.push(precision_sum / hits as f64);
            }
            None => skipped += 1,
        }
    }

    let counted = first_hits.len();
    let cmc = CMC_RANKS
        .iter()
        .map(|&k| {
            let c = first_hits.iter().filter(|&&r| r <= k).count();
            (k, if counted == 0 { 0.0 } else { c as f64 / counted as f64 })
        })
        .collect();
    let map = if counted == 0 {
        0.0
    } else {
        aps.iter().sum::<f64>() / counted as f64
    };
    EvalReport {
        cmc,
        map,
        aps,
        queries_counted: counted,
        queries_skipped: skipped,
    }
}

/// Rank + score in one call; skipped queries from both phases are merged.
pub fn evaluate(
    queries: &GalleryIndex,
    gallery: &GalleryIndex,
    cross_camera_filter: bool,
) -> EvalReport {
    let (rankings, skipped) = rank_queries(queries, gallery, cross_camera_filter);
    let mut report = cmc_map(&rankings, &queries.ids, &gallery.ids);
    report.queries_skipped += skipped.len();
    report
}

/// Leave-one-out self-retrieval over a single labeled set: each image
/// queries all the others. Used for train-set retrieval during desk runs.
pub fn leave_one_out(index: &GalleryIndex) -> EvalReport {
    let mut rankings = Vec::with_capacity(index.len());
    for q in 0..index.len() {
        let order = rank_one(index.row(q), index, |g| g != q);
        rankings.push(Ranking {
            query: q,
            gallery_order: order,
        });
    }
    cmc_map(&rankings, &index.ids, &index.ids)
}

/// Outcome of the repeated-draw protocol.
#[derive(Debug)]
pub struct RepeatedDrawOutcome {
    pub averaged: EvalReport,
    pub per_draw: Vec<EvalReport>,
    /// Ids with fewer than two images, excluded from every draw.
    pub excluded_ids: usize,
}

/// Repeated probe/gallery draws over one labeled feature set.
///
/// Per draw, one image of each id is picked at random. With
/// `probe_per_id = true` the picked image forms the probe set and the rest
/// the gallery (the literal protocol text); with `false` the conventional
/// split (picked image → gallery, rest → probes) runs instead. Metrics are
/// averaged over draws; everything is seeded and reproducible.
pub fn repeated_draw_protocol(
    features: &Tensor,
    ids: &[u32],
    draws: usize,
    seed: u64,
    probe_per_id: bool,
) -> Result<RepeatedDrawOutcome> {
    if draws == 0 {
        return Err(Error::InvalidArg {
            op: "repeated_draw_protocol",
            msg: "draws must be at least 1".into(),
        });
    }
    let index = GalleryIndex::new(features, ids.to_vec(), vec![0; ids.len()])?;
    let mut by_id: Vec<(u32, Vec<usize>)> = Vec::new();
    for (i, &id) in ids.iter().enumerate() {
        match by_id.iter_mut().find(|(g, _)| *g == id) {
            Some((_, v)) => v.push(i),
            None => by_id.push((id, vec![i])),
        }
    }
    let excluded_ids = by_id.iter().filter(|(_, v)| v.len() < 2).count();
    let usable: Vec<&(u32, Vec<usize>)> = by_id.iter().filter(|(_, v)| v.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Data(
            "repeated-draw protocol needs at least one id with two images".into(),
        ));
    }

    let dim = features.shape()[1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_draw = Vec::with_capacity(draws);
    for _ in 0..draws {
        let mut picked = Vec::with_capacity(usable.len());
        let mut rest = Vec::new();
        for (_, imgs) in usable.iter() {
            let choice = imgs[rng.gen_range(0..imgs.len())];
            picked.push(choice);
            rest.extend(imgs.iter().copied().filter(|&i| i != choice));
        }
        let (probe_idx, gallery_idx) = if probe_per_id {
            (picked, rest)
        } else {
            (rest, picked)
        };
        let subset = |idx: &[usize]| -> Result<GalleryIndex> {
            let mut data = Vec::with_capacity(idx.len() * dim);
            let mut sids = Vec::with_capacity(idx.len());
            for &i in idx {
                data.extend_from_slice(&features.data()[i * dim..(i + 1) * dim]);
                sids.push(index.ids[i]);
            }
            GalleryIndex::new(
                &Tensor::from_vec(&[idx.len(), dim], data)?,
                sids,
                vec![0; idx.len()],
            )
        };
        let probes = subset(&probe_idx)?;
        let gallery = subset(&gallery_idx)?;
        per_draw.push(evaluate(&probes, &gallery, false));
    }

    let averaged = average_reports(&per_draw);
    Ok(RepeatedDrawOutcome {
        averaged,
        per_draw,
        excluded_ids,
    })
}

/// Plain mean of CMC points and mAP across reports.
pub fn average_reports(reports: &[EvalReport]) -> EvalReport {
    let n = reports.len().max(1) as f64;
    let cmc = CMC_RANKS
        .iter()
        .enumerate()
        .map(|(i, &k)| (k, reports.iter().map(|r| r.cmc[i].1).sum::<f64>() / n))
        .collect();
    EvalReport {
        cmc,
        map: reports.iter().map(|r| r.map).sum::<f64>() / n,
        aps: Vec::new(),
        queries_counted: reports.iter().map(|r| r.queries_counted).sum(),
        queries_skipped: reports.iter().map(|r| r.queries_skipped).sum(),
    }
}

/// Machine-readable report: `metric,value` per line.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("metric,value\n");
    for (k, v) in &report.cmc {
        out.push_str(&format!("rank_{},{}\n", k, v));
    }
    out.push_str(&format!("map,{}\n", report.map));
    out.push_str(&format!("queries_counted,{}\n", report.queries_counted));
    out.push_str(&format!("queries_skipped,{}\n", report.queries_skipped));
    out
}

pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<()> {
    std::fs::write(path, report_csv(report))?;
    Ok(())
}

/// Human-readable report table.
pub fn report_table(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str("metric      value\n");
    for (k, v) in &report.cmc {
        out.push_str(&format!("rank-{:<6} {:.4}\n", k, v));
    }
    out.push_str(&format!("mAP         {:.4}\n", report.map));
    out.push_str(&format!(
        "queries     {} counted, {} skipped\n",
        report.queries_counted, report.queries_skipped
    ));
    out
}
