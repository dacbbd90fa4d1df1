//! Retrieval evaluation: squared-distance ranking with same-id/same-camera
//! junk filtering, the cumulative matching curve, and mean average precision.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: u32,
    pub cam: u32,
    pub feature: Vec<f64>,
}

/// Which features enter the matching distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Concatenate the fused local feature and the global feature.
    Full,
    /// Fused local feature only.
    Local,
    /// Same matching as `Full`; the difference is a training-time property
    /// (global CE dropped) recorded in the checkpoint.
    Dagger,
    /// Global feature only (branchless baseline).
    Global,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "local" => Ok(Variant::Local),
            "dagger" => Ok(Variant::Dagger),
            "global" => Ok(Variant::Global),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected full|local|dagger|global)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Local => "local",
            Variant::Dagger => "dagger",
            Variant::Global => "global",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// cmc[r] = fraction of valid queries with first correct match at rank <= r+1.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub per_query_ap: Vec<f64>,
    pub valid_queries: usize,
    pub total_queries: usize,
}

impl EvalReport {
    pub fn rank(&self, r: usize) -> f64 {
        if r == 0 || self.cmc.is_empty() {
            return 0.0;
        }
        let idx = (r - 1).min(self.cmc.len() - 1);
        self.cmc[idx]
    }

    /// CSV with `rank,accuracy` rows and a `mAP,<value>` footer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,accuracy\n");
        for (i, v) in self.cmc.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, v));
        }
        out.push_str(&format!("mAP,{}\n", self.map));
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "Rank-1 {:.4}  Rank-5 {:.4}  Rank-10 {:.4}  mAP {:.4}  ({}/{} valid queries)",
            self.rank(1),
            self.rank(5),
            self.rank(10),
            self.map,
            self.valid_queries,
            self.total_queries
        )
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gallery indices ordered by ascending squared distance to the query, ties
/// broken by ascending original index. Entries sharing both id and camera
/// with the query are excluded. Returns None when nothing survives the
/// filter (the query is invalid).
pub fn rank_gallery(query: &EmbeddingRecord, gallery: &[EmbeddingRecord]) -> Result<Option<Vec<usize>>> {
    let mut scored = Vec::with_capacity(gallery.len());
    for (i, g) in gallery.iter().enumerate() {
        if g.feature.len() != query.feature.len() {
            return Err(Error::Dim(format!(
                "gallery entry {i} feature length {} vs query {}",
                g.feature.len(),
                query.feature.len()
            )));
        }
        if g.id == query.id && g.cam == query.cam {
            continue;
        }
        scored.push((sq_dist(&query.feature, &g.feature), i));
    }
    if scored.is_empty() {
        return Ok(None);
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(Some(scored.into_iter().map(|(_, i)| i).collect()))
}

/// CMC and mAP over all queries. Queries with no ranked entry or no relevant
/// entry after filtering are marked invalid and excluded from the averages.
pub fn cmc_map(queries: &[EmbeddingRecord], gallery: &[EmbeddingRecord]) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Data("evaluation needs at least one query".into()));
    }
    let max_rank = gallery.len();
    let mut first_hits = vec![0usize; max_rank];
    let mut per_query_ap = Vec::new();
    let mut valid = 0usize;

    for q in queries {
        let Some(ranking) = rank_gallery(q, gallery)? else {
            continue;
        };
        let relevant_total = ranking.iter().filter(|&&i| gallery[i].id == q.id).count();
        if relevant_total == 0 {
            continue;
        }
        valid += 1;
        let mut seen_relevant = 0usize;
        let mut ap_sum = 0.0;
        let mut first: Option<usize> = None;
        for (pos, &gi) in ranking.iter().enumerate() {
            if gallery[gi].id == q.id {
                seen_relevant += 1;
                ap_sum += seen_relevant as f64 / (pos + 1) as f64;
                if first.is_none() {
                    first = Some(pos);
                }
            }
        }
        first_hits[first.expect("relevant_total > 0")] += 1;
        per_query_ap.push(ap_sum / relevant_total as f64);
    }

    if valid == 0 {
        return Err(Error::Data("no valid queries after protocol filtering".into()));
    }

    let mut cmc = Vec::with_capacity(max_rank);
    let mut cum = 0usize;
    for hits in first_hits {
        cum += hits;
        cmc.push(cum as f64 / valid as f64);
    }
    let map = per_query_ap.iter().sum::<f64>() / valid as f64;
    Ok(EvalReport { cmc, map, per_query_ap, valid_queries: valid, total_queries: queries.len() })
}
