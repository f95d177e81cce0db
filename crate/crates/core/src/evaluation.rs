//! Retrieval metrics, distillation fidelity, decomposition quality,
//! distance re-weighting, attention averaging and localization.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, PersonRecord};
use crate::error::{AmdError, Result};
use crate::interpreter::{explain_pair, mean_map, AamStack, ImageExplanation, Interpreter, PairExplanation};
use crate::scalar::Real;

/// Average precision of a ranked relevance list; `None` without relevant items.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Indices sorted by `key` ascending (or descending), ties by index.
fn stable_order(values: &[f64], descending: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if descending {
        idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    } else {
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    }
    idx
}

/// Identity and camera of a retrieval item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItemKey {
    pub id: usize,
    pub camera: usize,
}

impl From<&PersonRecord> for ItemKey {
    fn from(r: &PersonRecord) -> Self {
        ItemKey {
            id: r.id,
            camera: r.camera,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub rank1: f64,
    pub rank5: f64,
    pub map: f64,
    pub evaluated_queries: usize,
    pub skipped_queries: usize,
}

/// Ranks the gallery for every query by ascending `dist[q][g]`.
///
/// Gallery items sharing both identity and camera with the query are
/// removed from its list. Queries without any remaining true match are
/// skipped and counted.
pub fn reid_eval(query: &[ItemKey], gallery: &[ItemKey], dist: &[Vec<f64>]) -> Result<RetrievalMetrics> {
    if dist.len() != query.len() || dist.iter().any(|row| row.len() != gallery.len()) {
        return Err(AmdError::Dimension("distance matrix does not match query × gallery".into()));
    }
    let mut out = RetrievalMetrics::default();
    let (mut r1, mut r5, mut ap_sum) = (0usize, 0usize, 0.0);
    for (q, row) in query.iter().zip(dist) {
        let order = stable_order(row, false);
        let relevant: Vec<bool> = order
            .into_iter()
            .filter(|&g| !(gallery[g].id == q.id && gallery[g].camera == q.camera))
            .map(|g| gallery[g].id == q.id)
            .collect();
        let Some(ap) = average_precision(&relevant) else {
            out.skipped_queries += 1;
            continue;
        };
        out.evaluated_queries += 1;
        ap_sum += ap;
        let first = relevant.iter().position(|&r| r).unwrap();
        r1 += usize::from(first < 1);
        r5 += usize::from(first < 5);
    }
    if out.evaluated_queries == 0 {
        return Err(AmdError::UndefinedMetric("no query has a usable gallery match".into()));
    }
    let n = out.evaluated_queries as f64;
    out.rank1 = r1 as f64 / n;
    out.rank5 = r5 as f64 / n;
    out.map = ap_sum / n;
    Ok(out)
}

/// A metric averaged over items, with the number of items skipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averaged {
    pub value: f64,
    pub used: usize,
    pub skipped: usize,
}

pub const ADRE_EPS: f64 = 1e-6;

/// Mean of `|d − d̂| / d` over pairs with `d ≥ 1e-6`.
pub fn adre(pairs: &[(f64, f64)]) -> Result<Averaged> {
    let mut sum = 0.0;
    let mut used = 0;
    for &(d, d_hat) in pairs {
        if d >= ADRE_EPS {
            sum += (d - d_hat).abs() / d;
            used += 1;
        }
    }
    if used == 0 {
        return Err(AmdError::UndefinedMetric("every pair has a vanishing distance".into()));
    }
    Ok(Averaged {
        value: sum / used as f64,
        used,
        skipped: pairs.len() - used,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XmapMode {
    /// Rank descending; exclusive attributes are relevant.
    Exclusive,
    /// Rank ascending; common attributes are relevant.
    Common,
}

/// AP of one pair's attribute ranking, or `None` when `M_E ∈ {0, M}`.
pub fn pair_attribute_ap(components: &[f64], pair_attributes: &[u8], mode: XmapMode) -> Option<f64> {
    let m_e = pair_attributes.iter().filter(|&&a| a == 1).count();
    if m_e == 0 || m_e == pair_attributes.len() {
        return None;
    }
    let (descending, want) = match mode {
        XmapMode::Exclusive => (true, 1),
        XmapMode::Common => (false, 0),
    };
    let rel: Vec<bool> = stable_order(components, descending)
        .into_iter()
        .map(|k| pair_attributes[k] == want)
        .collect();
    average_precision(&rel)
}

/// Mean attribute-ranking AP over pairs. Callers pass cross-identity pairs only.
pub fn xmap(pairs: &[&PairExplanation], mode: XmapMode) -> Result<Averaged> {
    let mut sum = 0.0;
    let mut used = 0;
    for p in pairs {
        if let Some(ap) = pair_attribute_ap(&p.components, &p.pair_attributes, mode) {
            sum += ap;
            used += 1;
        }
    }
    if used == 0 {
        return Err(AmdError::UndefinedMetric("no pair has both exclusive and common attributes".into()));
    }
    Ok(Averaged {
        value: sum / used as f64,
        used,
        skipped: pairs.len() - used,
    })
}

/// Expected exclusive-mode AP under uniformly random attribute rankings,
/// estimated by shuffling each valid pair's ranking `trials` times.
pub fn random_ranking_baseline(pairs: &[&PairExplanation], trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut used = 0usize;
    for p in pairs {
        let m = p.pair_attributes.len();
        if p.exclusive_count == 0 || p.exclusive_count == m {
            continue;
        }
        let mut order: Vec<usize> = (0..m).collect();
        let mut acc = 0.0;
        for _ in 0..trials {
            order.shuffle(&mut rng);
            let rel: Vec<bool> = order.iter().map(|&k| p.pair_attributes[k] == 1).collect();
            acc += average_precision(&rel).unwrap();
        }
        sum += acc / trials as f64;
        used += 1;
    }
    if used == 0 {
        return Err(AmdError::UndefinedMetric("no valid pairs for the baseline".into()));
    }
    Ok(sum / used as f64)
}

/// `d' = d + γ · max_e d^e`; unchanged when there is no exclusive attribute.
pub fn reweight(d: f64, explanation: &PairExplanation, gamma: f64) -> f64 {
    let max_excl = explanation
        .components
        .iter()
        .zip(&explanation.pair_attributes)
        .filter(|(_, &a)| a == 1)
        .map(|(&c, _)| c)
        .fold(None, |acc: Option<f64>, c| Some(acc.map_or(c, |a| a.max(c))));
    match max_excl {
        Some(m) if gamma != 0.0 => d + gamma * m,
        _ => d,
    }
}

/// Mean attention map of one attribute over records with and without it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionAverage {
    pub positive: Option<Vec<f64>>,
    pub negative: Option<Vec<f64>>,
    pub positive_count: usize,
    pub negative_count: usize,
}

pub fn average_attention<T: Real>(items: &[(&[u8], &AamStack<T>)]) -> Vec<AttentionAverage> {
    let m = items.first().map_or(0, |(_, a)| a.m());
    (0..m)
        .map(|k| {
            let side = |want: u8| -> Vec<Vec<f64>> {
                items
                    .iter()
                    .filter(|(attrs, _)| attrs[k] == want)
                    .map(|(_, a)| a.channel(k).iter().map(|v| v.as_f64()).collect())
                    .collect()
            };
            let pos = side(1);
            let neg = side(0);
            let avg = |maps: &Vec<Vec<f64>>| mean_map(&maps.iter().map(Vec::as_slice).collect::<Vec<_>>());
            AttentionAverage {
                positive: avg(&pos),
                negative: avg(&neg),
                positive_count: pos.len(),
                negative_count: neg.len(),
            }
        })
        .collect()
}

/// Area-pools an `H×W` binary mask to `h×w` coverage fractions.
pub fn downscale_mask(mask: &[u8], height: usize, width: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1) = (y * height / h, ((y + 1) * height / h).max(y * height / h + 1));
        for x in 0..w {
            let (x0, x1) = (x * width / w, ((x + 1) * width / w).max(x * width / w + 1));
            let mut s = 0usize;
            for yy in y0..y1.min(height) {
                for xx in x0..x1.min(width) {
                    s += mask[yy * width + xx] as usize;
                }
            }
            out[y * w + x] = s as f64 / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

/// Coverage-weighted mean attention inside a region over mean attention of
/// the whole map. `None` for an empty region.
pub fn region_attention_ratio(attention: &[f64], coverage: &[f64]) -> Option<f64> {
    let mass: f64 = coverage.iter().sum();
    if !(mass > 0.0) {
        return None;
    }
    let inside = attention.iter().zip(coverage).map(|(a, c)| a * c).sum::<f64>() / mass;
    let overall = attention.iter().sum::<f64>() / attention.len() as f64;
    (overall > 0.0).then(|| inside / overall)
}

/// Localization ratio of every positive attribute of `record`; other
/// attributes, and attributes whose downscaled mask is empty, map to `None`.
pub fn localization_score<T: Real>(record: &PersonRecord, aams: &AamStack<T>) -> Vec<Option<f64>> {
    let (h, w) = aams.dims();
    (0..aams.m())
        .map(|k| {
            if record.attributes[k] != 1 {
                return None;
            }
            let cov = downscale_mask(record.mask(k), record.height, record.width, h, w);
            let att: Vec<f64> = aams.channel(k).iter().map(|v| v.as_f64()).collect();
            region_attention_ratio(&att, &cov)
        })
        .collect()
}

/// Full evaluation report on a query/gallery split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub target: RetrievalMetrics,
    pub interpreter: RetrievalMetrics,
    pub reweighted: Option<RetrievalMetrics>,
    pub gamma: Option<f64>,
    pub adre: Option<f64>,
    pub xmap_e: Option<f64>,
    pub xmap_c: Option<f64>,
    pub localization: Option<f64>,
    pub pairs_total: usize,
    pub same_id_pairs: usize,
    pub adre_skipped: usize,
    pub xmap_skipped: usize,
    pub localization_terms: usize,
}

/// All query × gallery explanations, row-major by query.
pub struct PairTable {
    pub query: Vec<ItemKey>,
    pub gallery: Vec<ItemKey>,
    /// Dataset record indices of the query and gallery images.
    pub query_records: Vec<usize>,
    pub gallery_records: Vec<usize>,
    pub pairs: Vec<PairExplanation>,
    pub query_explanations: Vec<ImageExplanation<f64>>,
    pub gallery_explanations: Vec<ImageExplanation<f64>>,
}

impl PairTable {
    pub fn build<T: Real>(interp: &Interpreter<T>, query: &[PersonRecord], gallery: &[PersonRecord]) -> Result<Self> {
        let explain = |r: &PersonRecord| -> Result<ImageExplanation<f64>> {
            let e = interp.explain_image(&r.image::<T>())?;
            Ok(ImageExplanation {
                feature: e.feature.cast(),
                aams: AamStack { maps: e.aams.maps.cast() },
                attribute_features: e
                    .attribute_features
                    .iter()
                    .map(|v| v.iter().map(|x| x.as_f64()).collect())
                    .collect(),
            })
        };
        let qe: Vec<_> = query.iter().map(explain).collect::<Result<_>>()?;
        let ge: Vec<_> = gallery.iter().map(explain).collect::<Result<_>>()?;
        let mut pairs = Vec::with_capacity(qe.len() * ge.len());
        for (q, eq) in query.iter().zip(&qe) {
            for (g, eg) in gallery.iter().zip(&ge) {
                pairs.push(explain_pair(eq, eg, &q.attributes, &g.attributes)?);
            }
        }
        Ok(PairTable {
            query: query.iter().map(ItemKey::from).collect(),
            gallery: gallery.iter().map(ItemKey::from).collect(),
            query_records: query.iter().map(|r| r.index).collect(),
            gallery_records: gallery.iter().map(|r| r.index).collect(),
            pairs,
            query_explanations: qe,
            gallery_explanations: ge,
        })
    }

    pub fn pair(&self, q: usize, g: usize) -> &PairExplanation {
        &self.pairs[q * self.gallery.len() + g]
    }

    pub fn matrix(&self, f: impl Fn(&PairExplanation) -> f64) -> Vec<Vec<f64>> {
        self.pairs.chunks(self.gallery.len().max(1)).map(|row| row.iter().map(&f).collect()).collect()
    }

    /// One JSON object per pair, row-major by query.
    pub fn json_lines(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Line<'a> {
            query: usize,
            gallery: usize,
            #[serde(flatten)]
            explanation: &'a PairExplanation,
        }
        let ng = self.gallery.len();
        let mut out = String::new();
        for (i, p) in self.pairs.iter().enumerate() {
            let line = Line {
                query: self.query_records[i / ng],
                gallery: self.gallery_records[i % ng],
                explanation: p,
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn cross_id_pairs(&self) -> Vec<&PairExplanation> {
        let ng = self.gallery.len();
        self.pairs
            .iter()
            .enumerate()
            .filter(|(i, _)| self.query[i / ng].id != self.gallery[i % ng].id)
            .map(|(_, p)| p)
            .collect()
    }
}

/// Mean localization ratio over exclusive attributes of cross-identity
/// pairs, scored on whichever image carries the attribute.
pub fn pair_localization(
    table: &PairTable,
    query: &[PersonRecord],
    gallery: &[PersonRecord],
) -> Option<(f64, usize)> {
    let qs: Vec<Vec<Option<f64>>> = query
        .iter()
        .zip(&table.query_explanations)
        .map(|(r, e)| localization_score(r, &e.aams))
        .collect();
    let gs: Vec<Vec<Option<f64>>> = gallery
        .iter()
        .zip(&table.gallery_explanations)
        .map(|(r, e)| localization_score(r, &e.aams))
        .collect();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (qi, q) in query.iter().enumerate() {
        for (gi, g) in gallery.iter().enumerate() {
            if q.id == g.id {
                continue;
            }
            for k in 0..q.attributes.len() {
                let score = match (q.attributes[k], g.attributes[k]) {
                    (1, 0) => qs[qi][k],
                    (0, 1) => gs[gi][k],
                    _ => None,
                };
                if let Some(s) = score {
                    sum += s;
                    n += 1;
                }
            }
        }
    }
    (n > 0).then(|| (sum / n as f64, n))
}

/// Evaluates retrieval with target and reconstructed distances plus all
/// decomposition metrics; adds re-weighted retrieval when `gamma` is given.
pub fn evaluate<T: Real>(interp: &Interpreter<T>, split: &DatasetSplit, gamma: Option<f64>) -> Result<(MetricsReport, PairTable)> {
    let table = PairTable::build(interp, &split.query, &split.gallery)?;
    let report = report_from_table(&table, &split.query, &split.gallery, gamma)?;
    Ok((report, table))
}

pub fn report_from_table(
    table: &PairTable,
    query: &[PersonRecord],
    gallery: &[PersonRecord],
    gamma: Option<f64>,
) -> Result<MetricsReport> {
    let target = reid_eval(&table.query, &table.gallery, &table.matrix(|p| p.d))?;
    let interpreter = reid_eval(&table.query, &table.gallery, &table.matrix(|p| p.d_hat))?;
    let reweighted = match gamma {
        Some(gm) => Some(reid_eval(&table.query, &table.gallery, &table.matrix(|p| reweight(p.d, p, gm)))?),
        None => None,
    };
    let adre_v = adre(&table.pairs.iter().map(|p| (p.d, p.d_hat)).collect::<Vec<_>>()).ok();
    let cross = table.cross_id_pairs();
    let xe = xmap(&cross, XmapMode::Exclusive).ok();
    let xc = xmap(&cross, XmapMode::Common).ok();
    let loc = pair_localization(table, query, gallery);
    Ok(MetricsReport {
        target,
        interpreter,
        reweighted,
        gamma,
        adre: adre_v.map(|a| a.value),
        xmap_e: xe.map(|a| a.value),
        xmap_c: xc.map(|a| a.value),
        localization: loc.map(|l| l.0),
        pairs_total: table.pairs.len(),
        same_id_pairs: table.pairs.len() - cross.len(),
        adre_skipped: adre_v.map_or(table.pairs.len(), |a| a.skipped),
        xmap_skipped: xe.map_or(cross.len(), |a| a.skipped),
        localization_terms: loc.map_or(0, |l| l.1),
    })
}
