//! Vote/turnout fingerprints and cumulative vote-share curves.
//!
//! Fingerprints put turnout on the x axis and the candidate's vote share on
//! the y axis. Grids are stored row-major with one row per vote-share bin,
//! lowest share first.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::{AreaKey, AreaLevel, ElectionRound};

mod heatmap;

pub use heatmap::{emit_heatmap, read_grid_csv, write_curve_csv, write_grid_csv, write_heatmap_svg};

pub const DEFAULT_RAW_BINS: usize = 100;
pub const DEFAULT_STANDARDIZED_BINS: usize = 80;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fingerprint {
    /// `grid[share_bin][turnout_bin]`.
    pub grid: Vec<Vec<u64>>,
    /// Turnout bin edges, `bins + 1` values.
    pub x_edges: Vec<f64>,
    /// Vote-share bin edges, `bins + 1` values.
    pub y_edges: Vec<f64>,
    pub candidate: String,
    pub standardized: bool,
    /// Boxes placed in the grid.
    pub n_boxes: u64,
    /// Boxes skipped because their group mean was zero.
    pub skipped_zero_mean: u64,
    /// Standardized points falling outside the axis range.
    pub out_of_range: u64,
}

impl Fingerprint {
    fn empty(candidate: &str, bins: usize, range: (f64, f64), standardized: bool) -> Self {
        let edges = edges(range, bins);
        Fingerprint {
            grid: vec![vec![0; bins]; bins],
            x_edges: edges.clone(),
            y_edges: edges,
            candidate: candidate.to_string(),
            standardized,
            n_boxes: 0,
            skipped_zero_mean: 0,
            out_of_range: 0,
        }
    }

    pub fn bins(&self) -> usize {
        self.grid.len()
    }

    fn add(&mut self, turnout: f64, share: f64) {
        let bins = self.bins();
        let lo = self.x_edges[0];
        let hi = self.x_edges[bins];
        match (bin_index(turnout, lo, hi, bins), bin_index(share, lo, hi, bins)) {
            (Some(col), Some(row)) => {
                self.grid[row][col] += 1;
                self.n_boxes += 1;
            }
            _ => self.out_of_range += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.grid.iter().flatten().sum()
    }

    /// Grid flattened row-major and divided by its total.
    pub fn normalized(&self) -> Vec<f64> {
        let total = self.total().max(1) as f64;
        self.grid.iter().flatten().map(|&c| c as f64 / total).collect()
    }
}

fn edges((lo, hi): (f64, f64), bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect()
}

/// Bin of `value` among `bins` equal bins over `[lo, hi]`; `hi` itself lands
/// in the last bin.
#[inline]
pub fn bin_index(value: f64, lo: f64, hi: f64, bins: usize) -> Option<usize> {
    if !(lo..=hi).contains(&value) {
        return None;
    }
    let idx = ((value - lo) / (hi - lo) * bins as f64).floor() as usize;
    Some(idx.min(bins - 1))
}

fn check_bins(bins: usize) -> Result<()> {
    if bins < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 bins, got {bins}")));
    }
    Ok(())
}

pub fn raw_fingerprint(round: &ElectionRound, candidate: &str, bins: usize) -> Result<Fingerprint> {
    check_bins(bins)?;
    let c = round.candidate_index(candidate)?;
    let mut fp = Fingerprint::empty(candidate, bins, (0.0, 1.0), false);
    for b in &round.boxes {
        fp.add(b.turnout(), b.share(c));
    }
    Ok(fp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StandardizeConfig {
    pub level: AreaLevel,
    /// Use the parent area's mean for groups holding a single box.
    pub fallback_parent: bool,
    pub bins: usize,
    pub range: (f64, f64),
}

impl Default for StandardizeConfig {
    fn default() -> Self {
        StandardizeConfig {
            level: AreaLevel::County,
            fallback_parent: true,
            bins: DEFAULT_STANDARDIZED_BINS,
            range: (0.0, 2.0),
        }
    }
}

/// Per-box (turnout, share) divided by the mean over the box's group.
#[derive(Debug, Clone)]
pub struct Standardized {
    /// `None` for boxes whose group mean turnout or share is zero.
    pub points: Vec<Option<[f64; 2]>>,
    pub skipped_zero_mean: usize,
    /// Boxes normalized against a coarser level than requested.
    pub fell_back: usize,
}

impl Standardized {
    /// Mean standardized point over the boxes selected by `mask` (all when `None`).
    pub fn centroid(&self, mask: Option<&[bool]>) -> Option<[f64; 2]> {
        let mut sum = [0.0; 2];
        let mut n = 0usize;
        for (i, p) in self.points.iter().enumerate() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            if let Some(p) = p {
                sum[0] += p[0];
                sum[1] += p[1];
                n += 1;
            }
        }
        (n > 0).then(|| [sum[0] / n as f64, sum[1] / n as f64])
    }
}

pub fn standardize(
    round: &ElectionRound,
    candidate: usize,
    level: AreaLevel,
    fallback_parent: bool,
) -> Standardized {
    #[derive(Default, Clone, Copy)]
    struct Acc {
        n: usize,
        t: f64,
        v: f64,
    }

    let mut levels = vec![level];
    if fallback_parent {
        while let Some(p) = levels.last().and_then(|l| l.parent()) {
            levels.push(p);
        }
    }
    let keys: Vec<Vec<AreaKey>> = levels
        .iter()
        .map(|&l| round.boxes.iter().map(|b| b.area_key(l)).collect())
        .collect();
    let sums: Vec<HashMap<&AreaKey, Acc>> = keys
        .iter()
        .map(|ks| {
            let mut m: HashMap<&AreaKey, Acc> = HashMap::new();
            for (k, b) in ks.iter().zip(&round.boxes) {
                let a = m.entry(k).or_default();
                a.n += 1;
                a.t += b.turnout();
                a.v += b.share(candidate);
            }
            m
        })
        .collect();

    let mut out = Standardized {
        points: Vec::with_capacity(round.len()),
        skipped_zero_mean: 0,
        fell_back: 0,
    };
    for (i, b) in round.boxes.iter().enumerate() {
        let mut chosen = 0;
        for depth in 0..levels.len() {
            chosen = depth;
            if sums[depth][&keys[depth][i]].n >= 2 {
                break;
            }
        }
        if chosen > 0 {
            out.fell_back += 1;
        }
        let acc = sums[chosen][&keys[chosen][i]];
        let mean_t = acc.t / acc.n as f64;
        let mean_v = acc.v / acc.n as f64;
        if mean_t <= 0.0 || mean_v <= 0.0 {
            out.skipped_zero_mean += 1;
            out.points.push(None);
        } else {
            out.points.push(Some([b.turnout() / mean_t, b.share(candidate) / mean_v]));
        }
    }
    out
}

/// Fingerprint of standardized points, optionally restricted to a subset of
/// boxes (for example small units) while group means use the whole round.
pub fn standardized_fingerprint_masked(
    round: &ElectionRound,
    candidate: &str,
    config: &StandardizeConfig,
    mask: Option<&[bool]>,
) -> Result<Fingerprint> {
    check_bins(config.bins)?;
    let c = round.candidate_index(candidate)?;
    let st = standardize(round, c, config.level, config.fallback_parent);
    let mut fp = Fingerprint::empty(candidate, config.bins, config.range, true);
    for (i, p) in st.points.iter().enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        match p {
            Some([t, v]) => fp.add(*t, *v),
            None => fp.skipped_zero_mean += 1,
        }
    }
    Ok(fp)
}

pub fn standardized_fingerprint(
    round: &ElectionRound,
    candidate: &str,
    config: &StandardizeConfig,
) -> Result<Fingerprint> {
    standardized_fingerprint_masked(round, candidate, config, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveMode {
    ByTurnout,
    ByRank,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub cumulative_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CumulativeCurve {
    pub mode: CurveMode,
    pub points: Vec<CurvePoint>,
}

impl CumulativeCurve {
    /// First threshold at which the cumulative share reaches `level`.
    pub fn first_crossing(&self, level: f64) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.cumulative_share >= level)
            .map(|p| p.threshold)
    }

    pub fn last_share(&self) -> Option<f64> {
        self.points.last().map(|p| p.cumulative_share)
    }
}

/// Cumulative vote share of all boxes with turnout at or below each distinct
/// turnout level.
pub fn cumulative_turnout_curve(round: &ElectionRound, candidate: &str) -> Result<CumulativeCurve> {
    let c = round.candidate_index(candidate)?;
    let turnouts: Vec<f64> = round.boxes.iter().map(|b| b.turnout()).collect();
    let mut order: Vec<usize> = (0..round.len()).collect();
    order.sort_by(|&a, &b| {
        turnouts[a]
            .total_cmp(&turnouts[b])
            .then_with(|| round.boxes[a].box_id.cmp(&round.boxes[b].box_id))
    });

    let mut points = Vec::new();
    let (mut votes, mut valid) = (0u64, 0u64);
    for (k, &i) in order.iter().enumerate() {
        votes += round.boxes[i].votes[c];
        valid += round.boxes[i].valid_votes;
        let last_of_level = order
            .get(k + 1)
            .is_none_or(|&j| turnouts[j].total_cmp(&turnouts[i]) != Ordering::Equal);
        if last_of_level {
            points.push(CurvePoint {
                threshold: turnouts[i],
                cumulative_share: votes as f64 / valid as f64,
            });
        }
    }
    Ok(CumulativeCurve {
        mode: CurveMode::ByTurnout,
        points,
    })
}

/// Boxes ranked by electorate, largest first; point `i` is the aggregate vote
/// share of ranks `1..=i`.
pub fn rank_cumulative_curve(round: &ElectionRound, candidate: &str) -> Result<CumulativeCurve> {
    let c = round.candidate_index(candidate)?;
    let mut order: Vec<usize> = (0..round.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&round.boxes[a], &round.boxes[b]);
        y.electorate.cmp(&x.electorate).then_with(|| x.box_id.cmp(&y.box_id))
    });
    let (mut votes, mut valid) = (0u64, 0u64);
    let points = order
        .iter()
        .enumerate()
        .map(|(rank, &i)| {
            votes += round.boxes[i].votes[c];
            valid += round.boxes[i].valid_votes;
            CurvePoint {
                threshold: (rank + 1) as f64,
                cumulative_share: votes as f64 / valid as f64,
            }
        })
        .collect();
    Ok(CumulativeCurve {
        mode: CurveMode::ByRank,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::BallotBox;

    fn bx(id: &str, county: &str, electorate: u64, valid: u64, e: u64) -> BallotBox {
        BallotBox {
            box_id: id.into(),
            province_id: "P".into(),
            district_id: "D".into(),
            county_id: county.into(),
            electorate,
            valid_votes: valid,
            votes: vec![e, valid - e],
        }
    }

    fn round(boxes: Vec<BallotBox>) -> ElectionRound {
        ElectionRound::from_boxes("t", vec!["E".into(), "K".into()], boxes).unwrap()
    }

    #[test]
    fn single_box_lands_in_middle_bin() {
        let fp = raw_fingerprint(&round(vec![bx("a", "c", 200, 100, 50)]), "E", 100).unwrap();
        assert_eq!(fp.grid[50][50], 1);
        assert_eq!(fp.total(), 1);
        assert_eq!(fp.n_boxes, 1);
    }

    #[test]
    fn identical_boxes_share_a_bin() {
        let r = round(vec![bx("a", "c", 200, 100, 50), bx("b", "c", 200, 100, 50)]);
        let fp = raw_fingerprint(&r, "E", 100).unwrap();
        assert_eq!(fp.grid[50][50], 2);
        assert_eq!(fp.total(), 2);
    }

    #[test]
    fn full_turnout_and_share_land_in_last_bin() {
        let fp = raw_fingerprint(&round(vec![bx("a", "c", 50, 50, 50)]), "E", 10).unwrap();
        assert_eq!(fp.grid[9][9], 1);
    }

    #[test]
    fn unknown_candidate_and_bad_bins() {
        let r = round(vec![bx("a", "c", 50, 50, 50)]);
        assert!(matches!(raw_fingerprint(&r, "X", 10), Err(Error::UnknownCandidate(_))));
        assert!(raw_fingerprint(&r, "E", 1).is_err());
    }

    #[test]
    fn identical_county_standardizes_to_one() {
        let r = round(vec![
            bx("a", "c", 300, 210, 70),
            bx("b", "c", 300, 210, 70),
            bx("c", "c", 300, 210, 70),
        ]);
        let st = standardize(&r, 0, AreaLevel::County, true);
        for p in st.points.iter().flatten() {
            assert!((p[0] - 1.0).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn double_the_mean_maps_to_two() {
        // turnouts 0.8, 0.2, 0.2 -> mean 0.4; shares 0.5, 0.25, 0 -> mean 0.25
        let r = round(vec![
            bx("a", "c", 100, 80, 40),
            bx("b", "c", 100, 20, 5),
            bx("c", "c", 100, 20, 0),
        ]);
        let st = standardize(&r, 0, AreaLevel::County, true);
        let p = st.points[0].unwrap();
        assert!((p[0] - 2.0).abs() < 1e-12, "{p:?}");
        assert!((p[1] - 2.0).abs() < 1e-12, "{p:?}");
    }

    #[test]
    fn singleton_groups_self_normalize_without_fallback() {
        let r = round(vec![bx("a", "c1", 300, 210, 70), bx("b", "c2", 100, 50, 10)]);
        let st = standardize(&r, 0, AreaLevel::County, false);
        assert!(st.points.iter().all(|p| *p == Some([1.0, 1.0])));
        let with_fallback = standardize(&r, 0, AreaLevel::County, true);
        assert_eq!(with_fallback.fell_back, 2);
        assert_ne!(with_fallback.points[0], Some([1.0, 1.0]));
    }

    #[test]
    fn zero_mean_groups_are_skipped() {
        let r = round(vec![bx("a", "c", 100, 50, 0), bx("b", "c", 100, 60, 0)]);
        let fp = standardized_fingerprint(&r, "E", &StandardizeConfig::default()).unwrap();
        assert_eq!(fp.skipped_zero_mean, 2);
        assert_eq!(fp.total(), 0);
    }

    #[test]
    fn turnout_curve_single_box() {
        let c = cumulative_turnout_curve(&round(vec![bx("a", "c", 100, 50, 30)]), "E").unwrap();
        assert_eq!(c.points, vec![CurvePoint { threshold: 0.5, cumulative_share: 0.6 }]);
    }

    #[test]
    fn turnout_curve_merges_equal_turnouts() {
        let r = round(vec![
            bx("a", "c", 100, 50, 30),
            bx("b", "c", 200, 100, 10),
            bx("c", "c", 100, 90, 90),
        ]);
        let c = cumulative_turnout_curve(&r, "E").unwrap();
        assert_eq!(c.points.len(), 2);
        assert!((c.points[0].cumulative_share - 40.0 / 150.0).abs() < 1e-15);
        assert!((c.points[1].cumulative_share - 130.0 / 240.0).abs() < 1e-15);
        assert_eq!(c.first_crossing(0.5), Some(0.9));
        assert_eq!(c.first_crossing(0.6), None);
    }

    #[test]
    fn rank_curve_two_boxes() {
        let r = round(vec![bx("small", "c", 100, 50, 50), bx("big", "c", 200, 100, 50)]);
        let c = rank_cumulative_curve(&r, "E").unwrap();
        assert_eq!(c.points[0], CurvePoint { threshold: 1.0, cumulative_share: 0.5 });
        assert!((c.points[1].cumulative_share - 100.0 / 150.0).abs() < 1e-15);
    }

    #[test]
    fn rank_curve_constant_for_identical_shares() {
        let r = round((1..=20).map(|k| bx(&format!("b{k}"), "c", 10 * k, 5 * k, 2 * k)).collect());
        let c = rank_cumulative_curve(&r, "E").unwrap();
        assert_eq!(c.points.len(), 20);
        assert!(c.points.iter().all(|p| (p.cumulative_share - 0.4).abs() < 1e-15));
    }
}
