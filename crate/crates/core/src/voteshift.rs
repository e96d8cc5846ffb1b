//! Two-round vote-shift test.
//!
//! For every box present in both rounds the shift `dv` is the candidate's
//! round-2 share minus the round-1 share of the candidates supporting them.
//! Under the null hypothesis shifts are symmetric around their mode. The
//! side of the mode with the larger mean absolute deviation is symmetrized:
//! each of its deviations is replaced by the negation of a deviation drawn
//! with replacement from the other side, and the candidate's round-2 total
//! is recomputed. Excess votes are the actual total minus the mean total over
//! the Monte Carlo replicates.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::{AreaLevel, ElectionRound};
use crate::kde::GaussianKde;
use crate::rng::{stream_rng, streams};
use crate::stats;

pub const MIN_DELTAS_FOR_MODE: usize = 100;
pub const DEFAULT_REPLICATES: usize = 200;

/// One box matched across both rounds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxPair {
    pub box_id: String,
    /// The box's area holds at most two boxes in round 1.
    pub small_area: bool,
    pub electorate_r1: u64,
    pub valid_r1: u64,
    pub votes_r1: Vec<u64>,
    pub electorate_r2: u64,
    pub valid_r2: u64,
    pub votes_r2: Vec<u64>,
}

impl BoxPair {
    pub fn share_r1(&self, c: usize) -> f64 {
        self.votes_r1[c] as f64 / self.valid_r1 as f64
    }

    pub fn share_r2(&self, c: usize) -> f64 {
        self.votes_r2[c] as f64 / self.valid_r2 as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Pairing {
    pub candidates_r1: Vec<String>,
    pub candidates_r2: Vec<String>,
    pub pairs: Vec<BoxPair>,
    pub unmatched_r1: Vec<String>,
    pub unmatched_r2: Vec<String>,
}

/// Inner join of two rounds on box id, in round-1 order.
pub fn pair_rounds(r1: &ElectionRound, r2: &ElectionRound, small_area_level: AreaLevel) -> Result<Pairing> {
    let index2: HashMap<&str, usize> = r2.boxes.iter().enumerate().map(|(i, b)| (b.box_id.as_str(), i)).collect();
    let small = r1.small_area_flags(small_area_level, 2);
    let mut pairs = Vec::with_capacity(r1.len().min(r2.len()));
    let mut unmatched_r1 = Vec::new();
    let mut matched2 = vec![false; r2.len()];
    for (b1, &small_area) in r1.boxes.iter().zip(&small) {
        match index2.get(b1.box_id.as_str()) {
            Some(&j) => {
                matched2[j] = true;
                let b2 = &r2.boxes[j];
                pairs.push(BoxPair {
                    box_id: b1.box_id.clone(),
                    small_area,
                    electorate_r1: b1.electorate,
                    valid_r1: b1.valid_votes,
                    votes_r1: b1.votes.clone(),
                    electorate_r2: b2.electorate,
                    valid_r2: b2.valid_votes,
                    votes_r2: b2.votes.clone(),
                });
            }
            None => unmatched_r1.push(b1.box_id.clone()),
        }
    }
    let unmatched_r2: Vec<String> = r2
        .boxes
        .iter()
        .zip(&matched2)
        .filter(|(_, &m)| !m)
        .map(|(b, _)| b.box_id.clone())
        .collect();

    let total = r1.len().max(r2.len());
    if total > 0 && pairs.len() * 2 < total {
        return Err(Error::PoorMatch {
            matched: pairs.len(),
            total,
        });
    }
    if !unmatched_r1.is_empty() || !unmatched_r2.is_empty() {
        log::info!(
            "pairing: {} boxes only in round 1, {} only in round 2",
            unmatched_r1.len(),
            unmatched_r2.len()
        );
    }
    Ok(Pairing {
        candidates_r1: r1.candidates.clone(),
        candidates_r2: r2.candidates.clone(),
        pairs,
        unmatched_r1,
        unmatched_r2,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaFormula {
    /// Difference of vote shares.
    #[default]
    Share,
    /// Votes divided by turnout in each round, `V2/t2 - V1/t1`.
    Literal,
}

fn candidate_position(roster: &[String], name: &str) -> Result<usize> {
    roster
        .iter()
        .position(|c| c == name)
        .ok_or_else(|| Error::UnknownCandidate(name.to_string()))
}

/// Per-pair vote shift of `candidate_r2` against the combined round-1 result
/// of `pro_r1`.
pub fn compute_deltas(pairing: &Pairing, pro_r1: &[&str], candidate_r2: &str, formula: DeltaFormula) -> Result<Vec<f64>> {
    let pro: Vec<usize> = pro_r1
        .iter()
        .map(|c| candidate_position(&pairing.candidates_r1, c))
        .collect::<Result<_>>()?;
    let c2 = candidate_position(&pairing.candidates_r2, candidate_r2)?;
    Ok(pairing
        .pairs
        .iter()
        .map(|p| match formula {
            DeltaFormula::Share => p.share_r2(c2) - pro.iter().map(|&c| p.share_r1(c)).sum::<f64>(),
            DeltaFormula::Literal => {
                let t1 = p.valid_r1 as f64 / p.electorate_r1 as f64;
                let t2 = p.valid_r2 as f64 / p.electorate_r2 as f64;
                let v1: u64 = pro.iter().map(|&c| p.votes_r1[c]).sum();
                p.votes_r2[c2] as f64 / t2 - v1 as f64 / t1
            }
        })
        .collect())
}

/// Mode of the shift distribution from a Gaussian KDE with Silverman bandwidth.
pub fn estimate_mode(deltas: &[f64]) -> Result<f64> {
    if deltas.len() < MIN_DELTAS_FOR_MODE {
        return Err(Error::InsufficientData {
            needed: MIN_DELTAS_FOR_MODE,
            got: deltas.len(),
        });
    }
    GaussianKde::new(deltas)
        .mode()
        .ok_or(Error::InsufficientData { needed: 1, got: 0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Plus,
    Minus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    /// Share of the bin's boxes lying in small areas; absent for empty bins.
    pub small_area_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VoteShiftReport {
    pub candidate: String,
    pub n_pairs: usize,
    #[serde(skip)]
    pub deltas: Vec<f64>,
    pub mode_hat: f64,
    #[serde(skip)]
    pub b_plus: Vec<usize>,
    #[serde(skip)]
    pub b_minus: Vec<usize>,
    pub n_plus: usize,
    pub n_minus: usize,
    pub n_at_mode: usize,
    pub mean_abs_dev_plus: Option<f64>,
    pub mean_abs_dev_minus: Option<f64>,
    /// Side whose deviations were replaced.
    pub replaced_side: Side,
    pub actual_total: f64,
    pub expected_total: f64,
    pub excess_votes: f64,
    /// SD of the replicate totals.
    pub excess_sd: f64,
    /// Monte Carlo standard error of `excess_votes`, `excess_sd / sqrt(R)`.
    pub excess_se: f64,
    /// Excess votes as a fraction of all round-2 valid votes.
    pub excess_pct: f64,
    pub n_replicates: usize,
    pub histogram: Vec<HistBin>,
    pub diagnostics: Vec<String>,
}

/// Symmetrize the shift distribution around `mode_hat` and estimate excess
/// votes for `candidate_r2`. `deltas` must be aligned with `pairing.pairs`.
pub fn symmetrize_and_excess(
    deltas: &[f64],
    pairing: &Pairing,
    candidate_r2: &str,
    mode_hat: f64,
    replicates: usize,
    seed: u64,
) -> Result<VoteShiftReport> {
    if replicates == 0 {
        return Err(Error::InvalidConfig("need at least one replicate".into()));
    }
    if deltas.len() != pairing.pairs.len() {
        return Err(Error::InvalidConfig(format!(
            "{} deltas for {} pairs",
            deltas.len(),
            pairing.pairs.len()
        )));
    }
    let c2 = candidate_position(&pairing.candidates_r2, candidate_r2)?;
    let mut diagnostics = Vec::new();

    let dev: Vec<f64> = deltas.iter().map(|d| d - mode_hat).collect();
    let b_plus: Vec<usize> = (0..dev.len()).filter(|&i| dev[i] > 0.0).collect();
    let b_minus: Vec<usize> = (0..dev.len()).filter(|&i| dev[i] < 0.0).collect();
    let mean_abs = |set: &[usize]| {
        let v: Vec<f64> = set.iter().map(|&i| dev[i].abs()).collect();
        stats::mean(&v)
    };
    let (mad_plus, mad_minus) = (mean_abs(&b_plus), mean_abs(&b_minus));
    let replaced_side = match (mad_plus, mad_minus) {
        (Some(p), Some(m)) if m > p => Side::Minus,
        (None, Some(_)) => Side::Minus,
        _ => Side::Plus,
    };
    let (heavy, light) = match replaced_side {
        Side::Plus => (&b_plus, &b_minus),
        Side::Minus => (&b_minus, &b_plus),
    };
    if light.is_empty() && !heavy.is_empty() {
        diagnostics.push(format!(
            "no deviations on the {} side; replaced deviations with zero",
            if replaced_side == Side::Plus { "minus" } else { "plus" }
        ));
    }

    let valid: Vec<f64> = pairing.pairs.iter().map(|p| p.valid_r2 as f64).collect();
    let actual_total: f64 = pairing.pairs.iter().map(|p| p.votes_r2[c2] as f64).sum();
    let heavy_sum: f64 = heavy.iter().map(|&i| valid[i] * dev[i]).sum();
    let light_dev: Vec<f64> = light.iter().map(|&j| dev[j]).collect();

    // Each replicate: total with heavy-side deviations replaced.
    let totals: Vec<f64> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, streams::SYMMETRIZE, r as u64);
            let replaced: f64 = if light_dev.is_empty() {
                0.0
            } else {
                heavy
                    .iter()
                    .map(|&i| valid[i] * -light_dev[rng.random_range(0..light_dev.len())])
                    .sum()
            };
            actual_total - heavy_sum + replaced
        })
        .collect();

    let expected_total = stats::mean(&totals).expect("replicates > 0");
    let excess_sd = stats::sample_sd(&totals).unwrap_or(0.0);
    let excess_votes = actual_total - expected_total;
    let total_valid: f64 = valid.iter().sum();
    Ok(VoteShiftReport {
        candidate: candidate_r2.to_string(),
        n_pairs: deltas.len(),
        deltas: deltas.to_vec(),
        mode_hat,
        n_plus: b_plus.len(),
        n_minus: b_minus.len(),
        n_at_mode: deltas.len() - b_plus.len() - b_minus.len(),
        b_plus,
        b_minus,
        mean_abs_dev_plus: mad_plus,
        mean_abs_dev_minus: mad_minus,
        replaced_side,
        actual_total,
        expected_total,
        excess_votes,
        excess_sd,
        excess_se: excess_sd / (replicates as f64).sqrt(),
        excess_pct: if total_valid > 0.0 { excess_votes / total_valid } else { 0.0 },
        n_replicates: replicates,
        histogram: Vec::new(),
        diagnostics,
    })
}

/// Histogram of shifts with `n_bins` equal bins between the 1st and 99th
/// percentiles and one merged bin for each tail beyond them, each bin
/// annotated with the fraction of its boxes in small areas.
pub fn shift_histogram(deltas: &[f64], small_area: &[bool], n_bins: usize) -> Vec<HistBin> {
    if deltas.is_empty() || n_bins == 0 {
        return Vec::new();
    }
    let sorted = stats::sorted(deltas);
    let lo = stats::nearest_rank_sorted(&sorted, 1.0).expect("non-empty");
    let hi = stats::nearest_rank_sorted(&sorted, 99.0).expect("non-empty");
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    let central = if hi > lo { n_bins } else { 1 };

    let mut edges = vec![(min, lo)];
    for k in 0..central {
        let a = lo + (hi - lo) * k as f64 / central as f64;
        let b = if k + 1 == central { hi } else { lo + (hi - lo) * (k + 1) as f64 / central as f64 };
        edges.push((a, b));
    }
    edges.push((hi, max));

    let mut counts = vec![0usize; edges.len()];
    let mut small = vec![0usize; edges.len()];
    for (&d, &s) in deltas.iter().zip(small_area) {
        let bin = if d < lo {
            0
        } else if d > hi {
            edges.len() - 1
        } else if hi > lo {
            1 + (((d - lo) / (hi - lo) * central as f64).floor() as usize).min(central - 1)
        } else {
            1
        };
        counts[bin] += 1;
        small[bin] += s as usize;
    }
    edges
        .into_iter()
        .zip(counts.into_iter().zip(small))
        .map(|((low, high), (count, s))| HistBin {
            low,
            high,
            count,
            small_area_fraction: (count > 0).then(|| s as f64 / count as f64),
        })
        .collect()
}

pub fn write_histogram_csv(bins: &[HistBin], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "bin_low,bin_high,count,small_area_fraction").map_err(io)?;
    for b in bins {
        let frac = b.small_area_fraction.map(|f| f.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{}", b.low, b.high, b.count, frac).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VoteShiftConfig {
    pub pro_r1: Vec<String>,
    pub candidate_r2: String,
    pub formula: DeltaFormula,
    pub replicates: usize,
    pub histogram_bins: usize,
    pub small_area_level: AreaLevel,
    pub seed: u64,
}

impl VoteShiftConfig {
    pub fn new(pro_r1: Vec<String>, candidate_r2: impl Into<String>) -> Self {
        VoteShiftConfig {
            pro_r1,
            candidate_r2: candidate_r2.into(),
            formula: DeltaFormula::Share,
            replicates: DEFAULT_REPLICATES,
            histogram_bins: 50,
            small_area_level: AreaLevel::County,
            seed: 0x5EED,
        }
    }
}

/// Full test: pair, compute shifts, find the mode, symmetrize, histogram.
pub fn analyze(r1: &ElectionRound, r2: &ElectionRound, config: &VoteShiftConfig) -> Result<VoteShiftReport> {
    let pairing = pair_rounds(r1, r2, config.small_area_level)?;
    let pro: Vec<&str> = config.pro_r1.iter().map(String::as_str).collect();
    let deltas = compute_deltas(&pairing, &pro, &config.candidate_r2, config.formula)?;
    let mode = estimate_mode(&deltas)?;
    let mut report = symmetrize_and_excess(&deltas, &pairing, &config.candidate_r2, mode, config.replicates, config.seed)?;
    let small: Vec<bool> = pairing.pairs.iter().map(|p| p.small_area).collect();
    report.histogram = shift_histogram(&deltas, &small, config.histogram_bins);
    if !pairing.unmatched_r1.is_empty() || !pairing.unmatched_r2.is_empty() {
        report.diagnostics.push(format!(
            "{} round-1 and {} round-2 boxes had no counterpart",
            pairing.unmatched_r1.len(),
            pairing.unmatched_r2.len()
        ));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::BallotBox;

    fn bx(id: &str, county: &str, valid: u64, votes: Vec<u64>) -> BallotBox {
        BallotBox {
            box_id: id.into(),
            province_id: "P".into(),
            district_id: "D".into(),
            county_id: county.into(),
            electorate: valid * 2,
            valid_votes: valid,
            votes,
        }
    }

    fn rounds(r1: Vec<BallotBox>, r2: Vec<BallotBox>) -> (ElectionRound, ElectionRound) {
        (
            ElectionRound::from_boxes("r1", vec!["E".into(), "O".into(), "K".into()], r1).unwrap(),
            ElectionRound::from_boxes("r2", vec!["E".into(), "K".into()], r2).unwrap(),
        )
    }

    #[test]
    fn share_delta_examples() {
        let (r1, r2) = rounds(
            vec![bx("a", "c", 100, vec![40, 5, 55]), bx("b", "c", 100, vec![20, 0, 80])],
            vec![bx("a", "c", 100, vec![45, 55]), bx("b", "c", 100, vec![90, 10])],
        );
        let pairing = pair_rounds(&r1, &r2, AreaLevel::County).unwrap();
        let d = compute_deltas(&pairing, &["E", "O"], "E", DeltaFormula::Share).unwrap();
        assert!(d[0].abs() < 1e-15);
        assert!((d[1] - 0.7).abs() < 1e-15);
        // votes / turnout = votes * electorate / valid = 2 * votes here
        let lit = compute_deltas(&pairing, &["E", "O"], "E", DeltaFormula::Literal).unwrap();
        assert_eq!(lit, vec![0.0, 140.0]);
        assert!(compute_deltas(&pairing, &["X"], "E", DeltaFormula::Share).is_err());
    }

    #[test]
    fn pairing_reports_unmatched_and_rejects_mismatched_files() {
        let r1: Vec<BallotBox> = (0..4).map(|i| bx(&format!("b{i}"), "c", 100, vec![40, 5, 55])).collect();
        let r2: Vec<BallotBox> = (0..3).map(|i| bx(&format!("b{i}"), "c", 100, vec![50, 50])).collect();
        let (a, b) = rounds(r1.clone(), r2);
        let p = pair_rounds(&a, &b, AreaLevel::County).unwrap();
        assert_eq!(p.pairs.len(), 3);
        assert_eq!(p.unmatched_r1, vec!["b3"]);
        assert!(p.pairs.iter().all(|q| !q.small_area));

        let other: Vec<BallotBox> = (0..4).map(|i| bx(&format!("x{i}"), "c", 100, vec![50, 50])).collect();
        let (a, b) = rounds(r1, other);
        assert!(matches!(pair_rounds(&a, &b, AreaLevel::County), Err(Error::PoorMatch { matched: 0, total: 4 })));
    }

    #[test]
    fn mode_needs_enough_deltas() {
        assert!(matches!(estimate_mode(&[0.1; 99]), Err(Error::InsufficientData { .. })));
        assert_eq!(estimate_mode(&[0.03; 100]).unwrap(), 0.03);
    }

    fn synthetic_pairing(deltas: &[f64], valid: u64) -> Pairing {
        Pairing {
            candidates_r1: vec!["E".into(), "K".into()],
            candidates_r2: vec!["E".into(), "K".into()],
            pairs: deltas
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let v1 = 0.5;
                    let e2 = ((v1 + d) * valid as f64).round() as u64;
                    BoxPair {
                        box_id: format!("b{i}"),
                        small_area: i % 3 == 0,
                        electorate_r1: valid * 2,
                        valid_r1: valid,
                        votes_r1: vec![valid / 2, valid - valid / 2],
                        electorate_r2: valid * 2,
                        valid_r2: valid,
                        votes_r2: vec![e2, valid - e2],
                    }
                })
                .collect(),
            unmatched_r1: vec![],
            unmatched_r2: vec![],
        }
    }

    #[test]
    fn symmetric_deltas_have_no_excess() {
        let mut deltas = vec![0.0];
        for k in 1..=200 {
            let d = 0.2 * (k as f64 / 200.0).powi(2);
            deltas.push(d);
            deltas.push(-d);
        }
        let pairing = synthetic_pairing(&deltas, 1000);
        let mode = estimate_mode(&deltas).unwrap();
        assert!(mode.abs() < 1e-6, "{mode}");
        let rep = symmetrize_and_excess(&deltas, &pairing, "E", mode, 200, 3).unwrap();
        assert_eq!(rep.n_plus + rep.n_minus + rep.n_at_mode, deltas.len());
        assert_eq!(rep.n_plus.min(rep.n_minus), 200);
        assert!(rep.excess_votes.abs() <= 2.0 * rep.excess_sd, "{} vs {}", rep.excess_votes, rep.excess_sd);
    }

    #[test]
    fn one_sided_deviations_fall_back_to_zero() {
        let deltas: Vec<f64> = (0..150).map(|k| k as f64 * 0.001).collect();
        let pairing = synthetic_pairing(&deltas, 1000);
        let rep = symmetrize_and_excess(&deltas, &pairing, "E", 0.0, 10, 1).unwrap();
        assert_eq!(rep.n_minus, 0);
        assert_eq!(rep.replaced_side, Side::Plus);
        assert_eq!(rep.diagnostics.len(), 1);
        let expected: f64 = deltas.iter().map(|d| d * 1000.0).sum();
        assert!((rep.excess_votes - expected).abs() < 1e-6);
        assert_eq!(rep.excess_sd, 0.0);
    }

    #[test]
    fn histogram_merges_tails_and_flags_empty_bins() {
        let deltas: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        let small = vec![true; 1000];
        let h = shift_histogram(&deltas, &small, 10);
        assert_eq!(h.len(), 12);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 1000);
        assert_eq!(h[0].count, 9);
        assert_eq!(h[11].count, 10);
        assert!(h.iter().all(|b| b.small_area_fraction == Some(1.0)));

        let mut gap = deltas.clone();
        gap.retain(|d| !(0.3..0.45).contains(d));
        let h = shift_histogram(&gap, &small[..gap.len()], 10);
        assert!(h.iter().any(|b| b.count == 0 && b.small_area_fraction.is_none()));
    }
}
