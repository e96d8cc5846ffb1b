//! Voter-rigging test.
//!
//! Boxes are standardized against their local group means (see
//! [`crate::fingerprint::standardize`]). For each size threshold `p` the
//! boxes at or below the `p`-th electorate percentile form the small set and
//! the rest the large set. The displacement `delta(p)` is the Euclidean
//! distance between the two standardized centroids, signed positive when the
//! small set sits toward higher turnout and higher share. An envelope of
//! acceptable displacements comes from trusted reference elections.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fingerprint::standardize;
use crate::ingest::{AreaLevel, ElectionRound};
use crate::stats;
use crate::synth::{Gaussian, LogNormalParams, SynthSpec};

/// Flags at or below this threshold count as the "small units" region.
pub const SMALL_THRESHOLD_LIMIT: u32 = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiggingConfig {
    pub level: AreaLevel,
    pub fallback_parent: bool,
    /// Percentile thresholds, each in 1..=100.
    pub thresholds: Vec<u32>,
    /// Minimum small-set size for `delta(p)` to be reported.
    pub min_small: usize,
}

impl Default for RiggingConfig {
    fn default() -> Self {
        RiggingConfig {
            level: AreaLevel::County,
            fallback_parent: true,
            thresholds: (1..=50).collect(),
            min_small: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bound {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Envelope {
    pub thresholds: Vec<u32>,
    /// Per threshold; absent where no reference had a defined displacement.
    pub bounds: Vec<Option<Bound>>,
    pub source: Vec<String>,
}

impl Envelope {
    pub fn bound_at(&self, p: u32) -> Option<Bound> {
        self.thresholds.iter().position(|&q| q == p).and_then(|i| self.bounds[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiggingProfile {
    pub candidate: String,
    pub level: AreaLevel,
    pub thresholds: Vec<u32>,
    /// Electorate cutoff of each threshold; the small set is `electorate <= cutoff`.
    pub cutoffs: Vec<u64>,
    pub delta: Vec<Option<f64>>,
    pub n_small: Vec<usize>,
    pub n_large: Vec<usize>,
    pub envelope: Option<Envelope>,
    pub outside_envelope: Vec<u32>,
}

impl RiggingProfile {
    pub fn delta_at(&self, p: u32) -> Option<f64> {
        self.thresholds.iter().position(|&q| q == p).and_then(|i| self.delta[i])
    }

    /// Attach an envelope and record the thresholds where `delta(p)` exceeds
    /// its upper bound.
    pub fn with_envelope(mut self, envelope: Envelope) -> Self {
        self.outside_envelope = self
            .thresholds
            .iter()
            .zip(&self.delta)
            .filter_map(|(&p, d)| match (d, envelope.bound_at(p)) {
                (Some(d), Some(b)) if *d > b.upper => Some(p),
                _ => None,
            })
            .collect();
        self.envelope = Some(envelope);
        self
    }
}

pub fn displacement_profile(round: &ElectionRound, candidate: &str, config: &RiggingConfig) -> Result<RiggingProfile> {
    if let Some(&p) = config.thresholds.iter().find(|&&p| p == 0 || p > 100) {
        return Err(Error::InvalidConfig(format!("threshold {p} outside 1..=100")));
    }
    let c = round.candidate_index(candidate)?;
    if round.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if !config.fallback_parent && round.boxes_per_area(config.level).values().all(|&n| n < 2) {
        return Err(Error::DegenerateGroups(format!(
            "every {} holds a single box and parent fallback is off",
            config.level
        )));
    }

    let st = standardize(round, c, config.level, config.fallback_parent);
    // (electorate, box_id, point) for standardized boxes, smallest first
    let mut used: Vec<(u64, &str, [f64; 2])> = round
        .boxes
        .iter()
        .zip(&st.points)
        .filter_map(|(b, p)| p.map(|p| (b.electorate, b.box_id.as_str(), p)))
        .collect();
    used.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let n = used.len();
    if n == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }

    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push([0.0, 0.0]);
    for (_, _, p) in &used {
        let last = prefix[prefix.len() - 1];
        prefix.push([last[0] + p[0], last[1] + p[1]]);
    }
    let total = prefix[n];
    let sizes: Vec<u64> = used.iter().map(|u| u.0).collect();

    let mut profile = RiggingProfile {
        candidate: candidate.to_string(),
        level: config.level,
        thresholds: config.thresholds.clone(),
        cutoffs: Vec::new(),
        delta: Vec::new(),
        n_small: Vec::new(),
        n_large: Vec::new(),
        envelope: None,
        outside_envelope: Vec::new(),
    };
    for &p in &config.thresholds {
        let cutoff = stats::nearest_rank_sorted(&sizes, p as f64).expect("non-empty");
        let k = sizes.partition_point(|&e| e <= cutoff);
        let delta = (k >= config.min_small && k < n).then(|| {
            let small = [prefix[k][0] / k as f64, prefix[k][1] / k as f64];
            let rest = (n - k) as f64;
            let large = [(total[0] - prefix[k][0]) / rest, (total[1] - prefix[k][1]) / rest];
            let (dx, dy) = (small[0] - large[0], small[1] - large[1]);
            let dist = dx.hypot(dy);
            if dx + dy >= 0.0 {
                dist
            } else {
                -dist
            }
        });
        profile.cutoffs.push(cutoff);
        profile.delta.push(delta);
        profile.n_small.push(k);
        profile.n_large.push(n - k);
    }
    Ok(profile)
}

/// Envelope from profiles of reference elections: per threshold the range
/// of reference displacements widened by one SD across references. When all
/// references are non-negative the lower bound is kept at zero or above.
pub fn envelope_from_profiles(profiles: &[RiggingProfile], source: Vec<String>) -> Result<Envelope> {
    if profiles.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "an envelope needs at least two reference elections, got {}",
            profiles.len()
        )));
    }
    let thresholds = profiles[0].thresholds.clone();
    if profiles.iter().any(|p| p.thresholds != thresholds) {
        return Err(Error::InvalidConfig("reference profiles use different thresholds".into()));
    }
    let bounds = (0..thresholds.len())
        .map(|i| {
            let vals: Vec<f64> = profiles.iter().filter_map(|p| p.delta[i]).collect();
            if vals.is_empty() {
                return None;
            }
            let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sd = stats::sample_sd(&vals).unwrap_or(0.0);
            let mut lower = min - sd;
            if min >= 0.0 {
                lower = lower.max(0.0);
            }
            Some(Bound { lower, upper: max + sd })
        })
        .collect();
    Ok(Envelope {
        thresholds,
        bounds,
        source,
    })
}

pub fn build_envelope(references: &[(&ElectionRound, &str)], config: &RiggingConfig) -> Result<Envelope> {
    let profiles = references
        .iter()
        .map(|(r, c)| displacement_profile(r, c, config))
        .collect::<Result<Vec<_>>>()?;
    let source = references.iter().map(|(r, _)| r.round_label.clone()).collect();
    envelope_from_profiles(&profiles, source)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub flagged_thresholds: Vec<u32>,
    /// Every flag lies at or below [`SMALL_THRESHOLD_LIMIT`].
    pub confined_to_small: bool,
    /// At least half of the total exceedance comes from thresholds at or
    /// below [`SMALL_THRESHOLD_LIMIT`].
    pub concentrated_small: bool,
    /// Threshold with the largest `delta(p) - upper(p)`.
    pub peak_threshold: Option<u32>,
    pub summary: String,
}

pub fn verdict(profile: &RiggingProfile) -> Result<Verdict> {
    let env = profile.envelope.as_ref().ok_or(Error::MissingEnvelope)?;
    let flagged = profile.outside_envelope.clone();
    let exceed: Vec<(u32, f64)> = flagged
        .iter()
        .filter_map(|&p| Some((p, profile.delta_at(p)? - env.bound_at(p)?.upper)))
        .collect();
    let total: f64 = exceed.iter().map(|e| e.1).sum();
    let small: f64 = exceed.iter().filter(|e| e.0 <= SMALL_THRESHOLD_LIMIT).map(|e| e.1).sum();
    let peak = exceed.iter().max_by(|a, b| a.1.total_cmp(&b.1)).map(|e| e.0);
    let confined = flagged.iter().all(|&p| p <= SMALL_THRESHOLD_LIMIT);
    let concentrated = !flagged.is_empty() && small >= 0.5 * total;

    let summary = if flagged.is_empty() {
        "displacement inside the acceptable range at every threshold".to_string()
    } else {
        let (lo, hi) = (flagged[0], flagged[flagged.len() - 1]);
        let region = if confined {
            format!("confined to small units (p <= {SMALL_THRESHOLD_LIMIT})")
        } else if concentrated {
            format!("concentrated at small units (p <= {SMALL_THRESHOLD_LIMIT}) but extending beyond")
        } else {
            "spread over large thresholds".to_string()
        };
        format!(
            "displacement above the acceptable range at {} of {} thresholds (p = {lo}..{hi}), {region}",
            flagged.len(),
            profile.thresholds.len()
        )
    };
    Ok(Verdict {
        flagged_thresholds: flagged,
        confined_to_small: confined,
        concentrated_small: concentrated,
        peak_threshold: peak,
        summary,
    })
}

/// Synthetic-fair-election spec mimicking a round's sizes, spreads and area
/// structure, for building reference envelopes when no trusted elections
/// are at hand.
pub fn fair_reference_spec(round: &ElectionRound, candidate: &str, seed: u64) -> Result<SynthSpec> {
    let c = round.candidate_index(candidate)?;
    if round.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: round.len() });
    }
    let logs: Vec<f64> = round.boxes.iter().map(|b| (b.electorate as f64).ln()).collect();
    let per_county = round.boxes_per_area(AreaLevel::County);
    let key_index: std::collections::HashMap<_, usize> =
        per_county.keys().enumerate().map(|(i, k)| (k.clone(), i)).collect();

    // split spread into county-level and within-county parts
    let mut sums = vec![[0.0f64; 2]; per_county.len()];
    let mut ns = vec![0usize; per_county.len()];
    let group: Vec<usize> = round.boxes.iter().map(|b| key_index[&b.area_key(AreaLevel::County)]).collect();
    for (b, &g) in round.boxes.iter().zip(&group) {
        sums[g][0] += b.turnout();
        sums[g][1] += b.share(c);
        ns[g] += 1;
    }
    let means: Vec<[f64; 2]> = sums.iter().zip(&ns).map(|(s, &n)| [s[0] / n as f64, s[1] / n as f64]).collect();
    let multi: Vec<usize> = (0..ns.len()).filter(|&g| ns[g] >= 2).collect();
    let within = |k: usize| -> Vec<f64> {
        round
            .boxes
            .iter()
            .zip(&group)
            .filter(|(_, &g)| ns[g] >= 2)
            .map(|(b, &g)| if k == 0 { b.turnout() } else { b.share(c) } - means[g][k])
            .collect()
    };
    let county_level = |k: usize| -> Vec<f64> { multi.iter().map(|&g| means[g][k]).collect() };
    let all = |k: usize| -> Vec<f64> {
        round.boxes.iter().map(|b| if k == 0 { b.turnout() } else { b.share(c) }).collect()
    };
    let positive = |x: Option<f64>, fallback: f64| x.filter(|v| *v > 0.0).unwrap_or(fallback);

    let t_all = all(0);
    let v_all = all(1);
    let t_sd = positive(stats::scaled_mad(&within(0)), positive(stats::scaled_mad(&t_all), 0.05));
    let v_sd = positive(stats::scaled_mad(&within(1)), positive(stats::scaled_mad(&v_all), 0.05));
    let county_sd = 0.5
        * (stats::scaled_mad(&county_level(0)).unwrap_or(0.0) + stats::scaled_mad(&county_level(1)).unwrap_or(0.0));

    let n_counties = per_county.len().max(1);
    let n_provinces = round.hierarchy_counts.provinces.max(1);
    let small_counties = per_county.values().filter(|&&n| n <= 2).count();
    let mut big: Vec<usize> = per_county.values().copied().filter(|&n| n > 2).collect();
    big.sort_unstable();

    Ok(SynthSpec {
        n_boxes: round.len(),
        electorate: LogNormalParams {
            mu: stats::median(&logs).unwrap_or(5.6),
            sigma: positive(stats::scaled_mad(&logs), 0.4),
        },
        fair_turnout: Gaussian {
            mean: stats::median(&t_all).unwrap_or(0.8),
            sd: t_sd,
        },
        fair_share: Gaussian {
            mean: stats::median(&v_all).unwrap_or(0.5),
            sd: v_sd,
        },
        county_sd,
        counties_per_province: n_counties.div_ceil(n_provinces),
        boxes_per_county: big.get(big.len() / 2).copied().unwrap_or(3),
        small_county_fraction: small_counties as f64 / n_counties as f64,
        incumbent: candidate.to_string(),
        challenger: format!("not-{candidate}"),
        seed,
        ..SynthSpec::default()
    })
}
