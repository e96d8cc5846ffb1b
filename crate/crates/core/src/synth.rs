//! Generative election model.
//!
//! A fair election draws each box's turnout and incumbent share from
//! truncated Gaussians around county-specific means. Fraud is layered on
//! top:
//!
//! * incremental stuffing (probability `f`): a fraction `x^alpha` of the
//!   box's non-voters, `x ~ U[0, 1]`, is added to the valid votes and the
//!   incumbent's tally;
//! * extreme stuffing (probability `f_e`): as above with the fraction drawn
//!   from `U[0.9, 1]`;
//! * coercion: boxes in the lowest size percentile get additive boosts to
//!   turnout and incumbent share before votes are counted.
//!
//! The same box-level mechanics back the model fingerprints of the stuffing
//! fit, see [`crate::stuffing`].

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{AreaLevel, BallotBox, ElectionRound};
use crate::rng::{stream_rng, streams};
use crate::stats;

const MAX_REJECTIONS: usize = 100;
pub(crate) const EXTREME_RANGE: (f64, f64) = (0.9, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub sd: f64,
}

/// Parameters of the log of the electorate size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalParams {
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoercionSpec {
    /// Boxes at or below this electorate percentile (nearest rank) are coerced.
    pub affected_percentile: f64,
    pub turnout_boost: f64,
    pub share_boost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_boxes: usize,
    pub electorate: LogNormalParams,
    pub fair_turnout: Gaussian,
    pub fair_share: Gaussian,
    /// SD of the per-county offsets added to both means.
    pub county_sd: f64,
    pub counties_per_province: usize,
    pub boxes_per_county: usize,
    /// Fraction of counties holding only one or two boxes.
    pub small_county_fraction: f64,
    pub stuffing_fraction: f64,
    pub stuffing_intensity: f64,
    pub extreme_fraction: f64,
    pub coercion: Option<CoercionSpec>,
    pub incumbent: String,
    pub challenger: String,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_boxes: 10_000,
            electorate: LogNormalParams { mu: 5.6, sigma: 0.45 },
            fair_turnout: Gaussian { mean: 0.85, sd: 0.08 },
            fair_share: Gaussian { mean: 0.5, sd: 0.12 },
            county_sd: 0.05,
            counties_per_province: 50,
            boxes_per_county: 8,
            small_county_fraction: 0.3,
            stuffing_fraction: 0.0,
            stuffing_intensity: 2.0,
            extreme_fraction: 0.0,
            coercion: None,
            incumbent: "E".into(),
            challenger: "K".into(),
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SynthSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.n_boxes == 0 {
            return bad("n_boxes must be positive".into());
        }
        for (name, sd) in [
            ("electorate.sigma", self.electorate.sigma),
            ("fair_turnout.sd", self.fair_turnout.sd),
            ("fair_share.sd", self.fair_share.sd),
        ] {
            if !(sd > 0.0 && sd.is_finite()) {
                return bad(format!("{name} must be positive, got {sd}"));
            }
        }
        if !(self.county_sd >= 0.0) {
            return bad(format!("county_sd must be non-negative, got {}", self.county_sd));
        }
        if self.counties_per_province == 0 || self.boxes_per_county == 0 {
            return bad("counties_per_province and boxes_per_county must be positive".into());
        }
        for (name, p) in [
            ("stuffing_fraction", self.stuffing_fraction),
            ("extreme_fraction", self.extreme_fraction),
            ("small_county_fraction", self.small_county_fraction),
        ] {
            if !unit(p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.stuffing_fraction + self.extreme_fraction > 1.0 {
            return bad("stuffing_fraction + extreme_fraction exceeds 1".into());
        }
        if !(self.stuffing_intensity >= 0.0 && self.stuffing_intensity.is_finite()) {
            return bad(format!("stuffing_intensity must be non-negative, got {}", self.stuffing_intensity));
        }
        if let Some(c) = &self.coercion {
            if !(c.affected_percentile > 0.0 && c.affected_percentile <= 100.0) {
                return bad(format!("coercion percentile must lie in (0, 100], got {}", c.affected_percentile));
            }
        }
        if self.incumbent == self.challenger {
            return bad("incumbent and challenger need distinct labels".into());
        }
        Ok(())
    }
}

/// Fair-model parameters: within-county Gaussians plus the SD of the
/// county-level mean offsets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairParams {
    pub turnout: Gaussian,
    pub share: Gaussian,
    #[serde(default)]
    pub turnout_county_sd: f64,
    #[serde(default)]
    pub share_county_sd: f64,
}

/// Which kind of stuffing, if any, a box received.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StuffKind {
    None,
    Incremental,
    Extreme,
}

/// Uniform draws deciding a box's fraud; shared between the generator and
/// the model fingerprints so both realize fraud identically.
#[derive(Debug, Clone, Copy)]
pub(crate) struct FraudDraw {
    /// Selects the fraud kind: `< f` incremental, `>= 1 - f_e` extreme.
    pub u: f64,
    pub x: f64,
    pub y: f64,
}

impl FraudDraw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        FraudDraw {
            u: rng.random(),
            x: rng.random(),
            y: rng.random_range(EXTREME_RANGE.0..=EXTREME_RANGE.1),
        }
    }

    pub fn kind(&self, f: f64, f_e: f64) -> StuffKind {
        if self.u < f {
            StuffKind::Incremental
        } else if f_e > 0.0 && self.u >= 1.0 - f_e {
            StuffKind::Extreme
        } else {
            StuffKind::None
        }
    }

    /// Fraction of non-voters turned into incumbent votes.
    pub fn fraction(&self, kind: StuffKind, alpha: f64) -> f64 {
        match kind {
            StuffKind::None => 0.0,
            StuffKind::Incremental => self.x.powf(alpha),
            StuffKind::Extreme => self.y,
        }
    }
}

/// Gaussian draw restricted to `[0, 1]` by rejection; after
/// `MAX_REJECTIONS` failures the last draw is clamped. Returns the value and
/// whether clamping was needed.
pub(crate) fn truncated_unit_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64) -> (f64, bool) {
    let mut x = mean;
    for _ in 0..MAX_REJECTIONS {
        let z: f64 = StandardNormal.sample(rng);
        x = mean + sd * z;
        if (0.0..=1.0).contains(&x) {
            return (x, false);
        }
    }
    (x.clamp(0.0, 1.0), true)
}

/// Valid votes and incumbent votes for a box with the given fair turnout and
/// share, after converting `stuffed` of its non-voters into incumbent votes.
#[inline]
pub(crate) fn realize_counts(electorate: u64, turnout: f64, share: f64, stuffed: f64) -> (u64, u64) {
    let valid = ((turnout * electorate as f64).round() as u64).clamp(1.min(electorate), electorate);
    let incumbent = ((share * valid as f64).round() as u64).min(valid);
    let extra = ((stuffed * (electorate - valid) as f64).round() as u64).min(electorate - valid);
    (valid + extra, incumbent + extra)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BoxTruth {
    pub stuffing: StuffKind,
    pub coerced: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SynthDiagnostics {
    /// Truncated-Gaussian draws that fell back to clamping.
    pub truncation_clamps: usize,
    /// Coerced boxes whose boosted turnout or share hit 0 or 1.
    pub boost_clamps: usize,
    pub coerced_boxes: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub round: ElectionRound,
    /// Ground truth per box, aligned with `round.boxes`.
    pub truth: Vec<BoxTruth>,
    pub diagnostics: SynthDiagnostics,
}

/// County sizes covering exactly `n` boxes.
fn county_layout(spec: &SynthSpec) -> Vec<usize> {
    let mut rng = stream_rng(spec.seed, streams::LAYOUT, 0);
    let mut sizes = Vec::new();
    let mut placed = 0;
    while placed < spec.n_boxes {
        let small = rng.random::<f64>() < spec.small_county_fraction;
        let size = if small { rng.random_range(1..=2) } else { spec.boxes_per_county };
        let size = size.min(spec.n_boxes - placed);
        sizes.push(size);
        placed += size;
    }
    sizes
}

pub fn generate(spec: &SynthSpec) -> Result<Synthetic> {
    spec.validate()?;
    let n = spec.n_boxes;
    let mut diag = SynthDiagnostics::default();

    let mut rng_e = stream_rng(spec.seed, streams::ELECTORATE, 0);
    let lognormal = LogNormal::new(spec.electorate.mu, spec.electorate.sigma)
        .map_err(|e| Error::InvalidConfig(format!("electorate distribution: {e}")))?;
    let electorates: Vec<u64> = (0..n).map(|_| (lognormal.sample(&mut rng_e).round() as u64).max(1)).collect();

    let coercion_cutoff = spec.coercion.map(|c| {
        let mut sorted = electorates.clone();
        sorted.sort_unstable();
        stats::nearest_rank_sorted(&sorted, c.affected_percentile).unwrap_or(0)
    });

    let layout = county_layout(spec);
    let mut rng_c = stream_rng(spec.seed, streams::COUNTY, 0);
    let offsets: Vec<(f64, f64)> = layout
        .iter()
        .map(|_| {
            let zt: f64 = StandardNormal.sample(&mut rng_c);
            let zv: f64 = StandardNormal.sample(&mut rng_c);
            (spec.county_sd * zt, spec.county_sd * zv)
        })
        .collect();

    let mut rng = stream_rng(spec.seed, streams::BOX, 0);
    let mut boxes = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    let mut i = 0;
    for (county, (&size, &(off_t, off_v))) in layout.iter().zip(&offsets).enumerate() {
        let province = county / spec.counties_per_province;
        for _ in 0..size {
            let electorate = electorates[i];
            let (mut t, ct) = truncated_unit_normal(&mut rng, spec.fair_turnout.mean + off_t, spec.fair_turnout.sd);
            let (mut v, cv) = truncated_unit_normal(&mut rng, spec.fair_share.mean + off_v, spec.fair_share.sd);
            diag.truncation_clamps += ct as usize + cv as usize;
            let fraud = FraudDraw::sample(&mut rng);

            let coerced = matches!(coercion_cutoff, Some(cut) if electorate <= cut);
            if coerced {
                let c = spec.coercion.as_ref().expect("cutoff implies coercion");
                let (bt, bv) = (t + c.turnout_boost, v + c.share_boost);
                if !(0.0..=1.0).contains(&bt) || !(0.0..=1.0).contains(&bv) {
                    diag.boost_clamps += 1;
                }
                t = bt.clamp(0.0, 1.0);
                v = bv.clamp(0.0, 1.0);
                diag.coerced_boxes += 1;
            }

            let kind = fraud.kind(spec.stuffing_fraction, spec.extreme_fraction);
            let (valid, inc) = realize_counts(electorate, t, v, fraud.fraction(kind, spec.stuffing_intensity));
            boxes.push(BallotBox {
                box_id: format!("B{:07}", i + 1),
                province_id: format!("P{:03}", province + 1),
                district_id: format!("D{:03}", province + 1),
                county_id: format!("C{:06}", county + 1),
                electorate,
                valid_votes: valid,
                votes: vec![inc, valid - inc],
            });
            truth.push(BoxTruth { stuffing: kind, coerced });
            i += 1;
        }
    }

    if diag.coerced_boxes > 0 && diag.boost_clamps * 2 > diag.coerced_boxes {
        diag.warnings.push(format!(
            "coercion boosts were clamped for {} of {} coerced boxes",
            diag.boost_clamps, diag.coerced_boxes
        ));
    }
    if diag.truncation_clamps * 2 > n {
        diag.warnings.push(format!(
            "{} truncated-Gaussian draws needed clamping; fair parameters put most mass outside [0, 1]",
            diag.truncation_clamps
        ));
    }
    for w in &diag.warnings {
        log::warn!("synth: {w}");
    }

    let round = ElectionRound::from_boxes(
        format!("synthetic-{}", spec.seed),
        vec![spec.incumbent.clone(), spec.challenger.clone()],
        boxes,
    )?;
    debug_assert_eq!(round.len(), n);
    Ok(Synthetic {
        round,
        truth,
        diagnostics: diag,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    Laplace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Noise {
    pub kind: NoiseKind,
    /// SD for Gaussian noise, scale `b` for Laplace noise.
    pub scale: f64,
}

impl Noise {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.kind {
            NoiseKind::Gaussian => {
                let z: f64 = StandardNormal.sample(rng);
                self.scale * z
            }
            NoiseKind::Laplace => {
                let u: f64 = rng.random::<f64>() - 0.5;
                -self.scale * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
            }
        }
    }
}

/// How a synthetic second round departs from the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSpec {
    /// Shift of the incumbent share common to all boxes.
    pub base_shift: f64,
    /// Box-level noise around the common shift. Observed vote shifts are
    /// sharply peaked, so the default is Laplace.
    pub noise: Noise,
    /// Probability that an eligible box receives the extra skew.
    pub skew_fraction: f64,
    pub skew_magnitude: f64,
    /// Only boxes in areas with at most two boxes can be skewed.
    pub small_area_only: bool,
    pub small_area_level: AreaLevel,
    pub seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            base_shift: 0.02,
            noise: Noise {
                kind: NoiseKind::Laplace,
                scale: 0.02,
            },
            skew_fraction: 0.0,
            skew_magnitude: 0.0,
            small_area_only: false,
            small_area_level: AreaLevel::County,
            seed: 1,
        }
    }
}

impl ShiftSpec {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct Round2 {
    pub round: ElectionRound,
    pub skewed_box_ids: Vec<String>,
    /// Sum over skewed boxes of `skew_magnitude * valid_votes`.
    pub ground_truth_excess: f64,
    /// Incumbent votes actually added by the skew after rounding.
    pub realized_excess: u64,
}

/// Build a paired second round from a generated first round. Electorates and
/// valid votes are kept; the incumbent share moves by the common shift plus
/// noise, and skewed boxes get `skew_magnitude` on top. A box is only eligible
/// for skew if the skewed share stays at or below one.
pub fn inject_round2(round1: &ElectionRound, incumbent: &str, spec: &ShiftSpec) -> Result<Round2> {
    let inc = round1.candidate_index(incumbent)?;
    let other = (0..round1.candidates.len()).find(|&c| c != inc);
    let small = round1.small_area_flags(spec.small_area_level, 2);
    let mut rng = stream_rng(spec.seed, streams::ROUND2, 0);

    let mut boxes = Vec::with_capacity(round1.len());
    let mut skewed_box_ids = Vec::new();
    let mut ground_truth_excess = 0.0;
    let mut realized_excess = 0;
    for (b, &is_small) in round1.boxes.iter().zip(&small) {
        let noise = spec.noise.sample(&mut rng);
        let u: f64 = rng.random();
        let valid = b.valid_votes;
        let share = (b.share(inc) + spec.base_shift + noise).clamp(0.0, 1.0);
        let base_votes = ((share * valid as f64).round() as u64).min(valid);
        let eligible = (!spec.small_area_only || is_small) && share + spec.skew_magnitude <= 1.0;
        let mut votes_inc = base_votes;
        if eligible && u < spec.skew_fraction {
            votes_inc = (base_votes + (spec.skew_magnitude * valid as f64).round() as u64).min(valid);
            realized_excess += votes_inc - base_votes;
            ground_truth_excess += spec.skew_magnitude * valid as f64;
            skewed_box_ids.push(b.box_id.clone());
        }
        let mut votes = vec![0; round1.candidates.len()];
        votes[inc] = votes_inc;
        if let Some(o) = other {
            votes[o] = valid - votes_inc;
        }
        boxes.push(BallotBox { votes, ..b.clone() });
    }

    let round = ElectionRound::from_boxes(format!("{}-round2", round1.round_label), round1.candidates.clone(), boxes)?;
    Ok(Round2 {
        round,
        skewed_box_ids,
        ground_truth_excess,
        realized_excess,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> SynthSpec {
        SynthSpec {
            n_boxes: n,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate(&spec(2000)).unwrap();
        let b = generate(&spec(2000)).unwrap();
        assert_eq!(a.round, b.round);
        let c = generate(&SynthSpec { seed: 2, ..spec(2000) }).unwrap();
        assert_ne!(a.round, c.round);
    }

    #[test]
    fn full_stuffing_with_zero_intensity_saturates_turnout() {
        let s = SynthSpec {
            stuffing_fraction: 1.0,
            stuffing_intensity: 0.0,
            ..spec(3000)
        };
        let syn = generate(&s).unwrap();
        assert!(syn.round.boxes.iter().all(|b| b.valid_votes == b.electorate));
    }

    #[test]
    fn counts_realized_within_bounds() {
        assert_eq!(realize_counts(100, 0.8, 0.5, 0.0), (80, 40));
        assert_eq!(realize_counts(100, 0.8, 0.5, 1.0), (100, 60));
        assert_eq!(realize_counts(100, 0.8, 0.5, 0.5), (90, 50));
        // turnout rounding to zero still leaves one valid vote
        assert_eq!(realize_counts(10, 0.01, 1.0, 0.0), (1, 1));
    }

    #[test]
    fn rejects_invalid_specs() {
        for bad in [
            SynthSpec { stuffing_fraction: 0.7, extreme_fraction: 0.4, ..spec(10) },
            SynthSpec { n_boxes: 0, ..spec(10) },
            SynthSpec { fair_share: Gaussian { mean: 0.5, sd: 0.0 }, ..spec(10) },
            SynthSpec { stuffing_fraction: 1.5, ..spec(10) },
        ] {
            assert!(matches!(generate(&bad), Err(Error::InvalidConfig(_))), "{bad:?}");
        }
    }

    #[test]
    fn spec_json_defaults_fill_in() {
        let s: SynthSpec = serde_json::from_str(r#"{"n_boxes": 123, "stuffing_fraction": 0.1}"#).unwrap();
        assert_eq!(s.n_boxes, 123);
        assert_eq!(s.stuffing_intensity, 2.0);
        assert!(serde_json::from_str::<SynthSpec>(r#"{"n_boxe": 1}"#).is_err());
    }

    #[test]
    fn coercion_hits_lowest_percentile() {
        let s = SynthSpec {
            coercion: Some(CoercionSpec {
                affected_percentile: 10.0,
                turnout_boost: 0.1,
                share_boost: 0.1,
            }),
            ..spec(5000)
        };
        let syn = generate(&s).unwrap();
        let mut sizes: Vec<u64> = syn.round.boxes.iter().map(|b| b.electorate).collect();
        sizes.sort_unstable();
        let cut = sizes[499];
        for (b, t) in syn.round.boxes.iter().zip(&syn.truth) {
            assert_eq!(t.coerced, b.electorate <= cut);
        }
        assert!(syn.diagnostics.coerced_boxes >= 500);
    }

    #[test]
    fn skew_ground_truth_matches_definition() {
        let r1 = generate(&spec(4000)).unwrap().round;
        let shift = ShiftSpec {
            skew_fraction: 0.05,
            skew_magnitude: 0.4,
            ..Default::default()
        };
        let r2 = inject_round2(&r1, "E", &shift).unwrap();
        let expected: f64 = r1
            .boxes
            .iter()
            .filter(|b| r2.skewed_box_ids.contains(&b.box_id))
            .map(|b| 0.4 * b.valid_votes as f64)
            .sum();
        assert!(!r2.skewed_box_ids.is_empty());
        assert!((r2.ground_truth_excess - expected).abs() < 1e-6);
        assert!((r2.realized_excess as f64 - expected).abs() <= 0.5 * r2.skewed_box_ids.len() as f64);
    }

    #[test]
    fn small_area_only_skews_small_counties() {
        let r1 = generate(&spec(4000)).unwrap().round;
        let shift = ShiftSpec {
            skew_fraction: 0.5,
            skew_magnitude: 0.3,
            small_area_only: true,
            ..Default::default()
        };
        let r2 = inject_round2(&r1, "E", &shift).unwrap();
        let counts = r1.boxes_per_area(AreaLevel::County);
        assert!(!r2.skewed_box_ids.is_empty());
        for b in r1.boxes.iter().filter(|b| r2.skewed_box_ids.contains(&b.box_id)) {
            assert!(counts[&b.area_key(AreaLevel::County)] <= 2);
        }
    }

    #[test]
    fn laplace_noise_has_expected_scale() {
        let noise = Noise { kind: NoiseKind::Laplace, scale: 0.02 };
        let mut rng = stream_rng(5, 0, 0);
        let xs: Vec<f64> = (0..20_000).map(|_| noise.sample(&mut rng)).collect();
        // E|X| = b for Laplace(0, b)
        let mean_abs = xs.iter().map(|x| x.abs()).sum::<f64>() / xs.len() as f64;
        assert!((mean_abs - 0.02).abs() < 0.001, "{mean_abs}");
        assert!(stats::mean(&xs).unwrap().abs() < 0.001);
    }
}
