//! Ballot-stuffing fit.
//!
//! The observed fingerprint (restricted to boxes with turnout and share above
//! 25%) is compared with fingerprints simulated from the generative model of
//! [`crate::synth`] at a candidate stuffing fraction `f`. The model keeps the
//! county layout of the round: each box draws its turnout and share around a
//! county offset, so the fair part has within-county SDs and county SDs.
//!
//! The fair parameters are robust estimates (median, scaled MAD of
//! within-county deviations, county SD by matching the median standardized
//! county mean). Those estimates are biased once stuffing is present and by
//! truncation, so a small correction map is calibrated by simulation at a few
//! anchor values of `f` and interpolated in between.
//!
//! `f` minimizes the squared L2 distance between the normalized observed
//! fingerprint and the mean of `R` simulated replicates. A coarse profile
//! scan picks a window, a parabola through the window gives a smoothed
//! center, and golden-section plus a fine grid refine around it. The SD of
//! `f` comes from a parametric bootstrap: `K` datasets are simulated at the
//! fitted parameters and refitted.
//!
//! Simulated uniforms are counter based and truncated normals use the
//! inverse CDF, so the objective is smooth in the parameters and moving `f`
//! only re-bins the boxes whose stuffing draw lies between the old and new
//! value.

use std::collections::HashMap;

use statrs::distribution::{ContinuousCDF, Normal};
use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::fingerprint::{bin_index, DEFAULT_RAW_BINS};
use crate::ingest::{AreaKey, AreaLevel, ElectionRound};
use crate::optimize::golden_section;
use crate::rng::{derive_seed, splitmix64, streams};
use crate::stats;
use crate::synth::{realize_counts, FairParams, FraudDraw, Gaussian, StuffKind, EXTREME_RANGE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Restriction {
    pub min_turnout: f64,
    pub min_share: f64,
}

impl Restriction {
    #[inline]
    pub fn admits(&self, turnout: f64, share: f64) -> bool {
        turnout > self.min_turnout && share > self.min_share
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitConfig {
    /// Stuffing intensity exponent, held fixed during the fit.
    pub alpha: f64,
    /// Extreme-stuffing fraction, held fixed (zero disables it).
    pub extreme_fraction: f64,
    pub bins: usize,
    /// Simulated replicates averaged into each model fingerprint.
    pub replicates: usize,
    /// Bootstrap refits for the SD of `f`; zero skips the bootstrap.
    pub bootstrap: usize,
    /// Replicates per profile point inside bootstrap refits.
    pub bootstrap_replicates: usize,
    pub restriction: Restriction,
    pub min_boxes: usize,
    /// Bracket width at which the golden-section search stops.
    pub search_tol: f64,
    /// Step and half-width of the grid refinement around the search result.
    pub grid_step: f64,
    pub grid_halfwidth: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            alpha: 2.0,
            extreme_fraction: 0.0,
            bins: DEFAULT_RAW_BINS,
            replicates: 32,
            bootstrap: 50,
            bootstrap_replicates: 8,
            restriction: Restriction {
                min_turnout: 0.25,
                min_share: 0.25,
            },
            min_boxes: 1000,
            search_tol: 1e-3,
            grid_step: 0.002,
            grid_halfwidth: 0.01,
            seed: 0x5EED,
        }
    }
}

fn finite_or_null<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if x.is_finite() {
        s.serialize_f64(*x)
    } else {
        s.serialize_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StuffingFit {
    pub candidate: String,
    pub f_hat: f64,
    /// Bootstrap SD of `f_hat`; infinite (`null` in JSON) when the objective
    /// was flat and the fit did not converge.
    #[serde(serialize_with = "finite_or_null")]
    pub f_sd: f64,
    pub alpha: f64,
    /// Objective at `f_hat`.
    pub loss: f64,
    pub loss_at_zero: f64,
    pub loss_at_one: f64,
    pub n_boxes_used: usize,
    pub n_boxes_total: usize,
    pub restriction: Restriction,
    pub fair: FairParams,
    /// `f_hat > 2 f_sd`.
    pub significant: bool,
    pub converged: bool,
    pub replicates: usize,
    pub bootstrap_estimates: Vec<f64>,
}

/// Robust estimates of the fair model from restricted boxes.
///
/// The location is the overall median. Deviations from the county mean
/// (rescaled by `sqrt(n / (n - 1))`) give the within-county SD by scaled MAD;
/// the county-offset SD is what remains of the spread of county means after
/// allowing for their sampling noise. Counties with a single box only enter the
/// median. Without any multi-box county the whole spread is within-county.
pub fn estimate_fair(turnouts: &[f64], shares: &[f64], county: &[u32]) -> Result<FairParams> {
    let (t, t_county) = estimate_component(turnouts, county, "turnout")?;
    let (v, v_county) = estimate_component(shares, county, "vote share")?;
    Ok(FairParams {
        turnout: t,
        share: v,
        turnout_county_sd: t_county,
        share_county_sd: v_county,
    })
}

fn estimate_component(xs: &[f64], county: &[u32], what: &str) -> Result<(Gaussian, f64)> {
    let mean = stats::median(xs).ok_or(Error::InsufficientData { needed: 1, got: 0 })?;
    let n_groups = county.iter().max().map_or(0, |&g| g as usize + 1);
    let mut groups = vec![(0.0f64, 0usize); n_groups];
    for (&x, &g) in xs.iter().zip(county) {
        let e = &mut groups[g as usize];
        e.0 += x;
        e.1 += 1;
    }
    let within: Vec<f64> = xs
        .iter()
        .zip(county)
        .filter_map(|(&x, &g)| {
            let (sum, n) = groups[g as usize];
            (n >= 2).then(|| (x - sum / n as f64) * (n as f64 / (n - 1) as f64).sqrt())
        })
        .collect();
    let multi: Vec<(f64, usize)> = groups.iter().filter(|(_, n)| *n >= 2).map(|&(s, n)| (s / n as f64, n)).collect();

    let (sd, county_sd) = if multi.len() >= 2 {
        let sd = stats::scaled_mad(&within).unwrap_or(0.0);
        (sd, county_offset_sd(&multi, mean, sd))
    } else {
        (stats::scaled_mad(xs).unwrap_or(0.0), 0.0)
    };
    if !(sd > 0.0) {
        return Err(Error::Domain(format!("{what} has zero spread; cannot fit a fair model")));
    }
    Ok((Gaussian { mean, sd }, county_sd))
}

/// SD of county offsets from county means `(mean, n)`. A county mean has
/// variance `county_sd^2 + sd^2 / n`; the offset SD is the value at which the
/// standardized absolute deviations have the normal median.
fn county_offset_sd(means: &[(f64, usize)], center: f64, sd: f64) -> f64 {
    const NORMAL_MAD: f64 = 0.674_489_750_196_081_7;
    let excess = |c: f64| {
        let z: Vec<f64> = means.iter().map(|&(m, n)| (m - center).abs() / (c * c + sd * sd / n as f64).sqrt()).collect();
        stats::median(&z).unwrap_or(0.0) - NORMAL_MAD
    };
    if sd <= 0.0 || excess(0.0) <= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while excess(hi) > 0.0 && hi < 1e6 {
        hi *= 2.0;
    }
    while hi - lo > 1e-7 {
        let mid = 0.5 * (lo + hi);
        if excess(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Box sizes and county membership the model is simulated on.
struct Layout {
    electorates: Vec<u64>,
    county: Vec<u32>,
    n_counties: usize,
}

impl Layout {
    fn of(round: &ElectionRound) -> Self {
        let mut index: HashMap<AreaKey, u32> = HashMap::new();
        let county = round
            .boxes
            .iter()
            .map(|b| {
                let next = index.len() as u32;
                *index.entry(b.area_key(AreaLevel::County)).or_insert(next)
            })
            .collect();
        Layout {
            electorates: round.boxes.iter().map(|b| b.electorate).collect(),
            county,
            n_counties: index.len(),
        }
    }

    /// Consecutive counties of `per_county` boxes each.
    #[cfg(test)]
    fn flat(electorates: Vec<u64>, per_county: usize) -> Self {
        let county: Vec<u32> = (0..electorates.len()).map(|i| (i / per_county) as u32).collect();
        let n_counties = county.last().map_or(0, |&g| g as usize + 1);
        Layout {
            electorates,
            county,
            n_counties,
        }
    }
}

/// A simulated box: fair turnout and share plus its fraud draws.
#[derive(Debug, Clone, Copy)]
struct SimBox {
    turnout: f64,
    share: f64,
    fraud: FraudDraw,
}

/// Uniform on the open interval (0, 1) from a hash.
#[inline]
fn to_unit(h: u64) -> f64 {
    ((h >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// `k`-th uniform of the counter `index` under `master`.
#[inline]
fn unit(master: u64, index: u64, k: u64) -> f64 {
    slot(derive_seed(master, index, 0), k)
}

#[inline]
fn slot(h: u64, k: u64) -> f64 {
    to_unit(splitmix64(h.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15))))
}

/// Gaussian restricted to `[0, 1]` by inverse CDF: `(mean, lower cdf, cdf mass)`.
#[derive(Debug, Clone, Copy)]
struct UnitTruncation {
    mean: f64,
    sd: f64,
    lo: f64,
    mass: f64,
}

impl UnitTruncation {
    fn new(normal: &Normal, mean: f64, sd: f64) -> Self {
        let lo = normal.cdf(-mean / sd);
        let hi = normal.cdf((1.0 - mean) / sd);
        UnitTruncation { mean, sd, lo, mass: hi - lo }
    }

    #[inline]
    fn draw(&self, normal: &Normal, u: f64) -> f64 {
        if self.mass < 1e-12 {
            return self.mean.clamp(0.0, 1.0);
        }
        (self.mean + self.sd * normal.inverse_cdf(self.lo + u * self.mass)).clamp(0.0, 1.0)
    }
}

/// Model boxes for one replicate. Every draw is a fixed function of the seed,
/// the box (or county) and the draw's slot, and fair values come from the
/// inverse CDF, so a box's simulated turnout and share move continuously
/// with the fair parameters. This keeps the objective smooth when the fair
/// parameters change along with `f`.
fn simulate<'a>(layout: &'a Layout, fair: &FairParams, seed: u64) -> impl Iterator<Item = (u64, SimBox)> + 'a {
    let normal = Normal::standard();
    let fair = *fair;
    let (county_seed, box_seed) = (derive_seed(seed, 1, 0), derive_seed(seed, 2, 0));
    let counties: Vec<[UnitTruncation; 2]> = (0..layout.n_counties as u64)
        .map(|g| {
            let zt = normal.inverse_cdf(unit(county_seed, g, 0));
            let zv = normal.inverse_cdf(unit(county_seed, g, 1));
            [
                UnitTruncation::new(&normal, fair.turnout.mean + fair.turnout_county_sd * zt, fair.turnout.sd),
                UnitTruncation::new(&normal, fair.share.mean + fair.share_county_sd * zv, fair.share.sd),
            ]
        })
        .collect();
    layout.electorates.iter().zip(&layout.county).enumerate().map(move |(i, (&e, &g))| {
        let [ct, cv] = &counties[g as usize];
        let h = derive_seed(box_seed, i as u64, 0);
        let t = ct.draw(&normal, slot(h, 0));
        let v = cv.draw(&normal, slot(h, 1));
        let fraud = FraudDraw {
            u: slot(h, 2),
            x: slot(h, 3),
            y: EXTREME_RANGE.0 + (EXTREME_RANGE.1 - EXTREME_RANGE.0) * slot(h, 4),
        };
        (e, SimBox { turnout: t, share: v, fraud })
    })
}

/// Flattened bin index of a realized box, if it passes the restriction.
#[inline]
fn restricted_bin(valid: u64, inc: u64, electorate: u64, restriction: &Restriction, bins: usize) -> Option<u32> {
    let t = valid as f64 / electorate as f64;
    let v = inc as f64 / valid as f64;
    if !restriction.admits(t, v) {
        return None;
    }
    let col = bin_index(t, 0.0, 1.0, bins)?;
    let row = bin_index(v, 0.0, 1.0, bins)?;
    Some((row * bins + col) as u32)
}

/// Model fingerprints for every `f`, from `R` replicates with common random
/// numbers.
struct ModelBank {
    /// Counts with no incremental stuffing (extreme stuffing included).
    base: Vec<f64>,
    base_total: f64,
    /// Boxes whose bin changes when stuffed, sorted by their `u`.
    moves: Vec<Move>,
}

#[derive(Debug, Clone, Copy)]
struct Move {
    u: f64,
    from: Option<u32>,
    to: Option<u32>,
}

impl ModelBank {
    fn build(layout: &Layout, fair: &FairParams, config: &FitConfig, seed: u64) -> Self {
        let bins = config.bins;
        let r = &config.restriction;
        let per_replicate: Vec<(Vec<f64>, Vec<Move>)> = (0..config.replicates)
            .into_par_iter()
            .map(|rep| {
                let mut base = vec![0.0; bins * bins];
                let mut moves = Vec::new();
                let rep_seed = derive_seed(seed, streams::MODEL_REPLICATE, rep as u64);
                for (e, sim) in simulate(layout, fair, rep_seed) {
                    let kind = sim.fraud.kind(1.0 - config.extreme_fraction, config.extreme_fraction);
                    if kind == StuffKind::Extreme {
                        let (valid, inc) = realize_counts(e, sim.turnout, sim.share, sim.fraud.y);
                        if let Some(b) = restricted_bin(valid, inc, e, r, bins) {
                            base[b as usize] += 1.0;
                        }
                        continue;
                    }
                    let (valid, inc) = realize_counts(e, sim.turnout, sim.share, 0.0);
                    let from = restricted_bin(valid, inc, e, r, bins);
                    if let Some(b) = from {
                        base[b as usize] += 1.0;
                    }
                    let frac = sim.fraud.fraction(StuffKind::Incremental, config.alpha);
                    let (valid, inc) = realize_counts(e, sim.turnout, sim.share, frac);
                    let to = restricted_bin(valid, inc, e, r, bins);
                    if from != to {
                        moves.push(Move { u: sim.fraud.u, from, to });
                    }
                }
                (base, moves)
            })
            .collect();

        let mut base = vec![0.0; bins * bins];
        let mut moves = Vec::new();
        for (b, m) in per_replicate {
            for (acc, x) in base.iter_mut().zip(b) {
                *acc += x;
            }
            moves.extend(m);
        }
        moves.sort_by(|a, b| a.u.total_cmp(&b.u));
        let base_total = base.iter().sum();
        ModelBank {
            base,
            base_total,
            moves,
        }
    }

    /// Squared L2 distance between `observed` (normalized) and the
    /// normalized mean model fingerprint at stuffing fraction `f`.
    fn objective(&self, observed: &[f64], f: f64) -> f64 {
        let mut counts = self.base.clone();
        let mut total = self.base_total;
        let k = self.moves.partition_point(|m| m.u < f);
        for m in &self.moves[..k] {
            if let Some(b) = m.from {
                counts[b as usize] -= 1.0;
                total -= 1.0;
            }
            if let Some(b) = m.to {
                counts[b as usize] += 1.0;
                total += 1.0;
            }
        }
        if total <= 0.0 {
            return observed.iter().map(|o| o * o).sum();
        }
        observed
            .iter()
            .zip(&counts)
            .map(|(o, c)| {
                let d = o - c / total;
                d * d
            })
            .sum()
    }
}

/// Observed restricted fingerprint (normalized, flattened) and the fair
/// parameters estimated from the restricted boxes.
struct Observed {
    fingerprint: Vec<f64>,
    fair: FairParams,
    used: usize,
}

fn observe(boxes: impl Iterator<Item = (u64, u64, u64, u32)>, config: &FitConfig) -> Result<Observed> {
    let bins = config.bins;
    let mut counts = vec![0.0; bins * bins];
    let (mut ts, mut vs, mut gs) = (Vec::new(), Vec::new(), Vec::new());
    for (electorate, valid, inc, county) in boxes {
        if valid == 0 {
            continue;
        }
        if let Some(b) = restricted_bin(valid, inc, electorate, &config.restriction, bins) {
            counts[b as usize] += 1.0;
            ts.push(valid as f64 / electorate as f64);
            vs.push(inc as f64 / valid as f64);
            gs.push(county);
        }
    }
    let used = ts.len();
    if used < config.min_boxes {
        return Err(Error::InsufficientData {
            needed: config.min_boxes,
            got: used,
        });
    }
    let fair = estimate_fair(&ts, &vs, &gs)?;
    for c in &mut counts {
        *c /= used as f64;
    }
    Ok(Observed {
        fingerprint: counts,
        fair,
        used,
    })
}

#[derive(Debug, Clone, Copy)]
struct PointFit {
    f: f64,
    fair: FairParams,
    loss: f64,
    loss_at_zero: f64,
    loss_at_one: f64,
    converged: bool,
}

/// Stuffing fractions at which the fair-parameter correction is computed;
/// it is interpolated linearly in between and held constant beyond.
const CORRECTION_ANCHORS: [f64; 6] = [0.0, 0.05, 0.1, 0.15, 0.25, 0.5];
const CORRECTION_STEPS: usize = 4;
const CORRECTION_REPLICATES: u64 = 2;
const PROFILE_REPLICATES: usize = 8;
const REFINE_HALFWIDTH: f64 = 0.02;

/// Fair parameters to simulate with, as a function of `f`.
///
/// The raw robust estimates are biased: truncation to `[0, 1]` and the
/// restriction shrink them, and stuffed boxes inflate them. Plugging them in
/// directly leaves the model too narrow at small `f`, so stuffing ends up
/// absorbing genuine fair spread. The map stores, per anchor `f`, the
/// correction that turns raw estimates into parameters whose simulated data
/// reproduce those estimates.
#[derive(Debug, Clone)]
struct FairMap {
    raw: FairParams,
    corrections: Vec<(f64, [f64; 6])>,
}

fn fair_vec(p: &FairParams) -> [f64; 6] {
    [p.turnout.mean, p.turnout.sd, p.turnout_county_sd, p.share.mean, p.share.sd, p.share_county_sd]
}

fn fair_from(v: [f64; 6]) -> FairParams {
    FairParams {
        turnout: Gaussian { mean: v[0], sd: v[1].max(1e-4) },
        turnout_county_sd: v[2].max(0.0),
        share: Gaussian { mean: v[3], sd: v[4].max(1e-4) },
        share_county_sd: v[5].max(0.0),
    }
}

impl FairMap {
    fn build(raw: &FairParams, layout: &Layout, config: &FitConfig, seed: u64) -> Self {
        let target = fair_vec(raw);
        let upper = 1.0 - config.extreme_fraction;
        let corrections = CORRECTION_ANCHORS
            .iter()
            .filter(|&&f| f <= upper)
            .map(|&f| {
                let mut theta = target;
                for _ in 0..CORRECTION_STEPS {
                    let mut data = Vec::new();
                    for rep in 0..CORRECTION_REPLICATES {
                        let mut d =
                            simulate_dataset(layout, &fair_from(theta), f, config, derive_seed(seed, streams::CALIBRATE, rep));
                        let offset = rep as u32 * layout.n_counties as u32;
                        d.iter_mut().for_each(|x| x.3 += offset);
                        data.extend(d);
                    }
                    let (ts, vs, gs) = restricted_sample(&data, &config.restriction);
                    let Ok(sim) = estimate_fair(&ts, &vs, &gs) else {
                        log::warn!("stuffing: degenerate calibration sample at f = {f}; no correction applied");
                        break;
                    };
                    let sim = fair_vec(&sim);
                    for k in 0..6 {
                        theta[k] += target[k] - sim[k];
                    }
                }
                let mut delta = [0.0; 6];
                for k in 0..6 {
                    delta[k] = theta[k] - target[k];
                }
                (f, delta)
            })
            .collect();
        FairMap { raw: *raw, corrections }
    }

    /// The same correction applied to other raw estimates.
    fn with_raw(&self, raw: &FairParams) -> Self {
        FairMap {
            raw: *raw,
            corrections: self.corrections.clone(),
        }
    }

    fn at(&self, f: f64) -> FairParams {
        let c = &self.corrections;
        let delta = match c.iter().position(|&(a, _)| a >= f) {
            Some(0) => c[0].1,
            None => c[c.len() - 1].1,
            Some(i) => {
                let ((a, da), (b, db)) = (c[i - 1], c[i]);
                let w = (f - a) / (b - a);
                let mut d = [0.0; 6];
                for k in 0..6 {
                    d[k] = da[k] + w * (db[k] - da[k]);
                }
                d
            }
        };
        let mut v = fair_vec(&self.raw);
        for k in 0..6 {
            v[k] += delta[k];
        }
        fair_from(v)
    }
}

/// Restricted (turnout, share, county) triples of a simulated dataset.
fn restricted_sample(data: &[(u64, u64, u64, u32)], restriction: &Restriction) -> (Vec<f64>, Vec<f64>, Vec<u32>) {
    let (mut ts, mut vs, mut gs) = (Vec::new(), Vec::new(), Vec::new());
    for &(e, valid, inc, g) in data {
        if valid == 0 {
            continue;
        }
        let (t, v) = (valid as f64 / e as f64, inc as f64 / valid as f64);
        if restriction.admits(t, v) {
            ts.push(t);
            vs.push(v);
            gs.push(g);
        }
    }
    (ts, vs, gs)
}

/// Linear weights of `x` in `[0, 1]` on the two nearest bin centers.
#[inline]
fn cloud_in_cell(x: f64, bins: usize) -> [(usize, f64); 2] {
    let p = (x * bins as f64 - 0.5).clamp(0.0, (bins - 1) as f64);
    let i = (p.floor() as usize).min(bins - 1);
    let w = p - i as f64;
    [(i, 1.0 - w), ((i + 1).min(bins - 1), w)]
}

/// Objective at `f` with the fair parameters corrected for that `f`,
/// simulated directly from `replicates` replicates. Simulated boxes are
/// spread over neighbouring bins by linear weights, which keeps the
/// objective continuous in the fair parameters.
fn profile_loss(observed: &Observed, map: &FairMap, layout: &Layout, config: &FitConfig, f: f64, replicates: usize, seed: u64) -> f64 {
    let fair = map.at(f);
    let bins = config.bins;
    let counts = (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let mut counts = vec![0.0; bins * bins];
            let data = simulate_dataset(layout, &fair, f, config, derive_seed(seed, streams::MODEL_REPLICATE, rep as u64));
            for (e, valid, inc, _) in data {
                let t = valid as f64 / e as f64;
                let v = inc as f64 / valid as f64;
                if config.restriction.admits(t, v) {
                    for (col, wc) in cloud_in_cell(t, bins) {
                        for (row, wr) in cloud_in_cell(v, bins) {
                            counts[row * bins + col] += wc * wr;
                        }
                    }
                }
            }
            counts
        })
        .reduce(
            || vec![0.0; bins * bins],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return observed.fingerprint.iter().map(|o| o * o).sum();
    }
    observed.fingerprint.iter().zip(&counts).map(|(o, c)| (o - c / total).powi(2)).sum()
}

/// Vertex of the least-squares parabola through `points`, if it is convex
/// and the vertex lies within the sampled range.
fn parabola_vertex(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let (mut s1, mut s2, mut s3, mut s4, mut sy, mut sxy, mut sx2y) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let x = x - cx;
        s1 += x;
        s2 += x * x;
        s3 += x * x * x;
        s4 += x * x * x * x;
        sy += y;
        sxy += x * y;
        sx2y += x * x * y;
    }
    // normal equations for y = c + b x + a x^2, solved by Cramer's rule
    let det3 = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let m = [[n, s1, s2], [s1, s2, s3], [s2, s3, s4]];
    let d = det3(m);
    if d.abs() < f64::MIN_POSITIVE {
        return None;
    }
    let b = det3([[n, sy, s2], [s1, sxy, s3], [s2, sx2y, s4]]) / d;
    let a = det3([[n, s1, sy], [s1, s2, sxy], [s2, s3, sx2y]]) / d;
    if !(a > 0.0) {
        return None;
    }
    let v = cx - b / (2.0 * a);
    let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.0), h.max(p.0)));
    (lo..=hi).contains(&v).then_some(v)
}

const SCAN_POINTS: [f64; 11] = [0.0, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 0.65, 0.8, 1.0];
const WINDOW_HALFWIDTH: f64 = 0.1;
const WINDOW_POINTS: usize = 11;

/// Fit `f` for one observed fingerprint.
///
/// The profile objective, where each `f` is simulated with its own corrected
/// fair parameters, is flat and bumpy near its minimum. It is scanned on a
/// coarse grid and then smoothed by a parabola over a window around the best
/// scan point. The final golden-section search, grid refinement and the
/// end-point losses use one full bank at the parameters of that vertex.
fn fit_point(observed: &Observed, map: &FairMap, layout: &Layout, config: &FitConfig, replicates: usize, seed: u64) -> PointFit {
    let upper = 1.0 - config.extreme_fraction;
    let r = PROFILE_REPLICATES.min(replicates);
    let mut scan: Vec<f64> = SCAN_POINTS.iter().copied().filter(|&f| f < upper).collect();
    scan.push(upper);
    let best = scan
        .iter()
        .map(|&f| (f, profile_loss(observed, map, layout, config, f, r, seed)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .expect("scan is non-empty")
        .0;
    let lo = (best - WINDOW_HALFWIDTH).max(0.0);
    let hi = (best + WINDOW_HALFWIDTH).min(upper);
    let window: Vec<(f64, f64)> = (0..WINDOW_POINTS)
        .map(|k| lo + (hi - lo) * k as f64 / (WINDOW_POINTS - 1) as f64)
        .map(|f| (f, profile_loss(observed, map, layout, config, f, replicates, seed)))
        .collect();
    let center = parabola_vertex(&window).unwrap_or_else(|| {
        window
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
            .expect("window is non-empty")
            .0
    });

    let fair = map.at(center);
    let bank = ModelBank::build(layout, &fair, config, seed);
    let mut evaluated: Vec<(f64, f64)> = Vec::new();
    let mut eval = |f: f64| {
        let v = bank.objective(&observed.fingerprint, f);
        evaluated.push((f, v));
        v
    };
    let lo = (center - REFINE_HALFWIDTH).max(0.0);
    let hi = (center + REFINE_HALFWIDTH).min(upper);
    let fine = golden_section(&mut eval, lo, hi, config.search_tol, 200);
    let steps = (config.grid_halfwidth / config.grid_step).round() as i64;
    let center = (fine.x / config.grid_step).round() as i64;
    for k in (center - steps)..=(center + steps) {
        let f = k as f64 * config.grid_step;
        if (0.0..=upper).contains(&f) {
            eval(f);
        }
    }
    let loss_at_zero = eval(0.0);
    let loss_at_one = eval(upper);

    let (f, loss) = evaluated
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .expect("objective evaluated");
    let hi = evaluated.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
    let converged = hi - loss > 1e-12 * hi.abs().max(f64::MIN_POSITIVE);
    PointFit {
        f,
        fair,
        loss,
        loss_at_zero,
        loss_at_one,
        converged,
    }
}

/// Simulate one dataset from the fitted model, as (electorate, valid,
/// incumbent, county).
fn simulate_dataset(layout: &Layout, fair: &FairParams, f: f64, config: &FitConfig, seed: u64) -> Vec<(u64, u64, u64, u32)> {
    simulate(layout, fair, seed)
        .zip(&layout.county)
        .map(|((e, sim), &g)| {
            let kind = sim.fraud.kind(f, config.extreme_fraction);
            let (valid, inc) = realize_counts(e, sim.turnout, sim.share, sim.fraud.fraction(kind, config.alpha));
            (e, valid, inc, g)
        })
        .collect()
}

/// Fit the stuffing fraction for `candidate`. The round should already be
/// filtered to boxes with at least 100 voters.
pub fn fit(round: &ElectionRound, candidate: &str, config: &FitConfig) -> Result<StuffingFit> {
    if config.replicates == 0 || config.bins < 2 {
        return Err(Error::InvalidConfig("need at least one replicate and two bins".into()));
    }
    if !(0.0..1.0).contains(&config.extreme_fraction) {
        return Err(Error::InvalidConfig("extreme_fraction must lie in [0, 1)".into()));
    }
    let c = round.candidate_index(candidate)?;
    let layout = Layout::of(round);
    let observed = observe(
        round
            .boxes
            .iter()
            .zip(&layout.county)
            .map(|(b, &g)| (b.electorate, b.valid_votes, b.votes[c], g)),
        config,
    )?;
    let map = FairMap::build(&observed.fair, &layout, config, derive_seed(config.seed, streams::BOOTSTRAP_FIT, 0));
    let point = fit_point(&observed, &map, &layout, config, config.replicates, derive_seed(config.seed, streams::BOOTSTRAP_FIT, 0));

    let boot_r = config.bootstrap_replicates.clamp(1, config.replicates);
    let bootstrap_estimates: Vec<f64> = if point.converged {
        (0..config.bootstrap)
            .into_par_iter()
            .filter_map(|k| {
                let k = k as u64 + 1;
                let data = simulate_dataset(
                    &layout,
                    &point.fair,
                    point.f,
                    config,
                    derive_seed(config.seed, streams::BOOTSTRAP_DATA, k),
                );
                let obs = observe(data.into_iter(), config).ok()?;
                Some(fit_point(&obs, &map.with_raw(&obs.fair), &layout, config, boot_r, derive_seed(config.seed, streams::BOOTSTRAP_FIT, k)).f)
            })
            .collect()
    } else {
        Vec::new()
    };

    let f_sd = if !point.converged {
        f64::INFINITY
    } else {
        stats::sample_sd(&bootstrap_estimates).unwrap_or(f64::INFINITY)
    };
    Ok(StuffingFit {
        candidate: candidate.to_string(),
        f_hat: point.f,
        f_sd,
        alpha: config.alpha,
        loss: point.loss,
        loss_at_zero: point.loss_at_zero,
        loss_at_one: point.loss_at_one,
        n_boxes_used: observed.used,
        n_boxes_total: round.len(),
        restriction: config.restriction,
        fair: point.fair,
        significant: f_sd.is_finite() && point.f > 2.0 * f_sd,
        converged: point.converged,
        replicates: config.replicates,
        bootstrap_estimates,
    })
}
