use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use election_forensics::fingerprint::{
    cumulative_turnout_curve, rank_cumulative_curve, raw_fingerprint, standardized_fingerprint_masked,
    write_curve_csv, write_grid_csv, write_heatmap_svg, Fingerprint, StandardizeConfig,
};
use election_forensics::ingest::{parse_round, write_round, HierarchyCounts};
use election_forensics::rigging::{
    build_envelope, displacement_profile, fair_reference_spec, verdict, RiggingConfig, RiggingProfile, Verdict,
};
use election_forensics::rng::derive_seed;
use election_forensics::stuffing::{self, FitConfig, StuffingFit};
use election_forensics::synth::{generate, inject_round2, ShiftSpec, SynthSpec};
use election_forensics::voteshift::{self, write_histogram_csv, DeltaFormula, VoteShiftConfig, VoteShiftReport};
use election_forensics::{ElectionRound, IngestConfig};
use serde::Serialize;

use crate::output::{write_json, Output};
use crate::{Common, ReferenceArgs, StuffingArgs, UsageError};

/// Minimum electorate used by the stuffing and rigging tests unless overridden.
const TEST_MIN_ELECTORATE: u64 = 100;
/// Units with at most this many voters form the first small-unit set.
const SMALL_ELECTORATE: u64 = 100;
const SMALL_AREA_BOXES: usize = 2;
/// Seed stream for synthetic reference elections.
const REFERENCE_STREAM: u64 = 0x5245_4653;

fn load(path: &Path, common: &Common) -> Result<ElectionRound> {
    let config = IngestConfig {
        lenient: common.lenient,
        round_label: None,
    };
    let round = parse_round(path, &config).with_context(|| format!("loading {}", path.display()))?;
    log::info!("{}: {} boxes ({} dropped with zero valid votes)", path.display(), round.len(), round.dropped_zero_valid);
    Ok(round)
}

fn filtered(round: &ElectionRound, min_electorate: u64) -> ElectionRound {
    let out = round.filter_min_electorate(min_electorate);
    if out.len() < round.len() {
        log::info!("{}: {} boxes with at least {min_electorate} voters", round.round_label, out.len());
    }
    out
}

#[derive(Debug, Serialize)]
struct SmallUnits {
    electorate_at_most_100: usize,
    in_small_areas: usize,
    small_area_level: election_forensics::AreaLevel,
}

#[derive(Debug, Serialize)]
struct IngestSummary {
    round_label: String,
    n_boxes: usize,
    dropped_zero_valid: usize,
    dropped_invalid: usize,
    hierarchy_counts: HierarchyCounts,
    candidates: Vec<String>,
    min_electorate: u64,
    n_boxes_min_electorate: usize,
    small_units: SmallUnits,
}

fn summarize(round: &ElectionRound, common: &Common) -> IngestSummary {
    let min_electorate = common.min_electorate_or(TEST_MIN_ELECTORATE);
    IngestSummary {
        round_label: round.round_label.clone(),
        n_boxes: round.len(),
        dropped_zero_valid: round.dropped_zero_valid,
        dropped_invalid: round.dropped_invalid,
        hierarchy_counts: round.hierarchy_counts,
        candidates: round.candidates.clone(),
        min_electorate,
        n_boxes_min_electorate: round.filter_min_electorate(min_electorate).len(),
        small_units: SmallUnits {
            electorate_at_most_100: round.boxes.iter().filter(|b| b.electorate <= SMALL_ELECTORATE).count(),
            in_small_areas: round
                .small_area_flags(common.small_area_level, SMALL_AREA_BOXES)
                .iter()
                .filter(|&&s| s)
                .count(),
            small_area_level: common.small_area_level,
        },
    }
}

pub fn ingest(path: &Path, common: &Common) -> Result<()> {
    let round = load(path, common)?;
    let mut out = Output::new(&common.out, "ingest", None);
    out.record_input(path)?;
    out.set_config(&serde_json::json!({
        "lenient": common.lenient,
        "min_electorate": common.min_electorate_or(TEST_MIN_ELECTORATE),
        "small_area_level": common.small_area_level,
    }))?;
    out.json("ingest.json", &summarize(&round, common))?;
    out.finish()
}

fn heatmap(out: &mut Output, name: &str, fp: &Fingerprint) -> Result<()> {
    write_grid_csv(fp, out.path(&format!("{name}.csv"))?)?;
    write_heatmap_svg(fp, out.path(&format!("{name}.svg"))?)?;
    Ok(())
}

fn curves(out: &mut Output, round: &ElectionRound, candidate: &str, suffix: &str) -> Result<()> {
    write_curve_csv(&cumulative_turnout_curve(round, candidate)?, out.path(&format!("curve_turnout{suffix}.csv"))?)?;
    write_curve_csv(&rank_cumulative_curve(round, candidate)?, out.path(&format!("curve_rank{suffix}.csv"))?)?;
    Ok(())
}

/// Raw and standardized fingerprints of the analysed boxes and of the two
/// small-unit sets. Standardization always uses group means over the whole
/// round.
fn fingerprints(
    out: &mut Output,
    full: &ElectionRound,
    analysed: &ElectionRound,
    candidate: &str,
    st: &StandardizeConfig,
    common: &Common,
    suffix: &str,
) -> Result<()> {
    heatmap(out, &format!("fingerprint_raw{suffix}"), &raw_fingerprint(analysed, candidate, common.bins)?)?;
    heatmap(
        out,
        &format!("fingerprint_standardized{suffix}"),
        &standardized_fingerprint_masked(analysed, candidate, st, None)?,
    )?;
    let small_electorate: Vec<bool> = full.boxes.iter().map(|b| b.electorate <= SMALL_ELECTORATE).collect();
    let small_area = full.small_area_flags(common.small_area_level, SMALL_AREA_BOXES);
    for (name, mask) in [("small_electorate", small_electorate), ("small_area", small_area)] {
        let ids: std::collections::HashSet<&str> = full
            .boxes
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(b, _)| b.box_id.as_str())
            .collect();
        let subset = full.retain(|b| ids.contains(b.box_id.as_str()));
        heatmap(out, &format!("fingerprint_raw_{name}{suffix}"), &raw_fingerprint(&subset, candidate, common.bins)?)?;
        heatmap(
            out,
            &format!("fingerprint_standardized_{name}{suffix}"),
            &standardized_fingerprint_masked(full, candidate, st, Some(&mask))?,
        )?;
    }
    Ok(())
}

pub fn fingerprint(path: &Path, candidate: &str, standardized_bins: usize, common: &Common) -> Result<()> {
    let full = load(path, common)?;
    full.candidate_index(candidate)?;
    let analysed = filtered(&full, common.min_electorate_or(TEST_MIN_ELECTORATE));
    let st = StandardizeConfig {
        bins: standardized_bins,
        ..Default::default()
    };
    let mut out = Output::new(&common.out, "fingerprint", None);
    out.record_input(path)?;
    out.set_config(&serde_json::json!({
        "candidate": candidate,
        "bins": common.bins,
        "standardize": st,
        "min_electorate": common.min_electorate_or(TEST_MIN_ELECTORATE),
        "small_area_level": common.small_area_level,
    }))?;
    fingerprints(&mut out, &full, &analysed, candidate, &st, common, "")?;
    curves(&mut out, &full, candidate, "")?;
    out.finish()
}

fn fit_config(args: &StuffingArgs, common: &Common) -> FitConfig {
    FitConfig {
        alpha: args.alpha,
        extreme_fraction: args.extreme_fraction,
        bins: common.bins,
        replicates: args.replicates,
        bootstrap: args.bootstrap,
        seed: common.seed(),
        ..Default::default()
    }
}

fn run_fit(round: &ElectionRound, candidate: &str, config: &FitConfig) -> Result<StuffingFit> {
    let fit = stuffing::fit(round, candidate, config)?;
    log::info!(
        "{}: f = {:.4} (SD {:.4}), {}",
        round.round_label,
        fit.f_hat,
        fit.f_sd,
        if fit.significant { "significant" } else { "not significant" }
    );
    Ok(fit)
}

pub fn test_stuffing(path: &Path, candidate: &str, args: &StuffingArgs, json: Option<&Path>, common: &Common) -> Result<()> {
    let round = filtered(&load(path, common)?, common.min_electorate_or(TEST_MIN_ELECTORATE));
    let config = fit_config(args, common);
    let fit = run_fit(&round, candidate, &config)?;
    let mut out = Output::new(&common.out, "test-stuffing", Some(config.seed));
    out.record_input(path)?;
    out.set_config(&serde_json::json!({
        "candidate": candidate,
        "min_electorate": common.min_electorate_or(TEST_MIN_ELECTORATE),
        "fit": config,
    }))?;
    emit(&mut out, json, "stuffing.json", &fit)?;
    out.finish()
}

fn emit(out: &mut Output, json: Option<&Path>, default: &str, value: &impl Serialize) -> Result<()> {
    match json {
        Some(path) => {
            write_json(path, value)?;
            out.external(path);
        }
        None => {
            out.json(default, value)?;
        }
    }
    Ok(())
}

fn rigging_config(refs: &ReferenceArgs) -> RiggingConfig {
    RiggingConfig {
        level: refs.level,
        ..Default::default()
    }
}

/// Reference rounds with the candidate analysed in each.
fn references(
    round: &ElectionRound,
    candidate: &str,
    refs: &ReferenceArgs,
    common: &Common,
    out: &mut Output,
) -> Result<Vec<(ElectionRound, String)>> {
    let min_electorate = common.min_electorate_or(TEST_MIN_ELECTORATE);
    if let Some(dir) = &refs.references {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| UsageError(format!("reading reference directory {}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
            .collect();
        files.sort();
        if files.len() < 2 {
            return Err(UsageError(format!("{} holds {} reference CSV files; at least two are needed", dir.display(), files.len())).into());
        }
        files
            .iter()
            .map(|f| {
                let r = filtered(&load(f, common)?, min_electorate);
                out.record_input(f)?;
                let c = match &refs.reference_candidate {
                    Some(c) => c.clone(),
                    None => r.candidates.first().cloned().context("reference file without candidates")?,
                };
                Ok((r, c))
            })
            .collect()
    } else if let Some(n) = refs.synthetic_refs {
        if n < 2 {
            return Err(UsageError("--synthetic-refs needs at least 2".into()).into());
        }
        (0..n as u64)
            .map(|i| {
                let spec = fair_reference_spec(round, candidate, derive_seed(common.seed(), REFERENCE_STREAM, i))?;
                let r = generate(&spec)?.round;
                Ok((filtered(&r, min_electorate), spec.incumbent))
            })
            .collect()
    } else {
        Ok(Vec::new())
    }
}

#[derive(Debug, Serialize)]
struct RiggingResult {
    profile: RiggingProfile,
    verdict: Option<Verdict>,
}

fn rigging(
    round: &ElectionRound,
    candidate: &str,
    refs: &ReferenceArgs,
    common: &Common,
    out: &mut Output,
) -> Result<RiggingResult> {
    let config = rigging_config(refs);
    let mut profile = displacement_profile(round, candidate, &config)?;
    let references = references(round, candidate, refs, common, out)?;
    if references.is_empty() {
        log::warn!("no reference elections given; reporting the displacement profile without an envelope");
        return Ok(RiggingResult { profile, verdict: None });
    }
    let pairs: Vec<(&ElectionRound, &str)> = references.iter().map(|(r, c)| (r, c.as_str())).collect();
    profile = profile.with_envelope(build_envelope(&pairs, &config)?);
    let v = verdict(&profile)?;
    log::info!("{}: {}", round.round_label, v.summary);
    Ok(RiggingResult {
        profile,
        verdict: Some(v),
    })
}

fn write_profile_csv(profile: &RiggingProfile, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["p", "delta", "lower", "upper", "flagged"])?;
    let fmt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for (i, &p) in profile.thresholds.iter().enumerate() {
        let bound = profile.envelope.as_ref().and_then(|e| e.bound_at(p));
        w.write_record([
            p.to_string(),
            fmt(profile.delta[i]),
            fmt(bound.map(|b| b.lower)),
            fmt(bound.map(|b| b.upper)),
            profile.outside_envelope.contains(&p).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn test_rigging(path: &Path, candidate: &str, refs: &ReferenceArgs, json: Option<&Path>, common: &Common) -> Result<()> {
    let round = filtered(&load(path, common)?, common.min_electorate_or(TEST_MIN_ELECTORATE));
    let mut out = Output::new(&common.out, "test-rigging", Some(common.seed()));
    out.record_input(path)?;
    let result = rigging(&round, candidate, refs, common, &mut out)?;
    out.set_config(&serde_json::json!({
        "candidate": candidate,
        "min_electorate": common.min_electorate_or(TEST_MIN_ELECTORATE),
        "rigging": rigging_config(refs),
        "reference_dir": refs.references,
        "reference_candidate": refs.reference_candidate,
        "synthetic_refs": refs.synthetic_refs,
    }))?;
    emit(&mut out, json, "rigging.json", &result)?;
    write_profile_csv(&result.profile, &out.path("rigging_profile.csv")?)?;
    out.finish()
}

pub struct VoteshiftInputs<'a> {
    pub round1: &'a Path,
    pub round2: &'a Path,
    pub pro_r1: &'a [String],
    pub cand_r2: &'a str,
    pub replicates: usize,
    pub literal: bool,
}

fn voteshift_config(pro_r1: &[String], cand_r2: &str, replicates: usize, literal: bool, common: &Common) -> VoteShiftConfig {
    VoteShiftConfig {
        formula: if literal { DeltaFormula::Literal } else { DeltaFormula::Share },
        replicates,
        small_area_level: common.small_area_level,
        seed: common.seed(),
        ..VoteShiftConfig::new(pro_r1.to_vec(), cand_r2)
    }
}

fn run_voteshift(r1: &ElectionRound, r2: &ElectionRound, config: &VoteShiftConfig) -> Result<VoteShiftReport> {
    let report = voteshift::analyze(r1, r2, config)?;
    log::info!(
        "vote shift: {} pairs, mode {:.4}, excess {:.0} votes ({:.3}%, SD {:.0})",
        report.n_pairs,
        report.mode_hat,
        report.excess_votes,
        100.0 * report.excess_pct,
        report.excess_sd
    );
    Ok(report)
}

pub fn test_voteshift(inputs: &VoteshiftInputs, json: Option<&Path>, common: &Common) -> Result<()> {
    // the vote-shift test uses every box unless asked otherwise
    let min_electorate = common.min_electorate_or(0);
    let r1 = filtered(&load(inputs.round1, common)?, min_electorate);
    let r2 = filtered(&load(inputs.round2, common)?, min_electorate);
    let config = voteshift_config(inputs.pro_r1, inputs.cand_r2, inputs.replicates, inputs.literal, common);
    let report = run_voteshift(&r1, &r2, &config)?;
    let mut out = Output::new(&common.out, "test-voteshift", Some(config.seed));
    out.record_input(inputs.round1)?;
    out.record_input(inputs.round2)?;
    out.set_config(&serde_json::json!({ "min_electorate": min_electorate, "voteshift": config }))?;
    emit(&mut out, json, "voteshift.json", &report)?;
    write_histogram_csv(&report.histogram, out.path("voteshift_histogram.csv")?)?;
    out.finish()
}

#[derive(Debug, Serialize)]
struct ShiftTruth {
    skewed_boxes: usize,
    ground_truth_excess: f64,
    realized_excess: u64,
}

pub fn simulate(
    spec_path: Option<&Path>,
    shift_path: Option<&Path>,
    n_boxes: Option<usize>,
    stuffing_fraction: Option<f64>,
    common: &Common,
) -> Result<()> {
    let mut spec = match spec_path {
        Some(p) => SynthSpec::from_json_file(p)?,
        None => SynthSpec::default(),
    };
    if let Some(n) = n_boxes {
        spec.n_boxes = n;
    }
    if let Some(f) = stuffing_fraction {
        spec.stuffing_fraction = f;
    }
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    let shift = shift_path.map(ShiftSpec::from_json_file).transpose()?;
    let synthetic = generate(&spec)?;
    let round2 = shift
        .as_ref()
        .map(|s| inject_round2(&synthetic.round, &spec.incumbent, s))
        .transpose()?;

    let mut out = Output::new(&common.out, "simulate", Some(spec.seed));
    for p in [spec_path, shift_path].into_iter().flatten() {
        out.record_input(p)?;
    }
    out.set_config(&serde_json::json!({ "spec": spec, "shift": shift }))?;
    write_round(&synthetic.round, out.path("round1.csv")?)?;
    let truth_path = out.path("truth.csv")?;
    let mut w = csv::Writer::from_path(&truth_path).with_context(|| format!("writing {}", truth_path.display()))?;
    w.write_record(["box_id", "stuffing", "coerced"])?;
    for (b, t) in synthetic.round.boxes.iter().zip(&synthetic.truth) {
        w.write_record([b.box_id.as_str(), &format!("{:?}", t.stuffing).to_lowercase(), &t.coerced.to_string()])?;
    }
    w.flush()?;
    out.json("diagnostics.json", &synthetic.diagnostics)?;
    if let Some(r2) = round2 {
        write_round(&r2.round, out.path("round2.csv")?)?;
        out.json(
            "shift_truth.json",
            &ShiftTruth {
                skewed_boxes: r2.skewed_box_ids.len(),
                ground_truth_excess: r2.ground_truth_excess,
                realized_excess: r2.realized_excess,
            },
        )?;
    }
    out.finish()
}

pub struct ReportInputs<'a> {
    pub round1: &'a Path,
    pub round2: &'a Path,
    pub candidate: &'a str,
    pub pro_r1: &'a [String],
    pub cand_r2: Option<&'a str>,
    pub voteshift_replicates: usize,
}

pub fn report(inputs: &ReportInputs, stuffing: &StuffingArgs, refs: &ReferenceArgs, common: &Common) -> Result<()> {
    // read and check everything before any artifact is written
    let full = [load(inputs.round1, common)?, load(inputs.round2, common)?];
    for r in &full {
        r.candidate_index(inputs.candidate)?;
    }
    let pro_r1: Vec<String> = if inputs.pro_r1.is_empty() {
        vec![inputs.candidate.to_string()]
    } else {
        inputs.pro_r1.to_vec()
    };
    let cand_r2 = inputs.cand_r2.unwrap_or(inputs.candidate);
    let test_min = common.min_electorate_or(TEST_MIN_ELECTORATE);
    let analysed = [filtered(&full[0], test_min), filtered(&full[1], test_min)];
    let st = StandardizeConfig::default();
    let fit_cfg = fit_config(stuffing, common);
    let vs_min = common.min_electorate_or(0);
    let vs_cfg = voteshift_config(&pro_r1, cand_r2, inputs.voteshift_replicates, false, common);

    let mut out = Output::new(&common.out, "report", Some(common.seed()));
    out.record_input(inputs.round1)?;
    out.record_input(inputs.round2)?;

    let mut fits = Vec::new();
    let mut riggings = Vec::new();
    for (k, (f, a)) in full.iter().zip(&analysed).enumerate() {
        let suffix = format!("_round{}", k + 1);
        out.json(&format!("ingest{suffix}.json"), &summarize(f, common))?;
        curves(&mut out, f, inputs.candidate, &suffix)?;
        fingerprints(&mut out, f, a, inputs.candidate, &st, common, &suffix)?;
        let fit = run_fit(a, inputs.candidate, &fit_cfg)?;
        out.json(&format!("stuffing{suffix}.json"), &fit)?;
        fits.push(fit);
        if refs.references.is_some() || refs.synthetic_refs.is_some() {
            let result = rigging(a, inputs.candidate, refs, common, &mut out)?;
            write_profile_csv(&result.profile, &out.path(&format!("rigging_profile{suffix}.csv"))?)?;
            out.json(&format!("rigging{suffix}.json"), &result)?;
            riggings.push(result);
        }
    }

    let vs = run_voteshift(&filtered(&full[0], vs_min), &filtered(&full[1], vs_min), &vs_cfg)?;
    out.json("voteshift.json", &vs)?;
    write_histogram_csv(&vs.histogram, out.path("voteshift_histogram.csv")?)?;

    out.json(
        "summary.json",
        &serde_json::json!({
            "candidate": inputs.candidate,
            "stuffing": fits.iter().map(|f| serde_json::json!({
                "f_hat": f.f_hat, "f_sd": if f.f_sd.is_finite() { Some(f.f_sd) } else { None }, "significant": f.significant,
            })).collect::<Vec<_>>(),
            "rigging": riggings.iter().map(|r| r.verdict.as_ref().map(|v| v.summary.clone())).collect::<Vec<_>>(),
            "voteshift": {
                "excess_votes": vs.excess_votes,
                "excess_pct": vs.excess_pct,
                "excess_sd": vs.excess_sd,
            },
        }),
    )?;
    out.set_config(&serde_json::json!({
        "candidate": inputs.candidate,
        "min_electorate": test_min,
        "standardize": st,
        "bins": common.bins,
        "fit": fit_cfg,
        "rigging": (refs.references.is_some() || refs.synthetic_refs.is_some()).then(|| rigging_config(refs)),
        "reference_dir": refs.references,
        "synthetic_refs": refs.synthetic_refs,
        "voteshift_min_electorate": vs_min,
        "voteshift": vs_cfg,
    }))?;
    out.finish()
}
