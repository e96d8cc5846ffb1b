//! Loading, validating and filtering ballot-box result tables.
//!
//! A results file is UTF-8 CSV with one header row. The first six columns are
//! fixed (`province_id, district_id, county_id, box_id, electorate,
//! valid_votes`); every further column holds one candidate's vote count, in
//! file order.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FIXED_COLUMNS: [&str; 6] = [
    "province_id",
    "district_id",
    "county_id",
    "box_id",
    "electorate",
    "valid_votes",
];

/// One electoral unit. `votes` is aligned with the owning round's candidate
/// roster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BallotBox {
    pub box_id: String,
    pub province_id: String,
    pub district_id: String,
    pub county_id: String,
    pub electorate: u64,
    pub valid_votes: u64,
    pub votes: Vec<u64>,
}

/// Turnout and per-candidate vote shares of one box.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedShares {
    pub turnout: f64,
    pub vote_share: Vec<f64>,
}

impl BallotBox {
    /// Valid votes over electorate, and each candidate's votes over valid votes.
    pub fn derive_shares(&self) -> Result<DerivedShares> {
        if self.electorate == 0 {
            return Err(Error::Domain(format!("box {} has an empty electorate", self.box_id)));
        }
        if self.valid_votes == 0 {
            return Err(Error::Domain(format!("box {} has no valid votes", self.box_id)));
        }
        let valid = self.valid_votes as f64;
        Ok(DerivedShares {
            turnout: valid / self.electorate as f64,
            vote_share: self.votes.iter().map(|&v| v as f64 / valid).collect(),
        })
    }

    #[inline]
    pub fn turnout(&self) -> f64 {
        self.valid_votes as f64 / self.electorate as f64
    }

    #[inline]
    pub fn share(&self, candidate: usize) -> f64 {
        self.votes[candidate] as f64 / self.valid_votes as f64
    }

    pub fn area_key(&self, level: AreaLevel) -> AreaKey {
        let (d, c) = match level {
            AreaLevel::National => return AreaKey::default(),
            AreaLevel::Province => (String::new(), String::new()),
            AreaLevel::District => (self.district_id.clone(), String::new()),
            AreaLevel::County => (self.district_id.clone(), self.county_id.clone()),
        };
        AreaKey(self.province_id.clone(), d, c)
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.valid_votes > self.electorate {
            return Err(format!(
                "valid votes {} exceed electorate {}",
                self.valid_votes, self.electorate
            ));
        }
        let cast: u64 = self.votes.iter().sum();
        if cast > self.valid_votes {
            return Err(format!(
                "candidate votes sum to {cast}, more than the {} valid votes",
                self.valid_votes
            ));
        }
        Ok(())
    }
}

/// Administrative level used to group boxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AreaLevel {
    National,
    Province,
    District,
    County,
}

impl AreaLevel {
    pub fn parent(self) -> Option<AreaLevel> {
        match self {
            AreaLevel::National => None,
            AreaLevel::Province => Some(AreaLevel::National),
            AreaLevel::District => Some(AreaLevel::Province),
            AreaLevel::County => Some(AreaLevel::District),
        }
    }
}

impl fmt::Display for AreaLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AreaLevel::National => "national",
            AreaLevel::Province => "province",
            AreaLevel::District => "district",
            AreaLevel::County => "county",
        })
    }
}

impl FromStr for AreaLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "national" => Ok(AreaLevel::National),
            "province" => Ok(AreaLevel::Province),
            "district" => Ok(AreaLevel::District),
            "county" => Ok(AreaLevel::County),
            other => Err(Error::InvalidConfig(format!("unknown area level {other:?}"))),
        }
    }
}

/// Hierarchical path of an area: (province, district, county), with the
/// levels below the grouping level left empty. Districts and counties are
/// identified by their full path since names repeat across provinces.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct AreaKey(pub String, pub String, pub String);

impl fmt::Display for AreaKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.0, self.1, self.2)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyCounts {
    pub provinces: usize,
    pub districts: usize,
    pub counties: usize,
}

#[derive(Debug, Clone, Default)]
pub struct IngestConfig {
    /// Drop malformed or inconsistent rows with a warning instead of failing.
    pub lenient: bool,
    /// Label for the round; defaults to the file stem.
    pub round_label: Option<String>,
}

/// A validated set of boxes from one election round. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ElectionRound {
    pub round_label: String,
    pub candidates: Vec<String>,
    pub boxes: Vec<BallotBox>,
    pub dropped_zero_valid: usize,
    /// Rows rejected in lenient mode.
    pub dropped_invalid: usize,
    pub hierarchy_counts: HierarchyCounts,
}

impl ElectionRound {
    /// Build a round from boxes that are already known to be consistent.
    /// Zero-valid boxes are dropped and counted; invariant violations are errors.
    pub fn from_boxes(
        round_label: impl Into<String>,
        candidates: Vec<String>,
        boxes: Vec<BallotBox>,
    ) -> Result<Self> {
        let mut seen = HashSet::with_capacity(boxes.len());
        let mut kept = Vec::with_capacity(boxes.len());
        let mut dropped_zero_valid = 0;
        for b in boxes {
            if b.votes.len() != candidates.len() {
                return Err(Error::Validation {
                    box_id: b.box_id,
                    message: format!("expected {} vote counts", candidates.len()),
                });
            }
            b.check().map_err(|message| Error::Validation {
                box_id: b.box_id.clone(),
                message,
            })?;
            if !seen.insert(b.box_id.clone()) {
                return Err(Error::DuplicateBox { box_id: b.box_id, line: 0 });
            }
            if b.valid_votes == 0 {
                dropped_zero_valid += 1;
            } else {
                kept.push(b);
            }
        }
        let hierarchy_counts = count_hierarchy(&kept);
        Ok(ElectionRound {
            round_label: round_label.into(),
            candidates,
            boxes: kept,
            dropped_zero_valid,
            dropped_invalid: 0,
            hierarchy_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn candidate_index(&self, candidate: &str) -> Result<usize> {
        self.candidates
            .iter()
            .position(|c| c == candidate)
            .ok_or_else(|| Error::UnknownCandidate(candidate.to_string()))
    }

    /// Copy of the round keeping boxes with `electorate >= threshold`.
    pub fn filter_min_electorate(&self, threshold: u64) -> ElectionRound {
        self.retain(|b| b.electorate >= threshold)
    }

    /// Copy of the round keeping the boxes matching `keep`, in order.
    pub fn retain(&self, keep: impl Fn(&BallotBox) -> bool) -> ElectionRound {
        let boxes: Vec<BallotBox> = self.boxes.iter().filter(|b| keep(b)).cloned().collect();
        ElectionRound {
            round_label: self.round_label.clone(),
            candidates: self.candidates.clone(),
            hierarchy_counts: count_hierarchy(&boxes),
            boxes,
            dropped_zero_valid: self.dropped_zero_valid,
            dropped_invalid: self.dropped_invalid,
        }
    }

    /// Number of retained boxes in every area at `level`.
    pub fn boxes_per_area(&self, level: AreaLevel) -> BTreeMap<AreaKey, usize> {
        let mut counts = BTreeMap::new();
        for b in &self.boxes {
            *counts.entry(b.area_key(level)).or_insert(0) += 1;
        }
        counts
    }

    /// Per box: does its area at `level` hold at most `max_boxes` boxes?
    pub fn small_area_flags(&self, level: AreaLevel, max_boxes: usize) -> Vec<bool> {
        let counts = self.boxes_per_area(level);
        self.boxes
            .iter()
            .map(|b| counts[&b.area_key(level)] <= max_boxes)
            .collect()
    }

    pub fn total_valid_votes(&self) -> u64 {
        self.boxes.iter().map(|b| b.valid_votes).sum()
    }

    pub fn total_votes(&self, candidate: usize) -> u64 {
        self.boxes.iter().map(|b| b.votes[candidate]).sum()
    }

    /// Candidate's aggregate share of all valid votes in the round.
    pub fn national_share(&self, candidate: usize) -> f64 {
        self.total_votes(candidate) as f64 / self.total_valid_votes() as f64
    }
}

fn count_hierarchy(boxes: &[BallotBox]) -> HierarchyCounts {
    let mut provinces = HashSet::new();
    let mut districts = HashSet::new();
    let mut counties = HashSet::new();
    for b in boxes {
        provinces.insert(b.province_id.as_str());
        districts.insert((b.province_id.as_str(), b.district_id.as_str()));
        counties.insert((
            b.province_id.as_str(),
            b.district_id.as_str(),
            b.county_id.as_str(),
        ));
    }
    HierarchyCounts {
        provinces: provinces.len(),
        districts: districts.len(),
        counties: counties.len(),
    }
}

/// Number of retained boxes per district key; see [`ElectionRound::boxes_per_area`].
pub fn boxes_per_district(round: &ElectionRound, level: AreaLevel) -> BTreeMap<AreaKey, usize> {
    round.boxes_per_area(level)
}

pub fn parse_round(path: impl AsRef<Path>, config: &IngestConfig) -> Result<ElectionRound> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let label = config.round_label.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    parse_reader(std::io::BufReader::new(file), &label, config)
}

pub fn parse_reader<R: Read>(reader: R, label: &str, config: &IngestConfig) -> Result<ElectionRound> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let header = rdr.headers()?.clone();
    if header.len() < FIXED_COLUMNS.len()
        || header.iter().zip(FIXED_COLUMNS).any(|(got, want)| got != want)
    {
        return Err(Error::Header(format!(
            "expected leading columns {}, found {}",
            FIXED_COLUMNS.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let candidates: Vec<String> = header.iter().skip(FIXED_COLUMNS.len()).map(String::from).collect();
    if candidates.is_empty() {
        return Err(Error::Header("no candidate columns".into()));
    }
    let mut unique = HashSet::new();
    if let Some(dup) = candidates.iter().find(|c| !unique.insert(c.as_str())) {
        return Err(Error::Header(format!("candidate column {dup:?} repeated")));
    }

    let mut boxes = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut dropped_zero_valid = 0;
    let mut dropped_invalid = 0;
    let mut record = csv::StringRecord::new();

    while rdr.read_record(&mut record)? {
        let line = record.position().map_or(0, |p| p.line());
        let parsed = parse_record(&record, line, header.len()).and_then(|b| {
            b.check().map_err(|message| Error::Validation {
                box_id: b.box_id.clone(),
                message,
            })?;
            if seen.contains(&b.box_id) {
                return Err(Error::DuplicateBox { box_id: b.box_id, line });
            }
            Ok(b)
        });
        match parsed {
            Ok(b) => {
                seen.insert(b.box_id.clone());
                if b.valid_votes == 0 {
                    dropped_zero_valid += 1;
                } else {
                    boxes.push(b);
                }
            }
            Err(e) if config.lenient => {
                warn!("{label}: dropping row: {e}");
                dropped_invalid += 1;
            }
            Err(e) => return Err(e),
        }
    }

    Ok(ElectionRound {
        round_label: label.to_string(),
        candidates,
        hierarchy_counts: count_hierarchy(&boxes),
        boxes,
        dropped_zero_valid,
        dropped_invalid,
    })
}

fn parse_record(record: &csv::StringRecord, line: u64, width: usize) -> Result<BallotBox> {
    if record.len() != width {
        return Err(Error::Parse {
            line,
            message: format!("expected {width} fields, found {}", record.len()),
        });
    }
    let count = |idx: usize| -> Result<u64> {
        let raw = &record[idx];
        raw.parse::<u64>().map_err(|_| Error::Parse {
            line,
            message: if raw.is_empty() {
                format!("missing value in column {}", idx + 1)
            } else {
                format!("column {}: {raw:?} is not a non-negative integer", idx + 1)
            },
        })
    };
    let box_id = record[3].to_string();
    if box_id.is_empty() {
        return Err(Error::Parse {
            line,
            message: "missing box_id".into(),
        });
    }
    Ok(BallotBox {
        province_id: record[0].to_string(),
        district_id: record[1].to_string(),
        county_id: record[2].to_string(),
        box_id,
        electorate: count(4)?,
        valid_votes: count(5)?,
        votes: (FIXED_COLUMNS.len()..width).map(count).collect::<Result<_>>()?,
    })
}

/// Write a round in the same CSV layout [`parse_round`] reads.
pub fn write_round(round: &ElectionRound, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_round_to(round, std::io::BufWriter::new(file))
}

pub fn write_round_to<W: Write>(round: &ElectionRound, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(FIXED_COLUMNS.iter().copied().chain(round.candidates.iter().map(String::as_str)))?;
    for b in &round.boxes {
        let mut row = vec![
            b.province_id.clone(),
            b.district_id.clone(),
            b.county_id.clone(),
            b.box_id.clone(),
            b.electorate.to_string(),
            b.valid_votes.to_string(),
        ];
        row.extend(b.votes.iter().map(u64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "province_id,district_id,county_id,box_id,electorate,valid_votes,E,K\n";

    fn parse(body: &str) -> Result<ElectionRound> {
        parse_reader(format!("{HEADER}{body}").as_bytes(), "t", &IngestConfig::default())
    }

    fn bx(id: &str, county: &str, electorate: u64, valid: u64, votes: Vec<u64>) -> BallotBox {
        BallotBox {
            box_id: id.into(),
            province_id: "P".into(),
            district_id: "D".into(),
            county_id: county.into(),
            electorate,
            valid_votes: valid,
            votes,
        }
    }

    #[test]
    fn empty_file_with_header() {
        let r = parse("").unwrap();
        assert!(r.is_empty());
        assert_eq!(r.dropped_zero_valid, 0);
        assert_eq!(r.candidates, vec!["E", "K"]);
        assert_eq!(r.hierarchy_counts, HierarchyCounts::default());
    }

    #[test]
    fn zero_valid_rows_are_dropped_and_counted() {
        let r = parse("P,D,C,b1,100,0,0,0\nP,D,C,b2,100,80,40,40\n").unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.dropped_zero_valid, 1);
        assert_eq!(r.boxes[0].box_id, "b2");
    }

    #[test]
    fn errors_cite_line_and_box() {
        match parse("P,D,C,b1,100,80,40,40\nP,D,C,b2,100,x,40,40\n") {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse("P,D,C,b1,100,80,40\n") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse("P,D,C,b1,100,,40,40\n") {
            Err(Error::Parse { line: 2, message }) => assert!(message.contains("missing")),
            other => panic!("unexpected {other:?}"),
        }
        match parse("P,D,C,bad,50,80,40,40\n") {
            Err(Error::Validation { box_id, .. }) => assert_eq!(box_id, "bad"),
            other => panic!("unexpected {other:?}"),
        }
        match parse("P,D,C,b1,100,80,40,40\nP,D,C,b1,90,80,40,40\n") {
            Err(Error::DuplicateBox { box_id, line: 3 }) => assert_eq!(box_id, "b1"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse("P,D,C,b1,100,80,60,40\n"), Err(Error::Validation { .. })));
    }

    #[test]
    fn lenient_mode_drops_bad_rows() {
        let body = "P,D,C,b1,100,80,40,40\nP,D,C,b2,10,80,40,40\nP,D,C,b3,100,-1,0,0\nP,D,C,b4,100,0,0,0\n";
        let cfg = IngestConfig {
            lenient: true,
            ..Default::default()
        };
        let r = parse_reader(format!("{HEADER}{body}").as_bytes(), "t", &cfg).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.dropped_invalid, 2);
        assert_eq!(r.dropped_zero_valid, 1);
    }

    #[test]
    fn header_is_checked() {
        let bad = "province,district_id,county_id,box_id,electorate,valid_votes,E\n";
        assert!(matches!(parse_reader(bad.as_bytes(), "t", &IngestConfig::default()), Err(Error::Header(_))));
        let no_cands = "province_id,district_id,county_id,box_id,electorate,valid_votes\n";
        assert!(matches!(parse_reader(no_cands.as_bytes(), "t", &IngestConfig::default()), Err(Error::Header(_))));
    }

    #[test]
    fn quoted_ids_with_commas() {
        let r = parse("\"Prov, East\",D,C,\"b,1\",100,80,40,40\n").unwrap();
        assert_eq!(r.boxes[0].province_id, "Prov, East");
        assert_eq!(r.boxes[0].box_id, "b,1");
    }

    #[test]
    fn derive_shares_examples() {
        let s = bx("a", "c", 100, 80, vec![40, 0]).derive_shares().unwrap();
        assert_eq!(s.turnout, 0.8);
        assert_eq!(s.vote_share[0], 0.5);

        let s = bx("a", "c", 50, 50, vec![50, 0]).derive_shares().unwrap();
        assert_eq!((s.turnout, s.vote_share[0]), (1.0, 1.0));

        let s = bx("a", "c", 200, 120, vec![30, 90]).derive_shares().unwrap();
        assert_eq!(s.turnout, 0.6);
        assert_eq!(s.vote_share, vec![0.25, 0.75]);

        assert!(matches!(bx("a", "c", 0, 0, vec![0, 0]).derive_shares(), Err(Error::Domain(_))));
    }

    #[test]
    fn filter_threshold() {
        let r = ElectionRound::from_boxes(
            "t",
            vec!["E".into(), "K".into()],
            vec![
                bx("a", "c1", 99, 50, vec![25, 25]),
                bx("b", "c1", 100, 50, vec![25, 25]),
                bx("c", "c2", 500, 50, vec![25, 25]),
            ],
        )
        .unwrap();
        assert_eq!(r.filter_min_electorate(100).len(), 2);
        assert_eq!(r.filter_min_electorate(0), r);
        assert_eq!(r.filter_min_electorate(101).hierarchy_counts.counties, 1);
        assert_eq!(r.len(), 3);
    }

    #[test]
    fn boxes_per_district_counts_county_paths() {
        let r = ElectionRound::from_boxes(
            "t",
            vec!["E".into(), "K".into()],
            vec![bx("a", "c1", 100, 50, vec![25, 25]), bx("b", "c1", 100, 50, vec![25, 25])],
        )
        .unwrap();
        let m = boxes_per_district(&r, AreaLevel::County);
        assert_eq!(m.len(), 1);
        assert_eq!(m.values().copied().collect::<Vec<_>>(), vec![2]);

        let empty = r.retain(|_| false);
        assert!(boxes_per_district(&empty, AreaLevel::County).is_empty());
    }

    #[test]
    fn hierarchy_uses_full_paths() {
        let mut a = bx("a", "Merkez", 100, 50, vec![25, 25]);
        let mut b = bx("b", "Merkez", 100, 50, vec![25, 25]);
        a.province_id = "P1".into();
        b.province_id = "P2".into();
        let r = ElectionRound::from_boxes("t", vec!["E".into(), "K".into()], vec![a, b]).unwrap();
        assert_eq!(
            r.hierarchy_counts,
            HierarchyCounts {
                provinces: 2,
                districts: 2,
                counties: 2
            }
        );
    }
}
