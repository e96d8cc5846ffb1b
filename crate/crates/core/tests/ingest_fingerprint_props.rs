mod common;

use common::{permuted, proptest_config, round_from_rows, rows};
use election_forensics::fingerprint::{
    cumulative_turnout_curve, rank_cumulative_curve, raw_fingerprint, standardize, standardized_fingerprint,
    StandardizeConfig,
};
use election_forensics::ingest::{parse_reader, write_round_to};
use election_forensics::{AreaLevel, BallotBox, ElectionRound, IngestConfig};
use proptest::prelude::*;

proptest! {
    #![proptest_config(proptest_config(64))]

    #[test]
    fn serialization_round_trips(rows in rows(60)) {
        let round = round_from_rows(&rows);
        let mut buf = Vec::new();
        write_round_to(&round, &mut buf).unwrap();
        let cfg = IngestConfig { round_label: Some(round.round_label.clone()), ..Default::default() };
        let back = parse_reader(buf.as_slice(), &round.round_label, &cfg).unwrap();
        prop_assert_eq!(back, round);
    }

    #[test]
    fn electorate_filters_compose(rows in rows(60), a in 0u64..3000, b in 0u64..3000) {
        let round = round_from_rows(&rows);
        let twice = round.filter_min_electorate(a).filter_min_electorate(b);
        prop_assert_eq!(twice, round.filter_min_electorate(a.max(b)));
    }

    #[test]
    fn derived_shares_are_fractions(rows in rows(60)) {
        for b in &round_from_rows(&rows).boxes {
            let d = b.derive_shares().unwrap();
            prop_assert!((0.0..=1.0).contains(&d.turnout));
            prop_assert!(d.vote_share.iter().all(|s| (0.0..=1.0).contains(s)));
        }
    }

    #[test]
    fn valid_total_ignores_order(rows in rows(60), seed in any::<u64>()) {
        let round = round_from_rows(&rows);
        prop_assert_eq!(round.total_valid_votes(), permuted(&round, seed).total_valid_votes());
    }

    #[test]
    fn fingerprints_conserve_boxes(rows in rows(80), bins in 2usize..120) {
        let round = round_from_rows(&rows);
        let raw = raw_fingerprint(&round, "E", bins).unwrap();
        let sum: u64 = raw.grid.iter().flatten().sum();
        prop_assert_eq!(sum, round.len() as u64);
        prop_assert_eq!(raw.n_boxes, round.len() as u64);

        let cfg = StandardizeConfig { bins, range: (0.0, 1e9), ..Default::default() };
        let st = standardized_fingerprint(&round, "E", &cfg).unwrap();
        let sum: u64 = st.grid.iter().flatten().sum();
        prop_assert_eq!(sum + st.skipped_zero_mean, round.len() as u64);
    }

    #[test]
    fn fingerprints_and_curves_ignore_order(rows in rows(80), seed in any::<u64>()) {
        let round = round_from_rows(&rows);
        let other = permuted(&round, seed);
        prop_assert_eq!(raw_fingerprint(&round, "E", 50).unwrap(), raw_fingerprint(&other, "E", 50).unwrap());
        let cfg = StandardizeConfig::default();
        prop_assert_eq!(
            standardized_fingerprint(&round, "E", &cfg).unwrap(),
            standardized_fingerprint(&other, "E", &cfg).unwrap()
        );
        prop_assert_eq!(cumulative_turnout_curve(&round, "E").unwrap(), cumulative_turnout_curve(&other, "E").unwrap());
        prop_assert_eq!(rank_cumulative_curve(&round, "E").unwrap(), rank_cumulative_curve(&other, "E").unwrap());
    }

    #[test]
    fn curves_end_at_the_national_share(rows in rows(80)) {
        let round = round_from_rows(&rows);
        let national = round.national_share(0);
        for curve in [cumulative_turnout_curve(&round, "E").unwrap(), rank_cumulative_curve(&round, "E").unwrap()] {
            let last = curve.last_share().unwrap();
            prop_assert!((last - national).abs() <= 1e-12 * national.max(1e-300));
        }
        let rank = rank_cumulative_curve(&round, "E").unwrap();
        prop_assert_eq!(rank.points.len(), round.len());
    }

    #[test]
    fn singleton_groups_standardize_to_one(rows in rows(40)) {
        // give every box its own county
        let mut round = round_from_rows(&rows);
        for (i, b) in round.boxes.iter_mut().enumerate() {
            b.county_id = format!("solo{i}");
        }
        let st = standardize(&round, 0, AreaLevel::County, false);
        for (p, b) in st.points.iter().zip(&round.boxes) {
            if b.votes[0] == 0 {
                prop_assert!(p.is_none());
            } else {
                prop_assert_eq!(*p, Some([1.0, 1.0]));
            }
        }
    }
}

#[test]
fn rank_curve_matches_brute_force_aggregates() {
    // the smallest 10% of boxes vote 0.9 for E, the rest 0.4
    let n = 1000;
    let boxes: Vec<BallotBox> = (0..n)
        .map(|i| {
            let electorate = 200 + 3 * (n - i) as u64;
            let valid = electorate / 2 * 2;
            let share = if i >= n - n / 10 { 0.9 } else { 0.4 };
            let inc = (share * valid as f64).round() as u64;
            BallotBox {
                box_id: format!("x{i:04}"),
                province_id: "p".into(),
                district_id: "d".into(),
                county_id: format!("c{}", i % 40),
                electorate,
                valid_votes: valid,
                votes: vec![inc, valid - inc],
            }
        })
        .collect();
    let round = ElectionRound::from_boxes("rank", vec!["E".into(), "K".into()], boxes.clone()).unwrap();
    let curve = rank_cumulative_curve(&round, "E").unwrap();

    // boxes were built largest first, so brute force is a running sum in order
    let (mut v, mut t) = (0u64, 0u64);
    for (k, b) in boxes.iter().enumerate() {
        v += b.votes[0];
        t += b.valid_votes;
        let p = curve.points[k];
        assert_eq!(p.threshold, (k + 1) as f64);
        assert!((p.cumulative_share - v as f64 / t as f64).abs() < 1e-12);
    }
    // flat at 0.4 over the first nine deciles, rising only in the last
    let at = |k: usize| curve.points[k - 1].cumulative_share;
    assert!((at(n * 9 / 10) - 0.4).abs() < 1e-3);
    assert!((at(n / 10) - 0.4).abs() < 1e-3);
    assert!(at(n) > at(n * 9 / 10) + 0.005);
}
