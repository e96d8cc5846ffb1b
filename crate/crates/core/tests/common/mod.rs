#![allow(dead_code)]

use election_forensics::{BallotBox, ElectionRound};
use proptest::prelude::*;

/// Box rows as (electorate, turnout fraction, share fraction, county).
pub type Row = (u64, f64, f64, u8);

pub fn rows(max: usize) -> impl Strategy<Value = Vec<Row>> {
    prop::collection::vec((1u64..3000, 0.01f64..=1.0, 0.0f64..=1.0, 0u8..12), 1..max)
}

pub fn round_from_rows(rows: &[Row]) -> ElectionRound {
    let boxes = rows
        .iter()
        .enumerate()
        .map(|(i, &(e, t, v, c))| {
            let valid = ((t * e as f64).round() as u64).clamp(1, e);
            let inc = ((v * valid as f64).round() as u64).min(valid);
            BallotBox {
                box_id: format!("b{i}"),
                province_id: format!("p{}", c % 3),
                district_id: format!("d{}", c % 6),
                county_id: format!("c{c}"),
                electorate: e,
                valid_votes: valid,
                votes: vec![inc, valid - inc],
            }
        })
        .collect();
    ElectionRound::from_boxes("prop", vec!["E".into(), "K".into()], boxes).unwrap()
}

pub fn permuted(round: &ElectionRound, seed: u64) -> ElectionRound {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut boxes = round.boxes.clone();
    boxes.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    ElectionRound::from_boxes(round.round_label.clone(), round.candidates.clone(), boxes).unwrap()
}

pub fn proptest_config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(cases)
    }
}
