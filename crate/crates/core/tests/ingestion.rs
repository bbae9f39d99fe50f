use datasuff_core::ghr::{
    simulate, GhrParams, InitialState, Interruption, InterruptionKind, LeadProfile, LeadSegment, SimulationSetup,
};
use datasuff_core::ingestion::sort_chronologically;
use datasuff_core::{extract_events, parse_log, pool_variable, write_log, ColumnMap, SampleRecord, ScenarioRules, Variable};
use proptest::prelude::*;

fn steady_trip(duration: f64, interruptions: Vec<Interruption>) -> Vec<SampleRecord> {
    let params = GhrParams { c: 1.0, r: 0.0, l: 0.0, reaction_time: 1.0 };
    let lead = LeadProfile { segments: vec![LeadSegment::Constant { duration, speed: 20.0 }], interruptions };
    let setup = SimulationSetup::new(params, lead, InitialState { speed: 20.0, spacing: 30.0 }, duration);
    simulate(&setup, 0).unwrap().records
}

fn record(t: f64, v_e: f64, delta_d: Option<f64>) -> SampleRecord {
    SampleRecord {
        timestamp: t,
        driver_id: "d".into(),
        trip_id: "t".into(),
        v_e,
        a_e: 0.0,
        delta_v: 0.0,
        delta_d,
        lane_change: false,
        cut_in: false,
    }
}

#[test]
fn synthetic_rows_round_trip() {
    let params = GhrParams { c: 0.8, r: 0.0, l: 0.0, reaction_time: 0.5 };
    let lead = LeadProfile {
        segments: vec![LeadSegment::Sinusoid { duration: 1.0, mean: 17.3, amplitude: 1.1, period: 7.0 }],
        interruptions: vec![],
    };
    let mut setup = SimulationSetup::new(params, lead, InitialState { speed: 16.2, spacing: 27.5 }, 0.3);
    setup.noise_std = 0.4;
    let records = simulate(&setup, 11).unwrap().records;
    assert_eq!(records.len(), 3);

    let mut bytes = Vec::new();
    write_log(&records, &mut bytes).unwrap();
    let parsed = parse_log(bytes.as_slice(), &ColumnMap::default()).unwrap();
    assert!(parsed.row_errors.is_empty());
    assert_eq!(parsed.records.len(), 3);
    for (a, b) in records.iter().zip(&parsed.records) {
        assert_eq!((&a.driver_id, &a.trip_id), (&b.driver_id, &b.trip_id));
        for (x, y) in [(a.timestamp, b.timestamp), (a.v_e, b.v_e), (a.a_e, b.a_e), (a.delta_v, b.delta_v)] {
            assert!((x - y).abs() <= 1e-9);
        }
        assert!((a.delta_d.unwrap() - b.delta_d.unwrap()).abs() <= 1e-9);
        assert_eq!((a.lane_change, a.cut_in), (b.lane_change, b.cut_in));
    }
}

#[test]
fn bad_value_is_reported_and_the_rest_kept() {
    let text = "timestamp,driver_id,trip_id,v_e,a_e,delta_v,delta_d,lane_change,cut_in\n\
                0.0,d,t,20,0,0,30,0,0\n\
                0.1,d,t,abc,0,0,30,0,0\n\
                0.2,d,t,20,0,0,30,0,0\n";
    let parsed = parse_log(text.as_bytes(), &ColumnMap::default()).unwrap();
    assert_eq!(parsed.records.len(), 2);
    assert_eq!(parsed.row_errors.len(), 1);
    assert_eq!(parsed.row_errors[0].line, 3);
    assert_eq!(parsed.row_errors[0].column, "v_e");
}

#[test]
fn scripted_lane_change_splits_into_two_events() {
    let lane_change = Interruption { time: 60.0, kind: InterruptionKind::LaneChange, duration: None };
    let records = steady_trip(120.0, vec![lane_change]);
    let flagged: Vec<f64> = records.iter().filter(|r| r.lane_change).map(|r| r.timestamp).collect();
    assert_eq!(flagged.len(), 1);
    assert!((flagged[0] - 60.0).abs() < 1e-9);

    let set = extract_events(&records, &ScenarioRules::default());
    assert_eq!(set.events.len(), 2);
    let (first, second) = (&set.events[0], &set.events[1]);
    assert!((first.samples.last().unwrap().timestamp - 59.9).abs() < 1e-9);
    assert!((second.samples[0].timestamp - 60.1).abs() < 1e-9);
    assert_eq!(first.len(), 600);
    assert_eq!(second.len(), 599);
}

#[test]
fn scripted_cut_in_at_thirty_seconds_is_a_boundary() {
    let cut_in = Interruption { time: 30.0, kind: InterruptionKind::CutIn, duration: None };
    let records = steady_trip(120.0, vec![cut_in]);
    let set = extract_events(&records, &ScenarioRules::default());
    assert_eq!(set.events.len(), 2);
    // The first fragment is exactly 30 s long and survives the inclusive rule.
    assert!((set.events[0].duration - 30.0).abs() < 1e-9);
    assert!((set.events[1].samples[0].timestamp - 30.1).abs() < 1e-9);
}

#[test]
fn boundary_values_follow_strict_and_inclusive_rules() {
    let rules = ScenarioRules::default();
    let at_speed_floor: Vec<_> = (0..400).map(|i| record(i as f64 * 0.1, 5.0, Some(50.0))).collect();
    assert!(extract_events(&at_speed_floor, &rules).events.is_empty());

    let at_distance_cap: Vec<_> = (0..400).map(|i| record(i as f64 * 0.1, 5.0001, Some(120.0))).collect();
    let set = extract_events(&at_distance_cap, &rules);
    assert_eq!(set.events.len(), 1);
    assert_eq!(set.events[0].len(), 400);

    let beyond_cap: Vec<_> = (0..400).map(|i| record(i as f64 * 0.1, 20.0, Some(120.0 + 1e-9))).collect();
    assert!(extract_events(&beyond_cap, &rules).events.is_empty());
}

#[test]
fn missing_target_ends_an_event() {
    let mut records: Vec<_> = (0..700).map(|i| record(i as f64 * 0.1, 20.0, Some(40.0))).collect();
    records[350].delta_d = None;
    let set = extract_events(&records, &ScenarioRules::default());
    assert_eq!(set.events.len(), 2);
    assert_eq!(set.events[0].len() + set.events[1].len(), 699);
}

#[test]
fn pooling_is_chronological_after_sorting() {
    let mut records = Vec::new();
    for (trip, start) in [("a", 0.0), ("b", 500.0), ("c", 1000.0)] {
        for i in 0..400 {
            let mut r = record(start + i as f64 * 0.1, 10.0 + start / 100.0 + i as f64 * 0.01, Some(30.0));
            r.trip_id = trip.into();
            records.push(r);
        }
    }
    let events = extract_events(&records, &ScenarioRules::default()).events;
    let expected = pool_variable(&events, Variable::EgoSpeed).unwrap();
    assert_eq!(expected.len(), 1200);

    let mut shuffled = vec![events[2].clone(), events[0].clone(), events[1].clone()];
    assert_ne!(pool_variable(&shuffled, Variable::EgoSpeed).unwrap(), expected);
    sort_chronologically(&mut shuffled);
    assert_eq!(pool_variable(&shuffled, Variable::EgoSpeed).unwrap(), expected);
}

#[test]
fn single_event_pools_to_its_column() {
    let records: Vec<_> = (0..300).map(|i| record(i as f64 * 0.1, 6.0 + i as f64, Some(30.0))).collect();
    let events = extract_events(&records, &ScenarioRules::default()).events;
    let column: Vec<f64> = records.iter().map(|r| r.v_e).collect();
    assert_eq!(pool_variable(&events, Variable::EgoSpeed).unwrap(), column);
}

/// Per-sample predicates, independent of the library's own rule code.
fn admissible(r: &SampleRecord) -> bool {
    r.v_e > 5.0 && matches!(r.delta_d, Some(d) if d <= 120.0) && !r.lane_change && !r.cut_in
}

fn arb_records() -> impl Strategy<Value = Vec<SampleRecord>> {
    // Runs of samples with occasional disqualifying values and dropped samples.
    prop::collection::vec((0u8..40, 1usize..4), 1..200).prop_map(|steps| {
        let mut out = Vec::new();
        let mut t = 0.0;
        for (kind, advance) in steps {
            let mut r = record(t, 12.0, Some(60.0));
            match kind {
                0 => r.v_e = 5.0,
                1 => r.delta_d = Some(121.0),
                2 => r.delta_d = None,
                3 => r.cut_in = true,
                4 => r.lane_change = true,
                _ => {}
            }
            for _ in 0..60 {
                let mut s = r.clone();
                s.timestamp = t;
                out.push(s);
                t += 0.1;
            }
            t += 0.1 * (advance - 1) as f64;
        }
        out
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn extraction_is_idempotent_and_sound(records in arb_records()) {
        let rules = ScenarioRules::default();
        let first = extract_events(&records, &rules);
        prop_assert!(first.total_samples() <= records.len());
        for event in &first.events {
            prop_assert!(event.duration + 1e-9 >= 30.0);
            prop_assert!(event.samples.iter().all(admissible));
            for pair in event.samples.windows(2) {
                prop_assert!(pair[1].timestamp - pair[0].timestamp <= 0.2 + 1e-9);
            }
        }
        let flat: Vec<SampleRecord> = first.events.iter().flat_map(|e| e.samples.clone()).collect();
        let second = extract_events(&flat, &rules);
        prop_assert_eq!(second.events, first.events);
    }
}
