use std::collections::BTreeMap;

use proptest::prelude::*;
use vmsift::clock::SimTime;
use vmsift::mem_model::{AccessType, Gpn, GuestMemory};
use vmsift::simulator::EventTag;
use vmsift::tracker::{AccessRecord, Tracker};

const PAGES: u64 = 64;

fn access_type() -> impl Strategy<Value = AccessType> {
    prop_oneof![
        Just(AccessType::Read),
        Just(AccessType::Write),
        Just(AccessType::Execute)
    ]
}

/// Accesses with nondecreasing times.
fn stream() -> impl Strategy<Value = Vec<(Gpn, AccessType, u64)>> {
    prop::collection::vec((0..PAGES, access_type(), 0u64..50), 0..300).prop_map(|v| {
        let mut t = 0;
        v.into_iter()
            .map(|(g, a, dt)| {
                t += dt;
                (g, a, t)
            })
            .collect()
    })
}

/// First access per page inside [start, stop], in order of occurrence.
fn first_occurrences(
    accesses: &[(Gpn, AccessType, u64)],
    start: u64,
    stop: u64,
) -> Vec<AccessRecord> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for &(gpa, access_type, t) in accesses {
        if t < start || t > stop || seen.contains_key(&gpa) {
            continue;
        }
        seen.insert(gpa, ());
        out.push(AccessRecord {
            gpa_page: gpa,
            time: SimTime::from_us(t),
            access_type,
        });
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn tracks_first_occurrences(
        accesses in stream(),
        start in 0u64..2000,
        event in 0u64..20_000,
        delay in 0u64..500,
    ) {
        let mut mem = GuestMemory::new(PAGES);
        let mut tracker = Tracker::new();
        tracker.start(&mut mem, SimTime::from_us(start)).unwrap();
        let event = SimTime::from_us(event);
        let mut requested = false;
        for &(gpa, access_type, t) in &accesses {
            let now = SimTime::from_us(t);
            if !requested && now > event {
                tracker.stop(event, EventTag::ChangeCipherSpec, SimTime::from_us(delay)).unwrap();
                requested = true;
            }
            tracker.on_access(&mut mem, gpa, access_type, now);
        }
        let stop = tracker.stop(event, EventTag::ChangeCipherSpec, SimTime::from_us(delay)).unwrap();
        let session = tracker.finish(&mut mem, SimTime::MAX).unwrap();
        prop_assert_eq!(session.stop_time, stop);
        let expected = first_occurrences(&accesses, start, stop.as_us());
        prop_assert_eq!(session.records, expected);
        for gpa in 0..PAGES {
            prop_assert!(!mem.slat_entry(gpa).unwrap().tracked);
        }
    }
}

#[test]
fn two_reads_one_record() {
    let mut mem = GuestMemory::new(8);
    let mut tracker = Tracker::new();
    tracker.start(&mut mem, SimTime::ZERO).unwrap();
    tracker.on_access(&mut mem, 5, AccessType::Read, SimTime::from_ms(1));
    tracker.on_access(&mut mem, 5, AccessType::Read, SimTime::from_ms(2));
    tracker.on_access(&mut mem, 6, AccessType::Write, SimTime::from_ms(3));
    tracker.on_access(&mut mem, 6, AccessType::Read, SimTime::from_ms(4));
    let s = tracker.finish(&mut mem, SimTime::from_ms(5)).unwrap();
    let got: Vec<(Gpn, AccessType)> = s
        .records
        .iter()
        .map(|r| (r.gpa_page, r.access_type))
        .collect();
    assert_eq!(got, vec![(5, AccessType::Read), (6, AccessType::Write)]);
}

#[test]
fn reaction_time_from_stop_and_use() {
    let mut mem = GuestMemory::new(8);
    let mut tracker = Tracker::new();
    tracker.start(&mut mem, SimTime::ZERO).unwrap();
    let stop = tracker
        .stop(
            SimTime::from_ms(100),
            EventTag::SshNewKeys,
            SimTime::from_ms(4),
        )
        .unwrap();
    assert_eq!(stop, SimTime::from_ms(104));
    let last_use = SimTime::from_ms(98);
    assert_eq!((stop - last_use).as_ms_f64(), 6.0);
    let mut t = Tracker::new();
    t.start(&mut mem, SimTime::ZERO).unwrap();
    let zero = t
        .stop(SimTime::from_ms(7), EventTag::SshNewKeys, SimTime::ZERO)
        .unwrap();
    assert_eq!(zero, SimTime::from_ms(7));
}
