use proptest::prelude::*;
use scaar_core::trace::{read_scar, read_scar_bytes, write_scar, write_scar_bytes, Trace, TraceSet};

fn arb_set() -> impl Strategy<Value = TraceSet> {
    (1usize..8, prop::bool::ANY, 1usize..40).prop_flat_map(|(n_classes, variable, len)| {
        let lens = if variable {
            (1usize..40).boxed()
        } else {
            Just(len).boxed()
        };
        let trace = (lens, 0..n_classes as u16, 0u32..3).prop_flat_map(|(len, label, session)| {
            prop::collection::vec(-1e6f32..1e6, len).prop_map(move |s| Trace::new(s, label).with_session(session))
        });
        prop::collection::vec(trace, 1..10).prop_map(move |traces| {
            if variable {
                TraceSet::variable(traces, n_classes)
            } else {
                TraceSet::new(traces, n_classes)
            }
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn file_round_trip(set in arb_set()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.scar");
        let written = write_scar(&set, &path).unwrap();
        prop_assert_eq!(written, std::fs::metadata(&path).unwrap().len());
        prop_assert_eq!(read_scar(&path).unwrap(), set);
    }

    #[test]
    fn truncated_files_are_rejected(set in arb_set(), cut in 0.0f64..1.0) {
        let bytes = write_scar_bytes(&set).unwrap();
        let keep = (cut * bytes.len() as f64) as usize;
        prop_assert!(read_scar_bytes(&bytes[..keep]).is_err());
    }
}

#[test]
fn trailing_bytes_and_bad_magic_are_rejected() {
    let set = TraceSet::new(vec![Trace::new(vec![1.0, 2.0], 0)], 1);
    let mut bytes = write_scar_bytes(&set).unwrap();
    bytes.push(0);
    assert!(read_scar_bytes(&bytes).is_err());
    bytes.pop();
    bytes[0] = b'X';
    assert!(read_scar_bytes(&bytes).is_err());
}

#[test]
fn invalid_sets_are_not_written() {
    let nan = TraceSet::new(vec![Trace::new(vec![f32::NAN], 0)], 1);
    assert!(write_scar_bytes(&nan).is_err());
    let label = TraceSet::new(vec![Trace::new(vec![1.0], 3)], 2);
    assert!(write_scar_bytes(&label).is_err());
}
