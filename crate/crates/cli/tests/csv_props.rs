use crtlab_cli::csvio::{parse, render, HEADER};
use crtlab_core::TrajectoryPoint;
use proptest::prelude::*;

fn point() -> impl Strategy<Value = TrajectoryPoint> {
    (0u64..1_000_000, 0u64..u64::MAX / 2, any::<f64>(), 0.0f64..1e3, 0.0f64..=1.0).prop_map(|(t, m_t, w1, mmd, bias_level)| {
        TrajectoryPoint { t, m_t, w1: if w1.is_finite() { w1 } else { 0.0 }, mmd, bias_level }
    })
}

proptest! {
    #[test]
    fn render_parse_round_trip(reps in proptest::collection::vec((0usize..64, proptest::collection::vec(point(), 0..20)), 0..5)) {
        let borrowed: Vec<(usize, &[TrajectoryPoint])> = reps.iter().map(|(r, p)| (*r, p.as_slice())).collect();
        let text = render(&borrowed);
        prop_assert!(text.starts_with(HEADER));
        let back = parse(&text).unwrap();
        let flat: Vec<(usize, TrajectoryPoint)> = reps.iter().flat_map(|(r, ps)| ps.iter().map(move |p| (*r, *p))).collect();
        prop_assert_eq!(back, flat);
    }
}

#[test]
fn rejects_wrong_header() {
    assert!(parse("t,replicate,M_t,w1,mmd,bias_level\n").is_err());
    assert!(parse(&format!("{HEADER}\n0,1,2,0.5\n")).is_err());
}
