use nodulenet::evaluator::{froc, GroundTruthSet, FP_RATES};
use nodulenet::geometry3d::Box3D;
use nodulenet::heads::{Candidate, ScoreField};
use nodulenet::volume_store::{render_ellipsoid, GroundTruthNodule};
use proptest::prelude::*;

const SHAPE: [usize; 3] = [24; 3];

fn nodule(center: [f64; 3]) -> GroundTruthNodule {
    GroundTruthNodule::from_mask(&render_ellipsoid(SHAPE, center, [2.5; 3]), 4).unwrap()
}

/// Scans with nodules on a coarse lattice and candidates scattered around them.
fn arb_instance() -> impl Strategy<Value = (GroundTruthSet, Vec<Candidate>)> {
    let scans = prop::collection::vec(prop::collection::vec((0..3usize, 0..3usize), 0..3), 1..4);
    (scans, prop::collection::vec((0..4usize, prop::array::uniform3(2.0..22.0f64), 0..12u32), 0..20)).prop_map(
        |(scans, cands)| {
            let mut gts = GroundTruthSet::new();
            for (i, cells) in scans.iter().enumerate() {
                let mut v: Vec<GroundTruthNodule> = Vec::new();
                for &(a, b) in cells {
                    let c = [6.0 + 6.0 * a as f64, 6.0 + 6.0 * b as f64, 12.0];
                    if v.iter().all(|g| g.center_vox != nodule(c).center_vox) {
                        v.push(nodule(c));
                    }
                }
                gts.insert(format!("s{i}"), v);
            }
            let n = gts.len();
            let cands = cands
                .into_iter()
                .map(|(s, center, p)| Candidate {
                    volume_id: format!("s{}", s % n),
                    bbox: Box3D::cube(center, 4.0),
                    p_ncs: p as f64 / 11.0,
                    p_fpr: None,
                    p_fu: None,
                    mask: None,
                })
                .collect();
            (gts, cands)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sensitivities_are_monotone_and_cpm_bounded((gts, cands) in arb_instance()) {
        let c = froc(&cands, &gts, ScoreField::Ncs).unwrap();
        for w in c.sensitivities.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        prop_assert!((0.0..=1.0).contains(&c.cpm));
        for p in c.points.windows(2) {
            prop_assert!(p[0].false_positives <= p[1].false_positives);
            prop_assert!(p[0].detected <= p[1].detected);
        }
    }

    #[test]
    fn a_new_lowest_candidate_never_lowers_sensitivity((gts, cands) in arb_instance(), extra in prop::array::uniform3(2.0..22.0f64)) {
        let before = froc(&cands, &gts, ScoreField::Ncs).unwrap();
        let lowest = cands.iter().map(|c| c.p_ncs).fold(1.0, f64::min);
        let mut more = cands.clone();
        more.push(Candidate {
            volume_id: "s0".into(),
            bbox: Box3D::cube(extra, 4.0),
            p_ncs: lowest / 2.0,
            p_fpr: None,
            p_fu: None,
            mask: None,
        });
        let after = froc(&more, &gts, ScoreField::Ncs).unwrap();
        for i in 0..FP_RATES.len() {
            prop_assert!(after.sensitivities[i] >= before.sensitivities[i]);
        }
    }

    #[test]
    fn candidate_order_does_not_matter((gts, cands) in arb_instance()) {
        let mut rev = cands.clone();
        rev.reverse();
        prop_assert_eq!(
            froc(&cands, &gts, ScoreField::Ncs).unwrap().sensitivities,
            froc(&rev, &gts, ScoreField::Ncs).unwrap().sensitivities
        );
    }
}
