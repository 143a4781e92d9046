//! Removing a disc of radius `r` around the degenerate points of `F⁺` changes
//! the propagating sum by `O(r)`.

use periodic_lap::bands::{check_regularity, sample_grid};
use periodic_lap::cell::{CellModel, FieldEvaluator};
use periodic_lap::lap::{propagating_sum, LapContext};
use periodic_lap::lattice::build_frame;
use periodic_lap::medium::{MediumSpec, PreparedSource, SourceSpec};

#[test]
fn exclusion_error_is_linear_in_radius() {
    let medium = MediumSpec::cosine_potential(2, 0.1);
    let j = 1;
    let model = CellModel::new(&medium, j).unwrap();
    let grid = sample_grid(&model, 512, 2, false).unwrap();
    let frame = build_frame(&[1.0, 0.0]).unwrap();
    let lambda = 0.09;
    let rep = check_regularity(&model, &grid, lambda, &frame).unwrap();
    assert!(rep.regular, "{:?}", rep.reasons);
    let level = rep.level_set.unwrap();
    assert_eq!(level.degenerate_points().len(), 2);
    let source = PreparedSource::new(&SourceSpec::gaussian(2, 0.5, 8), j);
    let evaluator = FieldEvaluator::new(2, j, &[vec![2.0, 0.5]]);
    let ctx = LapContext { model: &model, source: &source, evaluator: &evaluator, lambda };
    let full = propagating_sum(&ctx, &level, 0.0).unwrap()[0];
    let radii = [0.02, 0.01, 0.005];
    let diffs: Vec<f64> = radii
        .iter()
        .map(|r| (propagating_sum(&ctx, &level, *r).unwrap()[0] - full).norm())
        .collect();
    eprintln!("full {full} diffs {diffs:?}");
    for w in diffs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.5..2.6).contains(&ratio), "diffs {diffs:?}");
    }
    // slope relative to the size of the sum: the removed mass per unit radius stays bounded
    for (r, d) in radii.iter().zip(&diffs) {
        assert!(d / r < 10.0 * full.norm(), "r={r} d={d}");
    }
}
