mod common;

use common::*;
use steinflow::experiments::{gmm_boundary_points, gmm_test_points};
use steinflow::models::{gmm_analytic_posterior, CompletionReading};
use steinflow::numcore::Mat;

fn inputs() -> Vec<Vec<f64>> {
    let mut xs = gmm_test_points(3, 6).unwrap();
    xs.extend(gmm_boundary_points(3, 4).unwrap());
    xs
}

#[test]
fn completed_reading_matches_grid() {
    let theta = Mat::from_vec(2, 2, GMM_THETA.to_vec()).unwrap();
    for x in inputs() {
        let grid = grid_posterior(&x, &theta, GMM_SIGMA, 401, 8.0);
        let post = gmm_analytic_posterior(&x, &theta, GMM_SIGMA, &GMM_MU1, &GMM_MU2, CompletionReading::Completed).unwrap();
        assert!((post.weight - grid.weight).abs() < 1e-3, "{x:?}: {} vs {}", post.weight, grid.weight);
        assert!(euclid(&post.mean1, &grid.mean1) < 1e-3, "{x:?}");
        assert!(euclid(&post.mean2, &grid.mean2) < 1e-3, "{x:?}");
    }
}

#[test]
fn printed_reading_disagrees_with_grid() {
    let theta = Mat::from_vec(2, 2, GMM_THETA.to_vec()).unwrap();
    for x in inputs() {
        let grid = grid_posterior(&x, &theta, GMM_SIGMA, 401, 8.0);
        let post = gmm_analytic_posterior(&x, &theta, GMM_SIGMA, &GMM_MU1, &GMM_MU2, CompletionReading::AsPrinted).unwrap();
        assert!(euclid(&post.mean1, &grid.mean1) > 0.1, "{x:?}");
    }
}

#[test]
fn boundary_inputs_are_ambiguous_under_the_grid_too() {
    let theta = Mat::from_vec(2, 2, GMM_THETA.to_vec()).unwrap();
    for x in gmm_boundary_points(5, 3).unwrap() {
        let w = grid_posterior(&x, &theta, GMM_SIGMA, 401, 8.0).weight;
        assert!((0.2..=0.8).contains(&w), "{w}");
    }
}
