mod common;

use common::oracles;

#[test]
fn entropy_and_symmetric_kl_match_scalar_loops() {
    oracles::entropy_and_kl().unwrap();
}

#[test]
fn snd_matches_scalar_loops() {
    oracles::snd().unwrap();
}

#[test]
fn info_nce_matches_scalar_loops_and_differences() {
    oracles::info_nce_scalar().unwrap();
}

#[test]
fn lame_matches_brute_force_fixed_point() {
    oracles::lame_fixed_point().unwrap();
}

#[test]
fn spearman_matches_rank_formula() {
    oracles::spearman_rank_formula().unwrap();
}

#[test]
fn loss_gradients_through_the_model_match_finite_differences() {
    oracles::model_gradients().unwrap();
}
