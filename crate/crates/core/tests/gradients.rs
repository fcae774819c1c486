mod common;

use common::*;
use rectrack::extractor::Mode;
use rectrack::numeric::GradCheckReport;
use rectrack::recurrent::{DenseOutput, Variant};

fn assert_passes(r: GradCheckReport) {
    assert!(
        r.passed,
        "worst {:?}, max rel err {:e}",
        r.worst(),
        r.max_rel_err
    );
    assert!(r.coords_checked > 0);
}

#[test]
fn lstm_cell_over_three_steps() {
    assert_passes(lstm_cell());
}

#[test]
fn plain_stack() {
    assert_passes(module(Variant::Plain, 5, 4, DenseOutput::Concat));
}

#[test]
fn residual_block_alone() {
    assert_passes(residual_block());
}

#[test]
fn residual_stack() {
    assert_passes(module(Variant::Residual, 5, 5, DenseOutput::Concat));
}

#[test]
fn dense_block_both_outputs() {
    assert_passes(module(Variant::Dense, 5, 3, DenseOutput::Concat));
    assert_passes(module(Variant::Dense, 5, 3, DenseOutput::Last));
}

#[test]
fn extractor_with_and_without_batchnorm() {
    assert_passes(extractor(false, Mode::Train));
    assert_passes(extractor(true, Mode::Train));
    assert_passes(extractor(true, Mode::Infer));
}

#[test]
fn full_desk_models_unrolled_three_steps() {
    for v in Variant::ALL {
        assert_passes(full_model(v));
    }
}
