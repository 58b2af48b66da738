mod common;

use common::*;

#[test]
fn objectives_move_in_one_direction_at_every_iteration() {
    for (name, worst, shortest) in monotonicity_suite() {
        assert!(shortest >= 2, "{name}: trace too short to say anything");
        assert!(worst <= MONOTONE_SLACK, "{name}: step against the objective of {worst:e}");
    }
}
