//! Every differentiable op, every loss and both desk networks, in f32 and f64.

mod support;

use support::gradcheck::{loss_suite, network_suite, op_suite};

#[test]
fn ops_f64() {
    op_suite::<f64>();
}

#[test]
fn ops_f32() {
    op_suite::<f32>();
}

#[test]
fn losses_f64() {
    loss_suite::<f64>();
}

#[test]
fn losses_f32() {
    loss_suite::<f32>();
}

#[test]
fn desk_networks_f64() {
    network_suite::<f64>(3);
}

#[test]
fn desk_networks_f32() {
    network_suite::<f32>(3);
}
