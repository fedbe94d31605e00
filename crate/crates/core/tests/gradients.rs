//! Randomized finite-difference checks of every tape op, evaluated in f64.

mod support;

use support::ops::{self, worst_error, TOLERANCE};

macro_rules! op_tests {
    ($($name:ident),* $(,)?) => {$(
        #[test]
        fn $name() {
            let worst = worst_error(stringify!($name), ops::$name);
            assert!(worst <= TOLERANCE, "{}: max relative error {worst:e}", stringify!($name));
        }
    )*};
}

op_tests!(
    dense,
    conv2d,
    transposed_conv2d,
    conv3d,
    relu,
    leaky_relu,
    abs,
    maxpool2x2,
    avg_pool,
    global_avg_pool,
    bilinear_upsample2x,
    trilinear_upsample2x,
    concat_channels,
    add,
    mul,
    sub,
    scalar_mul,
    sum,
    mean,
    log,
    exp,
    softmax,
    sigmoid,
    softplus,
    reshape,
    select_columns,
    softmax_cross_entropy,
    two_layer_network,
);

#[test]
fn catalogue_covers_every_test() {
    assert_eq!(ops::CATALOGUE.len(), 28);
}
