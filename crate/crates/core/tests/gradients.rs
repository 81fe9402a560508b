//! Reverse-mode gradients against central finite differences.

mod common;

use common::{check_f32, check_f64, CASES, TOL_F32, TOL_F64};

macro_rules! gradient_tests {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                let name = stringify!($name);
                let e64 = check_f64(name);
                assert!(e64 <= TOL_F64, "{name} f64 relative error {e64:e}");
                let e32 = check_f32(name);
                assert!(e32 <= TOL_F32, "{name} f32 relative error {e32:e}");
            }
        )*

        #[test]
        fn every_case_has_a_test() {
            let covered = [$(stringify!($name)),*];
            assert_eq!(covered.as_slice(), CASES);
        }
    };
}

gradient_tests!(
    add,
    sub,
    mul,
    scale,
    add_bias_channel,
    add_bias_last,
    matmul,
    batch_matmul,
    batch_matmul_ta,
    batch_matmul_tb,
    batch_matmul_ta_tb,
    reshape,
    permute,
    relu,
    gelu,
    softmax,
    softmax_causal,
    layer_norm,
    embedding,
    conv2d,
    conv2d_strided,
    conv_transpose2d,
    conv_transpose2d_strided,
    sum,
    mean,
    sum_squares,
    cross_entropy,
    attention,
    attention_causal,
    composite,
);

#[test]
fn stop_gradient_blocks_exactly() {
    let (grad, x) = common::stop_gradient_probe();
    assert_eq!(grad, x);
    assert!(common::stop_gradient_forward_exact());
}
