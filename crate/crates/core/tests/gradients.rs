use lung_detr::gradcheck::{cases, run_case, REL_TOL};

const CONFIGS: usize = 20;
const SEED: u64 = 0x5eed;

fn check(name: &str) {
    let (name, case) = cases::all_cases()
        .into_iter()
        .find(|(n, _)| *n == name)
        .expect("known case");
    let r = run_case(name, case, CONFIGS, SEED);
    assert!(
        r.passed(),
        "{name}: {} of {CONFIGS} configurations exceed relative error {REL_TOL} (worst {:.3e})",
        r.failures,
        r.max_rel_error
    );
}

macro_rules! gradient_tests {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                check(stringify!($name));
            }
        )*
    };
}

gradient_tests!(
    conv2d,
    group_norm,
    layer_norm,
    softmax,
    elementwise_and_shape_ops,
    relu,
    bilinear_sample,
    deform_sample,
    deformable_attention,
    multi_head_attention,
    giou,
    set_loss,
    backbone,
    encoder,
    decoder,
    heads,
    model_with_set_loss,
);

#[test]
fn every_case_is_covered() {
    assert_eq!(cases::all_cases().len(), 17);
}
