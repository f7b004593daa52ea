//! End-to-end recipe handling on the tiny model: persistence, coverage
//! errors, storage size, float pass-through and mode conversion.

use vmq::exec::{export_recipe, import_recipe_for, ActMode, Ablation, ExecOptions, QuantizedModel, Recipe};
use vmq::insight::{analyze_layers, DEFAULT_OUTLIER_K};
use vmq::jlss::{calibrate, Bits, Hyper, Method};
use vmq::model::{gen_calibration_set, make_pathological_model, random_model, Model, ModelSpec, PathologySpec};
use vmq::{Error, Tensor};

fn fixture() -> (Model, Vec<Tensor<f32>>) {
    let spec = ModelSpec::tiny();
    let model = make_pathological_model(&spec, &PathologySpec::shipped(spec.seq_len()), 3).unwrap();
    let calib = gen_calibration_set(5, 8, &spec).unwrap().into_iter().map(|s| s.patches).collect();
    (model, calib)
}

fn recipe(model: &Model, calib: &[Tensor<f32>], bits: Bits) -> Recipe {
    calibrate(model, calib, bits, &Hyper::default(), Method::PtsGrid).unwrap().0
}

fn logits(model: &Model, r: &Recipe, xs: &[Tensor<f32>]) -> Vec<Vec<f32>> {
    QuantizedModel::new(model, r, ExecOptions::from_recipe(r, Ablation::None))
        .unwrap()
        .forward_batch(xs)
        .unwrap()
}

#[test]
fn recipe_round_trip_is_bit_exact() {
    let (model, calib) = fixture();
    let dir = tempfile::tempdir().unwrap();
    for bits in [Bits::new(8, 8), Bits::new(4, 4), Bits::new(4, 8)] {
        let r = recipe(&model, &calib, bits);
        let path = dir.path().join(format!("{}.vmq", bits.label()));
        export_recipe(&r, &path).unwrap();
        let back = import_recipe_for(&path, &model).unwrap();
        assert_eq!(back, r, "{}", bits.label());
        assert_eq!(logits(&model, &back, &calib), logits(&model, &r, &calib));
    }
}

#[test]
fn missing_layer_is_named() {
    let (model, calib) = fixture();
    let mut r = recipe(&model, &calib, Bits::new(8, 8));
    r.layers.remove("blocks.1.fwd.x_proj");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.vmq");
    export_recipe(&r, &path).unwrap();
    match import_recipe_for(&path, &model) {
        Err(Error::MissingLayer(p)) => assert_eq!(p, "blocks.1.fwd.x_proj"),
        other => panic!("expected a missing-layer error, got {other:?}"),
    }
    assert!(matches!(QuantizedModel::new(&model, &r, ExecOptions::from_recipe(&r, Ablation::None)), Err(Error::MissingLayer(_))));
}

#[test]
fn int4_payload_is_half_of_int8() {
    let (model, calib) = fixture();
    let w8 = recipe(&model, &calib, Bits::new(8, 8)).weight_bytes().unwrap();
    let w4 = recipe(&model, &calib, Bits::new(4, 8)).weight_bytes().unwrap();
    // Odd row lengths pad one nibble per row.
    let ratio = w4 as f64 / w8 as f64;
    assert!((0.5..0.52).contains(&ratio), "{w4} / {w8} = {ratio}");
}

#[test]
fn float_bits_reproduce_the_float_model() {
    let (model, calib) = fixture();
    let r = recipe(&model, &calib, Bits::FLOAT);
    assert!(r.is_float());
    let q = logits(&model, &r, &calib);
    for (x, y) in calib.iter().zip(&q) {
        assert_eq!(&model.forward(x).unwrap(), y);
    }
}

#[test]
fn mode_conversion() {
    let (model, calib) = fixture();
    let pts = recipe(&model, &calib, Bits::new(8, 8));
    let tensor = pts.with_mode(ActMode::PerTensorStatic).unwrap();
    for (path, l) in &pts.layers {
        let t = &tensor.layers[path];
        assert_eq!((t.dx.len(), t.eps.len()), (1, 1));
        // The per-tensor range covers every per-token range, up to the half
        // step the integer zero offset can move either end.
        let qmax = 255.0;
        let slack = t.dx[0] / 2.0 + 1e-6;
        for (&d, &e) in l.dx.iter().zip(&l.eps) {
            assert!(-(t.eps[0] as f32) * t.dx[0] <= -(e as f32) * d + slack, "{path}");
            assert!((qmax - t.eps[0] as f32) * t.dx[0] >= (qmax - e as f32) * d - slack, "{path}");
        }
        assert_eq!(t.wbar, l.wbar);
    }
    let dynamic = tensor.with_mode(ActMode::PerTokenDynamic).unwrap();
    assert!(dynamic.layers.values().all(|l| l.dx.is_empty() && l.eps.is_empty()));
    assert!(dynamic.with_mode(ActMode::Pts).is_err());
    // Every converted recipe still runs.
    for r in [&tensor, &dynamic] {
        assert!(logits(&model, r, &calib[..2]).iter().flatten().all(|v| v.is_finite()));
    }
}

#[test]
fn unit_gain_pathology_is_indistinguishable_from_benign() {
    let spec = ModelSpec::tiny();
    let p = PathologySpec {
        outlier_channels: vec![3, 17],
        outlier_gain: 1.0,
        token_bias: Vec::new(),
        tail_gain: 0.0,
    };
    assert!(p.is_benign());
    let a = make_pathological_model(&spec, &p, 9).unwrap();
    let b = random_model(&spec, 9).unwrap();
    let calib: Vec<_> = gen_calibration_set(5, 16, &spec).unwrap().into_iter().map(|s| s.patches).collect();
    for x in &calib {
        assert_eq!(a.forward(x).unwrap(), b.forward(x).unwrap());
    }
    let layers = vec!["blocks.0.out_proj".to_string()];
    let ra = analyze_layers(&a, &calib, &layers, DEFAULT_OUTLIER_K).unwrap();
    let rb = analyze_layers(&b, &calib, &layers, DEFAULT_OUTLIER_K).unwrap();
    assert_eq!(ra[0].channels.flagged, rb[0].channels.flagged);
    assert_eq!(ra[0].channels.max_over_median, rb[0].channels.max_over_median);
}

#[test]
fn each_ablation_changes_the_output() {
    let (model, calib) = fixture();
    let r = recipe(&model, &calib, Bits::new(8, 8));
    let fp: Vec<Vec<f32>> = calib.iter().map(|x| model.forward(x).unwrap()).collect();
    let run = |ab| {
        QuantizedModel::new(&model, &r, ExecOptions::from_recipe(&r, ab))
            .unwrap()
            .forward_batch(&calib)
            .unwrap()
    };
    let full = run(Ablation::None);
    let hstate = run(Ablation::HiddenStateOnly);
    let clsfp = run(Ablation::ClsFp);
    assert_ne!(full, fp);
    assert_ne!(hstate, fp);
    assert_ne!(hstate, full);
    assert_ne!(clsfp, full);
}
