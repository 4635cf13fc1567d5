use std::path::Path;

use segprune::exec::forward;
use segprune::footprint::footprint;
use segprune::init::init_model;
use segprune::lint::{atrous_degeneration, context_positions, lint, Severity};
use segprune::prune::filter::{plan_filters, prune_filters, MergeRule};
use segprune::prune::weight::{prune_global, sparsity_sequence};
use segprune::{io, zoo, Conv2dAttrs, GraphBuilder, LayerKind, Param, Tensor, TensorShape};

fn fixture_path(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

#[test]
fn fixture_files_match_builders() {
    assert_eq!(io::load_arch(fixture_path("deeplabv3_resnet50_os8.json")).unwrap(), zoo::deeplabv3_resnet50_os8());
    assert_eq!(io::load_arch(fixture_path("tiny_segnet.json")).unwrap(), zoo::tiny_segnet());
}

#[test]
fn footprint_and_global_sparsity() {
    let g = init_model(zoo::deeplabv3_resnet50_os8(), 0);
    let f = footprint(&g, TensorShape::new(1, 3, 112, 112).unwrap()).unwrap();
    assert_eq!(f.total_params, 39_633_729);
    assert_eq!(f.buffer_count, 56_764);
    assert_eq!(format!("{:.3}", f.size_mb()), "158.762");
    let macs = f.macs.unwrap() as f64;
    assert!((macs / 7.827e9 - 1.0).abs() < 0.01, "{macs}");

    for b in 1..=3 {
        let n = g.nodes().iter().find(|n| n.id == format!("classifier.0.convs.{b}.0")).unwrap();
        assert_eq!(segprune::footprint::node_param_count(n), 4_718_592);
    }

    let m = prune_global(&g, sparsity_sequence(6).unwrap()).unwrap();
    let nnz = m.kept();
    assert!((600_000..=700_000).contains(&nnz), "{nnz}");
}

#[test]
fn lint_at_112_and_1024() {
    let arch = zoo::deeplabv3_resnet50_os8();
    let r = lint(&arch, TensorShape::new(1, 3, 112, 112).unwrap()).unwrap();
    assert_eq!(r.min_input_size, Some(288));
    for b in 1..=3 {
        let node = format!("classifier.0.convs.{b}.0");
        assert!(r.findings.iter().any(|f| f.rule == "R1" && f.node == node), "{node}");
    }
    let r1_errors = r.findings.iter().filter(|f| f.rule == "R1" && f.severity == Severity::Error).count();
    assert_eq!(r1_errors, 2);
    assert!(r.findings.iter().any(|f| f.rule == "R2" && f.severity == Severity::Error));

    let r = lint(&arch, TensorShape::new(1, 3, 1024, 1024).unwrap()).unwrap();
    assert!(!r.has_errors());
    assert!(r.findings.iter().all(|f| f.rule != "R1" && f.rule != "R2"));

    assert_eq!(context_positions(14, 12), 4);
    let d = atrous_degeneration(14, 14, 12, 3).unwrap();
    assert!(!d.pointwise);
    assert_eq!(d.context_h, 4.0 / 14.0);
}

/// A conv that lint calls pointwise computes exactly its centre-tap 1x1 conv.
#[test]
fn pointwise_verdict_matches_execution() {
    for (size, rate) in [(6usize, 6usize), (7, 9), (5, 12)] {
        assert!(atrous_degeneration(size, size, rate, 3).unwrap().pointwise);
        let mut b = GraphBuilder::new();
        let x = b.input("x", 3);
        let c = b.conv("c", &x, Conv2dAttrs::new(3, 4, 3).padding(rate).dilation(rate).bias(true));
        let dilated = init_model(b.finish(&c).unwrap(), rate as u64);

        let mut b = GraphBuilder::new();
        let x = b.input("x", 3);
        let c = b.conv("c", &x, Conv2dAttrs::new(3, 4, 1).bias(true));
        let point = init_model(b.finish(&c).unwrap(), 0);
        let w = &dilated.params()["c.weight"];
        let centre: Vec<f32> = w.data.chunks(9).map(|k| k[4]).collect();
        let mut params = point.params().clone();
        params.insert("c.weight".into(), Param::new(vec![4, 3, 1, 1], centre).unwrap());
        params.insert("c.bias".into(), dilated.params()["c.bias"].clone());
        let point = point.with_params(params).unwrap();

        let input = Tensor::random(TensorShape::new(2, 3, size, size).unwrap(), 5);
        let a = forward(&dilated, &input, None).unwrap();
        let b = forward(&point, &input, None).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-6, "size {size}, rate {rate}");
    }
}

#[test]
fn filter_pruning_lands_in_band() {
    let g = init_model(zoo::deeplabv3_resnet50_os8(), 0);
    let s = sparsity_sequence(6).unwrap();
    let (lean, report) = prune_filters(&g, s, 1.0, MergeRule::Union).unwrap();
    let lower = {
        let plan = plan_filters(&g, s, 1.0, MergeRule::GroupNorm).unwrap();
        let lean = segprune::prune::filter::rewrite(&g, &plan).unwrap();
        segprune::footprint::count_params(&lean).total_params
    };
    assert!(lower <= report.params_after && report.params_after <= 65_000, "{lower} / {}", report.params_after);
    assert!(report.compression_ratio > 600.0, "{}", report.compression_ratio);
    assert!(lean.nodes().iter().all(|n| match &n.kind {
        LayerKind::Conv2d(c) => c.out_channels >= 1,
        _ => true,
    }));
}
