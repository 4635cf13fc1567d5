//! Bundled architectures.
//!
//! `deeplabv3_resnet50` follows the torchvision layout (ResNet-50 backbone
//! with dilated stages 3 and 4 for output stride 8, ASPP head) with a
//! single-class output convolution, and keeps torchvision's module names so
//! parameter names line up with that implementation's state dict.

use crate::error::Result;
use crate::graph::{Conv2dAttrs, GraphBuilder, GraphDef, LayerKind, UpsampleSize};

/// Torchvision's hard-coded ASPP rates for output stride 8.
pub const DEEPLAB_OS8_RATES: [usize; 3] = [12, 24, 36];

/// Torchvision-style bottleneck: 1x1 reduce, 3x3 (stride, dilation), 1x1
/// expand, optional projection shortcut.
#[allow(clippy::too_many_arguments)]
fn bottleneck(
    b: &mut GraphBuilder,
    prefix: &str,
    src: &str,
    in_c: usize,
    planes: usize,
    stride: usize,
    dilation: usize,
    project: bool,
) -> String {
    let out_c = planes * 4;
    let c1 = b.conv(&format!("{prefix}.conv1"), src, Conv2dAttrs::new(in_c, planes, 1));
    let n1 = b.bn(&format!("{prefix}.bn1"), &c1, planes);
    let r1 = b.relu(&format!("{prefix}.relu1"), &n1);
    let c2 = b.conv(
        &format!("{prefix}.conv2"),
        &r1,
        Conv2dAttrs::new(planes, planes, 3)
            .stride(stride)
            .padding(dilation)
            .dilation(dilation),
    );
    let n2 = b.bn(&format!("{prefix}.bn2"), &c2, planes);
    let r2 = b.relu(&format!("{prefix}.relu2"), &n2);
    let c3 = b.conv(&format!("{prefix}.conv3"), &r2, Conv2dAttrs::new(planes, out_c, 1));
    let n3 = b.bn(&format!("{prefix}.bn3"), &c3, out_c);
    let shortcut = if project {
        let d = b.conv(
            &format!("{prefix}.downsample.0"),
            src,
            Conv2dAttrs::new(in_c, out_c, 1).stride(stride),
        );
        b.bn(&format!("{prefix}.downsample.1"), &d, out_c)
    } else {
        src.to_string()
    };
    let sum = b.add(&format!("{prefix}.add"), &[&n3, &shortcut]);
    b.relu(&format!("{prefix}.relu"), &sum)
}

/// DeepLabV3 with a ResNet-50 backbone at output stride 8.
///
/// Stage 3 and 4 strides are replaced by dilation 2 and 4 (the first block of
/// each dilated stage keeps the previous dilation), the ASPP uses `rates`,
/// and the head emits `num_classes` logits upsampled to the input size.
pub fn deeplabv3_resnet50(num_classes: usize, rates: [usize; 3]) -> Result<GraphDef> {
    let mut b = GraphBuilder::new();
    let x = b.input("input", 3);
    let c = b.conv(
        "backbone.conv1",
        &x,
        Conv2dAttrs::new(3, 64, 7).stride(2).padding(3),
    );
    let n = b.bn("backbone.bn1", &c, 64);
    let r = b.relu("backbone.relu", &n);
    let mut cur = b.push(
        "backbone.maxpool",
        LayerKind::MaxPool2d { kernel: 3, stride: 2, padding: 1 },
        &[&r],
    );

    // (blocks, planes, stride, dilation of first block, dilation of others)
    let stages = [(3, 64, 1, 1, 1), (4, 128, 2, 1, 1), (6, 256, 1, 1, 2), (3, 512, 1, 2, 4)];
    let mut in_c = 64;
    for (si, &(blocks, planes, stride, first_dil, dil)) in stages.iter().enumerate() {
        for bi in 0..blocks {
            let prefix = format!("backbone.layer{}.{bi}", si + 1);
            let (s, d) = if bi == 0 { (stride, first_dil) } else { (1, dil) };
            cur = bottleneck(&mut b, &prefix, &cur, in_c, planes, s, d, bi == 0);
            in_c = planes * 4;
        }
    }
    b.mark_backbone_output(&cur);
    let feat = cur;

    let mut branches = Vec::new();
    let c0 = b.conv("classifier.0.convs.0.0", &feat, Conv2dAttrs::new(2048, 256, 1));
    let n0 = b.bn("classifier.0.convs.0.1", &c0, 256);
    branches.push(b.relu("classifier.0.convs.0.2", &n0));
    for (i, rate) in rates.iter().enumerate() {
        let p = format!("classifier.0.convs.{}", i + 1);
        let c = b.conv(
            &format!("{p}.0"),
            &feat,
            Conv2dAttrs::new(2048, 256, 3).padding(*rate).dilation(*rate),
        );
        let n = b.bn(&format!("{p}.1"), &c, 256);
        branches.push(b.relu(&format!("{p}.2"), &n));
    }
    let gp = b.push("classifier.0.convs.4.0", LayerKind::GlobalAvgPool, &[&feat]);
    let gc = b.conv("classifier.0.convs.4.1", &gp, Conv2dAttrs::new(2048, 256, 1));
    let gn = b.bn("classifier.0.convs.4.2", &gc, 256);
    let gr = b.relu("classifier.0.convs.4.3", &gn);
    branches.push(b.push(
        "classifier.0.convs.4.upsample",
        LayerKind::BilinearUpsample { size: UpsampleSize::MatchInput },
        &[&gr, &feat],
    ));
    let refs: Vec<&str> = branches.iter().map(String::as_str).collect();
    let cat = b.concat("classifier.0.concat", &refs);
    let pc = b.conv("classifier.0.project.0", &cat, Conv2dAttrs::new(1280, 256, 1));
    let pn = b.bn("classifier.0.project.1", &pc, 256);
    // project.3 (dropout) is the identity at inference.
    let pr = b.relu("classifier.0.project.2", &pn);
    let hc = b.conv("classifier.1", &pr, Conv2dAttrs::new(256, 256, 3).padding(1));
    let hn = b.bn("classifier.2", &hc, 256);
    let hr = b.relu("classifier.3", &hn);
    let logits = b.conv("classifier.4", &hr, Conv2dAttrs::new(256, num_classes, 1).bias(true));
    let out = b.push(
        "upsample",
        LayerKind::BilinearUpsample { size: UpsampleSize::MatchInput },
        &[&logits, &x],
    );
    b.finish(&out)
}

/// The configuration used for frame-level ventricle segmentation: one class,
/// rates 12/24/36, output stride 8.
pub fn deeplabv3_resnet50_os8() -> GraphDef {
    deeplabv3_resnet50(1, DEEPLAB_OS8_RATES).expect("bundled architecture is valid")
}

/// Small dilated encoder with a mini-ASPP head for desk-scale binary
/// segmentation of single-channel images (any size divisible by 4).
///
/// The backbone is a plain conv chain down to output stride 4; the head has
/// a 1x1 branch, two atrous branches (rates 2 and 4), a pooled branch and a
/// concat fan-in. Every channel count is a multiple of 8 so filter fractions
/// in steps of 1/8 remove whole filters exactly.
pub fn tiny_segnet() -> GraphDef {
    tiny_segnet_with_width(32).expect("bundled architecture is valid")
}

pub fn tiny_segnet_with_width(base: usize) -> Result<GraphDef> {
    let (c1, c2, c3) = (base, base * 2, base * 4);
    let mut b = GraphBuilder::new();
    let x = b.input("input", 1);
    let stem = b.conv_bn_relu("stem", &x, Conv2dAttrs::new(1, c1, 3).stride(2).padding(1));
    let e1 = b.conv_bn_relu("enc1", &stem, Conv2dAttrs::new(c1, c2, 3).stride(2).padding(1));
    let e2 = b.conv_bn_relu("enc2", &e1, Conv2dAttrs::new(c2, c2, 3).padding(1));
    let feat = b.conv_bn_relu("enc3", &e2, Conv2dAttrs::new(c2, c3, 3).padding(1));
    b.mark_backbone_output(&feat);

    let a0 = b.conv_bn_relu("aspp.b0", &feat, Conv2dAttrs::new(c3, c2, 1));
    let a1 = b.conv_bn_relu("aspp.b1", &feat, Conv2dAttrs::new(c3, c2, 3).padding(2).dilation(2));
    let a2 = b.conv_bn_relu("aspp.b2", &feat, Conv2dAttrs::new(c3, c2, 3).padding(4).dilation(4));
    let gp = b.push("aspp.pool", LayerKind::GlobalAvgPool, &[&feat]);
    let gr = b.conv_bn_relu("aspp.pool_conv", &gp, Conv2dAttrs::new(c3, c2, 1));
    let gu = b.push(
        "aspp.pool_up",
        LayerKind::BilinearUpsample { size: UpsampleSize::MatchInput },
        &[&gr, &feat],
    );
    let cat = b.concat("aspp.concat", &[&a0, &a1, &a2, &gu]);
    let proj = b.conv_bn_relu("aspp.project", &cat, Conv2dAttrs::new(4 * c2, c2, 1));

    let h = b.conv_bn_relu("head.conv", &proj, Conv2dAttrs::new(c2, c2, 3).padding(1));
    let logits = b.conv("head.logits", &h, Conv2dAttrs::new(c2, 1, 1).bias(true));
    let out = b.push(
        "upsample",
        LayerKind::BilinearUpsample { size: UpsampleSize::MatchInput },
        &[&logits, &x],
    );
    b.finish(&out)
}

/// Looks up a bundled architecture by name.
pub fn by_name(name: &str) -> Option<GraphDef> {
    match name {
        "deeplabv3-resnet50" | "deeplabv3-resnet50-os8" => Some(deeplabv3_resnet50_os8()),
        "tiny-segnet" => Some(tiny_segnet()),
        _ => None,
    }
}
