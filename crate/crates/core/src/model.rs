//! EfficientPose variants and their assembly into a layer graph.

use std::fmt;
use std::str::FromStr;

use crate::backbones::{append_backbone, BackboneScale, BackboneSpec};
use crate::blocks::{
    append_mobile_densenet, MobileDenseNetSpec, BACKBONE_SE_RATIO, DETECTION_SE_RATIO, DROPOUT_RATE,
};
use crate::error::{Error, Result};
use crate::graph::{Dims, Init, LayerGraph, LayerOp, NodeId};
use crate::scaling::detection_depth;
use crate::skeleton::{LIMBS, NUM_KEYPOINTS};

/// Stride of the detection feature maps.
pub const FEATURE_STRIDE: usize = 8;
pub const MAX_KEYPOINT_PASSES: usize = 3;
/// Prediction heads start near zero output.
pub const HEAD_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    RT,
    I,
    II,
    III,
    IV,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::RT,
        Variant::I,
        Variant::II,
        Variant::III,
        Variant::IV,
    ];

    /// Resolution, high backbone, low backbone.
    fn row(self) -> (usize, BackboneScale, Option<BackboneScale>) {
        use BackboneScale::*;
        match self {
            Variant::RT => (224, B0, None),
            Variant::I => (256, B2, Some(B0)),
            Variant::II => (368, B4, Some(B0)),
            Variant::III => (480, B5, Some(B1)),
            Variant::IV => (600, B7, Some(B3)),
        }
    }

    pub fn batch_size(self) -> usize {
        match self {
            Variant::III => 10,
            Variant::IV => 5,
            _ => 20,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(t))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown variant '{t}' (expected RT, I, II, III or IV)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantConfig {
    pub name: String,
    /// Side of the square high-resolution input.
    pub high_res: usize,
    pub high_backbone: BackboneScale,
    /// Low-level branch on the half-resolution image; `None` drops
    /// cross-resolution features.
    pub low_backbone: Option<BackboneScale>,
    /// Keypoint passes after the optional skeleton pass.
    pub keypoint_passes: usize,
    pub skeleton_pass: bool,
    pub upscaling: bool,
    pub limbs: Vec<(usize, usize)>,
    pub keypoints: usize,
    pub backbone_se_ratio: f64,
    pub detection_se_ratio: f64,
    pub dropout_rate: f64,
}

impl VariantConfig {
    pub fn named(v: Variant) -> Self {
        let (high_res, high_backbone, low_backbone) = v.row();
        Self {
            name: v.to_string(),
            high_res,
            high_backbone,
            low_backbone,
            keypoint_passes: 2,
            skeleton_pass: true,
            upscaling: true,
            limbs: LIMBS.to_vec(),
            keypoints: NUM_KEYPOINTS,
            backbone_se_ratio: BACKBONE_SE_RATIO,
            detection_se_ratio: DETECTION_SE_RATIO,
            dropout_rate: DROPOUT_RATE,
        }
    }

    pub fn low_res(&self) -> Option<usize> {
        self.low_backbone.map(|_| self.high_res / 2)
    }

    pub fn detection_width(&self) -> usize {
        self.high_backbone.channels(3)
    }

    pub fn detection_depth(&self) -> usize {
        detection_depth(self.high_backbone)
    }

    pub fn num_limbs(&self) -> usize {
        self.limbs.len()
    }

    /// Feature-map side at stride 8.
    pub fn feature_res(&self) -> usize {
        self.high_res.div_ceil(FEATURE_STRIDE)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.high_res == 0 || self.high_res % FEATURE_STRIDE != 0 {
            return bad(format!(
                "high_res {} must be a positive multiple of {FEATURE_STRIDE} so the {}×{} high-resolution and {}×{} low-resolution features align",
                self.high_res,
                self.high_res,
                self.high_res,
                self.high_res / 2,
                self.high_res / 2
            ));
        }
        if !(1..=MAX_KEYPOINT_PASSES).contains(&self.keypoint_passes) {
            return bad(format!(
                "keypoint passes {} outside 1..=3",
                self.keypoint_passes
            ));
        }
        if self.keypoints == 0 {
            return bad("keypoints must be positive".into());
        }
        if self.skeleton_pass && self.limbs.is_empty() {
            return bad("skeleton pass needs at least one limb".into());
        }
        if let Some(&(a, b)) = self
            .limbs
            .iter()
            .find(|&&(a, b)| a >= self.keypoints || b >= self.keypoints)
        {
            return bad(format!(
                "limb ({a}, {b}) references a keypoint >= {}",
                self.keypoints
            ));
        }
        for (k, r) in [
            ("backbone_se_ratio", self.backbone_se_ratio),
            ("detection_se_ratio", self.detection_se_ratio),
        ] {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("{k} {r} outside (0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// `2P` part affinity fields at stride 8.
    Paf,
    /// `Q` confidence maps at stride 8.
    Keypoints,
    /// `Q` confidence maps at input resolution.
    Upscaled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub name: String,
    pub kind: HeadKind,
    pub node: NodeId,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub config: VariantConfig,
    pub graph: LayerGraph,
    /// Supervised outputs in execution order.
    pub heads: Vec<Head>,
}

impl ModelGraph {
    /// The head read at inference: upscaled maps if present, otherwise the
    /// last keypoint pass.
    pub fn final_head(&self) -> &Head {
        self.heads
            .last()
            .expect("a model has at least one keypoint head")
    }
}

pub fn build_variant(config: &VariantConfig) -> Result<ModelGraph> {
    config.validate()?;
    let mut g = LayerGraph::new();
    let res = config.high_res;
    let image = g.input("image", Dims::new(3, res, res))?;
    let with_ratio = |mut s: BackboneSpec| {
        s.se_ratio = config.backbone_se_ratio;
        s.dropout_rate = config.dropout_rate;
        s
    };
    let high = with_ratio(BackboneSpec::new(config.high_backbone, 3)?);
    let mut features = append_backbone(&mut g, "high", &high, image)?;
    if let Some(low_scale) = config.low_backbone {
        let pooled = g.add(
            "low.pool",
            LayerOp::AvgPool {
                window: 2,
                stride: 2,
            },
            &[image],
        )?;
        let low = with_ratio(BackboneSpec::new(low_scale, 2)?);
        let low_out = append_backbone(&mut g, "low", &low, pooled)?;
        features = g.add("features", LayerOp::Concat, &[features, low_out])?;
    }

    let md = MobileDenseNetSpec {
        se_ratio: config.detection_se_ratio,
        dropout_rate: config.dropout_rate,
        ..MobileDenseNetSpec::new(config.detection_width())
    };
    let mut plan: Vec<(String, HeadKind, usize)> = Vec::new();
    if config.skeleton_pass {
        plan.push(("paf".into(), HeadKind::Paf, 2 * config.num_limbs()));
    }
    for k in 1..=config.keypoint_passes {
        plan.push((
            format!("keypoints{k}"),
            HeadKind::Keypoints,
            config.keypoints,
        ));
    }

    let mut heads = Vec::new();
    let mut previous = Vec::new();
    for (i, (name, kind, out)) in plan.into_iter().enumerate() {
        let prefix = format!("pass{}", i + 1);
        let mut x = if previous.is_empty() {
            features
        } else {
            let mut parts = vec![features];
            parts.extend(&previous);
            g.add(format!("{prefix}.in"), LayerOp::Concat, &parts)?
        };
        for d in 0..config.detection_depth() {
            x = append_mobile_densenet(&mut g, &format!("{prefix}.md{d}"), &md, x)?;
        }
        let head = g.add(
            format!("{prefix}.head"),
            LayerOp::Conv2d {
                out,
                kernel: 1,
                stride: 1,
                bias: true,
            },
            &[x],
        )?;
        g.set_weight_init(head, Init::Normal { std: HEAD_INIT_STD });
        g.set_output(name.clone(), head);
        heads.push(Head {
            name,
            kind,
            node: head,
            stride: FEATURE_STRIDE,
        });
        previous.push(head);
    }

    if config.upscaling {
        let mut x = *previous.last().expect("at least one keypoint pass");
        for i in 1..=3 {
            x = g.add(
                format!("upscale.t{i}"),
                LayerOp::ConvTranspose2d {
                    out: config.keypoints,
                    kernel: 4,
                    stride: 2,
                    pad: 1,
                    bias: false,
                },
                &[x],
            )?;
        }
        g.set_output("upscaled", x);
        heads.push(Head {
            name: "upscaled".into(),
            kind: HeadKind::Upscaled,
            node: x,
            stride: 1,
        });
    }

    Ok(ModelGraph {
        config: config.clone(),
        graph: g,
        heads,
    })
}
