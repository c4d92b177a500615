//! Depth auto-encoder: a convolutional encoder producing a 5-level feature
//! pyramid and a graph-convolutional decoder producing 4 sigmoid disparity
//! maps at 1/16 … 1/2 of the input resolution.
//!
//! The decoder works per level: upsampled previous decoder features are
//! concatenated with the encoder skip and convolved; the result, upsampled
//! once more, forms the nodes of a pixel-grid graph on which two graph
//! convolutions (ReLU, then the configured output activation) produce the
//! disparity logits. The coarsest graph carries learnable per-edge weights;
//! finer graphs are upsampled from it and re-masked by feature similarity.

use crate::autodiff::Var;
use crate::graph::{
    add_self_loops, build_adjacency, gcn_forward_var, grid_support, merge_adjacency,
    upsample_adjacency, Activation, NodeFeatures, SparseGraph,
};
use crate::nn::{Bottleneck, Conv2d, Norm};
use crate::params::{Binder, ParamInit, ParamStore};
use crate::{Error, Result};
use ndarray::Array2;

pub const LEAKY_SLOPE: f64 = 0.01;

/// Encoder depth: the full residual stack or a narrow stand-in with the same
/// five-level halving contract, for desk-scale runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Full,
    Toy,
}

impl EncoderKind {
    pub fn channels(&self) -> [usize; 5] {
        match self {
            EncoderKind::Full => [64, 256, 512, 1024, 2048],
            EncoderKind::Toy => [8, 12, 16, 20, 24],
        }
    }

    pub fn decoder_channels(&self) -> [usize; 4] {
        // Indexed by decode level 4..1.
        match self {
            EncoderKind::Full => [512, 256, 128, 64],
            EncoderKind::Toy => [24, 20, 16, 12],
        }
    }
}

/// Scale mode of the decoder: graph convolutions at every level (multi-scale)
/// or at the coarsest level only, with plain convolution heads below.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleMode {
    SingleScale,
    MultiScale,
}

#[derive(Clone, Debug)]
pub struct DepthNetConfig {
    pub encoder: EncoderKind,
    pub input_width: usize,
    pub input_height: usize,
    /// Similarity threshold P for adjacency construction.
    pub p_threshold: f64,
    pub scale_mode: ScaleMode,
    /// Activation of the second graph convolution.
    pub gcn_activation: Activation,
    /// Divide adjacency rows by their weight sums before aggregation.
    pub row_normalize: bool,
}

impl DepthNetConfig {
    pub fn toy(width: usize, height: usize) -> Self {
        DepthNetConfig {
            encoder: EncoderKind::Toy,
            input_width: width,
            input_height: height,
            p_threshold: 0.7,
            scale_mode: ScaleMode::MultiScale,
            gcn_activation: Activation::LogSoftmax,
            row_normalize: false,
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        DepthNetConfig {
            encoder: EncoderKind::Full,
            ..DepthNetConfig::toy(width, height)
        }
    }
}

/// Five feature maps at 1/2 … 1/32 resolution.
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

/// Four disparity maps, coarsest first: index 0 is Disp4 (1/16 resolution),
/// index 3 is Disp1 (1/2 resolution). Values are strictly inside (0, 1).
pub struct DisparityPyramid {
    pub disps: Vec<Var>,
}

impl DisparityPyramid {
    /// Finest disparity (half the input resolution).
    pub fn disp1(&self) -> &Var {
        &self.disps[3]
    }

    pub fn to_arrays(&self) -> Vec<Array2<f64>> {
        self.disps
            .iter()
            .map(|d| {
                d.value()
                    .clone()
                    .into_dimensionality()
                    .expect("disparity is 2-D")
            })
            .collect()
    }
}

enum EncoderLayers {
    Full {
        stem_conv: Conv2d,
        stem_norm: Norm,
        stages: Vec<Vec<Bottleneck>>,
    },
    Toy {
        stem: Conv2d,
        blocks: Vec<Conv2d>,
    },
}

struct DecoderLevel {
    conv: Conv2d,
    /// Graph-convolution weight names (multi-scale levels and level 4).
    gc: Option<(String, String)>,
    /// Plain convolution head (single-scale levels 3..1).
    head: Option<Conv2d>,
}

/// The depth network. Parameters are registered in the [`ParamStore`] passed
/// at construction under the `depth.` prefix.
pub struct DepthNet {
    pub cfg: DepthNetConfig,
    encoder: EncoderLayers,
    decoder: Vec<DecoderLevel>, // index 0 = level 4 … index 3 = level 1
    adj_weight_name: String,
}

/// Carried between decode levels.
pub struct DecodeState {
    pub features: Var,
    pub graph: SparseGraph,
    pub disp: Var,
}

impl DepthNet {
    pub fn new(cfg: DepthNetConfig, store: &mut ParamStore, init: &mut ParamInit) -> Result<Self> {
        check_input_dims(cfg.input_height, cfg.input_width)?;
        let ench = cfg.encoder.channels();
        let decch = cfg.encoder.decoder_channels();

        let encoder = match cfg.encoder {
            EncoderKind::Full => {
                let stem_conv = Conv2d::new(store, init, "depth.encoder.stem.conv", 3, ench[0], 1, 1, 0);
                let stem_norm = Norm::new(store, init, "depth.encoder.stem.norm", ench[0]);
                let mut stages = Vec::new();
                let blocks_per_stage = [3usize, 4, 6, 3];
                let mids = [64usize, 128, 256, 512];
                let mut cin = ench[0];
                for (s, (&nblocks, &mid)) in blocks_per_stage.iter().zip(&mids).enumerate() {
                    let cout = ench[s + 1];
                    let mut stage = Vec::new();
                    for bi in 0..nblocks {
                        let stride = if bi == 0 { 2 } else { 1 };
                        let name = format!("depth.encoder.l{}.b{}", s + 1, bi);
                        stage.push(Bottleneck::new(store, init, &name, cin, mid, cout, stride));
                        cin = cout;
                    }
                    stages.push(stage);
                }
                EncoderLayers::Full { stem_conv, stem_norm, stages }
            }
            EncoderKind::Toy => {
                let stem = Conv2d::new(store, init, "depth.encoder.stem", 3, ench[0], 3, 2, 1);
                let mut blocks = Vec::new();
                for s in 0..4 {
                    blocks.push(Conv2d::new(
                        store,
                        init,
                        format!("depth.encoder.l{}", s + 1),
                        ench[s],
                        ench[s + 1],
                        3,
                        2,
                        1,
                    ));
                }
                EncoderLayers::Toy { stem, blocks }
            }
        };

        // Decoder: one level struct per decode level 4..1.
        let mut decoder = Vec::new();
        for (idx, level) in (1..=4).rev().enumerate() {
            let cin = if level == 4 {
                ench[4]
            } else {
                decch[idx - 1] + ench[level]
            };
            let cout = decch[idx];
            let conv = Conv2d::new(
                store,
                init,
                format!("depth.decoder.l{level}.conv"),
                cin,
                cout,
                3,
                1,
                1,
            );
            let gc_in = if level == 4 { cout } else { cout + 1 };
            let use_gcn = level == 4 || cfg.scale_mode == ScaleMode::MultiScale;
            let (gc, head) = if use_gcn {
                let w1 = format!("depth.decoder.l{level}.gc1.w");
                let w2 = format!("depth.decoder.l{level}.gc2.w");
                // The unnormalized aggregation sums about 9 neighbours, so
                // the effective fan-in of a graph convolution is 9x its
                // channel count; folding that in keeps the sigmoid head out
                // of its saturated tails at init.
                store.insert(&w1, init.he_positive(&[gc_in, 1], 9 * gc_in));
                store.insert(&w2, init.he_positive(&[1, 1], 9));
                (Some((w1, w2)), None)
            } else {
                let head = Conv2d::new(
                    store,
                    init,
                    format!("depth.decoder.l{level}.head"),
                    gc_in,
                    1,
                    3,
                    1,
                    1,
                );
                (None, Some(head))
            };
            decoder.push(DecoderLevel { conv, gc, head });
        }

        // Learnable per-edge weights over the full support of the coarsest
        // node grid (level-4 nodes live at 1/16 resolution).
        let adj_grid = (cfg.input_height / 16, cfg.input_width / 16);
        let support = grid_support(adj_grid.0, adj_grid.1).len();
        let adj_weight_name = "depth.decoder.adj4.w".to_string();
        store.insert(&adj_weight_name, init.uniform(&[support], 0.0, 1.0));

        Ok(DepthNet { cfg, encoder, decoder, adj_weight_name })
    }

    /// Encoder forward: five levels at 1/2 … 1/32 resolution with the
    /// configured channel counts.
    pub fn encode(&self, b: &Binder, image: &Var) -> Result<FeaturePyramid> {
        let shape = image.shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "encode: expected [3, H, W] image, got {shape:?}"
            )));
        }
        check_input_dims(shape[1], shape[2])?;
        let mut levels = Vec::with_capacity(5);
        match &self.encoder {
            EncoderLayers::Full { stem_conv, stem_norm, stages } => {
                let mut x = stem_norm
                    .forward(b, &stem_conv.forward(b, image))
                    .relu()
                    .max_pool2();
                levels.push(x.clone());
                for stage in stages {
                    for block in stage {
                        x = block.forward(b, &x);
                    }
                    levels.push(x.clone());
                }
            }
            EncoderLayers::Toy { stem, blocks } => {
                let mut x = stem.forward(b, image).leaky_relu(LEAKY_SLOPE);
                levels.push(x.clone());
                for block in blocks {
                    x = block.forward(b, &x).leaky_relu(LEAKY_SLOPE);
                    levels.push(x.clone());
                }
            }
        }
        Ok(FeaturePyramid { levels })
    }

    /// One decoder level. `level` counts down from 4 (coarsest). Level 4
    /// requires absent previous state; levels 3..1 require it.
    pub fn decode_level(
        &self,
        b: &Binder,
        level: usize,
        skip: &Var,
        prev: Option<&DecodeState>,
    ) -> Result<DecodeState> {
        if !(1..=4).contains(&level) {
            return Err(Error::InvalidArgument(format!("decode_level: level {level}")));
        }
        if level == 4 && prev.is_some() {
            return Err(Error::InvalidArgument(
                "decode_level: level 4 takes no previous state".into(),
            ));
        }
        if level < 4 && prev.is_none() {
            return Err(Error::InvalidArgument(format!(
                "decode_level: level {level} requires previous features, disparity and graph"
            )));
        }
        let idx = 4 - level;
        let layer = &self.decoder[idx];

        let conv_in = match prev {
            None => skip.clone(),
            Some(state) => Var::concat(0, &[&state.features.upsample_nearest(2), skip]),
        };
        let pre = layer.conv.forward(b, &conv_in).leaky_relu(LEAKY_SLOPE);
        let nodes_map = pre.upsample_nearest(2);
        let (c, nh, nw) = (nodes_map.shape()[0], nodes_map.shape()[1], nodes_map.shape()[2]);

        // Row-major node features [N, C].
        let nodes = nodes_map.reshape(&[c, nh * nw]).transpose2();

        let (graph, disp) = if let Some((w1_name, w2_name)) = &layer.gc {
            let node_values = NodeFeatures {
                values: nodes
                    .value()
                    .clone()
                    .into_dimensionality()
                    .expect("node features are 2-D"),
            };
            let (graph, edge_weights) = match prev {
                None => {
                    let w = b.var(&self.adj_weight_name);
                    let weights: Vec<f64> = w.value().iter().copied().collect();
                    let g = build_adjacency(
                        &node_values,
                        (nh, nw),
                        self.cfg.p_threshold,
                        Some(&weights),
                    )?;
                    (g, Some(w))
                }
                Some(state) => {
                    let up = upsample_adjacency(&state.graph);
                    let rebuilt =
                        build_adjacency(&node_values, (nh, nw), self.cfg.p_threshold, None)?;
                    (merge_adjacency(&up, &rebuilt), None)
                }
            };
            let gc_graph = add_self_loops(&graph);
            let gc_in = match prev {
                None => nodes,
                Some(state) => {
                    let disp_up = state
                        .disp
                        .reshape(&[1, nh / 2, nw / 2])
                        .upsample_nearest(2)
                        .reshape(&[nh * nw, 1]);
                    Var::concat(1, &[&nodes, &disp_up])
                }
            };
            let h1 = gcn_forward_var(
                &gc_graph,
                &gc_in,
                edge_weights.as_ref(),
                &b.var(w1_name),
                Activation::Relu,
                self.cfg.row_normalize,
            )?;
            let h2 = gcn_forward_var(
                &gc_graph,
                &h1,
                edge_weights.as_ref(),
                &b.var(w2_name),
                self.cfg.gcn_activation,
                self.cfg.row_normalize,
            )?;
            let disp = h2.sigmoid().reshape(&[nh, nw]);
            (graph, disp)
        } else {
            // Single-scale ablation: plain convolution head, graph passed
            // through by upsampling only.
            let state = prev.expect("head levels always have previous state");
            let disp_up = state.disp.reshape(&[1, nh / 2, nw / 2]).upsample_nearest(2);
            let head_in = Var::concat(0, &[&nodes_map, &disp_up]);
            let head = layer.head.as_ref().expect("head layer");
            let disp = head.forward(b, &head_in).sigmoid().reshape(&[nh, nw]);
            (upsample_adjacency(&state.graph), disp)
        };

        Ok(DecodeState { features: pre, graph, disp })
    }

    /// Full forward pass: encoder plus the four decoder levels.
    pub fn predict_disparity(&self, b: &Binder, image: &Var) -> Result<DisparityPyramid> {
        let shape = image.shape().to_vec();
        if shape.len() == 3 && (shape[1], shape[2]) != (self.cfg.input_height, self.cfg.input_width)
        {
            return Err(Error::ShapeMismatch(format!(
                "predict_disparity: model is built for {}x{} input, got {}x{}",
                self.cfg.input_width, self.cfg.input_height, shape[2], shape[1]
            )));
        }
        let lo = image.value().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = image.value().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
            return Err(Error::InvalidArgument(format!(
                "predict_disparity: pixel values must lie in [0, 1], got [{lo}, {hi}]"
            )));
        }
        let pyramid = self.encode(b, image)?;
        let mut state = self.decode_level(b, 4, &pyramid.levels[4], None)?;
        let mut disps = vec![state.disp.clone()];
        for level in (1..=3).rev() {
            state = self.decode_level(b, level, &pyramid.levels[level], Some(&state))?;
            disps.push(state.disp.clone());
        }
        Ok(DisparityPyramid { disps })
    }
}

fn check_input_dims(h: usize, w: usize) -> Result<()> {
    if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "input dimensions must be positive multiples of 32 (five halvings), got {w}x{h}"
        )));
    }
    Ok(())
}
