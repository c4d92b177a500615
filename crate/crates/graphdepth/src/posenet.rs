//! Ego-motion regressor: a residual encoder over a channel-concatenated
//! frame pair, followed by a four-layer convolutional decoder whose 6-channel
//! output is spatially averaged and scaled by 0.01 into an axis-angle +
//! translation pose vector.

use crate::autodiff::Var;
use crate::depthnet::{EncoderKind, LEAKY_SLOPE};
use crate::geometry::PoseVector;
use crate::nn::{BasicBlock, Conv2d, Norm};
use crate::params::{Binder, ParamInit, ParamStore};
use crate::{Error, Result};

pub const POSE_OUTPUT_SCALE: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct PoseNetConfig {
    pub encoder: EncoderKind,
}

impl PoseNetConfig {
    pub fn channels(&self) -> [usize; 5] {
        match self.encoder {
            EncoderKind::Full => [64, 64, 128, 256, 512],
            EncoderKind::Toy => [8, 10, 12, 14, 16],
        }
    }

    pub fn decoder_channels(&self) -> usize {
        match self.encoder {
            EncoderKind::Full => 256,
            EncoderKind::Toy => 16,
        }
    }
}

enum PoseEncoder {
    Full {
        stem_conv: Conv2d,
        stem_norm: Norm,
        stages: Vec<Vec<BasicBlock>>,
    },
    Toy {
        stem: Conv2d,
        blocks: Vec<Conv2d>,
    },
}

/// The pose network. Parameters are registered under the `pose.` prefix.
pub struct PoseNet {
    pub cfg: PoseNetConfig,
    encoder: PoseEncoder,
    out1: Conv2d,
    out2: Conv2d,
    out3: Conv2d,
    out4: Conv2d,
}

impl PoseNet {
    pub fn new(cfg: PoseNetConfig, store: &mut ParamStore, init: &mut ParamInit) -> Self {
        let ch = cfg.channels();
        let encoder = match cfg.encoder {
            EncoderKind::Full => {
                let stem_conv = Conv2d::new(store, init, "pose.encoder.stem.conv", 6, ch[0], 1, 1, 0);
                let stem_norm = Norm::new(store, init, "pose.encoder.stem.norm", ch[0]);
                let mut stages = Vec::new();
                let mut cin = ch[0];
                for s in 0..4 {
                    let cout = ch[s + 1];
                    let mut stage = Vec::new();
                    for bi in 0..2 {
                        let stride = if bi == 0 { 2 } else { 1 };
                        let name = format!("pose.encoder.l{}.b{}", s + 1, bi);
                        stage.push(BasicBlock::new(store, init, &name, cin, cout, stride));
                        cin = cout;
                    }
                    stages.push(stage);
                }
                PoseEncoder::Full { stem_conv, stem_norm, stages }
            }
            EncoderKind::Toy => {
                let stem = Conv2d::new(store, init, "pose.encoder.stem", 6, ch[0], 3, 2, 1);
                let mut blocks = Vec::new();
                for s in 0..4 {
                    blocks.push(Conv2d::new(
                        store,
                        init,
                        format!("pose.encoder.l{}", s + 1),
                        ch[s],
                        ch[s + 1],
                        3,
                        2,
                        1,
                    ));
                }
                PoseEncoder::Toy { stem, blocks }
            }
        };
        let dc = cfg.decoder_channels();
        let out1 = Conv2d::new(store, init, "pose.decoder.out1", ch[4], dc, 1, 1, 0);
        let out2 = Conv2d::new(store, init, "pose.decoder.out2", dc, dc, 3, 1, 1);
        let out3 = Conv2d::new(store, init, "pose.decoder.out3", dc, dc, 3, 1, 1);
        let out4 = Conv2d::new(store, init, "pose.decoder.out4", dc, 6, 1, 1, 0);
        PoseNet { cfg, encoder, out1, out2, out3, out4 }
    }

    /// Ego motion of the ordered frame pair as a tracked 6-vector
    /// `[rx, ry, rz, tx, ty, tz]`.
    pub fn predict_pose_var(&self, b: &Binder, source: &Var, target: &Var) -> Result<Var> {
        if source.shape() != target.shape() {
            return Err(Error::ShapeMismatch(format!(
                "predict_pose: frame shapes differ: {:?} vs {:?}",
                source.shape(),
                target.shape()
            )));
        }
        let shape = source.shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::ShapeMismatch("predict_pose: frames must be [3, H, W]".into()));
        }
        if shape[1] % 32 != 0 || shape[2] % 32 != 0 {
            return Err(Error::InvalidArgument(
                "predict_pose: frame dimensions must be multiples of 32".into(),
            ));
        }
        let pair = Var::concat(0, &[source, target]);
        let mut x = match &self.encoder {
            PoseEncoder::Full { stem_conv, stem_norm, stages } => {
                let mut x = stem_norm.forward(b, &stem_conv.forward(b, &pair)).relu().max_pool2();
                for stage in stages {
                    for block in stage {
                        x = block.forward(b, &x);
                    }
                }
                x
            }
            PoseEncoder::Toy { stem, blocks } => {
                let mut x = stem.forward(b, &pair).leaky_relu(LEAKY_SLOPE);
                for block in blocks {
                    x = block.forward(b, &x).leaky_relu(LEAKY_SLOPE);
                }
                x
            }
        };
        x = self.out1.forward(b, &x).relu();
        x = self.out2.forward(b, &x).relu();
        x = self.out3.forward(b, &x).relu();
        x = self.out4.forward(b, &x);
        Ok(x.spatial_mean().mul_scalar(POSE_OUTPUT_SCALE))
    }

    /// Plain-value pose prediction.
    pub fn predict_pose(&self, b: &Binder, source: &Var, target: &Var) -> Result<PoseVector> {
        let v = self.predict_pose_var(b, source, target)?;
        let a = v.value();
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("predict_pose output".into()));
        }
        Ok(PoseVector {
            rotation: [a[[0]], a[[1]], a[[2]]],
            translation: [a[[3]], a[[4]], a[[5]]],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Arr, Tape};
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build_toy() -> (PoseNet, ParamStore) {
        let mut store = ParamStore::new();
        let mut init = ParamInit::new(77);
        let net = PoseNet::new(PoseNetConfig { encoder: EncoderKind::Toy }, &mut store, &mut init);
        (net, store)
    }

    fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Arr {
        Arr::from_shape_fn(IxDyn(&[3, h, w]), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn output_is_six_finite_values() {
        let (net, store) = build_toy();
        let binder = Binder::new(&store, None);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (h, w) in [(64, 64), (32, 96)] {
            let a = Var::constant(rand_image(&mut rng, h, w));
            let b = Var::constant(rand_image(&mut rng, h, w));
            let pose = net.predict_pose(&binder, &a, &b).unwrap();
            for v in pose.rotation.iter().chain(pose.translation.iter()) {
                assert!(v.is_finite());
            }
        }
    }

    #[test]
    fn final_decoder_layer_emits_six_channels() {
        let (_, store) = build_toy();
        assert_eq!(store.get("pose.decoder.out4.w").unwrap().shape()[0], 6);
    }

    #[test]
    fn mismatched_frames_rejected() {
        let (net, store) = build_toy();
        let binder = Binder::new(&store, None);
        let a = Var::constant(Arr::zeros(IxDyn(&[3, 64, 64])));
        let b = Var::constant(Arr::zeros(IxDyn(&[3, 32, 32])));
        assert!(net.predict_pose(&binder, &a, &b).is_err());
    }

    #[test]
    fn deterministic_and_order_sensitive() {
        let (net, store) = build_toy();
        let binder = Binder::new(&store, None);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Var::constant(rand_image(&mut rng, 64, 64));
        let b = Var::constant(rand_image(&mut rng, 64, 64));
        let p1 = net.predict_pose(&binder, &a, &b).unwrap();
        let p2 = net.predict_pose(&binder, &a, &b).unwrap();
        assert_eq!(p1, p2);
        let swapped = net.predict_pose(&binder, &b, &a).unwrap();
        assert_ne!(p1, swapped);
    }

    #[test]
    fn zero_decoder_weights_give_zero_pose() {
        let (net, mut store) = build_toy();
        for name in ["out1", "out2", "out3", "out4"] {
            for suffix in ["w", "b"] {
                let key = format!("pose.decoder.{name}.{suffix}");
                let arr = store.get_mut(&key).unwrap();
                *arr = Arr::zeros(arr.raw_dim());
            }
        }
        let binder = Binder::new(&store, None);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Var::constant(rand_image(&mut rng, 64, 64));
        let b = Var::constant(rand_image(&mut rng, 64, 64));
        let pose = net.predict_pose(&binder, &a, &b).unwrap();
        assert_eq!(pose, PoseVector::zero());
    }

    #[test]
    fn pose_gradient_matches_finite_differences() {
        let (net, store) = build_toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img_a = rand_image(&mut rng, 32, 32);
        let img_b = rand_image(&mut rng, 32, 32);
        let probe = "pose.decoder.out3.w";

        let eval = |store: &ParamStore, with_tape: bool| -> (f64, Option<f64>) {
            let tape = Tape::new();
            let binder = Binder::new(store, if with_tape { Some(&tape) } else { None });
            let pose = net
                .predict_pose_var(&binder, &Var::constant(img_a.clone()), &Var::constant(img_b.clone()))
                .unwrap();
            // Weighted sum keeps every component in play.
            let weights = Var::constant(
                Arr::from_shape_vec(IxDyn(&[6]), vec![1.0, -0.5, 0.25, 2.0, -1.5, 0.75]).unwrap(),
            );
            let loss = pose.mul(&weights).sum_all();
            let v = loss.scalar();
            let g = if with_tape {
                let grads = tape.backward(&loss);
                Some(binder.collect_grads(&grads)[probe][[0, 0, 0, 0]])
            } else {
                None
            };
            (v, g)
        };

        let (_, g) = eval(&store, true);
        let g = g.unwrap();
        let eps = 1e-5;
        let mut plus = store.clone();
        plus.get_mut(probe).unwrap()[[0, 0, 0, 0]] += eps;
        let mut minus = store.clone();
        minus.get_mut(probe).unwrap()[[0, 0, 0, 0]] -= eps;
        let num = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * eps);
        let rel = (g - num).abs() / g.abs().max(num.abs()).max(1e-12);
        assert!(rel < 1e-3, "pose probe grad {g} vs fd {num} (rel {rel})");
    }
}
