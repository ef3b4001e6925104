//! Layer layouts for the two supported trunks.
//!
//! tiny_cnn: `CV1` = conv3x3/s1 + norm + relu, then four stages
//! `DB1..DB4` of conv3x3/s2 + norm + relu + conv3x3/s1 + norm + relu.
//!
//! densenet121: the standard 6/12/24/16 dense-block layout with growth 32,
//! bottleneck width 128 and 0.5 compression. Batch norm is replaced by the
//! per-sample norm used throughout. `CV1` taps the stem activation, `DB1..DB3`
//! tap the concatenated block outputs and `DB4` taps the final activation.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::params::{ParamId, ParamStore};
use super::tape::{NodeId, Tape};
use super::tensor::Scalar;
use super::{Architecture, BackboneConfig, Tap};
use crate::seed::Rng;

#[derive(Debug, Clone)]
pub(crate) struct NormIds {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvUnit {
    conv: ParamId,
    norm: NormIds,
    stride: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct DenseLayer {
    norm1: NormIds,
    conv1: ParamId,
    norm2: NormIds,
    conv2: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct Transition {
    norm: NormIds,
    conv: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) enum Layout {
    Tiny {
        stem: ConvUnit,
        stages: Vec<[ConvUnit; 2]>,
    },
    Dense {
        stem_conv: ParamId,
        stem_norm: NormIds,
        blocks: Vec<Vec<DenseLayer>>,
        transitions: Vec<Transition>,
        final_norm: NormIds,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Heads {
    pub proj1: (ParamId, ParamId),
    pub proj2: (ParamId, ParamId),
    pub head: (ParamId, ParamId),
}

pub(crate) const DENSE_BLOCKS: [usize; 4] = [6, 12, 24, 16];
const GROWTH: usize = 32;
const BOTTLENECK: usize = 4 * GROWTH;
const STEM_FEATURES: usize = 64;

struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize) -> ParamId {
        let fan_in = (inp * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let data = (0..out * inp * k * k).map(|_| T::of(normal.sample(self.rng))).collect();
        self.store.push(format!("{name}.weight"), vec![out, inp, k, k], data)
    }

    fn norm(&mut self, name: &str, c: usize) -> NormIds {
        NormIds {
            gamma: self.store.push(format!("{name}.gamma"), vec![c], vec![T::one(); c]),
            beta: self.store.push(format!("{name}.beta"), vec![c], vec![T::zero(); c]),
        }
    }

    fn unit(&mut self, name: &str, out: usize, inp: usize, stride: usize) -> ConvUnit {
        ConvUnit {
            conv: self.conv(&format!("{name}.conv"), out, inp, 3),
            norm: self.norm(&format!("{name}.norm"), out),
            stride,
        }
    }
}

pub(crate) fn linear_init<T: Scalar>(rng: &mut Rng, out: usize, inp: usize) -> (Vec<T>, Vec<T>) {
    let bound = 1.0 / (inp as f64).sqrt();
    let w = (0..out * inp).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    let b = (0..out).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    (w, b)
}

/// Builds the trunk parameters; returns the layout and the pooled feature
/// width.
pub(crate) fn build_trunk<T: Scalar>(
    config: &BackboneConfig,
    store: &mut ParamStore<T>,
    rng: &mut Rng,
) -> (Layout, usize) {
    let mut b = Builder { store, rng };
    match config.architecture {
        Architecture::TinyCnn => {
            let w = &config.widths;
            let stem = b.unit("trunk.cv1", w[0], config.in_channels, 1);
            let stages = (1..5)
                .map(|i| {
                    [
                        b.unit(&format!("trunk.db{i}.a"), w[i], w[i - 1], 2),
                        b.unit(&format!("trunk.db{i}.b"), w[i], w[i], 1),
                    ]
                })
                .collect();
            (Layout::Tiny { stem, stages }, w[4])
        }
        Architecture::Densenet121 => {
            let stem_conv = b.conv("trunk.conv0", STEM_FEATURES, config.in_channels, 7);
            let stem_norm = b.norm("trunk.norm0", STEM_FEATURES);
            let mut channels = STEM_FEATURES;
            let mut blocks = Vec::new();
            let mut transitions = Vec::new();
            for (bi, &layers) in DENSE_BLOCKS.iter().enumerate() {
                let mut block = Vec::new();
                for li in 0..layers {
                    let prefix = format!("trunk.denseblock{}.denselayer{}", bi + 1, li + 1);
                    let inp = channels + li * GROWTH;
                    block.push(DenseLayer {
                        norm1: b.norm(&format!("{prefix}.norm1"), inp),
                        conv1: b.conv(&format!("{prefix}.conv1"), BOTTLENECK, inp, 1),
                        norm2: b.norm(&format!("{prefix}.norm2"), BOTTLENECK),
                        conv2: b.conv(&format!("{prefix}.conv2"), GROWTH, BOTTLENECK, 3),
                    });
                }
                channels += layers * GROWTH;
                blocks.push(block);
                if bi + 1 < DENSE_BLOCKS.len() {
                    let prefix = format!("trunk.transition{}", bi + 1);
                    transitions.push(Transition {
                        norm: b.norm(&format!("{prefix}.norm"), channels),
                        conv: b.conv(&format!("{prefix}.conv"), channels / 2, channels, 1),
                    });
                    channels /= 2;
                }
            }
            let final_norm = b.norm("trunk.norm5", channels);
            (
                Layout::Dense {
                    stem_conv,
                    stem_norm,
                    blocks,
                    transitions,
                    final_norm,
                },
                channels,
            )
        }
    }
}

fn norm_relu<T: Scalar>(tape: &mut Tape<'_, T>, x: NodeId, n: &NormIds) -> NodeId {
    let y = tape.norm(x, n.gamma, n.beta);
    tape.relu(y)
}

fn unit<T: Scalar>(tape: &mut Tape<'_, T>, x: NodeId, u: &ConvUnit) -> NodeId {
    let y = tape.conv2d(x, u.conv, None, u.stride, 1);
    norm_relu(tape, y, &u.norm)
}

/// Node ids of the taps reached before stopping.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct TrunkNodes {
    pub taps: [Option<NodeId>; 5],
}

impl TrunkNodes {
    pub fn get(&self, tap: Tap) -> NodeId {
        self.taps[tap.index()].expect("tap was computed")
    }
}

/// Runs the trunk on `x` up to and including `stop`.
pub(crate) fn trunk_forward<T: Scalar>(layout: &Layout, tape: &mut Tape<'_, T>, x: NodeId, stop: Tap) -> TrunkNodes {
    let mut out = TrunkNodes::default();
    match layout {
        Layout::Tiny { stem, stages } => {
            let mut h = unit(tape, x, stem);
            out.taps[0] = Some(h);
            for (i, [a, b]) in stages.iter().enumerate() {
                if stop.index() == i {
                    break;
                }
                h = unit(tape, h, a);
                h = unit(tape, h, b);
                out.taps[i + 1] = Some(h);
            }
        }
        Layout::Dense {
            stem_conv,
            stem_norm,
            blocks,
            transitions,
            final_norm,
        } => {
            let c0 = tape.conv2d(x, *stem_conv, None, 2, 3);
            let stem = norm_relu(tape, c0, stem_norm);
            out.taps[0] = Some(stem);
            let mut h = tape.max_pool(stem);
            for (bi, block) in blocks.iter().enumerate() {
                if stop.index() == bi {
                    break;
                }
                let mut features = vec![h];
                for layer in block {
                    let cat = if features.len() == 1 {
                        features[0]
                    } else {
                        tape.concat(&features)
                    };
                    let a = norm_relu(tape, cat, &layer.norm1);
                    let a = tape.conv2d(a, layer.conv1, None, 1, 0);
                    let a = norm_relu(tape, a, &layer.norm2);
                    let a = tape.conv2d(a, layer.conv2, None, 1, 1);
                    features.push(a);
                }
                h = tape.concat(&features);
                if let Some(t) = transitions.get(bi) {
                    out.taps[bi + 1] = Some(h);
                    let a = norm_relu(tape, h, &t.norm);
                    let a = tape.conv2d(a, t.conv, None, 1, 0);
                    h = tape.avg_pool2(a);
                } else {
                    h = norm_relu(tape, h, final_norm);
                    out.taps[bi + 1] = Some(h);
                }
            }
        }
    }
    out
}
