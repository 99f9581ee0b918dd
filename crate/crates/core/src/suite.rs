//! The gradient-certification suite: every differentiable operation checked
//! against central differences on small seeded inputs.
//!
//! Sampling coordinates are kept at least `LATTICE_MARGIN` pixels from the
//! integer lattice, where bilinear interpolation has kinks that a finite
//! difference straddling them would misreport.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{self, BackboneWeights, DeformWeights, MultiScaleFeatures, CSDA_SAMPLES, SCALES};
use crate::error::{Error, Result};
use crate::layout::{rasterize_plane_mask, raycast_depth, Layout};
use crate::losses;
use crate::model::{DopNet, ModelConfig};
use crate::numerics::{self as nx, GradCheck, GradCheckReport, ParamStore, Tensor};
use crate::scene::render_panorama;
use crate::sequence::{self, AttentionWeights, HeadWeights};
use crate::sphere::{EquirectGrid, SamplingGrid};
use crate::train::{accumulate_sample_grads, sample_loss, Sample};

/// Pass threshold on the maximum relative error.
pub const GRAD_TOL: f64 = 1e-3;
pub const DEFAULT_EPS: f64 = 1e-4;

const CHANNELS: usize = 8;
const HEADS: usize = 2;
const TOY_H: usize = 16;
const TOY_W: usize = 32;
const LATTICE_MARGIN: f64 = 0.05;
/// Finite-difference probes per parameter tensor for the whole-model check.
const MODEL_PROBES: usize = 12;

/// Names accepted by [`run_op`], in suite order.
pub const OPS: &[&str] = &[
    "bilinear_sample",
    "resize",
    "conv3x3",
    "backbone",
    "distortion_gather",
    "multiscale_gather",
    "csda_attend",
    "soft_flip_fuse",
    "disentangle",
    "channel_graph_attend",
    "self_attend",
    "cross_attend",
    "heads",
    "bce_segment",
    "layout_loss",
    "model",
];

fn cat(parts: &[&Tensor]) -> Tensor {
    Tensor::from_vec(parts.iter().flat_map(|t| t.data().iter().copied()).collect())
}

/// Cuts a flat cotangent back into tensors of the given shapes.
fn split(cot: &Tensor, shapes: &[&[usize]]) -> Result<Vec<Tensor>> {
    let mut at = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s.to_vec(), cot.data()[at..at + n].to_vec());
            at += n;
            t
        })
        .collect()
}

/// Moves each `base + offset` so its fractional part lies in
/// `[LATTICE_MARGIN, 1 - LATTICE_MARGIN]`.
fn snap_offsets(base: &Tensor, offsets: &mut Tensor) {
    for (o, b) in offsets.data_mut().iter_mut().zip(base.data()) {
        let v = b + *o;
        let frac = v - v.floor();
        let moved = v.floor() + LATTICE_MARGIN + (1.0 - 2.0 * LATTICE_MARGIN) * frac;
        *o = moved - b;
    }
}

fn toy_grid() -> SamplingGrid {
    SamplingGrid::new(EquirectGrid::new(TOY_H, TOY_W).expect("toy grid"))
}

fn gather_offsets(grid: &SamplingGrid, rng: &mut ChaCha8Rng) -> Tensor {
    let mut off = Tensor::uniform(&grid.offset_shape(), -1.5, 1.5, rng);
    snap_offsets(&grid.base_coords().reshape(&grid.offset_shape()).expect("same size"), &mut off);
    off
}

fn deform_offsets(rng: &mut ChaCha8Rng) -> Tensor {
    let shape = [TOY_H, TOY_W, 9, 2];
    let mut off = Tensor::uniform(&shape, -1.5, 1.5, rng);
    snap_offsets(&Tensor::zeros(&shape), &mut off);
    off
}

fn toy_layout() -> Layout {
    Layout::cuboid(2.1, 2.9, 2.8, 1.6).expect("valid cuboid")
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn attn_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let c = CHANNELS;
    let s = 1.0 / (c as f64).sqrt();
    (0..6)
        .map(|k| {
            if k % 2 == 0 {
                Tensor::randn(&[c, c], s, rng)
            } else {
                Tensor::randn(&[c], 0.1, rng)
            }
        })
        .collect()
}

fn attn_weights(x: &[Tensor]) -> AttentionWeights<'_> {
    AttentionWeights {
        wq: &x[0],
        bq: &x[1],
        wk: &x[2],
        bk: &x[3],
        wv: &x[4],
        bv: &x[5],
    }
}

fn attn_grads(g: sequence::AttentionGrads) -> [Tensor; 6] {
    [g.wq, g.bq, g.wk, g.bk, g.wv, g.bv]
}

fn backbone_weights(x: &[Tensor]) -> BackboneWeights<'_> {
    BackboneWeights {
        weights: [0, 1, 2, 3].map(|s| &x[2 * s]),
        biases: [0, 1, 2, 3].map(|s| &x[2 * s + 1]),
    }
}

/// Runs the check for one named operation.
pub fn run_op(name: &str, eps: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gc = GradCheck::new(eps, seed);
    let c = CHANNELS;
    let (h, w) = (TOY_H, TOY_W);
    match name {
        "bilinear_sample" => {
            let f = randn(&[c, h, w], &mut rng);
            let mut coords = Tensor::from_fn(&[64, 2], |i| {
                if i % 2 == 0 {
                    rng.random_range(-1.0..h as f64)
                } else {
                    rng.random_range(-3.0..w as f64 + 3.0)
                }
            });
            snap_offsets(&Tensor::zeros(&[64, 2]), &mut coords);
            gc.run(
                name,
                &[f, coords],
                |x| nx::bilinear_sample(&x[0], &x[1]),
                |x, g| {
                    let (df, dc) = nx::bilinear_sample_backward(&x[0], &x[1], g)?;
                    Ok(vec![df, dc])
                },
            )
        }
        "resize" => {
            let f = randn(&[c, h, w], &mut rng);
            gc.run(
                name,
                &[f],
                |x| nx::resize_bilinear(&x[0], 2 * h, 2 * w),
                |x, g| Ok(vec![nx::resize_bilinear_backward(&x[0], g)?]),
            )
        }
        "conv3x3" => {
            let x = randn(&[c, h, w], &mut rng);
            let wt = Tensor::randn(&[c, c, 3, 3], 0.2, &mut rng);
            let b = randn(&[c], &mut rng);
            gc.run(
                name,
                &[x, wt, b],
                |x| nx::conv3x3(&x[0], &x[1], &x[2], 2),
                |x, g| {
                    let (dx, dw, db) = nx::conv3x3_backward(&x[0], &x[1], &x[2], 2, g)?;
                    Ok(vec![dx, dw, db])
                },
            )
        }
        "backbone" => {
            let mut inputs = Vec::new();
            for s in 0..SCALES {
                let cin = if s == 0 { 3 } else { c };
                inputs.push(Tensor::randn(&[c, cin, 3, 3], (2.0 / (cin * 9) as f64).sqrt(), &mut rng));
                inputs.push(Tensor::randn(&[c], 0.1, &mut rng));
            }
            inputs.push(randn(&[3, 32, 64], &mut rng));
            gc.run(
                name,
                &inputs,
                |x| {
                    let feats = blocks::backbone_stub(&x[8], &backbone_weights(x))?;
                    Ok(cat(&feats.scales.iter().collect::<Vec<_>>()))
                },
                |x, g| {
                    let (feats, cache) = blocks::backbone_forward(&x[8], &backbone_weights(x))?;
                    let shapes: Vec<&[usize]> = feats.scales.iter().map(|t| t.shape()).collect();
                    let cots: [Tensor; SCALES] = split(g, &shapes)?.try_into().expect("four scales");
                    let (dws, dbs, dimg) = blocks::backbone_backward(&cache, &feats, &backbone_weights(x), &cots)?;
                    let mut out = Vec::new();
                    for (dw, db) in dws.into_iter().zip(dbs) {
                        out.push(dw);
                        out.push(db);
                    }
                    out.push(dimg);
                    Ok(out)
                },
            )
        }
        "distortion_gather" => {
            let grid = toy_grid();
            let f = randn(&[c, h, w], &mut rng);
            let off = gather_offsets(&grid, &mut rng);
            gc.run(
                name,
                &[f, off],
                |x| blocks::distortion_gather(&x[0], &grid, &x[1]),
                |x, g| {
                    let (df, doff) = blocks::distortion_gather_backward(&x[0], &grid, &x[1], g)?;
                    Ok(vec![df, doff])
                },
            )
        }
        "multiscale_gather" => {
            let grid = toy_grid();
            let mut inputs: Vec<Tensor> = (0..SCALES)
                .map(|s| {
                    let k = 1usize << s;
                    randn(&[c, 2 * h / k, 2 * w / k], &mut rng)
                })
                .collect();
            inputs.push(gather_offsets(&grid, &mut rng));
            let ms = |x: &[Tensor]| MultiScaleFeatures {
                scales: [x[0].clone(), x[1].clone(), x[2].clone(), x[3].clone()],
            };
            gc.run(
                name,
                &inputs,
                |x| blocks::multiscale_gather(&ms(x), &grid, &x[4]),
                |x, g| {
                    let (dfs, doff) = blocks::multiscale_gather_backward(&ms(x), &grid, &x[4], g)?;
                    let mut out: Vec<Tensor> = dfs.into_iter().collect();
                    out.push(doff);
                    Ok(out)
                },
            )
        }
        "csda_attend" => {
            let x = randn(&[c, h, w, 9, SCALES], &mut rng);
            let wt = Tensor::randn(&[HEADS * CSDA_SAMPLES, c], 1.0 / (c as f64).sqrt(), &mut rng);
            let b = Tensor::randn(&[HEADS * CSDA_SAMPLES], 0.1, &mut rng);
            gc.run(
                name,
                &[x, wt, b],
                |x| blocks::csda_attend(&x[0], &x[1], &x[2], HEADS),
                |x, g| {
                    let (dx, dw, db) = blocks::csda_attend_backward(&x[0], &x[1], &x[2], HEADS, g)?;
                    Ok(vec![dx, dw, db])
                },
            )
        }
        "soft_flip_fuse" => {
            let f = randn(&[c, h, w], &mut rng);
            let wt = Tensor::randn(&[c, c, 3, 3], (1.0 / (9 * c) as f64).sqrt(), &mut rng);
            let b = Tensor::randn(&[c], 0.1, &mut rng);
            let off = deform_offsets(&mut rng);
            fn p(x: &[Tensor]) -> DeformWeights<'_> {
                DeformWeights {
                    weight: &x[1],
                    bias: &x[2],
                    offsets: &x[3],
                }
            }
            gc.run(
                name,
                &[f, wt, b, off],
                |x| blocks::soft_flip_fuse(&x[0], &p(x)),
                |x, g| {
                    let (df, dw, db, doff) = blocks::soft_flip_fuse_backward(&x[0], &p(x), g)?;
                    Ok(vec![df, dw, db, doff])
                },
            )
        }
        "disentangle" => {
            let fu = randn(&[c, h, w], &mut rng);
            let fms = randn(&[c, h, w], &mut rng);
            let sw = Tensor::randn(&[1, c, 3, 3], (1.0 / (9 * c) as f64).sqrt(), &mut rng);
            let sb = Tensor::randn(&[1], 0.1, &mut rng);
            gc.run(
                name,
                &[fu, fms, sw, sb],
                |x| {
                    let d = blocks::disentangle(&x[0], &x[1], &x[2], &x[3])?;
                    Ok(cat(&[&d.horizontal, &d.vertical, &d.logits]))
                },
                |x, g| {
                    let fshape = x[0].shape();
                    let parts = split(g, &[fshape, fshape, &[fshape[1], fshape[2]]])?;
                    let (dbase, dsw, dsb) =
                        blocks::disentangle_backward(&x[0], &x[1], &x[2], &x[3], &parts[0], &parts[1], &parts[2])?;
                    Ok(vec![dbase.clone(), dbase, dsw, dsb])
                },
            )
        }
        "channel_graph_attend" => {
            let q = randn(&[w, c], &mut rng);
            let wt = Tensor::randn(&[c, c], 1.0 / (c as f64).sqrt(), &mut rng);
            gc.run(
                name,
                &[q, wt],
                |x| sequence::channel_graph_attend(&x[0], &x[1]),
                |x, g| {
                    let (dq, dw) = sequence::channel_graph_attend_backward(&x[0], &x[1], g)?;
                    Ok(vec![dq, dw])
                },
            )
        }
        "self_attend" => {
            let mut inputs = vec![randn(&[w, c], &mut rng)];
            inputs.extend(attn_inputs(&mut rng));
            gc.run(
                name,
                &inputs,
                |x| sequence::self_attend(&x[0], &attn_weights(&x[1..])),
                |x, g| {
                    let (dx, grads) = sequence::self_attend_backward(&x[0], &attn_weights(&x[1..]), g)?;
                    let mut out = vec![dx];
                    out.extend(attn_grads(grads));
                    Ok(out)
                },
            )
        }
        "cross_attend" => {
            let mut inputs = vec![randn(&[w, c], &mut rng), randn(&[w, c], &mut rng)];
            inputs.extend(attn_inputs(&mut rng));
            gc.run(
                name,
                &inputs,
                |x| sequence::cross_attend(&x[0], &x[1], &attn_weights(&x[2..])),
                |x, g| {
                    let (da, db, grads) = sequence::cross_attend_backward(&x[0], &x[1], &attn_weights(&x[2..]), g)?;
                    let mut out = vec![da, db];
                    out.extend(attn_grads(grads));
                    Ok(out)
                },
            )
        }
        "heads" => {
            let s = 1.0 / (c as f64).sqrt();
            let inputs = vec![
                randn(&[w, c], &mut rng),
                randn(&[w, c], &mut rng),
                Tensor::randn(&[c], s, &mut rng),
                Tensor::randn(&[1], 0.5, &mut rng),
                Tensor::randn(&[c], s, &mut rng),
                Tensor::randn(&[1], 0.5, &mut rng),
            ];
            fn p(x: &[Tensor]) -> HeadWeights<'_> {
                HeadWeights {
                    depth_weight: &x[2],
                    depth_bias: &x[3],
                    height_weight: &x[4],
                    height_bias: &x[5],
                }
            }
            gc.run(
                name,
                &inputs,
                |x| {
                    let out = sequence::heads(&x[0], &x[1], &p(x))?;
                    Ok(cat(&[&out.depth, &Tensor::scalar(out.height)]))
                },
                |x, g| {
                    let w = x[0].dim(0);
                    let d_depth = Tensor::from_vec(g.data()[..w].to_vec());
                    let hg = sequence::heads_backward(&x[0], &x[1], &p(x), &d_depth, g.data()[w])?;
                    Ok(vec![
                        hg.vertical,
                        hg.horizontal,
                        hg.depth_weight,
                        hg.depth_bias,
                        hg.height_weight,
                        hg.height_bias,
                    ])
                },
            )
        }
        "bce_segment" => {
            let mask = rasterize_plane_mask(&toy_layout(), EquirectGrid::new(h, w)?)?;
            let logits = Tensor::randn(&[h, w], 2.0, &mut rng);
            gc.run(
                name,
                &[logits],
                |x| Ok(Tensor::scalar(losses::bce_segment(&x[0], &mask)?)),
                |x, g| Ok(vec![losses::bce_segment_backward(&x[0], &mask)?.scale(g.data()[0])]),
            )
        }
        "layout_loss" => {
            let gt = raycast_depth(&toy_layout(), 2 * w)?;
            let depth = Tensor::from_fn(&[w], |_| rng.random_range(1.0..5.0));
            let height = Tensor::scalar(rng.random_range(2.0..4.0));
            gc.run(
                name,
                &[depth, height],
                |x| Ok(Tensor::scalar(losses::layout_loss(&x[0], x[1].data()[0], &gt)?.sum())),
                |x, g| {
                    let (dd, dh) = losses::layout_loss_backward(&x[0], x[1].data()[0], &gt)?;
                    let k = g.data()[0];
                    Ok(vec![dd.scale(k), Tensor::scalar(dh * k)])
                },
            )
        }
        "model" => check_model(eps, seed, &mut rng),
        other => Err(Error::arg("gradcheck", format!("unknown operation {other:?}"))),
    }
}

/// The whole network's total loss against every parameter tensor, with
/// all weights (offsets and segmentation head included) drawn at random so
/// that no path is switched off.
fn check_model(eps: f64, seed: u64, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let config = ModelConfig {
        channels: CHANNELS,
        heads: HEADS,
        image_height: 64,
    };
    let mut net = DopNet::init(config, seed)?;
    let base = net.sampling_grid().base_coords().reshape(&net.sampling_grid().offset_shape())?;
    let names: Vec<String> = net.params.names().map(str::to_string).collect();
    for name in &names {
        let t = net.params.get_mut(name)?;
        let shape = t.shape().to_vec();
        if name == "csda.offsets" {
            *t = Tensor::uniform(&shape, -1.5, 1.5, rng);
            snap_offsets(&base, t);
        } else if name == "flip.offsets" {
            *t = Tensor::uniform(&shape, -1.5, 1.5, rng);
            snap_offsets(&Tensor::zeros(&shape), t);
        } else if name == "seg.weight" {
            *t = Tensor::randn(&shape, 0.2, rng);
        } else if name.ends_with(".bias") {
            let b0 = t.clone();
            *t = b0.zip_map(&Tensor::randn(&shape, 0.05, rng), |a, b| a + b)?;
        }
    }
    let layout = toy_layout();
    let grid = config.image_grid();
    let image = render_panorama(&layout, grid)?;
    let sample = Sample::new(image, &layout, raycast_depth(&layout, grid.width())?, &config)?;
    let template: ParamStore = net.params.clone();

    let build = |x: &[Tensor]| -> Result<DopNet> {
        let mut store = template.clone();
        for (name, v) in names.iter().zip(x) {
            *store.get_mut(name)? = v.clone();
        }
        DopNet::from_params(config, store)
    };
    let inputs: Vec<Tensor> = names.iter().map(|n| net.params.get(n).cloned()).collect::<Result<_>>()?;
    net.params.zero_grads();
    GradCheck::new(eps, seed).with_max_probes(MODEL_PROBES).run(
        "model",
        &inputs,
        |x| Ok(Tensor::scalar(sample_loss(&build(x)?, &sample)?.0.total)),
        |x, g| {
            let mut m = build(x)?;
            let (_, cache) = sample_loss(&m, &sample)?;
            m.params.zero_grads();
            accumulate_sample_grads(&mut m, &sample, &cache, g.data()[0])?;
            names.iter().map(|n| m.params.grad(n).cloned()).collect()
        },
    )
}

/// Runs every operation, or only `only` when given.
pub fn run_suite(eps: f64, seed: u64, only: Option<&str>) -> Result<Vec<GradCheckReport>> {
    match only {
        Some(name) => Ok(vec![run_op(name, eps, seed)?]),
        None => OPS.iter().map(|op| run_op(op, eps, seed)).collect(),
    }
}
