//! Small fully-convolutional denoiser for single-channel tiny images.
//!
//! Every hidden layer is a 3x3 same-padded convolution followed by a
//! per-channel shift projected from the `[time | class]` embedding and SiLU.
//! Activations are stored flat in `[batch][channel][row][col]` order.

use ndarray::{s, Array2};

use super::{silu, silu_grad, ConvArch};
use crate::params::{Gradients, WeightMap};

pub(crate) struct Cache {
    /// Input of every convolution, flat.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    emb: Array2<f64>,
    class_idx: Vec<usize>,
}

fn names(l: usize) -> (String, String, String) {
    (
        format!("conv.{l}.kernel"),
        format!("conv.{l}.bias"),
        format!("conv.{l}.cond"),
    )
}

fn layer_channels(arch: &ConvArch) -> Vec<(usize, usize)> {
    let mut dims = vec![1];
    dims.extend(arch.channels.iter().copied());
    dims.push(1);
    dims.windows(2).map(|w| (w[0], w[1])).collect()
}

pub(crate) fn shapes(arch: &ConvArch) -> Vec<(String, Vec<usize>)> {
    let e = arch.time_embed_dim + arch.class_embed_dim;
    let mut out = vec![(
        "class_embedding".to_string(),
        vec![arch.class_count + 1, arch.class_embed_dim],
    )];
    let layers = layer_channels(arch);
    for (l, &(cin, cout)) in layers.iter().enumerate() {
        let (k, b, c) = names(l);
        out.push((k, vec![cout, cin, 3, 3]));
        out.push((b, vec![cout]));
        if l + 1 < layers.len() {
            out.push((c, vec![e, cout]));
        }
    }
    out
}

fn conv3x3(
    input: &[f64],
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; batch * cout * plane];
    for b in 0..batch {
        for co in 0..cout {
            let dst = &mut out[(b * cout + co) * plane..(b * cout + co + 1) * plane];
            for ci in 0..cin {
                let src = &input[(b * cin + ci) * plane..(b * cin + ci + 1) * plane];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let k = kernel[((co * cin + ci) * 3 + ky) * 3 + kx];
                        for y in 0..h {
                            let yy = y as isize + ky as isize - 1;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            let (x_lo, x_hi) = (usize::from(kx == 0), w - usize::from(kx == 2));
                            let row_dst = &mut dst[y * w..(y + 1) * w];
                            let row_src = &src[yy as usize * w..(yy as usize + 1) * w];
                            for x in x_lo..x_hi {
                                row_dst[x] += k * row_src[x + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a 3x3 convolution: accumulates into `g_kernel` and returns
/// the gradient w.r.t. the input.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    g_out: &[f64],
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    g_kernel: &mut [f64],
) -> Vec<f64> {
    let plane = h * w;
    let mut g_in = vec![0.0; batch * cin * plane];
    for b in 0..batch {
        for co in 0..cout {
            let go = &g_out[(b * cout + co) * plane..(b * cout + co + 1) * plane];
            for ci in 0..cin {
                let src = &input[(b * cin + ci) * plane..(b * cin + ci + 1) * plane];
                let gi = &mut g_in[(b * cin + ci) * plane..(b * cin + ci + 1) * plane];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let kidx = ((co * cin + ci) * 3 + ky) * 3 + kx;
                        let k = kernel[kidx];
                        let mut acc = 0.0;
                        for y in 0..h {
                            let yy = y as isize + ky as isize - 1;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            let yy = yy as usize;
                            let (x_lo, x_hi) = (usize::from(kx == 0), w - usize::from(kx == 2));
                            for x in x_lo..x_hi {
                                let xx = x + kx - 1;
                                let gv = go[y * w + x];
                                acc += gv * src[yy * w + xx];
                                gi[yy * w + xx] += gv * k;
                            }
                        }
                        g_kernel[kidx] += acc;
                    }
                }
            }
        }
    }
    g_in
}

pub(crate) fn forward(
    arch: &ConvArch,
    weights: &WeightMap,
    x: &Array2<f64>,
    temb: &Array2<f64>,
    class_idx: &[usize],
    keep: bool,
) -> (Array2<f64>, Option<Cache>) {
    let batch = x.nrows();
    let (h, w) = (arch.height, arch.width);
    let plane = h * w;
    let et = arch.time_embed_dim;
    let table = weights["class_embedding"].view2();
    let mut emb = Array2::zeros((batch, et + arch.class_embed_dim));
    emb.slice_mut(s![.., ..et]).assign(temb);
    for (i, &c) in class_idx.iter().enumerate() {
        emb.slice_mut(s![i, et..]).assign(&table.row(c));
    }

    let layers = layer_channels(arch);
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre = Vec::new();
    let mut cur: Vec<f64> = x.iter().copied().collect();
    for (l, &(cin, cout)) in layers.iter().enumerate() {
        let (kn, bn, cn) = names(l);
        let mut y = conv3x3(&cur, batch, cin, cout, h, w, &weights[&kn].data);
        let bias = &weights[&bn].data;
        let shift = (l + 1 < layers.len()).then(|| emb.dot(&weights[&cn].view2()));
        for b in 0..batch {
            for co in 0..cout {
                let add = bias[co] + shift.as_ref().map_or(0.0, |sh| sh[[b, co]]);
                for v in &mut y[(b * cout + co) * plane..(b * cout + co + 1) * plane] {
                    *v += add;
                }
            }
        }
        if keep {
            inputs.push(cur);
        }
        if l + 1 < layers.len() {
            let act = y.iter().map(|&v| silu(v)).collect();
            if keep {
                pre.push(y);
            }
            cur = act;
        } else {
            cur = y;
        }
    }
    let out = Array2::from_shape_vec((batch, plane), cur).expect("output shape");
    let cache = keep.then(|| Cache {
        inputs,
        pre,
        emb,
        class_idx: class_idx.to_vec(),
    });
    (out, cache)
}

pub(crate) fn backward(
    arch: &ConvArch,
    weights: &WeightMap,
    cache: &Cache,
    g_out: &Array2<f64>,
    grads: &mut Gradients,
) -> Array2<f64> {
    let batch = g_out.nrows();
    let (h, w) = (arch.height, arch.width);
    let plane = h * w;
    let e_dim = cache.emb.ncols();
    let layers = layer_channels(arch);
    let mut g_emb = Array2::<f64>::zeros((batch, e_dim));
    let mut g: Vec<f64> = g_out.iter().copied().collect();
    for l in (0..layers.len()).rev() {
        let (cin, cout) = layers[l];
        let (kn, bn, cn) = names(l);
        let hidden = l + 1 < layers.len();
        if hidden {
            for (gv, &p) in g.iter_mut().zip(&cache.pre[l]) {
                *gv *= silu_grad(p);
            }
        }
        let mut plane_sums = Array2::<f64>::zeros((batch, cout));
        for b in 0..batch {
            for co in 0..cout {
                plane_sums[[b, co]] = g[(b * cout + co) * plane..(b * cout + co + 1) * plane]
                    .iter()
                    .sum();
            }
        }
        let gb = grads.get_mut(&bn);
        for co in 0..cout {
            gb[co] += plane_sums.column(co).sum();
        }
        if hidden {
            let gp = cache.emb.t().dot(&plane_sums);
            for (a, b) in grads.get_mut(&cn).iter_mut().zip(gp.iter()) {
                *a += b;
            }
            g_emb += &plane_sums.dot(&weights[&cn].view2().t());
        }
        g = conv3x3_backward(
            &cache.inputs[l],
            &g,
            batch,
            cin,
            cout,
            h,
            w,
            &weights[&kn].data,
            grads.get_mut(&kn),
        );
    }
    let et = arch.time_embed_dim;
    let ec = arch.class_embed_dim;
    let gt = grads.get_mut("class_embedding");
    for (i, &c) in cache.class_idx.iter().enumerate() {
        for j in 0..ec {
            gt[c * ec + j] += g_emb[[i, et + j]];
        }
    }
    Array2::from_shape_vec((batch, plane), g).expect("input gradient shape")
}
