use ndarray::{s, Array2, Axis};

use super::{silu, silu_grad, MlpArch};
use crate::params::{Gradients, WeightMap};

pub(crate) struct Cache {
    /// Input of every linear layer; `inputs[0]` is the concatenated `[x | t | c]`.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    class_idx: Vec<usize>,
}

pub(crate) fn layer_names(l: usize) -> (String, String) {
    (format!("mlp.{l}.weight"), format!("mlp.{l}.bias"))
}

pub(crate) fn shapes(arch: &MlpArch) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![(
        "class_embedding".to_string(),
        vec![arch.class_count + 1, arch.class_embed_dim],
    )];
    let mut fan_in = arch.input_dim + arch.time_embed_dim + arch.class_embed_dim;
    let widths = arch.hidden.iter().copied().chain(std::iter::once(arch.input_dim));
    for (l, width) in widths.enumerate() {
        let (w, b) = layer_names(l);
        out.push((w, vec![fan_in, width]));
        out.push((b, vec![width]));
        fan_in = width;
    }
    out
}

pub(crate) fn forward(
    arch: &MlpArch,
    weights: &WeightMap,
    x: &Array2<f64>,
    temb: &Array2<f64>,
    class_idx: &[usize],
    keep: bool,
) -> (Array2<f64>, Option<Cache>) {
    let d = arch.input_dim;
    let et = arch.time_embed_dim;
    let batch = x.nrows();
    let table = weights["class_embedding"].view2();
    let mut z = Array2::zeros((batch, d + et + arch.class_embed_dim));
    z.slice_mut(s![.., ..d]).assign(x);
    z.slice_mut(s![.., d..d + et]).assign(temb);
    for (i, &c) in class_idx.iter().enumerate() {
        z.slice_mut(s![i, d + et..]).assign(&table.row(c));
    }

    let layers = arch.hidden.len() + 1;
    let mut inputs = Vec::with_capacity(layers);
    let mut pre = Vec::with_capacity(layers - 1);
    let mut h = z;
    for l in 0..layers {
        let (wn, bn) = layer_names(l);
        let mut y = h.dot(&weights[&wn].view2());
        y += &weights[&bn].view1();
        if keep {
            inputs.push(h);
        }
        if l + 1 < layers {
            let act = y.mapv(silu);
            if keep {
                pre.push(y);
            }
            h = act;
        } else {
            h = y;
        }
    }
    let cache = keep.then(|| Cache {
        inputs,
        pre,
        class_idx: class_idx.to_vec(),
    });
    (h, cache)
}

/// Accumulates parameter gradients into `grads`; returns the gradient w.r.t.
/// the sample input `x`.
pub(crate) fn backward(
    arch: &MlpArch,
    weights: &WeightMap,
    cache: &Cache,
    g_out: &Array2<f64>,
    grads: &mut Gradients,
) -> Array2<f64> {
    let layers = arch.hidden.len() + 1;
    let mut g = g_out.clone();
    for l in (0..layers).rev() {
        if l + 1 < layers {
            g.zip_mut_with(&cache.pre[l], |gv, &p| *gv *= silu_grad(p));
        }
        let (wn, bn) = layer_names(l);
        let gw = cache.inputs[l].t().dot(&g);
        for (a, b) in grads.get_mut(&wn).iter_mut().zip(gw.iter()) {
            *a += b;
        }
        let gb = g.sum_axis(Axis(0));
        for (a, b) in grads.get_mut(&bn).iter_mut().zip(gb.iter()) {
            *a += b;
        }
        g = g.dot(&weights[&wn].view2().t());
    }
    let d = arch.input_dim;
    let off = d + arch.time_embed_dim;
    let ec = arch.class_embed_dim;
    let gt = grads.get_mut("class_embedding");
    for (i, &c) in cache.class_idx.iter().enumerate() {
        for j in 0..ec {
            gt[c * ec + j] += g[[i, off + j]];
        }
    }
    g.slice(s![.., ..d]).to_owned()
}
