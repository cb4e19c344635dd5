//! Pre-norm GPT-style decoder with learned positions, GELU MLP and an
//! untied output head. Backpropagation is written out by hand.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Arch, DifferentiableLm, LogitHead, ParamSegment};
use crate::corpus::TokenId;
use crate::error::Result;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_window: usize,
    pub seed: u64,
    pub init_std: f64,
}

impl TransformerConfig {
    /// d=64, 2 layers, 2 heads, window 256.
    pub fn small(vocab_size: usize, seed: u64) -> Self {
        TransformerConfig {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            context_window: 256,
            seed,
            init_std: 0.02,
        }
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_fc: usize,
    b_fc: usize,
    w_proj: usize,
    b_proj: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    wte: usize,
    wpe: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    w_head: usize,
    segments: Vec<ParamSegment>,
    total: usize,
}

impl Layout {
    fn new(c: &TransformerConfig) -> Self {
        let (v, d, ctx) = (c.vocab_size, c.d_model, c.context_window);
        let mut segments = Vec::new();
        let mut total = 0;
        let mut alloc = |name: String, len: usize| {
            let offset = total;
            segments.push(ParamSegment { name, offset, len });
            total += len;
            offset
        };
        let wte = alloc("wte".into(), v * d);
        let wpe = alloc("wpe".into(), ctx * d);
        let layers = (0..c.n_layers)
            .map(|l| LayerOffsets {
                ln1_g: alloc(format!("h{l}.ln1.g"), d),
                ln1_b: alloc(format!("h{l}.ln1.b"), d),
                w_qkv: alloc(format!("h{l}.attn.w_qkv"), d * 3 * d),
                b_qkv: alloc(format!("h{l}.attn.b_qkv"), 3 * d),
                w_o: alloc(format!("h{l}.attn.w_o"), d * d),
                b_o: alloc(format!("h{l}.attn.b_o"), d),
                ln2_g: alloc(format!("h{l}.ln2.g"), d),
                ln2_b: alloc(format!("h{l}.ln2.b"), d),
                w_fc: alloc(format!("h{l}.mlp.w_fc"), d * 4 * d),
                b_fc: alloc(format!("h{l}.mlp.b_fc"), 4 * d),
                w_proj: alloc(format!("h{l}.mlp.w_proj"), 4 * d * d),
                b_proj: alloc(format!("h{l}.mlp.b_proj"), d),
            })
            .collect();
        let lnf_g = alloc("lnf.g".into(), d);
        let lnf_b = alloc("lnf.b".into(), d);
        let w_head = alloc("head".into(), d * v);
        Layout {
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            w_head,
            segments,
            total,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyTransformer {
    config: TransformerConfig,
    layout: Layout,
    params: Vec<f64>,
}

fn mat(p: &[f64], off: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), &p[off..off + rows * cols]).expect("layout")
}

fn mat_mut(p: &mut [f64], off: usize, rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut p[off..off + rows * cols]).expect("layout")
}

fn vec1(p: &[f64], off: usize, n: usize) -> ArrayView1<'_, f64> {
    ArrayView1::from(&p[off..off + n])
}

fn vec1_mut(p: &mut [f64], off: usize, n: usize) -> ArrayViewMut1<'_, f64> {
    ArrayViewMut1::from(&mut p[off..off + n])
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rr = *r;
        row.mapv_inplace(|v| (v - mean) * rr);
    }
    let out = &xhat * &g + &b;
    (out, LnCache { xhat, rstd })
}

/// Returns dx and accumulates dg, db.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: ArrayView1<f64>,
    mut dg: ArrayViewMut1<f64>,
    mut db: ArrayViewMut1<f64>,
) -> Array2<f64> {
    dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    db += &dy.sum_axis(Axis(0));
    let dxhat = dy * &g;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for t in 0..dy.nrows() {
        let dh = dxhat.row(t);
        let xh = cache.xhat.row(t);
        let mean_dh = dh.sum() / d;
        let mean_dh_xh = dh.dot(&xh) / d;
        let r = cache.rstd[t];
        for j in 0..dy.ncols() {
            dx[[t, j]] = r * (dh[j] - mean_dh - xh[j] * mean_dh_xh);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct LayerCache {
    ln1: LnCache,
    h1: Array2<f64>,
    qkv: Array2<f64>,
    att: Vec<Array2<f64>>,
    a: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hf: Array2<f64>,
}

impl TinyTransformer {
    pub fn new(config: TransformerConfig) -> Self {
        assert!(config.n_heads > 0 && config.d_model % config.n_heads == 0);
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, config.init_std).expect("valid std");
        let proj_normal = Normal::new(0.0, config.init_std / (2.0 * config.n_layers as f64).sqrt())
            .expect("valid std");
        let d = config.d_model;
        for seg in &layout.segments {
            let slice = &mut params[seg.offset..seg.offset + seg.len];
            if seg.name.ends_with(".g") {
                slice.fill(1.0);
            } else if seg.name.ends_with(".b") || seg.name.contains(".b_") {
                slice.fill(0.0);
            } else if seg.name.ends_with("w_o") || seg.name.ends_with("w_proj") {
                slice.iter_mut().for_each(|p| *p = proj_normal.sample(&mut rng));
            } else {
                slice.iter_mut().for_each(|p| *p = normal.sample(&mut rng));
            }
        }
        debug_assert_eq!(layout.w_head + d * config.vocab_size, layout.total);
        TinyTransformer {
            config,
            layout,
            params,
        }
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn forward(&self, ids: &[TokenId]) -> ForwardCache {
        let c = &self.config;
        let (d, t_len) = (c.d_model, ids.len());
        let (nh, hd) = (c.n_heads, c.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();
        let p = &self.params;
        let lay = &self.layout;

        let wte = mat(p, lay.wte, c.vocab_size, d);
        let wpe = mat(p, lay.wpe, c.context_window, d);
        let mut x = Array2::zeros((t_len, d));
        for (t, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(t);
            row += &wte.row(id as usize);
            row += &wpe.row(t);
        }

        let mut layers = Vec::with_capacity(c.n_layers);
        for lo in &lay.layers {
            let (h1, ln1) = layer_norm(&x, vec1(p, lo.ln1_g, d), vec1(p, lo.ln1_b, d));
            let qkv = h1.dot(&mat(p, lo.w_qkv, d, 3 * d)) + &vec1(p, lo.b_qkv, 3 * d);
            let mut a = Array2::zeros((t_len, d));
            let mut att = Vec::with_capacity(nh);
            for h in 0..nh {
                let q = qkv.slice(s![.., h * hd..(h + 1) * hd]);
                let k = qkv.slice(s![.., d + h * hd..d + (h + 1) * hd]);
                let v = qkv.slice(s![.., 2 * d + h * hd..2 * d + (h + 1) * hd]);
                let scores = q.dot(&k.t());
                let mut w = Array2::zeros((t_len, t_len));
                for i in 0..t_len {
                    let row = scores.row(i);
                    let max = (0..=i).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max) * scale;
                    let mut sum = 0.0;
                    for j in 0..=i {
                        let e = (row[j] * scale - max).exp();
                        w[[i, j]] = e;
                        sum += e;
                    }
                    for j in 0..=i {
                        w[[i, j]] /= sum;
                    }
                }
                a.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&w.dot(&v));
                att.push(w);
            }
            let o = a.dot(&mat(p, lo.w_o, d, d)) + &vec1(p, lo.b_o, d);
            x += &o;
            let (h2, ln2) = layer_norm(&x, vec1(p, lo.ln2_g, d), vec1(p, lo.ln2_b, d));
            let f = h2.dot(&mat(p, lo.w_fc, d, 4 * d)) + &vec1(p, lo.b_fc, 4 * d);
            let g = f.mapv(gelu);
            let m = g.dot(&mat(p, lo.w_proj, 4 * d, d)) + &vec1(p, lo.b_proj, d);
            x += &m;
            layers.push(LayerCache {
                ln1,
                h1,
                qkv,
                att,
                a,
                ln2,
                h2,
                f,
                g,
            });
        }
        let (hf, lnf) = layer_norm(&x, vec1(p, lay.lnf_g, d), vec1(p, lay.lnf_b, d));
        ForwardCache { layers, lnf, hf }
    }

    fn head(&self, hf: ArrayView2<f64>) -> Array2<f64> {
        hf.dot(&mat(&self.params, self.layout.w_head, self.config.d_model, self.config.vocab_size))
    }

    fn backward(&self, ids: &[TokenId], cache: &ForwardCache, dlogits: &Array2<f64>) -> Vec<f64> {
        let c = &self.config;
        let (d, t_len, v) = (c.d_model, ids.len(), c.vocab_size);
        let (nh, hd) = (c.n_heads, c.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();
        let p = &self.params;
        let lay = &self.layout;
        let mut grad = vec![0.0; p.len()];

        general_mat_mul(
            1.0,
            &cache.hf.t(),
            dlogits,
            1.0,
            &mut mat_mut(&mut grad, lay.w_head, d, v),
        );
        let dhf = dlogits.dot(&mat(p, lay.w_head, d, v).t());
        let mut dx = {
            let (gs, rest) = grad.split_at_mut(lay.lnf_b);
            layer_norm_backward(
                &dhf,
                &cache.lnf,
                vec1(p, lay.lnf_g, d),
                vec1_mut(gs, lay.lnf_g, d),
                vec1_mut(rest, 0, d),
            )
        };

        for (lo, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // MLP branch
            general_mat_mul(1.0, &lc.g.t(), &dx, 1.0, &mut mat_mut(&mut grad, lo.w_proj, 4 * d, d));
            vec1_mut(&mut grad, lo.b_proj, d).scaled_add(1.0, &dx.sum_axis(Axis(0)));
            let dg = dx.dot(&mat(p, lo.w_proj, 4 * d, d).t());
            let mut df = dg;
            df.zip_mut_with(&lc.f, |a, &f| *a *= gelu_grad(f));
            general_mat_mul(1.0, &lc.h2.t(), &df, 1.0, &mut mat_mut(&mut grad, lo.w_fc, d, 4 * d));
            vec1_mut(&mut grad, lo.b_fc, 4 * d).scaled_add(1.0, &df.sum_axis(Axis(0)));
            let dh2 = df.dot(&mat(p, lo.w_fc, d, 4 * d).t());
            {
                let (gs, rest) = grad.split_at_mut(lo.ln2_b);
                dx += &layer_norm_backward(
                    &dh2,
                    &lc.ln2,
                    vec1(p, lo.ln2_g, d),
                    vec1_mut(gs, lo.ln2_g, d),
                    vec1_mut(rest, 0, d),
                );
            }

            // attention branch
            general_mat_mul(1.0, &lc.a.t(), &dx, 1.0, &mut mat_mut(&mut grad, lo.w_o, d, d));
            vec1_mut(&mut grad, lo.b_o, d).scaled_add(1.0, &dx.sum_axis(Axis(0)));
            let da = dx.dot(&mat(p, lo.w_o, d, d).t());
            let mut dqkv = Array2::<f64>::zeros((t_len, 3 * d));
            for h in 0..nh {
                let q = lc.qkv.slice(s![.., h * hd..(h + 1) * hd]);
                let k = lc.qkv.slice(s![.., d + h * hd..d + (h + 1) * hd]);
                let vv = lc.qkv.slice(s![.., 2 * d + h * hd..2 * d + (h + 1) * hd]);
                let w = &lc.att[h];
                let da_h = da.slice(s![.., h * hd..(h + 1) * hd]);
                let dw = da_h.dot(&vv.t());
                let dv = w.t().dot(&da_h);
                let mut ds = Array2::<f64>::zeros((t_len, t_len));
                for i in 0..t_len {
                    let dot: f64 = (0..=i).map(|j| dw[[i, j]] * w[[i, j]]).sum();
                    for j in 0..=i {
                        ds[[i, j]] = w[[i, j]] * (dw[[i, j]] - dot) * scale;
                    }
                }
                let dq = ds.dot(&k);
                let dk = ds.t().dot(&q);
                dqkv.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&dq);
                dqkv.slice_mut(s![.., d + h * hd..d + (h + 1) * hd]).assign(&dk);
                dqkv.slice_mut(s![.., 2 * d + h * hd..2 * d + (h + 1) * hd]).assign(&dv);
            }
            general_mat_mul(1.0, &lc.h1.t(), &dqkv, 1.0, &mut mat_mut(&mut grad, lo.w_qkv, d, 3 * d));
            vec1_mut(&mut grad, lo.b_qkv, 3 * d).scaled_add(1.0, &dqkv.sum_axis(Axis(0)));
            let dh1 = dqkv.dot(&mat(p, lo.w_qkv, d, 3 * d).t());
            {
                let (gs, rest) = grad.split_at_mut(lo.ln1_b);
                dx += &layer_norm_backward(
                    &dh1,
                    &lc.ln1,
                    vec1(p, lo.ln1_g, d),
                    vec1_mut(gs, lo.ln1_g, d),
                    vec1_mut(rest, 0, d),
                );
            }
        }

        for (t, &id) in ids.iter().enumerate() {
            let row = dx.row(t);
            vec1_mut(&mut grad, lay.wte + id as usize * d, d).scaled_add(1.0, &row);
            vec1_mut(&mut grad, lay.wpe + t * d, d).scaled_add(1.0, &row);
        }
        grad
    }
}

impl DifferentiableLm for TinyTransformer {
    fn arch(&self) -> Arch {
        Arch::Transformer(self.config.clone())
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn context_window(&self) -> usize {
        self.config.context_window
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn segments(&self) -> Vec<ParamSegment> {
        self.layout.segments.clone()
    }

    fn logits(&self, ids: &[TokenId]) -> Vec<f64> {
        let cache = self.forward(ids);
        self.head(cache.hf.view()).into_raw_vec_and_offset().0
    }

    fn next_logits(&self, ids: &[TokenId]) -> Vec<f64> {
        let cache = self.forward(ids);
        let last = cache.hf.slice(s![ids.len() - 1.., ..]);
        self.head(last).into_raw_vec_and_offset().0
    }

    fn value_and_grad(&self, ids: &[TokenId], head: &mut LogitHead<'_>) -> Result<(f64, Vec<f64>)> {
        let cache = self.forward(ids);
        let logits = self.head(cache.hf.view());
        let flat = logits.as_slice().expect("standard layout");
        let (loss, dlogits) = head(flat)?;
        let dlogits = Array2::from_shape_vec((ids.len(), self.config.vocab_size), dlogits)
            .expect("head returns rows x vocab");
        Ok((loss, self.backward(ids, &cache, &dlogits)))
    }
}
