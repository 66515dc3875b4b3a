use ndarray::Array2;

use super::{BlockParams, Conditioning, DitError, LoraGrads, LoraSet, Site, ToyDit};
use crate::mask::MaskMode;
use crate::plan::LatentPlan;
use crate::raster::RegionMap;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// `x W^T` for `x: n x k`, `w: d x k`.
fn proj(x: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    let (n, k) = x.dim();
    let d = w.nrows();
    let xs = x.as_slice().expect("standard layout");
    let ws = w.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let xi = &xs[i * k..(i + 1) * k];
        for o in 0..d {
            let wo = &ws[o * k..(o + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += xi[p] * wo[p];
            }
            out[i * d + o] = acc;
        }
    }
    Array2::from_shape_vec((n, d), out).unwrap()
}

/// `dy W` for `dy: n x d`, `w: d x k`.
fn proj_back(dy: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    let (n, d) = dy.dim();
    let k = w.ncols();
    let ds = dy.as_slice().expect("standard layout");
    let ws = w.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let oi = &mut out[i * k..(i + 1) * k];
        for o in 0..d {
            let g = ds[i * d + o];
            if g == 0.0 {
                continue;
            }
            let wo = &ws[o * k..(o + 1) * k];
            for p in 0..k {
                oi[p] += g * wo[p];
            }
        }
    }
    Array2::from_shape_vec((n, k), out).unwrap()
}

struct LnCache {
    u: Array2<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &Array2<f64>) -> LnCache {
    let (n, d) = x.dim();
    let mut u = x.clone();
    let mut rstd = Vec::with_capacity(n);
    for mut row in u.rows_mut() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * r);
        rstd.push(r);
    }
    LnCache { u, rstd }
}

fn layer_norm_back(cache: &LnCache, du: &Array2<f64>) -> Array2<f64> {
    let d = du.ncols() as f64;
    let mut dx = du.clone();
    for ((mut row, u), &r) in dx.rows_mut().into_iter().zip(cache.u.rows()).zip(&cache.rstd) {
        let mean_du = row.iter().sum::<f64>() / d;
        let mean_duu = row.iter().zip(u.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        for (v, &ui) in row.iter_mut().zip(u.iter()) {
            *v = r * (*v - mean_du - ui * mean_duu);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn timestep_embedding(t: usize, d: usize) -> Vec<f64> {
    let mut e = vec![0.0; d];
    for i in 0..d / 2 {
        let freq = (-(10_000f64.ln()) * (2 * i) as f64 / d as f64).exp();
        e[2 * i] = (t as f64 * freq).sin();
        e[2 * i + 1] = (t as f64 * freq).cos();
    }
    e
}

/// Adds every adapter bound to `(block, site)` to `y`, recording the
/// down-projections for the backward pass.
fn apply_site(
    loras: &LoraSet,
    masks: &[Vec<bool>],
    block: usize,
    site: Site,
    x: &Array2<f64>,
    y: &mut Array2<f64>,
    downs: &mut [Option<Array2<f64>>],
) {
    let xs = x.as_slice().unwrap();
    for (idx, e) in loras.entries.iter().enumerate() {
        if e.block != block || e.site != site {
            continue;
        }
        let m = &e.module;
        let (r, k, d) = (m.rank(), m.k(), m.d());
        let (a, b) = (m.a.as_slice().unwrap(), m.b.as_slice().unwrap());
        let ys = y.as_slice_mut().unwrap();
        let mut down = vec![0.0; x.nrows() * r];
        for (i, &on) in masks[idx].iter().enumerate() {
            if !on {
                continue;
            }
            let xi = &xs[i * k..(i + 1) * k];
            let di = &mut down[i * r..(i + 1) * r];
            for q in 0..r {
                let aq = &a[q * k..(q + 1) * k];
                let mut acc = 0.0;
                for p in 0..k {
                    acc += aq[p] * xi[p];
                }
                di[q] = acc;
            }
            let yi = &mut ys[i * d..(i + 1) * d];
            for o in 0..d {
                let bo = &b[o * r..(o + 1) * r];
                let mut acc = 0.0;
                for q in 0..r {
                    acc += bo[q] * di[q];
                }
                yi[o] += m.scale * acc;
            }
        }
        downs[idx] = Some(Array2::from_shape_vec((x.nrows(), r), down).unwrap());
    }
}

#[allow(clippy::too_many_arguments)]
fn apply_site_back(
    loras: &LoraSet,
    masks: &[Vec<bool>],
    block: usize,
    site: Site,
    x: &Array2<f64>,
    dy: &Array2<f64>,
    dx: &mut Array2<f64>,
    downs: &[Option<Array2<f64>>],
    grads: &mut LoraGrads,
) {
    let xs = x.as_slice().unwrap();
    let dys = dy.as_slice().unwrap();
    for (idx, e) in loras.entries.iter().enumerate() {
        if e.block != block || e.site != site {
            continue;
        }
        let m = &e.module;
        let down = downs[idx]
            .as_ref()
            .expect("forward recorded this site")
            .as_slice()
            .unwrap();
        let (r, k, d) = (m.rank(), m.k(), m.d());
        let (a, b) = (m.a.as_slice().unwrap(), m.b.as_slice().unwrap());
        let ga = grads.a[idx].as_slice_mut().unwrap();
        let gb = grads.b[idx].as_slice_mut().unwrap();
        let dxs = dx.as_slice_mut().unwrap();
        let mut dd = vec![0.0; r];
        for (i, &on) in masks[idx].iter().enumerate() {
            if !on {
                continue;
            }
            let dyi = &dys[i * d..(i + 1) * d];
            let di = &down[i * r..(i + 1) * r];
            dd.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..d {
                let g = m.scale * dyi[o];
                let gbo = &mut gb[o * r..(o + 1) * r];
                let bo = &b[o * r..(o + 1) * r];
                for q in 0..r {
                    gbo[q] += g * di[q];
                    dd[q] += g * bo[q];
                }
            }
            let xi = &xs[i * k..(i + 1) * k];
            let dxi = &mut dxs[i * k..(i + 1) * k];
            for (q, &ddq) in dd.iter().enumerate() {
                let gaq = &mut ga[q * k..(q + 1) * k];
                let aq = &a[q * k..(q + 1) * k];
                for p in 0..k {
                    gaq[p] += ddq * xi[p];
                    dxi[p] += ddq * aq[p];
                }
            }
        }
    }
}

struct BlockCache {
    ln1: LnCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ln2: LnCache,
    f1: Array2<f64>,
    g: Array2<f64>,
}

/// Intermediate values of one forward pass.
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    masks: Vec<Vec<bool>>,
    downs: Vec<Option<Array2<f64>>>,
}

impl ForwardCache {
    /// Attention weights of `head` in `block`, `S x S` (query rows).
    pub fn attention(&self, block: usize, head: usize) -> &Array2<f64> {
        &self.blocks[block].probs[head]
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }
}

impl ToyDit {
    fn check_inputs(&self, cond: &Conditioning, loras: &LoraSet, z_t: &Array2<f64>) -> Result<(), DitError> {
        let v = self.config.grid.token_count();
        if z_t.dim() != (v, self.config.d_latent) {
            return Err(DitError::ShapeMismatch(format!(
                "z_t is {:?}, expected ({v}, {})",
                z_t.dim(),
                self.config.d_latent
            )));
        }
        if cond.layout().visual() != v || cond.region_map.grid != self.config.grid {
            return Err(DitError::MaskMismatch(format!(
                "conditioning covers {} visual tokens, model grid has {v}",
                cond.layout().visual()
            )));
        }
        loras.check(&self.config)
    }

    fn embed(&self, cond: &Conditioning, z_t: &Array2<f64>, t: usize) -> Array2<f64> {
        let d = self.config.d_model;
        let text = cond.layout().text_len();
        let mut h = Array2::zeros((cond.seq_len(), d));
        let mut row = 0;
        for seg in &cond.segments {
            for (j, &id) in seg.iter().enumerate() {
                for c in 0..d {
                    h[[row, c]] = self.text_emb[[id, c]] + self.text_pos[[j, c]];
                }
                row += 1;
            }
        }
        let zin = proj(&z_t.as_standard_layout().to_owned(), &self.w_in);
        let temb = timestep_embedding(t, d);
        for v in 0..zin.nrows() {
            for c in 0..d {
                h[[text + v, c]] = zin[[v, c]] + self.vis_pos[[v, c]] + temb[c];
            }
        }
        h
    }

    fn attention(
        &self,
        cond: &Conditioning,
        q: &Array2<f64>,
        k: &Array2<f64>,
        v: &Array2<f64>,
    ) -> (Array2<f64>, Vec<Array2<f64>>) {
        let (s, d) = q.dim();
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (q.as_slice().unwrap(), k.as_slice().unwrap(), v.as_slice().unwrap());
        let mut o = vec![0.0; s * d];
        let mut probs = Vec::with_capacity(self.config.n_heads);
        let mut w = Vec::with_capacity(s);
        for h in 0..self.config.n_heads {
            let off = h * dh;
            let mut p = vec![0.0; s * s];
            for i in 0..s {
                let keys = &cond.allowed[i];
                let qi = &qs[i * d + off..i * d + off + dh];
                w.clear();
                for &j in keys {
                    let kj = &ks[j * d + off..j * d + off + dh];
                    let mut acc = 0.0;
                    for c in 0..dh {
                        acc += qi[c] * kj[c];
                    }
                    w.push(acc * scale);
                }
                let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for l in w.iter_mut() {
                    *l = (*l - max).exp();
                    sum += *l;
                }
                let pi = &mut p[i * s..(i + 1) * s];
                for (&j, l) in keys.iter().zip(w.iter_mut()) {
                    *l /= sum;
                    pi[j] = *l;
                }
                let oi = &mut o[i * d + off..i * d + off + dh];
                for (&j, &pij) in keys.iter().zip(w.iter()) {
                    let vj = &vs[j * d + off..j * d + off + dh];
                    for c in 0..dh {
                        oi[c] += pij * vj[c];
                    }
                }
            }
            probs.push(Array2::from_shape_vec((s, s), p).unwrap());
        }
        (Array2::from_shape_vec((s, d), o).unwrap(), probs)
    }

    fn attention_back(
        &self,
        cond: &Conditioning,
        cache: &BlockCache,
        d_o: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let (s, d) = cache.q.dim();
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (
            cache.q.as_slice().unwrap(),
            cache.k.as_slice().unwrap(),
            cache.v.as_slice().unwrap(),
        );
        let dos = d_o.as_slice().unwrap();
        let mut dq = vec![0.0; s * d];
        let mut dk = vec![0.0; s * d];
        let mut dv = vec![0.0; s * d];
        let mut dp = Vec::with_capacity(s);
        for h in 0..self.config.n_heads {
            let off = h * dh;
            let p = cache.probs[h].as_slice().unwrap();
            for i in 0..s {
                let keys = &cond.allowed[i];
                let pi = &p[i * s..(i + 1) * s];
                let doi = &dos[i * d + off..i * d + off + dh];
                dp.clear();
                let mut dot = 0.0;
                for &j in keys {
                    let pij = pi[j];
                    let vj = &vs[j * d + off..j * d + off + dh];
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    let mut acc = 0.0;
                    for c in 0..dh {
                        acc += doi[c] * vj[c];
                        dvj[c] += pij * doi[c];
                    }
                    dp.push(acc);
                    dot += pij * acc;
                }
                let qi = &qs[i * d + off..i * d + off + dh];
                for (&j, &dpj) in keys.iter().zip(dp.iter()) {
                    let dl = pi[j] * (dpj - dot) * scale;
                    if dl == 0.0 {
                        continue;
                    }
                    let kj = &ks[j * d + off..j * d + off + dh];
                    let dqi = &mut dq[i * d + off..i * d + off + dh];
                    for c in 0..dh {
                        dqi[c] += dl * kj[c];
                    }
                    let dkj = &mut dk[j * d + off..j * d + off + dh];
                    for c in 0..dh {
                        dkj[c] += dl * qi[c];
                    }
                }
            }
        }
        let wrap = |x: Vec<f64>| Array2::from_shape_vec((s, d), x).unwrap();
        (wrap(dq), wrap(dk), wrap(dv))
    }

    #[allow(clippy::too_many_arguments)]
    fn block_forward(
        &self,
        b: usize,
        params: &BlockParams,
        cond: &Conditioning,
        loras: &LoraSet,
        masks: &[Vec<bool>],
        downs: &mut [Option<Array2<f64>>],
        h: Array2<f64>,
    ) -> (Array2<f64>, BlockCache) {
        let ln1 = layer_norm(&h);
        let mut q = proj(&ln1.u, &params.wq);
        let mut k = proj(&ln1.u, &params.wk);
        let mut v = proj(&ln1.u, &params.wv);
        apply_site(loras, masks, b, Site::Q, &ln1.u, &mut q, downs);
        apply_site(loras, masks, b, Site::K, &ln1.u, &mut k, downs);
        apply_site(loras, masks, b, Site::V, &ln1.u, &mut v, downs);
        let (o, probs) = self.attention(cond, &q, &k, &v);
        let h1 = h + proj(&o, &params.wo);
        let ln2 = layer_norm(&h1);
        let f1 = proj(&ln2.u, &params.w1);
        let g = f1.mapv(gelu);
        let mut f2 = proj(&g, &params.w2);
        apply_site(loras, masks, b, Site::FfnOut, &g, &mut f2, downs);
        let h2 = h1 + f2;
        (
            h2,
            BlockCache {
                ln1,
                q,
                k,
                v,
                probs,
                ln2,
                f1,
                g,
            },
        )
    }

    fn lora_masks(&self, cond: &Conditioning, loras: &LoraSet) -> Vec<Vec<bool>> {
        let text = cond.layout().text_len();
        loras
            .entries
            .iter()
            .map(|e| {
                let mut m = vec![false; text];
                m.extend(e.visual_mask(&cond.region_map));
                m
            })
            .collect()
    }

    /// Predicted noise, `V x d_latent`.
    pub fn forward(
        &self,
        cond: &Conditioning,
        loras: &LoraSet,
        z_t: &Array2<f64>,
        t: usize,
    ) -> Result<Array2<f64>, DitError> {
        Ok(self.forward_cached(cond, loras, z_t, t)?.0)
    }

    pub fn forward_cached(
        &self,
        cond: &Conditioning,
        loras: &LoraSet,
        z_t: &Array2<f64>,
        t: usize,
    ) -> Result<(Array2<f64>, ForwardCache), DitError> {
        self.check_inputs(cond, loras, z_t)?;
        let masks = self.lora_masks(cond, loras);
        let mut downs = vec![None; loras.len()];
        let mut h = self.embed(cond, z_t, t);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (b, params) in self.blocks.iter().enumerate() {
            let (next, cache) = self.block_forward(b, params, cond, loras, &masks, &mut downs, h);
            h = next;
            blocks.push(cache);
        }
        let text = cond.layout().text_len();
        let visual = h.slice(ndarray::s![text.., ..]).to_owned();
        let final_ln = layer_norm(&visual);
        let out = proj(&final_ln.u, &self.w_out);
        Ok((
            out,
            ForwardCache {
                blocks,
                final_ln,
                masks,
                downs,
            },
        ))
    }

    /// Gradients of a scalar loss with respect to every adapter parameter,
    /// given `d_out = dL / d(output)`.
    pub fn backward(
        &self,
        cond: &Conditioning,
        loras: &LoraSet,
        cache: &ForwardCache,
        d_out: &Array2<f64>,
    ) -> Result<LoraGrads, DitError> {
        let v = self.config.grid.token_count();
        if d_out.dim() != (v, self.config.d_latent) {
            return Err(DitError::ShapeMismatch(format!("d_out is {:?}", d_out.dim())));
        }
        if cache.masks.len() != loras.len() {
            return Err(DitError::ShapeMismatch(
                "cache was built for a different adapter set".into(),
            ));
        }
        let mut grads = LoraGrads::zeros_like(loras);
        let Some(lowest) = loras.entries.iter().map(|e| e.block).min() else {
            return Ok(grads);
        };
        let text = cond.layout().text_len();
        let d_u = proj_back(&d_out.as_standard_layout().to_owned(), &self.w_out);
        let d_vis = layer_norm_back(&cache.final_ln, &d_u);
        let mut dh = Array2::zeros((cond.seq_len(), self.config.d_model));
        dh.slice_mut(ndarray::s![text.., ..]).assign(&d_vis);

        for b in (lowest..self.blocks.len()).rev() {
            let params = &self.blocks[b];
            let c = &cache.blocks[b];
            // FFN branch
            let mut dg = proj_back(&dh, &params.w2);
            apply_site_back(
                loras,
                &cache.masks,
                b,
                Site::FfnOut,
                &c.g,
                &dh,
                &mut dg,
                &cache.downs,
                &mut grads,
            );
            let df1 = ndarray::Zip::from(&dg)
                .and(&c.f1)
                .map_collect(|&g, &x| g * gelu_grad(x));
            let du2 = proj_back(&df1, &params.w1);
            let mut dh1 = dh;
            dh1 += &layer_norm_back(&c.ln2, &du2);
            // attention branch
            let d_o = proj_back(&dh1, &params.wo);
            let (dq, dk, dv) = self.attention_back(cond, c, &d_o);
            let mut du = proj_back(&dq, &params.wq);
            du += &proj_back(&dk, &params.wk);
            du += &proj_back(&dv, &params.wv);
            for (site, dy) in [(Site::Q, &dq), (Site::K, &dk), (Site::V, &dv)] {
                apply_site_back(
                    loras,
                    &cache.masks,
                    b,
                    site,
                    &c.ln1.u,
                    dy,
                    &mut du,
                    &cache.downs,
                    &mut grads,
                );
            }
            dh1 += &layer_norm_back(&c.ln1, &du);
            dh = dh1;
        }
        Ok(grads)
    }
}

/// Builds the conditioning for `latent_plan` and runs one forward pass.
#[allow(clippy::too_many_arguments)]
pub fn dit_forward(
    model: &ToyDit,
    latent_plan: &LatentPlan,
    region_map: &RegionMap,
    mask_mode: MaskMode,
    loras: &LoraSet,
    z_t: &Array2<f64>,
    t: usize,
) -> Result<Array2<f64>, DitError> {
    let cond = Conditioning::from_plan(model.config(), latent_plan, region_map.clone(), mask_mode)?;
    model.forward(&cond, loras, z_t, t)
}
