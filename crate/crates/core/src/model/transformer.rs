//! Forward pass, cache, and hand-written backward pass.

use super::{AblationMask, ActivationTrace, Adapter, Model, ModelError, Params};
use crate::numerics::{dot, Matrix, SeededRng};
use crate::scalar::Scalar;

const NORM_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
pub struct ForwardOutput<S> {
    /// `positions × vocab`; row `t` scores the token at `t + 1`.
    pub logits: Matrix<S>,
    pub trace: Option<ActivationTrace<S>>,
}

#[derive(Debug, Clone)]
struct AdapterCache<S> {
    /// Adapter input after dropout.
    input: Matrix<S>,
    /// Dropout keep mask scaled by `1/(1-p)`; `None` when dropout is off.
    keep: Option<Vec<S>>,
    /// `input · down`.
    low: Matrix<S>,
}

#[derive(Debug, Clone)]
struct LayerCache<S> {
    x_in: Matrix<S>,
    a: Matrix<S>,
    inv_rms_attn: Vec<S>,
    q: Matrix<S>,
    k: Matrix<S>,
    v: Matrix<S>,
    probs: Vec<Matrix<S>>,
    o: Matrix<S>,
    x_mid: Matrix<S>,
    m: Matrix<S>,
    inv_rms_mlp: Vec<S>,
    u: Matrix<S>,
    g: Matrix<S>,
    adapters: Option<[AdapterCache<S>; 4]>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Cache<S> {
    tokens: Vec<u32>,
    mask: AblationMask,
    layers: Vec<LayerCache<S>>,
    x_final: Matrix<S>,
    inv_rms_final: Vec<S>,
    f: Matrix<S>,
}

impl<S> Cache<S> {
    pub fn positions(&self) -> usize {
        self.tokens.len()
    }
}

// ----------------------------------------------------------------------------
// Building blocks

fn rms_norm<S: Scalar>(x: &Matrix<S>, gain: &Matrix<S>) -> (Matrix<S>, Vec<S>) {
    let (t, d) = x.shape();
    let g = gain.row(0);
    let mut y = Matrix::zeros(t, d);
    let mut inv = Vec::with_capacity(t);
    for i in 0..t {
        let row = x.row(i);
        let ms = dot(row, row) / S::of(d as f64);
        let r = S::one() / (ms + S::of(NORM_EPS)).sqrt();
        inv.push(r);
        for ((o, &v), &gj) in y.row_mut(i).iter_mut().zip(row).zip(g) {
            *o = v * r * gj;
        }
    }
    (y, inv)
}

/// Returns `dx` and accumulates into `dgain`.
fn rms_norm_backward<S: Scalar>(
    x: &Matrix<S>,
    inv: &[S],
    gain: &Matrix<S>,
    dy: &Matrix<S>,
    dgain: &mut Matrix<S>,
) -> Matrix<S> {
    let (t, d) = x.shape();
    let g = gain.row(0);
    let mut dx = Matrix::zeros(t, d);
    let dg = dgain.row_mut(0);
    for i in 0..t {
        let (xr, dyr, r) = (x.row(i), dy.row(i), inv[i]);
        let mut s = S::zero();
        for j in 0..d {
            dg[j] += dyr[j] * xr[j] * r;
            s += dyr[j] * g[j] * xr[j];
        }
        let c = s * r * r * r / S::of(d as f64);
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = g[j] * dyr[j] * r - xr[j] * c;
        }
    }
    dx
}

fn gelu<S: Scalar>(u: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    half * u * (S::one() + (c * (u + a * u * u * u)).tanh())
}

fn gelu_grad<S: Scalar>(u: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    let th = (c * (u + a * u * u * u)).tanh();
    half * (S::one() + th) + half * u * (S::one() - th * th) * c * (S::one() + S::of(3.0) * a * u * u)
}

/// `x · w` plus the adapter delta, if any.
fn project<S: Scalar>(
    x: &Matrix<S>,
    w: &Matrix<S>,
    adapter: Option<(&Adapter<S>, S, f64)>,
    rng: Option<&mut SeededRng>,
) -> (Matrix<S>, Option<AdapterCache<S>>) {
    let mut y = x.matmul(w);
    let Some((ad, scale, p)) = adapter else {
        return (y, None);
    };
    let (input, keep) = match rng {
        Some(rng) if p > 0.0 => {
            let keep_val = S::of(1.0 / (1.0 - p));
            let keep: Vec<S> = (0..x.data().len())
                .map(|_| if rng.bernoulli(p) { S::zero() } else { keep_val })
                .collect();
            let data = x.data().iter().zip(&keep).map(|(&a, &k)| a * k).collect();
            (Matrix::new(x.rows(), x.cols(), data).expect("same shape"), Some(keep))
        }
        _ => (x.clone(), None),
    };
    let low = input.matmul(&ad.down);
    y.axpy(scale, &low.matmul(&ad.up));
    (y, Some(AdapterCache { input, keep, low }))
}

/// Returns `dx` for [`project`], accumulating weight and adapter gradients.
fn project_backward<S: Scalar>(
    x: &Matrix<S>,
    w: &Matrix<S>,
    dy: &Matrix<S>,
    dw: &mut Matrix<S>,
    adapter: Option<AdapterGrad<'_, S>>,
) -> Matrix<S> {
    dw.add_assign(&x.matmul_tn(dy));
    let mut dx = dy.matmul_nt(w);
    if let Some((ad, dad, scale, cache)) = adapter {
        let mut dup = cache.low.matmul_tn(dy);
        dup.scale(scale);
        dad.up.add_assign(&dup);
        let mut dlow = dy.matmul_nt(&ad.up);
        dlow.scale(scale);
        dad.down.add_assign(&cache.input.matmul_tn(&dlow));
        let mut dinput = dlow.matmul_nt(&ad.down);
        if let Some(keep) = &cache.keep {
            for (v, &k) in dinput.data_mut().iter_mut().zip(keep) {
                *v *= k;
            }
        }
        dx.add_assign(&dinput);
    }
    dx
}

type AdapterGrad<'a, S> = (&'a Adapter<S>, &'a mut Adapter<S>, S, &'a AdapterCache<S>);

fn adapter_grad<'a, S: Scalar>(
    layer: Option<&'a super::LoraLayer<S>>,
    grad: Option<&'a mut Adapter<S>>,
    caches: Option<&'a [AdapterCache<S>; 4]>,
    scale: Option<S>,
    slot: usize,
) -> Option<AdapterGrad<'a, S>> {
    match (layer, grad, caches, scale) {
        (Some(lp), Some(g), Some(c), Some(s)) => {
            Some(([&lp.q, &lp.k, &lp.v, &lp.o][slot], g, s, &c[slot]))
        }
        _ => None,
    }
}

// ----------------------------------------------------------------------------
// Forward

impl<S: Scalar> Model<S> {
    /// Logits for every position and, if `capture`, the per-layer trace.
    pub fn forward(
        &self,
        tokens: &[u32],
        mask: &AblationMask,
        capture: bool,
    ) -> Result<ForwardOutput<S>, ModelError> {
        let (logits, cache) = self.forward_cached(tokens, mask, None)?;
        let trace = capture.then(|| ActivationTrace {
            hidden: cache
                .layers
                .iter()
                .map(|l| l.x_in.clone())
                .chain(std::iter::once(cache.x_final.clone()))
                .collect(),
        });
        Ok(ForwardOutput { logits, trace })
    }

    /// Forward pass keeping what [`Model::backward`] needs. Passing `dropout`
    /// enables adapter dropout (training mode).
    pub fn forward_cached(
        &self,
        tokens: &[u32],
        mask: &AblationMask,
        mut dropout: Option<&mut SeededRng>,
    ) -> Result<(Matrix<S>, Cache<S>), ModelError> {
        self.check_tokens(tokens)?;
        mask.validate(&self.config)?;
        let p = &self.params;
        let cfg = &self.config;
        let t = tokens.len();
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let att_scale = S::of(1.0 / (hd as f64).sqrt());
        let lora = p.lora.as_ref().map(|l| (l, S::of(l.config.scale()), l.config.dropout));

        let mut x = Matrix::from_fn(t, d, |i, j| {
            p.tok_embed[(tokens[i] as usize, j)] + p.pos_embed[(i, j)]
        });
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (l, lp) in p.layers.iter().enumerate() {
            let ad = |slot: usize| {
                lora.map(|(lo, s, pd)| {
                    let la = &lo.layers[l];
                    (
                        [&la.q, &la.k, &la.v, &la.o][slot],
                        s,
                        pd,
                    )
                })
            };
            let (a, inv_rms_attn) = rms_norm(&x, &lp.attn_norm);
            let (q, cq) = project(&a, &lp.wq, ad(0), dropout.as_deref_mut());
            let (k, ck) = project(&a, &lp.wk, ad(1), dropout.as_deref_mut());
            let (v, cv) = project(&a, &lp.wv, ad(2), dropout.as_deref_mut());

            let mut o = Matrix::zeros(t, d);
            let mut probs = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let off = h * hd;
                let mut pm = Matrix::zeros(t, t);
                for i in 0..t {
                    let qi = &q.row(i)[off..off + hd];
                    let row = pm.row_mut(i);
                    let mut max = S::neg_infinity();
                    for j in 0..=i {
                        let s = dot(qi, &k.row(j)[off..off + hd]) * att_scale;
                        row[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut z = S::zero();
                    for r in row.iter_mut().take(i + 1) {
                        *r = (*r - max).exp();
                        z += *r;
                    }
                    for r in row.iter_mut().take(i + 1) {
                        *r /= z;
                    }
                }
                if !mask.heads.contains(&(l, h)) {
                    for i in 0..t {
                        let mut acc = vec![S::zero(); hd];
                        for j in 0..=i {
                            let w = pm[(i, j)];
                            for (a, &vv) in acc.iter_mut().zip(&v.row(j)[off..off + hd]) {
                                *a += w * vv;
                            }
                        }
                        o.row_mut(i)[off..off + hd].copy_from_slice(&acc);
                    }
                }
                probs.push(pm);
            }
            let (attn_out, co) = project(&o, &lp.wo, ad(3), dropout.as_deref_mut());
            let x_in = x.clone();
            x.add_assign(&attn_out);
            let x_mid = x.clone();

            let (m, inv_rms_mlp) = rms_norm(&x, &lp.mlp_norm);
            let u = m.matmul(&lp.w_in);
            let g = Matrix::new(u.rows(), u.cols(), u.data().iter().map(|&z| gelu(z)).collect())
                .expect("same shape");
            if !mask.mlps.contains(&l) {
                x.add_assign(&g.matmul(&lp.w_out));
            }
            let adapters = match (cq, ck, cv, co) {
                (Some(a), Some(b), Some(c), Some(e)) => Some([a, b, c, e]),
                _ => None,
            };
            layers.push(LayerCache {
                x_in,
                a,
                inv_rms_attn,
                q,
                k,
                v,
                probs,
                o,
                x_mid,
                m,
                inv_rms_mlp,
                u,
                g,
                adapters,
            });
        }
        let (f, inv_rms_final) = rms_norm(&x, &p.final_norm);
        let logits = f.matmul(&p.head);
        let cache = Cache {
            tokens: tokens.to_vec(),
            mask: mask.clone(),
            layers,
            x_final: x,
            inv_rms_final,
            f,
        };
        Ok((logits, cache))
    }

    // ------------------------------------------------------------------------
    // Backward

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂logits`.
    pub fn backward(&self, cache: &Cache<S>, dlogits: &Matrix<S>, grads: &mut Params<S>) {
        let p = &self.params;
        let cfg = &self.config;
        let t = cache.tokens.len();
        let hd = cfg.head_dim();
        let att_scale = S::of(1.0 / (hd as f64).sqrt());
        let lora_scale = p.lora.as_ref().map(|l| S::of(l.config.scale()));

        grads.head.add_assign(&cache.f.matmul_tn(dlogits));
        let df = dlogits.matmul_nt(&p.head);
        let mut dx =
            rms_norm_backward(&cache.x_final, &cache.inv_rms_final, &p.final_norm, &df, &mut grads.final_norm);

        for l in (0..cfg.n_layers).rev() {
            let lc = &cache.layers[l];
            let lp = &p.layers[l];
            let gl = &mut grads.layers[l];

            // MLP branch.
            if !cache.mask.mlps.contains(&l) {
                gl.w_out.add_assign(&lc.g.matmul_tn(&dx));
                let mut du = dx.matmul_nt(&lp.w_out);
                for (d, &u) in du.data_mut().iter_mut().zip(lc.u.data()) {
                    *d *= gelu_grad(u);
                }
                gl.w_in.add_assign(&lc.m.matmul_tn(&du));
                let dm = du.matmul_nt(&lp.w_in);
                let dxm = rms_norm_backward(&lc.x_mid, &lc.inv_rms_mlp, &lp.mlp_norm, &dm, &mut gl.mlp_norm);
                dx.add_assign(&dxm);
            }

            // Attention branch.
            let (lora_p, lora_g) = match (&p.lora, &mut grads.lora) {
                (Some(a), Some(b)) => (Some(&a.layers[l]), Some(&mut b.layers[l])),
                _ => (None, None),
            };
            let (mut gq, mut gk, mut gv, mut go) = match lora_g {
                Some(g) => (Some(&mut g.q), Some(&mut g.k), Some(&mut g.v), Some(&mut g.o)),
                None => (None, None, None, None),
            };
            let ad = |slot: usize, g| adapter_grad(lora_p, g, lc.adapters.as_ref(), lora_scale, slot);
            let d_o = project_backward(&lc.o, &lp.wo, &dx, &mut gl.wo, ad(3, go.take()));

            let mut dq = Matrix::zeros(t, cfg.d_model);
            let mut dk = Matrix::zeros(t, cfg.d_model);
            let mut dv = Matrix::zeros(t, cfg.d_model);
            for h in 0..cfg.n_heads {
                if cache.mask.heads.contains(&(l, h)) {
                    continue;
                }
                let off = h * hd;
                let pm = &lc.probs[h];
                for i in 0..t {
                    let doi = &d_o.row(i)[off..off + hd];
                    // dP_ij = do_i · v_j; dS = P ⊙ (dP − Σ_j P dP).
                    let mut dp = vec![S::zero(); i + 1];
                    let mut sum = S::zero();
                    for j in 0..=i {
                        dp[j] = dot(doi, &lc.v.row(j)[off..off + hd]);
                        sum += pm[(i, j)] * dp[j];
                    }
                    for j in 0..=i {
                        let pij = pm[(i, j)];
                        let ds = pij * (dp[j] - sum) * att_scale;
                        let dvj = &mut dv.row_mut(j)[off..off + hd];
                        for (a, &b) in dvj.iter_mut().zip(doi) {
                            *a += pij * b;
                        }
                        if ds != S::zero() {
                            let kj: Vec<S> = lc.k.row(j)[off..off + hd].to_vec();
                            let qi: Vec<S> = lc.q.row(i)[off..off + hd].to_vec();
                            for (a, &b) in dq.row_mut(i)[off..off + hd].iter_mut().zip(&kj) {
                                *a += ds * b;
                            }
                            for (a, &b) in dk.row_mut(j)[off..off + hd].iter_mut().zip(&qi) {
                                *a += ds * b;
                            }
                        }
                    }
                }
            }
            let mut da = project_backward(&lc.a, &lp.wq, &dq, &mut gl.wq, ad(0, gq.take()));
            da.add_assign(&project_backward(&lc.a, &lp.wk, &dk, &mut gl.wk, ad(1, gk.take())));
            da.add_assign(&project_backward(&lc.a, &lp.wv, &dv, &mut gl.wv, ad(2, gv.take())));
            let dxa = rms_norm_backward(&lc.x_in, &lc.inv_rms_attn, &lp.attn_norm, &da, &mut gl.attn_norm);
            dx.add_assign(&dxa);
        }

        for (i, &tok) in cache.tokens.iter().enumerate() {
            let row = dx.row(i);
            for (a, &b) in grads.tok_embed.row_mut(tok as usize).iter_mut().zip(row) {
                *a += b;
            }
            for (a, &b) in grads.pos_embed.row_mut(i).iter_mut().zip(row) {
                *a += b;
            }
        }
    }
}
