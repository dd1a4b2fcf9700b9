//! The elementwise SRU recurrence.
//!
//! Once the projection `U` (`L x B x 3d`, gate groups laid out as
//! `[forget | reset | candidate]` along the last axis) is available, every
//! `(batch, hidden)` lane evolves independently:
//!
//! ```text
//! f[t] = sigmoid(U[t,0] + v_f * c[t-1] + b_f)
//! r[t] = sigmoid(U[t,1] + v_r * c[t-1] + b_r)
//! c[t] = f[t] * c[t-1] + (1 - f[t]) * U[t,2]
//! h[t] = r[t] * c[t] + (1 - r[t]) * x[t]
//! ```
//!
//! The fused kernels make a single pass over time with all lanes updated in
//! place; [`sru_forward_naive`] is the step-by-step reference built from
//! eager tensor primitives.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Peephole weights and biases of the forget (`_f`) and reset (`_r`) gates.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrenceParams<E> {
    pub v_f: Tensor<E>,
    pub v_r: Tensor<E>,
    pub b_f: Tensor<E>,
    pub b_r: Tensor<E>,
}

impl<E: Element> RecurrenceParams<E> {
    pub fn zeros(d: usize) -> Self {
        RecurrenceParams {
            v_f: Tensor::zeros([d]),
            v_r: Tensor::zeros([d]),
            b_f: Tensor::zeros([d]),
            b_r: Tensor::zeros([d]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.v_f.len()
    }

    fn validate(&self) -> Result<usize> {
        let d = self.v_f.len();
        for t in [&self.v_f, &self.v_r, &self.b_f, &self.b_r] {
            if t.shape() != [d] {
                return Err(Error::shape(
                    "recurrence params",
                    self.v_f.shape(),
                    t.shape(),
                ));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite {
                    op: "recurrence params".into(),
                });
            }
        }
        Ok(d)
    }
}

/// Per-step states and gates saved by a training-mode forward.
#[derive(Clone, Debug)]
pub struct RecurrenceCache<E> {
    dims: (usize, usize, usize),
    c: Vec<E>,
    f: Vec<E>,
    r: Vec<E>,
}

impl<E> RecurrenceCache<E> {
    /// `(L, B, d)` of the forward call that produced this cache.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }
}

pub struct RecurrenceOutput<E> {
    pub h: Tensor<E>,
    pub c_last: Tensor<E>,
    pub cache: Option<RecurrenceCache<E>>,
}

pub struct RecurrenceGrads<E> {
    pub du: Tensor<E>,
    pub dx: Tensor<E>,
    pub dv_f: Tensor<E>,
    pub dv_r: Tensor<E>,
    pub db_f: Tensor<E>,
    pub db_r: Tensor<E>,
    pub dc0: Tensor<E>,
}

fn check_shapes<E: Element>(
    u: &Tensor<E>,
    x: &Tensor<E>,
    params: &RecurrenceParams<E>,
    c0: &Tensor<E>,
) -> Result<(usize, usize, usize)> {
    let d = params.validate()?;
    let (l, b, d3) = u.dims3()?;
    if d3 != 3 * d {
        return Err(Error::shape("recurrence U", u.shape(), &[l, b, 3 * d]));
    }
    if x.shape() != [l, b, d] {
        return Err(Error::shape("recurrence X", x.shape(), &[l, b, d]));
    }
    if c0.shape() != [b, d] {
        return Err(Error::shape("recurrence c0", c0.shape(), &[b, d]));
    }
    Ok((l, b, d))
}

fn check_finite<E: Element>(ts: &[&Tensor<E>]) -> Result<()> {
    if ts.iter().all(|t| t.all_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            op: "recurrence input".into(),
        })
    }
}

struct LaneBlock<'a, E> {
    u: &'a [E],
    x: &'a [E],
    stride_u: usize,
    stride_x: usize,
}

/// Runs one batch row (`d` lanes) through all `l` steps.
#[allow(clippy::too_many_arguments)]
fn forward_lanes<E: Element>(
    l: usize,
    d: usize,
    inp: &LaneBlock<'_, E>,
    p: &RecurrenceParams<E>,
    c: &mut [E],
    h: &mut [E],
    stride_h: usize,
    mut cache: Option<(&mut [E], &mut [E], &mut [E])>,
) {
    let (v_f, v_r, b_f, b_r) = (
        &p.v_f.data()[..d],
        &p.v_r.data()[..d],
        &p.b_f.data()[..d],
        &p.b_r.data()[..d],
    );
    let c = &mut c[..d];
    let one = E::one();
    for t in 0..l {
        let u = &inp.u[t * inp.stride_u..t * inp.stride_u + 3 * d];
        let (u_f, u_r, u_c) = (&u[..d], &u[d..2 * d], &u[2 * d..]);
        let x = &inp.x[t * inp.stride_x..t * inp.stride_x + d];
        let ht = &mut h[t * stride_h..t * stride_h + d];
        match cache.as_mut() {
            None => {
                for i in 0..d {
                    let prev = c[i];
                    let f = (u_f[i] + v_f[i] * prev + b_f[i]).sigmoid();
                    let r = (u_r[i] + v_r[i] * prev + b_r[i]).sigmoid();
                    let next = f * prev + (one - f) * u_c[i];
                    ht[i] = r * next + (one - r) * x[i];
                    c[i] = next;
                }
            }
            Some((cc, cf, cr)) => {
                let k = t * stride_h;
                let (cc, cf, cr) = (&mut cc[k..k + d], &mut cf[k..k + d], &mut cr[k..k + d]);
                for i in 0..d {
                    let prev = c[i];
                    let f = (u_f[i] + v_f[i] * prev + b_f[i]).sigmoid();
                    let r = (u_r[i] + v_r[i] * prev + b_r[i]).sigmoid();
                    let next = f * prev + (one - f) * u_c[i];
                    ht[i] = r * next + (one - r) * x[i];
                    c[i] = next;
                    cc[i] = next;
                    cf[i] = f;
                    cr[i] = r;
                }
            }
        }
    }
}

/// Fused forward scan. Caches `c`, `f`, `r` when `training` is set.
pub fn sru_forward_fused<E: Element>(
    u: &Tensor<E>,
    x: &Tensor<E>,
    params: &RecurrenceParams<E>,
    c0: &Tensor<E>,
    training: bool,
) -> Result<RecurrenceOutput<E>> {
    let (l, b, d) = check_shapes(u, x, params, c0)?;
    check_finite(&[u, x, c0])?;
    let n = l * b * d;
    let mut c_state = c0.data().to_vec();
    let mut h = vec![E::zero(); n];
    let mut cache = training.then(|| (vec![E::zero(); n], vec![E::zero(); n], vec![E::zero(); n]));

    if b > 1 && rayon::current_num_threads() > 1 {
        // Each batch row runs in its own task on a private [L x d] block;
        // lanes never interact, so the schedule cannot change any value.
        let blocks: Vec<_> = (0..b)
            .into_par_iter()
            .zip(c_state.par_chunks_mut(d.max(1)))
            .map(|(bi, c)| {
                let inp = LaneBlock {
                    u: &u.data()[bi * 3 * d..],
                    x: &x.data()[bi * d..],
                    stride_u: b * 3 * d,
                    stride_x: b * d,
                };
                let mut hb = vec![E::zero(); l * d];
                let mut cb = training.then(|| {
                    (
                        vec![E::zero(); l * d],
                        vec![E::zero(); l * d],
                        vec![E::zero(); l * d],
                    )
                });
                forward_lanes(
                    l,
                    d,
                    &inp,
                    params,
                    c,
                    &mut hb,
                    d,
                    cb.as_mut()
                        .map(|(a, f, r)| (a.as_mut_slice(), f.as_mut_slice(), r.as_mut_slice())),
                );
                (hb, cb)
            })
            .collect();
        for (bi, (hb, cb)) in blocks.into_iter().enumerate() {
            for t in 0..l {
                let dst = (t * b + bi) * d;
                h[dst..dst + d].copy_from_slice(&hb[t * d..(t + 1) * d]);
                if let (Some((cc, cf, cr)), Some((sc, sf, sr))) = (cache.as_mut(), cb.as_ref()) {
                    cc[dst..dst + d].copy_from_slice(&sc[t * d..(t + 1) * d]);
                    cf[dst..dst + d].copy_from_slice(&sf[t * d..(t + 1) * d]);
                    cr[dst..dst + d].copy_from_slice(&sr[t * d..(t + 1) * d]);
                }
            }
        }
    } else {
        for bi in 0..b {
            let inp = LaneBlock {
                u: &u.data()[bi * 3 * d..],
                x: &x.data()[bi * d..],
                stride_u: b * 3 * d,
                stride_x: b * d,
            };
            let off = bi * d;
            let c = &mut c_state[off..off + d];
            let cache_view = cache.as_mut().map(|(cc, cf, cr)| {
                (
                    &mut cc[off.min(n)..],
                    &mut cf[off.min(n)..],
                    &mut cr[off.min(n)..],
                )
            });
            forward_lanes(
                l,
                d,
                &inp,
                params,
                c,
                &mut h[off.min(n)..],
                b * d,
                cache_view,
            );
        }
    }

    Ok(RecurrenceOutput {
        h: Tensor::new([l, b, d], h)?,
        c_last: Tensor::new([b, d], c_state)?,
        cache: cache.map(|(c, f, r)| RecurrenceCache {
            dims: (l, b, d),
            c,
            f,
            r,
        }),
    })
}

/// Reference scan: one time step at a time, built only from eager tensor
/// primitives that allocate a fresh tensor per operation.
pub fn sru_forward_naive<E: Element>(
    u: &Tensor<E>,
    x: &Tensor<E>,
    params: &RecurrenceParams<E>,
    c0: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (l, b, d) = check_shapes(u, x, params, c0)?;
    check_finite(&[u, x, c0])?;
    let mut c = c0.clone();
    let mut hs = Vec::with_capacity(l);
    for t in 0..l {
        let ut = u.select0(t)?;
        let xt = x.select0(t)?;
        let u_f = ut.narrow_last(0, d)?;
        let u_r = ut.narrow_last(d, d)?;
        let u_c = ut.narrow_last(2 * d, d)?;
        let f = u_f
            .add(&c.mul_row_vector(&params.v_f)?)?
            .add_row_vector(&params.b_f)?
            .sigmoid();
        let r = u_r
            .add(&c.mul_row_vector(&params.v_r)?)?
            .add_row_vector(&params.b_r)?
            .sigmoid();
        c = f.mul(&c)?.add(&f.one_minus().mul(&u_c)?)?;
        let h = r.mul(&c)?.add(&r.one_minus().mul(&xt)?)?;
        hs.push(h);
    }
    let h = if l == 0 {
        Tensor::zeros([0, b, d])
    } else {
        Tensor::stack0(&hs)?
    };
    Ok((h, c))
}

/// Reverse-time scan producing exact gradients of a scalar loss given the
/// upstream `dh` (`L x B x d`) and optional `dc_last` (`B x d`).
pub fn sru_backward_fused<E: Element>(
    cache: Option<&RecurrenceCache<E>>,
    u: &Tensor<E>,
    x: &Tensor<E>,
    params: &RecurrenceParams<E>,
    c0: &Tensor<E>,
    dh: &Tensor<E>,
    dc_last: Option<&Tensor<E>>,
) -> Result<RecurrenceGrads<E>> {
    let cache = cache
        .ok_or_else(|| Error::Usage("recurrence backward without a training-mode cache".into()))?;
    let (l, b, d) = check_shapes(u, x, params, c0)?;
    if cache.dims != (l, b, d) {
        return Err(Error::shape(
            "recurrence cache",
            &[cache.dims.0, cache.dims.1, cache.dims.2],
            &[l, b, d],
        ));
    }
    if dh.shape() != [l, b, d] {
        return Err(Error::shape("recurrence dH", dh.shape(), &[l, b, d]));
    }
    if let Some(dc) = dc_last {
        if dc.shape() != [b, d] {
            return Err(Error::shape("recurrence dc_last", dc.shape(), &[b, d]));
        }
    }

    let one = E::one();
    let (v_f, v_r) = (params.v_f.data(), params.v_r.data());
    let (ud, xd, g) = (u.data(), x.data(), dh.data());
    let mut du = vec![E::zero(); l * b * 3 * d];
    let mut dx = vec![E::zero(); l * b * d];
    let mut dv_f = vec![E::zero(); d];
    let mut dv_r = vec![E::zero(); d];
    let mut db_f = vec![E::zero(); d];
    let mut db_r = vec![E::zero(); d];
    let mut dc: Vec<E> = match dc_last {
        Some(t) => t.data().to_vec(),
        None => vec![E::zero(); b * d],
    };

    for t in (0..l).rev() {
        for bi in 0..b {
            let row = t * b + bi;
            for i in 0..d {
                let k = row * d + i;
                let lane = bi * d + i;
                let prev = if t == 0 {
                    c0.data()[lane]
                } else {
                    cache.c[k - b * d]
                };
                let (ct, f, r) = (cache.c[k], cache.f[k], cache.r[k]);
                let gh = g[k];
                let uc = ud[row * 3 * d + 2 * d + i];

                // h = r c + (1 - r) x
                let dr = gh * (ct - xd[k]);
                dx[k] = gh * (one - r);
                let dct = dc[lane] + gh * r;
                // c = f prev + (1 - f) uc
                let df = dct * (prev - uc);
                du[row * 3 * d + 2 * d + i] = dct * (one - f);
                let da_f = df * f * (one - f);
                let da_r = dr * r * (one - r);
                du[row * 3 * d + i] = da_f;
                du[row * 3 * d + d + i] = da_r;
                dv_f[i] = dv_f[i] + da_f * prev;
                dv_r[i] = dv_r[i] + da_r * prev;
                db_f[i] = db_f[i] + da_f;
                db_r[i] = db_r[i] + da_r;
                dc[lane] = dct * f + da_f * v_f[i] + da_r * v_r[i];
            }
        }
    }

    Ok(RecurrenceGrads {
        du: Tensor::new([l, b, 3 * d], du)?,
        dx: Tensor::new([l, b, d], dx)?,
        dv_f: Tensor::new([d], dv_f)?,
        dv_r: Tensor::new([d], dv_r)?,
        db_f: Tensor::new([d], db_f)?,
        db_r: Tensor::new([d], db_r)?,
        dc0: Tensor::new([b, d], dc)?,
    })
}
