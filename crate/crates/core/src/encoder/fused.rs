use super::{AttnMask, Params};
use crate::linalg::{gelu, layer_norm_row, mm_acc, mm_bt, Real};
use crate::scratch::Scratch;

const TILE_Q: usize = 16;
const TILE_K: usize = 32;

/// Single-sweep forward pass.
///
/// Rows are processed in tiles of `TILE_Q`. Because attention is causal, a
/// tile's output in every layer only needs keys and values of rows up to the
/// tile's end, so each tile runs through both layers before the next tile
/// starts. Q, K and V are computed per tile (K and V are appended to a running
/// buffer), attention uses an online softmax over key tiles and never visits
/// future tiles, and layer norm and the feed-forward block are applied to the
/// tile in the same pass. No full-sequence Q, score matrix or intermediate
/// layer output is materialized.
pub fn forward_fused<T: Real, S: Scratch>(f: &[T], mask: &AttnMask<'_>, p: &Params<T>, scratch: &S, out: &mut [T]) {
    let d = p.dims().d_model;
    let len = mask.len();
    assert_eq!(f.len(), len * d, "F has wrong shape");
    let rows = scratch.alloc_fill(len, 0u32);
    for (i, r) in rows.iter_mut().enumerate() {
        *r = i as u32;
    }
    sweep(f, mask, p, scratch, rows, |tile_rows, x| {
        for (r, &pos) in tile_rows.iter().enumerate() {
            let pos = pos as usize;
            out[pos * d..(pos + 1) * d].copy_from_slice(&x[r * d..(r + 1) * d]);
        }
    });
}

/// Forward pass fused with the output projection and max pooling.
///
/// Padding rows are never computed: their keys are masked for every query and
/// their outputs are excluded from pooling, so only valid rows are swept.
pub fn forward_fused_pooled<T: Real, S: Scratch>(f: &[T], mask: &AttnMask<'_>, p: &Params<T>, scratch: &S, pooled: &mut [T]) {
    let d = p.dims().d_model;
    let len = mask.len();
    assert_eq!(f.len(), len * d, "F has wrong shape");
    let n = mask.valid.iter().filter(|&&v| v).count();
    if n == 0 {
        pooled[..d].fill(T::zero());
        return;
    }
    let rows = scratch.alloc_fill(n, 0u32);
    for (slot, i) in rows.iter_mut().zip((0..len).filter(|&i| mask.valid[i])) {
        *slot = i as u32;
    }
    let wout = p.t(&p.layout.wout);
    let y = scratch.alloc_fill(TILE_Q * d, T::zero());
    pooled[..d].fill(T::neg_infinity());
    sweep(f, mask, p, scratch, rows, |tile_rows, x| {
        let tq = tile_rows.len();
        let y = &mut y[..tq * d];
        y.fill(T::zero());
        mm_acc(tq, d, d, x, wout, y);
        for r in 0..tq {
            for (o, v) in pooled.iter_mut().zip(&y[r * d..(r + 1) * d]) {
                if *v > *o {
                    *o = *v;
                }
            }
        }
    });
}

fn sweep<T: Real, S: Scratch, F: FnMut(&[u32], &[T])>(
    f: &[T],
    mask: &AttnMask<'_>,
    p: &Params<T>,
    scratch: &S,
    rows: &[u32],
    mut sink: F,
) {
    let dims = p.dims();
    let (d, ffn, layers) = (dims.d_model, dims.ffn, dims.layers);
    let n = rows.len();
    let scale = T::one() / T::of(d as f64).sqrt();

    let kv = scratch.alloc_fill(2 * layers * n * d, T::zero());
    let (k_all, v_all) = kv.split_at_mut(layers * n * d);
    let xt = scratch.alloc_fill(TILE_Q * d, T::zero());
    let h = scratch.alloc_fill(TILE_Q * d, T::zero());
    let q = scratch.alloc_fill(TILE_Q * d, T::zero());
    let acc = scratch.alloc_fill(TILE_Q * d, T::zero());
    let sc = scratch.alloc_fill(TILE_Q * TILE_K, T::zero());
    let m = scratch.alloc_fill(TILE_Q, T::zero());
    let l = scratch.alloc_fill(TILE_Q, T::zero());
    let f1 = scratch.alloc_fill(TILE_Q * ffn, T::zero());
    let xhat = scratch.alloc_fill(d, T::zero());

    for a in (0..n).step_by(TILE_Q) {
        let b = (a + TILE_Q).min(n);
        let tq = b - a;
        for r in 0..tq {
            let pos = rows[a + r] as usize;
            xt[r * d..(r + 1) * d].copy_from_slice(&f[pos * d..(pos + 1) * d]);
        }
        for (li, lo) in p.layout.layers.iter().enumerate() {
            let kbuf = &mut k_all[li * n * d..(li + 1) * n * d];
            let vbuf = &mut v_all[li * n * d..(li + 1) * n * d];
            let (g1, b1) = (p.t(&lo.ln1_g), p.t(&lo.ln1_b));
            for r in 0..tq {
                layer_norm_row(&xt[r * d..(r + 1) * d], g1, b1, xhat, &mut h[r * d..(r + 1) * d]);
            }
            let ht = &h[..tq * d];
            q[..tq * d].fill(T::zero());
            mm_acc(tq, d, d, ht, p.t(&lo.wq), &mut q[..tq * d]);
            kbuf[a * d..b * d].fill(T::zero());
            mm_acc(tq, d, d, ht, p.t(&lo.wk), &mut kbuf[a * d..b * d]);
            vbuf[a * d..b * d].fill(T::zero());
            mm_acc(tq, d, d, ht, p.t(&lo.wv), &mut vbuf[a * d..b * d]);

            m[..tq].fill(T::neg_infinity());
            l[..tq].fill(T::zero());
            acc[..tq * d].fill(T::zero());
            // Key tiles at or before this query tile only.
            for c in (0..b).step_by(TILE_K) {
                let e = (c + TILE_K).min(b);
                let tk = e - c;
                let s = &mut sc[..tq * tk];
                mm_bt(tq, d, tk, &q[..tq * d], &kbuf[c * d..e * d], s);
                for r in 0..tq {
                    let pi = rows[a + r] as usize;
                    let row = &mut s[r * tk..(r + 1) * tk];
                    let mut mx = T::neg_infinity();
                    for (jj, x) in row.iter_mut().enumerate() {
                        if mask.allowed(pi, rows[c + jj] as usize) {
                            *x *= scale;
                            mx = mx.max(*x);
                        } else {
                            *x = T::neg_infinity();
                        }
                    }
                    if mx == T::neg_infinity() {
                        row.fill(T::zero());
                        continue;
                    }
                    let m_new = m[r].max(mx);
                    if m[r] != T::neg_infinity() && m_new > m[r] {
                        let corr = (m[r] - m_new).exp();
                        l[r] *= corr;
                        for x in &mut acc[r * d..(r + 1) * d] {
                            *x *= corr;
                        }
                    }
                    m[r] = m_new;
                    for x in row.iter_mut() {
                        *x = (*x - m_new).exp();
                        l[r] += *x;
                    }
                }
                mm_acc(tq, tk, d, s, &vbuf[c * d..e * d], &mut acc[..tq * d]);
            }
            for r in 0..tq {
                if l[r] > T::zero() {
                    let inv = T::one() / l[r];
                    for x in &mut acc[r * d..(r + 1) * d] {
                        *x *= inv;
                    }
                }
            }
            mm_acc(tq, d, d, &acc[..tq * d], p.t(&lo.wo), &mut xt[..tq * d]);

            let (g2, b2) = (p.t(&lo.ln2_g), p.t(&lo.ln2_b));
            for r in 0..tq {
                layer_norm_row(&xt[r * d..(r + 1) * d], g2, b2, xhat, &mut h[r * d..(r + 1) * d]);
            }
            let f1t = &mut f1[..tq * ffn];
            f1t.fill(T::zero());
            mm_acc(tq, d, ffn, &h[..tq * d], p.t(&lo.w1), f1t);
            for z in f1t.iter_mut() {
                *z = gelu(*z);
            }
            mm_acc(tq, ffn, d, f1t, p.t(&lo.w2), &mut xt[..tq * d]);
        }
        sink(&rows[a..b], &xt[..tq * d]);
    }
}
