use super::{AttnMask, Params};
use crate::linalg::{layer_norm_row, gelu, mm_acc, mm_bt, Real};
use crate::scratch::Scratch;

/// Layered forward pass: every layer materializes full `Q`, `K`, `V`, the
/// `len × len` score matrix and the feed-forward activations before the next
/// layer starts. Masked scores are `-inf`; a row with no allowed key gets a
/// zero attention output.
pub fn forward_reference<T: Real, S: Scratch>(f: &[T], mask: &AttnMask<'_>, p: &Params<T>, scratch: &S, out: &mut [T]) {
    let dims = p.dims();
    let (len, d, ffn) = (mask.len(), dims.d_model, dims.ffn);
    assert_eq!(f.len(), len * d, "F has wrong shape");
    let scale = T::one() / T::of(d as f64).sqrt();

    let x = scratch.alloc_copy(f);
    let h = scratch.alloc_fill(len * d, T::zero());
    let xhat = scratch.alloc_fill(d, T::zero());
    let q = scratch.alloc_fill(len * d, T::zero());
    let k = scratch.alloc_fill(len * d, T::zero());
    let v = scratch.alloc_fill(len * d, T::zero());
    let s = scratch.alloc_fill(len * len, T::zero());
    let att = scratch.alloc_fill(len * d, T::zero());
    let f1 = scratch.alloc_fill(len * ffn, T::zero());

    for lo in &p.layout.layers {
        let (g1, b1) = (p.t(&lo.ln1_g), p.t(&lo.ln1_b));
        for i in 0..len {
            layer_norm_row(&x[i * d..(i + 1) * d], g1, b1, xhat, &mut h[i * d..(i + 1) * d]);
        }
        for (buf, w) in [(&mut *q, &lo.wq), (&mut *k, &lo.wk), (&mut *v, &lo.wv)] {
            buf.fill(T::zero());
            mm_acc(len, d, d, h, p.t(w), buf);
        }
        mm_bt(len, d, len, q, k, s);
        for i in 0..len {
            let row = &mut s[i * len..(i + 1) * len];
            let mut max = T::neg_infinity();
            for (j, x) in row.iter_mut().enumerate() {
                if mask.allowed(i, j) {
                    *x *= scale;
                    max = max.max(*x);
                } else {
                    *x = T::neg_infinity();
                }
            }
            if max == T::neg_infinity() {
                row.fill(T::zero());
                continue;
            }
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        att.fill(T::zero());
        mm_acc(len, len, d, s, v, att);
        // Residual: x += att·Wo.
        mm_acc(len, d, d, att, p.t(&lo.wo), x);

        let (g2, b2) = (p.t(&lo.ln2_g), p.t(&lo.ln2_b));
        for i in 0..len {
            layer_norm_row(&x[i * d..(i + 1) * d], g2, b2, xhat, &mut h[i * d..(i + 1) * d]);
        }
        f1.fill(T::zero());
        mm_acc(len, d, ffn, h, p.t(&lo.w1), f1);
        for z in f1.iter_mut() {
            *z = gelu(*z);
        }
        mm_acc(len, ffn, d, f1, p.t(&lo.w2), x);
    }
    out.copy_from_slice(x);
}

#[cfg(test)]
mod tests {
    use super::super::test_util::*;
    use super::super::ModelDims;
    use super::*;
    use crate::linalg::{dot, LN_EPS};
    use crate::nnsearch::test_util::rng;
    use crate::scratch::HeapScratch;

    /// Independent straight-loop implementation, row at a time, no matrices.
    fn straight(f: &[f64], mask: &AttnMask<'_>, p: &Params<f64>) -> Vec<f64> {
        let dims = p.dims();
        let (len, d, ffn) = (mask.len(), dims.d_model, dims.ffn);
        let col = |w: &[f64], x: &[f64], n_out: usize| -> Vec<f64> {
            (0..n_out).map(|c| (0..x.len()).map(|r| x[r] * w[r * n_out + c]).sum()).collect()
        };
        let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
            let mu = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / x.len() as f64;
            x.iter().enumerate().map(|(i, v)| g[i] * (v - mu) / (var + LN_EPS).sqrt() + b[i]).collect()
        };
        let mut rows: Vec<Vec<f64>> = (0..len).map(|i| f[i * d..(i + 1) * d].to_vec()).collect();
        for lo in &p.layout.layers {
            let h: Vec<Vec<f64>> = rows.iter().map(|r| ln(r, p.t(&lo.ln1_g), p.t(&lo.ln1_b))).collect();
            let q: Vec<Vec<f64>> = h.iter().map(|r| col(p.t(&lo.wq), r, d)).collect();
            let k: Vec<Vec<f64>> = h.iter().map(|r| col(p.t(&lo.wk), r, d)).collect();
            let v: Vec<Vec<f64>> = h.iter().map(|r| col(p.t(&lo.wv), r, d)).collect();
            let mut next = Vec::with_capacity(len);
            for i in 0..len {
                let allowed: Vec<usize> = (0..len).filter(|&j| mask.allowed(i, j)).collect();
                let mut a = vec![0.0; d];
                if !allowed.is_empty() {
                    let sc: Vec<f64> = allowed.iter().map(|&j| dot(&q[i], &k[j]) / (d as f64).sqrt()).collect();
                    let m = sc.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = sc.iter().map(|s| (s - m).exp()).sum();
                    for (s, &j) in sc.iter().zip(&allowed) {
                        for c in 0..d {
                            a[c] += (s - m).exp() / z * v[j][c];
                        }
                    }
                }
                let o = col(p.t(&lo.wo), &a, d);
                let mid: Vec<f64> = rows[i].iter().zip(&o).map(|(x, y)| x + y).collect();
                let h2 = ln(&mid, p.t(&lo.ln2_g), p.t(&lo.ln2_b));
                let g: Vec<f64> = col(p.t(&lo.w1), &h2, ffn).into_iter().map(gelu).collect();
                let f2 = col(p.t(&lo.w2), &g, d);
                next.push(mid.iter().zip(&f2).map(|(x, y)| x + y).collect());
            }
            rows = next;
        }
        rows.concat()
    }

    #[test]
    fn matches_straight_loops() {
        let mut r = rng(0);
        let dims = ModelDims::standard(8);
        let p = random_params(dims, 0);
        for _ in 0..5 {
            let f = random_f(&mut r, 8, 64);
            let valid = random_valid(&mut r, 8);
            let mask = AttnMask::new(&valid);
            let mut u = vec![0.0; 8 * 64];
            forward_reference(&f, &mask, &p, &HeapScratch::new(), &mut u);
            let e = straight(&f, &mask, &p);
            let err = u.iter().zip(&e).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-5, "max abs err {err}");
        }
    }

    #[test]
    fn length_one_has_only_self_attention() {
        let dims = ModelDims { seq_len: 1, ..ModelDims::tiny() };
        let p = random_params(dims, 2);
        let f = random_f(&mut rng(1), 1, 8);
        let mut u = vec![0.0; 8];
        forward_reference(&f, &AttnMask::new(&[true]), &p, &HeapScratch::new(), &mut u);
        let e = straight(&f, &AttnMask::new(&[true]), &p);
        assert!(u.iter().zip(&e).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn causal_perturbation_is_exact() {
        let dims = ModelDims::standard(12);
        let p = random_params(dims, 3).cast::<f32>();
        let mut r = rng(2);
        let f: Vec<f32> = random_f(&mut r, 12, 64).iter().map(|x| *x as f32).collect();
        let valid = vec![true; 12];
        let mask = AttnMask::new(&valid);
        let mut u0 = vec![0.0f32; 12 * 64];
        forward_reference(&f, &mask, &p, &HeapScratch::new(), &mut u0);
        let mut g = f.clone();
        for x in &mut g[5 * 64..6 * 64] {
            *x += 1.0;
        }
        let mut u1 = vec![0.0f32; 12 * 64];
        forward_reference(&g, &mask, &p, &HeapScratch::new(), &mut u1);
        assert_eq!(&u0[..5 * 64], &u1[..5 * 64]);
        assert_ne!(&u0[5 * 64..6 * 64], &u1[5 * 64..6 * 64]);
    }
}
