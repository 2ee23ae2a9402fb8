//! Raw numeric kernels behind the tape operations.
//!
//! All kernels are deterministic regardless of the rayon thread count: row
//! partitions are fixed and cross-chunk reductions collect ordered partials
//! that are folded serially. Outputs come from the thread-local buffer pool;
//! serial paths fill append-style so fresh pages are touched exactly once.

use rayon::prelude::*;

use super::pool::PoolVec;

/// Minimum multiply-accumulate count before a matmul goes parallel.
const PAR_MIN_MACS: usize = 1 << 18;
/// Minimum element count before elementwise maps go parallel.
const PAR_MIN_ELEMS: usize = 1 << 20;

fn parallel(work: usize, threshold: usize) -> bool {
    work >= threshold && rayon::current_num_threads() > 1
}

/// C[m x n] = A[m x k] * B[k x n]
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> PoolVec {
    if m == 0 || n == 0 || k == 0 {
        return PoolVec::zeroed(m * n);
    }
    let row = |crow: &mut [f64], arow: &[f64]| {
        for (t, &av) in arow.iter().enumerate() {
            let brow = &b[t * n..t * n + n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    };
    let mut out = PoolVec::zeroed(m * n);
    if parallel(m * k * n, PAR_MIN_MACS) {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(crow, arow)| row(crow, arow));
    } else {
        for (crow, arow) in out.chunks_mut(n).zip(a.chunks(k)) {
            row(crow, arow);
        }
    }
    out
}

/// C[m x p] = A[m x n] * B^T where B is stored row-major [p x n]
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> PoolVec {
    if m == 0 || n == 0 || p == 0 {
        return PoolVec::zeroed(m * p);
    }
    if parallel(m * n * p, PAR_MIN_MACS) {
        let mut out = PoolVec::zeroed(m * p);
        out.par_chunks_mut(p)
            .zip(a.par_chunks(n))
            .for_each(|(crow, arow)| {
                for (q, c) in crow.iter_mut().enumerate() {
                    let brow = &b[q * n..q * n + n];
                    *c = dot(arow, brow);
                }
            });
        out
    } else {
        let mut out = PoolVec::with_capacity(m * p);
        for arow in a.chunks(n) {
            for q in 0..p {
                out.push(dot(arow, &b[q * n..q * n + n]));
            }
        }
        out
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in x.iter().zip(y) {
        acc += a * b;
    }
    acc
}

/// C[k x n] = A^T * B where A is [m x k] and B is [m x n]
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> PoolVec {
    if m == 0 || k == 0 || n == 0 {
        return PoolVec::zeroed(k * n);
    }
    let accumulate = |out: &mut [f64], rows: std::ops::Range<usize>| {
        for r in rows {
            let arow = &a[r * k..r * k + k];
            let brow = &b[r * n..r * n + n];
            for (t, &av) in arow.iter().enumerate() {
                let crow = &mut out[t * n..t * n + n];
                for (c, &bv) in crow.iter_mut().zip(brow) {
                    *c += av * bv;
                }
            }
        }
    };
    let mut out = PoolVec::zeroed(k * n);
    if parallel(m * k * n, PAR_MIN_MACS) {
        let threads = rayon::current_num_threads();
        let chunk = m.div_ceil(threads * 4).max(1);
        let ranges: Vec<_> = (0..m.div_ceil(chunk))
            .map(|i| i * chunk..((i + 1) * chunk).min(m))
            .collect();
        let partials: Vec<Vec<f64>> = ranges
            .into_par_iter()
            .map(|range| {
                let mut part = vec![0.0; k * n];
                accumulate(&mut part, range);
                part
            })
            .collect();
        for part in partials {
            for (o, p) in out.iter_mut().zip(&part) {
                *o += p;
            }
        }
    } else {
        accumulate(&mut out, 0..m);
    }
    out
}

pub fn map(x: &[f64], f: impl Fn(f64) -> f64 + Sync) -> PoolVec {
    if parallel(x.len(), PAR_MIN_ELEMS) {
        let mut out = PoolVec::zeroed(x.len());
        out.par_iter_mut().zip(x.par_iter()).for_each(|(o, &v)| *o = f(v));
        out
    } else {
        let mut out = PoolVec::with_capacity(x.len());
        out.extend(x.iter().map(|&v| f(v)));
        out
    }
}

pub fn zip2(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64 + Sync) -> PoolVec {
    debug_assert_eq!(a.len(), b.len());
    if parallel(a.len(), PAR_MIN_ELEMS) {
        let mut out = PoolVec::zeroed(a.len());
        out.par_iter_mut()
            .zip(a.par_iter().zip(b.par_iter()))
            .for_each(|(o, (&x, &y))| *o = f(x, y));
        out
    } else {
        let mut out = PoolVec::with_capacity(a.len());
        out.extend(a.iter().zip(b).map(|(&x, &y)| f(x, y)));
        out
    }
}

/// Deterministic chunked sum.
pub fn sum(x: &[f64]) -> f64 {
    if parallel(x.len(), PAR_MIN_ELEMS) {
        let partials: Vec<f64> = x
            .par_chunks(PAR_MIN_ELEMS)
            .map(|c| c.iter().sum::<f64>())
            .collect();
        partials.iter().sum()
    } else {
        x.iter().sum()
    }
}

/// One input block of a fused multi-part linear layer.
pub enum PartSrc<'a> {
    /// Row `r` contributes `x[r] * w`.
    Direct { x: &'a [f64], w: &'a [f64], in_w: usize },
    /// Row `r` contributes row `idx[r]` of a precomputed `table * w`
    /// product (node-level, cache-resident).
    GatheredProduct { product: &'a [f64], idx: &'a [usize] },
}

/// Z[r] = bias + sum_parts contribution_r, in one pass over the rows. The
/// weight blocks and gathered product tables stay cache-resident, so each
/// output row costs one streaming read of the direct inputs and one write.
pub fn linear_parts(parts: &[PartSrc], bias: &[f64], rows: usize, out_w: usize) -> PoolVec {
    let row_kernel = |r: usize, acc: &mut [f64]| {
        acc.copy_from_slice(bias);
        for part in parts {
            match part {
                PartSrc::Direct { x, w, in_w } => {
                    let row = &x[r * in_w..r * in_w + in_w];
                    debug_assert_eq!(w.len(), in_w * out_w);
                    for (t, &xv) in row.iter().enumerate() {
                        let wrow = &w[t * out_w..t * out_w + out_w];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += xv * wv;
                        }
                    }
                }
                PartSrc::GatheredProduct { product, idx } => {
                    let i = idx[r];
                    for (a, &pv) in acc.iter_mut().zip(&product[i * out_w..i * out_w + out_w]) {
                        *a += pv;
                    }
                }
            }
        }
    };
    let work: usize = rows * out_w * parts.iter().map(|p| match p {
        PartSrc::Direct { in_w, .. } => *in_w,
        PartSrc::GatheredProduct { .. } => 1,
    }).sum::<usize>().max(1);
    if parallel(work, PAR_MIN_MACS) {
        let mut out = PoolVec::zeroed(rows * out_w);
        out.par_chunks_mut(out_w)
            .enumerate()
            .for_each(|(r, acc)| row_kernel(r, acc));
        out
    } else {
        let mut out = PoolVec::with_capacity(rows * out_w);
        let mut acc = vec![0.0; out_w];
        for r in 0..rows {
            row_kernel(r, &mut acc);
            out.extend_from_slice(&acc);
        }
        out
    }
}

/// Column sums of a row-major matrix.
pub fn column_sums(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in x.chunks(cols.max(1)) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// out[j] = x[idx[j]] as rows of width `cols`.
pub fn gather_rows(x: &[f64], idx: &[usize], cols: usize) -> PoolVec {
    if cols == 0 {
        return PoolVec::zeroed(0);
    }
    if parallel(idx.len() * cols, PAR_MIN_ELEMS) {
        let mut out = PoolVec::zeroed(idx.len() * cols);
        out.par_chunks_mut(cols)
            .zip(idx.par_iter())
            .for_each(|(orow, &i)| orow.copy_from_slice(&x[i * cols..i * cols + cols]));
        out
    } else {
        let mut out = PoolVec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&x[i * cols..i * cols + cols]);
        }
        out
    }
}

/// Scatter-add rows of `values` into an accumulator with `n` rows; used by
/// the gather backward rule.
pub fn scatter_add_rows(values: &[f64], idx: &[usize], n: usize, cols: usize) -> PoolVec {
    let mut out = PoolVec::zeroed(n * cols);
    for (vrow, &i) in values.chunks(cols.max(1)).zip(idx) {
        let orow = &mut out[i * cols..i * cols + cols];
        for (o, v) in orow.iter_mut().zip(vrow) {
            *o += v;
        }
    }
    out
}

/// Per-target contribution counts as floats.
pub fn target_counts(targets: &[usize], n: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n];
    for &t in targets {
        counts[t] += 1.0;
    }
    counts
}

/// Mean over rows sharing a target; rows with zero contributors stay zero.
pub fn segment_mean(values: &[f64], targets: &[usize], counts: &[f64], n: usize, cols: usize) -> PoolVec {
    let mut out = PoolVec::zeroed(n * cols);
    for (vrow, &t) in values.chunks(cols.max(1)).zip(targets) {
        let orow = &mut out[t * cols..t * cols + cols];
        for (o, v) in orow.iter_mut().zip(vrow) {
            *o += v;
        }
    }
    for (t, &c) in counts.iter().enumerate() {
        if c > 0.0 {
            for o in &mut out[t * cols..t * cols + cols] {
                *o /= c;
            }
        }
    }
    out
}

/// Mean of edge rows over both endpoints: each value row `j` contributes to
/// rows `senders[j]` and `receivers[j]` of the output.
pub fn incident_mean(
    values: &[f64],
    senders: &[usize],
    receivers: &[usize],
    counts: &[f64],
    n: usize,
    cols: usize,
) -> PoolVec {
    let mut out = PoolVec::zeroed(n * cols);
    for ((vrow, &s), &r) in values.chunks(cols.max(1)).zip(senders).zip(receivers) {
        for (o, v) in out[s * cols..s * cols + cols].iter_mut().zip(vrow) {
            *o += v;
        }
        for (o, v) in out[r * cols..r * cols + cols].iter_mut().zip(vrow) {
            *o += v;
        }
    }
    for (t, &c) in counts.iter().enumerate() {
        if c > 0.0 {
            for o in &mut out[t * cols..t * cols + cols] {
                *o /= c;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += a[i * k + t] * b[t * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn matmul_variants_agree_with_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (m, k, n) = (8, 8, 8);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let want = naive_matmul(&a, &b, m, k, n);

        let got = matmul_nn(&a, &b, m, k, n);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }

        // A * B == A * (B^T)^T: feed matmul_nt the transposed B.
        let mut bt = vec![0.0; n * k];
        for t in 0..k {
            for j in 0..n {
                bt[j * k + t] = b[t * n + j];
            }
        }
        let got_nt = matmul_nt(&a, &bt, m, k, n);
        for (g, w) in got_nt.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }

        // (A^T)^T * B via matmul_tn on the transposed A.
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for t in 0..k {
                at[t * m + i] = a[i * k + t];
            }
        }
        let got_tn = matmul_tn(&at, &b, k, m, n);
        for (g, w) in got_tn.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_dims_are_fine() {
        assert!(matmul_nn(&[], &[], 0, 3, 2).is_empty());
        assert_eq!(matmul_nn(&[], &[], 2, 0, 2).len(), 4);
        assert!(segment_mean(&[], &[], &[0.0; 3], 3, 2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn segment_mean_matches_loop() {
        let values = [2.0, 4.0];
        let targets = [0usize, 0];
        let counts = target_counts(&targets, 1);
        assert_eq!(*segment_mean(&values, &targets, &counts, 1, 1), vec![3.0]);
    }
}
