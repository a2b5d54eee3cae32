//! Appearance suppression.
//!
//! Attention computed between the reference prompt's tokens and the
//! target's video tokens measures how much reference appearance the video
//! still carries. The loss pools the strongest subject/video couplings,
//! and one explicit gradient step on the video hidden states pushes them
//! down. Reference projections are held constant: the gradient flows only
//! through the video rows.

use crate::error::{Error, Result};
use crate::latent::PromptTokens;
use crate::math::Mat;
use crate::mmdit::{softmax_rows, AttentionMap, BlockWeights};

/// Frozen per-head reference projections plus the suppression knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct AsmContext {
    q_ref: Vec<Mat>,
    k_ref: Vec<Mat>,
    subject: Vec<usize>,
    beta: f64,
    fraction: f64,
}

impl AsmContext {
    pub fn new(
        q_ref: Vec<Mat>,
        k_ref: Vec<Mat>,
        subject: Vec<usize>,
        beta: f64,
        fraction: f64,
    ) -> Result<AsmContext> {
        if q_ref.is_empty() || q_ref.len() != k_ref.len() {
            return Err(Error::Shape(format!(
                "suppression needs matching per-head projections, got {} and {}",
                q_ref.len(),
                k_ref.len()
            )));
        }
        let m = q_ref[0].rows();
        let d_k = q_ref[0].cols();
        for (h, (q, k)) in q_ref.iter().zip(&k_ref).enumerate() {
            if q.rows() != m || k.rows() != m || q.cols() != d_k || k.cols() != d_k {
                return Err(Error::Shape(format!(
                    "suppression head {h} is {}x{} / {}x{}, expected {m}x{d_k}",
                    q.rows(),
                    q.cols(),
                    k.rows(),
                    k.cols()
                )));
            }
            if !q.is_finite() || !k.is_finite() {
                return Err(Error::NonFinite(format!("suppression head {h}")));
            }
        }
        if subject.is_empty() {
            return Err(Error::Config("subject token list is empty".into()));
        }
        let mut seen = vec![false; m];
        for &s in &subject {
            if s >= m {
                return Err(Error::Config(format!(
                    "subject token {s} out of range for {m} prompt tokens"
                )));
            }
            if seen[s] {
                return Err(Error::Config(format!("subject token {s} listed twice")));
            }
            seen[s] = true;
        }
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(Error::Config(format!(
                "step size must be finite and non-negative, got {beta}"
            )));
        }
        if !(fraction.is_finite() && 0.0 < fraction && fraction <= 1.0) {
            return Err(Error::Config(format!(
                "pooled fraction must lie in (0, 1], got {fraction}"
            )));
        }
        Ok(AsmContext {
            q_ref,
            k_ref,
            subject,
            beta,
            fraction,
        })
    }

    /// Project the reference prompt through the block's own heads.
    pub fn from_reference(
        prompt: &PromptTokens,
        w: &BlockWeights,
        beta: f64,
        fraction: f64,
    ) -> Result<AsmContext> {
        if prompt.dim() != w.d() {
            return Err(Error::Shape(format!(
                "prompt width {} does not match block width {}",
                prompt.dim(),
                w.d()
            )));
        }
        let mut q_ref = Vec::with_capacity(w.heads.len());
        let mut k_ref = Vec::with_capacity(w.heads.len());
        for head in &w.heads {
            q_ref.push(prompt.mat().matmul(&head.wq)?);
            k_ref.push(prompt.mat().matmul(&head.wk)?);
        }
        AsmContext::new(q_ref, k_ref, prompt.subject_indices().to_vec(), beta, fraction)
    }

    pub fn heads(&self) -> usize {
        self.q_ref.len()
    }

    pub fn prompt_len(&self) -> usize {
        self.q_ref[0].rows()
    }

    pub fn d_k(&self) -> usize {
        self.q_ref[0].cols()
    }

    pub fn subject(&self) -> &[usize] {
        &self.subject
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn q_ref(&self) -> &[Mat] {
        &self.q_ref
    }

    pub fn k_ref(&self) -> &[Mat] {
        &self.k_ref
    }
}

/// Mean of the largest `ceil(fraction * len)` values. Ties pick the
/// earlier index, and the picked values are summed largest first, so the
/// result is a fixed function of the input bytes.
pub fn top_fraction_mean(values: &[f64], fraction: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Shape("cannot pool an empty list".into()));
    }
    if !(fraction.is_finite() && 0.0 < fraction && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "pooled fraction must lie in (0, 1], got {fraction}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pooled values".into()));
    }
    let k = ((fraction * values.len() as f64).ceil() as usize).clamp(1, values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut sum = 0.0;
    for &i in &order[..k] {
        sum += values[i];
    }
    Ok(sum / k as f64)
}

struct HeadAttention {
    /// Softmax rows over `[reference prompt; video]` x the same.
    a: Mat,
    q: Mat,
    k: Mat,
}

fn head_attention(ctx: &AsmContext, video: &Mat, w: &BlockWeights, hi: usize) -> Result<HeadAttention> {
    let head = &w.heads[hi];
    let q = ctx.q_ref[hi].vcat(&video.matmul(&head.wq)?)?;
    let k = ctx.k_ref[hi].vcat(&video.matmul(&head.wk)?)?;
    let scale = 1.0 / (w.d_k() as f64).sqrt();
    let logits = q.matmul(&k.transpose())?.scaled(scale);
    if !logits.is_finite() {
        return Err(Error::NonFinite(format!(
            "suppression logits in block {} head {hi}",
            w.index
        )));
    }
    Ok(HeadAttention {
        a: softmax_rows(logits),
        q,
        k,
    })
}

fn check_shapes(ctx: &AsmContext, video: &Mat, w: &BlockWeights) -> Result<()> {
    if ctx.heads() != w.heads.len() || ctx.d_k() != w.d_k() {
        return Err(Error::Shape(format!(
            "suppression context with {} heads of width {} against block {} with {} heads of width {}",
            ctx.heads(),
            ctx.d_k(),
            w.index,
            w.heads.len(),
            w.d_k()
        )));
    }
    if video.cols() != w.d() {
        return Err(Error::Shape(format!(
            "video width {} does not match block width {}",
            video.cols(),
            w.d()
        )));
    }
    if video.rows() == 0 {
        return Err(Error::Shape("no video tokens to suppress".into()));
    }
    Ok(())
}

/// Pooled entries of one head's map, in the canonical order: for each
/// subject token, its row across the video columns, then the video rows
/// down its column.
fn pool(a: &Mat, m: usize, n: usize, subject: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(subject.len() * 2 * n);
    for &s in subject {
        for j in 0..n {
            out.push(a.get(s, m + j));
        }
        for j in 0..n {
            out.push(a.get(m + j, s));
        }
    }
    out
}

/// Head-averaged attention between reference prompt tokens and video
/// tokens, for inspection.
pub fn cross_prompt_attention(
    ctx: &AsmContext,
    video: &Mat,
    w: &BlockWeights,
) -> Result<AttentionMap> {
    check_shapes(ctx, video, w)?;
    let rows = ctx.prompt_len() + video.rows();
    let mut avg = Mat::zeros(rows, rows);
    for hi in 0..w.heads.len() {
        avg = avg.add(&head_attention(ctx, video, w, hi)?.a)?;
    }
    AttentionMap::new(
        ctx.prompt_len(),
        video.rows(),
        0,
        avg.scaled(1.0 / w.heads.len() as f64),
    )
}

/// Mean over heads of each head's pooled top-fraction coupling.
pub fn asm_loss(ctx: &AsmContext, video: &Mat, w: &BlockWeights) -> Result<f64> {
    check_shapes(ctx, video, w)?;
    let m = ctx.prompt_len();
    let n = video.rows();
    let mut total = 0.0;
    for hi in 0..w.heads.len() {
        let att = head_attention(ctx, video, w, hi)?;
        total += top_fraction_mean(&pool(&att.a, m, n, &ctx.subject), ctx.fraction)?;
    }
    Ok(total / w.heads.len() as f64)
}

/// Exact gradient of [`asm_loss`] in the video hidden states.
///
/// Per head: the pooled top-k entries of the map receive weight
/// `1 / (heads * k)`, the softmax is differentiated row by row as
/// `dS = A .* (dA - rowdot(dA, A))`, and the chain continues through the
/// scaled products into the video rows of Q and K only.
pub fn asm_grad(ctx: &AsmContext, video: &Mat, w: &BlockWeights) -> Result<Mat> {
    check_shapes(ctx, video, w)?;
    let m = ctx.prompt_len();
    let n = video.rows();
    let scale = 1.0 / (w.d_k() as f64).sqrt();
    let mut grad = Mat::zeros(n, video.cols());
    for (hi, head) in w.heads.iter().enumerate() {
        let att = head_attention(ctx, video, w, hi)?;
        let pooled = pool(&att.a, m, n, &ctx.subject);
        let k_sel = ((ctx.fraction * pooled.len() as f64).ceil() as usize).clamp(1, pooled.len());
        let mut order: Vec<usize> = (0..pooled.len()).collect();
        order.sort_by(|&a, &b| pooled[b].total_cmp(&pooled[a]).then(a.cmp(&b)));

        // Scatter the pooled selection back to map coordinates.
        let weight = 1.0 / (w.heads.len() * k_sel) as f64;
        let mut da = Mat::zeros(m + n, m + n);
        for &p in &order[..k_sel] {
            let (si, rest) = (p / (2 * n), p % (2 * n));
            let s = ctx.subject[si];
            let (row, col) = if rest < n {
                (s, m + rest)
            } else {
                (m + (rest - n), s)
            };
            da.set(row, col, da.get(row, col) + weight);
        }

        let mut ds = Mat::zeros(m + n, m + n);
        for i in 0..m + n {
            let a_row = att.a.row(i);
            let da_row = da.row(i);
            let mut dot = 0.0;
            for j in 0..m + n {
                dot += da_row[j] * a_row[j];
            }
            let ds_row = ds.row_mut(i);
            for j in 0..m + n {
                ds_row[j] = a_row[j] * (da_row[j] - dot);
            }
        }

        let dq = ds.matmul(&att.k)?.scaled(scale);
        let dk = ds.transpose().matmul(&att.q)?.scaled(scale);
        let video_rows: Vec<usize> = (m..m + n).collect();
        let dq_t = dq.take_rows(&video_rows)?;
        let dk_t = dk.take_rows(&video_rows)?;
        grad = grad
            .add(&dq_t.matmul(&head.wq.transpose())?)?
            .add(&dk_t.matmul(&head.wk.transpose())?)?;
    }
    Ok(grad)
}

/// One explicit descent step `video - beta * grad`. A zero step size
/// returns the input bytes untouched.
pub fn asm_step(ctx: &AsmContext, video: &Mat, w: &BlockWeights) -> Result<Mat> {
    if ctx.beta == 0.0 {
        return Ok(video.clone());
    }
    let grad = asm_grad(ctx, video, w)?;
    let out = video.sub(&grad.scaled(ctx.beta))?;
    if !out.is_finite() {
        return Err(Error::NonFinite(format!(
            "suppressed video states in block {}",
            w.index
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_mat, stream_rng};
    use proptest::prelude::*;

    fn seeded_setup(seed: u64, m: usize, n: usize, d: usize, d_k: usize, heads: usize) -> (AsmContext, Mat, BlockWeights) {
        let w = BlockWeights::seeded(d, d_k, heads, seed, 0);
        let mut rng = stream_rng(seed, 400);
        let prompt = PromptTokens::new(gaussian_mat(&mut rng, m, d, 1.0), vec![0]).unwrap();
        let video = gaussian_mat(&mut rng, n, d, 1.0);
        let ctx = AsmContext::from_reference(&prompt, &w, 0.05, 0.5).unwrap();
        (ctx, video, w)
    }

    #[test]
    fn top_fraction_mean_examples() {
        let v = [1.0, 5.0, 3.0, 2.0, 4.0];
        assert_eq!(top_fraction_mean(&v, 0.4).unwrap(), 4.5);
        assert_eq!(top_fraction_mean(&v, 1.0).unwrap(), 3.0);
        assert_eq!(top_fraction_mean(&v, 0.01).unwrap(), 5.0);
        assert_eq!(top_fraction_mean(&[2.0, 2.0, 2.0, 1.0], 0.5).unwrap(), 2.0);
        assert!(top_fraction_mean(&[], 0.5).is_err());
        assert!(top_fraction_mean(&v, 0.0).is_err());
        assert!(top_fraction_mean(&v, 1.5).is_err());
        assert!(top_fraction_mean(&[f64::NAN], 1.0).is_err());
    }

    #[test]
    fn context_validation() {
        let q = vec![Mat::zeros(3, 2)];
        let k = vec![Mat::zeros(3, 2)];
        assert!(AsmContext::new(q.clone(), k.clone(), vec![0, 2], 0.1, 0.5).is_ok());
        assert!(AsmContext::new(q.clone(), k.clone(), vec![], 0.1, 0.5).is_err());
        assert!(AsmContext::new(q.clone(), k.clone(), vec![3], 0.1, 0.5).is_err());
        assert!(AsmContext::new(q.clone(), k.clone(), vec![1, 1], 0.1, 0.5).is_err());
        assert!(AsmContext::new(q.clone(), k.clone(), vec![0], -0.1, 0.5).is_err());
        assert!(AsmContext::new(q.clone(), k.clone(), vec![0], 0.1, 0.0).is_err());
        assert!(AsmContext::new(q, vec![Mat::zeros(2, 2)], vec![0], 0.1, 0.5).is_err());
    }

    #[test]
    fn pool_order_is_row_then_column_per_subject() {
        let a = Mat::from_fn(4, 4, |i, j| (10 * i + j) as f64);
        // m = 2, n = 2, subject = [1]: row 1 over video cols, then video
        // rows down col 1.
        assert_eq!(pool(&a, 2, 2, &[1]), vec![12.0, 13.0, 21.0, 31.0]);
        assert_eq!(
            pool(&a, 2, 2, &[1, 0]),
            vec![12.0, 13.0, 21.0, 31.0, 2.0, 3.0, 20.0, 30.0]
        );
    }

    #[test]
    fn uniform_map_loss_is_inverse_row_length() {
        // All-zero states and projections give uniform rows, so any pooled
        // selection averages to 1 / (m + n).
        let q = vec![Mat::zeros(2, 3); 2];
        let k = vec![Mat::zeros(2, 3); 2];
        let ctx = AsmContext::new(q, k, vec![0], 0.1, 0.5).unwrap();
        let w = BlockWeights::new(
            0,
            vec![
                crate::mmdit::HeadWeights {
                    wq: Mat::zeros(4, 3),
                    wk: Mat::zeros(4, 3),
                    wv: Mat::zeros(4, 3),
                },
                crate::mmdit::HeadWeights {
                    wq: Mat::zeros(4, 3),
                    wk: Mat::zeros(4, 3),
                    wv: Mat::zeros(4, 3),
                },
            ],
            Mat::zeros(6, 4),
            Mat::zeros(4, 4),
        )
        .unwrap();
        let video = Mat::zeros(3, 4);
        let loss = asm_loss(&ctx, &video, &w).unwrap();
        assert!((loss - 1.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_scalar_loop_oracle() {
        // Recompute with plain index loops, no shared matrix helpers.
        let (ctx, video, w) = seeded_setup(31, 2, 3, 4, 2, 2);
        let m = 2;
        let n = 3;
        let d_k = 2;
        let scale = 1.0 / (d_k as f64).sqrt();
        let mut expect = 0.0;
        for hi in 0..2 {
            let mut q = vec![vec![0.0; d_k]; m + n];
            let mut k = vec![vec![0.0; d_k]; m + n];
            for i in 0..m {
                for c in 0..d_k {
                    q[i][c] = ctx.q_ref()[hi].get(i, c);
                    k[i][c] = ctx.k_ref()[hi].get(i, c);
                }
            }
            for i in 0..n {
                for c in 0..d_k {
                    let mut sq = 0.0;
                    let mut sk = 0.0;
                    for t in 0..4 {
                        sq += video.get(i, t) * w.heads[hi].wq.get(t, c);
                        sk += video.get(i, t) * w.heads[hi].wk.get(t, c);
                    }
                    q[m + i][c] = sq;
                    k[m + i][c] = sk;
                }
            }
            let mut a = vec![vec![0.0; m + n]; m + n];
            for i in 0..m + n {
                let mut max = f64::NEG_INFINITY;
                for j in 0..m + n {
                    let mut s = 0.0;
                    for c in 0..d_k {
                        s += q[i][c] * k[j][c];
                    }
                    a[i][j] = s * scale;
                    max = max.max(a[i][j]);
                }
                let mut sum = 0.0;
                for j in 0..m + n {
                    a[i][j] = (a[i][j] - max).exp();
                    sum += a[i][j];
                }
                for j in 0..m + n {
                    a[i][j] /= sum;
                }
            }
            let mut pooled = Vec::new();
            for &s in ctx.subject() {
                for j in 0..n {
                    pooled.push(a[s][m + j]);
                }
                for j in 0..n {
                    pooled.push(a[m + j][s]);
                }
            }
            let mut idx: Vec<usize> = (0..pooled.len()).collect();
            idx.sort_by(|&x, &y| pooled[y].total_cmp(&pooled[x]).then(x.cmp(&y)));
            let ksel = ((0.5 * pooled.len() as f64).ceil() as usize).min(pooled.len());
            let mut sum = 0.0;
            for &i in &idx[..ksel] {
                sum += pooled[i];
            }
            expect += sum / ksel as f64;
        }
        expect /= 2.0;
        let got = asm_loss(&ctx, &video, &w).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn zero_key_paths_leave_step_bitwise_identity() {
        // With wk = 0 and zero reference keys the map is uniform per row;
        // dQ picks up the zero key matrix and dK exits through the zero
        // wk, so the full gradient is exactly zero.
        let mut rng = stream_rng(32, 401);
        let d = 4;
        let d_k = 2;
        let q_ref = vec![gaussian_mat(&mut rng, 2, d_k, 1.0)];
        let k_ref = vec![Mat::zeros(2, d_k)];
        let ctx = AsmContext::new(q_ref, k_ref, vec![0], 0.1, 0.5).unwrap();
        let w = BlockWeights::new(
            0,
            vec![crate::mmdit::HeadWeights {
                wq: gaussian_mat(&mut rng, d, d_k, 1.0),
                wk: Mat::zeros(d, d_k),
                wv: gaussian_mat(&mut rng, d, d_k, 1.0),
            }],
            gaussian_mat(&mut rng, d_k, d, 1.0),
            gaussian_mat(&mut rng, d, d, 1.0),
        )
        .unwrap();
        let video = gaussian_mat(&mut rng, 3, d, 1.0);
        let grad = asm_grad(&ctx, &video, &w).unwrap();
        assert_eq!(grad, Mat::zeros(3, d));
        assert_eq!(asm_step(&ctx, &video, &w).unwrap(), video);
    }

    #[test]
    fn zero_beta_is_bitwise_identity() {
        let (mut_ctx, video, w) = seeded_setup(33, 2, 3, 4, 2, 2);
        let ctx = AsmContext::new(
            mut_ctx.q_ref().to_vec(),
            mut_ctx.k_ref().to_vec(),
            mut_ctx.subject().to_vec(),
            0.0,
            mut_ctx.fraction(),
        )
        .unwrap();
        assert_eq!(asm_step(&ctx, &video, &w).unwrap(), video);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in [41u64, 42, 43] {
            for fraction in [0.5, 1.0] {
                let (base, video, w) = seeded_setup(seed, 2, 3, 4, 2, 2);
                let ctx = AsmContext::new(
                    base.q_ref().to_vec(),
                    base.k_ref().to_vec(),
                    base.subject().to_vec(),
                    base.beta(),
                    fraction,
                )
                .unwrap();
                let grad = asm_grad(&ctx, &video, &w).unwrap();
                let scale = grad.max_abs().max(1e-3);
                let h = 1e-6;
                for i in 0..video.rows() {
                    for j in 0..video.cols() {
                        let mut plus = video.clone();
                        plus.set(i, j, video.get(i, j) + h);
                        let mut minus = video.clone();
                        minus.set(i, j, video.get(i, j) - h);
                        let fd = (asm_loss(&ctx, &plus, &w).unwrap()
                            - asm_loss(&ctx, &minus, &w).unwrap())
                            / (2.0 * h);
                        let an = grad.get(i, j);
                        assert!(
                            (fd - an).abs() <= 1e-4 * scale,
                            "seed {seed} fraction {fraction} entry ({i},{j}): fd {fd} vs analytic {an}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn single_step_descends_loss() {
        for seed in [51u64, 52, 53] {
            let (base, video, w) = seeded_setup(seed, 2, 3, 4, 2, 2);
            let ctx = AsmContext::new(
                base.q_ref().to_vec(),
                base.k_ref().to_vec(),
                base.subject().to_vec(),
                1e-2,
                base.fraction(),
            )
            .unwrap();
            let before = asm_loss(&ctx, &video, &w).unwrap();
            let after = asm_loss(&ctx, &asm_step(&ctx, &video, &w).unwrap(), &w).unwrap();
            assert!(after < before, "seed {seed}: {after} not below {before}");
        }
    }

    #[test]
    fn line_searched_steps_descend_monotonically() {
        let (base, mut video, w) = seeded_setup(54, 2, 4, 4, 2, 2);
        let mut last = asm_loss(&base, &video, &w).unwrap();
        for _ in 0..10 {
            let mut beta = 0.05;
            let next = loop {
                let ctx = AsmContext::new(
                    base.q_ref().to_vec(),
                    base.k_ref().to_vec(),
                    base.subject().to_vec(),
                    beta,
                    base.fraction(),
                )
                .unwrap();
                let stepped = asm_step(&ctx, &video, &w).unwrap();
                let loss = asm_loss(&base, &stepped, &w).unwrap();
                if loss < last || beta < 1e-12 {
                    break (stepped, loss);
                }
                beta /= 2.0;
            };
            assert!(next.1 < last, "stalled at {last}");
            video = next.0;
            last = next.1;
        }
    }

    #[test]
    fn gradient_is_deterministic() {
        let (ctx, video, w) = seeded_setup(55, 2, 3, 4, 2, 2);
        let a = asm_grad(&ctx, &video, &w).unwrap();
        let b = asm_grad(&ctx, &video, &w).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn from_reference_rejects_width_mismatch() {
        let w = BlockWeights::seeded(4, 2, 2, 56, 0);
        let prompt = PromptTokens::new(Mat::zeros(2, 5), vec![0]).unwrap();
        assert!(matches!(
            AsmContext::from_reference(&prompt, &w, 0.1, 0.5),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn cross_prompt_rows_are_distributions(seed in 0u64..300) {
            let (ctx, video, w) = seeded_setup(seed, 2, 3, 4, 2, 2);
            let map = cross_prompt_attention(&ctx, &video, &w).unwrap();
            for i in 0..map.mat().rows() {
                let sum: f64 = map.mat().row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() <= crate::mmdit::ROW_SUM_TOL);
            }
        }
    }
}
