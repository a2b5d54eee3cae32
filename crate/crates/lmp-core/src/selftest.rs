//! Built-in oracle battery for the `selftest` subcommand.
//!
//! Every numeric contract the pipeline leans on is re-checked here
//! against an independent computation: scalar-loop attention, full-sort
//! pooling, finite differences, and hand-counted selection. The battery
//! is deterministic and runs in seconds.

use crate::asm::{asm_grad, asm_loss, asm_step, top_fraction_mean, AsmContext};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fbdm::{select_foreground, ForegroundMask, SaliencyVolume, SelectionPolicy};
use crate::latent::{LatentVideo, TokenLayout};
use crate::lmpt;
use crate::math::Mat;
use crate::mmdit::{
    block_forward, joint_attention, AttentionMap, BlockHook, BlockTrace, BlockWeights,
    HiddenStates, KvCache,
};
use crate::pipeline::{
    asm_active, lmp_generate, rmtm_active, trajectory_similarity, DumpOptions, GateInterpretation,
};
use crate::rmtm::reference_mass;
use crate::rng::{gaussian_mat, gaussian_vec, stream_rng};
use crate::schedule::{
    make_blend_schedule, proportional_noise, BlendPolicy, NoiseSchedule, ScheduleConfig,
};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

pub fn run_all() -> Vec<CheckResult> {
    let checks: &[(&'static str, fn() -> Result<String>)] = &[
        ("joint attention vs scalar-loop oracle", check_attention_oracle),
        ("empty injection leaves attention bits unchanged", check_empty_injection_identity),
        ("extended attention rows stay distributions", check_extended_row_sums),
        ("injected mass grows with the reweighting factor", check_reference_mass_monotone),
        ("pooled top fraction vs full-sort oracle", check_top_fraction_oracle),
        ("foreground selection counts and thresholds", check_foreground_selection),
        ("suppression gradient vs finite differences", check_gradient_fd),
        ("one suppression step lowers the loss", check_suppression_descends),
        ("proportional noise endpoints", check_noise_endpoints),
        ("schedule survives tensor encoding", check_schedule_encoding),
        ("gate windows at the published thresholds", check_gate_windows),
        ("trajectory similarity vs direct correlation", check_trajectory_oracle),
        ("end-to-end run is seed-deterministic", check_pipeline_determinism),
    ];
    checks
        .iter()
        .map(|&(name, f)| match f() {
            Ok(detail) => CheckResult {
                name,
                passed: true,
                detail,
            },
            Err(e) => CheckResult {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}

fn fail(msg: String) -> Error {
    Error::Numeric(msg)
}

fn matmul_loops(a: &Mat, b: &Mat) -> Mat {
    Mat::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
    })
}

fn seeded_pair(seed: u64, m: usize, n: usize, d: usize, d_k: usize, heads: usize) -> (HiddenStates, BlockWeights) {
    let mut rng = stream_rng(seed, 200);
    let h = HiddenStates::new(
        gaussian_mat(&mut rng, m, d, 1.0),
        gaussian_mat(&mut rng, n, d, 1.0),
    )
    .expect("finite by construction");
    let w = BlockWeights::seeded(d, d_k, heads, seed, 0);
    (h, w)
}

fn check_attention_oracle() -> Result<String> {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let (m, n, d, d_k, heads) = (2, 4, 4, 2, 2);
        let (h, w) = seeded_pair(seed, m, n, d, d_k, heads);
        let (_, map) = joint_attention(&h, &w)?;

        let x = h.concat();
        let rows = m + n;
        let mut avg = Mat::zeros(rows, rows);
        for head in &w.heads {
            let q = matmul_loops(&x, &head.wq);
            let k = matmul_loops(&x, &head.wk);
            let scale = 1.0 / (d_k as f64).sqrt();
            for i in 0..rows {
                let logits: Vec<f64> = (0..rows)
                    .map(|j| {
                        (0..d_k).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() * scale
                    })
                    .collect();
                let mx = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..rows {
                    avg.set(i, j, avg.get(i, j) + exps[j] / z);
                }
            }
        }
        let avg = avg.scaled(1.0 / heads as f64);
        let diff = map.mat().max_abs_diff(&avg);
        worst = worst.max(diff);
        if diff > 1e-12 {
            return Err(fail(format!("seed {seed}: map deviates by {diff:e}")));
        }
    }
    Ok(format!("10 instances, worst deviation {worst:.2e}"))
}

fn check_empty_injection_identity() -> Result<String> {
    use crate::rmtm::{extended_attention, InjectionSpec};
    for seed in 20..25u64 {
        let (h, w) = seeded_pair(seed, 2, 4, 4, 2, 2);
        let heads = w.heads.len();
        let spec = InjectionSpec::new(
            vec![Mat::zeros(0, 2); heads],
            vec![Mat::zeros(0, 2); heads],
            0.7,
        )?;
        let (ext_h, ext_map) = extended_attention(&h, &w, &spec)?;
        let (plain_h, plain_map) = joint_attention(&h, &w)?;
        if ext_h != plain_h || ext_map.mat() != plain_map.mat() {
            return Err(fail(format!("seed {seed}: r=0 injection changed bits")));
        }
    }
    Ok("5 instances bit-identical".into())
}

fn check_extended_row_sums() -> Result<String> {
    use crate::rmtm::{extended_attention, InjectionSpec};
    let mut worst = 0.0f64;
    for seed in 30..35u64 {
        let (h, w) = seeded_pair(seed, 2, 4, 4, 2, 2);
        let mut rng = stream_rng(seed, 201);
        let r = 1 + (seed as usize) % 3;
        let heads = w.heads.len();
        let spec = InjectionSpec::new(
            (0..heads).map(|_| gaussian_mat(&mut rng, r, 2, 1.0)).collect(),
            (0..heads).map(|_| gaussian_mat(&mut rng, r, 2, 1.0)).collect(),
            0.9,
        )?;
        let (_, map) = extended_attention(&h, &w, &spec)?;
        for i in 0..map.mat().rows() {
            let sum: f64 = map.mat().row(i).iter().sum();
            worst = worst.max((sum - 1.0).abs());
            if (sum - 1.0).abs() > 1e-9 {
                return Err(fail(format!("seed {seed}: row {i} sums to {sum}")));
            }
        }
    }
    Ok(format!("5 instances, worst row-sum error {worst:.2e}"))
}

fn check_reference_mass_monotone() -> Result<String> {
    let d = 2;
    let n = 4;
    let h = HiddenStates::new(
        Mat::from_fn(1, d, |_, _| 0.4),
        Mat::from_fn(n, d, |i, j| 0.3 + 0.05 * ((i + j) % 4) as f64),
    )?;
    let head = crate::mmdit::HeadWeights {
        wq: Mat::from_fn(d, d, |i, j| 0.4 + 0.2 * ((i + j) % 2) as f64),
        wk: Mat::from_fn(d, d, |i, j| 0.3 + 0.1 * ((i * 2 + j) % 3) as f64),
        wv: Mat::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.0 }),
    };
    let w = BlockWeights::new(
        0,
        vec![head],
        Mat::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.0 }),
        Mat::zeros(d, d),
    )?;
    let layout = TokenLayout::new(1, 2, 2);
    let trace = BlockTrace {
        attn: AttentionMap::new(1, n, 0, Mat::from_fn(n + 1, n + 1, |_, _| 1.0 / (n + 1) as f64))?,
        kv: KvCache {
            keys: vec![Mat::from_fn(n, d, |i, j| 0.8 + 0.1 * ((i + j) % 3) as f64)],
            values: vec![Mat::from_fn(n, d, |i, j| (i + j) as f64 * 0.1)],
        },
    };
    let mask = ForegroundMask::new(layout, vec![true, false, true, false])?;
    let mut last = -1.0;
    for lambda in [0.5, 0.75, 0.98] {
        let inj = crate::fbdm::gather_reference_kv(&trace, &mask, lambda)?;
        let (_, t) = block_forward(&h, &w, &[BlockHook::Rmtm(&inj)])?;
        let mass = reference_mass(&t.attn, 2)?;
        if mass <= last {
            return Err(fail(format!("mass {mass} did not grow past {last}")));
        }
        last = mass;
    }
    Ok(format!("mass reaches {last:.4} at lambda 0.98"))
}

fn check_top_fraction_oracle() -> Result<String> {
    let mut rng = stream_rng(7, 202);
    let mut cases = 0;
    for i in 0..200 {
        let n = 1 + (i % 40);
        let values = gaussian_vec(&mut rng, n, 1.0);
        for fraction in [0.2, 0.5, 1.0] {
            let got = top_fraction_mean(&values, fraction)?;
            let k = ((fraction * n as f64).ceil() as usize).clamp(1, n);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
            let want = order[..k].iter().map(|&j| values[j]).sum::<f64>() / k as f64;
            if got.to_bits() != want.to_bits() {
                return Err(fail(format!("n={n} fraction={fraction}: {got} vs {want}")));
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} pooled lists match the sort oracle exactly"))
}

fn check_foreground_selection() -> Result<String> {
    let layout = TokenLayout::new(3, 4, 4);
    let mut rng = stream_rng(11, 203);
    let values: Vec<f64> = gaussian_vec(&mut rng, layout.token_count(), 1.0)
        .into_iter()
        .map(f64::abs)
        .collect();
    let vol = SaliencyVolume::new(layout, values.clone())?;
    for q in [0.25, 0.5, 1.0] {
        let mask = select_foreground(&vol, &SelectionPolicy::TopFraction { q })?;
        let per_frame = (q * layout.tokens_per_frame() as f64).ceil() as usize;
        if mask.count() != per_frame * layout.frames() {
            return Err(fail(format!(
                "q={q}: selected {} tokens, expected {}",
                mask.count(),
                per_frame * layout.frames()
            )));
        }
    }
    for tau in [0.3, 0.8] {
        let mask = select_foreground(&vol, &SelectionPolicy::Threshold { tau })?;
        for f in 0..layout.frames() {
            let peak = vol
                .frame(f)
                .iter()
                .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            for token in layout.frame_range(f) {
                let want = values[token] >= tau * peak;
                if mask.contains(token) != want {
                    return Err(fail(format!("tau={tau}: token {token} misclassified")));
                }
            }
        }
    }
    Ok("counts exact for 3 fractions, membership exact for 2 thresholds".into())
}

fn fd_context(seed: u64) -> Result<(AsmContext, Mat, BlockWeights)> {
    let (m, n, d, d_k, heads) = (2, 3, 4, 2, 2);
    let mut rng = stream_rng(seed, 204);
    let w = BlockWeights::seeded(d, d_k, heads, seed, 0);
    let q_ref = (0..heads).map(|_| gaussian_mat(&mut rng, m, d_k, 1.0)).collect();
    let k_ref = (0..heads).map(|_| gaussian_mat(&mut rng, m, d_k, 1.0)).collect();
    let ctx = AsmContext::new(q_ref, k_ref, vec![0], 0.01, 0.5)?;
    let video = gaussian_mat(&mut rng, n, d, 1.0);
    Ok((ctx, video, w))
}

fn check_gradient_fd() -> Result<String> {
    let (ctx, video, w) = fd_context(13)?;
    let grad = asm_grad(&ctx, &video, &w)?;
    let h = 1e-6;
    let tol = 1e-4 * grad.max_abs().max(1e-3);
    let mut worst = 0.0f64;
    for i in 0..video.rows() {
        for j in 0..video.cols() {
            let mut plus = video.clone();
            plus.set(i, j, video.get(i, j) + h);
            let mut minus = video.clone();
            minus.set(i, j, video.get(i, j) - h);
            let fd = (asm_loss(&ctx, &plus, &w)? - asm_loss(&ctx, &minus, &w)?) / (2.0 * h);
            let diff = (grad.get(i, j) - fd).abs();
            worst = worst.max(diff);
            if diff > tol {
                return Err(fail(format!(
                    "entry ({i}, {j}): analytic {} vs fd {fd}",
                    grad.get(i, j)
                )));
            }
        }
    }
    Ok(format!("{} entries, worst gap {worst:.2e}", video.rows() * video.cols()))
}

fn check_suppression_descends() -> Result<String> {
    let (ctx, video, w) = fd_context(19)?;
    let before = asm_loss(&ctx, &video, &w)?;
    let after = asm_loss(&ctx, &asm_step(&ctx, &video, &w)?, &w)?;
    if after >= before {
        return Err(fail(format!("loss went {before} -> {after}")));
    }
    Ok(format!("loss {before:.6} -> {after:.6}"))
}

fn check_noise_endpoints() -> Result<String> {
    let t_total = 6;
    let blend = make_blend_schedule(t_total, BlendPolicy::Linear, None)?;
    let mut rng = stream_rng(23, 205);
    let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
        LatentVideo::new(2, 2, 2, 1, gaussian_vec(rng, 8, 1.0)).expect("finite")
    };
    let a = mk(&mut rng);
    let b = mk(&mut rng);
    let eps = mk(&mut rng);
    let at0 = proportional_noise(&a, 0, &eps, &blend)?;
    if at0 != a {
        return Err(fail("t=0 did not return the input bits".into()));
    }
    let a_at_t = proportional_noise(&a, t_total, &eps, &blend)?;
    let b_at_t = proportional_noise(&b, t_total, &eps, &blend)?;
    if a_at_t != b_at_t {
        return Err(fail("t=T still depends on the input".into()));
    }
    Ok("t=0 is the identity, t=T is input-independent".into())
}

fn check_schedule_encoding() -> Result<String> {
    let sched = NoiseSchedule::linear(10, 1e-4, 0.05)?;
    let bytes = lmpt::encode_tensor(&[sched.alphas().len() as u64], sched.alphas())?;
    let (dims, data) = lmpt::decode_tensor(&bytes)?;
    if dims != vec![10] {
        return Err(fail(format!("round trip changed dims to {dims:?}")));
    }
    for (i, (&got, &want)) in data.iter().zip(sched.alphas()).enumerate() {
        if got.to_bits() != (want as f32 as f64).to_bits() {
            return Err(fail(format!("alpha {i} not f32-faithful: {got} vs {want}")));
        }
    }
    Ok("10 retention factors f32-faithful".into())
}

fn check_gate_windows() -> Result<String> {
    let cfg = ScheduleConfig {
        t_total: 50,
        t1: 40,
        t2: 45,
        t3: 35,
        lambda: 0.98,
        beta: 100.0,
        seed: 0,
    };
    let rmtm: Vec<usize> = (0..=50)
        .filter(|&t| rmtm_active(t, &cfg, GateInterpretation::Literal))
        .collect();
    let asm: Vec<usize> = (0..=50).filter(|&t| asm_active(t, &cfg)).collect();
    let first_k: Vec<usize> = (0..=50)
        .filter(|&t| rmtm_active(t, &cfg, GateInterpretation::FirstK))
        .collect();
    if rmtm != (41..=50).collect::<Vec<_>>() {
        return Err(fail(format!("literal injection window {rmtm:?}")));
    }
    if asm != (36..=44).collect::<Vec<_>>() {
        return Err(fail(format!("suppression window {asm:?}")));
    }
    if first_k != (11..=50).collect::<Vec<_>>() {
        return Err(fail(format!("first_k injection window {first_k:?}")));
    }
    Ok("10 literal injection steps, 9 suppression steps, 40 first_k steps".into())
}

fn check_trajectory_oracle() -> Result<String> {
    let a = vec![(0.0, 0.0), (1.0, 2.0), (2.0, 1.0), (3.0, 3.0)];
    if (trajectory_similarity(&a, &a)? - 1.0).abs() > 1e-12 {
        return Err(fail("self-similarity is not 1".into()));
    }
    let b: Vec<(f64, f64)> = a.iter().map(|&(h, w)| (-h, -w)).collect();
    if (trajectory_similarity(&a, &b)? + 1.0).abs() > 1e-12 {
        return Err(fail("reflection similarity is not -1".into()));
    }
    let mut rng = stream_rng(29, 206);
    for _ in 0..20 {
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<(f64, f64)> {
            let hs = gaussian_vec(rng, 5, 1.0);
            let ws = gaussian_vec(rng, 5, 1.0);
            hs.into_iter().zip(ws).collect()
        };
        let x = mk(&mut rng);
        let y = mk(&mut rng);
        let got = trajectory_similarity(&x, &y)?;
        let corr = |sel: fn(&(f64, f64)) -> f64| -> f64 {
            let xs: Vec<f64> = x.iter().map(sel).collect();
            let ys: Vec<f64> = y.iter().map(sel).collect();
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let num: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum();
            let dx: f64 = xs.iter().map(|a| (a - mx) * (a - mx)).sum();
            let dy: f64 = ys.iter().map(|b| (b - my) * (b - my)).sum();
            num / (dx * dy).sqrt()
        };
        let want = (corr(|p| p.0) + corr(|p| p.1)) / 2.0;
        if (got - want).abs() > 1e-12 {
            return Err(fail(format!("similarity {got} vs direct {want}")));
        }
    }
    Ok("fixtures and 20 random pairs agree with direct correlation".into())
}

fn check_pipeline_determinism() -> Result<String> {
    let text = r#"{
      "schedule": { "t_total": 6, "t1": 4, "t2": 5, "t3": 2,
                    "lambda": 0.9, "beta": 0.01, "seed": 3 },
      "model": { "blocks": 2, "heads": 2, "embed_dim": 4, "head_dim": 2 },
      "target_prompt": { "len": 2, "subject": [0] },
      "reference_prompt": { "len": 2, "subject": [1] },
      "reference_latent": { "dims": [2, 2, 2, 2] },
      "output": "z0.lmpt"
    }"#;
    let a = lmp_generate(&RunConfig::from_json(text)?.build()?, &DumpOptions::default())?;
    let b = lmp_generate(&RunConfig::from_json(text)?.build()?, &DumpOptions::default())?;
    let bits = |v: &LatentVideo| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    if bits(&a.z0) != bits(&b.z0) || a.gates != b.gates {
        return Err(fail("two identical runs diverged".into()));
    }
    Ok(format!("two runs, {} latent values bit-identical", a.z0.data().len()))
}
