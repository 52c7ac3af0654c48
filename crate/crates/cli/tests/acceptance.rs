//! Acceptance suite. Each test prints one `criterion N [PASS|FAIL]` line
//! straight to stdout and then asserts. Tests hold a shared lock so the
//! runtime limits are measured without contention.

use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use emovc::autodiff::{Graph, Var};
use emovc::checkpoint;
use emovc::flowalign::{
    durations_from_alignment, kl_diag_gaussian, mas_from_likelihood, FlowStack,
};
use emovc::model::{AblationFlags, Model, ModelConfig};
use emovc::nn::{Binding, Init, ParamStore};
use emovc::runtime::{
    convert_fl, convert_vl, generate_synthetic_corpus, load_corpus, Manifest, SynthCorpusSpec,
};
use emovc::signal::{
    dtw, extract_f0, log_mel, mcd, mcd_from_cepstra, CepstraSequence, FrameConfig, Waveform,
};
use emovc::synth::generator_adversarial_loss;
use emovc::tensor::Tensor;
use emovc::tpp::{
    expand_prior, DurationVector, EmotionLabel, GaussianSequence, GaussianVars, Level,
    PhonemeSequence,
};
use emovc::train::{
    build_examples, train, CorpusItem, LossBundle, LossLog, TrainConfig, TrainState,
};
use emovc::Error;

// pinned tolerances and limits
const FLOW_ROUND_TRIP_TOL: f64 = 1e-5;
const FLOW_LOGDET_REL_TOL: f64 = 1e-4;
const FLOW_LIMIT: Duration = Duration::from_secs(30);
const MAS_LIMIT: Duration = Duration::from_secs(60);
const KL_MC_REL_TOL: f64 = 0.02;
const KL_MC_SAMPLES: usize = 10_000;
const KL_LIMIT: Duration = Duration::from_secs(60);
const MCD_UNIT_DB: f64 = 6.1418;
const MCD_UNIT_TOL: f64 = 1e-3;
const GRAD_STEP: f64 = 1e-4;
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_LIMIT: Duration = Duration::from_secs(120);
const OVERFIT_STEPS: usize = 2000;
const OVERFIT_MIN_DROP: f64 = 0.80;
const OVERFIT_MEL_L1: f64 = 0.5;
const OVERFIT_LIMIT: Duration = Duration::from_secs(20 * 60);
const DIRECTION_SEEDS: u64 = 10;
const DIRECTION_MIN_PASS: usize = 8;
const SMOKE_STEPS: usize = 50;
const CLI_LIMIT: Duration = Duration::from_secs(5 * 60);

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: usize, name: &str, ok: bool, detail: &str, elapsed: Duration) {
    let line = format!(
        "criterion {n:>2} [{}] {name}: {detail} ({:.1}s)\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let mut out = std::io::stdout();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(ok, "criterion {n} failed: {detail}");
}

fn flow_with_random_couplings(d: usize, seed: u64) -> (ParamStore, FlowStack) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let flow = FlowStack::new(&mut Init::new(&mut store, &mut rng), d, 8, 4);
    for e in store.entries_mut() {
        e.value = Tensor::randn(e.value.shape(), 0.15, &mut rng);
    }
    (store, flow)
}

fn gaussian(mu: Tensor, log_sigma: Tensor) -> GaussianSequence {
    GaussianSequence {
        mu,
        log_sigma,
        level: Level::Frame,
    }
}

/// `ln|det A|` by partial-pivot Gaussian elimination.
fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for c in 0..n {
        let piv = (c..n)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap();
        a.swap(c, piv);
        acc += a[c][c].abs().ln();
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    acc
}

#[test]
fn criterion_01_flow_correctness() {
    let _g = serial();
    let t0 = Instant::now();
    let mut worst_rt = 0.0f64;
    for d in [4, 8, 16] {
        for t in [1, 8, 32] {
            for seed in 0..20u64 {
                let (store, flow) = flow_with_random_couplings(d, seed);
                let g = Graph::new();
                let p = Binding::new(&g, &store, false);
                let z = Tensor::randn(&[d, t], 1.0, &mut ChaCha8Rng::seed_from_u64(1000 + seed));
                let (u, _) = flow.forward(&p, g.constant(z.clone())).unwrap();
                let back = flow.inverse(&p, u).unwrap();
                worst_rt = worst_rt.max(back.value().max_abs_diff(&z));
            }
        }
    }

    let (store, flow) = flow_with_random_couplings(4, 77);
    let z = Tensor::randn(&[4, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    let forward = |z: &Tensor| {
        let g = Graph::new();
        let p = Binding::new(&g, &store, false);
        let (u, ld) = flow.forward(&p, g.constant(z.clone())).unwrap();
        let u = (*u.value()).clone();
        (u, ld.item())
    };
    let logdet = forward(&z).1;
    let n = z.len();
    let h = 1e-5;
    let mut jac = vec![vec![0.0; n]; n];
    for k in 0..n {
        let mut zp = z.clone();
        zp.data_mut()[k] += h;
        let mut zm = z.clone();
        zm.data_mut()[k] -= h;
        let (up, um) = (forward(&zp).0, forward(&zm).0);
        for (r, row) in jac.iter_mut().enumerate() {
            row[k] = (up.data()[r] - um.data()[r]) / (2.0 * h);
        }
    }
    let numeric = log_abs_det(jac);
    let rel = (numeric - logdet).abs() / logdet.abs().max(numeric.abs());
    let elapsed = t0.elapsed();
    let ok = worst_rt <= FLOW_ROUND_TRIP_TOL && rel <= FLOW_LOGDET_REL_TOL && elapsed <= FLOW_LIMIT;
    report(
        1,
        "flow correctness",
        ok,
        &format!("round-trip max err {worst_rt:.2e}, logdet rel err {rel:.2e} (analytic {logdet:.6}, numeric {numeric:.6})"),
        elapsed,
    );
}

/// All compositions of `t` into `n` positive parts; the winner maximizes
/// the score, and among equal scores keeps later phonemes longest.
fn brute_force_mas(l: &Tensor) -> Vec<usize> {
    fn rec(left: usize, parts: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for first in 1..=left - (parts - 1) {
            cur.push(first);
            rec(left - first, parts - 1, cur, out);
            cur.pop();
        }
    }
    let (n, t) = (l.rows(), l.cols());
    let mut all = Vec::new();
    rec(t, n, &mut Vec::new(), &mut all);
    let score = |d: &[usize]| {
        let mut s = 0.0;
        let mut col = 0;
        for (i, &len) in d.iter().enumerate() {
            for _ in 0..len {
                s += l.at(i, col);
                col += 1;
            }
        }
        s
    };
    let mut best = all[0].clone();
    let mut best_score = score(&best);
    for d in all.into_iter().skip(1) {
        let s = score(&d);
        let later_longer = d.iter().rev().cmp(best.iter().rev()).is_gt();
        if s > best_score || (s == best_score && later_longer) {
            best_score = s;
            best = d;
        }
    }
    best
}

#[test]
fn criterion_02_mas_oracle() {
    let _g = serial();
    let t0 = Instant::now();
    let mut cases = 0;
    let mut mismatches = 0;
    let mut invariant_failures = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for n in 1..=4usize {
            for t in n..=6usize {
                // coarse values so ties occur
                let data = (0..n * t).map(|_| rng.gen_range(-3..=0) as f64).collect();
                let l = Tensor::new(&[n, t], data);
                let a = mas_from_likelihood(&l).unwrap();
                let d = durations_from_alignment(&a);
                cases += 1;
                if d.0 != brute_force_mas(&l) {
                    mismatches += 1;
                }
                let dense = a.to_dense();
                let columns_one_hot = (0..t).all(|c| dense.column(c).iter().sum::<f64>() == 1.0);
                let monotone = a
                    .assignment()
                    .windows(2)
                    .all(|w| w[1] == w[0] || w[1] == w[0] + 1);
                let ends = a.assignment()[0] == 0 && a.assignment()[t - 1] == n - 1;
                if !(columns_one_hot
                    && monotone
                    && ends
                    && d.total() == t
                    && d.0.iter().all(|&x| x >= 1))
                {
                    invariant_failures += 1;
                }
            }
        }
    }
    let impossible = matches!(
        mas_from_likelihood(&Tensor::zeros(&[3, 2])),
        Err(Error::Alignment { .. })
    );
    let elapsed = t0.elapsed();
    let ok = mismatches == 0 && invariant_failures == 0 && impossible && elapsed <= MAS_LIMIT;
    report(
        2,
        "MAS oracle equivalence",
        ok,
        &format!("{cases} cases, {mismatches} mismatches, {invariant_failures} invariant failures, N>T rejected: {impossible}"),
        elapsed,
    );
}

#[test]
fn criterion_03_kl_correctness() {
    let _g = serial();
    let t0 = Instant::now();
    let std_normal = gaussian(Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1]));
    let shifted = gaussian(Tensor::full(&[1, 1], 1.0), Tensor::zeros(&[1, 1]));
    let kl_same = kl_diag_gaussian(&std_normal, &std_normal).unwrap();
    let kl_shift = kl_diag_gaussian(&std_normal, &shifted).unwrap();

    // identity flow: zero-initialized couplings with an even number of reversals
    let d = 4;
    let mut store = ParamStore::new();
    let flow = FlowStack::new(
        &mut Init::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0)),
        d,
        8,
        4,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let q = gaussian(
        Tensor::randn(&[d, 1], 1.0, &mut rng),
        Tensor::randn(&[d, 1], 0.3, &mut rng),
    );
    let p = gaussian(
        Tensor::randn(&[d, 1], 1.0, &mut rng),
        Tensor::randn(&[d, 1], 0.3, &mut rng),
    );
    let closed = kl_diag_gaussian(&q, &p).unwrap();
    let mut acc = 0.0;
    for _ in 0..KL_MC_SAMPLES {
        let g = Graph::new();
        let b = Binding::new(&g, &store, false);
        let eps = Tensor::randn(&[d, 1], 1.0, &mut rng);
        let z =
            q.mu.zip_map(&q.sigma().zip_map(&eps, |s, e| s * e), |m, se| m + se);
        let post = GaussianVars::constant(&g, &q);
        let prior = GaussianVars::constant(&g, &p);
        acc += flow
            .prosody_alignment_loss(&b, g.constant(z), post, prior)
            .unwrap()
            .item();
    }
    let mc = acc / KL_MC_SAMPLES as f64;
    let rel = (mc - closed).abs() / closed.abs();
    let elapsed = t0.elapsed();
    let ok = kl_same.abs() < 1e-12
        && (kl_shift - 0.5).abs() < 1e-12
        && rel <= KL_MC_REL_TOL
        && elapsed <= KL_LIMIT;
    report(
        3,
        "KL correctness",
        ok,
        &format!("KL(N,N)={kl_same:.1e}, KL(N(0,1)||N(1,1))={kl_shift:.6}, MC {mc:.5} vs closed {closed:.5} (rel {rel:.4})"),
        elapsed,
    );
}

fn brute_force_dtw(a: &CepstraSequence, b: &CepstraSequence) -> f64 {
    fn dist(a: &CepstraSequence, i: usize, b: &CepstraSequence, j: usize) -> f64 {
        (0..a.coeffs.rows())
            .map(|r| (a.coeffs.at(r, i) - b.coeffs.at(r, j)).powi(2))
            .sum::<f64>()
            .sqrt()
    }
    fn walk(
        a: &CepstraSequence,
        b: &CepstraSequence,
        i: usize,
        j: usize,
        acc: f64,
        best: &mut f64,
    ) {
        let acc = acc + dist(a, i, b, j);
        let (ta, tb) = (a.n_frames(), b.n_frames());
        if i + 1 == ta && j + 1 == tb {
            *best = best.min(acc);
            return;
        }
        if i + 1 < ta {
            walk(a, b, i + 1, j, acc, best);
        }
        if j + 1 < tb {
            walk(a, b, i, j + 1, acc, best);
        }
        if i + 1 < ta && j + 1 < tb {
            walk(a, b, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    best
}

fn random_cepstra(frames: usize, rng: &mut ChaCha8Rng) -> CepstraSequence {
    CepstraSequence {
        coeffs: Tensor::randn(&[13, frames], 1.0, rng),
    }
}

#[test]
fn criterion_04_mcd_dtw() {
    let _g = serial();
    let t0 = Instant::now();
    let cfg = FrameConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sr = 22050;
    let tone = |f: f64, n: usize| {
        Waveform::new(
            (0..n)
                .map(|i| 0.3 * (2.0 * PI * f * i as f64 / sr as f64).sin())
                .collect(),
            sr,
        )
        .unwrap()
    };
    let x = tone(220.0, 6000);
    let y = tone(330.0, 5000);
    let self_mcd = mcd(&x, &x, cfg).unwrap();
    let (xy, yx) = (mcd(&x, &y, cfg).unwrap(), mcd(&y, &x, cfg).unwrap());
    let symmetric = (xy - yx).abs() <= 1e-9 * xy.max(1.0) && xy > 0.0;

    let mut dtw_mismatch = 0;
    let mut dtw_cases = 0;
    for la in 1..=5 {
        for lb in 1..=6 {
            for _ in 0..5 {
                let a = random_cepstra(la, &mut rng);
                let b = random_cepstra(lb, &mut rng);
                let got = dtw(&a, &b).unwrap().cost;
                dtw_cases += 1;
                if (got - brute_force_dtw(&a, &b)).abs() > 1e-9 {
                    dtw_mismatch += 1;
                }
            }
        }
    }
    let zero = CepstraSequence {
        coeffs: Tensor::zeros(&[13, 1]),
    };
    let mut unit = Tensor::zeros(&[13, 1]);
    unit.data_mut()[0] = 1.0;
    let unit_mcd = mcd_from_cepstra(&zero, &CepstraSequence { coeffs: unit }).unwrap();
    let elapsed = t0.elapsed();
    let ok = self_mcd == 0.0
        && symmetric
        && dtw_mismatch == 0
        && (unit_mcd - MCD_UNIT_DB).abs() <= MCD_UNIT_TOL;
    report(
        4,
        "MCD/DTW",
        ok,
        &format!("mcd(x,x)={self_mcd}, mcd(x,y)={xy:.4} mcd(y,x)={yx:.4}, DTW brute force {dtw_mismatch}/{dtw_cases} mismatches, unit case {unit_mcd:.5} dB"),
        elapsed,
    );
}

/// Worst relative error between analytic and central-difference
/// gradients over `coords` of the named entries of `store`.
fn graph_fn<F>(f: F) -> F
where
    F: for<'g, 's, 'b> Fn(&'b Binding<'g, 's>) -> Var<'g>,
{
    f
}

fn store_grad_error(
    store: &mut ParamStore,
    coords: &[(String, usize)],
    loss: &dyn Fn(&Binding<'_, '_>) -> f64,
    grad: &dyn Fn(&ParamStore) -> Vec<Option<Tensor>>,
) -> f64 {
    let analytic = grad(store);
    let mut worst = 0.0f64;
    for (name, k) in coords {
        let id = store.id_of(name).unwrap();
        let orig = store.get(id).data()[*k];
        let mut eval = |v: f64| {
            store.get_mut(id).data_mut()[*k] = v;
            let g = Graph::new();
            let p = Binding::new(&g, store, false);
            loss(&p)
        };
        let numeric = (eval(orig + GRAD_STEP) - eval(orig - GRAD_STEP)) / (2.0 * GRAD_STEP);
        let a = analytic[id.index()].as_ref().map_or(0.0, |t| t.data()[*k]);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        eval(orig);
        worst = worst.max(rel);
    }
    worst
}

fn toy_model_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_latent: 4,
        ffn_dim: 8,
        flow_hidden: 8,
        flow_layers: 2,
        wn_hidden: 8,
        wn_blocks: 1,
        dec_channels: 8,
        upsample_rates: vec![4, 4, 4, 4],
        disc_channels: 4,
        cls_channels: 4,
        ..ModelConfig::new(vocab)
    }
}

fn pick(
    store: &ParamStore,
    prefix: &str,
    per_entry: usize,
    max_entries: usize,
) -> Vec<(String, usize)> {
    store
        .entries()
        .iter()
        .filter(|e| e.name.starts_with(prefix))
        .take(max_entries)
        .flat_map(|e| {
            let n = e.value.len();
            (0..per_entry.min(n)).map(move |i| (e.name.clone(), (i * 7919) % n))
        })
        .collect()
}

#[test]
fn criterion_05_gradient_checks() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(55);

    // (a) L_psd with respect to the posterior mean
    let (d, t) = (4, 5);
    let (flow_store, flow) = flow_with_random_couplings(d, 3);
    let mu_q = Tensor::randn(&[d, t], 1.0, &mut rng);
    let ls_q = Tensor::randn(&[d, t], 0.2, &mut rng);
    let eps = Tensor::randn(&[d, t], 1.0, &mut rng);
    let prior = gaussian(
        Tensor::randn(&[d, t], 1.0, &mut rng),
        Tensor::randn(&[d, t], 0.2, &mut rng),
    );
    let psd_at = |mu: &Tensor| -> (f64, Option<Tensor>) {
        let g = Graph::new();
        let p = Binding::new(&g, &flow_store, false);
        let mu_v = g.param(mu.clone());
        let ls_v = g.constant(ls_q.clone());
        let z2 = mu_v.add(ls_v.exp().mul(g.constant(eps.clone())));
        let post = GaussianVars {
            mu: mu_v,
            log_sigma: ls_v,
            level: Level::Frame,
        };
        let loss = flow
            .prosody_alignment_loss(&p, z2, post, GaussianVars::constant(&g, &prior))
            .unwrap();
        let grads = g.backward(loss);
        (loss.item(), grads.get(mu_v).cloned())
    };
    let analytic = psd_at(&mu_q).1.unwrap();
    let mut err_a = 0.0f64;
    for k in 0..mu_q.len() {
        let mut plus = mu_q.clone();
        plus.data_mut()[k] += GRAD_STEP;
        let mut minus = mu_q.clone();
        minus.data_mut()[k] -= GRAD_STEP;
        let numeric = (psd_at(&plus).0 - psd_at(&minus).0) / (2.0 * GRAD_STEP);
        let a = analytic.data()[k];
        err_a = err_a.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }

    // (b) reconstruction + adversarial loss with respect to decoder weights
    let mut model = Model::new(toy_model_config(4), 9).unwrap();
    let frames = 4;
    let z = Tensor::randn(&[4, frames], 1.0, &mut rng);
    let spec_frames = Tensor::randn(&[513, frames], 1.0, &mut rng);
    let critics = model.critics.clone();
    let critic_store = model.critic_store.clone();
    let mel = model.mel.clone();
    let gen = model.gen.clone();
    // target offset from the initial output by at least 0.5 per bin keeps L1 away from its kink
    let initial_mel = {
        let g = Graph::new();
        let p = Binding::new(&g, &model.gen_store, false);
        let spk = gen.speaker(&p, g.constant(spec_frames.clone())).unwrap();
        let emo = gen.emotion(&p, EmotionLabel::Happy).unwrap();
        let fake = gen
            .decoder
            .decode(&p, g.constant(z.clone()), &spk, &emo)
            .unwrap()
            .waveform;
        mel.log_mel(&g, fake).value()
    };
    let offsets = Tensor::randn(initial_mel.shape(), 1.0, &mut rng);
    let target_mel = initial_mel.zip_map(&offsets, |m, o| m + o.signum() * (0.5 + o.abs()));
    let recon_adv = graph_fn(|p| {
        let g = p.g;
        let spk = gen.speaker(p, g.constant(spec_frames.clone())).unwrap();
        let emo = gen.emotion(p, EmotionLabel::Happy).unwrap();
        let fake = gen
            .decoder
            .decode(p, g.constant(z.clone()), &spk, &emo)
            .unwrap()
            .waveform;
        let recon = g
            .constant(target_mel.clone())
            .sub(mel.log_mel(g, fake))
            .abs()
            .mean();
        let cp = Binding::new(g, &critic_store, false);
        let adv = generator_adversarial_loss(&critics.disc.discriminate(&cp, fake).unwrap());
        recon.add(adv)
    });
    let coords_b = pick(&model.gen_store, "decoder.conv_post.w", usize::MAX, 1);
    let err_b = store_grad_error(
        &mut model.gen_store,
        &coords_b,
        &|p| recon_adv(p).item(),
        &|s| {
            let g = Graph::new();
            let p = Binding::new(&g, s, true);
            let grads = g.backward(recon_adv(&p));
            p.collect(&grads)
        },
    );

    // (c) prior path: text prior through the flow density
    let vocab = 6;
    let mut model = Model::new(toy_model_config(vocab), 21).unwrap();
    for e in model.gen_store.entries_mut() {
        if e.name.starts_with("flow.") {
            e.value = Tensor::randn(e.value.shape(), 0.15, &mut rng);
        }
    }
    let gen = model.gen.clone();
    let phonemes = PhonemeSequence::new(vec![1, 3, 5], vocab).unwrap();
    let durations = DurationVector(vec![2, 1, 3]);
    let z2 = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let q = gaussian(
        Tensor::randn(&[4, 6], 1.0, &mut rng),
        Tensor::randn(&[4, 6], 0.2, &mut rng),
    );
    let prior_loss = graph_fn(|p| {
        let g = p.g;
        let text = gen.text(p, &phonemes, EmotionLabel::Sad).unwrap();
        let frames = expand_prior(text.prior, &durations).unwrap();
        gen.flow
            .prosody_alignment_loss(
                p,
                g.constant(z2.clone()),
                GaussianVars::constant(g, &q),
                frames,
            )
            .unwrap()
    });
    let mut coords_c = pick(&model.gen_store, "tpp.prior", 6, 2);
    coords_c.extend(pick(&model.gen_store, "tpp.text_encoder", 1, 30));
    coords_c.extend(pick(&model.gen_store, "flow.", 2, 30));
    let err_c = store_grad_error(
        &mut model.gen_store,
        &coords_c,
        &|p| prior_loss(p).item(),
        &|s| {
            let g = Graph::new();
            let p = Binding::new(&g, s, true);
            let grads = g.backward(prior_loss(&p));
            p.collect(&grads)
        },
    );
    let elapsed = t0.elapsed();
    let ok = err_a <= GRAD_REL_TOL
        && err_b <= GRAD_REL_TOL
        && err_c <= GRAD_REL_TOL
        && elapsed <= GRAD_LIMIT;
    report(
        5,
        "gradient checks",
        ok,
        &format!(
            "(a) psd/mu {err_a:.2e} over {} coords, (b) recon+adv/decoder {err_b:.2e} over {} coords, (c) prior path {err_c:.2e} over {} coords",
            mu_q.len(),
            coords_b.len(),
            coords_c.len()
        ),
        elapsed,
    );
}

struct Overfit {
    state: TrainState,
    items: Vec<CorpusItem>,
    log: Vec<LossBundle>,
    elapsed: Duration,
}

const OVERFIT_EMOTIONS: [EmotionLabel; 4] = [
    EmotionLabel::Neutral,
    EmotionLabel::Angry,
    EmotionLabel::Happy,
    EmotionLabel::Sad,
];

fn synthetic_items(seed: u64, dir: &Path, cfg: &TrainConfig) -> (Manifest, Vec<CorpusItem>) {
    let mut spec = SynthCorpusSpec::new(2, seed);
    spec.emotions = OVERFIT_EMOTIONS.to_vec();
    let manifest = generate_synthetic_corpus(&spec, dir).unwrap();
    let vocab = manifest.vocabulary();
    let items = load_corpus(&manifest, &vocab, None, cfg.frame, cfg.sample_rate).unwrap();
    (manifest, items)
}

fn overfit(seed: u64, steps: usize) -> Overfit {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        seed,
        steps,
        ..TrainConfig::default()
    };
    let (manifest, items) = synthetic_items(seed, dir.path(), &cfg);
    let t0 = Instant::now();
    let mut state = TrainState::new(cfg, manifest.vocabulary()).unwrap();
    let examples = build_examples(&items, None, &state.model).unwrap();
    let mut log = Vec::with_capacity(steps);
    train(&mut state, &examples, |_, b| {
        log.push(*b);
        Ok(())
    })
    .unwrap();
    Overfit {
        state,
        items,
        log,
        elapsed: t0.elapsed(),
    }
}

fn overfit_seed0() -> &'static Overfit {
    static CELL: OnceLock<Overfit> = OnceLock::new();
    CELL.get_or_init(|| overfit(0, OVERFIT_STEPS))
}

/// Per-element L1 between log-mels, with the source padded to the
/// converted length as in training.
fn mel_l1(source: &Waveform, converted: &Waveform) -> f64 {
    let mut padded = source.samples.clone();
    padded.resize(converted.len().max(padded.len()), 0.0);
    let a = log_mel(
        &Waveform::new(padded, source.sample_rate).unwrap(),
        FrameConfig::default(),
    )
    .logmel;
    let b = log_mel(converted, FrameConfig::default()).logmel;
    let t = a.cols().min(b.cols());
    let mut s = 0.0;
    for r in 0..a.rows() {
        for c in 0..t {
            s += (a.at(r, c) - b.at(r, c)).abs();
        }
    }
    s / (a.rows() * t) as f64
}

#[test]
fn criterion_06_overfit_gate() {
    let _g = serial();
    let run = overfit_seed0();
    let first: f64 = run.log[..10].iter().map(|b| b.recon_cls).sum::<f64>() / 10.0;
    let last: f64 = run.log[run.log.len() - 10..]
        .iter()
        .map(|b| b.recon_cls)
        .sum::<f64>()
        / 10.0;
    let drop = 1.0 - last / first;
    let finite = run.log.iter().all(|b| b.check_finite(0).is_ok());
    let mut worst_l1 = 0.0f64;
    for item in run
        .items
        .iter()
        .filter(|i| i.emotion == EmotionLabel::Neutral)
    {
        let out = convert_fl(&run.state, &item.wave, item.emotion).unwrap();
        worst_l1 = worst_l1.max(mel_l1(&item.wave, &out));
    }
    let ok = drop >= OVERFIT_MIN_DROP
        && finite
        && worst_l1 <= OVERFIT_MEL_L1
        && run.elapsed <= OVERFIT_LIMIT;
    report(
        6,
        "overfit gate",
        ok,
        &format!(
            "recon_cls {first:.4} -> {last:.4} (drop {:.1}%), finite: {finite}, FL self mel-L1 {worst_l1:.4}, {} steps",
            100.0 * drop,
            run.log.len()
        ),
        run.elapsed,
    );
}

fn direction_holds(state: &TrainState, items: &[CorpusItem]) -> (bool, f64, f64) {
    let src = items
        .iter()
        .find(|i| i.emotion == EmotionLabel::Neutral)
        .unwrap();
    let cfg = FrameConfig::default();
    let out = convert_fl(state, &src.wave, EmotionLabel::Angry).unwrap();
    let f_src = extract_f0(&src.wave, cfg).mean_voiced().unwrap_or(0.0);
    let f_out = extract_f0(&out, cfg).mean_voiced().unwrap_or(0.0);
    (f_out > f_src, f_src, f_out)
}

#[test]
fn criterion_07_emotion_direction() {
    let _g = serial();
    let t0 = Instant::now();
    let steps: usize = std::env::var("EMOVC_DIRECTION_STEPS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(OVERFIT_STEPS);
    let mut passes = 0;
    let mut detail = Vec::new();
    for seed in 0..DIRECTION_SEEDS {
        let (ok, f_src, f_out) = if seed == 0 && steps == OVERFIT_STEPS {
            let run = overfit_seed0();
            direction_holds(&run.state, &run.items)
        } else {
            let run = overfit(seed, steps);
            direction_holds(&run.state, &run.items)
        };
        passes += ok as usize;
        detail.push(format!("s{seed}:{f_src:.0}->{f_out:.0}"));
    }
    report(
        7,
        "emotion direction (neutral -> angry raises F0)",
        passes >= DIRECTION_MIN_PASS,
        &format!(
            "{passes}/{DIRECTION_SEEDS} seeds, {steps} steps each [{}]",
            detail.join(" ")
        ),
        t0.elapsed(),
    );
}

#[test]
fn criterion_08_length_laws() {
    let _g = serial();
    let t0 = Instant::now();
    let vocab = 6;
    let cfg = TrainConfig::default();
    let model = Model::new(cfg.model_config(vocab), 8).unwrap();
    let state = TrainState::from_model(
        model,
        cfg,
        emovc::tpp::Vocabulary::from_symbols(["a", "b", "c", "d", "e"]),
    );
    let hop = 256;

    let mut fl_ok = true;
    for n in [1usize, 255, 256, 5000, 6143] {
        let w = Waveform::new(
            (0..n).map(|i| 0.1 * (i as f64 * 0.05).sin()).collect(),
            22050,
        )
        .unwrap();
        let frames = FrameConfig::default().n_frames(n);
        fl_ok &= convert_fl(&state, &w, EmotionLabel::Angry).unwrap().len() == frames * hop;
    }
    let mut vl_ok = true;
    let mut vl_seen = Vec::new();
    for ids in [vec![1], vec![1, 2, 3], vec![5, 4, 3, 2, 1, 2]] {
        let ph = PhonemeSequence::new(ids, vocab).unwrap();
        let src = Waveform::new(vec![0.05; 3000], 22050).unwrap();
        let (w, d) =
            convert_vl(&state, &ph, EmotionLabel::Sad, Some(&src), None, 0.667, 1).unwrap();
        vl_ok &= w.len() == d.total() * hop;
        vl_seen.push(d.total());
    }
    let mut dec_ok = true;
    let g0 = Graph::new();
    let p = Binding::new(&g0, &state.model.gen_store, false);
    let spk = state
        .model
        .speaker(&p, g0.constant(Tensor::zeros(&[513, 2])))
        .unwrap();
    let emo = state.model.emotion(&p, EmotionLabel::Neutral).unwrap();
    for t in 1..=64 {
        let z = g0.constant(Tensor::zeros(&[state.model.cfg.d_latent, t]));
        let out = state.model.gen.decoder.decode(&p, z, &spk, &emo).unwrap();
        dec_ok &= out.waveform.value().len() == t * hop;
    }
    report(
        8,
        "length laws",
        fl_ok && vl_ok && dec_ok,
        &format!("FL frames x 256: {fl_ok}, VL sum(d) x 256: {vl_ok} (totals {vl_seen:?}), decoder T=1..64: {dec_ok}"),
        t0.elapsed(),
    );
}

#[test]
fn criterion_09_ablation_smoke() {
    let _g = serial();
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let base = TrainConfig {
        steps: SMOKE_STEPS,
        seed: 2,
        ..TrainConfig::default()
    };
    let (manifest, items) = synthetic_items(2, dir.path(), &base);
    let vocab = manifest.vocabulary();
    let mut detail = Vec::new();
    let mut ok = true;
    for flags in [
        "no_prosody_predictor",
        "no_prosody_alignment",
        "no_prosody_integrator",
        "no_prosody_predictor,no_prosody_alignment,no_prosody_integrator",
    ] {
        let cfg = TrainConfig {
            ablation: AblationFlags::parse(flags).unwrap(),
            ..base.clone()
        };
        let result = (|| -> emovc::Result<(usize, bool)> {
            let mut state = TrainState::new(cfg.clone(), vocab.clone())?;
            let examples = build_examples(&items, None, &state.model)?;
            let mut psd_zero = true;
            let mut steps = 0;
            train(&mut state, &examples, |_, b| {
                psd_zero &= b.psd == 0.0;
                steps += 1;
                Ok(())
            })?;
            let src = &items[0];
            convert_fl(&state, &src.wave, EmotionLabel::Happy)?;
            convert_vl(
                &state,
                &src.phonemes,
                EmotionLabel::Happy,
                None,
                Some(&src.speaker),
                0.667,
                0,
            )?;
            Ok((steps, psd_zero))
        })();
        match result {
            Ok((steps, psd_zero)) => {
                let psd_ok = !cfg.ablation.no_prosody_alignment || psd_zero;
                ok &= steps == SMOKE_STEPS && psd_ok;
                detail.push(format!("{flags}: {steps} steps, psd==0 {psd_zero}"));
            }
            Err(e) => {
                ok = false;
                detail.push(format!("{flags}: {e}"));
            }
        }
    }
    report(9, "ablation smoke", ok, &detail.join("; "), t0.elapsed());
}

#[test]
fn criterion_10_determinism_persistence() {
    let _g = serial();
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        steps: 5,
        seed: 10,
        ..TrainConfig::default()
    };
    let (manifest, items) = synthetic_items(10, dir.path(), &cfg);
    let run = || {
        let mut state = TrainState::new(cfg.clone(), manifest.vocabulary()).unwrap();
        let examples = build_examples(&items, None, &state.model).unwrap();
        let mut log = LossLog::new(Vec::new()).unwrap();
        train(&mut state, &examples, |s, b| log.record(s, b)).unwrap();
        (state, String::from_utf8(log.into_inner()).unwrap())
    };
    let (state, log_a) = run();
    let (_, log_b) = run();
    let logs_equal = log_a == log_b && log_a.lines().count() == 6;

    let path = dir.path().join("model.ckpt");
    checkpoint::save(&state, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    let probe = |s: &TrainState| {
        let a = convert_fl(s, &items[1].wave, EmotionLabel::Sad)
            .unwrap()
            .samples;
        let ph = &items[0].phonemes;
        let (b, _) = convert_vl(
            s,
            ph,
            EmotionLabel::Angry,
            None,
            Some(&items[0].speaker),
            0.0,
            0,
        )
        .unwrap();
        (a, b.samples)
    };
    let bit_identical = probe(&state) == probe(&loaded);

    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let truncated = matches!(checkpoint::load(&path), Err(Error::CorruptCheckpoint(_)));
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 0x01;
    fs::write(&path, &flipped).unwrap();
    let flipped_err = matches!(checkpoint::load(&path), Err(Error::CorruptCheckpoint(_)));
    let ok = logs_equal && bit_identical && truncated && flipped_err;
    report(
        10,
        "determinism and persistence",
        ok,
        &format!(
            "identical logs: {logs_equal}, bit-identical probe: {bit_identical}, truncated rejected: {truncated}, bit flip rejected: {flipped_err}"
        ),
        t0.elapsed(),
    );
}

fn emovc(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_emovc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        format!(
            "{}{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        ),
    )
}

#[test]
fn criterion_11_cli_end_to_end() {
    let _g = serial();
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_string_lossy().into_owned();
    let (corpus, cache, run, conv, report_path) = (
        d("corpus"),
        d("cache"),
        d("run"),
        d("converted"),
        d("report.tsv"),
    );
    let manifest = format!("{corpus}/manifest.txt");
    let config = d("train.cfg");
    fs::write(
        &config,
        format!("manifest = {manifest}\ncache_dir = {cache}\nout_dir = {run}\nsteps = 50\nbatch_size = 8\nseed = 1\n"),
    )
    .unwrap();
    let ckpt = format!("{run}/model.ckpt");
    let steps: Vec<(&str, Vec<&str>)> = vec![
        (
            "synth-corpus",
            vec!["synth-corpus", "--n", "2", "--seed", "3", "--out", &corpus],
        ),
        ("prepare", vec!["prepare", &manifest, "--out", &cache]),
        ("train", vec!["train", "--config", &config]),
        (
            "convert fl",
            vec![
                "convert",
                "--ckpt",
                &ckpt,
                "--mode",
                "fl",
                "--input",
                &manifest,
                "--target-emotion",
                "angry",
                "--out",
                &conv,
            ],
        ),
        (
            "convert vl",
            vec![
                "convert",
                "--ckpt",
                &ckpt,
                "--mode",
                "vl",
                "--input",
                &manifest,
                "--target-emotion",
                "sad",
                "--out",
                &conv,
            ],
        ),
        (
            "eval-mcd",
            vec![
                "eval-mcd",
                "--ckpt",
                &ckpt,
                "--manifest",
                &manifest,
                "--mode",
                "fl",
                "--out",
                &report_path,
            ],
        ),
    ];
    let mut detail = Vec::new();
    let mut ok = true;
    for (name, args) in &steps {
        let (code, output) = emovc(args);
        detail.push(format!("{name}={code}"));
        if code != 0 {
            ok = false;
            detail.push(output.lines().last().unwrap_or("").to_string());
            break;
        }
    }
    let mut columns = 0;
    if ok {
        let tsv = fs::read_to_string(&report_path).unwrap();
        let lines: Vec<&str> = tsv.lines().collect();
        let header: Vec<&str> = lines[0].split('\t').collect();
        columns = header.len() - 1;
        ok &= header[1..] == ["Neu-Ang", "Neu-Hap", "Neu-Sad", "Neu-Sur"] && lines.len() == 2;
        let converted = fs::read_dir(&conv).unwrap().count();
        ok &= converted == 20;
        detail.push(format!("{converted} converted files"));
        let log_lines = fs::read_to_string(format!("{run}/train_log.csv"))
            .unwrap()
            .lines()
            .count();
        ok &= log_lines == 51;
    }
    let (missing_code, _) = emovc(&[
        "eval-mcd",
        "--ckpt",
        &d("nope.ckpt"),
        "--manifest",
        &manifest,
        "--mode",
        "fl",
        "--out",
        &report_path,
    ]);
    let (bad_code, _) = emovc(&[
        "convert",
        "--ckpt",
        &ckpt,
        "--mode",
        "xl",
        "--input",
        &manifest,
        "--target-emotion",
        "angry",
        "--out",
        &conv,
    ]);
    ok &= missing_code == 3 && bad_code == 2;
    let elapsed = t0.elapsed();
    ok &= elapsed <= CLI_LIMIT;
    report(
        11,
        "CLI end-to-end",
        ok,
        &format!("{}; report columns {columns}; missing checkpoint exit {missing_code}, bad mode exit {bad_code}", detail.join(" ")),
        elapsed,
    );
}
