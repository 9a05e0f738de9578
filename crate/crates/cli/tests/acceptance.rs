//! End-to-end acceptance checks. Prints one PASS/FAIL line per check and
//! exits non-zero if any check fails or overruns its time budget.

#[path = "../../core/tests/common/mod.rs"]
mod oracle;

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use distcap::ciderscore::{build_idf, cider, TokenizedCaption};
use distcap::distmetrics::{evaluate_split, geg_avg, geg_min, Aggregate};
use distcap::embedstore::{cosine, manifest_to_text, parse_manifest, store_paths, EmbeddingStore, ManifestEntry};
use distcap::groups::{build_all, GroupFile, GroupMember, SimilarGroup};
use distcap::scstreward::{
    exact_expected_reward, scst_loss_gradient, RewardConfig, RewardMode, SampledPair,
};
use distcap::toytrain::{train, ToyPolicy, ToyWorld, TrainOptions, WorldParams};
use distcap::EntryId;
use oracle::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn image_store(rows: &[(String, Vec<f32>)]) -> EmbeddingStore {
    let dim = rows[0].1.len();
    EmbeddingStore::from_rows(dim, rows.iter().map(|(n, v)| (ManifestEntry::image(id(n), 0), v.clone()))).unwrap()
}

fn group_of(target: &str, members: &[String]) -> SimilarGroup {
    SimilarGroup {
        target_id: id(target),
        members: members.iter().map(|m| GroupMember { image_id: id(m), score: 0.0 }).collect(),
    }
}

fn metric_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let instances = 10_000;
    let (mut worst_exact, mut worst_rounded) = (0.0f64, 0.0f64);
    for i in 0..instances {
        let dim = rng.random_range(2..=32);
        let k = rng.random_range(1..=5);
        let mut rows = vec![("t".to_string(), gaussian(&mut rng, dim))];
        let members: Vec<String> = (0..k).map(|m| format!("g{m}")).collect();
        for m in &members {
            rows.push((m.clone(), gaussian(&mut rng, dim)));
        }
        let caption = gaussian(&mut rng, dim);
        let store = image_store(&rows);
        let group = group_of("t", &members);
        let avg = geg_avg(&store, &group, "t", &caption).unwrap();
        let min = geg_min(&store, &group, "t", &caption).unwrap();
        ensure!(min <= avg, "instance {i}: geg_min {min} > geg_avg {avg}");

        for r in 0..store.rows() {
            for c in [caption.as_slice(), store.row_at((r + 1) % store.rows())] {
                let s = cosine(store.row_at(r), c).unwrap();
                ensure!(s.abs() <= 1.0, "instance {i}: |cosine| = {s}");
            }
        }

        // every group row equal to the target's
        let same: Vec<(String, Vec<f32>)> = rows.iter().map(|(n, _)| (n.clone(), rows[0].1.clone())).collect();
        let same = image_store(&same);
        let (a0, m0) = (
            geg_avg(&same, &group, "t", &caption).unwrap(),
            geg_min(&same, &group, "t", &caption).unwrap(),
        );
        ensure!(a0 == 0.0 && m0 == 0.0, "instance {i}: equal embeddings give gaps {a0} {m0}");

        // positive rescaling of pre-normalization inputs; powers of two are
        // the factors f32 applies exactly
        let pow2 = |rng: &mut ChaCha8Rng| 2f32.powi(rng.random_range(-20..=20));
        let arbitrary = |rng: &mut ChaCha8Rng| 10f32.powf(rng.random_range(-3.0..3.0));
        for (exact, factor) in [(true, &pow2 as &dyn Fn(&mut ChaCha8Rng) -> f32), (false, &arbitrary)] {
            let scaled: Vec<(String, Vec<f32>)> = rows
                .iter()
                .map(|(n, v)| {
                    let s = factor(&mut rng);
                    (n.clone(), v.iter().map(|x| x * s).collect())
                })
                .collect();
            let scaled = image_store(&scaled);
            let cs = factor(&mut rng);
            let caption_s: Vec<f32> = caption.iter().map(|x| x * cs).collect();
            let da = (geg_avg(&scaled, &group, "t", &caption_s).unwrap() - avg).abs();
            let dm = (geg_min(&scaled, &group, "t", &caption_s).unwrap() - min).abs();
            if exact {
                worst_exact = worst_exact.max(da).max(dm);
                ensure!(da <= 1e-7 && dm <= 1e-7, "instance {i}: rescaling moved the gaps by {da:e} / {dm:e}");
            } else {
                // other factors round each scaled component once more in f32
                worst_rounded = worst_rounded.max(da).max(dm);
                let tol = 4.0 * f32::EPSILON as f64;
                ensure!(da <= tol && dm <= tol, "instance {i}: non-exact rescaling moved the gaps by {da:e} / {dm:e}");
            }
        }
    }
    Ok(format!(
        "{instances} instances, rescaling drift {worst_exact:.1e} exact factors, {worst_rounded:.1e} rounded factors"
    ))
}

/// Gives image `i + 1` an exact copy of image `i`'s captions for every even
/// `i`, so the two tie on score against any target.
fn with_ties(split: &Split) -> Split {
    let ids = image_ids(&split.images);
    let dim = split.images.dim();
    let mut rows = Vec::new();
    for (i, img) in ids.iter().enumerate() {
        let source = if i % 2 == 1 { &ids[i - 1] } else { img };
        for (n, &r) in split.captions.rows_owned_by(source.as_str()).iter().enumerate() {
            rows.push((
                ManifestEntry::caption(EntryId::caption_of(img, n), 0, img.clone()),
                split.captions.row_at(r).to_vec(),
            ));
        }
    }
    Split {
        images: split.images.clone(),
        captions: EmbeddingStore::from_rows(dim, rows).unwrap(),
    }
}

fn group_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut compared, mut groups, mut tied) = (0usize, 0usize, 0usize);
    for s in 0..200 {
        let n = rng.random_range(2..=50);
        let noise = rng.random_range(0.2..1.5);
        let mut split = random_split(&mut rng, n, 5, 16, noise);
        if s % 4 == 0 && n >= 4 {
            split = with_ties(&split);
            tied += 1;
        }
        for k in [1, 3, 5] {
            let built = build_all(&split.images, &split.captions, k, "s").map_err(|e| e.to_string())?;
            for g in &built.file.groups {
                groups += 1;
                g.check(k).map_err(|e| format!("split {s} K={k}: {e}"))?;
                let t = g.target_id.as_str();
                if pool_owners(&split, t, k) < k {
                    continue;
                }
                compared += 1;
                let want = brute_group(&split, t, k);
                let got: Vec<&str> = g.member_ids().map(EntryId::as_str).collect();
                let want_ids: Vec<&str> = want.iter().map(|w| w.0.as_str()).collect();
                ensure!(got == want_ids, "split {s} K={k} target {t}: {got:?} vs brute force {want_ids:?}");
                for (m, w) in g.members.iter().zip(&want) {
                    ensure!((m.score - w.1).abs() <= 1e-7, "split {s} K={k} target {t}: score {} vs {}", m.score, w.1);
                }
            }
        }
    }
    ensure!(compared > 0, "no group fell in the covered regime");

    // hand-built tie: two candidates score identically against the target
    let images = EmbeddingStore::from_rows(
        2,
        [
            (ManifestEntry::image(id("zeta"), 0), vec![0.6f32, 0.8]),
            (ManifestEntry::image(id("alpha"), 0), vec![0.8f32, 0.6]),
            (ManifestEntry::image(id("tgt"), 0), vec![1.0f32, 0.0]),
        ],
    )
    .unwrap();
    let captions = EmbeddingStore::from_rows(
        2,
        [
            (ManifestEntry::caption(id("z0"), 0, id("zeta")), vec![0.7f32, 0.7]),
            (ManifestEntry::caption(id("a0"), 0, id("alpha")), vec![0.7f32, 0.7]),
            (ManifestEntry::caption(id("t0"), 0, id("tgt")), vec![1.0f32, 0.0]),
        ],
    )
    .unwrap();
    let file = build_all(&images, &captions, 2, "s").unwrap().file;
    let order: Vec<&str> = file.get("tgt").unwrap().member_ids().map(EntryId::as_str).collect();
    ensure!(order == ["alpha", "zeta"], "tie order {order:?}");
    Ok(format!("{groups} groups, {compared} checked against brute force, {tied} splits with ties"))
}

fn retrieval() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut ranks = 0;
    for s in 0..5 {
        let noise = rng.random_range(0.5..2.0);
        let split = random_split(&mut rng, 100, 2, 16, noise);
        let groups = build_all(&split.images, &split.captions, 5, "r").unwrap().file;
        let gallery = image_ids(&split.images);
        let ks = [1, 2, 5, 10, 50, 100];
        let report = evaluate_split(&split.images, &split.captions, &groups, &gallery, &ks).map_err(|e| e.to_string())?;
        let r: Vec<f64> = ks.iter().map(|k| report.aggregate.recall_at[k]).collect();
        ensure!(r.windows(2).all(|w| w[0] <= w[1]), "split {s}: recall not monotone {r:?}");
        ensure!(report.aggregate.recall_at[&100] == 100.0, "split {s}: R@gallery = {}", report.aggregate.recall_at[&100]);
        for c in &report.per_caption {
            let emb = split.captions.get(c.caption_id.as_str()).unwrap();
            let want = oracle_rank(&split.images, emb, c.target_id.as_str(), &gallery);
            ensure!(c.target_rank == want, "split {s} caption {}: rank {} vs oracle {want}", c.caption_id, c.target_rank);
            ranks += 1;
        }
    }

    let n = 8;
    let basis = |i: usize| (0..n).map(|d| if d == i { 1.0 } else { 0.0 }).collect::<Vec<f32>>();
    let images = EmbeddingStore::from_rows(n, (0..n).map(|i| (ManifestEntry::image(id(&format!("im{i}")), 0), basis(i)))).unwrap();
    let captions = EmbeddingStore::from_rows(
        n,
        (0..n).map(|i| (ManifestEntry::caption(id(&format!("c{i}")), 0, id(&format!("im{i}"))), basis(i))),
    )
    .unwrap();
    let groups = build_all(&images, &captions, 3, "id").unwrap().file;
    let report = evaluate_split(&images, &captions, &groups, &image_ids(&images), &[1]).unwrap();
    let text = report.aggregate.to_text();
    ensure!(text.starts_with("R1=100.0000\n"), "identity fixture report {text:?}");
    ensure!(report.aggregate.mean_geg_min > 0.0, "identity fixture GEG_MIN {}", report.aggregate.mean_geg_min);
    Ok(format!("{ranks} ranks matched the full-sort oracle; identity R1=100.0000"))
}

fn cider_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    let mut scored = 0;
    let sentence = |rng: &mut ChaCha8Rng, vocab: usize| -> Vec<String> {
        let len = rng.random_range(1..=8);
        (0..len).map(|_| format!("t{}", rng.random_range(0..vocab))).collect()
    };
    for c in 0..100 {
        let images = rng.random_range(1..=10);
        let vocab = rng.random_range(2..=12);
        let corpus: Vec<Vec<Vec<String>>> = (0..images)
            .map(|_| (0..rng.random_range(1..=5)).map(|_| sentence(&mut rng, vocab)).collect())
            .collect();
        let tok: Vec<Vec<TokenizedCaption>> = corpus
            .iter()
            .map(|refs| refs.iter().map(|r| TokenizedCaption::from_tokens(r.iter().cloned())).collect())
            .collect();
        let idf = build_idf(tok.iter().map(Vec::as_slice)).map_err(|e| e.to_string())?;
        for (i, refs) in tok.iter().enumerate() {
            for _ in 0..3 {
                let cand = sentence(&mut rng, vocab);
                let got = cider(&TokenizedCaption::from_tokens(cand.iter().cloned()), refs, &idf).unwrap();
                let want = oracle_cider(&cand, &corpus[i], &corpus);
                worst = worst.max((got - want).abs());
                ensure!((got - want).abs() <= 1e-6, "corpus {c} image {i} {cand:?}: {got} vs oracle {want}");
                scored += 1;
            }
            // a reference copied verbatim
            let cand = &corpus[i][0];
            let got = cider(&TokenizedCaption::from_tokens(cand.iter().cloned()), refs, &idf).unwrap();
            ensure!((got - oracle_cider(cand, &corpus[i], &corpus)).abs() <= 1e-6, "corpus {c} image {i}: verbatim reference");
            let disjoint: Vec<String> = (0..rng.random_range(1..=8)).map(|j| format!("x{j}")).collect();
            let zero = cider(&TokenizedCaption::from_tokens(disjoint), refs, &idf).unwrap();
            ensure!(zero == 0.0, "corpus {c} image {i}: zero-overlap candidate scored {zero}");
        }
    }
    Ok(format!("{scored} candidates on 100 corpora, worst deviation {worst:.1e}"))
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let v = gaussian(rng, dim);
    let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    v.iter().map(|&x| (x as f64 / n) as f32).collect()
}

fn gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(505);

    // log-probability gradient against central differences
    let (v, l, dim) = (6, 3, 5);
    let policy = ToyPolicy::random(v, l, dim, 1.0, &mut rng);
    let x = unit(&mut rng, dim);
    let caption: Vec<usize> = (0..l).map(|_| rng.random_range(0..v)).collect();
    let analytic = policy.grad_log_prob(&x, &caption);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let j = rng.random_range(0..policy.theta().len());
        let mut plus = policy.clone();
        plus.theta_mut()[j] += h;
        let mut minus = policy.clone();
        minus.theta_mut()[j] -= h;
        let fd = (plus.log_prob(&x, &caption) - minus.log_prob(&x, &caption)) / (2.0 * h);
        let scale = fd.abs().max(analytic[j].abs());
        let rel = if scale == 0.0 { 0.0 } else { (fd - analytic[j]).abs() / scale };
        worst = worst.max(rel);
        ensure!(rel <= 1e-5, "coordinate {j}: analytic {} vs finite difference {fd}", analytic[j]);
    }

    // averaged single-sample loss gradients against the exact objective.
    // At 1e5 draws the estimator's RMS error is set by the instance and sits
    // between 0.7e-2 and 2e-2 on random ones, so take the first instance
    // whose exactly computed RMS error leaves room under the tolerance.
    let (v, l, dim) = (4, 2, 3);
    let draws = 100_000;
    let config = RewardConfig::default();
    let build = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = ToyPolicy::random(v, l, dim, 0.7, &mut rng);
        let tokens: Vec<Vec<f32>> = (0..v).map(|_| unit(&mut rng, dim)).collect();
        let image = unit(&mut rng, dim);
        let group: Vec<Vec<f32>> = (0..3).map(|_| unit(&mut rng, dim)).collect();
        (policy, tokens, image, group)
    };
    let reward_of = |tokens: &[Vec<f32>], image: &[f32], group: &[Vec<f32>], c: &[usize]| {
        let mut e = vec![0.0f32; dim];
        for &t in c {
            for (s, x) in e.iter_mut().zip(&tokens[t]) {
                *s += x;
            }
        }
        let t = cosine(image, &e).unwrap();
        let sims: Vec<f64> = group.iter().map(|g| cosine(g, &e).unwrap()).collect();
        distcap::scstreward::combined_reward(&config, 0.0, t, &sims).unwrap()
    };
    // exact mean and RMS error of the averaged estimator, by enumeration
    let moments = |policy: &ToyPolicy, image: &[f32], reward: &dyn Fn(&[usize]) -> f64| {
        let r_greedy = reward(&policy.greedy_decode(image));
        let mut mean = vec![0.0; policy.theta().len()];
        let mut second = 0.0;
        for a in 0..v {
            for b in 0..v {
                let c = [a, b];
                let p = policy.log_prob(image, &c).exp();
                let adv = reward(&c) - r_greedy;
                let g = policy.grad_log_prob(image, &c);
                for (m, gi) in mean.iter_mut().zip(&g) {
                    *m -= p * adv * gi;
                }
                second += p * adv * adv * g.iter().map(|x| x * x).sum::<f64>();
            }
        }
        let norm2: f64 = mean.iter().map(|x| x * x).sum();
        (mean, ((second - norm2) / draws as f64).sqrt() / norm2.sqrt())
    };
    let mut chosen = None;
    for seed in 505..525 {
        let (policy, tokens, image, group) = build(seed);
        let reward = |c: &[usize]| reward_of(&tokens, &image, &group, c);
        let (_, rms) = moments(&policy, &image, &reward);
        if rms <= 0.8e-2 {
            chosen = Some((seed, rms));
            break;
        }
    }
    let (seed, rms) = chosen.ok_or("no instance with estimator RMS error under 0.8e-2")?;
    let (policy, tokens, image, group) = build(seed);
    let reward = |c: &[usize]| reward_of(&tokens, &image, &group, c);
    let n_params = policy.theta().len();
    let mut fd = vec![0.0; n_params];
    for (j, g) in fd.iter_mut().enumerate() {
        let mut plus = policy.clone();
        plus.theta_mut()[j] += h;
        let mut minus = policy.clone();
        minus.theta_mut()[j] -= h;
        let e = |p: &ToyPolicy| exact_expected_reward(p, &image, reward).unwrap();
        *g = (e(&plus) - e(&minus)) / (2.0 * h);
    }
    let norm: f64 = fd.iter().map(|f| f * f).sum::<f64>().sqrt();
    // the estimator's exact expectation is the negated objective gradient
    let (exact_mean, _) = moments(&policy, &image, &reward);
    let bias: f64 = exact_mean.iter().zip(&fd).map(|(m, f)| (m + f).powi(2)).sum::<f64>().sqrt() / norm;
    ensure!(bias <= 1e-6, "estimator expectation off the objective gradient by {bias:.3e}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean = vec![0.0; n_params];
    let r_greedy = reward(&policy.greedy_decode(&image));
    for _ in 0..draws {
        let pair = SampledPair::draw(&policy, &image, &mut rng);
        if let Some(g) = scst_loss_gradient(&policy, &image, &pair, reward(&pair.sampled), r_greedy) {
            for (m, gi) in mean.iter_mut().zip(g) {
                *m += gi / draws as f64;
            }
        }
    }
    // the loss gradient estimates minus the objective gradient
    let err: f64 = mean.iter().zip(&fd).map(|(m, f)| (m + f).powi(2)).sum::<f64>().sqrt();
    let rel_norm = err / norm;
    ensure!(rel_norm <= 1e-2, "estimator relative error {rel_norm:.3e}");

    let pair = SampledPair::draw(&policy, &image, &mut rng);
    ensure!(scst_loss_gradient(&policy, &image, &pair, 1.5, 1.5).is_none(), "zero advantage produced an update");
    Ok(format!(
        "worst finite-difference error {worst:.1e}; instance {seed}: bias {bias:.1e}, \
         estimator error {rel_norm:.2e} (predicted RMS {rms:.2e})"
    ))
}

fn toy_effect() -> Check {
    let world = ToyWorld::new(WorldParams::default()).map_err(|e| e.to_string())?;
    let runs = [
        ("beta=0", RewardConfig { beta: 0.0, ..RewardConfig::default() }),
        ("ER", RewardConfig { mode: RewardMode::Er, ..RewardConfig::default() }),
        ("GEG_AVG", RewardConfig::default()),
        ("GEG_MIN", RewardConfig { mode: RewardMode::GegMin, ..RewardConfig::default() }),
        ("GEG_SOLE", RewardConfig { mode: RewardMode::GegSole, ..RewardConfig::default() }),
    ];
    let mut finals = Vec::new();
    for (name, config) in runs {
        let out = train(&world, &config, &TrainOptions::default()).map_err(|e| format!("{name}: {e}"))?;
        finals.push((name, *out.log.last().unwrap()));
    }
    let summary = finals
        .iter()
        .map(|(n, e)| format!("{n} geg={:.3} r1={:.0} cider={:.2}", e.mean_geg_avg, e.r_at_1, e.mean_cider))
        .collect::<Vec<_>>()
        .join(", ");
    let (base, avg, sole) = (finals[0].1, finals[2].1, finals[4].1);
    ensure!(avg.mean_geg_avg >= base.mean_geg_avg + 0.05, "GEG_AVG gap {:.4} < beta=0 {:.4} + 0.05 [{summary}]", avg.mean_geg_avg, base.mean_geg_avg);
    ensure!(avg.r_at_1 > base.r_at_1, "GEG_AVG R@1 {} not above beta=0 {} [{summary}]", avg.r_at_1, base.r_at_1);
    for (name, e) in &finals[..4] {
        ensure!(sole.mean_geg_avg > e.mean_geg_avg, "GEG_SOLE gap {:.4} not above {name} {:.4} [{summary}]", sole.mean_geg_avg, e.mean_geg_avg);
        ensure!(sole.mean_cider < e.mean_cider, "GEG_SOLE CIDEr {:.4} not below {name} {:.4} [{summary}]", sole.mean_cider, e.mean_cider);
    }
    Ok(summary)
}

fn run_cli(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_distcap")).args(args).output().unwrap().status.code().unwrap_or(-1)
}

fn formats() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |n: &str| dir.path().join(n);
    let s = |path: &Path| path.to_str().unwrap().to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let split = random_split(&mut rng, 12, 3, 8, 0.6);

    let (m1, t1) = store_paths(&p("caps"));
    split.captions.save(&m1, &t1).unwrap();
    let back = EmbeddingStore::load(&m1, &t1).map_err(|e| e.to_string())?;
    let (m2, t2) = store_paths(&p("caps2"));
    back.save(&m2, &t2).unwrap();
    ensure!(fs::read(&m1).unwrap() == fs::read(&m2).unwrap(), "matrix bytes changed on round trip");
    let manifest = fs::read_to_string(&t1).unwrap();
    ensure!(manifest_to_text(&parse_manifest(&manifest).unwrap()) == manifest, "manifest text changed on round trip");

    let (mi, ti) = store_paths(&p("images"));
    split.images.save(&mi, &ti).unwrap();
    let groups = s(&p("groups.tsv"));
    ensure!(run_cli(&["build-groups", "--images", &s(&p("images")), "--captions", &s(&p("caps")), "-K", "3", "--out", &groups]) == 0, "build-groups failed");
    let text = fs::read_to_string(&groups).unwrap();
    ensure!(GroupFile::parse(&text).map_err(|e| e.to_string())?.to_text() == text, "group file changed on round trip");

    let report = s(&p("report.txt"));
    ensure!(run_cli(&["eval", "--images", &s(&p("images")), "--captions", &s(&p("caps")), "--groups", &groups, "--out", &report]) == 0, "eval failed");
    let text = fs::read_to_string(&report).unwrap();
    ensure!(Aggregate::parse(&text).map_err(|e| e.to_string())?.to_text() == text, "report changed on round trip");

    // documented exit codes
    let good_mat = fs::read(&mi).unwrap();
    let mut bad = good_mat.clone();
    bad[..4].copy_from_slice(b"JUNK");
    fs::write(&mi, &bad).unwrap();
    let code = run_cli(&["eval", "--images", &s(&p("images")), "--captions", &s(&p("caps")), "--groups", &groups]);
    ensure!(code == 2, "bad matrix magic exited {code}");
    fs::write(&mi, &good_mat).unwrap();

    let bad_groups = s(&p("bad_groups.tsv"));
    fs::write(&bad_groups, "K=3 split=test\n").unwrap();
    let code = run_cli(&["eval", "--images", &s(&p("images")), "--captions", &s(&p("caps")), "--groups", &bad_groups]);
    ensure!(code == 2, "bad group header exited {code}");

    let code = run_cli(&["build-groups", "--images", &s(&p("images")), "--captions", &s(&p("caps")), "-K", "12", "--out", &s(&p("g12.tsv"))]);
    ensure!(code == 3, "degraded groups exited {code}");

    let code = run_cli(&["train-toy", "--epochs", "5", "--lr", "1e6", "--optimizer", "sgd", "--out", &s(&p("boom"))]);
    ensure!(code == 4, "divergent training exited {code}");
    Ok("matrix, manifest, group and report bytes stable; exit codes 2/2/3/4".into())
}

fn main() -> ExitCode {
    let checks: [(&str, &str, Duration, fn() -> Check); 7] = [
        ("1", "metric algebra", Duration::from_secs(5), metric_algebra),
        ("2", "group builder oracle", Duration::from_secs(30), group_oracle),
        ("3", "retrieval", Duration::from_secs(5), retrieval),
        ("4", "CIDEr-D oracle", Duration::from_secs(10), cider_oracle),
        ("5", "gradient and estimator", Duration::from_secs(60), gradients),
        ("6", "toy group-gap effect", Duration::from_secs(120), toy_effect),
        ("7", "formats and exit codes", Duration::from_secs(5), formats),
    ];
    let mut failed = 0;
    for (num, name, budget, check) in checks {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let (status, detail) = match result {
            Ok(d) if elapsed <= budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("over the {}s budget; {d}", budget.as_secs())),
            Err(e) => ("FAIL", e),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("{status} [{num}] {name} ({:.2}s / {}s): {detail}", elapsed.as_secs_f64(), budget.as_secs());
    }
    if failed == 0 {
        println!("all 7 acceptance checks passed");
        ExitCode::SUCCESS
    } else {
        println!("{failed} of 7 acceptance checks failed");
        ExitCode::FAILURE
    }
}
