//! Runs every acceptance criterion, prints one PASS/FAIL line per criterion,
//! and fails if any criterion fails.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::descent::meta_step_on_random_state;
use common::recall::{allowed, brute_force, random_episodes};
use common::{bce, central_diff, inv_freq, max_rel_err, meta_loss_after_step, to_matrix, weighted_mean, Stream};
use metabalance::cli::{cmd_train, load_experiment, DatasetSource, ExperimentConfig};
use metabalance::datagen::{generate, imbalance_ratio, imbalance_ratio_of_counts, load, save, Dataset};
use metabalance::eval::{apply_constraint, recall_at_k, Constraint, SEMI_THRESHOLD};
use metabalance::losses::{bce_per_class, class_stats, inv_freq_meta_loss, weighted_train_loss, LossMatrix, WeightMatrix};
use metabalance::models::{ClassifierConfig, WeightNetConfig};
use metabalance::trainer::{run, split_test_scenes, Batch, Problem, Strategy, Weighting};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s as f64, || {
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

fn hypergradient_matches_finite_differences() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let mut s = Stream::new(900 + seed);
        let cls = ClassifierConfig {
            input_dim: 8,
            hidden_sizes: vec![8],
            num_classes: 4,
            seed,
        };
        let net = WeightNetConfig {
            num_classes: 4,
            hidden_sizes: vec![8],
            scalar_mode: false,
            seed: seed + 7,
        };
        let (theta, phi) = (cls.init_params(), net.init_params());
        let (x, y) = (s.matrix(4, 8, -1.0, 1.0), s.labels(4, 4));
        let (xm, ym) = (s.matrix(4, 8, -1.0, 1.0), s.labels(4, 4));
        let alpha = 0.5;
        let problem = Problem {
            classifier: cls,
            weighting: Weighting::Learned(net),
        };
        let batch = Batch { x: to_matrix(&x), y: to_matrix(&y) };
        let meta = Batch { x: to_matrix(&xm), y: to_matrix(&ym) };
        let stats = class_stats(&meta.y).map_err(|e| e.to_string())?;
        let (_, hyper) = problem
            .hypergradient(&theta, &phi, &batch, &meta, &stats, alpha)
            .map_err(|e| e.to_string())?;
        let fd = central_diff(|p| meta_loss_after_step(&theta, p, &x, &y, &xm, &ym, alpha), &phi, 1e-4);
        worst = worst.max(max_rel_err(hyper.values(), &fd, 1e-8));
    }
    ensure(worst <= 1e-4, || format!("max relative error {worst:.3e} > 1e-4"))?;
    within(t.elapsed(), 10)?;
    Ok(format!("max relative error {worst:.2e} over every weight-net coordinate, {:.2}s", t.elapsed().as_secs_f64()))
}

fn meta_step_descends() -> Outcome {
    let t = Instant::now();
    let violations = (0..100u64)
        .filter(|&seed| {
            let o = meta_step_on_random_state(seed, 1e-6);
            o.after > o.before
        })
        .count();
    ensure(violations == 0, || format!("{violations} of 100 states increased the meta loss"))?;
    within(t.elapsed(), 30)?;
    Ok(format!("0 violations over 100 random states, {:.2}s", t.elapsed().as_secs_f64()))
}

fn loss_closed_forms() -> Outcome {
    let half = bce_per_class(&to_matrix(&[vec![1.0]]), &to_matrix(&[vec![0.5]])).map_err(|e| e.to_string())?;
    let v = half.matrix().get(0, 0);
    ensure(v == std::f64::consts::LN_2, || format!("bce(1, 0.5) = {v}"))?;
    let perfect = bce_per_class(&to_matrix(&[vec![1.0, 0.0]]), &to_matrix(&[vec![1.0 - 1e-12, 1e-12]]))
        .map_err(|e| e.to_string())?;
    let worst = perfect.matrix().data().iter().fold(0.0f64, |a, &b| a.max(b));
    ensure(worst <= 2e-12, || format!("perfect prediction loss {worst:e}"))?;
    let mut s = Stream::new(3);
    let mut err: f64 = 0.0;
    for _ in 0..50 {
        let l = s.matrix(8, 4, 0.0, 3.0);
        let w = s.matrix(8, 4, 0.0, 1.0);
        let y = s.labels(8, 4);
        let lm = LossMatrix::new(to_matrix(&l)).map_err(|e| e.to_string())?;
        let wm = WeightMatrix::new(to_matrix(&w)).map_err(|e| e.to_string())?;
        let got = weighted_train_loss(&wm, &lm).map_err(|e| e.to_string())?;
        err = err.max((got - weighted_mean(&w, &l)).abs());
        let stats = class_stats(&to_matrix(&y)).map_err(|e| e.to_string())?;
        let got = inv_freq_meta_loss(&lm, &stats).map_err(|e| e.to_string())?;
        err = err.max((got - inv_freq(&l, &y)).abs());
        let p = s.matrix(8, 4, 0.01, 0.99);
        let got = bce_per_class(&to_matrix(&y), &to_matrix(&p)).map_err(|e| e.to_string())?;
        for (a, b) in got.matrix().data().iter().zip(bce(&y, &p).iter().flatten()) {
            err = err.max((a - b).abs());
        }
    }
    ensure(err <= 1e-12, || format!("oracle mismatch {err:e}"))?;
    Ok(format!("bce(1, 0.5) exact, perfect loss {worst:.1e}, oracle mismatch {err:.1e} on 50 random 8x4 cases"))
}

fn recall_matches_enumeration() -> Outcome {
    let t = Instant::now();
    let mut s = Stream::new(4242);
    let mut checks = 0;
    for trial in 0..50 {
        let c = 2 + s.below(4);
        let eps = random_episodes(&mut s, c);
        for k in [1, 2, 5] {
            for constraint in Constraint::ALL {
                let got = recall_at_k(&eps, k, constraint).map_err(|e| e.to_string())?;
                let (per, mean) = brute_force(&eps, k, constraint, c);
                let got_per: Vec<Option<f64>> = got.per_class.iter().map(|r| r.recall[0]).collect();
                ensure(got_per == per && got.mean_recall[0] == mean, || {
                    format!("trial {trial}, K={k}, {constraint}: {got_per:?} vs {per:?}")
                })?;
                checks += 1;
            }
        }
    }
    within(t.elapsed(), 5)?;
    Ok(format!("{checks} exact matches over 50 episodes sets, {:.3}s", t.elapsed().as_secs_f64()))
}

fn constraint_contracts() -> Outcome {
    let mut s = Stream::new(1001);
    for i in 0..1000 {
        let c = 2 + s.below(10);
        let scores: Vec<f64> = (0..c).map(|_| s.range(0.0, 1.0)).collect();
        let pick = |k| -> Vec<usize> { apply_constraint(&scores, k, SEMI_THRESHOLD).iter().map(|x| x.0).collect() };
        let (with, semi, none) = (
            pick(Constraint::WithConstraint),
            pick(Constraint::SemiConstraint),
            pick(Constraint::NoConstraint),
        );
        let above: Vec<usize> = (0..c).filter(|&k| scores[k] > 0.9).collect();
        ensure(with.len() == 1 && with == allowed(&scores, Constraint::WithConstraint), || {
            format!("vector {i}: with_constraint emitted {with:?}")
        })?;
        ensure(semi == above, || format!("vector {i}: semi_constraint emitted {semi:?}, expected {above:?}"))?;
        ensure(none.len() == c, || format!("vector {i}: no_constraint emitted {} of {c}", none.len()))?;
        let nested = semi.iter().all(|k| none.contains(k))
            && with.iter().all(|k| none.contains(k))
            && (scores[with[0]] <= SEMI_THRESHOLD || semi.contains(&with[0]));
        ensure(nested, || format!("vector {i}: candidate sets not nested"))?;
    }
    Ok("1000 random score vectors".into())
}

fn fixture_config() -> ExperimentConfig {
    load_experiment(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/headline.json")).unwrap()
}

fn fixture_dataset(cfg: &ExperimentConfig) -> Dataset {
    match &cfg.dataset {
        DatasetSource::Generate(g) => generate(g).unwrap(),
        DatasetSource::Path(_) => panic!("headline fixture generates its dataset"),
    }
}

struct Means {
    mean: f64,
    head: f64,
}

/// Trains one strategy for every fixture seed, one after another, and
/// averages mR@10 (with constraint) and head-class R@10.
fn headline_means(cfg: &ExperimentConfig, ds: &Dataset, strategy: Strategy) -> Result<Means, String> {
    let (pool, test) = split_test_scenes(ds, cfg.eval.test_fraction, cfg.eval.split_seed).map_err(|e| e.to_string())?;
    let spec = cfg.eval.spec();
    let (mut mean, mut head) = (0.0, 0.0);
    for &seed in &cfg.seeds {
        let classifier = cfg.classifier(ds.dim(), ds.num_classes(), seed);
        let weightnet = cfg.weightnet(ds.num_classes(), &cfg.weightnet.hidden_sizes, seed);
        let mut tcfg = cfg.trainer.clone();
        tcfg.strategy = strategy;
        tcfg.seed = seed;
        let (_, report, _) = run(ds, &pool, &test, &classifier, &weightnet, &tcfg, &spec).map_err(|e| e.to_string())?;
        let row = report.row(Constraint::WithConstraint, 10).ok_or("missing mR@10 row")?;
        mean += row.mean_recall;
        head += row.head_recall.ok_or("no head classes in test split")?;
    }
    let n = cfg.seeds.len() as f64;
    Ok(Means {
        mean: mean / n,
        head: head / n,
    })
}

struct Headline {
    ml: Means,
    scalar: Means,
    plain: Means,
    elapsed: Duration,
}

fn headline_runs() -> Result<Headline, String> {
    let t = Instant::now();
    let cfg = fixture_config();
    let ds = fixture_dataset(&cfg);
    let ml = headline_means(&cfg, &ds, Strategy::MlMwn)?;
    let scalar = headline_means(&cfg, &ds, Strategy::MwnetScalar)?;
    let plain = headline_means(&cfg, &ds, Strategy::Unweighted)?;
    Ok(Headline {
        ml,
        scalar,
        plain,
        elapsed: t.elapsed(),
    })
}

fn headline_gain(h: &Headline) -> Outcome {
    let gain = 100.0 * (h.ml.mean - h.plain.mean);
    let head_drop = 100.0 * (h.plain.head - h.ml.head);
    let detail = format!(
        "mR@10 ml_mwn {:.4} vs unweighted {:.4} ({gain:+.2} pts, need >= +5); head R@10 {:.4} vs {:.4} ({:+.2} pts, need >= -2); {:.0}s",
        h.ml.mean,
        h.plain.mean,
        h.ml.head,
        h.plain.head,
        -head_drop,
        h.elapsed.as_secs_f64()
    );
    within(h.elapsed, 600).map_err(|e| format!("{detail}; {e}"))?;
    ensure(gain >= 5.0 && head_drop <= 2.0, || detail.clone())?;
    Ok(detail)
}

fn headline_ordering(h: &Headline) -> Outcome {
    let detail = format!(
        "mR@10 ml_mwn {:.4}, mwnet_scalar {:.4}, unweighted {:.4}",
        h.ml.mean, h.scalar.mean, h.plain.mean
    );
    ensure(h.ml.mean >= h.scalar.mean && h.scalar.mean >= h.plain.mean, || detail.clone())?;
    Ok(detail)
}

fn imbalance_generator() -> Outcome {
    let cfg = fixture_config();
    let ds = fixture_dataset(&cfg);
    let counts: Vec<usize> = (0..ds.num_classes())
        .map(|k| (0..ds.len()).filter(|&i| ds.labels.get(i, k) > 0.5).count())
        .collect();
    let measured = *counts.iter().max().unwrap() as f64 / *counts.iter().min().unwrap() as f64;
    ensure((90.0..=110.0).contains(&measured), || format!("measured ratio {measured}"))?;
    let lib = imbalance_ratio(&ds.labels).map_err(|e| e.to_string())?;
    ensure(lib == measured, || format!("library ratio {lib} vs counted {measured}"))?;
    let fixture = imbalance_ratio_of_counts(&[3218, 1]).map_err(|e| e.to_string())?;
    ensure(fixture == 3218.0, || format!("[3218, 1] gave {fixture}"))?;
    Ok(format!("target 100 measured {measured:.2}; [3218, 1] gives {fixture}"))
}

const SMALL: &str = r#"{
  "dataset": { "generate": { "num_classes": 6, "dim": 8, "num_instances": 400, "target_ir": 10.0, "cooccur_p": 0.3, "seed": 1 } },
  "classifier": { "hidden_sizes": [16] },
  "weightnet": { "hidden_sizes": [10] },
  "trainer": { "alpha": 5.0, "beta": 0.03, "batch_size": 32, "epochs": 3 },
  "eval": { "k_values": [1, 5], "chart": false },
  "seeds": [7]
}"#;

fn deterministic_training() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_path = tmp.path().join("c.json");
    std::fs::write(&cfg_path, SMALL).map_err(|e| e.to_string())?;
    let cfg = load_experiment(&cfg_path).map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        cmd_train(&cfg, out, Some(Strategy::MlMwn), true).map_err(|e| e.to_string())?;
    }
    for f in ["metrics.json", "history.csv"] {
        let x = std::fs::read(a.join("runs/ml_mwn/7").join(f)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join("runs/ml_mwn/7").join(f)).map_err(|e| e.to_string())?;
        ensure(x == y, || format!("{f} differs between runs"))?;
    }
    Ok("metrics.json and history.csv bit-identical across two runs".into())
}

fn dataset_round_trip() -> Outcome {
    let ds = fixture_dataset(&fixture_config());
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    save(&ds, tmp.path()).map_err(|e| e.to_string())?;
    let back = load(tmp.path()).map_err(|e| e.to_string())?;
    let same_bits = back.features.data().iter().zip(ds.features.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(back == ds && same_bits, || "reloaded dataset differs".into())?;
    let mut files = 0;
    for entry in std::fs::read_dir(tmp.path()).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        if path.extension().is_none_or(|e| e != "bin") {
            continue;
        }
        let orig = std::fs::read(&path).map_err(|e| e.to_string())?;
        let mut bytes = orig.clone();
        let at = bytes.len() / 3;
        bytes[at] = bytes[at].wrapping_add(1);
        std::fs::write(&path, &bytes).map_err(|e| e.to_string())?;
        let detected = load(tmp.path()).is_err();
        std::fs::write(&path, &orig).map_err(|e| e.to_string())?;
        ensure(detected, || format!("single-byte change in {} not detected", path.display()))?;
        files += 1;
    }
    ensure(files > 0, || "no binary payloads written".into())?;
    Ok(format!("bit-identical reload; corruption detected in {files} payload files"))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into());
        Err(format!("panic: {msg}"))
    })
}

#[test]
fn acceptance() {
    // one set of training runs feeds both headline criteria
    let h: Result<Headline, String> =
        catch_unwind(headline_runs).unwrap_or_else(|_| Err("panic during headline runs".into()));
    let criteria: Vec<(&str, Outcome)> = vec![
        ("1 hypergradient vs finite differences", guarded(hypergradient_matches_finite_differences)),
        ("2 meta-step descent", guarded(meta_step_descends)),
        ("3 loss closed forms", guarded(loss_closed_forms)),
        ("4 recall vs enumeration oracle", guarded(recall_matches_enumeration)),
        ("5 constraint contracts", guarded(constraint_contracts)),
        ("6 headline tail gain, head kept", h.as_ref().map_err(Clone::clone).and_then(headline_gain)),
        ("7 strategy ordering", h.as_ref().map_err(Clone::clone).and_then(headline_ordering)),
        ("8 imbalance generator", guarded(imbalance_generator)),
        ("9 deterministic training", guarded(deterministic_training)),
        ("10 dataset round trip", guarded(dataset_round_trip)),
    ];
    let mut out = std::io::stdout().lock();
    let mut failed = Vec::new();
    for (name, outcome) in &criteria {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed.push(*name);
                ("FAIL", d)
            }
        };
        let _ = writeln!(out, "acceptance {tag} [{name}] {detail}");
    }
    let _ = out.flush();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
