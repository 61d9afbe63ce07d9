//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero if any fail.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shorttopic::baselines::{bow_matrix, lda_gibbs, nmf, LdaConfig, NmfConfig};
use shorttopic::corpus::{preprocess, BowVector, Corpus, CorpusOptions, PreprocessOptions, Vocabulary};
use shorttopic::encoder::BaseEncoder;
use shorttopic::evaluation::{c_v, classify, irbo, rbo, ClassifierKind, ClassifyConfig, TopicSet, DEFAULT_WINDOW};
use shorttopic::extension::{extend_corpus, ExtendOptions, ExtensionCache, GenerationParams, MockLexiconGenerator};
use shorttopic::nn::ParamSet;
use shorttopic::pipeline::{
    run_pipeline, train_model, training_data, CorpusSettings, EncoderSettings, ModelSettings, RunConfig,
    TrainerSettings, MODEL_DIR,
};
use shorttopic::pvtm::{
    kl_divergence, train, DocNoise, GaussianPosterior, PriorKind, PriorParams, PvtmModel, TrainConfig, Variant,
    LOG_VAR_MAX, LOG_VAR_MIN, TOPICS_FILE,
};
use shorttopic::synthetic::{news_headlines, news_topics};

use common::*;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, bad: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

fn toy_model() -> PvtmModel {
    let vocab = Vocabulary::from_tokens(["apple", "banana", "cherry", "grape", "melon"]);
    let config = TrainConfig {
        variant: Variant::S2S,
        num_topics: 2,
        hidden_size: 6,
        num_virtual_tokens: 3,
        seed: 11,
        ..TrainConfig::default()
    };
    let mut model = PvtmModel::new(config, vocab, Some(Arc::new(toy_encoder()))).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    model
        .prefix
        .as_mut()
        .unwrap()
        .visit_mut(&mut |_, s| s.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0)));
    model
}

/// Worst relative error over a random subset of coordinates of one parameter group.
fn worst_fd_error(
    model: &PvtmModel,
    analytic: &[f64],
    picks: &[usize],
    bump_group: &dyn Fn(&mut PvtmModel, usize, f64),
    loss: &dyn Fn(&PvtmModel) -> f64,
) -> f64 {
    let h = 1e-5;
    picks
        .iter()
        .map(|&idx| {
            let at = |delta: f64| {
                let mut m = model.clone();
                bump_group(&mut m, idx, delta);
                loss(&m)
            };
            rel_err(analytic[idx], (at(h) - at(-h)) / (2.0 * h))
        })
        .fold(0.0, f64::max)
}

fn bump_flat(visit: &mut dyn FnMut(&mut dyn FnMut(&str, &mut [f64])), idx: usize, delta: f64) {
    let mut k = 0;
    visit(&mut |_, s| {
        if (k..k + s.len()).contains(&idx) {
            s[idx - k] += delta;
        }
        k += s.len();
    });
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let model = toy_model();
    let texts = ["apple banana apple", "grape melon cherry grape"];
    let targets = vec![
        BowVector::from_entries(5, vec![(0, 2), (1, 1)]),
        BowVector::from_entries(5, vec![(2, 1), (3, 2), (4, 1)]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise: Vec<DocNoise> = (0..2).map(|_| DocNoise::sample(&mut rng, 2, 6, 0.2)).collect();
    let (_, grad) = model.elbo_with_grad(&texts, &targets, &noise).unwrap();
    let loss = |m: &PvtmModel| m.elbo(&texts, &targets, &noise).unwrap().loss;

    let mut vae = Vec::new();
    grad.vae.visit(&mut |_, s| vae.extend_from_slice(s));
    let mut prefix = Vec::new();
    for l in grad.prefix.as_ref().unwrap() {
        prefix.extend(l.key.iter());
        prefix.extend(l.value.iter());
    }
    let mut pick = |n: usize| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.truncate(60.min(n));
        idx
    };
    let (vae_picks, prefix_picks) = (pick(vae.len()), pick(prefix.len()));
    let vae_err = worst_fd_error(
        &model,
        &vae,
        &vae_picks,
        &|m, i, d| bump_flat(&mut |f| m.params.visit_mut(f), i, d),
        &loss,
    );
    let prefix_err = worst_fd_error(
        &model,
        &prefix,
        &prefix_picks,
        &|m, i, d| bump_flat(&mut |f| m.prefix.as_mut().unwrap().visit_mut(f), i, d),
        &loss,
    );
    let elapsed = start.elapsed();
    let msg = format!(
        "gradient check: worst relative error {vae_err:.2e} (MLPs + beta_logits), {prefix_err:.2e} (prefix) in {:.1}s",
        elapsed.as_secs_f64()
    );
    check(
        vae_err <= 1e-3 && prefix_err <= 1e-3 && elapsed < Duration::from_secs(60),
        msg.clone(),
        msg,
    )
}

fn elbo_structure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut min_kl = f64::INFINITY;
    for _ in 0..1000 {
        let k = rng.random_range(1..30);
        let prior = PriorParams::new(PriorKind::LaplaceDirichlet, k);
        let post = GaussianPosterior {
            mu: Array1::from_shape_fn(k, |_| rng.random_range(-20.0..20.0)),
            log_var: Array1::from_shape_fn(k, |_| rng.random_range(LOG_VAR_MIN..LOG_VAR_MAX)),
        };
        min_kl = min_kl.min(kl_divergence(&post, &prior));
    }
    let prior = PriorParams::new(PriorKind::LaplaceDirichlet, 7);
    let at_prior = kl_divergence(
        &GaussianPosterior {
            mu: prior.mu0.clone(),
            log_var: prior.log_var0.clone(),
        },
        &prior,
    );
    let (_, data) = planted(3, 200, 0);
    let encoder = Arc::new(BaseEncoder::load("hashformer-mini").unwrap());
    let config = TrainConfig {
        variant: Variant::S2S,
        num_topics: 3,
        ..TrainConfig::default()
    };
    let (_, log) = train(&data, Some(encoder), &config).unwrap();
    let (first, last) = (log.first_loss().unwrap(), log.final_loss().unwrap());
    let msg = format!(
        "ELBO structure: min KL {min_kl:.3e} over 1000 posteriors, KL at prior {at_prior:e}, loss epoch 1 {first:.3} -> epoch {} {last:.3}",
        log.epochs.len()
    );
    check(
        min_kl >= -1e-9 && at_prior == 0.0 && log.epochs.len() == 100 && last < first,
        msg.clone(),
        msg,
    )
}

fn planted_recovery() -> Outcome {
    let start = Instant::now();
    let encoder = Arc::new(BaseEncoder::load("hashformer-mini").unwrap());
    let mut nmis = Vec::new();
    let mut purities = Vec::new();
    for seed in 0..3u64 {
        let (_, data) = planted(3, 200, seed);
        let labels = label_ids(&data.labels);
        let lda = lda_gibbs(
            &data.targets,
            &LdaConfig {
                num_topics: 3,
                seed,
                ..LdaConfig::default()
            },
        )
        .unwrap();
        let clusters: Vec<usize> = lda.doc_topic.rows().into_iter().map(|r| argmax(&r.to_owned())).collect();
        nmis.push(nmi(&clusters, &labels));

        let config = TrainConfig {
            variant: Variant::S2S,
            num_topics: 3,
            seed,
            ..TrainConfig::default()
        };
        let (model, _) = train(&data, Some(encoder.clone()), &config).unwrap();
        let clusters: Vec<usize> = model.doc_topics(&data.inputs).unwrap().iter().map(argmax).collect();
        purities.push(purity(&clusters, &labels));
    }
    let elapsed = start.elapsed();
    let msg = format!(
        "planted recovery: LDA NMI {nmis:.3?}, PVTM-S2S purity {purities:.3?} in {:.0}s",
        elapsed.as_secs_f64()
    );
    check(
        nmis.iter().all(|&v| v >= 0.9) && purities.iter().all(|&v| v >= 0.9) && elapsed < Duration::from_secs(300),
        msg.clone(),
        msg,
    )
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|w| w.to_string()).collect()
}

fn metric_oracles() -> Outcome {
    let hand = (0.1 * 1.0 + 0.09 * 0.5) / 0.19;
    let r = rbo(&["a", "b"], &["a", "c"], 0.9).unwrap();
    let pair = TopicSet::new(vec![words(&["a", "b"]), words(&["a", "c"])]);
    let ir_pair = irbo(&pair, 0.9).unwrap();
    let disjoint = TopicSet::new(vec![words(&["a", "b", "c"]), words(&["d", "e", "f"]), words(&["g", "h", "i"])]);
    let identical = TopicSet::new(vec![words(&["a", "b", "c"]); 3]);
    let (ir_disjoint, ir_identical) = (irbo(&disjoint, 0.9).unwrap(), irbo(&identical, 0.9).unwrap());

    let mut docs: Vec<Vec<String>> = vec![words(&["red", "green", "blue"]); 20];
    for w in ["cat", "dog", "fox"] {
        docs.extend(vec![words(&[w]); 20]);
    }
    let topics = TopicSet::new(vec![words(&["red", "green", "blue"]), words(&["cat", "dog", "fox"])]);
    let cv = c_v(&topics, &docs, DEFAULT_WINDOW).unwrap().per_topic;

    let msg = format!(
        "metric oracles: rbo {r:.7} vs hand {hand:.7}, irbo pair {ir_pair:.5}, disjoint {ir_disjoint}, identical {ir_identical}, C_V co-occurring {:.4} > never co-occurring {:.4}",
        cv[0], cv[1]
    );
    check(
        (r - hand).abs() <= 1e-6
            && (ir_pair - (1.0 - hand)).abs() <= 1e-6
            && ir_disjoint == 1.0
            && ir_identical == 0.0
            && cv[0] > cv[1]
            && (cv[0] - 1.0).abs() < 1e-9,
        msg.clone(),
        msg,
    )
}

const ABLATION_EPOCHS: usize = 600;

fn ablation_direction() -> Outcome {
    let corpus = Corpus::build(news_headlines(500, 2024), &CorpusOptions::default()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let docs: Vec<(String, String)> = corpus.documents.iter().map(|d| (d.id.clone(), d.raw_text.clone())).collect();
    let report = extend_corpus(
        &docs,
        &MockLexiconGenerator::default(),
        &GenerationParams::default(),
        &ExtensionCache::new(tmp.path().join("cache")),
        &ExtendOptions::default(),
    )
    .unwrap();
    let opts = PreprocessOptions::default();
    let extended: Vec<Vec<String>> = report.records.iter().map(|r| preprocess(&r.long_text, &opts)).collect();
    let short: Vec<Vec<String>> = corpus.documents.iter().map(|d| d.tokens.clone()).collect();

    let planted_topics: Vec<Vec<String>> = news_topics().values().map(|w| w[..10].to_vec()).collect();
    let n = planted_topics.len();
    let mixed: Vec<Vec<String>> =
        (0..n).map(|t| (0..10).map(|i| planted_topics[(t + i) % n][i].clone()).collect()).collect();
    let true_cv = c_v(&TopicSet::new(planted_topics), &extended, DEFAULT_WINDOW).unwrap().cv;
    let mixed_cv = c_v(&TopicSet::new(mixed), &extended, DEFAULT_WINDOW).unwrap().cv;
    println!("  note: extended-text reference scores planted topics {true_cv:.4} vs cross-topic mixtures {mixed_cv:.4}");

    let trainer = TrainerSettings {
        epochs: ABLATION_EPOCHS,
        ..TrainerSettings::default()
    };
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let mut cvs = Vec::new();
        for variant in [Variant::S2S, Variant::S2L] {
            let model = ModelSettings {
                variant,
                num_topics: n,
                ..ModelSettings::default()
            };
            let data = training_data(&corpus, Some(&report.records), &model, &CorpusSettings::default()).unwrap();
            let out = tmp.path().join(format!("{variant}-{seed}"));
            let trained = train_model(&data, &model, &trainer, &EncoderSettings::default(), seed, &out, 10).unwrap();
            let set = TopicSet::new(trained.topics);
            let cv = c_v(&set, &extended, DEFAULT_WINDOW).unwrap().cv;
            let cv_short = c_v(&set, &short, DEFAULT_WINDOW).unwrap().cv;
            println!("  note: seed {seed} {variant}: C_V {cv:.4} (short-text reference {cv_short:.4})");
            cvs.push(cv);
        }
        if cvs[1] >= cvs[0] {
            wins += 1;
        }
        rows.push(format!("seed {seed}: S2S {:.4} S2L {:.4}", cvs[0], cvs[1]));
    }
    let msg = format!("ablation direction: S2L >= S2S in {wins}/3 seeds ({})", rows.join(", "));
    check(wins >= 2, msg.clone(), msg)
}

fn frozen_base_and_determinism() -> Outcome {
    let (_, data) = planted(3, 60, 1);
    let encoder = Arc::new(BaseEncoder::load("hashformer-mini").unwrap());
    let before = encoder.checksum();
    let config = TrainConfig {
        variant: Variant::S2S,
        num_topics: 3,
        epochs: 10,
        ..TrainConfig::default()
    };
    train(&data, Some(encoder.clone()), &config).unwrap();
    let unchanged = encoder.checksum() == before;

    let tmp = tempfile::tempdir().unwrap();
    let mut tsv = String::new();
    for r in news_headlines(90, 8) {
        tsv.push_str(&format!("{}\t{}\n", r.label.unwrap(), r.text));
    }
    std::fs::write(tmp.path().join("data.tsv"), tsv).unwrap();
    let topics = |out: &str| {
        let value = serde_json::json!({
            "dataset": tmp.path().join("data.tsv"),
            "output_dir": tmp.path().join(out),
            "seed": 11,
            "model": { "variant": "s2l", "num_topics": 6 },
            "trainer": { "epochs": 5, "hidden_size": 32, "batch_size": 32 },
            "encoder": { "num_virtual_tokens": 4 },
            "extension": { "generator": "mock-lexicon", "cache_dir": tmp.path().join(format!("cache-{out}")) },
            "evaluation": { "folds": 3 }
        });
        run_pipeline(&RunConfig::from_json(&value.to_string()).unwrap()).unwrap();
        std::fs::read(tmp.path().join(out).join(MODEL_DIR).join(TOPICS_FILE)).unwrap()
    };
    let (a, b) = (topics("a"), topics("b"));
    let msg = format!(
        "frozen base + determinism: checksum unchanged {unchanged}, topics.txt identical {} ({} bytes)",
        a == b,
        a.len()
    );
    check(unchanged && a == b && !a.is_empty(), msg.clone(), msg)
}

fn classification_harness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
    let x = Array2::from_shape_fn((200, 4), |(i, j)| {
        let base = if j == labels[i] { 1.0 } else { 0.0 };
        base + rng.random_range(-0.05..0.05)
    });
    let lr = ClassifyConfig {
        kind: ClassifierKind::LogisticRegression,
        ..ClassifyConfig::default()
    };
    let separable = classify(&x, &labels, &lr).unwrap().accuracy_mean;

    let noise = Array2::from_shape_fn((400, 6), |_| rng.random::<f64>());
    let mut shuffled: Vec<usize> = (0..400).map(|i| i % 2).collect();
    shuffled.shuffle(&mut rng);
    let chance = classify(&noise, &shuffled, &lr).unwrap().accuracy_mean;

    let (_, data) = planted(3, 150, 2);
    let (_, objective) = nmf(
        &bow_matrix(&data.targets),
        &NmfConfig {
            num_topics: 3,
            iterations: 50,
            seed: 2,
        },
    )
    .unwrap();
    let worst_rise = objective.windows(2).map(|p| p[1] - p[0]).fold(f64::NEG_INFINITY, f64::max);
    let msg = format!(
        "classification harness: separable LR {separable:.4}, shuffled LR {chance:.4}, NMF worst step change {worst_rise:.3e} over {} iterations",
        objective.len()
    );
    check(
        separable >= 0.99 && (chance - 0.5).abs() <= 0.1 && worst_rise <= 1e-9 && objective.len() >= 50,
        msg.clone(),
        msg,
    )
}

fn main() {
    let criteria: [(usize, fn() -> Outcome); 7] = [
        (1, gradient_integrity),
        (2, elbo_structure),
        (3, planted_recovery),
        (4, metric_oracles),
        (5, ablation_direction),
        (6, frozen_base_and_determinism),
        (7, classification_harness),
    ];
    let mut failed = 0;
    for (id, run) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let reason = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {reason}"))
        });
        match outcome {
            Ok(msg) => println!("PASS criterion {id}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {id}: {msg}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
