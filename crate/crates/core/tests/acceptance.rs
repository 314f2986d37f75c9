//! One pass/fail line per headline criterion. Exits non-zero if any fails.

use std::time::{Duration, Instant};

use ndarray::{Array2, Array3};
use portrait_core::dataset::{hair_verdict, hair_luminance, split_point, PairedSample, ToyDatasetSpec};
use portrait_core::discriminator::{Discriminator, DiscriminatorConfig};
use portrait_core::embeddings::{cosine, train_embeddings, AttributeBagCorpus, SkipGramConfig};
use portrait_core::generator::{FusionMode, Generator, GeneratorConfig};
use portrait_core::losses::{adv_loss_d, adv_loss_g, rho, LossWeights};
use portrait_core::metrics::{
    affordance_eval, attribute_fscore, frechet_distance, inception_score, random_baseline, EvalPhotos,
};
use portrait_core::nn::gradcheck::check_gradients;
use portrait_core::nn::Params;
use portrait_core::training::{
    denormalize, discriminator_objective, generator_objective, normalize, train, train_epoch, Example, ModelState,
    TrainConfig,
};
use portrait_core::checkpoint::{load_checkpoint, save_checkpoint};
use portrait_core::{AttributeSchema, AttributeSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(name: &str, started: Instant, outcome: Result<Outcome, String>) -> bool {
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(o) => {
            println!("{} {name} ({secs:.1}s): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            o.pass
        }
        Err(e) => {
            println!("FAIL {name} ({secs:.1}s): error: {e}");
            false
        }
    }
}

fn within(started: Instant, limit: Duration) -> bool {
    started.elapsed() < limit
}

fn metric_oracles() -> Result<Outcome, String> {
    let t = Instant::now();
    let x = Array2::from_shape_vec((5, 3), vec![0.3, -1.0, 2.0, 1.1, 0.4, -0.7, 0.0, 0.9, 1.5, -0.2, 2.2, 0.1, 0.8, -1.3, 0.6])
        .unwrap();
    let same = frechet_distance(&x, &x).map_err(|e| e.to_string())?;
    // sample variance 1 each, means 0 and 1
    let a = Array2::from_shape_vec((2, 1), vec![-1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt()]).unwrap();
    let b = &a + 1.0;
    let hand = frechet_distance(&a, &b).map_err(|e| e.to_string())?;
    let uniform = inception_score(&Array2::from_elem((40, 5), 0.2), 10).map_err(|e| e.to_string())?;
    let onehot = inception_score(&ndarray::array![[1.0, 0.0], [0.0, 1.0]], 1).map_err(|e| e.to_string())?;
    let pass = same <= 1e-8
        && (hand - 1.0).abs() <= 1e-6
        && (uniform.is_mean - 1.0).abs() <= 1e-9
        && uniform.is_kl_mean.abs() <= 1e-12
        && (onehot.is_mean - 2.0).abs() <= 1e-6
        && within(t, Duration::from_secs(1));
    Ok(Outcome {
        pass,
        detail: format!(
            "fid(identical)={same:.1e} fid(hand)={hand:.9} is(uniform)={:.12} kl={:.1e} is(one-hot)={:.9}",
            uniform.is_mean, uniform.is_kl_mean, onehot.is_mean
        ),
    })
}

fn loss_hand_values() -> Result<Outcome, String> {
    let e = std::f64::consts::E;
    let g = adv_loss_g(&[1.0 / e]).map_err(|e| e.to_string())?;
    let d = adv_loss_d(&[e.powi(-2)], &[1.0 / e]).map_err(|e| e.to_string())?;
    let mut worst_rho: f64 = 0.0;
    for k in [1usize, 4, 6, 82] {
        let mut t = vec![0.0; k];
        t[0] = 1.0;
        let r = rho(&vec![0.5; k], &t).map_err(|e| e.to_string())?;
        worst_rho = worst_rho.max((r - k as f64 * 2f64.ln()).abs());
    }
    let pass = (g - 1.0).abs() <= 1e-9 && (d + 1.0).abs() <= 1e-9 && worst_rho <= 1e-9;
    Ok(Outcome { pass, detail: format!("adv_g={g:.12} adv_d={d:.12} max|rho−K·ln2|={worst_rho:.1e}") })
}

fn micro_batch(seed: u64) -> Vec<Example<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = |rng: &mut ChaCha8Rng| Array3::from_shape_fn((3, 2, 2), |_| rng.gen_range(-0.9..0.9));
    [(0usize, 1usize), (1, 0)]
        .iter()
        .map(|&(a, b)| {
            let mut target = ndarray::Array1::zeros(4);
            target[a] = 1.0;
            target[2 + b] = 1.0;
            Example { photo: img(&mut rng), portrait: img(&mut rng), selection: vec![Some(a), Some(b)], target }
        })
        .collect()
}

fn gradient_verification() -> Result<Outcome, String> {
    let t = Instant::now();
    let g_cfg = GeneratorConfig {
        image_size: 2,
        channels: 3,
        depth: 1,
        base_filters: 2,
        hidden_dim: 4,
        embedding_dim: 3,
        attribute_blocks: vec![2, 2],
        fusion: FusionMode::Bottleneck,
        leaky_slope: 0.2,
    };
    let d_cfg =
        DiscriminatorConfig { image_size: 2, channels: 3, blocks: 1, base_filters: 2, hidden: 4, slots: 4, leaky_slope: 0.2 };
    let g = Generator::<f64>::new(g_cfg, 11).map_err(|e| e.to_string())?;
    let d = Discriminator::<f64>::new(d_cfg, 12).map_err(|e| e.to_string())?;
    let batch = micro_batch(13);
    let w = LossWeights::default();
    let h = 1e-6;

    let (_, g_grad) = generator_objective(&g, &d, &batch, &w).map_err(|e| e.to_string())?;
    let g_check = check_gradients(&g, &g_grad, h, |p| generator_objective(p, &d, &batch, &w).unwrap().0.total);
    let (_, d_grad) = discriminator_objective(&g, &d, &batch, &w, false).map_err(|e| e.to_string())?;
    let d_check = check_gradients(&d, &d_grad, h, |p| discriminator_objective(&g, p, &batch, &w, false).unwrap().0.total);
    let (_, d_grad_f) = discriminator_objective(&g, &d, &batch, &w, true).map_err(|e| e.to_string())?;
    let d_check_f =
        check_gradients(&d, &d_grad_f, h, |p| discriminator_objective(&g, p, &batch, &w, true).unwrap().0.total);

    let names: Vec<String> = g_grad.named_tensors("").into_iter().map(|(n, _)| n).collect();
    let covers = ["w_h", "w_v", "bias", "embeddings"].iter().all(|k| names.iter().any(|n| n.contains(k)));
    let worst = g_check.max_rel_error.max(d_check.max_rel_error).max(d_check_f.max_rel_error);
    let pass = worst < 1e-4 && covers && within(t, Duration::from_secs(30));
    Ok(Outcome {
        pass,
        detail: format!(
            "{} G entries (max rel {:.1e} at {}), {} D entries (max rel {:.1e}), fused+embedding tensors covered: {covers}",
            g_check.checked,
            g_check.max_rel_error,
            g_check.worst,
            d_check.checked + d_check_f.checked,
            d_check.max_rel_error.max(d_check_f.max_rel_error)
        ),
    })
}

struct ToyRun {
    state: ModelState,
    schema: AttributeSchema,
    test: Vec<PairedSample>,
}

fn train_toy() -> Result<ToyRun, String> {
    let spec = ToyDatasetSpec::new(2000, 7);
    let all = spec.paired_samples();
    let (train_set, test) = all.split_at(split_point(all.len()));
    let schema = AttributeSchema::toy();
    let config = TrainConfig::toy();
    let mut state = ModelState::init(&config, &schema, None).map_err(|e| e.to_string())?;
    train(&mut state, train_set, &schema, &config, None, |_| {}).map_err(|e| e.to_string())?;
    Ok(ToyRun { state, schema, test: test.to_vec() })
}

fn toy_grounding(run: &ToyRun, started: Instant) -> Result<Outcome, String> {
    let g = &run.state.generator;
    let photos = EvalPhotos::from_samples(&run.test);
    let generated = photos
        .photos
        .iter()
        .zip(&photos.base)
        .map(|(x, a)| g.generate(x, a, &run.schema))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let f = attribute_fscore(&generated, &photos.base, &run.state.discriminator, &run.schema).map_err(|e| e.to_string())?;
    let random = random_baseline(&photos.base, &run.schema, 5, 50).map_err(|e| e.to_string())?;
    let random_ok = random
        .per_type
        .iter()
        .zip(run.schema.types())
        .all(|(s, spec)| s.f1.is_some_and(|v| (v - 1.0 / spec.values.len() as f64).abs() <= 0.05));
    let per = |s: &portrait_core::metrics::FScores| {
        s.per_type.iter().map(|t| format!("{}={:.3}", t.name, t.f1.unwrap_or(f64::NAN))).collect::<Vec<_>>().join(" ")
    };
    let total = started.elapsed();
    let pass = f.average >= 0.80 && random_ok && total <= Duration::from_secs(20 * 60);
    Ok(Outcome {
        pass,
        detail: format!(
            "average F {:.3} ({}) vs random {:.3} ({}), {} test portraits, {} epochs in {:.0}s",
            f.average,
            per(&f),
            random.average,
            per(&random),
            generated.len(),
            TrainConfig::toy().epochs,
            total.as_secs_f64()
        ),
    })
}

fn held_out() -> Vec<PairedSample> {
    ToyDatasetSpec::new(200, 90_001).paired_samples()
}

fn hair_coherence(run: &ToyRun, held: &[PairedSample]) -> Result<Outcome, String> {
    let g = &run.state.generator;
    let mut flipped = 0;
    for s in held {
        let x = normalize(&s.photo);
        let geom = s.geometry.as_ref().ok_or("held-out sample without geometry")?;
        let verdict = |value: &str| -> Result<Option<&'static str>, String> {
            let mut attrs = s.attrs.clone();
            attrs.insert("HairColor", value);
            let y = g.generate(&x, &attrs, &run.schema).map_err(|e| e.to_string())?;
            Ok(hair_verdict(hair_luminance(&denormalize(&y), geom)))
        };
        if verdict("Blond")? == Some("Blond") && verdict("Black")? == Some("Black") {
            flipped += 1;
        }
    }
    let rate = flipped as f64 / held.len() as f64;
    Ok(Outcome { pass: rate >= 0.90, detail: format!("{flipped}/{} held-out photos flip ({:.1}%)", held.len(), 100.0 * rate) })
}

fn affordance_direction(run: &ToyRun, held: &[PairedSample]) -> Result<Outcome, String> {
    let consistent = AttributeSet::new().with("Mouth", "Smile").with("Background", "Bright");
    let contradictory = AttributeSet::new().with("Mouth", "Smile").with("Background", "Dark");
    let photos = EvalPhotos::from_samples(held);
    let r = affordance_eval(&consistent, &contradictory, &run.state.generator, &run.state.discriminator, &photos, &run.schema, 10)
        .map_err(|e| e.to_string())?;
    let score = |row: &portrait_core::metrics::AffordanceRow, ty: &str| row.reconstruction.get(ty).unwrap_or(f64::NAN);
    let types = ["Mouth", "Background"];
    let pass = types.iter().all(|t| score(&r.a, t) > score(&r.b, t));
    let detail = types
        .iter()
        .map(|t| format!("{t}: Smile+Bright {:.3} vs Smile+Dark {:.3}", score(&r.a, t), score(&r.b, t)))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(Outcome {
        pass,
        detail: format!("{detail}; IS {:.3}/{:.3}, FID {:.3}/{:.3}", r.a.inception.is_mean, r.b.inception.is_mean, r.a.fid, r.b.fid),
    })
}

fn planted_corpus(schema: &AttributeSchema, seed: u64) -> Vec<AttributeSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |rng: &mut ChaCha8Rng, ty: &str, except: &[&str]| -> String {
        let spec = &schema.types()[schema.type_index(ty).unwrap()];
        loop {
            let v = &spec.values[rng.gen_range(0..spec.values.len())];
            if !except.contains(&v.as_str()) {
                return v.clone();
            }
        }
    };
    let mut bags = Vec::new();
    for _ in 0..200 {
        bags.push(
            AttributeSet::new()
                .with("Weather", "Rainy")
                .with("Clothing", "Coat and Jacket")
                .with("Age", pick(&mut rng, "Age", &[]))
                .with("Mood", pick(&mut rng, "Mood", &[])),
        );
    }
    for _ in 0..200 {
        bags.push(
            AttributeSet::new()
                .with("Weather", pick(&mut rng, "Weather", &["Rainy"]))
                .with("Clothing", "Dress")
                .with("Age", pick(&mut rng, "Age", &[]))
                .with("Mood", pick(&mut rng, "Mood", &[])),
        );
    }
    bags
}

fn skipgram_dependency() -> Result<Outcome, String> {
    let t = Instant::now();
    let schema = AttributeSchema::portrait_default();
    let mut wins = 0;
    for run in 0..20u64 {
        let corpus = AttributeBagCorpus::new(&schema, &planted_corpus(&schema, 1000 + run)).map_err(|e| e.to_string())?;
        let table = train_embeddings(&corpus, &SkipGramConfig { epochs: 30, seed: run, ..Default::default() })
            .map_err(|e| e.to_string())?;
        let v = |t: &str, v: &str| table.get(t, v).unwrap().to_vec();
        let rainy = v("Weather", "Rainy");
        if cosine(&rainy, &v("Clothing", "Coat and Jacket")) > cosine(&rainy, &v("Clothing", "Dress")) {
            wins += 1;
        }
    }
    Ok(Outcome { pass: wins >= 19 && within(t, Duration::from_secs(60)), detail: format!("{wins}/20 seeded runs") })
}

fn determinism_and_resume() -> Result<Outcome, String> {
    let data = ToyDatasetSpec::new(24, 3).paired_samples();
    let schema = AttributeSchema::toy();
    let mut config = TrainConfig::toy();
    config.epochs = 3;
    config.checkpoint_every = 1;
    config.model.base_filters = 4;
    config.model.disc_base_filters = 4;
    config.model.hidden_dim = 8;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<Vec<u8>, String> {
        let out = dir.path().join(name);
        let mut state = ModelState::init(&config, &schema, None).map_err(|e| e.to_string())?;
        train(&mut state, &data, &schema, &config, Some(&out), |_| {}).map_err(|e| e.to_string())?;
        std::fs::read(out.join("train_log.jsonl")).map_err(|e| e.to_string())
    };
    let first = run("a")?;
    let second = run("b")?;
    let log: Vec<portrait_core::training::LogRecord> =
        first.split(|&b| b == b'\n').filter(|l| !l.is_empty()).map(|l| serde_json::from_slice(l).unwrap()).collect();

    let ck = load_checkpoint(dir.path().join("a").join("checkpoint-epoch-0002"), Some(&schema)).map_err(|e| e.to_string())?;
    let mut resumed = ck.state;
    let next = train_epoch(&mut resumed, &data, &schema, &ck.manifest.train, |_| {}).map_err(|e| e.to_string())?;
    let expected: Vec<_> = log.iter().filter(|r| r.epoch == 2).copied().collect();
    let resume_ok = !next.is_empty() && next == expected;

    // a save/load round trip reproduces every tensor bitwise
    let round = dir.path().join("round");
    save_checkpoint(&resumed, &ck.manifest.train, &schema, &round).map_err(|e| e.to_string())?;
    let reloaded = load_checkpoint(&round, Some(&schema)).map_err(|e| e.to_string())?;
    let bitwise = reloaded.state == resumed;

    let pass = first == second && !first.is_empty() && resume_ok && bitwise;
    Ok(Outcome {
        pass,
        detail: format!(
            "retrain log identical: {} ({} bytes); resumed epoch-3 losses identical: {resume_ok} ({} steps); checkpoint round trip bitwise: {bitwise}",
            first == second,
            first.len(),
            next.len()
        ),
    })
}

fn main() {
    let mut ok = true;
    let t = Instant::now();
    ok &= report("metric oracles", t, metric_oracles());
    let t = Instant::now();
    ok &= report("loss hand values", t, loss_hand_values());
    let t = Instant::now();
    ok &= report("gradient verification (micro model, f64)", t, gradient_verification());

    let t = Instant::now();
    let run = train_toy();
    match run {
        Ok(run) => {
            ok &= report("toy grounding", t, toy_grounding(&run, t));
            let held = held_out();
            let t = Instant::now();
            ok &= report("single-attribute coherence (hair)", t, hair_coherence(&run, &held));
            let t = Instant::now();
            ok &= report("affordance direction", t, affordance_direction(&run, &held));
        }
        Err(e) => {
            for name in ["toy grounding", "single-attribute coherence (hair)", "affordance direction"] {
                ok &= report(name, t, Err(e.clone()));
            }
        }
    }

    let t = Instant::now();
    ok &= report("skip-gram dependency", t, skipgram_dependency());
    let t = Instant::now();
    ok &= report("determinism and resumption", t, determinism_and_resume());
    if !ok {
        std::process::exit(1);
    }
}
