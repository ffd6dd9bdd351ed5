//! Prints the quantities the testbed constants are tuned against.
//!
//! `cargo run --release -p agla-core --example calibrate [seed] [n]`

use agla_core::bench::{augment, run_bench, BenchConfig};
use agla_core::decoding::{generate, DecoderConfig, Sampler};
use agla_core::masking::Strategy;
use agla_core::numeric::Matrix;
use agla_core::toy::{generate_benchmark, Answer, BenchmarkKind, Testbed, TestbedConfig};
use agla_core::Result;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map_or(Ok(2024), |s| s.parse()).expect("seed");
    let n: usize = args.get(2).map_or(Ok(200), |s| s.parse()).expect("n");
    let tb = Testbed::new(TestbedConfig::default())?;
    let lx = tb.lexicon();
    let lvlm = tb.lvlm()?;
    let c = tb.config().lvlm.clone();

    let records = generate_benchmark(&tb, BenchmarkKind::PopeAdversarial, n, seed)?;
    let (mut negatives, mut flipped, mut cleared, mut positives, mut pos_ok) = (0, 0, 0, 0, 0);
    let mut neg_margin = Vec::new();
    let mut pos_margin = Vec::new();
    let mut masked_distractor = 0;
    for r in &records {
        let (img, gt) = tb.render_scene(r.scene()?)?;
        let y = tb.featurize(&img)?;
        let word = r.prompt.rsplit(' ').next().unwrap();
        let o = tb.object_index(word)?;
        let s = lvlm.object_score(o, &y);
        let prompt = lx.tokenize(&r.prompt)?;
        let aug = augment(&tb, &img, &prompt, Strategy::Pixel, 0)?;
        let sa = lvlm.object_score(o, &aug.features);
        if r.label == Some(Answer::No) {
            negatives += 1;
            neg_margin.push(s.score - c.threshold);
            flipped += usize::from(s.score > c.threshold);
            // zero every patch holding a present object
            let mut z = y.clone();
            for pl in &r.scene()?.placements {
                for &j in &pl.patches {
                    z.row_mut(j).iter_mut().for_each(|v| *v = 0.0);
                }
            }
            cleared += usize::from(lvlm.object_score(o, &z).score < c.threshold);
            let present_patches: Vec<usize> = r.scene()?.placements.iter().flat_map(|p| p.patches.clone()).collect();
            masked_distractor += usize::from(present_patches.iter().all(|&j| aug.features.row(j).iter().all(|v| v.abs() < 1e-3)));
            if negatives <= 6 {
                println!(
                    "neg {:?} gt={gt:?} sim={:.4} ratio={:.4} score={:.4} aug_score={:.4} cor={:?}",
                    r.prompt,
                    aug.similarity.sim,
                    aug.view.spec.ratio,
                    s.score,
                    sa.score,
                    aug.correlation.scores.iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>()
                );
            }
        } else {
            positives += 1;
            pos_margin.push(s.score - c.threshold);
            pos_ok += usize::from(s.score > c.threshold && sa.score > c.threshold - 0.5);
            if positives <= 3 {
                println!(
                    "pos {:?} gt={gt:?} sim={:.4} ratio={:.4} score={:.4} aug_score={:.4}",
                    r.prompt, aug.similarity.sim, aug.view.spec.ratio, s.score, sa.score
                );
            }
        }
    }
    let stats = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        (v[0], v[v.len() / 2], v[v.len() - 1])
    };
    println!("negatives {negatives}: flipped {flipped} ({:.1}%), cleared when distractors zeroed {cleared}, pixel mask covers distractors {masked_distractor}", 100.0 * flipped as f64 / negatives as f64);
    println!("neg margin min/med/max {:?}", stats(&neg_margin));
    println!("pos margin min/med/max {:?} ok {pos_ok}/{positives}", stats(&pos_margin));

    for gamma in [0.0, 0.4, 0.8] {
        let cfg = BenchConfig { gamma, ..BenchConfig::new(BenchmarkKind::PopeAdversarial, n, seed) };
        let out = run_bench(&tb, &cfg)?;
        println!("gamma {gamma}: regular acc {:.4}", out.regular.get("accuracy").unwrap());
    }
    for strategy in Strategy::ALL {
        let cfg = BenchConfig { strategy, ..BenchConfig::new(BenchmarkKind::PopeAdversarial, n, seed) };
        let out = run_bench(&tb, &cfg)?;
        println!("{strategy}: {}", out.report().to_json());
    }
    let samplers = [
        Sampler::TopP(0.7),
        Sampler::TopK(50),
        Sampler::Temperature(0.5),
        Sampler::Composed { filter: agla_core::decoding::Filter::TopP(0.7), temperature: 0.5 },
        Sampler::Composed { filter: agla_core::decoding::Filter::TopK(50), temperature: 0.5 },
    ];
    for s in samplers {
        let cfg = BenchConfig {
            decoder: DecoderConfig { sampler: s, ..DecoderConfig::default() },
            ..BenchConfig::new(BenchmarkKind::PopeAdversarial, n, seed)
        };
        println!("{}: {}", s.label(), run_bench(&tb, &cfg)?.report().to_json());
    }
    let cfg = BenchConfig { decoder: DecoderConfig::greedy(), ..BenchConfig::new(BenchmarkKind::PopeAdversarial, n, seed) };
    println!("greedy: {}", run_bench(&tb, &cfg)?.report().to_json());

    let cap = run_bench(&tb, &BenchConfig::new(BenchmarkKind::Caption, 50, seed))?;
    println!("caption: {}", cap.report().to_json());

    // caption example: dog and sofa present, frisbee and cat associated
    let spec = tb.scene(&[("dog", 2), ("sofa", 13)], 5);
    let (img, _) = tb.render_scene(&spec)?;
    let y = tb.featurize(&img)?;
    let prompt = lx.tokenize("describe the image")?;
    let aug = augment(&tb, &img, &prompt, Strategy::Pixel, 0)?;
    let greedy = DecoderConfig { alpha: 2.0, beta: 0.5, sampler: Sampler::Greedy, max_len: 16, seed: 0 };
    let a = generate(&lvlm, &y, Some(&aug.features), &prompt, &greedy)?;
    let r = generate(&lvlm, &y, None::<&Matrix>, &prompt, &greedy)?;
    println!("caption agla {:?} regular {:?} sim {:.4}", lx.detokenize(&a.tokens), lx.detokenize(&r.tokens), aug.similarity.sim);

    let spec = tb.scene(&[("cat", 5), ("car", 10)], 1);
    let (img, _) = tb.render_scene(&spec)?;
    let y = tb.featurize(&img)?;
    let (_, cor) = tb.matching_model().match_prompt(&lx.tokenize("is there a cat")?, &y)?;
    println!("patch-5 cor argmax {:?}", agla_core::numeric::argmax_ties(&cor.scores)?);
    Ok(())
}
