//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Exits 0 after reporting so the workspace test run stays usable; set
//! `ACCEPTANCE_STRICT=1` to exit 1 when any criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use milgrad::data::{decode_bag, encode_bag, generate_synthetic, PlantedConfig, SlideBag};
use milgrad::eval::{compare_report, mann_whitney_u, roc_auc, MethodAuc, ModelRun};
use milgrad::interpret::{
    heatmap_from_descriptors, max_activation_ascent, slide_attribution, tile_attribution, trace_slides,
    AscentConfig, ContributingTiles, TileRef,
};
use milgrad::model::{min_max_slots, Activation, AggregatorConfig, ExtractorConfig, ModelConfig};
use milgrad::pipeline::{run_experiment, ExperimentConfig, ExperimentOutcome, FEATURE_METHOD, TILE_SCORE_METHOD};
use milgrad::training::{cross_entropy_loss, slide_loss_and_grads};
use milgrad::{Tape, Tensor, Var, WsiClassifier};

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const INSTANCES: u64 = 100;

struct Verdict {
    pass: bool,
    detail: String,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + H;
            let up = f(&xp);
            xp[i] = x[i] - H;
            let down = f(&xp);
            xp[i] = x[i];
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

/// `Σ c_k v_k` on the tape.
fn weighted_sum(tape: &mut Tape, v: Var, c: &[f64]) -> Var {
    let shape = tape.value(v).shape().to_vec();
    let w = tape.constant(Tensor::new(shape, c.to_vec()).unwrap()).unwrap();
    let p = tape.mul(v, w).unwrap();
    tape.sum(p).unwrap()
}

fn random_model(r: &mut ChaCha8Rng, aggregator: AggregatorConfig, content: usize, descriptor: usize) -> WsiClassifier {
    let cfg = ModelConfig {
        content_dim: content,
        descriptor_dim: descriptor,
        classes: 2,
        extractor: ExtractorConfig::Mlp {
            hidden: vec![r.random_range(3..7)],
            output_activation: Activation::Tanh,
        },
        aggregator,
        decision_hidden: vec![5, 4],
        scorer_bias: true,
    };
    let mut model = WsiClassifier::new(cfg, r).unwrap();
    // Random parameters throughout: zero biases put relu inputs exactly on the kink.
    for p in model.params_mut() {
        let v = uniform(r, p.numel(), -0.8, 0.8);
        p.assign(&v).unwrap();
    }
    model
}

fn random_bag(r: &mut ChaCha8Rng, tiles: usize, dim: usize) -> SlideBag {
    SlideBag::from_rows("s", dim, uniform(r, tiles * dim, -1.5, 1.5)).unwrap()
}

fn min_gap(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

/// Largest relative error per check over all instances.
#[derive(Default)]
struct GradChecks {
    names: Vec<&'static str>,
    worst: Vec<f64>,
    count: Vec<usize>,
}

impl GradChecks {
    fn record(&mut self, name: &'static str, err: f64) {
        let i = match self.names.iter().position(|n| *n == name) {
            Some(i) => i,
            None => {
                self.names.push(name);
                self.worst.push(0.0);
                self.count.push(0);
                self.names.len() - 1
            }
        };
        self.worst[i] = self.worst[i].max(err);
        self.count[i] += 1;
    }
}

fn check_instance(seed: u64, checks: &mut GradChecks) {
    let mut r = rng(seed);
    let p = r.random_range(3..8);
    let n = r.random_range(2..6);
    let t = r.random_range(5..10);
    let rr = r.random_range(1..3);
    let minmax = random_model(&mut r, AggregatorConfig::min_max(rr), p, n);
    let attention = random_model(
        &mut r,
        AggregatorConfig::Attention {
            hidden: 4,
            activation: Activation::Tanh,
        },
        p,
        n,
    );

    // Extractor: input gradient of a random projection of the descriptor.
    let x = uniform(&mut r, p, -1.5, 1.5);
    let c = uniform(&mut r, n, -1.0, 1.0);
    let mut tape = Tape::new();
    let bound = minmax.bind(&mut tape, false).unwrap();
    let xv = tape.leaf(Tensor::matrix(1, p, x.clone()).unwrap().with_grad(true)).unwrap();
    let d = minmax.encode_on_tape(&mut tape, &bound, xv).unwrap();
    let out = weighted_sum(&mut tape, d, &c);
    tape.backward(out).unwrap();
    let analytic = tape.grad(xv).unwrap().to_vec();
    let f = |x: &[f64]| minmax.encode_tile(x).unwrap().iter().zip(&c).map(|(a, b)| a * b).sum();
    checks.record("extractor", rel_err(&analytic, &central_diff(&f, &x)));

    // Scorer and the composed score-to-descriptor gradient through tile attribution.
    let descriptor = uniform(&mut r, n, -1.0, 1.0);
    for model in [&minmax, &attention] {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false).unwrap();
        let dv = tape.leaf(Tensor::matrix(1, n, descriptor.clone()).unwrap().with_grad(true)).unwrap();
        let s = model.score_on_tape(&mut tape, &bound, dv).unwrap();
        let out = tape.sum(s).unwrap();
        tape.backward(out).unwrap();
        let analytic = tape.grad(dv).unwrap().to_vec();
        let numeric = central_diff(&|d: &[f64]| model.score_tile(d).unwrap(), &descriptor);
        checks.record("scorer", rel_err(&analytic, &numeric));
    }

    // Min-max aggregator, away from sorting ties.
    let scores = loop {
        let s = uniform(&mut r, t, -2.0, 2.0);
        if min_gap(&s) > 1e-3 {
            break s;
        }
    };
    let c = uniform(&mut r, 2 * rr, -1.0, 1.0);
    let mut tape = Tape::new();
    let sv = tape.leaf(Tensor::vector(scores.clone()).unwrap().with_grad(true)).unwrap();
    let slots = min_max_slots(&scores, rr).unwrap();
    let g = tape.gather(sv, &slots).unwrap();
    let out = weighted_sum(&mut tape, g, &c);
    tape.backward(out).unwrap();
    let analytic = tape.grad(sv).unwrap().to_vec();
    let f = |s: &[f64]| {
        let slots = min_max_slots(s, rr).unwrap();
        slots.iter().zip(&c).map(|(&j, w)| s[j] * w).sum()
    };
    checks.record("minmax aggregator", rel_err(&analytic, &central_diff(&f, &scores)));

    // Attention aggregator: pooled descriptor with respect to the tile descriptors.
    let descriptors = uniform(&mut r, t * n, -1.0, 1.0);
    let c = uniform(&mut r, n, -1.0, 1.0);
    let mut tape = Tape::new();
    let bound = attention.bind(&mut tape, false).unwrap();
    let dv = tape.leaf(Tensor::matrix(t, n, descriptors.clone()).unwrap().with_grad(true)).unwrap();
    let s = attention.score_on_tape(&mut tape, &bound, dv).unwrap();
    let w = tape.softmax(s).unwrap();
    let row = tape.reshape(w, vec![1, t]).unwrap();
    let pooled = tape.matmul(row, dv).unwrap();
    let out = weighted_sum(&mut tape, pooled, &c);
    tape.backward(out).unwrap();
    let analytic = tape.grad(dv).unwrap().to_vec();
    let f = |d: &[f64]| attention.aggregate_attention(d).unwrap().1.iter().zip(&c).map(|(a, b)| a * b).sum();
    checks.record("attention aggregator", rel_err(&analytic, &central_diff(&f, &descriptors)));

    for model in [&minmax, &attention] {
        let bag = loop {
            let b = random_bag(&mut r, t, p);
            if min_gap(&model.forward_slide(&b).unwrap().scores) > 1e-3 {
                break b;
            }
        };
        let traces = trace_slides(model, std::slice::from_ref(&bag)).unwrap();
        let class = traces[0].predicted_class();
        let dims = model.dims();

        // Decision head on its own.
        let sd = traces[0].forward.slide_descriptor.clone();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false).unwrap();
        let dv = tape.leaf(Tensor::vector(sd.clone()).unwrap().with_grad(true)).unwrap();
        let pv = model.decide_on_tape(&mut tape, &bound, dv).unwrap();
        let pc = tape.gather(pv, &[class]).unwrap();
        tape.backward(pc).unwrap();
        let analytic = tape.grad(dv).unwrap().to_vec();
        let numeric = central_diff(&|d: &[f64]| model.decide(d).unwrap()[class], &sd);
        checks.record("decision head", rel_err(&analytic, &numeric));

        // Composed dP_c/dD as used by slide attribution (absolute values).
        let a = slide_attribution(model, &traces, class, 1).unwrap();
        let abs_numeric: Vec<f64> = numeric.iter().map(|v| v.abs()).collect();
        checks.record("slide attribution dP/dD", rel_err(&a.attribution, &abs_numeric));

        // Composed ds/dd for one tile, as used by tile attribution.
        let j = r.random_range(0..t);
        let tiles = ContributingTiles {
            class,
            tiles: vec![TileRef { slide: 0, tile: j }],
        };
        let ta = tile_attribution(model, &traces, &tiles, 1).unwrap();
        let dj = traces[0].forward.descriptor(j).to_vec();
        let numeric: Vec<f64> = central_diff(&|d: &[f64]| model.score_tile(d).unwrap(), &dj)
            .iter()
            .map(|v| v.abs())
            .collect();
        checks.record("tile attribution ds/dd", rel_err(&ta.attribution, &numeric));

        // Whole chain from tile content to the class probability.
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false).unwrap();
        let (vars, _) = model.forward_on_tape(&mut tape, &bound, &bag, true).unwrap();
        let pc = tape.gather(vars.prediction, &[class]).unwrap();
        tape.backward(pc).unwrap();
        let analytic = tape.grad(vars.content).unwrap().to_vec();
        let f = |x: &[f64]| {
            let b = SlideBag::from_rows("s", dims.content_dim, x.to_vec()).unwrap();
            model.forward_slide(&b).unwrap().prediction[class]
        };
        checks.record("end to end dP/dX", rel_err(&analytic, &central_diff(&f, bag.tiles())));

        // Parameter gradients of the training loss.
        let labelled = SlideBag::new(
            "s",
            p,
            bag.tiles().to_vec(),
            bag.coords().to_vec(),
            Some(seed as usize % 2),
            vec![None; t],
        )
        .unwrap();
        let (_, grads) = slide_loss_and_grads(model, &labelled).unwrap();
        let mut probe = model.clone();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let n_params = probe.params().len();
        for _ in 0..8 {
            let k = r.random_range(0..n_params);
            let idx = r.random_range(0..probe.params()[k].numel());
            let base = probe.params()[k].data().to_vec();
            let mut loss_at = |v: f64| {
                let mut data = base.clone();
                data[idx] = v;
                probe.params_mut()[k].assign(&data).unwrap();
                let pred = probe.forward_slide(&labelled).unwrap().prediction;
                cross_entropy_loss(&pred, labelled.slide_label().unwrap()).unwrap()
            };
            let up = loss_at(base[idx] + H);
            let down = loss_at(base[idx] - H);
            probe.params_mut()[k].assign(&base).unwrap();
            numeric.push((up - down) / (2.0 * H));
            analytic.push(grads[k][idx]);
        }
        checks.record("parameter gradients", rel_err(&analytic, &numeric));
    }
}

fn gradient_correctness() -> Verdict {
    let mut checks = GradChecks::default();
    for seed in 0..INSTANCES {
        check_instance(1000 + seed, &mut checks);
    }
    let worst = checks.worst.iter().cloned().fold(0.0, f64::max);
    let min_count = checks.count.iter().copied().min().unwrap_or(0);
    let parts: Vec<String> = checks
        .names
        .iter()
        .zip(&checks.worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect();
    Verdict {
        pass: worst < GRAD_TOL && min_count >= INSTANCES as usize,
        detail: format!("max rel err {worst:.2e} over >= {min_count} instances per check [{}]", parts.join(", ")),
    }
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Stable full sort: highest `r` first, then the lowest `r` of the rest.
fn sorted_slots(scores: &[f64], r: usize) -> Vec<usize> {
    let mut desc: Vec<usize> = (0..scores.len()).collect();
    desc.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut slots = desc[..r].to_vec();
    let mut rest: Vec<usize> = desc[r..].to_vec();
    rest.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    slots.extend_from_slice(&rest[..r]);
    slots
}

/// Two-sided exact p-value by listing every assignment of ranks to the first sample.
fn enumerated_p(n1: usize, n2: usize, u_obs: f64) -> f64 {
    let n = n1 + n2;
    let (mut lower, mut upper, mut total) = (0u64, 0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != n1 {
            continue;
        }
        let rank_sum: usize = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| i + 1).sum();
        let u = (rank_sum - n1 * (n1 + 1) / 2) as f64;
        total += 1;
        if u <= u_obs {
            lower += 1;
        }
        if u >= u_obs {
            upper += 1;
        }
    }
    (2.0 * lower.min(upper) as f64 / total as f64).min(1.0)
}

fn oracle_equivalence() -> Verdict {
    let mut r = rng(7);
    let mut auc_bad = 0;
    for i in 0..100 {
        let n = r.random_range(2..=1000);
        let levels = if i % 2 == 0 { 10 } else { 1_000_000 };
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        if roc_auc(&scores, &labels).unwrap().auc != pairwise_auc(&scores, &labels) {
            auc_bad += 1;
        }
    }

    let mut slot_bad = 0;
    for i in 0..100 {
        let t = r.random_range(2..60);
        let rr = r.random_range(1..=t / 2);
        let levels = if i % 2 == 0 { 5 } else { 1_000_000 };
        let scores: Vec<f64> = (0..t).map(|_| r.random_range(0..levels) as f64).collect();
        if min_max_slots(&scores, rr).unwrap() != sorted_slots(&scores, rr) {
            slot_bad += 1;
        }
    }

    let (mut mwu_cases, mut mwu_bad) = (0, 0);
    for n in 2..=8usize {
        for n1 in 1..n {
            for mask in 0u32..(1 << n) {
                if mask.count_ones() as usize != n1 {
                    continue;
                }
                let a: Vec<f64> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| i as f64).collect();
                let b: Vec<f64> = (0..n).filter(|i| mask & (1 << i) == 0).map(|i| i as f64).collect();
                let res = mann_whitney_u(&a, &b).unwrap();
                mwu_cases += 1;
                if res.p_value != enumerated_p(n1, n - n1, res.u) {
                    mwu_bad += 1;
                }
            }
        }
    }

    Verdict {
        pass: auc_bad == 0 && slot_bad == 0 && mwu_bad == 0,
        detail: format!(
            "roc_auc mismatches {auc_bad}/100, min-max slot mismatches {slot_bad}/100, exact MWU mismatches {mwu_bad}/{mwu_cases}"
        ),
    }
}

fn minmax_benchmark(out: &ExperimentOutcome, planted: &[usize], elapsed: Duration) -> Verdict {
    let auc = out.test.auc;
    let features = &out.features.class(1).unwrap().features;
    let found = planted.iter().filter(|f| features.contains(f)).count();
    let feature_loc = out.localization_of(FEATURE_METHOD).unwrap_or(f64::NAN);
    let tile_loc = out.localization_of(TILE_SCORE_METHOD).unwrap_or(f64::NAN);
    let checks = [
        (auc >= 0.95, format!("test AUC {auc:.4} >= 0.95")),
        (found >= 3, format!("k_c {features:?} holds {found}/4 planted {planted:?}")),
        (
            feature_loc >= tile_loc + 0.05,
            format!("feature-based localization {feature_loc:.4} >= tile-score {tile_loc:.4} + 0.05"),
        ),
        (feature_loc > 0.80, format!("feature-based localization {feature_loc:.4} > 0.80")),
        (elapsed < Duration::from_secs(600), format!("{:.1}s < 600s", elapsed.as_secs_f64())),
    ];
    summarize(&checks)
}

fn attention_benchmark(out: &ExperimentOutcome) -> Verdict {
    let auc = out.test.auc;
    let feature_loc = out.localization_of(FEATURE_METHOD).unwrap_or(f64::NAN);
    let tile_loc = out.localization_of(TILE_SCORE_METHOD).unwrap_or(f64::NAN);
    let checks = [
        (auc >= 0.90, format!("test AUC {auc:.4} >= 0.90")),
        (
            feature_loc > tile_loc,
            format!("feature-based localization {feature_loc:.4} > attention-weight {tile_loc:.4}"),
        ),
    ];
    summarize(&checks)
}

fn min_score_analysis(out: &ExperimentOutcome) -> Verdict {
    match &out.min_scores {
        Some(m) => Verdict {
            pass: m.p_value < 1e-3,
            detail: format!("Mann-Whitney p = {:.3e} < 1e-3 (U = {}, {:?})", m.p_value, m.u, m.method),
        },
        None => Verdict {
            pass: false,
            detail: "min-score comparison unavailable".into(),
        },
    }
}

fn summarize(checks: &[(bool, String)]) -> Verdict {
    let detail = checks
        .iter()
        .map(|(ok, msg)| if *ok { msg.clone() } else { format!("NOT {msg}") })
        .collect::<Vec<_>>()
        .join("; ");
    Verdict {
        pass: checks.iter().all(|c| c.0),
        detail,
    }
}

fn invariants(minmax: &ExperimentOutcome, cfg: &ExperimentConfig) -> Verdict {
    let mut r = rng(11);
    let mut checks = Vec::new();

    // Heat-map bounds and per-feature affine invariance.
    let (mut in_range, mut affine_err) = (true, 0.0f64);
    for _ in 0..50 {
        let dim = r.random_range(2..8);
        let slides: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let tiles = r.random_range(2..9);
                uniform(&mut r, tiles * dim, -3.0, 3.0)
            })
            .collect();
        let features: Vec<usize> = (0..dim).filter(|_| r.random_bool(0.6)).chain([0]).collect();
        let scale: Vec<(f64, f64)> = (0..dim).map(|_| (r.random_range(0.1..10.0), r.random_range(-5.0..5.0))).collect();
        let moved: Vec<Vec<f64>> = slides
            .iter()
            .map(|s| s.iter().enumerate().map(|(i, v)| scale[i % dim].0 * v + scale[i % dim].1).collect())
            .collect();
        let named = |v: &[Vec<f64>]| -> Vec<(String, Vec<f64>)> {
            v.iter().enumerate().map(|(i, s)| (format!("s{i}"), s.clone())).collect()
        };
        let (a, b) = (named(&slides), named(&moved));
        let ra: Vec<(&str, &[f64])> = a.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
        let rb: Vec<(&str, &[f64])> = b.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
        let ha = heatmap_from_descriptors(1, dim, &ra, &features).unwrap();
        let hb = heatmap_from_descriptors(1, dim, &rb, &features).unwrap();
        for (sa, sb) in ha.slides.iter().zip(&hb.slides) {
            for (x, y) in sa.values.iter().zip(&sb.values) {
                in_range &= (0.0..=1.0).contains(x);
                affine_err = affine_err.max((x - y).abs());
            }
        }
    }
    for slide in &minmax.heatmaps.feature.slides {
        in_range &= slide.values.iter().all(|v| (0.0..=1.0).contains(v));
    }
    checks.push((in_range, "heat-map values in [0,1]".to_string()));
    checks.push((affine_err <= 1e-9, format!("affine invariance {affine_err:.1e} <= 1e-9")));

    // Attention weights sum to one.
    let mut weight_err = 0.0f64;
    for _ in 0..50 {
        let n = r.random_range(2..6);
        let model = random_model(&mut r, AggregatorConfig::attention(), n, n);
        let t = r.random_range(1..40);
        let (w, _) = model.aggregate_attention(&uniform(&mut r, t * n, -5.0, 5.0)).unwrap();
        weight_err = weight_err.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    checks.push((weight_err <= 1e-12, format!("attention weights sum to 1 within {weight_err:.1e}")));

    // Softmax shift invariance.
    let mut shift_err = 0.0f64;
    for _ in 0..50 {
        let len = r.random_range(1..20);
        let x = uniform(&mut r, len, -30.0, 30.0);
        let c = r.random_range(-500.0..500.0);
        let soft = |v: Vec<f64>| {
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::vector(v).unwrap()).unwrap();
            let s = tape.softmax(a).unwrap();
            tape.data(s).to_vec()
        };
        let a = soft(x.clone());
        let b = soft(x.iter().map(|v| v + c).collect());
        shift_err = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(shift_err, f64::max);
    }
    checks.push((shift_err <= 1e-12, format!("softmax shift invariance {shift_err:.1e}")));

    // Attribution does not depend on slide or tile order.
    let mut perm_err = 0.0f64;
    for aggregator in [AggregatorConfig::min_max(2), AggregatorConfig::attention()] {
        let model = random_model(&mut r, aggregator, 5, 4);
        let bags: Vec<SlideBag> = (0..10)
            .map(|i| SlideBag::from_rows(format!("s{i}"), 5, uniform(&mut r, 9 * 5, -1.5, 1.5)).unwrap())
            .collect();
        let order = [4, 8, 0, 6, 2, 7, 1, 5, 3];
        let shuffled: Vec<SlideBag> = bags.iter().rev().map(|b| b.permuted(&order).unwrap()).collect();
        let class = trace_slides(&model, &bags).unwrap()[0].predicted_class();
        let run = |bags: &[SlideBag]| {
            let traces = trace_slides(&model, bags).unwrap();
            let a = slide_attribution(&model, &traces, class, 2).unwrap();
            let tiles = ContributingTiles {
                class,
                tiles: (0..traces.len())
                    .flat_map(|slide| (0..9).map(move |tile| TileRef { slide, tile }))
                    .collect(),
            };
            let t = tile_attribution(&model, &traces, &tiles, 2).unwrap();
            (a.attribution, t.attribution)
        };
        let (a1, t1) = run(&bags);
        let (a2, t2) = run(&shuffled);
        perm_err = perm_err.max(rel_err(&a1, &a2)).max(rel_err(&t1, &t2));
    }
    checks.push((perm_err <= 1e-12, format!("A_c/a_c permutation invariance {perm_err:.1e}")));

    // Ascent never accepts a decreasing step.
    let mut monotone = true;
    for seed in 0..10 {
        let model = random_model(&mut r, AggregatorConfig::min_max(1), 6, 3);
        for feature in 0..3 {
            let res = max_activation_ascent(
                &model,
                feature,
                &AscentConfig {
                    seed,
                    ..AscentConfig::default()
                },
            )
            .unwrap();
            monotone &= res.trace.windows(2).all(|w| w[1] >= w[0]);
        }
    }
    checks.push((monotone, "ascent traces monotone".to_string()));

    // KBAG round trip.
    let bags = generate_synthetic(&PlantedConfig {
        n_slides: 6,
        tiles_per_slide: 7,
        dim: 5,
        planted_features: vec![1, 3],
        ..PlantedConfig::default()
    })
    .unwrap();
    let kbag_ok = bags
        .iter()
        .all(|b| decode_bag(&encode_bag(b), b.slide_id.clone()).unwrap() == *b);
    checks.push((kbag_ok, "KBAG round trip".to_string()));

    // Full pipeline twice from the same seed.
    let again = run_experiment(cfg).unwrap();
    let same = again.model == minmax.model
        && again.history == minmax.history
        && again.features == minmax.features
        && again.heatmaps == minmax.heatmaps
        && again.localization == minmax.localization;
    checks.push((same, "pipeline bit-reproducible".to_string()));

    summarize(&checks)
}

fn report_arithmetic() -> Verdict {
    let run = |model: &str, new: f64, old: f64| ModelRun {
        model: model.into(),
        classification_auc: None,
        baseline: "tile".into(),
        methods: vec![
            MethodAuc {
                method: "tile".into(),
                localization_auc: old,
            },
            MethodAuc {
                method: "feature".into(),
                localization_auc: new,
            },
        ],
    };
    let report = compare_report(&[run("minmax", 0.884, 0.684), run("attention", 0.739, 0.421)]).unwrap();
    let got: Vec<f64> = report.rows.iter().filter_map(|r| r.relative_improvement).collect();
    let checks = [
        ((got[0] - 29.2).abs() <= 0.1, format!("(0.884, 0.684) -> {:+.2}%", got[0])),
        ((got[1] - 75.5).abs() <= 0.1, format!("(0.739, 0.421) -> {:+.2}%", got[1])),
    ];
    summarize(&checks)
}

fn main() {
    let mut results: Vec<(usize, &str, Verdict, Duration)> = Vec::new();
    let mut timed = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = f();
        let elapsed = start.elapsed();
        println!(
            "criterion {n} {name}: {} ({}) [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64()
        );
        results.push((n, name, v, elapsed));
    };

    timed(1, "gradient correctness", &mut || {
        let start = Instant::now();
        let mut v = gradient_correctness();
        if start.elapsed() >= Duration::from_secs(60) {
            v.pass = false;
            v.detail.push_str("; NOT under 60s");
        }
        v
    });
    timed(2, "oracle equivalence", &mut || {
        let start = Instant::now();
        let mut v = oracle_equivalence();
        if start.elapsed() >= Duration::from_secs(60) {
            v.pass = false;
            v.detail.push_str("; NOT under 60s");
        }
        v
    });

    let minmax_cfg = ExperimentConfig::synthetic(ModelConfig {
        aggregator: AggregatorConfig::min_max(5),
        ..ModelConfig::default()
    });
    let mut minmax = None;
    timed(3, "min-max synthetic benchmark", &mut || {
        let start = Instant::now();
        let out = run_experiment(&minmax_cfg).expect("min-max benchmark runs");
        let v = minmax_benchmark(&out, &minmax_cfg.data.planted_features, start.elapsed());
        minmax = Some(out);
        v
    });
    let minmax = minmax.expect("min-max benchmark ran");

    timed(4, "attention synthetic benchmark", &mut || {
        let cfg = ExperimentConfig::synthetic(ModelConfig {
            aggregator: AggregatorConfig::attention(),
            ..ModelConfig::default()
        });
        attention_benchmark(&run_experiment(&cfg).expect("attention benchmark runs"))
    });
    timed(5, "min-score distribution test", &mut || min_score_analysis(&minmax));
    timed(6, "invariant suites", &mut || invariants(&minmax, &minmax_cfg));
    timed(7, "comparison report arithmetic", &mut || report_arithmetic());

    let passed = results.iter().filter(|r| r.2.pass).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed < results.len() && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
