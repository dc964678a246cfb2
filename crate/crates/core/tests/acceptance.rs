//! One PASS/FAIL line per acceptance criterion. Exits nonzero if any fails.
//! Optional soft checks are printed as INFO and never fail the run.

mod common;

use std::time::Instant;

use rand::Rng;
use udfc::accounting::{size_bytes_for_counts, BYTES_PER_MB};
use udfc::forward::Tap;
use udfc::harness::{
    baseline_one_to_one, baseline_prune_only, feature_mse, gaussian_inputs, per_sample_mse,
    quantize_uncompensated,
};
use udfc::model::{Activation, Network};
use udfc::pipeline::{compress, sweep, CompressionConfig};
use udfc::quant::quantize_channel;
use udfc::reconstruct::*;
use udfc::topology::random_network;

const FIXTURES: [&str; 5] = [
    "c16-c32-mp-c32-c64-gap-fc10",
    "c16-c24-c32-gap-fc10",
    "c32-mp-c32-c48-c64-gap-fc10",
    "c16-c32-c32-gap-fc10",
    "c24-c32-mp-c48-c64-gap-fc10",
];
const FIXTURE_INPUT: [usize; 3] = [3, 16, 16];

fn fixture(i: usize) -> Network {
    random_network(FIXTURES[i], FIXTURE_INPUT, i as u64).unwrap()
}

fn final_tap(net: &Network) -> Tap {
    Tap::PreBn(net.block_count() - 1)
}

type Outcome = (bool, String);
type Check = (&'static str, fn() -> Outcome);

fn solver_matches_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = common::rng(100);
    let (mut worst, mut not_optimal) = (0f64, 0);
    for _ in 0..100 {
        let (cin, k) = if r.random_bool(0.5) { (r.random_range(1..=4), 3) } else { (r.random_range(1..=36), 1) };
        let d = cin * k * k;
        let kept_len = r.random_range(1..=8.min(d));
        let conv = common::random_block(&mut r, kept_len + 1, cin, k);
        let j = r.random_range(0..=kept_len);
        let kept: Vec<usize> = (0..=kept_len).filter(|&c| c != j).collect();
        let alpha1 = [0.0, 0.001, 0.01, 0.1][r.random_range(0..4)];
        let pack = build_pruning_system(&conv, j, &kept).unwrap();
        let s = solve_pruning_scales(&pack, alpha1, 0.0).unwrap();
        let cols: Vec<Vec<f64>> = (0..kept_len).map(|c| pack.column(c).to_vec()).collect();
        let (a, b) = common::naive_normal_equations(&cols, &pack.v, &pack.p, pack.k_pruned, alpha1, 0.0);
        let want = common::gauss_solve(a, b).unwrap();
        let scale = want.iter().fold(0f64, |m, v| m.max(v.abs()));
        let err = s.iter().zip(&want).fold(0f64, |m, (x, y)| m.max((x - y).abs())) / scale;
        worst = worst.max(err);

        let best = pruning_loss(&pack, &s, alpha1);
        for _ in 0..1000 {
            let step = r.random_range(1e-6..1.0) * (1.0 + scale);
            let moved: Vec<f64> = s.iter().map(|v| v + step * r.random_range(-1.0..1.0)).collect();
            if pruning_loss(&pack, &moved, alpha1) < best - 1e-12 * best.max(1.0) {
                not_optimal += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst <= 1e-5 && not_optimal == 0 && secs < 5.0,
        format!("max rel err {worst:.2e}, {not_optimal} better perturbations, {secs:.2}s"),
    )
}

fn gradient_check() -> Outcome {
    let mut r = common::rng(200);
    let mut worst = 0f64;
    for _ in 0..50 {
        let cin = r.random_range(1..=4);
        let n = r.random_range(2..=8);
        let conv = common::random_block(&mut r, n, cin, 3);
        let j = r.random_range(0..n);
        let kept: Vec<usize> = (0..n).filter(|&c| c != j).collect();
        let alpha1 = r.random_range(0.0..0.5);
        let pack = build_pruning_system(&conv, j, &kept).unwrap();
        let s: Vec<f64> = kept.iter().map(|_| r.random_range(-2.0..2.0)).collect();
        let g = loss_gradient(&pack, &s, alpha1);
        let fd = common::central_diff(|x| pruning_loss(&pack, x, alpha1), &s, 1e-3);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&diff) / norm(&g));
    }
    (worst <= 1e-4, format!("max rel err {worst:.2e} over 50 instances"))
}

fn quant_scale_check() -> Outcome {
    let mut r = common::rng(300);
    let mut worst = 0f64;
    let mut identity_exact = true;
    for bits in [2, 4, 6, 8] {
        for _ in 0..100 {
            let cin = r.random_range(1..=8);
            let conv = common::random_block(&mut r, 2, cin, 3);
            let w = conv.weight.row(0);
            let q = quantize_channel(w, bits).unwrap();
            let terms = build_quant_terms(&conv, 0, &q.dequant).unwrap();
            let s = solve_quant_scale(&terms, 0.008).unwrap().value;
            let want = common::grid_min(|x| quant_loss(&terms, x, 0.008), -4.0, 4.0);
            worst = worst.max((s - want).abs());
            let same = build_quant_terms(&conv, 0, w).unwrap();
            identity_exact &= solve_quant_scale(&same, 0.008).unwrap().value == 1.0;
        }
    }
    (
        worst <= 1e-6 && identity_exact,
        format!("max abs err {worst:.2e}; unquantized gives exactly 1: {identity_exact}"),
    )
}

fn exact_recovery() -> Outcome {
    let (net, pruned) = common::exact_combination_net(6, Activation::Identity);
    let cfg = CompressionConfig { prune_ratio: 0.25, ..Default::default() };
    let (out, report) = compress(&net, &cfg).unwrap();
    let selected = report.layers[0].pruned.clone();
    let lp = report.layers[0].pruning.iter().fold(0f64, |m, p| m.max(p.l_p));
    let x = gaussian_inputs(net.input_shape, 20, 0);
    let tap = Tap::PreBn(1);
    let a = udfc::forward(&net, &x, &[tap]).unwrap().captures[&tap].clone();
    let b = udfc::forward(&out, &x, &[tap]).unwrap().captures[&tap].clone();
    let diff = a.max_abs_diff(&b).unwrap();
    (
        selected == pruned && diff <= 1e-4 && lp <= 1e-10,
        format!("pruned {selected:?}, max abs diff {diff:.2e}, max l_p {lp:.2e}"),
    )
}

fn relu_bound() -> Outcome {
    let mut r = common::rng(500);
    let mut violations = 0;
    let mut elements = 0;
    for _ in 0..100 {
        let n = r.random_range(1..=8);
        let len = r.random_range(1..=256);
        let bj = common::normals(&mut r, len);
        let maps: Vec<Vec<f32>> = (0..n).map(|_| common::normals(&mut r, len)).collect();
        let refs: Vec<&[f32]> = maps.iter().map(Vec::as_slice).collect();
        let s: Vec<f64> = (0..n).map(|_| r.random_range(0.0..2.0)).collect();
        let (a, e) = pruning_error_terms(&bj, &refs, &s).unwrap();
        violations += bound_violations(&a, &e).unwrap();
        elements += len;
    }
    (violations == 0, format!("{violations} violations over {elements} elements"))
}

fn directional() -> Outcome {
    let start = Instant::now();
    let cfg = CompressionConfig { prune_ratio: 0.3, wbits: 6, ..Default::default() };
    let trials = 50;
    let (mut vs_prune, mut vs_one) = (0, 0);
    let mut rows = Vec::new();
    for i in 0..FIXTURES.len() {
        let net = fixture(i);
        let (udfc, report) = compress(&net, &cfg).unwrap();
        let d = report.decisions();
        let quant = |n: Network| quantize_uncompensated(&n, cfg.wbits, cfg.granularity).unwrap();
        let prune = quant(baseline_prune_only(&net, &d).unwrap());
        let one = quant(baseline_one_to_one(&net, &d).unwrap());
        let x = gaussian_inputs(net.input_shape, trials, 1000 + i as u64);
        let tap = final_tap(&net);
        let u = per_sample_mse(&net, &udfc, tap, &x).unwrap();
        let p = per_sample_mse(&net, &prune, tap, &x).unwrap();
        let o = per_sample_mse(&net, &one, tap, &x).unwrap();
        let wp = u.iter().zip(&p).filter(|(a, b)| a < b).count();
        let wo = u.iter().zip(&o).filter(|(a, b)| a <= b).count();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        rows.push(format!(
            "{}: udfc {:.3} prune {:.3} one-to-one {:.3}, wins {wp}/{wo}",
            FIXTURES[i],
            mean(&u),
            mean(&p),
            mean(&o)
        ));
        vs_prune += wp;
        vs_one += wo;
    }
    let total = (trials * FIXTURES.len()) as f64;
    let (fp, fo) = (vs_prune as f64 / total, vs_one as f64 / total);
    let secs = start.elapsed().as_secs_f64();
    for row in &rows {
        println!("    {row}");
    }
    (
        fp >= 0.9 && fo >= 0.7 && secs < 60.0,
        format!(
            "beats prune-only in {:.0}% (need 90%), <= one-to-one in {:.0}% (need 70%), {secs:.1}s",
            100.0 * fp,
            100.0 * fo
        ),
    )
}

fn quantizer_bound() -> Outcome {
    let mut r = common::rng(700);
    let weights: Vec<f32> = (0..1_000_000)
        .map(|_| r.random_range(-1.0f32..1.0) * 10f32.powi(r.random_range(-3..2)))
        .collect();
    let mut ok = true;
    let mut detail = Vec::new();
    for bits in 2..=8 {
        let (mut over, mut unstable) = (0usize, 0usize);
        let levels = ((1u32 << bits) - 1) as f64;
        for chunk in weights.chunks(1000) {
            let q = quantize_channel(chunk, bits).unwrap();
            let max = chunk.iter().fold(0f32, |m, v| m.max(v.abs())) as f64;
            // The grid value a code stands for; the stored f32 is its nearest float.
            let exact: Vec<f64> = q.codes.iter().map(|&c| (2.0 * c as f64 / levels - 1.0) * max).collect();
            over += chunk
                .iter()
                .zip(&exact)
                .filter(|(w, d)| (**w as f64 - **d).abs() > max / levels)
                .count();
            unstable += exact.iter().zip(&q.dequant).filter(|(e, d)| **e as f32 != **d).count();
            let again = quantize_channel(&q.dequant, bits).unwrap();
            unstable += again.dequant.iter().zip(&q.dequant).filter(|(a, b)| a != b).count();
            unstable += usize::from(again.codes != q.codes);
        }
        ok &= over == 0 && unstable == 0;
        detail.push(format!("k={bits}: {over}/{unstable}"));
    }
    (ok, format!("bound/idempotence failures {}", detail.join(", ")))
}

fn size_accounting() -> Outcome {
    const RESNET18_PARAMS: u64 = 11_689_512;
    let full = size_bytes_for_counts(RESNET18_PARAMS, 0, 32) / BYTES_PER_MB;
    let six = size_bytes_for_counts(RESNET18_PARAMS, 0, 6) / BYTES_PER_MB;
    let (a, b) = (format!("{full:.2}"), format!("{six:.2}"));
    let ratio = six / full;
    (
        a == "44.59" && b == "8.36" && (ratio - 6.0 / 32.0).abs() < 1e-15,
        format!("{a} MB -> {b} MB, ratio {ratio}"),
    )
}

fn throughput() -> Outcome {
    let net = random_network("c64-c128-mp-c256-c256-gap-fc10", [3, 32, 32], 9).unwrap();
    let params: usize = net
        .layers
        .iter()
        .map(|l| match l {
            udfc::Layer::Conv(c) => c.param_count(),
            udfc::Layer::Linear(h) => h.weight.len() + h.bias.as_ref().map_or(0, Vec::len),
            _ => 0,
        })
        .sum();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let cfg = CompressionConfig { prune_ratio: 0.3, wbits: 6, ..Default::default() };
    let start = Instant::now();
    pool.install(|| compress(&net, &cfg)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    (
        params <= 1_000_000 && secs < 2.0,
        format!("{params} parameters in {secs:.3}s on one thread"),
    )
}

fn sweep_shape() -> Outcome {
    let ratios = [0.1, 0.2, 0.3, 0.4, 0.5];
    let base = CompressionConfig { wbits: 6, ..Default::default() };
    let mut monotone = 0;
    let mut interior = 0;
    let mut rows = Vec::new();
    for i in 0..FIXTURES.len() {
        let net = fixture(i);
        let x = gaussian_inputs(net.input_shape, 50, 2000 + i as u64);
        let tap = final_tap(&net);
        let curve: Vec<f64> = sweep(&net, &base, &ratios, &[6])
            .unwrap()
            .iter()
            .map(|c| feature_mse(&net, &c.network, tap, &x).unwrap())
            .collect();
        if curve.windows(2).all(|w| w[0] <= w[1]) {
            monotone += 1;
        }
        let alphas = [0.0, 0.001, 0.01, 0.1];
        let by_alpha: Vec<f64> = alphas
            .iter()
            .map(|&alpha1| {
                let cfg = CompressionConfig { prune_ratio: 0.3, alpha1, ..base.clone() };
                feature_mse(&net, &compress(&net, &cfg).unwrap().0, tap, &x).unwrap()
            })
            .collect();
        let best = (0..4).min_by(|&a, &b| by_alpha[a].total_cmp(&by_alpha[b])).unwrap();
        if best == 1 || best == 2 {
            interior += 1;
        }
        let fmt = |v: &[f64]| v.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join(" ");
        rows.push(format!("{}: ratio [{}] alpha1 [{}]", FIXTURES[i], fmt(&curve), fmt(&by_alpha)));
    }
    for row in &rows {
        println!("    {row}");
    }
    println!(
        "    INFO alpha1 sweep: interior minimizer on {interior}/5 fixtures (soft, needs 3)"
    );
    (
        monotone == FIXTURES.len(),
        format!("non-decreasing in prune ratio on {monotone}/5 fixtures"),
    )
}

fn main() {
    let checks: [Check; 10] = [
        ("solver vs normal-equations oracle", solver_matches_oracle),
        ("gradient vs central differences", gradient_check),
        ("quantization scale vs line search", quant_scale_check),
        ("exact recovery", exact_recovery),
        ("ReLU bound", relu_bound),
        ("directional vs baselines", directional),
        ("quantizer bound and idempotence", quantizer_bound),
        ("size accounting", size_accounting),
        ("throughput", throughput),
        ("sweep shape", sweep_shape),
    ];
    let mut failed = 0;
    for (n, (name, check)) in checks.iter().enumerate() {
        let (ok, detail) = check();
        failed += usize::from(!ok);
        println!(
            "criterion {:>2} {} {name}: {detail}",
            n + 1,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    println!("criterion 11 SKIP exported tiny CNN: needs the trained exporter fixtures");
    println!("{} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
