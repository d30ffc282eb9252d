//! End-to-end acceptance checks. Each criterion prints one PASS or FAIL line;
//! the process exits non-zero if any fails.

#[path = "../../core/tests/common/cart_oracle.rs"]
mod cart_oracle;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tlm::framework::{
    run_auto, run_iteration, run_scripted, FrameworkConfig, IterationOutcome, Mode, TerminationReason,
};
use tlm::ingest::{self, Origin, Timestamp};
use tlm::models::{
    cnn_gradient_check, Activation, CnnHyperparams, CnnModel, ConvSpec, DecisionTree, HyperparamSpace, TreeParams,
};
use tlm::synth::{self, LeakageProfile};
use tlm::tlsparse::{self, TlsRecord};
use tlm::{Direction, LabeledDataset, RawSegment, Session, ViewSpec};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);
type SessionPayloads = BTreeSet<(String, Vec<(Direction, Vec<u8>)>)>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn profile(classes: usize, per_class: usize) -> LeakageProfile {
    LeakageProfile {
        classes,
        sessions_per_class: per_class,
        seed: 42,
        ..Default::default()
    }
}

fn scripted(p: &LeakageProfile) -> Vec<IterationOutcome> {
    let ds = synth::generate(p).expect("profile generates");
    run_scripted(&ds, &FrameworkConfig::default()).expect("scripted run")
}

fn accs(out: &[IterationOutcome]) -> String {
    out.iter()
        .map(|o| format!("{:.3}", o.report.tree_accuracy()))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Criteria 1 and 2 share one scripted run on the length-leak profile.
fn length_leak_run() -> &'static (Vec<IterationOutcome>, f64) {
    static RUN: std::sync::OnceLock<(Vec<IterationOutcome>, f64)> = std::sync::OnceLock::new();
    RUN.get_or_init(|| {
        let t = Instant::now();
        let out = scripted(&LeakageProfile {
            length_leak: true,
            ..profile(8, 200)
        });
        (out, t.elapsed().as_secs_f64())
    })
}

fn c1_length_leak_detected() -> Outcome {
    let (out, secs) = length_leak_run();
    let r = &out[1].report;
    let shares = r.impact.offset_values();
    let total: f64 = shares.iter().sum();
    let mass = (shares[3] + shares[4]) / total;
    ensure(
        r.tree_accuracy() >= 0.95,
        format!("tree accuracy {:.4}", r.tree_accuracy()),
    )?;
    ensure(
        r.selection.offsets == [3, 4],
        format!("selected {:?}", r.selection.offsets),
    )?;
    ensure(mass >= 0.60, format!("mass on {{3,4}} {mass:.3}"))?;
    ensure(*secs <= 300.0, format!("scripted run took {secs:.0} s"))?;
    Ok(format!(
        "iteration 2: tree {:.4}, leakers {:?}, mass {mass:.3}, run {secs:.0} s",
        r.tree_accuracy(),
        r.selection.offsets
    ))
}

fn c2_mask_removes_length_leak() -> Outcome {
    let (out, _) = length_leak_run();
    let r = &out[2].report;
    ensure(
        r.view.per_packet_mask.end == 5,
        format!("mask {:?}", r.view.per_packet_mask),
    )?;
    let bound = 1.0 / 8.0 + 0.10;
    ensure(
        r.tree_accuracy() <= bound,
        format!("tree accuracy {:.4} > {bound}", r.tree_accuracy()),
    )?;
    Ok(format!(
        "iteration 3 tree {:.4} (iteration 2 {:.4})",
        r.tree_accuracy(),
        out[1].report.tree_accuracy()
    ))
}

fn c3_trend() -> Outcome {
    let out = scripted(&LeakageProfile {
        handshake_leak: true,
        length_leak: true,
        iv_leak_strength: 0.5,
        payload_leak_strength: 0.1,
        ..profile(8, 200)
    });
    let a: Vec<f64> = out[..4].iter().map(|o| o.report.tree_accuracy()).collect();
    ensure(
        a.windows(2).all(|w| w[1] <= w[0]),
        format!("not non-increasing: {}", accs(&out)),
    )?;
    ensure(a[0] >= 0.95, format!("iteration 1 {:.4}", a[0]))?;
    ensure(a[3] >= 1.0 / 8.0, format!("iteration 4 {:.4} below chance", a[3]))?;
    Ok(format!("tree accuracies {}", accs(&out)))
}

fn c4_null_control() -> Outcome {
    let ds = synth::generate(&profile(8, 200)).expect("profile generates");
    let out = run_scripted(&ds, &FrameworkConfig::default()).map_err(|e| e.to_string())?;
    let chance = 1.0 / 8.0;
    for o in &out {
        let r = &o.report;
        let cnn = r.cnn_accuracy().ok_or("no CNN accuracy")?;
        for (name, a) in [("tree", r.tree_accuracy()), ("cnn", cnn)] {
            ensure(
                (a - chance).abs() <= 0.10,
                format!("iteration {} {name} {a:.4}", r.index + 1),
            )?;
        }
    }
    let auto = FrameworkConfig {
        mode: Mode::Auto,
        ..Default::default()
    };
    let rounds = run_auto(&ds, &auto).map_err(|e| e.to_string())?;
    let reason = rounds[0].report.termination_reason;
    ensure(
        rounds.len() == 1 && reason == Some(TerminationReason::ImportanceDiffuse),
        format!("auto ran {} rounds, first reason {reason:?}", rounds.len()),
    )?;
    let cnn: Vec<String> = out
        .iter()
        .map(|o| format!("{:.3}", o.report.cnn_accuracy().unwrap()))
        .collect();
    Ok(format!(
        "trees {}; cnns {}; auto stops at round 1 (concentration {:.3})",
        accs(&out),
        cnn.join(" "),
        rounds[0].report.selection.concentration
    ))
}

fn c5_cart_oracle() -> Outcome {
    for seed in 0..200 {
        let ds = cart_oracle::random_tiny(seed);
        let tree = DecisionTree::fit(
            &ds.refs(),
            &ds.labels,
            ds.n_classes,
            TreeParams::default().with_depth(ds.depth),
        )
        .map_err(|e| e.to_string())?;
        let oracle = cart_oracle::fit(&ds);
        let got = cart_oracle::training_accuracy(&ds, |x| tree.predict(x).unwrap());
        let want = cart_oracle::training_accuracy(&ds, |x| oracle.predict(x));
        ensure(got == want, format!("dataset {seed}: {got} vs oracle {want}"))?;
    }
    Ok("200 tiny datasets match the exhaustive per-node Gini search exactly".into())
}

fn c6_importance() -> Outcome {
    let rows: Vec<Vec<u8>> = vec![
        vec![10, 0, 5],
        vec![10, 0, 5],
        vec![10, 1, 5],
        vec![10, 1, 5],
        vec![200, 0, 5],
        vec![200, 0, 5],
        vec![200, 1, 5],
        vec![200, 1, 5],
    ];
    let labels = [0, 0, 0, 1, 1, 1, 1, 1];
    let refs: Vec<&[u8]> = rows.iter().map(Vec::as_slice).collect();
    let t = DecisionTree::fit(&refs, &labels, 2, TreeParams::default().with_depth(2)).map_err(|e| e.to_string())?;
    let imp = tlm::models::tree_importance(&t, rows.len());
    ensure((imp[0] - 9.0 / 11.0).abs() <= 1e-12, format!("f0 {}", imp[0]))?;
    ensure((imp[1] - 2.0 / 11.0).abs() <= 1e-12, format!("f1 {}", imp[1]))?;
    ensure(imp[2] == 0.0, format!("f2 {}", imp[2]))?;

    let mut worst: f64 = 0.0;
    for seed in 0..200 {
        let ds = cart_oracle::random_tiny(1_000 + seed);
        let t = DecisionTree::fit(
            &ds.refs(),
            &ds.labels,
            ds.n_classes,
            TreeParams::default().with_depth(6),
        )
        .map_err(|e| e.to_string())?;
        let imp = tlm::models::tree_importance(&t, ds.rows.len());
        let used: BTreeSet<usize> = t
            .nodes
            .iter()
            .filter_map(|n| n.split.as_ref().map(|s| s.feature))
            .collect();
        if !used.is_empty() {
            worst = worst.max((imp.iter().sum::<f64>() - 1.0).abs());
        }
        for (f, &v) in imp.iter().enumerate() {
            ensure(
                used.contains(&f) || v == 0.0,
                format!("dataset {seed}: unused feature {f} has {v}"),
            )?;
        }
    }
    ensure(worst <= 1e-9, format!("sum off by {worst:e}"))?;
    Ok(format!(
        "hand example exact to 1e-12; max |sum - 1| {worst:.1e} over 200 trees"
    ))
}

fn c7_gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch: Vec<(Vec<f64>, usize)> = (0..4)
        .map(|i| ((0..32).map(|_| rng.random::<f64>()).collect(), i % 3))
        .collect();
    let h = CnnHyperparams {
        conv: vec![
            ConvSpec {
                filters: 3,
                kernel: 4,
                stride: 2,
            },
            ConvSpec {
                filters: 2,
                kernel: 2,
                stride: 1,
            },
        ],
        fc: vec![5, 4],
        activation: Activation::Tanh,
        dropout: 0.0,
        pool: 2,
        learning_rate: 0.01,
    };
    let check = cnn_gradient_check(&h, 3, &batch, 13).map_err(|e| e.to_string())?;
    ensure(
        check.max_rel_error <= 1e-4,
        format!("max relative error {:e}", check.max_rel_error),
    )?;

    let model = CnnModel::new(&h, 32, 3, 5).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x: Vec<u8> = (0..32).map(|_| rng.random()).collect();
        let p = model.predict_proba(&x).map_err(|e| e.to_string())?;
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
    }
    ensure(worst <= 1e-6, format!("softmax sum off by {worst:e}"))?;
    Ok(format!(
        "max relative error {:.1e} over {} params; softmax off by {worst:.1e}",
        check.max_rel_error, check.checked
    ))
}

fn c8_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let types = [20u8, 21, 22, 23, 24];
    for case in 0..1000 {
        let records: Vec<TlsRecord> = (0..rng.random_range(0..8))
            .map(|_| {
                let len = rng.random_range(0..600);
                let payload: Vec<u8> = (0..len).map(|_| rng.random()).collect();
                TlsRecord::new(
                    types[rng.random_range(0..types.len())],
                    (3, rng.random_range(1..=4)),
                    payload,
                )
                .unwrap()
            })
            .collect();
        let mut stream = Vec::new();
        for r in &records {
            stream.extend(tlsparse::serialize_record(r).map_err(|e| e.to_string())?);
        }
        let (back, trailing) = tlsparse::split_records(&stream);
        ensure(
            back == records && trailing == 0,
            format!("record list {case} did not round-trip"),
        )?;
    }

    let ds = synth::generate(&LeakageProfile {
        handshake_leak: true,
        length_leak: true,
        ..profile(4, 25)
    })
    .map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let labels = synth::write_pcap(&ds, &dir.path().join("all.pcap")).map_err(|e| e.to_string())?;
    let map = ingest::read_label_map(&labels).map_err(|e| e.to_string())?;
    let (back, _) = ingest::read_pcap_dir(dir.path(), Some(&map)).map_err(|e| e.to_string())?;
    let payloads = |d: &LabeledDataset| -> SessionPayloads {
        d.sessions
            .iter()
            .map(|s| {
                let segs = s.segments.iter().map(|g| (g.direction, g.payload.clone())).collect();
                (s.label.clone(), segs)
            })
            .collect()
    };
    ensure(back.sessions.len() == ds.sessions.len(), "pcap session count differs")?;
    ensure(payloads(&back) == payloads(&ds), "pcap payloads differ")?;

    let first = dir.path().join("a.jsonl");
    let second = dir.path().join("b.jsonl");
    ingest::write_sessions_jsonl(&ds, &first).map_err(|e| e.to_string())?;
    let read = ingest::read_sessions_jsonl(&first).map_err(|e| e.to_string())?;
    ingest::write_sessions_jsonl(&read, &second).map_err(|e| e.to_string())?;
    let (a, b) = (std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    ensure(a == b, "JSONL rewrite differs")?;
    let segs = |d: &LabeledDataset| -> Vec<Vec<RawSegment>> { d.sessions.iter().map(|s| s.segments.clone()).collect() };
    ensure(segs(&read) == segs(&ds), "JSONL segments differ")?;
    Ok(format!(
        "1000 record lists; {} sessions through pcap; {} JSONL bytes identical",
        ds.sessions.len(),
        a.len()
    ))
}

fn c9_cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("demo/run.json");
    let run = |name: &str| -> Result<Vec<u8>, String> {
        let out = dir.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_tlm"))
            .args(["run", "--seed", "2024", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(o.status.success(), String::from_utf8_lossy(&o.stderr).into_owned())?;
        std::fs::read(out.join("report.json")).map_err(|e| e.to_string())
    };
    let (a, b) = (run("first")?, run("second")?);
    ensure(a == b, "report.json differs between runs")?;
    Ok(format!("two runs wrote identical {}-byte reports", a.len()))
}

/// Label is the XOR of the top bits of the first two body bytes: no single
/// byte predicts it, so a shallow tree sees noise while a CNN sees the pair.
fn xor_dataset(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sessions = (0..n)
        .map(|i| {
            let mut body = [0u8; 27];
            rng.fill(&mut body[..]);
            let label = u8::from((body[0] >= 128) ^ (body[1] >= 128));
            let mut record = vec![0x17, 3, 3, 0, 27];
            record.extend(body);
            let seg = |seq, payload| RawSegment {
                seq,
                timestamp: Timestamp::new(i as u64, 0),
                direction: Direction::ClientToServer,
                payload,
            };
            Session {
                session_id: format!("s{i}"),
                label: format!("y{label}"),
                segments: vec![seg(0, vec![]), seg(1, vec![]), seg(1, vec![]), seg(1, record)],
                origin: Origin::Synthetic(seed),
            }
        })
        .collect();
    LabeledDataset::new(sessions, seed)
}

fn c10_closeness() -> Outcome {
    let ds = xor_dataset(1000, 5);
    let spec = ViewSpec {
        packets: 1,
        bytes_per_packet: 32,
        ..ViewSpec::tls_app_data()
    };
    let cfg = FrameworkConfig {
        tree_depths: vec![4],
        cnn_space: HyperparamSpace::new()
            .floats("learning_rate", &[0.01])
            .ints("stride", &[1])
            .ints("conv_layers", &[1])
            .ints("filters_0", &[8])
            .ints("kernel_0", &[2])
            .ints("fc_layers", &[1])
            .ints("fc_neurons_0", &[16])
            .texts("activation", &["tanh"])
            .floats("dropout", &[0.0])
            .ints("pool", &[1]),
        cnn_search_budget: 1,
        cnn_epochs: 60,
        cnn_batch_size: 32,
        ..Default::default()
    };
    let o = run_iteration(&ds, &spec, &cfg).map_err(|e| e.to_string())?;
    let (tree, cnn) = (o.report.tree_accuracy(), o.report.cnn_accuracy().ok_or("no CNN")?);
    ensure(
        !o.report.dt_close_to_nn,
        format!("flag set with tree {tree:.3}, cnn {cnn:.3}"),
    )?;
    Ok(format!("tree {tree:.3}, cnn {cnn:.3}, dt_close_to_nn = false"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("planted length leak detected", c1_length_leak_detected),
        ("mask [0,5) removes the length leak", c2_mask_removes_length_leak),
        ("accuracy trend over masked views", c3_trend),
        ("null-leakage control", c4_null_control),
        ("CART matches the exhaustive oracle", c5_cart_oracle),
        ("importance arithmetic", c6_importance),
        ("CNN gradient check", c7_gradient_check),
        ("parser round trips", c8_round_trips),
        ("CLI determinism", c9_cli_determinism),
        ("closeness flag on XOR data", c10_closeness),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1} s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{secs:.1} s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
