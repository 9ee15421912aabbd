//! Acceptance checks, one line per criterion. Run with
//! `cargo test -p ecometer --test acceptance`.
//!
//! Every check compares the implementation against an oracle written here
//! from first principles (integer arithmetic, flat scans, hand parsing), not
//! against the implementation's own helpers.

mod support;

use chrono::{DateTime, Duration, NaiveDate, TimeZone, Utc};
use ecometer::config::AliasMode;
use ecometer::proxy::PendingTransaction;
use ecometer::{ManualClock, Service, ServiceConfig, TransactionReport};
use ecometer_core::event_log::{self, DelayBucket, EventType, ExportFormat, TimeWindow};
use ecometer_core::history::{self, synth, AnalysisWindow};
use ecometer_core::popup::{PopupPolicy, PopupTrigger};
use ecometer_core::replay::{self, TraceEvent, TraceKind};
use ecometer_core::session::{rebuild, EngineConfig, UserSession};
use ecometer_core::{
    EcoScoreState, HttpTransactionRecord, PenaltySchedule, Profile, QueryFilter, QuerySource,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::path::Path;
use std::pin::Pin;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::task::{Context, Poll};
use std::time::Instant;

type Outcome = Result<String, String>;
type Criterion = (u8, &'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn base() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2025, 1, 20, 8, 0, 0).unwrap()
}

fn engine(limit: u32) -> EngineConfig {
    EngineConfig {
        model: Profile::PaperFigures.model(),
        schedule: PenaltySchedule::default(),
        popup: PopupPolicy { trigger: PopupTrigger::Count { limit }, read_more_url: String::new() },
    }
}

/// Integer thousandths rendered with three decimals.
fn milli(th: u64) -> String {
    format!("{}.{:03}", th / 1000, th % 1000)
}

/// Expected strings for `c` queries at 2.9 Wh / 17.0 mL, 10 W bulbs,
/// 240 mL cups, 250 Wh/mile, 150 L tubs, 1000 L hot tubs, computed in
/// integer arithmetic with half-up rounding.
struct Figures {
    kwh: String,
    liters: String,
    energy_unit: &'static str,
    energy: String,
    water_unit: &'static str,
    water: String,
}

fn figures(c: u64) -> Figures {
    let (energy_unit, energy) = if 29 * c < 10_000 {
        ("lightbulb-hours", milli(290 * c))
    } else {
        ("vehicle-miles", milli((116 * c + 5) / 10))
    };
    let (water_unit, water) = if 17 * c < 150_000 {
        ("cups", milli((850 * c + 6) / 12))
    } else if 17 * c < 1_000_000 {
        ("bathtubs", milli((34 * c + 150) / 300))
    } else {
        ("hot-tubs", milli((34 * c + 1000) / 2000))
    };
    Figures { kwh: milli((29 * c + 5) / 10), liters: milli(17 * c), energy_unit, energy, water_unit, water }
}

// ---------------------------------------------------------------------------
// 1. Golden figures

fn golden_figures() -> Outcome {
    let started = Instant::now();
    let cfg = engine(7);
    let mut session = UserSession::new("user_01", &cfg, base());
    let mut bundles = std::collections::BTreeMap::new();
    let mut popup_at_21 = None;
    for i in 1..=50u64 {
        let at = base() + Duration::minutes(i as i64);
        let (outcome, _) = session.on_query(&cfg, at).map_err(|e| e.to_string())?;
        if i == 21 {
            popup_at_21 = outcome.popup;
        }
        if [3, 4, 6, 7, 21, 32, 50].contains(&i) {
            bundles.insert(i, session.bundle_at(&cfg, at));
        }
    }
    let expect: [(u64, &str, Option<&str>); 7] = [
        (3, "0.870", None),
        (4, "1.160", None),
        (6, "1.740", None),
        (7, "2.030", None),
        (21, "6.090", Some("1.488")),
        (32, "9.280", Some("2.267")),
        (50, "14.500", Some("3.542")),
    ];
    for (n, energy, water) in expect {
        let b = &bundles[&n];
        ensure!(b.energy.formatted == energy, "{n} queries: energy {} != {energy}", b.energy.formatted);
        ensure!(b.energy_sentence.contains(&format!("for {energy} hours")), "{n}: sentence {}", b.energy_sentence);
        if let Some(water) = water {
            ensure!(b.water.formatted == water, "{n} queries: water {} != {water}", b.water.formatted);
        }
    }
    let popup = popup_at_21.ok_or("no popup at 21 queries")?;
    let lines = popup.lines();
    let want = [
        "Limit Reached",
        "Energy used: 0.061 kWh",
        "That's enough energy to power a lightbulb for 6.090 hours!",
        "Water used: 0.357 liters",
        "That's enough water to fill 1.488 cups!",
    ];
    ensure!(lines == want, "popup lines {lines:?}");
    let fresh = ecometer_core::DisplayBundle::pristine("user_02", &cfg, base());
    ensure!(
        fresh.eco_score == 100 && fresh.energy.formatted == "0.000" && fresh.water.formatted == "0.000",
        "pristine bundle {fresh:?}"
    );
    let elapsed = started.elapsed();
    ensure!(elapsed <= std::time::Duration::from_millis(999), "took {elapsed:?}");
    Ok(format!("13 strings exact, {} ms", elapsed.as_millis()))
}

// ---------------------------------------------------------------------------
// 2. Daily dynamics

fn daily_dynamics() -> Outcome {
    let cfg = engine(7);
    let t = |min: i64| base() + Duration::minutes(min);
    let mut trace: Vec<_> = (0..6).map(|h| TraceEvent::new("user_01", t(h * 60), TraceKind::Query)).collect();
    trace.push(TraceEvent::new("user_01", t(360), TraceKind::Observe));
    trace.push(TraceEvent::new("user_01", t(360 + 8 * 60), TraceKind::Observe));
    let report = replay::replay(&trace, &cfg).map_err(|e| e.to_string())?;
    let scores: Vec<u32> = report.steps.iter().map(|s| s.score).collect();
    ensure!(scores[6] == 76, "end of day {scores:?}");
    ensure!(scores[7] == 100, "next morning {scores:?}");
    ensure!(report.final_bundles["user_01"].eco_score == 100, "final bundle");

    let schedule = PenaltySchedule::default();
    let mut low = EcoScoreState::new(&schedule, t(0));
    low.score = 0;
    let night = low.accrue(&schedule, t(8 * 60)).map_err(|e| e.to_string())?;
    ensure!(night.score == 24, "8 h from 0 gave {}", night.score);
    let mut evening = EcoScoreState::new(&schedule, t(0));
    evening.score = 76;
    let morning = evening.accrue(&schedule, t(8 * 60)).map_err(|e| e.to_string())?;
    ensure!(morning.score == 100, "8 h from 76 gave {}", morning.score);
    Ok(format!("day {scores:?}, overnight +24"))
}

// ---------------------------------------------------------------------------
// 3. Score properties over random traces

const MINUTE_MS: i64 = 60_000;
const TIERS: [(i64, u32); 7] = [(60, 7), (30, 8), (15, 9), (7, 10), (3, 11), (1, 12), (0, 13)];

fn oracle_penalty(pause_ms: Option<i64>) -> u32 {
    let Some(p) = pause_ms else { return 7 };
    for (minutes, penalty) in TIERS {
        if p >= minutes * MINUTE_MS {
            return penalty;
        }
    }
    13
}

/// Reference score model: integer score, 1 point per full 20 minutes idle
/// with the remainder carried, capped at 100, floored at 0.
#[derive(Clone)]
struct OracleScore {
    score: i64,
    clock_ms: i64,
    carry_ms: i64,
    last_query_ms: Option<i64>,
}

impl OracleScore {
    fn regen(&self, to_ms: i64) -> (i64, i64) {
        let total = self.carry_ms + (to_ms - self.clock_ms);
        ((self.score + total / (20 * MINUTE_MS)).min(100), total % (20 * MINUTE_MS))
    }

    fn query(&mut self, at_ms: i64) -> u32 {
        let (score, carry) = self.regen(at_ms);
        let penalty = oracle_penalty(self.last_query_ms.map(|l| at_ms - l));
        self.score = (score - i64::from(penalty)).max(0);
        self.carry_ms = carry;
        self.clock_ms = at_ms;
        self.last_query_ms = Some(at_ms);
        penalty
    }

    fn observe(&self, at_ms: i64) -> i64 {
        self.regen(at_ms.max(self.clock_ms)).0
    }
}

fn random_gap_ms(rng: &mut ChaCha8Rng) -> i64 {
    match rng.gen_range(0..6) {
        0 => {
            let (m, _) = *TIERS.choose(rng).unwrap();
            (m * MINUTE_MS + rng.gen_range(-1..=1)).max(0)
        }
        1 => rng.gen_range(0..10_000),
        2 => rng.gen_range(0..2 * 60 * MINUTE_MS),
        3 => rng.gen_range(8 * 60 * MINUTE_MS..30 * 60 * MINUTE_MS),
        4 => 20 * MINUTE_MS * rng.gen_range(0..5) + rng.gen_range(-1..=1).max(0),
        _ => rng.gen_range(0..15 * MINUTE_MS),
    }
}

fn random_trace(rng: &mut ChaCha8Rng) -> Vec<TraceEvent> {
    let users = rng.gen_range(1..=3);
    let mut events = vec![];
    for u in 0..users {
        let mut at = base() + Duration::milliseconds(rng.gen_range(0..3_600_000));
        for _ in 0..rng.gen_range(1..=30) {
            at += Duration::milliseconds(random_gap_ms(rng));
            let kind = if rng.gen_ratio(1, 6) { TraceKind::Observe } else { TraceKind::Query };
            events.push(TraceEvent::new(format!("user_{u:02}"), at, kind));
        }
    }
    events.sort_by_key(|e| e.occurred_at);
    events
}

fn score_properties() -> Outcome {
    let cfg = engine(7);
    let schedule = &cfg.schedule;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5c07e);
    let mut pairs: Vec<(i64, u32)> = vec![];
    let (mut steps, mut splits) = (0usize, 0usize);
    for trial in 0..10_000 {
        let trace = random_trace(&mut rng);
        let report = replay::replay(&trace, &cfg).map_err(|e| e.to_string())?;

        // Against the reference model, step by step.
        let mut oracles: std::collections::HashMap<&str, OracleScore> = Default::default();
        for (ev, step) in trace.iter().zip(&report.steps) {
            let at = ev.occurred_at.timestamp_millis();
            // Sessions begin at the first query.
            if ev.kind == TraceKind::Query {
                oracles.entry(ev.user_id.as_str()).or_insert(OracleScore {
                    score: 100,
                    clock_ms: at,
                    carry_ms: 0,
                    last_query_ms: None,
                });
            }
            let expected = match (ev.kind, oracles.get_mut(ev.user_id.as_str())) {
                (_, None) => 100,
                (TraceKind::Query, Some(o)) => {
                    let penalty = o.query(at);
                    ensure!(step.penalty == Some(penalty), "trial {trial}: penalty {:?} != {penalty}", step.penalty);
                    if let Some(p) = step.pause_ms {
                        pairs.push((p, penalty));
                    }
                    o.score
                }
                (_, Some(o)) => o.observe(at),
            };
            ensure!(step.score <= 100, "trial {trial}: score {} out of range", step.score);
            ensure!(i64::from(step.score) == expected, "trial {trial} step {}: {} != oracle {expected}", step.index, step.score);
            steps += 1;
        }

        // Accrual over a span equals accrual over any split of it.
        let mut state = EcoScoreState::new(schedule, base());
        state.score = rng.gen_range(0..=100);
        state.regen_remainder_ms = rng.gen_range(0..20 * MINUTE_MS);
        let span = rng.gen_range(0..48 * 60 * MINUTE_MS);
        let end = base() + Duration::milliseconds(span);
        let direct = state.accrue(schedule, end).map_err(|e| e.to_string())?;
        let mut cuts: Vec<i64> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0..=span)).collect();
        cuts.sort_unstable();
        let mut chained = state.clone();
        for c in cuts.into_iter().chain([span]) {
            chained = chained.accrue(schedule, base() + Duration::milliseconds(c)).map_err(|e| e.to_string())?;
        }
        ensure!(chained == direct, "trial {trial}: split accrual {chained:?} != {direct:?}");
        splits += 1;

        // Bit-exact determinism, and the emitted log rebuilds the same state.
        let again = replay::replay(&trace, &cfg).map_err(|e| e.to_string())?;
        let (a, b) = (serde_json::to_vec(&report).unwrap(), serde_json::to_vec(&again).unwrap());
        ensure!(a == b, "trial {trial}: replay not deterministic");
        let end = trace.last().unwrap().occurred_at;
        let rebuilt = rebuild(&report.log, &cfg).map_err(|e| e.to_string())?;
        for (user, s) in rebuilt {
            ensure!(s.bundle_at(&cfg, end) == report.final_bundles[&user], "trial {trial}: rebuild differs for {user}");
        }
    }
    pairs.sort_unstable();
    for w in pairs.windows(2) {
        ensure!(w[0].1 >= w[1].1, "penalty rises with pause: {:?} then {:?}", w[0], w[1]);
    }
    Ok(format!("10000 traces, {steps} steps, {splits} split checks, 0 violations"))
}

// ---------------------------------------------------------------------------
// 4. Popup cadence

fn popup_cadence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xca0e);
    let mut runs = 0;
    let mut fired_total = 0u64;
    for round in 0..30 {
        let custom = loop {
            let l = rng.gen_range(1..=60);
            if l != 3 && l != 7 {
                break l;
            }
        };
        for limit in [3u32, 7, custom] {
            let n: u64 = match round {
                0 => 0,
                1 => 10_000,
                _ => rng.gen_range(0..=10_000),
            };
            let cfg = engine(limit);
            let mut s = UserSession::new("user_01", &cfg, base());
            let mut fired = 0u64;
            for i in 1..=n {
                let at = base() + Duration::seconds(i as i64);
                let (outcome, rows) = s.on_query(&cfg, at).map_err(|e| e.to_string())?;
                let due = i % u64::from(limit) == 0;
                ensure!(outcome.popup.is_some() == due, "L={limit}: query {i} fired={}", outcome.popup.is_some());
                let Some(p) = outcome.popup else { continue };
                fired += 1;
                let f = figures(i);
                ensure!(p.query_count == i, "L={limit}: payload count {}", p.query_count);
                ensure!(p.energy_kwh == f.kwh && p.water_liters == f.liters, "L={limit} at {i}: {} kWh {} L", p.energy_kwh, p.water_liters);
                ensure!(
                    p.human_energy.formatted == f.energy && p.human_energy.unit_label.as_str() == f.energy_unit,
                    "L={limit} at {i}: energy {:?}",
                    p.human_energy
                );
                ensure!(
                    p.human_water.formatted == f.water && p.human_water.unit_label.as_str() == f.water_unit,
                    "L={limit} at {i}: water {:?}",
                    p.human_water
                );
                ensure!(rows.last().map(|r| r.event_type) == Some(EventType::PopupOpening), "no popup_opening row");
            }
            ensure!(fired == n / u64::from(limit), "L={limit} N={n}: {fired} popups");
            ensure!(s.popup.popups_fired == fired, "counter {}", s.popup.popups_fired);
            fired_total += fired;
            runs += 1;
        }
    }
    Ok(format!("{runs} runs, {fired_total} popups, 0 violations"))
}

// ---------------------------------------------------------------------------
// 5. Ingest filter

/// Hand-written reading of the detection rule. Only URLs of the form
/// `http(s)://host[:port][/path][?query][#fragment]` with a plain host are
/// considered well formed.
fn brute_force_is_query(method: &str, url: &str, status: u16) -> bool {
    if method != "POST" || status != 200 {
        return false;
    }
    if url.contains("init") || url.contains("implicit") {
        return false;
    }
    let rest = if let Some(r) = url.strip_prefix("https://") {
        r
    } else if let Some(r) = url.strip_prefix("http://") {
        r
    } else {
        return false;
    };
    let authority_end = rest.find(['/', '?', '#']).unwrap_or(rest.len());
    let (authority, tail) = rest.split_at(authority_end);
    let host = authority.split(':').next().unwrap_or("");
    if host.is_empty() || !host.chars().all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '-') {
        return false;
    }
    let path_end = tail.find(['?', '#']).unwrap_or(tail.len());
    let path = &tail[..path_end];
    path.starts_with("/backend-api/conversation")
}

const METHODS: [&str; 8] = ["POST", "POST", "POST", "GET", "PUT", "DELETE", "post", "OPTIONS"];
const STATUSES: [u16; 10] = [200, 200, 200, 201, 204, 400, 401, 429, 500, 503];
const HOSTS: [&str; 5] = ["chatgpt.com", "chatgpt.com", "chat.openai.com", "example.org", "chatgpt.com:8443"];
const PATHS: [&str; 14] = [
    "/backend-api/conversation",
    "/backend-api/conversation",
    "/backend-api/conversation/",
    "/backend-api/conversation/6650f0c1-1d3e-4a0b-9c55-1f2e3d4c5b6a",
    "/backend-api/conversation/init",
    "/backend-api/conversation/implicit_message_feedback",
    "/backend-api/conversations",
    "/backend-api/conversation_limit",
    "/backend-api/Conversation",
    "/backend-api/models",
    "/api/backend-api/conversation",
    "/backend-api/conversation/INIT",
    "/backend-api/sentinel/chat-requirements",
    "",
];
const QUERIES: [&str; 7] = ["", "", "", "?model=auto", "?mode=initial", "?src=implicit", "#top"];
const MALFORMED: [&str; 5] = [
    "not a url",
    "",
    "chatgpt.com/backend-api/conversation",
    "https://chat gpt.com/backend-api/conversation",
    "ftp//chatgpt.com/backend-api/conversation",
];

/// Half the corpus is a chat query with at most one field perturbed, the rest
/// is drawn freely from the pools.
fn corpus(rng: &mut ChaCha8Rng, n: usize) -> Vec<HttpTransactionRecord> {
    (0..n)
        .map(|i| {
            if rng.gen_bool(0.5) {
                let mut tx = HttpTransactionRecord {
                    user_id: format!("user_{:02}", i % 5),
                    method: "POST".into(),
                    url: format!("https://chatgpt.com{}", PATHS[rng.gen_range(0..4)]),
                    status: 200,
                    observed_at: base() + Duration::seconds(i as i64),
                };
                match rng.gen_range(0..5) {
                    0 => tx.method = METHODS.choose(rng).unwrap().to_string(),
                    1 => tx.status = *STATUSES.choose(rng).unwrap(),
                    2 => tx.url.push_str(QUERIES.choose(rng).unwrap()),
                    3 => tx.url = format!("https://chatgpt.com{}", PATHS.choose(rng).unwrap()),
                    _ => {}
                }
                return tx;
            }
            let url = if rng.gen_ratio(1, 25) {
                MALFORMED.choose(rng).unwrap().to_string()
            } else {
                let scheme = if rng.gen_ratio(1, 8) { "http" } else { "https" };
                format!(
                    "{scheme}://{}{}{}",
                    HOSTS.choose(rng).unwrap(),
                    PATHS.choose(rng).unwrap(),
                    QUERIES.choose(rng).unwrap()
                )
            };
            HttpTransactionRecord {
                user_id: format!("user_{:02}", i % 5),
                method: METHODS.choose(rng).unwrap().to_string(),
                url,
                status: *STATUSES.choose(rng).unwrap(),
                observed_at: base() + Duration::seconds(i as i64),
            }
        })
        .collect()
}

static BODY_READS: AtomicUsize = AtomicUsize::new(0);

/// A body that fails the check on any attempt to read or size it.
struct PoisonedBody;

impl http_body::Body for PoisonedBody {
    type Data = bytes::Bytes;
    type Error = std::io::Error;

    fn poll_frame(
        self: Pin<&mut Self>,
        _: &mut Context<'_>,
    ) -> Poll<Option<Result<http_body::Frame<bytes::Bytes>, std::io::Error>>> {
        BODY_READS.fetch_add(1, Ordering::SeqCst);
        panic!("body was read");
    }

    fn is_end_stream(&self) -> bool {
        BODY_READS.fetch_add(1, Ordering::SeqCst);
        panic!("body was inspected");
    }

    fn size_hint(&self) -> http_body::SizeHint {
        BODY_READS.fetch_add(1, Ordering::SeqCst);
        panic!("body was inspected");
    }
}

fn ingest_filter() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf11e);
    let txs = corpus(&mut rng, 1000);
    let filter = QueryFilter::default();
    let mut positives = 0;
    for tx in &txs {
        let expected = brute_force_is_query(&tx.method, &tx.url, tx.status);
        let got = filter.classify(tx, QuerySource::Webhook).is_some();
        ensure!(got == expected, "{} {} {}: classify={got} oracle={expected}", tx.method, tx.url, tx.status);
        positives += usize::from(expected);
    }
    ensure!(positives > 200 && positives < 800, "corpus is degenerate: {positives} positives");

    // Proxy path: records are built from heads only.
    let mut via_proxy = 0;
    for tx in txs.iter().filter(|t| t.url.starts_with("http") && t.url.contains("://") && !t.url.contains(' ') && !t.url.contains('#')) {
        let rest = tx.url.split_once("://").unwrap().1;
        let cut = rest.find(['/', '?']).unwrap_or(rest.len());
        let origin = &tx.url[..tx.url.len() - rest.len() + cut];
        let target = if rest[cut..].is_empty() { "/".to_string() } else { rest[cut..].to_string() };
        let target = if target.starts_with('?') { format!("/{target}") } else { target };
        let settings = ecometer::config::ProxySettings {
            public_base_url: origin.to_string(),
            ..Default::default()
        };
        let req = axum::http::Request::builder()
            .method(tx.method.as_str())
            .uri(&target)
            .header("x-ecometer-user", &tx.user_id)
            .body(PoisonedBody)
            .map_err(|e| format!("{}: {e}", tx.url))?;
        let resp = axum::http::Response::builder().status(tx.status).body(PoisonedBody).unwrap();
        let pending = PendingTransaction::from_request(&req, &settings).ok_or("no pending record")?;
        let record = pending.complete(&resp, tx.observed_at);
        let expected = brute_force_is_query(&record.method, &record.url, record.status);
        ensure!(
            filter.classify(&record, QuerySource::Proxy).is_some() == expected,
            "proxy record {record:?} misclassified"
        );
        via_proxy += 1;
    }
    ensure!(BODY_READS.load(Ordering::SeqCst) == 0, "bodies were touched");

    // Webhook path: one dispatched query per matching transaction.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = ServiceConfig::default();
    cfg.storage.dir = dir.path().to_path_buf();
    cfg.storage.fsync = false;
    let svc = Service::open(cfg, Arc::new(ManualClock::new(base()))).map_err(|e| e.to_string())?;
    for tx in &txs {
        svc.ingest_transaction(TransactionReport {
            user_id: Some(tx.user_id.clone()),
            method: tx.method.clone(),
            url: tx.url.clone(),
            status: tx.status,
            observed_at: tx.observed_at,
            idempotency_key: None,
        })
        .map_err(|e| e.to_string())?;
    }
    let h = svc.health();
    ensure!(h.queries_detected as usize == positives, "service dispatched {} of {positives}", h.queries_detected);
    let logged = event_log::read_all(dir.path().join("events.jsonl")).map_err(|e| e.to_string())?;
    let query_rows = logged.iter().filter(|r| r.event_type == EventType::Query).count();
    ensure!(query_rows == positives, "{query_rows} query rows for {positives} queries");
    Ok(format!("1000 transactions ({positives} queries), {via_proxy} via proxy heads, 0 mismatches, 0 body reads"))
}

// ---------------------------------------------------------------------------
// 6. History analyzer

/// Flat scan over the raw JSON: every node whose author role is "user" and
/// whose create_time is a number, compared in seconds.
fn flat_scan(doc: &serde_json::Value, window: &AnalysisWindow) -> (u64, u64) {
    let lo = window.pre_start().timestamp() as f64;
    let mid = window.download_date.timestamp() as f64;
    let hi = window.trial_end().timestamp() as f64;
    let (mut pre, mut trial) = (0, 0);
    for conv in doc.as_array().into_iter().flatten() {
        let Some(mapping) = conv.get("mapping").and_then(|m| m.as_object()) else { continue };
        for node in mapping.values() {
            let message = &node["message"];
            if message["author"]["role"] != "user" {
                continue;
            }
            let Some(t) = message["create_time"].as_f64() else { continue };
            if lo <= t && t < mid {
                pre += 1;
            } else if mid <= t && t <= hi {
                trial += 1;
            }
        }
    }
    (pre, trial)
}

fn history_analyzer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4157);
    let mut edge_hits = 0;
    for i in 0..100 {
        let date = NaiveDate::from_ymd_opt(2023, 1, 1).unwrap() + Duration::days(rng.gen_range(0..1000));
        let window = AnalysisWindow::from_date(date);
        let doc = synth::random_export(&mut rng, &window);
        let text = doc.to_string();
        edge_hits += [window.pre_start(), window.download_date, window.trial_end()]
            .iter()
            .filter(|b| text.contains(&format!("{}", b.timestamp())))
            .count();
        let parsed = history::parse_export(&text).map_err(|e| format!("export {i}: {e}"))?;
        let got = history::count_windows(&parsed, &window);
        let (pre, trial) = flat_scan(&doc, &window);
        ensure!(
            (got.queries_before_trial, got.queries_in_trial) == (pre, trial),
            "export {i}: analyzer ({}, {}) vs scan ({pre}, {trial})",
            got.queries_before_trial,
            got.queries_in_trial
        );
    }
    ensure!(edge_hits > 50, "boundary instants rarely exercised ({edge_hits})");

    let window = AnalysisWindow::from_date(NaiveDate::from_ymd_opt(2025, 2, 3).unwrap());
    let doc = synth::fixed_counts_export(&window, 42, 58);
    let parsed = history::parse_export(&doc.to_string()).map_err(|e| e.to_string())?;
    let report = history::footprint_report(&history::count_windows(&parsed, &window), &Profile::PaperText.model());
    let text = report.to_text();
    ensure!(text.contains("Number of queries before study period: 42\n"), "fixture output:\n{text}");
    Ok(format!("100 exports, 0 mismatches, {edge_hits} boundary instants; fixture prints 42"))
}

// ---------------------------------------------------------------------------
// 7. Event-log fidelity

const EXPECTED_LOG: &str = "\
{\"user_id\":\"user_01\",\"timestamp\":\"2025-01-20T09:00:00.000Z\",\"event_type\":\"query\"}
{\"user_id\":\"user_01\",\"timestamp\":\"2025-01-20T09:01:00.000Z\",\"event_type\":\"query\"}
{\"user_id\":\"user_01\",\"timestamp\":\"2025-01-20T09:02:00.000Z\",\"event_type\":\"query\"}
{\"user_id\":\"user_02\",\"timestamp\":\"2025-01-20T09:02:30.000Z\",\"event_type\":\"query\"}
{\"user_id\":\"user_01\",\"timestamp\":\"2025-01-20T09:03:00.000Z\",\"event_type\":\"query\"}
{\"user_id\":\"user_02\",\"timestamp\":\"2025-01-20T09:03:30.000Z\",\"event_type\":\"query\"}
{\"user_id\":\"user_01\",\"timestamp\":\"2025-01-20T09:04:00.000Z\",\"event_type\":\"query\"}
{\"user_id\":\"user_01\",\"timestamp\":\"2025-01-20T09:05:00.000Z\",\"event_type\":\"query\"}
{\"user_id\":\"user_01\",\"timestamp\":\"2025-01-20T09:06:00.000Z\",\"event_type\":\"query\"}
{\"user_id\":\"user_01\",\"timestamp\":\"2025-01-20T09:06:00.000Z\",\"event_type\":\"popup_opening\"}
{\"user_id\":\"user_01\",\"timestamp\":\"2025-01-20T09:06:20.000Z\",\"event_type\":\"readmore_clicked\"}
{\"user_id\":\"user_01\",\"timestamp\":\"2025-01-20T09:06:40.000Z\",\"event_type\":\"popup_closed\"}
{\"user_id\":\"user_02\",\"timestamp\":\"2025-01-20T09:07:00.000Z\",\"event_type\":\"query\"}
{\"user_id\":\"user_01\",\"timestamp\":\"2025-01-20T09:16:00.000Z\",\"event_type\":\"query\"}
{\"user_id\":\"user_01\",\"timestamp\":\"2025-01-20T09:17:00.000Z\",\"event_type\":\"query\"}
{\"user_id\":\"user_01\",\"timestamp\":\"2025-01-20T09:18:00.000Z\",\"event_type\":\"query\"}
{\"user_id\":\"user_01\",\"timestamp\":\"2025-01-20T09:19:00.000Z\",\"event_type\":\"query\"}
{\"user_id\":\"user_01\",\"timestamp\":\"2025-01-20T09:20:00.000Z\",\"event_type\":\"query\"}
{\"user_id\":\"user_01\",\"timestamp\":\"2025-01-20T09:21:00.000Z\",\"event_type\":\"query\"}
{\"user_id\":\"user_01\",\"timestamp\":\"2025-01-20T09:22:00.000Z\",\"event_type\":\"query\"}
{\"user_id\":\"user_01\",\"timestamp\":\"2025-01-20T09:22:00.000Z\",\"event_type\":\"popup_opening\"}
{\"user_id\":\"user_01\",\"timestamp\":\"2025-01-20T09:23:00.000Z\",\"event_type\":\"popup_closed\"}
{\"user_id\":\"user_01\",\"timestamp\":\"2025-01-20T09:31:59.999Z\",\"event_type\":\"query\"}
";

enum Step {
    Query(&'static str, &'static str),
    Ui(&'static str, &'static str, &'static str),
}

fn session_script() -> Vec<Step> {
    use Step::*;
    vec![
        Query("user_01", "09:00:00"),
        Query("user_01", "09:01:00"),
        Query("user_01", "09:02:00"),
        Query("user_02", "09:02:30"),
        Query("user_01", "09:03:00"),
        Query("user_02", "09:03:30"),
        Query("user_01", "09:04:00"),
        Query("user_01", "09:05:00"),
        Query("user_01", "09:06:00"),
        Ui("user_01", "readmore_clicked", "09:06:20"),
        Ui("user_01", "popup_closed", "09:06:40"),
        // A second close with nothing open is not logged.
        Ui("user_01", "popup_closed", "09:06:50"),
        Query("user_02", "09:07:00"),
        // Exactly ten minutes after the first popup opened.
        Query("user_01", "09:16:00"),
        Query("user_01", "09:17:00"),
        Query("user_01", "09:18:00"),
        Query("user_01", "09:19:00"),
        Query("user_01", "09:20:00"),
        Query("user_01", "09:21:00"),
        Query("user_01", "09:22:00"),
        Ui("user_01", "popup_closed", "09:23:00"),
        // One millisecond short of ten minutes after the second.
        Query("user_01", "09:31:59.999"),
    ]
}

fn ts(hms: &str) -> DateTime<Utc> {
    ecometer_core::timefmt::parse(&format!("2025-01-20T{hms}Z")).unwrap()
}

fn event_log_fidelity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = ServiceConfig { profile: Profile::PaperFigures, ..Default::default() };
    cfg.storage.dir = dir.path().to_path_buf();
    cfg.storage.fsync = false;
    cfg.storage.alias_mode = AliasMode::Passthrough;
    let svc = Service::open(cfg.clone(), Arc::new(ManualClock::new(base()))).map_err(|e| e.to_string())?;
    let mut trace = vec![];
    for step in session_script() {
        match step {
            Step::Query(user, at) => {
                let url = support::CHAT_URL.to_string();
                let report = TransactionReport {
                    user_id: Some(user.into()),
                    method: "POST".into(),
                    url,
                    status: 200,
                    observed_at: ts(at),
                    idempotency_key: None,
                };
                svc.ingest_transaction(report).map_err(|e| e.to_string())?;
                trace.push(TraceEvent::new(user, ts(at), TraceKind::Query));
            }
            Step::Ui(user, kind, at) => {
                svc.ui_event(user, kind, Some(ts(at))).map_err(|e| e.to_string())?;
                let kind = if kind == "popup_closed" { TraceKind::PopupClosed } else { TraceKind::ReadmoreClicked };
                trace.push(TraceEvent::new(user, ts(at), kind));
            }
        }
    }
    let text = std::fs::read_to_string(cfg.storage.log_path()).map_err(|e| e.to_string())?;
    ensure!(text == EXPECTED_LOG, "JSONL log differs:\n{text}");

    let replayed = replay::replay(&trace, &cfg.engine()).map_err(|e| e.to_string())?;
    let replayed_text: String = replayed.log.iter().map(|r| r.to_json_line()).collect();
    ensure!(replayed_text == EXPECTED_LOG, "replay log differs:\n{replayed_text}");

    let records = event_log::read_all(cfg.storage.log_path()).map_err(|e| e.to_string())?;
    let labels: std::collections::BTreeSet<&str> = records.iter().map(|r| r.event_type.as_str()).collect();
    ensure!(
        labels.iter().all(|l| ["query", "popup_opening", "popup_closed", "readmore_clicked"].contains(l)) && labels.len() == 4,
        "labels {labels:?}"
    );
    for user in ["user_01", "user_02"] {
        let times: Vec<_> = records.iter().filter(|r| r.user_id == user).map(|r| r.timestamp).collect();
        ensure!(times.windows(2).all(|w| w[0] <= w[1]), "{user} rows out of order");
    }

    let expected_csv: String = std::iter::once("user_id,timestamp,event_type\n".to_string())
        .chain(EXPECTED_LOG.lines().map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            format!("{},{},{}\n", v["user_id"].as_str().unwrap(), v["timestamp"].as_str().unwrap(), v["event_type"].as_str().unwrap())
        }))
        .collect();
    let csv = event_log::export(&records, TimeWindow::default(), ExportFormat::Csv);
    ensure!(csv == expected_csv, "CSV differs:\n{csv}");

    let report = event_log::popup_dwell_report(&records);
    let got: Vec<_> = report
        .popups
        .iter()
        .map(|p| (p.user_id.as_str(), p.opened_at, p.dwell_ms, p.next_query_delay_ms, p.bucket))
        .collect();
    let want = vec![
        ("user_01", ts("09:06:00"), Some(40_000), Some(600_000), DelayBucket::TenMinutesOrMore),
        ("user_01", ts("09:22:00"), Some(60_000), Some(599_999), DelayBucket::UnderTenMinutes),
    ];
    ensure!(got == want, "dwell report {got:?}");
    ensure!(
        (report.under_ten_minutes, report.ten_minutes_or_more, report.no_follow_up, report.incomplete, report.unmatched_closes)
            == (1, 1, 0, 0, 0),
        "dwell totals {report:?}"
    );
    Ok("23 rows, JSONL/CSV/replay identical, dwell 40 s and 60 s, buckets split at 10 min".into())
}

// ---------------------------------------------------------------------------
// 8. Crash recovery

struct Instance {
    child: Child,
    addr: SocketAddr,
}

impl Instance {
    fn start(config: &Path) -> Result<Self, String> {
        let mut child = Command::new(env!("CARGO_BIN_EXE_ecometer"))
            .args(["serve", "--config"])
            .arg(config)
            .env_remove("ECOMETER_LISTEN")
            .env_remove("ECOMETER_STORAGE_DIR")
            .env("RUST_LOG", "warn")
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?;
        let mut line = String::new();
        BufReader::new(child.stdout.as_mut().unwrap()).read_line(&mut line).map_err(|e| e.to_string())?;
        let addr = line
            .trim()
            .strip_prefix("listening on http://")
            .and_then(|a| a.parse().ok())
            .ok_or_else(|| format!("unexpected banner {line:?}"))?;
        Ok(Self { child, addr })
    }

    /// SIGKILL: no shutdown snapshot, no flushing beyond what was written.
    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Clone)]
enum CrashEvent {
    Query(&'static str, DateTime<Utc>),
    Ui(&'static str, &'static str, DateTime<Utc>),
}

fn crash_script() -> Vec<CrashEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc4a5);
    let mut at = base();
    let mut out = vec![];
    for i in 0..40 {
        at += Duration::seconds(rng.gen_range(1..1800));
        let user = if rng.gen_ratio(2, 3) { "alice" } else { "bob" };
        out.push(match i % 7 {
            5 => CrashEvent::Ui(user, "popup_closed", at),
            6 if user == "bob" => CrashEvent::Ui(user, "readmore_clicked", at),
            _ => CrashEvent::Query(user, at),
        });
    }
    out
}

fn send(addr: SocketAddr, ev: &CrashEvent) -> Result<(), String> {
    let reply = match ev {
        CrashEvent::Query(user, at) => support::post(
            addr,
            "/v1/events/transaction",
            &support::transaction(user, support::CHAT_URL, &ecometer_core::timefmt::format(at)),
        ),
        CrashEvent::Ui(user, kind, at) => support::post(
            addr,
            "/v1/events/ui",
            &serde_json::json!({ "user_id": user, "kind": kind, "at": ecometer_core::timefmt::format(at) }).to_string(),
        ),
    };
    ensure!(reply.status == 200, "event rejected: {} {}", reply.status, reply.body);
    Ok(())
}

/// Raw session state per user plus the panel at a fixed instant. Aliases are
/// minted per storage directory, so they come back separately.
fn observe(addr: SocketAddr) -> (Vec<String>, Vec<Option<String>>) {
    let probe = "2025-01-21T12:00:00.000Z";
    let mut state = vec![];
    let mut aliases = vec![];
    for u in ["alice", "bob"] {
        let session = support::get(addr, &format!("/v1/session/{u}"));
        let mut body: serde_json::Value = serde_json::from_str(&session.body).unwrap_or_default();
        let inner = body.pointer_mut("/ledger").and_then(|l| l.as_object_mut()).and_then(|o| o.remove("user_id"));
        let outer = body.as_object_mut().and_then(|o| o.remove("user_id"));
        if inner != outer {
            return (vec![format!("session and ledger disagree on the alias for {u}")], vec![]);
        }
        aliases.push(outer.map(|a| a.to_string()));
        state.push(format!("{} {body}", session.status));
        state.push(support::get(addr, &format!("/v1/state/{u}?at={probe}")).body);
    }
    (state, aliases)
}

fn write_config(dir: &Path) -> Result<std::path::PathBuf, String> {
    let path = dir.join("ecometer.toml");
    let text = format!(
        "profile = \"paper-figures\"\n[popup]\nlimit = 3\n[server]\nlisten = \"127.0.0.1:0\"\n\
         [storage]\ndir = \"{}\"\nfsync = true\nsnapshot_every = 4\n",
        dir.join("data").display()
    );
    std::fs::write(&path, text).map_err(|e| e.to_string())?;
    Ok(path)
}

fn crash_recovery() -> Outcome {
    let script = crash_script();

    let reference_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let reference = Instance::start(&write_config(reference_dir.path())?)?;
    let mut expected = vec![];
    for ev in &script {
        send(reference.addr, ev)?;
        expected.push(observe(reference.addr).0);
    }
    reference.kill();

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = write_config(dir.path())?;
    let kill_points = [1usize, 4, 11, 23, 33, script.len()];
    let mut sent = 0;
    let mut restarts = 0;
    let mut known_aliases: Vec<Option<String>> = vec![None, None];
    let mut check = |addr, sent: usize, when: &str| -> Result<(), String> {
        let (state, aliases) = observe(addr);
        ensure!(state == expected[sent - 1], "{when}: state differs at event {sent}: {state:?}");
        for (known, now) in known_aliases.iter_mut().zip(aliases) {
            ensure!(known.is_none() || *known == now, "{when}: alias changed from {known:?} to {now:?}");
            *known = now;
        }
        Ok(())
    };
    for (round, &k) in kill_points.iter().enumerate() {
        let inst = Instance::start(&config)?;
        if sent > 0 {
            check(inst.addr, sent, &format!("after restart {restarts}"))?;
        }
        while sent < k {
            send(inst.addr, &script[sent])?;
            sent += 1;
        }
        check(inst.addr, sent, "live")?;
        inst.kill();
        restarts += 1;
        if round % 2 == 1 {
            // A write cut short by the kill.
            use std::io::Write;
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(dir.path().join("data/events.jsonl"))
                .map_err(|e| e.to_string())?;
            f.write_all(b"{\"user_id\":\"user_").map_err(|e| e.to_string())?;
        }
    }
    let inst = Instance::start(&config)?;
    let verdict = check(inst.addr, script.len(), "final restart");
    inst.kill();
    verdict?;
    Ok(format!("{} events, {restarts} SIGKILLs, state equal at every kill point", script.len()))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "golden figures", golden_figures),
        (2, "daily score dynamics", daily_dynamics),
        (3, "score property suite", score_properties),
        (4, "popup cadence", popup_cadence),
        (5, "ingest filter", ingest_filter),
        (6, "history analyzer", history_analyzer),
        (7, "event-log fidelity", event_log_fidelity),
        (8, "crash recovery", crash_recovery),
    ];
    let mut failures = 0;
    for (n, name, check) in criteria {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS: {detail}"),
            Err(why) => {
                failures += 1;
                println!("criterion {n} ({name}): FAIL: {why}");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
