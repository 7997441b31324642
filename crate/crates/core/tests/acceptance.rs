//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::io::{BufRead, BufReader};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use tmaguard::bus::tcp::{Broker, TcpClient};
use tmaguard::bus::{decode_envelope, encode_envelope, Envelope, InProcBus, TopicQos, Transport};
use tmaguard::config::Config;
use tmaguard::geometry::{BoundingBox, LaneAssignment};
use tmaguard::pipeline::PipelineConfig;
use tmaguard::ranging::{estimate_distance, DepthImage, SpeedOutcome, SpeedTracker, TrackerParams};
use tmaguard::report::{replay, run_direct, run_live};
use tmaguard::safety::{compute_ssd_ft, SsdParams, WarningMode};
use tmaguard::sim::ScenarioConfig;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn quiet_lab() -> ScenarioConfig {
    let mut c = ScenarioConfig::lab();
    c.noise_sigma0_m = 0.0;
    c.noise_k = 0.0;
    c
}

fn c1_ssd_table() -> Outcome {
    // Designed stopping sight distance on level roadways, ft.
    let expected = [
        (15, 80),
        (20, 115),
        (25, 155),
        (30, 200),
        (35, 250),
        (40, 305),
        (45, 360),
        (50, 425),
        (55, 495),
        (60, 570),
        (65, 645),
        (70, 730),
        (75, 820),
        (80, 910),
    ];
    let p = SsdParams::default();
    for (v, ssd) in expected {
        let ft = compute_ssd_ft(v as f64, &p).map_err(|e| e.to_string())?;
        let rounded = (ft / 5.0).ceil() * 5.0;
        check(rounded == ssd as f64, format!("{v} mph: got {rounded}, expected {ssd}"))?;
    }
    Ok("14/14 rows exact".into())
}

fn c2_ssd_spot_values() -> Outcome {
    let p = SsdParams::default();
    let hand = |v: f64| 1.47 * v * 2.5 + 1.075 * v * v / 11.2;
    let mut parts = Vec::new();
    for (v, want) in [(60.0, 566.04), (15.0, 76.72)] {
        let got = compute_ssd_ft(v, &p).map_err(|e| e.to_string())?;
        check((got - want).abs() <= 0.01, format!("{v} mph: {got} vs {want}"))?;
        check((got - hand(v)).abs() <= 1e-9, format!("{v} mph: {got} vs hand {}", hand(v)))?;
        parts.push(format!("{v} mph -> {got:.4} ft"));
    }
    Ok(parts.join(", "))
}

fn c3_noise_free_exactness() -> Outcome {
    let mut cfg = Config {
        scenario: quiet_lab(),
        ..Config::default()
    };
    cfg.scenario.relative_speed_mps = -0.2;
    let out = run_live(&cfg, None).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for r in &out.report.rows {
        let (Some(est), Some(truth)) = (r.distance_est_m, r.distance_truth_m) else {
            return Err(format!("frame {} has no distance estimate", r.seq));
        };
        worst = worst.max((est - truth).abs());
    }
    check(worst <= 1e-6, format!("max distance error {worst:e}"))?;
    let s = &out.report.summary;
    let mean = s.mean_speed_mps.ok_or("no speed estimates")?;
    let mse = s.speed_mse.ok_or("no speed MSE")?;
    check((mean + 0.2).abs() <= 0.005, format!("mean speed {mean}"))?;
    check(mse < 1e-4, format!("MSE {mse}"))?;
    Ok(format!(
        "{} frames, max |d-d*| {worst:.1e} m, mean {mean:.6} m/s, MSE {mse:.2e}",
        s.frames
    ))
}

fn c4_noise_behavior() -> Outcome {
    // Finite-difference variance of noisy range samples.
    let sigma = 0.005;
    let dt_ns = 100_000_000u64;
    let dt = dt_ns as f64 * 1e-9;
    let n = 20_001;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise = Normal::new(0.0, sigma).unwrap();
    let bbox = BoundingBox::new(0, 0, 3, 3).unwrap();
    let mut tracker = SpeedTracker::new();
    let mut speeds = Vec::new();
    for k in 0..n {
        let z = 500.0 - 0.2 * k as f64 * dt;
        let mut depth = DepthImage::empty(3, 3);
        depth.set(1, 1, z + noise.sample(&mut rng));
        let sample = estimate_distance(&depth, &bbox, k as u64 * dt_ns).map_err(|e| e.to_string())?;
        if let SpeedOutcome::Estimate(e) = tracker.observe(sample, &TrackerParams::default()) {
            speeds.push(e.speed_mps);
        }
    }
    let m = speeds.iter().sum::<f64>() / speeds.len() as f64;
    let var = speeds.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (speeds.len() - 1) as f64;
    let predicted = 2.0 * sigma * sigma / (dt * dt);
    let ratio = var / predicted;
    check(speeds.len() >= 10_000, "too few samples")?;
    check((1.0 / 1.5..=1.5).contains(&ratio), format!("variance ratio {ratio}"))?;

    // Pipeline MSE across per-pixel noise levels.
    let mut mses = Vec::new();
    for s in [0.0, 0.005, 0.02, 0.05] {
        let mut sc = quiet_lab();
        sc.relative_speed_mps = -0.2;
        sc.noise_sigma0_m = s;
        sc.seed = 11;
        let out = run_direct(&sc, &PipelineConfig::default()).map_err(|e| e.to_string())?;
        mses.push(out.report.summary.speed_mse.ok_or("no MSE")?);
    }
    check(
        mses.windows(2).all(|w| w[0] <= w[1]),
        format!("MSE not nondecreasing: {mses:?}"),
    )?;
    Ok(format!(
        "{} estimates, var/predicted {ratio:.3}; MSE by sigma {:?}",
        speeds.len(),
        mses.iter().map(|m| format!("{m:.2e}")).collect::<Vec<_>>()
    ))
}

fn c5_lane_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut checked, mut unlabeled, mut s2_ranges, mut s2_warns) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..100u64 {
        let mut sc = quiet_lab();
        sc.seed = i;
        sc.lane_width_m = rng.random_range(0.30..=0.40);
        sc.camera_lateral_offset_m = rng.random_range(-0.05..=0.05);
        sc.relative_speed_mps = -rng.random_range(0.1..=0.4);
        sc.follower_lane = if i % 4 < 2 { LaneAssignment::Left } else { LaneAssignment::Right };
        let other = if sc.follower_lane == LaneAssignment::Left {
            LaneAssignment::Right
        } else {
            LaneAssignment::Left
        };
        let scenario2 = i % 2 == 1;
        sc.target_lane = if scenario2 { other } else { sc.follower_lane };
        let pc = PipelineConfig {
            monitored_lane: sc.follower_lane,
            ..PipelineConfig::default()
        };
        let out = run_direct(&sc, &pc).map_err(|e| e.to_string())?;
        for (t, row) in out.telemetry.iter().zip(&out.report.rows) {
            if !t.lanes_found {
                unlabeled += 1;
                continue;
            }
            for lane in &t.lanes {
                checked += 1;
                check(
                    Some(*lane) == row.truth_lane,
                    format!("scenario {i} frame {}: {lane} vs truth {:?}", t.seq, row.truth_lane),
                )?;
            }
            if scenario2 {
                s2_ranges += t.range_samples;
                s2_warns += t.warn as usize;
            }
        }
    }
    check(checked > 0, "no detections checked")?;
    check(s2_ranges == 0 && s2_warns == 0, format!("scenario 2: {s2_ranges} ranges, {s2_warns} warnings"))?;
    Ok(format!(
        "100 scenarios, {checked} detections all correct ({unlabeled} frames without three lanes); scenario 2: 0 ranges, 0 warnings"
    ))
}

fn c6_trigger_fidelity() -> Outcome {
    let speeds = [-0.1, -0.2, -0.3, -0.4];
    let mut lines = Vec::new();
    for run in 0..20u64 {
        let mut cfg = Config::default();
        cfg.scenario.seed = 100 + run;
        cfg.scenario.initial_distance_m = 3.005;
        cfg.scenario.duration_s = 40.0;
        cfg.scenario.relative_speed_mps = speeds[run as usize % 4];
        let v = cfg.scenario.relative_speed_mps;
        // Independent crossing frame from the motion model.
        let truth = (0u64..)
            .find(|&k| 3.005 + v * (k as f64 / 10.0) < 0.3)
            .expect("target reaches 0.3 m");
        let out = run_live(&cfg, None).map_err(|e| e.to_string())?;
        let first = out.report.summary.first_warn_seq;
        check(first == Some(truth), format!("run {run} ({v} m/s): first warn {first:?}, truth {truth}"))?;
        lines.push(truth);
    }
    Ok(format!("20/20 runs exact (crossing frames {lines:?})"))
}

fn c7_field_threshold() -> Outcome {
    let v = -60.0 * 0.44704;
    let mut parts = Vec::new();
    for (mode, ssd_ft) in [
        (WarningMode::FieldContinuous, 1.47 * 60.0 * 2.5 + 1.075 * 3600.0 / 11.2),
        (WarningMode::FieldTable, 570.0),
    ] {
        let threshold_m = ssd_ft * 0.3048;
        let mut sc = ScenarioConfig::field();
        sc.noise_sigma0_m = 0.0;
        sc.noise_k = 0.0;
        sc.relative_speed_mps = v;
        let pc = PipelineConfig {
            mode,
            ..PipelineConfig::default()
        };
        let out = run_direct(&sc, &pc).map_err(|e| e.to_string())?;
        let truth = out
            .report
            .rows
            .iter()
            .find(|r| r.distance_truth_m.is_some_and(|d| d < threshold_m))
            .map(|r| r.seq)
            .ok_or("target never crosses the threshold")?;
        let first = out.report.summary.first_warn_seq.ok_or(format!("{mode}: never warned"))?;
        check(first.abs_diff(truth) <= 1, format!("{mode}: flip at {first}, crossing at {truth}"))?;
        let latched = out.report.rows.iter().all(|r| r.warn == (r.seq >= first));
        check(latched, format!("{mode}: warning is not a single off-to-on flip"))?;
        parts.push(format!("{mode} {threshold_m:.2} m: flip {first}, crossing {truth}"));
    }
    Ok(parts.join("; "))
}

struct Reaper(Vec<Child>);

impl Drop for Reaper {
    fn drop(&mut self) {
        for c in &mut self.0 {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn wait_ok(child: &mut Child, name: &str, deadline: Instant) -> Result<(), String> {
    loop {
        if let Some(status) = child.try_wait().map_err(|e| e.to_string())? {
            return check(status.success(), format!("{name} exited with {status}"));
        }
        if Instant::now() > deadline {
            return Err(format!("{name} timed out"));
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

fn c8_distributed_equivalence() -> Outcome {
    let exe = env!("CARGO_BIN_EXE_tmaguard");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "[scenario]\npreset = \"lab\"\nrelative_speed_mps = -0.2\ninitial_distance_m = 1.5\nduration_s = 10.0\nseed = 7\n",
    )
    .map_err(|e| e.to_string())?;
    let cfg = cfg.to_str().unwrap();
    let path = |p: &str| dir.path().join(p).to_str().unwrap().to_owned();

    let inproc = Command::new(exe)
        .args(["sim", "run", "--config", cfg, "--out", &path("inproc")])
        .output()
        .map_err(|e| e.to_string())?;
    check(inproc.status.success(), String::from_utf8_lossy(&inproc.stderr))?;

    let mut procs = Reaper(Vec::new());
    let mut broker = Command::new(exe)
        .args(["bus", "serve", "--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut line = String::new();
    BufReader::new(broker.stdout.take().unwrap())
        .read_line(&mut line)
        .map_err(|e| e.to_string())?;
    procs.0.push(broker);
    let addr = line.trim().strip_prefix("listening on ").ok_or(format!("broker said {line:?}"))?.to_owned();

    let spawn = |args: &[&str]| {
        Command::new(exe)
            .args(args)
            .args(["--bus", &addr, "--config", cfg])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())
    };
    let deadline = Instant::now() + Duration::from_secs(60);
    procs.0.push(spawn(&["node", "led", "--out", &path("tcp")])?);
    procs.0.push(spawn(&["node", "perception", "--out", &path("tcp")])?);
    procs.0.push(spawn(&["node", "sensor"])?);
    for (i, name) in [(3, "sensor"), (2, "perception"), (1, "led")] {
        wait_ok(&mut procs.0[i], name, deadline)?;
    }

    let read = |p: String| std::fs::read(&p).map_err(|e| format!("{p}: {e}"));
    let tel_a = read(path("inproc/telemetry.csv"))?;
    let tel_b = read(path("tcp/telemetry.csv"))?;
    check(tel_a == tel_b, "telemetry CSVs differ")?;
    let led_a = read(path("inproc/led.csv"))?;
    let led_b = read(path("tcp/led.csv"))?;
    check(led_a == led_b, "LED decision sequences differ")?;
    let frames = tel_a.iter().filter(|&&b| b == b'\n').count() - 1;
    let warns = String::from_utf8_lossy(&led_a).matches(",true").count();
    check(frames > 0 && warns > 0, "run has no frames or no warnings")?;
    Ok(format!("{frames} frames, {warns} warn decisions; telemetry and LED sequences identical"))
}

fn c9_bus_properties() -> Outcome {
    const N: u64 = 100_000;
    let fifo = |t_sub: &dyn Transport, t_pub: &dyn Transport, sync: &dyn Fn()| -> Result<(), String> {
        let sub = t_sub.subscribe("/fifo", TopicQos::Lossless).map_err(|e| e.to_string())?;
        sync();
        let publisher = std::thread::scope(|s| {
            let h = s.spawn(|| {
                for i in 0..N {
                    t_pub.publish("/fifo", &i.to_be_bytes(), i).unwrap();
                }
            });
            for i in 0..N {
                let e = sub.recv_timeout(Duration::from_secs(10)).map_err(|e| format!("at {i}: {e}"))?;
                check(e.seq == i && e.payload == i.to_be_bytes(), format!("expected {i}, got seq {}", e.seq))?;
            }
            h.join().map_err(|_| "publisher panicked".to_owned())
        });
        publisher?;
        check(sub.pending() == 0, "duplicate deliveries")
    };
    let bus = InProcBus::new();
    fifo(&bus.client(), &bus.client(), &|| {})?;
    let h = Broker::bind("127.0.0.1:0").map_err(|e| e.to_string())?.spawn();
    let addr = h.local_addr().to_string();
    let a = TcpClient::connect(&addr).map_err(|e| e.to_string())?;
    let b = TcpClient::connect(&addr).map_err(|e| e.to_string())?;
    let sync = || {
        let s = a.subscribe("/sync", TopicQos::Lossless).unwrap();
        a.publish("/sync", b"", 0).unwrap();
        s.recv_timeout(Duration::from_secs(10)).unwrap();
    };
    fifo(&a, &b, &sync)?;

    let mut runner = TestRunner::new(PropConfig {
        failure_persistence: None,
        ..PropConfig::with_cases(10_000)
    });
    let envelope = ("/[a-z0-9_/]{1,40}", any::<u64>(), any::<u64>(), prop::collection::vec(any::<u8>(), 0..512));
    runner
        .run(&envelope, |(topic, seq, ts, payload)| {
            let e = Envelope::new(topic, seq, ts, payload);
            let bytes = encode_envelope(&e).unwrap();
            prop_assert_eq!(decode_envelope(&bytes).unwrap(), e);
            Ok(())
        })
        .map_err(|e| format!("roundtrip: {e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let valid = encode_envelope(&Envelope::new("/led/status", 3, 4, vec![1])).unwrap();
    let mut fuzzed = 0;
    for i in 0..20_000 {
        let bytes: Vec<u8> = if i % 2 == 0 {
            let len = rng.random_range(0..64);
            (0..len).map(|_| rng.random()).collect()
        } else {
            let mut b = valid.clone();
            let at = rng.random_range(0..b.len());
            b[at] = rng.random();
            b.truncate(rng.random_range(0..=b.len()));
            b
        };
        catch_unwind(|| {
            let _ = decode_envelope(&bytes);
            let _ = tmaguard::bus::read_frame(&mut bytes.as_slice());
        })
        .map_err(|_| format!("decode panicked on {bytes:?}"))?;
        fuzzed += 1;
    }
    Ok(format!(
        "{N} lossless in order on in-process and TCP; 10000 roundtrips; {fuzzed} fuzzed decodes without panic"
    ))
}

fn c10_replay_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let rec = dir.path().join("rec");
    let mut cfg = Config::default();
    cfg.scenario.seed = 10;
    cfg.scenario.duration_s = 8.0;
    cfg.scenario.initial_distance_m = 1.8;
    let live = run_live(&cfg, Some(&rec)).map_err(|e| e.to_string())?;
    let a = replay(&rec, &cfg.pipeline).map_err(|e| e.to_string())?;
    let b = replay(&rec, &cfg.pipeline).map_err(|e| e.to_string())?;
    let bytes = |o: &tmaguard::report::RunOutput| o.files().into_iter().map(|(_, b)| b).collect::<Vec<_>>();
    check(bytes(&a) == bytes(&b), "two replays differ")?;
    check(bytes(&live) == bytes(&a), "replay differs from live run")?;
    let frames = live.report.rows.len();
    check(frames > 0 && Path::new(&rec).join("manifest.json").exists(), "empty recording")?;
    Ok(format!("{frames} frames; replay x2 and live reports byte-identical"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "SSD table reproduction", c1_ssd_table),
        (2, "SSD spot values", c2_ssd_spot_values),
        (3, "noise-free end-to-end exactness", c3_noise_free_exactness),
        (4, "noise behavior", c4_noise_behavior),
        (5, "lane-assignment oracle", c5_lane_oracle),
        (6, "sim-mode trigger fidelity", c6_trigger_fidelity),
        (7, "field-mode threshold", c7_field_threshold),
        (8, "distributed equivalence", c8_distributed_equivalence),
        (9, "bus properties", c9_bus_properties),
        (10, "replay determinism", c10_replay_determinism),
    ];
    let results: Vec<(u32, &str, Outcome, Duration)> = std::thread::scope(|s| {
        let handles: Vec<_> = criteria
            .iter()
            .map(|&(n, name, f)| {
                s.spawn(move || {
                    let t = Instant::now();
                    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
                        Err(p
                            .downcast_ref::<String>()
                            .cloned()
                            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                            .unwrap_or_else(|| "panicked".into()))
                    });
                    (n, name, r, t.elapsed())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut failed = 0;
    for (n, name, r, t) in &results {
        let secs = t.as_secs_f64();
        match r {
            Ok(msg) => println!("PASS  criterion {n:>2} {name} ({secs:.1} s): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  criterion {n:>2} {name} ({secs:.1} s): {msg}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
