use rotorsafe::scenario::FailureSpec;
use rotorsafe::sim::FailureMode;
use rotorsafe::suites::{hover_scenario, lemniscate_scenario, takeoff_scenario};

#[test]
fn probe_latencies() {
    println!("--- takeoff, inject 0.9 ---");
    for k in 0..8 {
        let kind = if k % 2 == 0 { FailureMode::PropellerLoss } else { FailureMode::MotorStop };
        let mut s = takeoff_scenario(
            2.5,
            Some(FailureSpec { time: 0.9, rotor: k % 4, kind, severity: 1.0 }),
        );
        s.seed = 300 + k as u64;
        let out = rotorsafe::run_scenario(&s, None, None).unwrap();
        println!(
            "k={k} kind={kind:?} rotor={} latency={:?} minA={:.4} miss={} fa={}",
            k % 4,
            out.metrics.fdd_latency,
            out.metrics.min_altitude,
            out.metrics.missed_detection,
            out.metrics.false_alarm
        );
    }
    println!("--- hover motor stop, inject 0.3 ---");
    for k in 0..8 {
        let mut s = hover_scenario(
            0.7,
            Some(FailureSpec {
                time: 0.3 + 0.01 * (k % 5) as f64,
                rotor: k % 4,
                kind: FailureMode::MotorStop,
                severity: 1.0,
            }),
        );
        s.seed = 500 + k as u64;
        let out = rotorsafe::run_scenario(&s, None, None).unwrap();
        println!(
            "k={k} rotor={} latency={:?} miss={} fa={}",
            k % 4,
            out.metrics.fdd_latency,
            out.metrics.missed_detection,
            out.metrics.false_alarm
        );
    }
    println!("--- lemniscate prop loss, inject 6.0..6.4 (20 samples) ---");
    for k in 0..20 {
        let mut s = lemniscate_scenario(
            12.0,
            Some(FailureSpec {
                time: 6.0 + 0.1 * (k % 5) as f64,
                rotor: k % 4,
                kind: FailureMode::PropellerLoss,
                severity: 1.0,
            }),
        );
        s.seed = 100 + k as u64;
        let out = rotorsafe::run_scenario(&s, None, None).unwrap();
        println!(
            "k={k} rotor={} latency={:?} rmse={:.4} success={} minA={:.3} yaw={:.2}",
            k % 4,
            out.metrics.fdd_latency,
            out.metrics.rmse,
            out.metrics.success,
            out.metrics.min_altitude,
            out.metrics.max_yaw_rate
        );
    }
}
