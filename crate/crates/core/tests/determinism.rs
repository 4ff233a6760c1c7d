mod common;

use common::*;

#[test]
fn same_seed_same_bytes() {
    let (a, _) = run_csv(scenario("powerline.scenario.json"));
    let (b, _) = run_csv(scenario("powerline.scenario.json"));
    assert!(a.lines().count() > 5000);
    assert!(a == b, "two runs of the same scenario differ");
}

#[test]
fn different_seed_different_bytes() {
    let (a, _) = run_csv(scenario("powerline.scenario.json"));
    let mut sc = scenario("powerline.scenario.json");
    sc.seed += 1;
    let (b, _) = run_csv(sc);
    assert_ne!(a, b);
}

#[test]
fn replaying_the_command_script_reproduces_the_run() {
    let (a, script) = run_csv(scenario("powerline.scenario.json"));
    assert_eq!(script.frames.len(), 25);
    assert!(a == replay_csv(scenario("powerline.scenario.json"), &script));
    // the script survives a round trip through JSON
    let text = serde_json::to_string(&script).unwrap();
    let back = serde_json::from_str(&text).unwrap();
    assert!(a == replay_csv(scenario("powerline.scenario.json"), &back));
}

#[test]
fn served_session_streams_the_offline_run() {
    let (a, script) = run_csv(scenario("powerline.scenario.json"));
    let b = served_csv(scenario("powerline.scenario.json"), script);
    assert_eq!(a.lines().count(), b.lines().count());
    for (i, (x, y)) in a.lines().zip(b.lines()).enumerate() {
        assert_eq!(x, y, "line {i}");
    }
}
