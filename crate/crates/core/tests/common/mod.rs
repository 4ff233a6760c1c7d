//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use formation_core::runtime::{load_scenario, Scenario};
use nalgebra::{DMatrix, DVector, Rotation3, Vector3};

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

pub fn scenario(name: &str) -> Scenario {
    load_scenario(scenario_path(name)).expect("bundled scenario loads")
}

pub fn wrap_deg(a: f64) -> f64 {
    let r = (a + 180.0).rem_euclid(360.0) - 180.0;
    if r == -180.0 {
        180.0
    } else {
        r
    }
}

// ---------------------------------------------------------------------------
// Formation geometry by rotations rather than component formulas.
// ---------------------------------------------------------------------------

/// `(position, heading, pitch)`.
pub type Pose = (Vector3<f64>, f64, f64);

/// The offset from the human to the UAV is `d·(−x̂)` tilted up by `elevation`
/// about y and then turned by `azimuth` about z.
fn place(human: &Vector3<f64>, azimuth: f64, elevation: f64, d: f64) -> Vector3<f64> {
    let tilt = Rotation3::from_axis_angle(&Vector3::y_axis(), elevation);
    let turn = Rotation3::from_axis_angle(&Vector3::z_axis(), azimuth);
    human + turn * (tilt * Vector3::new(-d, 0.0, 0.0))
}

pub fn oracle_leader(human: &Vector3<f64>, human_heading: f64, beta: f64, gamma: f64, d: f64) -> Pose {
    let az = human_heading - beta;
    (place(human, az, gamma, d), az, -gamma)
}

pub fn oracle_follower(human: &Vector3<f64>, leader_heading: f64, leader_pitch: f64, beta: f64, gamma: f64, d: f64) -> Pose {
    let az = leader_heading - beta;
    let el = leader_pitch - gamma;
    (place(human, az, -el, d), az, el)
}

/// Unit vector along the camera optical axis for a heading and pitch.
pub fn look_direction(heading: f64, pitch: f64) -> Vector3<f64> {
    let r = Rotation3::from_axis_angle(&Vector3::z_axis(), heading) * Rotation3::from_axis_angle(&Vector3::y_axis(), -pitch);
    r * Vector3::x()
}

// ---------------------------------------------------------------------------
// Textbook Kalman filter over dynamically sized matrices.
// ---------------------------------------------------------------------------

pub struct TextbookKf {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
    pub t: f64,
}

impl TextbookKf {
    pub fn new(x: DVector<f64>, p: DMatrix<f64>, t: f64) -> Self {
        Self { x, p, t }
    }

    pub fn predict(&mut self, dt: f64, q_diag: &[f64; 6]) {
        let mut f = DMatrix::<f64>::identity(6, 6);
        for i in 0..3 {
            f[(i, i + 3)] = dt;
        }
        let q = DMatrix::from_diagonal(&DVector::from_row_slice(q_diag));
        self.x = &f * &self.x;
        self.p = &f * &self.p * f.transpose() + q;
        self.t += dt;
    }

    pub fn update(&mut self, z: &Vector3<f64>, r: &DMatrix<f64>) {
        let mut h = DMatrix::<f64>::zeros(3, 6);
        for i in 0..3 {
            h[(i, i)] = 1.0;
        }
        let zv = DVector::from_row_slice(z.as_slice());
        let y = zv - &h * &self.x;
        let s = &h * &self.p * h.transpose() + r;
        let s_inv = s.try_inverse().expect("innovation covariance invertible");
        let k = &self.p * h.transpose() * s_inv;
        self.x = &self.x + &k * y;
        let i = DMatrix::<f64>::identity(6, 6);
        self.p = (i - &k * &h) * &self.p;
        self.p = (&self.p + self.p.transpose()) * 0.5;
    }
}

/// World-frame measurement from a pixel center and a range, with the pinhole
/// model written out by hand.
pub fn pixel_to_world(
    u: f64,
    v: f64,
    focal: f64,
    cx: f64,
    cy: f64,
    range: f64,
    rotation: &nalgebra::Matrix3<f64>,
    origin: &Vector3<f64>,
) -> Vector3<f64> {
    let x = (u - cx) / focal;
    let y = (v - cy) / focal;
    let n = (x * x + y * y + 1.0).sqrt();
    origin + rotation * Vector3::new(x / n * range, y / n * range, range / n)
}

// ---------------------------------------------------------------------------
// Shared checks. Each returns the measured quantities so callers can apply
// their own tolerances.
// ---------------------------------------------------------------------------

use formation_core::estimator::{
    kf_predict, select_distance, BoundingBox, CameraObservation, DistanceSource, DistanceSources, EstimatorConfig,
    HumanEstimator,
};
use formation_core::formation::{follower_reference, leader_reference};
use formation_core::gesture::{GestureDetection, GestureFilter, GestureFilterConfig};
use formation_core::model::{CameraIntrinsics, CameraPose, FormationParams, HumanState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

#[derive(Debug, Default)]
pub struct KfTrace {
    pub max_mean_diff: f64,
    pub max_cov_diff: f64,
    /// Smallest eigenvalue of `prior − posterior` over the position block.
    pub min_gain_eig: f64,
    pub updates: usize,
}

pub fn kf_oracle_trace(seed: u64, steps: usize) -> KfTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EstimatorConfig::default();
    let intr = CameraIntrinsics::default();
    let q: [f64; 6] = {
        let (p, v) = (cfg.process.sigma_p, cfg.process.sigma_v);
        [p[0] * p[0], p[1] * p[1], p[2] * p[2], v[0] * v[0], v[1] * v[1], v[2] * v[2]]
    };
    let mut est = HumanEstimator::new(cfg);
    let mut oracle: Option<TextbookKf> = None;
    let mut human = Vector3::new(0.0, 0.0, 0.9);
    let mut vel = Vector3::new(0.5, 0.2, 0.0);
    let mut t = 0.0;
    let mut out = KfTrace {
        min_gain_eig: f64::INFINITY,
        ..KfTrace::default()
    };
    for _ in 0..steps {
        let dt = rng.gen_range(0.05..0.3);
        t += dt;
        vel += Vector3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), 0.0);
        human += vel * dt;

        let d = rng.gen_range(4.0..14.0);
        let az = rng.gen_range(-PI..PI);
        let el: f64 = rng.gen_range(0.0..0.5);
        let cam_pos = human + Vector3::new(az.cos() * el.cos(), az.sin() * el.cos(), el.sin()) * d;
        let to = human - cam_pos;
        let heading = to.y.atan2(to.x) + rng.gen_range(-0.2..0.2);
        let pitch = (to.z / to.norm()).asin() + rng.gen_range(-0.1..0.1);
        let cam = CameraPose::from_orientation(cam_pos, heading, pitch, intr);
        let pc = cam.world_to_camera(&human);
        let (u, v) = intr.project(&pc).expect("human in front of the camera");
        let (u, v) = (u + rng.gen_range(-3.0..3.0), v + rng.gen_range(-3.0..3.0));
        let h_px = intr.focal * 1.8 / pc.z;
        let bbox = rng.gen_bool(0.85).then_some(BoundingBox {
            u_min: u - 0.2 * h_px,
            v_min: v - 0.5 * h_px,
            u_max: u + 0.2 * h_px,
            v_max: v + 0.5 * h_px,
        });
        let range = to.norm();
        let sources = DistanceSources {
            uwb: rng.gen_bool(0.4).then(|| range + rng.gen_range(-0.1..0.1)),
            stereo: rng.gen_bool(0.5).then(|| range + rng.gen_range(-0.3..0.3)),
            apparent: rng.gen_bool(0.8).then(|| range * rng.gen_range(0.9..1.1)),
        };

        let prior = est
            .estimate()
            .map(|e| kf_predict(e, t - e.last_update_time, &cfg.process).expect("positive dt"));
        let applied = est
            .tick(
                t,
                &[CameraObservation {
                    camera: cam,
                    bbox,
                    sources,
                }],
            )
            .expect("estimator tick");

        if let Some(o) = oracle.as_mut() {
            let dt = t - o.t;
            o.predict(dt, &q);
        }
        let chosen = sources
            .uwb
            .map(|r| (r, cfg.measurement.sigma_z_uwb))
            .or(sources.stereo.map(|r| (r, cfg.measurement.sigma_z_stereo)))
            .or(sources.apparent.map(|r| (r, cfg.measurement.sigma_z_apparent)));
        if let (Some(b), Some((r, sz))) = (bbox, chosen) {
            let (cu, cv) = ((b.u_min + b.u_max) / 2.0, (b.v_min + b.v_max) / 2.0);
            let z = pixel_to_world(cu, cv, intr.focal, intr.cx, intr.cy, r, &cam.rotation, &cam.position);
            let sxy = cfg.measurement.sigma_xy;
            let rot = DMatrix::from_column_slice(3, 3, cam.rotation.as_slice());
            let diag = DMatrix::from_diagonal(&DVector::from_row_slice(&[sxy * sxy, sxy * sxy, sz * sz]));
            let cov = &rot * diag * rot.transpose();
            match oracle.as_mut() {
                Some(o) => o.update(&z, &cov),
                None => {
                    let sv = cfg.initial_velocity_sigma;
                    oracle = Some(TextbookKf::new(
                        DVector::from_row_slice(&[z.x, z.y, z.z, 0.0, 0.0, 0.0]),
                        DMatrix::from_diagonal(&DVector::from_row_slice(&[sz * sz, sz * sz, sz * sz, sv * sv, sv * sv, sv * sv])),
                        t,
                    ))
                }
            }
        }

        match (est.estimate(), oracle.as_ref()) {
            (Some(e), Some(o)) => {
                for i in 0..6 {
                    out.max_mean_diff = out.max_mean_diff.max((e.mean[i] - o.x[i]).abs());
                    for j in 0..6 {
                        out.max_cov_diff = out.max_cov_diff.max((e.covariance[(i, j)] - o.p[(i, j)]).abs());
                    }
                }
            }
            (None, None) => {}
            _ => {
                out.max_mean_diff = f64::INFINITY;
            }
        }
        if let (Some(prior), Some(post), true) = (prior, est.estimate(), applied > 0) {
            let diff = prior.position_covariance() - post.position_covariance();
            let eig = diff.symmetric_eigen().eigenvalues.min();
            out.min_gain_eig = out.min_gain_eig.min(eig);
            out.updates += 1;
        }
    }
    out
}

pub struct PriorityCase {
    pub uwb: bool,
    pub stereo: bool,
    pub apparent: bool,
    pub expected: DistanceSource,
    pub selected: Option<DistanceSource>,
    pub distance_ok: bool,
    pub cov_err: f64,
}

/// All seven non-empty availability patterns.
pub fn priority_table() -> Vec<PriorityCase> {
    let cfg = EstimatorConfig::default().measurement;
    let cam = CameraPose::from_orientation(Vector3::new(1.0, -2.0, 5.0), 0.7, -0.3, CameraIntrinsics::default());
    let mut out = Vec::new();
    for mask in 1u8..8 {
        let (uwb, stereo, apparent) = (mask & 1 != 0, mask & 2 != 0, mask & 4 != 0);
        let src = DistanceSources {
            uwb: uwb.then_some(7.0),
            stereo: stereo.then_some(8.0),
            apparent: apparent.then_some(9.0),
        };
        let (expected, range, sz) = if uwb {
            (DistanceSource::Uwb, 7.0, cfg.sigma_z_uwb)
        } else if stereo {
            (DistanceSource::Stereo, 8.0, cfg.sigma_z_stereo)
        } else {
            (DistanceSource::Apparent, 9.0, cfg.sigma_z_apparent)
        };
        let sel = select_distance(&src, &cam, &cfg);
        let r = cam.rotation;
        let diag = nalgebra::Matrix3::from_diagonal(&Vector3::new(cfg.sigma_xy.powi(2), cfg.sigma_xy.powi(2), sz * sz));
        let want = r * diag * r.transpose();
        out.push(PriorityCase {
            uwb,
            stereo,
            apparent,
            expected,
            selected: sel.map(|s| s.source),
            distance_ok: sel.is_some_and(|s| s.distance == range),
            cov_err: sel.map_or(f64::INFINITY, |s| (s.covariance - want).amax()),
        });
    }
    out
}

#[derive(Debug, Default)]
pub struct FormationCheck {
    pub max_distance_err: f64,
    pub max_pointing_err: f64,
    pub max_oracle_err: f64,
}

fn pointing(pos: &Vector3<f64>, heading: f64, pitch: f64, target: &Vector3<f64>) -> f64 {
    let to = (target - pos).normalize();
    let look = look_direction(heading, pitch);
    to.cross(&look).norm().atan2(to.dot(&look))
}

fn angle_err(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

pub fn formation_draws(seed: u64, n: usize) -> FormationCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = FormationCheck::default();
    for _ in 0..n {
        let p = Vector3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(0.0..3.0));
        let phi = rng.gen_range(-PI..PI);
        let h = HumanState::new(p, Vector3::zeros(), phi);
        let lp = FormationParams::new(rng.gen_range(-PI..PI), rng.gen_range(-1.2..1.2), rng.gen_range(1.0..30.0));
        let fp = FormationParams::new(rng.gen_range(-PI..PI), rng.gen_range(-0.3..0.3), rng.gen_range(1.0..30.0));
        let l = leader_reference(&h, &lp);
        let f = follower_reference(&h, &l, &fp);
        let (lo, lh, lpi) = oracle_leader(&p, phi, lp.beta, lp.gamma, lp.distance);
        let (fo, fh, fpi) = oracle_follower(&p, l.heading, l.pitch, fp.beta, fp.gamma, fp.distance);
        for (s, prm) in [(&l, &lp), (&f, &fp)] {
            c.max_distance_err = c.max_distance_err.max(((s.position - p).norm() - prm.distance).abs());
            c.max_pointing_err = c.max_pointing_err.max(pointing(&s.position, s.heading, s.pitch, &p));
        }
        let errs = [
            (l.position - lo).amax(),
            angle_err(l.heading, lh),
            (l.pitch - lpi).abs(),
            (f.position - fo).amax(),
            angle_err(f.heading, fh),
            (f.pitch - fpi).abs(),
        ];
        c.max_oracle_err = errs.iter().fold(c.max_oracle_err, |m, e| m.max(*e));
    }
    c
}

#[derive(Debug, Default)]
pub struct FilterProps {
    pub streams: usize,
    pub confirmations: usize,
    pub debounce_violations: usize,
    pub ratio_violations: usize,
    pub stale_prefix_mismatches: usize,
    pub replay_mismatches: usize,
}

/// Random detection stream: `(now, detection)` pairs with non-decreasing time.
pub fn random_stream(rng: &mut ChaCha8Rng, len: usize, t0: f64) -> Vec<(f64, Option<GestureDetection>)> {
    let favorite = rng.gen_range(1..=4u32);
    let purity = rng.gen_range(0.5..1.0);
    let mut t = t0;
    (0..len)
        .map(|_| {
            t += if rng.gen_bool(0.02) { rng.gen_range(5.0..30.0) } else { rng.gen_range(0.0..0.5) };
            let det = rng.gen_bool(0.9).then(|| {
                let id = if rng.gen_bool(purity) { favorite } else { rng.gen_range(0..=5) };
                GestureDetection { id, t }
            });
            (t, det)
        })
        .collect()
}

fn confirmations(cfg: GestureFilterConfig, stream: &[(f64, Option<GestureDetection>)]) -> Vec<(f64, Option<u32>)> {
    let mut f = GestureFilter::new(cfg);
    stream
        .iter()
        .map(|(now, d)| (*now, f.update(*d, *now).expect("ordered stream").confirmed))
        .collect()
}

pub fn gesture_filter_properties(seed: u64, n: usize) -> FilterProps {
    let cfg = GestureFilterConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = FilterProps::default();
    for _ in 0..n {
        p.streams += 1;
        let len = rng.gen_range(1..120);
        let stream = random_stream(&mut rng, len, 0.0);
        let mut filter = GestureFilter::new(cfg);
        // every valid detection since the last confirmation
        let mut seen: Vec<GestureDetection> = Vec::new();
        let mut last: Option<f64> = None;
        for (now, det) in &stream {
            if let Some(d) = det.filter(|d| d.id != 0) {
                seen.push(d);
            }
            let out = filter.update(*det, *now).expect("ordered stream");
            let Some(id) = out.confirmed else { continue };
            p.confirmations += 1;
            if last.is_some_and(|l| now - l < cfg.debounce) {
                p.debounce_violations += 1;
            }
            last = Some(*now);
            let fresh: Vec<_> = seen.iter().filter(|d| d.t >= now - cfg.staleness).collect();
            let window = &fresh[fresh.len().saturating_sub(cfg.window)..];
            let share = window.iter().filter(|d| d.id == id).count() as f64 / window.len().max(1) as f64;
            if window.is_empty() || share < cfg.ratio_threshold {
                p.ratio_violations += 1;
            }
            seen.clear();
        }

        // a prefix followed by a silent gap longer than the staleness bound
        let len = rng.gen_range(1..60);
        let prefix = random_stream(&mut rng, len, 0.0);
        let end = prefix.last().map_or(0.0, |(t, _)| *t);
        let len = rng.gen_range(1..60);
        let suffix = random_stream(&mut rng, len, end + cfg.staleness + 1e-3);
        let joined: Vec<_> = prefix.iter().chain(&suffix).copied().collect();
        let tail = &confirmations(cfg, &joined)[prefix.len()..];
        if tail != confirmations(cfg, &suffix).as_slice() {
            p.stale_prefix_mismatches += 1;
        }

        if confirmations(cfg, &stream) != confirmations(cfg, &stream) {
            p.replay_mismatches += 1;
        }
    }
    p
}

// ---------------------------------------------------------------------------
// Inline scenarios
// ---------------------------------------------------------------------------

/// Empty 60×60×20 m world, default three-UAV roster near its references, worker
/// standing at the origin facing +y.
pub fn base_scenario() -> serde_json::Value {
    serde_json::json!({
        "name": "inline",
        "seed": 1,
        "duration": 30.0,
        "dt": 0.1,
        "world": {"origin": [-30.0, -30.0, 0.0], "size": [60.0, 60.0, 20.0], "cell_size": 0.5, "obstacles": []},
        "uavs": [
            {"name": "leader", "role": "leader", "beta_deg": 90.0, "gamma_deg": 11.0, "d": 10.0, "start": [-12.0, 0.0, 3.0]},
            {"name": "f1", "role": "follower", "beta_deg": 60.0, "gamma_deg": 0.0, "d": 8.0, "start": [-5.0, 8.0, 3.0]},
            {"name": "f2", "role": "follower", "beta_deg": -60.0, "gamma_deg": 0.0, "d": 8.0, "start": [-5.0, -8.0, 3.0]}
        ],
        "human": {
            "height": 1.8,
            "waypoints": [{"t": 0.0, "position": [0.0, 0.0, 0.9], "heading_deg": 90.0}],
            "gestures": []
        }
    })
}

/// RFC 7386 merge patch.
pub fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    use serde_json::Value;
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                if v.is_null() {
                    b.remove(&k);
                } else {
                    merge(b.entry(k).or_insert(Value::Null), v);
                }
            }
        }
        (b, p) => *b = p,
    }
}

pub fn inline_scenario(patch: serde_json::Value) -> Scenario {
    let mut v = base_scenario();
    merge(&mut v, patch);
    Scenario::from_json(&v.to_string()).expect("inline scenario is valid")
}

pub fn noiseless_sensing() -> serde_json::Value {
    serde_json::json!({"sensor": {
        "bbox_pixel_sigma": 0.0, "stereo_probability": 1.0, "stereo_sigma": 0.0,
        "stereo_outlier_probability": 0.0, "uwb_probability": 1.0, "uwb_sigma": 0.0
    }})
}

// ---------------------------------------------------------------------------
// Metric streams
// ---------------------------------------------------------------------------

use formation_core::runtime::protocol::{decode_server, ServerFrame};
use formation_core::runtime::{replay, run, serve, CommandScript, CsvSink, MetricsSample, ServeConfig, CSV_HEADER};
use std::time::{Duration, Instant};
use tungstenite::Message;

pub fn csv_of(samples: &[MetricsSample]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for s in samples {
        out.push_str(&s.csv_row());
        out.push('\n');
    }
    out
}

pub fn run_csv(sc: Scenario) -> (String, CommandScript) {
    let mut sink = CsvSink::new(Vec::new(), Vec::new());
    let (_, script) = run(sc, &mut sink).expect("run completes");
    let (m, _) = sink.into_inner();
    (String::from_utf8(m).unwrap(), script)
}

pub fn replay_csv(sc: Scenario, script: &CommandScript) -> String {
    let mut sink = CsvSink::new(Vec::new(), Vec::new());
    replay(sc, script, &mut sink).expect("replay completes");
    String::from_utf8(sink.into_inner().0).unwrap()
}

/// Serves `script` unthrottled and rebuilds the CSV from the delta frames an
/// observer receives.
pub fn served_csv(sc: Scenario, script: CommandScript) -> String {
    let ticks = sc.ticks();
    let handle = serve(
        sc,
        ServeConfig {
            addr: "127.0.0.1:0".into(),
            rtf: 0.0,
            telemetry_every: 1,
            wait_for_controller: true,
            exit_when_finished: true,
            record: None,
            replay: Some(script),
        },
    )
    .expect("server starts");
    let url = format!("ws://{}", handle.local_addr());
    let (mut observer, _) = tungstenite::connect(&url).expect("observer connects");
    observer
        .send(Message::text(r#"{"type":"hello","version":1,"role":"observer"}"#))
        .unwrap();
    let mut samples = Vec::new();
    let mut controller = None;
    let deadline = Instant::now() + Duration::from_secs(120);
    while Instant::now() < deadline {
        let Ok(msg) = observer.read() else { break };
        let Message::Text(text) = msg else { continue };
        match decode_server(&text).expect("server frame decodes") {
            ServerFrame::Snapshot { .. } if controller.is_none() => {
                // the clock starts once a controller says hello
                let (mut c, _) = tungstenite::connect(&url).expect("controller connects");
                c.send(Message::text(r#"{"type":"hello","version":1,"role":"controller"}"#))
                    .unwrap();
                controller = Some(c);
            }
            ServerFrame::Delta { state } => {
                samples.extend(state.metrics);
                if state.tick >= ticks {
                    break;
                }
            }
            _ => {}
        }
    }
    handle.join().expect("server finishes");
    csv_of(&samples)
}
