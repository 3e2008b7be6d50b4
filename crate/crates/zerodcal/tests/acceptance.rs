//! Acceptance suite: one test per shipped guarantee. Every test enforces its
//! stated numeric tolerance and runtime budget against independent oracles
//! (finite differences, closed forms, conjugate posteriors, ground-truth
//! synthetic data) and prints a single PASS line when it holds.

mod common;

use std::fs;
use std::time::Instant;

use common::{
    assert_matrices_close, central_diff_jacobian, regression_slope, OracleRng, TREE_JSON,
    WK_RELAX_JSON,
};
use nalgebra::{DMatrix, DVector};
use zerodcal::elements::{
    blood_vessel_contribution, blood_vessel_param_jacobian, junction_contribution,
    junction_param_jacobian, windkessel_contribution, JunctionOutletParams,
};
use zerodcal::forward::{
    run_cycles, simulate_model, step, DaeSystem, GenAlphaCoeffs, IntegratorConfig, StepSize,
};
use zerodcal::inverse::{lm_optimize, LmConfig, ObservationSet};
use zerodcal::model::{LpnModel, Quantity, Trajectory};
use zerodcal::obs::{extract_observations, synthesize_noisy_observations};
use zerodcal::pipeline::{
    grid_posterior, run_calibration, CalibrationCase, CalibrationOutcome, GridAxis, GridSpec,
    OutletResistanceModel, SimSettings,
};
use zerodcal::smc::{run_smc, NoiseModel, Prior, SmcConfig, SmcResult};

const RTOL: f64 = 1e-5;
const ATOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-6;
// Element residuals are affine in their parameters, so the central stencil is
// truncation-free at any step; a wide one suppresses cancellation noise.
const PARAM_FD_STEP: f64 = 1e-3;

/// Asserts the runtime budget and prints the per-criterion PASS line.
fn pass(label: &str, detail: &str, t0: Instant, budget_s: Option<f64>) {
    let secs = t0.elapsed().as_secs_f64();
    if let Some(b) = budget_s {
        assert!(secs < b, "FAIL: {label} took {secs:.2}s, budget {b}s");
    }
    println!("acceptance: {label}: PASS ({detail}; {secs:.2}s)");
}

/// Bookkeeping invariants every finished sampler run must satisfy.
fn check_bookkeeping(label: &str, res: &SmcResult, k: usize) {
    assert_eq!(
        res.posterior.gamma_s, 1.0,
        "FAIL: {label}: tempering ended at {} instead of exactly 1",
        res.posterior.gamma_s
    );
    let zsum: f64 = res.zeta_schedule.iter().sum();
    assert!(
        (zsum - 1.0).abs() <= 1e-12,
        "FAIL: {label}: tempering steps sum to {zsum}"
    );
    let kf = k as f64;
    for (s, &e) in res.ess_history.iter().enumerate() {
        assert!(
            e >= 1.0 - 1e-9 && e <= kf * (1.0 + 1e-12) + 1e-9,
            "FAIL: {label}: stage {s} ESS {e} outside [1, {k}]"
        );
    }
    let w = res
        .posterior
        .normalized_weights()
        .expect("FAIL: finished run must carry weight");
    let wsum: f64 = w.iter().sum();
    assert!(
        (wsum - 1.0).abs() <= 1e-12,
        "FAIL: {label}: normalized weights sum to {wsum}"
    );
    assert!(
        w.iter().all(|x| *x >= 0.0),
        "FAIL: {label}: negative normalized weight"
    );
}

fn bv_residual(r: f64, l: f64, cap: f64, s: f64, y: &[f64], ydot: &[f64]) -> DVector<f64> {
    let k = blood_vessel_contribution(r, l, cap, s, y, ydot);
    &k.e * DVector::from_column_slice(ydot) + &k.f * DVector::from_column_slice(y) + &k.c
}

fn junction_residual(params: &[JunctionOutletParams], y: &[f64], ydot: &[f64]) -> DVector<f64> {
    let k = junction_contribution(params, y, ydot);
    &k.e * DVector::from_column_slice(ydot) + &k.f * DVector::from_column_slice(y) + &k.c
}

fn random_vessel_state(rng: &mut OracleRng) -> ([f64; 4], [f64; 4], [f64; 4]) {
    // Flows stay away from the |Q| kink so the stencil never straddles it.
    let params = [
        rng.range(0.1, 10.0),
        rng.range(0.1, 10.0),
        rng.range(0.01, 1.0),
        rng.range(0.1, 10.0),
    ];
    let y = [
        rng.range(-2e4, 2e4),
        rng.range_away_from_zero(-20.0, 20.0, 1e-3),
        rng.range(-2e4, 2e4),
        rng.range_away_from_zero(-20.0, 20.0, 1e-3),
    ];
    let ydot = [
        rng.range(-100.0, 100.0),
        rng.range(-100.0, 100.0),
        rng.range(-100.0, 100.0),
        rng.range(-100.0, 100.0),
    ];
    (params, y, ydot)
}

/// Criterion: for every element type, the analytic state linearizations and
/// parameter Jacobians agree with central finite differences on 1000 random
/// states, relative tolerance 1e-5. Budget 5 s.
#[test]
fn element_derivative_matrices_match_finite_differences() {
    let t0 = Instant::now();
    let mut rng = OracleRng::new(0xacce_0001);
    let trials = 1000usize;
    for trial in 0..trials {
        // Blood vessel: dc/dy, dc/dydot, and the (R, C, L, S) parameter columns.
        let ([r, l, cap, s], y, ydot) = random_vessel_state(&mut rng);
        let k = blood_vessel_contribution(r, l, cap, s, &y, &ydot);
        let c_of_y = |yy: &[f64]| blood_vessel_contribution(r, l, cap, s, yy, &ydot).c;
        assert_matrices_close(
            &k.dc_dy,
            &central_diff_jacobian(&c_of_y, &y, FD_STEP),
            RTOL,
            ATOL,
            "vessel dc/dy",
        );
        let c_of_ydot = |yd: &[f64]| blood_vessel_contribution(r, l, cap, s, &y, yd).c;
        assert_matrices_close(
            &k.dc_dydot,
            &central_diff_jacobian(&c_of_ydot, &ydot, FD_STEP),
            RTOL,
            ATOL,
            "vessel dc/dydot",
        );
        let r_of_alpha = |a: &[f64]| bv_residual(a[0], a[2], a[1], a[3], &y, &ydot);
        assert_matrices_close(
            &blood_vessel_param_jacobian(r, cap, s, &y, &ydot).j,
            &central_diff_jacobian(&r_of_alpha, &[r, cap, l, s], PARAM_FD_STEP),
            RTOL,
            ATOL,
            "vessel dr/dalpha",
        );

        // Junction with 1..=4 outlets.
        let n = 1 + trial % 4;
        let params: Vec<JunctionOutletParams> = (0..n)
            .map(|_| JunctionOutletParams {
                resistance: rng.range(0.1, 10.0),
                inductance: rng.range(0.1, 10.0),
                stenosis: rng.range(0.1, 10.0),
            })
            .collect();
        let dim = 2 + 2 * n;
        let mut yj = vec![0.0; dim];
        let mut yjdot = vec![0.0; dim];
        for i in 0..dim {
            yj[i] = if i % 2 == 0 {
                rng.range(-2e4, 2e4)
            } else {
                rng.range_away_from_zero(-20.0, 20.0, 1e-3)
            };
            yjdot[i] = rng.range(-100.0, 100.0);
        }
        let kj = junction_contribution(&params, &yj, &yjdot);
        let cj_of_y = |yy: &[f64]| junction_contribution(&params, yy, &yjdot).c;
        assert_matrices_close(
            &kj.dc_dy,
            &central_diff_jacobian(&cj_of_y, &yj, FD_STEP),
            RTOL,
            ATOL,
            "junction dc/dy",
        );
        let cj_of_ydot = |yd: &[f64]| junction_contribution(&params, &yj, yd).c;
        assert_matrices_close(
            &kj.dc_dydot,
            &central_diff_jacobian(&cj_of_ydot, &yjdot, FD_STEP),
            RTOL,
            ATOL,
            "junction dc/dydot",
        );
        let mut alpha = Vec::with_capacity(3 * n);
        alpha.extend(params.iter().map(|p| p.resistance));
        alpha.extend(params.iter().map(|p| p.inductance));
        alpha.extend(params.iter().map(|p| p.stenosis));
        let rj_of_alpha = |a: &[f64]| {
            let ps: Vec<JunctionOutletParams> = (0..n)
                .map(|i| JunctionOutletParams {
                    resistance: a[i],
                    inductance: a[n + i],
                    stenosis: a[2 * n + i],
                })
                .collect();
            junction_residual(&ps, &yj, &yjdot)
        };
        assert_matrices_close(
            &junction_param_jacobian(n, &yj, &yjdot).j,
            &central_diff_jacobian(&rj_of_alpha, &alpha, PARAM_FD_STEP),
            RTOL,
            ATOL,
            "junction dr/dalpha",
        );

        // Windkessel: the nonlinear term is a constant, so both state
        // linearizations must vanish and the stencil must confirm it.
        let rp = rng.range(1.0, 500.0);
        let rd = rng.range(1.0, 2000.0);
        let cw = rng.range(1e-5, 1e-2);
        let pref = rng.range(-1e3, 1e3);
        let yw = [rng.range(-2e4, 2e4), rng.range(-20.0, 20.0)];
        let ywdot = [rng.range(-1e4, 1e4), rng.range(-100.0, 100.0)];
        let kw = windkessel_contribution(rp, rd, cw, pref, &yw, &ywdot);
        let cw_of_y = |yy: &[f64]| windkessel_contribution(rp, rd, cw, pref, yy, &ywdot).c;
        assert_matrices_close(
            &kw.dc_dy,
            &central_diff_jacobian(&cw_of_y, &yw, FD_STEP),
            RTOL,
            ATOL,
            "windkessel dc/dy",
        );
        let cw_of_ydot = |yd: &[f64]| windkessel_contribution(rp, rd, cw, pref, &yw, yd).c;
        assert_matrices_close(
            &kw.dc_dydot,
            &central_diff_jacobian(&cw_of_ydot, &ywdot, FD_STEP),
            RTOL,
            ATOL,
            "windkessel dc/dydot",
        );
        assert!(kw.dc_dy.iter().all(|v| *v == 0.0));
        assert!(kw.dc_dydot.iter().all(|v| *v == 0.0));
    }
    pass(
        "element derivative matrices",
        &format!("{trials} random states per element type, rel tol {RTOL:.0e}"),
        t0,
        Some(5.0),
    );
}

/// Scalar test problem ydot + y = 0 with solution exp(-t).
struct ScalarDecay;

impl DaeSystem for ScalarDecay {
    fn dim(&self) -> usize {
        1
    }
    fn residual_into(
        &self,
        _t: f64,
        y: &DVector<f64>,
        ydot: &DVector<f64>,
        out: &mut DVector<f64>,
    ) {
        out[0] = ydot[0] + y[0];
    }
    fn iteration_matrix_into(
        &self,
        _y: &DVector<f64>,
        _ydot: &DVector<f64>,
        am: f64,
        afgdt: f64,
        out: &mut DMatrix<f64>,
    ) {
        out[(0, 0)] = am + afgdt;
    }
}

/// Criterion: on a manufactured problem with an exponential solution the
/// integrator's log-log error slope over dt in {T/100 .. T/1600} is >= 1.9.
/// Budget 5 s.
#[test]
fn integrator_converges_at_second_order() {
    let t0 = Instant::now();
    let sys = ScalarDecay;
    let coeffs = GenAlphaCoeffs::from_spectral_radius(0.2).unwrap();
    let exact = (-1.0f64).exp();
    let mut log_dt = Vec::new();
    let mut log_err = Vec::new();
    for n in [100usize, 200, 400, 800, 1600] {
        let dt = 1.0 / n as f64;
        let mut y = DVector::from_vec(vec![1.0]);
        let mut ydot = DVector::from_vec(vec![-1.0]);
        for k in 0..n {
            let r = step(&sys, k as f64 * dt, dt, &y, &ydot, &coeffs, 50, 1e-13).unwrap();
            y = r.y;
            ydot = r.ydot;
        }
        let err = (y[0] - exact).abs();
        assert!(err > 0.0, "FAIL: error underflowed; slope is meaningless");
        log_dt.push(dt.ln());
        log_err.push(err.ln());
    }
    let slope = regression_slope(&log_dt, &log_err);
    assert!(
        slope >= 1.9,
        "FAIL: observed convergence order {slope:.3}, need >= 1.9"
    );
    pass(
        "integrator convergence order",
        &format!("log-log slope {slope:.3} over 5 step sizes"),
        t0,
        Some(5.0),
    );
}

/// Criterion: a Windkessel under constant inflow relaxes exponentially with
/// the fitted rate within 1% of -1/(Rd C). Budget 5 s.
#[test]
fn windkessel_transient_recovers_its_time_constant() {
    let t0 = Instant::now();
    let model = LpnModel::from_json_str(WK_RELAX_JSON).unwrap();
    let sys = model.assemble().unwrap();
    let tau = 1000.0 * 1e-4;
    let p_inf = (100.0 + 1000.0) * 10.0;
    let y0 = DVector::from_vec(vec![p_inf + 5000.0, 10.0]);
    let ydot0 = DVector::from_vec(vec![-5000.0 / tau, 0.0]);
    let config = IntegratorConfig {
        step: StepSize::StepsPerCycle(1000),
        cycles_max: 1,
        ..IntegratorConfig::default()
    };
    let run = run_cycles(&sys, 1.0, &y0, &ydot0, &config).unwrap();
    let mut ts = Vec::new();
    let mut logs = Vec::new();
    for (k, t) in run.times.iter().enumerate() {
        let dp = run.states[(k, 0)] - p_inf;
        assert!(dp > 0.0, "FAIL: decay crossed its asymptote");
        ts.push(*t);
        logs.push(dp.ln());
    }
    let slope = regression_slope(&ts, &logs);
    let want = -1.0 / tau;
    assert!(
        (slope - want).abs() < 0.01 * want.abs(),
        "FAIL: fitted rate {slope:.3} vs -1/tau {want:.3}, beyond 1%"
    );
    pass(
        "windkessel relaxation time constant",
        &format!("fitted rate {slope:.2} vs analytic {want:.2}"),
        t0,
        Some(5.0),
    );
}

struct VesselRec {
    from: String,
    to: String,
    r: f64,
    l: f64,
    c: f64,
    s: f64,
}

struct JunctionRec {
    from: String,
    to: Vec<String>,
    // (R, L, S) per outlet.
    outlets: Vec<(f64, f64, f64)>,
}

/// One stenotic branch with enough bookkeeping to score its recovery: the
/// bounding nodes for the observed pressure drop, the through-flow node, and
/// where its coefficient lands in the global parameter vector.
struct StenosisRef {
    from: String,
    to: String,
    s_index: usize,
    s_value: f64,
}

/// Grows a random branching network from the inlet: each junction consumes an
/// open node and feeds two new vessels, every node left open ends in a
/// Windkessel. Parameters are drawn in physiological CGS ranges.
fn random_network(rng: &mut OracleRng, n_junctions: usize) -> (String, Vec<StenosisRef>) {
    let mut nodes = vec!["inlet".to_string()];
    let mut counter = 0usize;
    let fresh = |nodes: &mut Vec<String>, counter: &mut usize| -> String {
        let name = format!("n{}", *counter);
        *counter += 1;
        nodes.push(name.clone());
        name
    };

    let mut vessels: Vec<VesselRec> = Vec::new();
    let mut junctions: Vec<JunctionRec> = Vec::new();
    let draw_vessel = |rng: &mut OracleRng, from: String, to: String| VesselRec {
        from,
        to,
        r: rng.range(20.0, 60.0),
        l: rng.range(0.5, 1.5),
        c: rng.range(2e-5, 6e-5),
        s: if rng.uniform() < 0.5 {
            0.0
        } else {
            rng.range(0.05, 0.3)
        },
    };

    let root = fresh(&mut nodes, &mut counter);
    vessels.push(draw_vessel(rng, "inlet".into(), root.clone()));
    let mut open = vec![root];
    for _ in 0..n_junctions {
        let pick = (rng.next_u64() % open.len() as u64) as usize;
        let parent = open.swap_remove(pick);
        let mut to = Vec::new();
        let mut outlets = Vec::new();
        for _ in 0..2 {
            let child = fresh(&mut nodes, &mut counter);
            let leaf = fresh(&mut nodes, &mut counter);
            vessels.push(draw_vessel(rng, child.clone(), leaf.clone()));
            open.push(leaf);
            to.push(child);
            outlets.push((
                rng.range(5.0, 15.0),
                rng.range(0.3, 0.8),
                rng.range(0.02, 0.08),
            ));
        }
        junctions.push(JunctionRec {
            from: parent,
            to,
            outlets,
        });
    }

    // Stenosis bookkeeping against the global layout: vessel i holds its S at
    // 4i + 3; junction blocks (R.., L.., S..) follow all vessel blocks.
    let mut stenoses = Vec::new();
    for (i, v) in vessels.iter().enumerate() {
        if v.s > 0.0 {
            stenoses.push(StenosisRef {
                from: v.from.clone(),
                to: v.to.clone(),
                s_index: 4 * i + 3,
                s_value: v.s,
            });
        }
    }
    let mut base = 4 * vessels.len();
    for j in &junctions {
        let n_out = j.outlets.len();
        for (k, &(_, _, s)) in j.outlets.iter().enumerate() {
            stenoses.push(StenosisRef {
                from: j.from.clone(),
                to: j.to[k].clone(),
                s_index: base + 2 * n_out + k,
                s_value: s,
            });
        }
        base += 3 * n_out;
    }

    let vessels_json: Vec<serde_json::Value> = vessels
        .iter()
        .enumerate()
        .map(|(i, v)| {
            serde_json::json!({
                "name": format!("v{}", i + 1),
                "from": v.from, "to": v.to,
                "parameters": {
                    "resistance": v.r, "inductance": v.l,
                    "capacitance": v.c, "stenosis": v.s
                }
            })
        })
        .collect();
    let junctions_json: Vec<serde_json::Value> = junctions
        .iter()
        .enumerate()
        .map(|(i, j)| {
            serde_json::json!({
                "name": format!("j{}", i + 1),
                "from": j.from, "to": j.to,
                "outlets": j.outlets.iter().map(|&(r, l, s)| serde_json::json!({
                    "resistance": r, "inductance": l, "stenosis": s
                })).collect::<Vec<_>>()
            })
        })
        .collect();
    let mut bcs = vec![serde_json::json!({
        "type": "flow", "node": "inlet",
        "times": [0.0, 0.2, 0.4, 0.6, 0.8],
        "values": [20.0, 60.0, 35.0, 15.0, 12.0]
    })];
    for node in &open {
        let rp = rng.range(80.0, 130.0);
        bcs.push(serde_json::json!({
            "type": "windkessel", "node": node,
            "proximal_resistance": rp, "distal_resistance": 10.0 * rp,
            "capacitance": rng.range(5e-5, 1e-4), "reference_pressure": 0.0
        }));
    }
    let doc = serde_json::json!({
        "period": 1.0,
        "fluid": { "density": 1.06, "viscosity": 0.04 },
        "nodes": nodes,
        "vessels": vessels_json,
        "junctions": junctions_json,
        "boundary_conditions": bcs,
    });
    (doc.to_string(), stenoses)
}

fn r_squared(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as f64;
    let mean = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let ss_tot: f64 = pairs.iter().map(|p| (p.0 - mean).powi(2)).sum();
    let ss_res: f64 = pairs.iter().map(|p| (p.1 - p.0).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

/// Criterion: on 20 random networks (up to 10 branches, up to 3 junctions),
/// damped least squares from a zero start with default settings recovers R, L
/// and C with pooled R^2 >= 0.999, and S with R^2 >= 0.9 over the branches
/// where the stenosis carries at least 5% of the branch pressure drop.
/// Budget 2 min.
#[test]
fn random_networks_are_recovered_from_their_own_trajectories() {
    let t0 = Instant::now();
    let mut rng = OracleRng::new(0xacce_0004);
    let config = IntegratorConfig::default();
    let mut by_class: std::collections::BTreeMap<char, Vec<(f64, f64)>> =
        std::collections::BTreeMap::new();
    let mut s_qualified: Vec<(f64, f64)> = Vec::new();
    let mut s_total = 0usize;
    for trial in 0..20 {
        let (json, stenoses) = random_network(&mut rng, 1 + trial % 3);
        let model = LpnModel::from_json_str(&json).unwrap();
        let sim = simulate_model(&model, &config).unwrap();
        assert!(sim.periodic, "FAIL: network {trial} never became periodic");
        let obs = ObservationSet::resampled(&sim.trajectory, 128, model.period()).unwrap();

        let truth = model.parameter_vector();
        let report = lm_optimize(
            &model,
            &vec![0.0; truth.len()],
            &obs,
            &LmConfig::default(),
        )
        .unwrap();

        for (g, name) in model.parameter_names().iter().enumerate() {
            let class = name
                .split('.')
                .next_back()
                .and_then(|tail| tail.chars().next())
                .unwrap();
            by_class
                .entry(class)
                .or_default()
                .push((truth[g], report.alpha[g]));
        }

        // Qualification: the stenosis term S Q |Q| against the observed
        // pressure drop across the branch, both maximized over the cycle.
        let traj = &sim.trajectory;
        for st in &stenoses {
            s_total += 1;
            let qcol = traj.column_index(&st.to, Quantity::Flow).unwrap();
            let pf = traj.column_index(&st.from, Quantity::Pressure).unwrap();
            let pt = traj.column_index(&st.to, Quantity::Pressure).unwrap();
            let qmax = traj
                .column_vec(qcol)
                .iter()
                .fold(0.0f64, |m, q| m.max(q.abs()));
            let dpmax = traj
                .values
                .column(pf)
                .iter()
                .zip(traj.values.column(pt).iter())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if st.s_value * qmax * qmax >= 0.05 * dpmax {
                s_qualified.push((st.s_value, report.alpha[st.s_index]));
            }
        }
    }

    for class in ['R', 'L', 'C'] {
        let r2 = r_squared(&by_class[&class]);
        assert!(
            r2 >= 0.999,
            "FAIL: pooled R^2 for {class} is {r2:.6}, need >= 0.999 over {} entries",
            by_class[&class].len()
        );
    }
    assert!(
        s_qualified.len() >= 5,
        "FAIL: only {} of {s_total} stenoses met the 5% share filter; the fixture is degenerate",
        s_qualified.len()
    );
    let r2_s = r_squared(&s_qualified);
    assert!(
        r2_s >= 0.9,
        "FAIL: stenosis R^2 {r2_s:.4} over {} qualifying branches, need >= 0.9",
        s_qualified.len()
    );
    pass(
        "network ground-truth recovery",
        &format!(
            "R^2 R {:.6}, L {:.6}, C {:.6}; S {:.4} on {}/{} qualifying",
            r_squared(&by_class[&'R']),
            r_squared(&by_class[&'L']),
            r_squared(&by_class[&'C']),
            r2_s,
            s_qualified.len(),
            s_total
        ),
        t0,
        Some(120.0),
    );
}

const RESISTOR_JSON: &str = r#"{
  "period": 1.0,
  "fluid": { "density": 1.06, "viscosity": 0.04 },
  "nodes": ["in", "out"],
  "vessels": [
    { "name": "v1", "from": "in", "to": "out",
      "parameters": { "resistance": 2.0, "inductance": 0.0, "capacitance": 0.0, "stenosis": 0.0 } }
  ],
  "junctions": [],
  "boundary_conditions": [
    { "type": "flow", "node": "in",
      "times": [0.0, 0.25, 0.5, 0.75], "values": [1.0, 2.0, 3.0, 2.0] },
    { "type": "windkessel", "node": "out",
      "proximal_resistance": 50.0, "distal_resistance": 500.0,
      "capacitance": 1e-4, "reference_pressure": 0.0 }
  ]
}"#;

fn resistor_trajectory(flows: &[f64], pressures: &[f64]) -> Trajectory {
    let n = flows.len();
    let times: Vec<f64> = (0..n).map(|k| k as f64 / n as f64).collect();
    let mut values = DMatrix::zeros(n, 4);
    for k in 0..n {
        values[(k, 0)] = pressures[k];
        values[(k, 1)] = flows[k];
        values[(k, 3)] = flows[k];
    }
    Trajectory::new(
        vec!["in".into(), "out".into()],
        times,
        values,
        Some(DMatrix::zeros(n, 4)),
    )
    .unwrap()
}

/// Criterion: a one-parameter linear fit lands on the closed-form
/// least-squares solution to relative 1e-9. Budget 1 s.
#[test]
fn linear_resistance_fit_matches_closed_form_least_squares() {
    let t0 = Instant::now();
    let model = LpnModel::from_json_str(RESISTOR_JSON).unwrap();
    // Deliberately inconsistent data, so the optimum has nonzero residual and
    // the fit must find the true least-squares balance point.
    let flows = [1.0, 2.0, 3.0, 2.5, 1.5, 2.0];
    let pressures = [2.2, 3.9, 6.1, 5.05, 2.9, 4.2];
    let closed_form: f64 = flows
        .iter()
        .zip(&pressures)
        .map(|(q, p)| p * q)
        .sum::<f64>()
        / flows.iter().map(|q| q * q).sum::<f64>();
    let obs = ObservationSet::unweighted(resistor_trajectory(&flows, &pressures)).unwrap();
    let config = LmConfig {
        frozen: vec![false, true, true, true],
        ..LmConfig::default()
    };
    let report = lm_optimize(&model, &[1.0, 0.0, 0.0, 0.0], &obs, &config).unwrap();
    let rel = (report.alpha[0] - closed_form).abs() / closed_form.abs();
    assert!(
        rel <= 1e-9,
        "FAIL: fitted resistance {} vs closed form {closed_form}, rel err {rel:.3e}",
        report.alpha[0]
    );
    pass(
        "linear least-squares exactness",
        &format!("fit {:.12} vs closed form {closed_form:.12}", report.alpha[0]),
        t0,
        Some(1.0),
    );
}

/// Criterion: with prior N(0,1), an identity forward model, unit noise and a
/// single observation 2, the sampler at 10000 particles (threshold 5000, two
/// rejuvenation sweeps) recovers the conjugate posterior N(1, 0.5): weighted
/// mean 1.00 +- 0.05 and variance 0.50 +- 0.05 on each of 5 seeds.
/// Budget 30 s.
#[test]
fn conjugate_gaussian_posterior_is_recovered_across_seeds() {
    let t0 = Instant::now();
    let prior = Prior::normal(&[(0.0, 1.0)]).unwrap();
    let noise = NoiseModel::new(vec![2.0], vec![1.0]).unwrap();
    let identity = |theta: &[f64]| Some(vec![theta[0]]);
    let mut means = Vec::new();
    let mut vars = Vec::new();
    for seed in 1..=5u64 {
        let config = SmcConfig {
            particle_count: 10_000,
            ess_min: 5_000.0,
            rejuvenation_steps: 2,
            seed,
            ..SmcConfig::default()
        };
        let res = run_smc(&identity, &prior, &noise, &config).unwrap();
        check_bookkeeping("conjugate run", &res, config.particle_count);
        let mean = res.posterior.weighted_mean()[0];
        let var = res.posterior.weighted_covariance()[(0, 0)];
        assert!(
            (mean - 1.0).abs() <= 0.05,
            "FAIL: seed {seed}: posterior mean {mean:.4}, want 1.00 +- 0.05"
        );
        assert!(
            (var - 0.5).abs() <= 0.05,
            "FAIL: seed {seed}: posterior variance {var:.4}, want 0.50 +- 0.05"
        );
        means.push(mean);
        vars.push(var);
    }
    pass(
        "conjugate gaussian posterior",
        &format!(
            "means {:.3}..{:.3}, variances {:.3}..{:.3} over 5 seeds",
            means.iter().cloned().fold(f64::INFINITY, f64::min),
            means.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            vars.iter().cloned().fold(f64::INFINITY, f64::min),
            vars.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        ),
        t0,
        Some(30.0),
    );
}

/// Criterion: the tempering exponent terminates at exactly 1, every reported
/// ESS lies in [1, k], normalized weights sum to 1 +- 1e-12, and rerunning
/// with the same seed reproduces the posterior bitwise while a different seed
/// does not.
#[test]
fn sampler_bookkeeping_invariants_hold() {
    let t0 = Instant::now();
    let prior = Prior::normal(&[(0.0, 1.0)]).unwrap();
    let noise = NoiseModel::new(vec![2.0], vec![1.0]).unwrap();
    let identity = |theta: &[f64]| Some(vec![theta[0]]);
    let config = SmcConfig {
        particle_count: 2_000,
        ess_min: 1_000.0,
        seed: 42,
        ..SmcConfig::default()
    };
    let a = run_smc(&identity, &prior, &noise, &config).unwrap();
    let b = run_smc(&identity, &prior, &noise, &config).unwrap();
    let other = SmcConfig { seed: 43, ..config.clone() };
    let c = run_smc(&identity, &prior, &noise, &other).unwrap();

    for (label, run) in [("seed 42", &a), ("seed 42 rerun", &b), ("seed 43", &c)] {
        check_bookkeeping(label, run, config.particle_count);
    }
    assert!(
        a.posterior.locations == b.posterior.locations
            && a.posterior.weights == b.posterior.weights
            && a.posterior.log_likelihoods == b.posterior.log_likelihoods
            && a.map == b.map
            && a.zeta_schedule == b.zeta_schedule,
        "FAIL: identical seeds must give bitwise-identical posteriors"
    );
    assert!(
        a.posterior.locations != c.posterior.locations,
        "FAIL: different seeds produced identical particle locations"
    );
    pass(
        "sampler bookkeeping invariants",
        &format!(
            "{} stages at seed 42, {} at seed 43; reruns bitwise equal",
            a.zeta_schedule.len(),
            c.zeta_schedule.len()
        ),
        t0,
        None,
    );
}

/// Criterion: the full two-run workflow in surrogate mode on the three-outlet
/// tree at SNR 100 and 2000 particles lands each posterior-2 mean within 0.1
/// log-units of the generating boundary parameters, with optimized-model
/// training errors below 1% for both pressure and flow. Budget 5 min.
#[test]
fn two_run_calibration_recovers_boundary_conditions() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("model.json");
    fs::write(&model_path, TREE_JSON).unwrap();

    let sim_settings = SimSettings {
        steps_per_cycle: 100,
        ..SimSettings::default()
    };
    let model = LpnModel::from_json_str(TREE_JSON).unwrap();
    let reference = simulate_model(&model, &sim_settings.to_config()).unwrap();
    assert!(reference.periodic, "FAIL: reference run must be periodic");
    reference
        .trajectory
        .write_csv(&dir.path().join("reference.csv"))
        .unwrap();

    let case_json = serde_json::json!({
        "model": "model.json",
        "workspace": "ws",
        "observations": { "trajectory": "reference.csv", "snr": 100.0, "seed": 6 },
        "prior": { "uniform": [[2.0, 8.0], [2.0, 8.0], [2.0, 8.0]] },
        "smc": { "particle_count": 2000, "ess_min": 1000.0,
                 "rejuvenation_steps": 2, "seed": 11 },
        "simulation": { "steps_per_cycle": 100 }
    });
    let case_path = dir.path().join("case.json");
    fs::write(&case_path, serde_json::to_string_pretty(&case_json).unwrap()).unwrap();

    let case = CalibrationCase::from_json_file(&case_path).unwrap();
    let outcome = run_calibration(&case, false, Some(model_path.as_path())).unwrap();
    let report = match outcome {
        CalibrationOutcome::Complete(r) => r,
        CalibrationOutcome::AwaitingHandoff { .. } => {
            panic!("FAIL: surrogate mode must run to completion in one pass")
        }
    };

    // Generating parameters: log of total outlet resistance per Windkessel.
    let truth: Vec<f64> = model
        .windkessel_bcs()
        .iter()
        .map(|(_, bc)| (bc.proximal_resistance + bc.distal_resistance).ln())
        .collect();
    let mean2 = report.run2.posterior.weighted_mean();
    check_bookkeeping("run 2", &report.run2, case.smc.particle_count);
    for (i, (&m, &t)) in mean2.iter().zip(&truth).enumerate() {
        assert!(
            (m - t).abs() <= 0.1,
            "FAIL: outlet {i}: posterior mean {m:.4} vs generating {t:.4}, off by {:.4} > 0.1",
            (m - t).abs()
        );
    }
    assert!(
        report.training_errors.max_pressure_error < 0.01,
        "FAIL: training pressure error {:.4} >= 1%",
        report.training_errors.max_pressure_error
    );
    assert!(
        report.training_errors.max_flow_error < 0.01,
        "FAIL: training flow error {:.4} >= 1%",
        report.training_errors.max_flow_error
    );
    let max_dev = mean2
        .iter()
        .zip(&truth)
        .map(|(m, t)| (m - t).abs())
        .fold(0.0f64, f64::max);
    pass(
        "two-run surrogate calibration",
        &format!(
            "posterior means within {max_dev:.3} log-units; errors P {:.2e}, Q {:.2e}",
            report.training_errors.max_pressure_error, report.training_errors.max_flow_error
        ),
        t0,
        Some(300.0),
    );
}

/// Criterion: on the same tree, the seed-averaged total posterior variance
/// strictly decreases as the signal-to-noise ratio climbs through 4, 11.1
/// and 100.
#[test]
fn posterior_variance_shrinks_as_snr_grows() {
    let t0 = Instant::now();
    let model = LpnModel::from_json_str(TREE_JSON).unwrap();
    let config = SimSettings {
        steps_per_cycle: 100,
        ..SimSettings::default()
    }
    .to_config();
    let sim = simulate_model(&model, &config).unwrap();
    let y_true = extract_observations(&sim.trajectory, &model).unwrap();
    let theta_model = OutletResistanceModel::new(model, config);
    let prior = Prior::uniform(&[(2.0, 8.0), (2.0, 8.0), (2.0, 8.0)]).unwrap();

    let mut averages = Vec::new();
    for &snr in &[4.0, 11.1, 100.0] {
        let mut total = 0.0;
        for m in 0..3u64 {
            let (_, noise) = synthesize_noisy_observations(&y_true, snr, 211 + m).unwrap();
            let smc = SmcConfig {
                particle_count: 400,
                ess_min: 200.0,
                rejuvenation_steps: 1,
                seed: 331 + m,
                ..SmcConfig::default()
            };
            let res = run_smc(&theta_model, &prior, &noise, &smc).unwrap();
            check_bookkeeping("snr run", &res, smc.particle_count);
            total += res.posterior.weighted_covariance().trace();
        }
        averages.push(total / 3.0);
    }
    assert!(
        averages[0] > averages[1] && averages[1] > averages[2],
        "FAIL: posterior variance must shrink as SNR grows; got {averages:?} for SNR 4, 11.1, 100"
    );
    pass(
        "snr variance monotonicity",
        &format!(
            "mean total variance {:.3e} > {:.3e} > {:.3e}",
            averages[0], averages[1], averages[2]
        ),
        t0,
        None,
    );
}

/// Criterion: on a two-axis coupled case whose data come from the network
/// itself, the grid posterior's argmax cell contains the generating
/// parameters on a 10 x 10 grid over [2,8] x [3,6].
#[test]
fn grid_posterior_argmax_covers_the_generating_parameters() {
    let t0 = Instant::now();
    let base = LpnModel::from_json_str(TREE_JSON).unwrap();
    // Ground truth on the coupled manifold: the first two outlets share one
    // log-resistance value, the third gets its own.
    let targets = [7.0, 7.0, 5.0];
    let truth_bcs: Vec<_> = base
        .windkessel_bcs()
        .iter()
        .zip(targets)
        .map(|((_, bc), t)| bc.with_log_total_resistance(t))
        .collect();
    let truth = base.with_windkessel_bcs(&truth_bcs).unwrap();

    let config = SimSettings {
        steps_per_cycle: 150,
        ..SimSettings::default()
    }
    .to_config();
    let sim = simulate_model(&truth, &config).unwrap();
    let y_true = extract_observations(&sim.trajectory, &truth).unwrap().to_vec();
    // Noise-free data with an SNR-11.1 likelihood width.
    let noise = NoiseModel::from_snr(y_true, 11.1).unwrap();
    let theta_model = OutletResistanceModel::new(truth, config);

    let spec = GridSpec {
        axes: vec![
            GridAxis {
                bounds: (2.0, 8.0),
                components: vec![0, 1],
            },
            GridAxis {
                bounds: (3.0, 6.0),
                components: vec![2],
            },
        ],
        cells: 10,
    };
    let prior = spec.default_prior().unwrap();
    let post = grid_posterior(&theta_model, &prior, &noise, &spec).unwrap();
    assert_eq!(post.failures, 0, "FAIL: grid evaluations failed");
    let mass: f64 = post.masses.iter().sum();
    assert!(
        (mass - 1.0).abs() <= 1e-12,
        "FAIL: cell masses sum to {mass}"
    );
    let am = post.argmax_center();
    // Cell half-widths: 0.3 on the coupled axis, 0.15 on the free one.
    assert!(
        (am[0] - 7.0).abs() <= 0.3 + 1e-12,
        "FAIL: argmax cell center {:.3} on axis 0 does not cover 7.0",
        am[0]
    );
    assert!(
        (am[1] - 5.0).abs() <= 0.15 + 1e-12,
        "FAIL: argmax cell center {:.3} on axis 1 does not cover 5.0",
        am[1]
    );
    pass(
        "grid posterior argmax",
        &format!("argmax cell center ({:.2}, {:.2}) covers (7.0, 5.0)", am[0], am[1]),
        t0,
        None,
    );
}
