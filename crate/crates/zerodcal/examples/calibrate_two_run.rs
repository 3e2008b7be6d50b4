//! The full two-run calibration workflow, end to end: posterior sampling over
//! the outlet boundary conditions, a hand-off request for a high-fidelity
//! evaluation at the MAP point (answered in-process by the network itself
//! here), an element-parameter fit against that response, and a second
//! posterior run on the re-optimized network.
//!
//! Runs in roughly a minute on one core; the workspace directory with every
//! intermediate artifact is kept for inspection.
//! Run with: cargo run --example calibrate_two_run

use std::env;
use std::fs;

use zerodcal::forward::simulate_model;
use zerodcal::model::LpnModel;
use zerodcal::pipeline::{run_calibration, CalibrationCase, CalibrationOutcome, SimSettings};

const MODEL_JSON: &str = r#"{
  "period": 1.0,
  "fluid": { "density": 1.06, "viscosity": 0.04 },
  "nodes": ["inlet", "a", "b", "c", "d1", "d2"],
  "vessels": [
    { "name": "v1", "from": "inlet", "to": "a",
      "parameters": { "resistance": 25.0, "inductance": 1.1, "capacitance": 5e-5, "stenosis": 0.15 } },
    { "name": "v2", "from": "b", "to": "d1",
      "parameters": { "resistance": 42.0, "inductance": 1.4, "capacitance": 3e-5, "stenosis": 0.0 } },
    { "name": "v3", "from": "c", "to": "d2",
      "parameters": { "resistance": 35.0, "inductance": 0.9, "capacitance": 4e-5, "stenosis": 0.22 } }
  ],
  "junctions": [
    { "name": "j1", "from": "a", "to": ["b", "c"],
      "outlets": [
        { "resistance": 11.0, "inductance": 0.5, "stenosis": 0.05 },
        { "resistance": 13.0, "inductance": 0.7, "stenosis": 0.06 } ] }
  ],
  "boundary_conditions": [
    { "type": "flow", "node": "inlet",
      "times": [0.0, 0.2, 0.4, 0.6, 0.8],
      "values": [20.0, 60.0, 35.0, 15.0, 12.0] },
    { "type": "windkessel", "node": "d1",
      "proximal_resistance": 110.0, "distal_resistance": 1100.0,
      "capacitance": 8e-5, "reference_pressure": 0.0 },
    { "type": "windkessel", "node": "d2",
      "proximal_resistance": 95.0, "distal_resistance": 950.0,
      "capacitance": 7e-5, "reference_pressure": 0.0 }
  ]
}"#;

fn main() -> zerodcal::Result<()> {
    // Stage the case in a scratch directory that survives the run.
    let dir = env::temp_dir().join("zerodcal-two-run");
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir)?;

    let model = LpnModel::from_json_str(MODEL_JSON)?;
    let sim_settings = SimSettings {
        steps_per_cycle: 100,
        ..SimSettings::default()
    };
    fs::write(dir.join("model.json"), MODEL_JSON)?;
    // Observations are synthesized from the network's own periodic cycle,
    // corrupted at SNR 100; a real study would point at measured data.
    let reference = simulate_model(&model, &sim_settings.to_config())?;
    reference.trajectory.write_csv(&dir.join("reference.csv"))?;
    let case_json = serde_json::json!({
        "model": "model.json",
        "workspace": "workspace",
        "observations": { "trajectory": "reference.csv", "snr": 100.0, "seed": 9 },
        "prior": { "uniform": [[2.0, 8.0], [2.0, 8.0]] },
        "smc": { "particle_count": 400, "ess_min": 200.0,
                 "rejuvenation_steps": 2, "seed": 5 },
        "simulation": { "steps_per_cycle": 100 }
    });
    fs::write(
        dir.join("case.json"),
        serde_json::to_string_pretty(&case_json)?,
    )?;

    // Surrogate mode answers the hand-off with the network itself, so the
    // whole workflow completes in one call. Without it, this returns
    // AwaitingHandoff after writing workspace/hifi_request.json, and a later
    // resume picks up workspace/hifi_response.csv from the external solver.
    let case = CalibrationCase::from_json_file(&dir.join("case.json"))?;
    let outcome = run_calibration(&case, false, Some(&dir.join("model.json")))?;
    let report = match outcome {
        CalibrationOutcome::Complete(r) => r,
        CalibrationOutcome::AwaitingHandoff { request } => {
            println!("hand-off request written to {}", request.display());
            return Ok(());
        }
    };

    let truth: Vec<f64> = model
        .windkessel_bcs()
        .iter()
        .map(|(_, bc)| (bc.proximal_resistance + bc.distal_resistance).ln())
        .collect();
    println!("generating parameters:   {truth:?}");
    println!("run-1 MAP estimate:      {:?}", report.run1_map);
    println!(
        "element fit:             converged {} in {} iterations",
        report.lm.converged, report.lm.iterations
    );
    println!(
        "training errors:         pressure {:.2e}, flow {:.2e}",
        report.training_errors.max_pressure_error, report.training_errors.max_flow_error
    );
    let mean2 = report.run2.posterior.weighted_mean();
    let cov2 = report.run2.posterior.weighted_covariance();
    println!("run-2 posterior:");
    for (i, (node, _)) in model.windkessel_bcs().iter().enumerate() {
        println!(
            "  {node}: {:.4} +- {:.4}  (generating {:.4})",
            mean2[i],
            cov2[(i, i)].sqrt(),
            truth[i]
        );
    }

    println!("\nworkspace artifacts in {}:", report.workspace.display());
    let mut names: Vec<String> = fs::read_dir(&report.workspace)?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect();
    names.sort();
    for n in names {
        println!("  {n}");
    }
    Ok(())
}
