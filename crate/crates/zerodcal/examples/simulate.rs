//! Forward simulation of a branching arterial network: build the model from
//! its JSON description, integrate to the periodic regime, and report the
//! cap pressures and flows plus where the trajectory file lands.
//!
//! Run with: cargo run --example simulate

use std::env;
use std::fs;

use zerodcal::forward::{simulate_model, IntegratorConfig};
use zerodcal::model::{LpnModel, Quantity};
use zerodcal::obs::extract_observations;

const MODEL_JSON: &str = r#"{
  "period": 1.0,
  "fluid": { "density": 1.06, "viscosity": 0.04 },
  "nodes": ["inlet", "a", "b", "c", "e", "f", "g", "d1", "d2", "d3"],
  "vessels": [
    { "name": "v1", "from": "inlet", "to": "a",
      "parameters": { "resistance": 20.0, "inductance": 1.0, "capacitance": 5e-5, "stenosis": 0.1 } },
    { "name": "v2", "from": "b", "to": "d1",
      "parameters": { "resistance": 40.0, "inductance": 1.5, "capacitance": 4e-5, "stenosis": 0.0 } },
    { "name": "v3", "from": "c", "to": "e",
      "parameters": { "resistance": 30.0, "inductance": 1.2, "capacitance": 3e-5, "stenosis": 0.2 } },
    { "name": "v4", "from": "f", "to": "d2",
      "parameters": { "resistance": 45.0, "inductance": 0.8, "capacitance": 2e-5, "stenosis": 0.0 } },
    { "name": "v5", "from": "g", "to": "d3",
      "parameters": { "resistance": 55.0, "inductance": 0.9, "capacitance": 2e-5, "stenosis": 0.3 } }
  ],
  "junctions": [
    { "name": "j1", "from": "a", "to": ["b", "c"],
      "outlets": [
        { "resistance": 10.0, "inductance": 0.5, "stenosis": 0.05 },
        { "resistance": 12.0, "inductance": 0.6, "stenosis": 0.06 } ] },
    { "name": "j2", "from": "e", "to": ["f", "g"],
      "outlets": [
        { "resistance": 9.0, "inductance": 0.4, "stenosis": 0.04 },
        { "resistance": 11.0, "inductance": 0.7, "stenosis": 0.07 } ] }
  ],
  "boundary_conditions": [
    { "type": "flow", "node": "inlet",
      "times": [0.0, 0.2, 0.4, 0.6, 0.8],
      "values": [20.0, 60.0, 35.0, 15.0, 12.0] },
    { "type": "windkessel", "node": "d1",
      "proximal_resistance": 100.0, "distal_resistance": 1000.0,
      "capacitance": 8e-5, "reference_pressure": 0.0 },
    { "type": "windkessel", "node": "d2",
      "proximal_resistance": 120.0, "distal_resistance": 1200.0,
      "capacitance": 6e-5, "reference_pressure": 0.0 },
    { "type": "windkessel", "node": "d3",
      "proximal_resistance": 90.0, "distal_resistance": 900.0,
      "capacitance": 7e-5, "reference_pressure": 0.0 }
  ]
}"#;

fn main() -> zerodcal::Result<()> {
    let model = LpnModel::from_json_str(MODEL_JSON)?;
    let sim = simulate_model(&model, &IntegratorConfig::default())?;
    println!(
        "integrated {} cycles of {:.1} s at {} samples/cycle; periodic: {}",
        sim.cycles,
        model.period(),
        sim.trajectory.len(),
        sim.periodic
    );

    // Peak systolic / diastolic pressure at every cap (CGS: dyn/cm^2).
    let caps = ["inlet", "d1", "d2", "d3"];
    println!("\n  node    P min      P max      Q mean");
    for node in caps {
        let p = sim
            .trajectory
            .column_vec(sim.trajectory.column_index(node, Quantity::Pressure).unwrap());
        let q = sim
            .trajectory
            .column_vec(sim.trajectory.column_index(node, Quantity::Flow).unwrap());
        let (lo, hi) = p
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        let mean = q.iter().sum::<f64>() / q.len() as f64;
        println!("  {node:<6}  {lo:>9.1}  {hi:>9.1}  {mean:>9.3}");
    }

    // The condensed observation vector used by the inference tooling.
    let y = extract_observations(&sim.trajectory, &model)?;
    println!(
        "\nobservation vector: P_in [{:.1}, {:.1}], outlet flow means {:?}",
        y.p_in_min,
        y.p_in_max,
        y.q_means.iter().map(|q| (q * 1e3).round() / 1e3).collect::<Vec<_>>()
    );

    let out = env::temp_dir().join("zerodcal-simulate");
    fs::create_dir_all(&out)?;
    let csv = out.join("trajectory.csv");
    sim.trajectory.write_csv(&csv)?;
    println!("full trajectory written to {}", csv.display());
    Ok(())
}
