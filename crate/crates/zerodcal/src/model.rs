//! Network description, parameter layout, and file formats.
//!
//! A model is a set of named nodes connected by vessels and junctions, driven
//! by one prescribed-flow inlet and closed by Windkessel outlets. Each node
//! carries two unknowns, pressure and flow, stored at indices `2 i` and
//! `2 i + 1` for node `i`. Element equations are stacked in element-major
//! order (vessels, then junctions, then boundary conditions in file order),
//! and the network is well posed when that stack is square.
//!
//! The tunable parameter vector gathers every vessel's (R, L, C, S) followed
//! by every junction's (R_1..R_n, L_1..L_n, S_1..S_n); boundary-condition
//! values are not part of it and are updated through their own methods.
//!
//! All quantities are CGS: pressures in dyn/cm^2, flows in cm^3/s, lengths in
//! cm, viscosity in poise, density in g/cm^3.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::elements::{
    blood_vessel_contribution, junction_contribution, sgn0, windkessel_contribution,
    ElementContribution, JunctionOutletParams,
};
use crate::error::{Error, Result};
use crate::spline::PeriodicSpline;

/// Empirical pressure-recovery factor in the stenosis coefficient.
const STENOSIS_KT: f64 = 1.52;
/// Lower clamp for derived capacitances, keeping near-rigid walls solvable.
const CAPACITANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluidProperties {
    pub density: f64,
    pub viscosity: f64,
}

/// Straight-segment geometry from which lumped parameters derive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VesselGeometry {
    pub length: f64,
    pub radius: f64,
    pub wall_thickness: f64,
    pub elastic_modulus: f64,
    /// Narrowed lumen area of a stenosed segment; absent means no stenosis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stenosis_area: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VesselParams {
    pub resistance: f64,
    pub inductance: f64,
    pub capacitance: f64,
    pub stenosis: f64,
}

/// Three-element Windkessel with a reference (venous) pressure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindkesselBc {
    pub proximal_resistance: f64,
    pub distal_resistance: f64,
    pub capacitance: f64,
    pub reference_pressure: f64,
}

impl WindkesselBc {
    /// Log of the total resistance, the coordinate the posterior sampler
    /// works in.
    pub fn log_total_resistance(&self) -> f64 {
        (self.proximal_resistance + self.distal_resistance).ln()
    }

    /// Proximal-to-distal resistance split, held fixed under resampling.
    pub fn ratio(&self) -> f64 {
        self.proximal_resistance / self.distal_resistance
    }

    /// Distal time constant Rd C, held fixed under resampling.
    pub fn time_constant(&self) -> f64 {
        self.distal_resistance * self.capacitance
    }

    /// Rebuilds the Windkessel at a new total resistance, preserving the
    /// resistance split, the time constant, and the reference pressure.
    pub fn with_log_total_resistance(&self, theta: f64) -> WindkesselBc {
        let total = theta.exp();
        let rd = total / (1.0 + self.ratio());
        WindkesselBc {
            proximal_resistance: total - rd,
            distal_resistance: rd,
            capacitance: self.time_constant() / rd,
            reference_pressure: self.reference_pressure,
        }
    }
}

/// Converts segment geometry to lumped parameters:
/// R = 8 mu l / (pi r^4), L = rho l / (pi r^2), C = 3 l pi r^3 / (2 E h),
/// and S = Kt rho / (2 A0^2) (A0/As - 1)^2 with A0 the open lumen area.
pub fn vessel_parameters_from_geometry(
    geom: &VesselGeometry,
    fluid: &FluidProperties,
) -> Result<VesselParams> {
    let ok = geom.length > 0.0
        && geom.radius > 0.0
        && geom.wall_thickness > 0.0
        && geom.elastic_modulus > 0.0
        && geom.length.is_finite()
        && geom.radius.is_finite()
        && fluid.density > 0.0
        && fluid.viscosity > 0.0;
    if !ok {
        return Err(Error::InvalidParameter(format!(
            "vessel geometry and fluid properties must be positive: {geom:?}, {fluid:?}"
        )));
    }
    let r4 = geom.radius.powi(4);
    let area = std::f64::consts::PI * geom.radius * geom.radius;
    let resistance = 8.0 * fluid.viscosity * geom.length / (std::f64::consts::PI * r4);
    let inductance = fluid.density * geom.length / area;
    let capacitance = 3.0 * geom.length * std::f64::consts::PI * geom.radius.powi(3)
        / (2.0 * geom.elastic_modulus * geom.wall_thickness);
    if !capacitance.is_finite() {
        return Err(Error::InvalidParameter(
            "derived capacitance is not finite".into(),
        ));
    }
    let stenosis = match geom.stenosis_area {
        None => 0.0,
        Some(narrowed) => {
            if !(narrowed > 0.0 && narrowed.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "stenosis area must be positive, got {narrowed}"
                )));
            }
            STENOSIS_KT * fluid.density / (2.0 * area * area) * (area / narrowed - 1.0).powi(2)
        }
    };
    Ok(VesselParams {
        resistance,
        inductance,
        capacitance: capacitance.max(CAPACITANCE_FLOOR),
        stenosis,
    })
}

#[derive(Debug, Clone)]
pub struct Vessel {
    pub name: String,
    pub from: usize,
    pub to: usize,
    pub params: VesselParams,
    /// Present while the parameters still derive from geometry; dropped once
    /// they are overwritten numerically.
    pub geometry: Option<VesselGeometry>,
}

#[derive(Debug, Clone)]
pub struct Junction {
    pub name: String,
    pub from: usize,
    pub to: Vec<usize>,
    pub outlets: Vec<JunctionOutletParams>,
}

#[derive(Debug, Clone)]
pub(crate) enum BoundaryCondition {
    Flow {
        node: usize,
        times: Vec<f64>,
        values: Vec<f64>,
    },
    Windkessel {
        node: usize,
        bc: WindkesselBc,
    },
}

/// A validated lumped-parameter network.
#[derive(Debug, Clone)]
pub struct LpnModel {
    node_names: Vec<String>,
    period: f64,
    fluid: FluidProperties,
    vessels: Vec<Vessel>,
    junctions: Vec<Junction>,
    bcs: Vec<BoundaryCondition>,
}

// On-disk JSON shape.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    period: f64,
    fluid: FluidProperties,
    nodes: Vec<String>,
    vessels: Vec<VesselSpec>,
    #[serde(default)]
    junctions: Vec<JunctionSpec>,
    boundary_conditions: Vec<BcSpec>,
}

#[derive(Serialize, Deserialize)]
struct VesselSpec {
    name: String,
    from: String,
    to: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    geometry: Option<VesselGeometry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parameters: Option<VesselParams>,
}

#[derive(Serialize, Deserialize)]
struct JunctionSpec {
    name: String,
    from: String,
    to: Vec<String>,
    outlets: Vec<JunctionOutletParams>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum BcSpec {
    Flow {
        node: String,
        times: Vec<f64>,
        values: Vec<f64>,
    },
    Windkessel {
        node: String,
        proximal_resistance: f64,
        distal_resistance: f64,
        capacitance: f64,
        reference_pressure: f64,
    },
}

impl LpnModel {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        Self::from_file_repr(file)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ModelDefinition(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text).map_err(|e| {
            Error::ModelDefinition(format!("{}: {e}", path.display()))
        })
    }

    fn from_file_repr(file: ModelFile) -> Result<Self> {
        if !(file.period.is_finite() && file.period > 0.0) {
            return Err(Error::ModelDefinition(format!(
                "period must be positive, got {}",
                file.period
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &file.nodes {
            if !seen.insert(n.as_str()) {
                return Err(Error::ModelDefinition(format!("duplicate node name {n:?}")));
            }
        }
        let resolve = |name: &str| -> Result<usize> {
            file.nodes
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::ModelDefinition(format!("unknown node {name:?}")))
        };

        let mut vessels = Vec::with_capacity(file.vessels.len());
        for v in &file.vessels {
            let params = match (&v.parameters, &v.geometry) {
                (Some(p), _) => *p,
                (None, Some(g)) => vessel_parameters_from_geometry(g, &file.fluid)?,
                (None, None) => {
                    return Err(Error::ModelDefinition(format!(
                        "vessel {:?} needs either parameters or geometry",
                        v.name
                    )))
                }
            };
            if !(params.resistance.is_finite()
                && params.inductance.is_finite()
                && params.capacitance.is_finite()
                && params.stenosis.is_finite())
            {
                return Err(Error::ModelDefinition(format!(
                    "vessel {:?} has non-finite parameters",
                    v.name
                )));
            }
            vessels.push(Vessel {
                name: v.name.clone(),
                from: resolve(&v.from)?,
                to: resolve(&v.to)?,
                params,
                geometry: v.geometry,
            });
        }

        let mut junctions = Vec::with_capacity(file.junctions.len());
        for j in &file.junctions {
            if j.outlets.len() != j.to.len() {
                return Err(Error::ModelDefinition(format!(
                    "junction {:?} has {} outlet nodes but {} outlet parameter sets",
                    j.name,
                    j.to.len(),
                    j.outlets.len()
                )));
            }
            if j.to.is_empty() {
                return Err(Error::ModelDefinition(format!(
                    "junction {:?} has no outlets",
                    j.name
                )));
            }
            junctions.push(Junction {
                name: j.name.clone(),
                from: resolve(&j.from)?,
                to: j.to.iter().map(|n| resolve(n)).collect::<Result<_>>()?,
                outlets: j.outlets.clone(),
            });
        }

        let mut bcs = Vec::with_capacity(file.boundary_conditions.len());
        for bc in &file.boundary_conditions {
            bcs.push(match bc {
                BcSpec::Flow {
                    node,
                    times,
                    values,
                } => BoundaryCondition::Flow {
                    node: resolve(node)?,
                    times: times.clone(),
                    values: values.clone(),
                },
                BcSpec::Windkessel {
                    node,
                    proximal_resistance,
                    distal_resistance,
                    capacitance,
                    reference_pressure,
                } => BoundaryCondition::Windkessel {
                    node: resolve(node)?,
                    bc: WindkesselBc {
                        proximal_resistance: *proximal_resistance,
                        distal_resistance: *distal_resistance,
                        capacitance: *capacitance,
                        reference_pressure: *reference_pressure,
                    },
                },
            });
        }

        let model = Self {
            node_names: file.nodes,
            period: file.period,
            fluid: file.fluid,
            vessels,
            junctions,
            bcs,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let inflows = self
            .bcs
            .iter()
            .filter(|b| matches!(b, BoundaryCondition::Flow { .. }))
            .count();
        if inflows != 1 {
            return Err(Error::ModelDefinition(format!(
                "model needs exactly one prescribed-flow inlet, found {inflows}"
            )));
        }
        let rows: usize = self.vessels.len() * 2
            + self
                .junctions
                .iter()
                .map(|j| 1 + j.to.len())
                .sum::<usize>()
            + self.bcs.len();
        if rows != self.unknown_count() {
            return Err(Error::ModelDefinition(format!(
                "system is not square: {} equations for {} unknowns \
                 (check for dangling or over-constrained nodes)",
                rows,
                self.unknown_count()
            )));
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String> {
        let file = ModelFile {
            period: self.period,
            fluid: self.fluid,
            nodes: self.node_names.clone(),
            vessels: self
                .vessels
                .iter()
                .map(|v| VesselSpec {
                    name: v.name.clone(),
                    from: self.node_names[v.from].clone(),
                    to: self.node_names[v.to].clone(),
                    geometry: v.geometry,
                    parameters: if v.geometry.is_some() {
                        None
                    } else {
                        Some(v.params)
                    },
                })
                .collect(),
            junctions: self
                .junctions
                .iter()
                .map(|j| JunctionSpec {
                    name: j.name.clone(),
                    from: self.node_names[j.from].clone(),
                    to: j.to.iter().map(|n| self.node_names[*n].clone()).collect(),
                    outlets: j.outlets.clone(),
                })
                .collect(),
            boundary_conditions: self
                .bcs
                .iter()
                .map(|bc| match bc {
                    BoundaryCondition::Flow {
                        node,
                        times,
                        values,
                    } => BcSpec::Flow {
                        node: self.node_names[*node].clone(),
                        times: times.clone(),
                        values: values.clone(),
                    },
                    BoundaryCondition::Windkessel { node, bc } => BcSpec::Windkessel {
                        node: self.node_names[*node].clone(),
                        proximal_resistance: bc.proximal_resistance,
                        distal_resistance: bc.distal_resistance,
                        capacitance: bc.capacitance,
                        reference_pressure: bc.reference_pressure,
                    },
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn write_json_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()? + "\n")?;
        Ok(())
    }

    pub fn node_names(&self) -> &[String] {
        &self.node_names
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn fluid(&self) -> &FluidProperties {
        &self.fluid
    }

    pub fn vessels(&self) -> &[Vessel] {
        &self.vessels
    }

    pub fn junctions(&self) -> &[Junction] {
        &self.junctions
    }

    pub fn unknown_count(&self) -> usize {
        2 * self.node_names.len()
    }

    /// Global index of a node's pressure (or flow) unknown.
    pub fn unknown_index(&self, node: usize, quantity: Quantity) -> usize {
        2 * node
            + match quantity {
                Quantity::Pressure => 0,
                Quantity::Flow => 1,
            }
    }

    pub fn parameter_count(&self) -> usize {
        4 * self.vessels.len()
            + self
                .junctions
                .iter()
                .map(|j| 3 * j.outlets.len())
                .sum::<usize>()
    }

    /// First global parameter index of vessel `i`'s (R, L, C, S) block.
    pub fn vessel_param_base(&self, i: usize) -> usize {
        4 * i
    }

    /// First global parameter index of junction `j`'s (R.., L.., S..) block.
    pub fn junction_param_base(&self, j: usize) -> usize {
        4 * self.vessels.len()
            + self.junctions[..j]
                .iter()
                .map(|jj| 3 * jj.outlets.len())
                .sum::<usize>()
    }

    pub fn parameter_vector(&self) -> DVector<f64> {
        let mut alpha = Vec::with_capacity(self.parameter_count());
        for v in &self.vessels {
            alpha.extend([
                v.params.resistance,
                v.params.inductance,
                v.params.capacitance,
                v.params.stenosis,
            ]);
        }
        for j in &self.junctions {
            alpha.extend(j.outlets.iter().map(|o| o.resistance));
            alpha.extend(j.outlets.iter().map(|o| o.inductance));
            alpha.extend(j.outlets.iter().map(|o| o.stenosis));
        }
        DVector::from_vec(alpha)
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.parameter_count());
        for v in &self.vessels {
            for suffix in ["R", "L", "C", "S"] {
                names.push(format!("{}.{suffix}", v.name));
            }
        }
        for j in &self.junctions {
            for suffix in ["R", "L", "S"] {
                for k in 1..=j.outlets.len() {
                    names.push(format!("{}.{suffix}_{k}", j.name));
                }
            }
        }
        names
    }

    /// Mask over [`parameter_vector`](Self::parameter_vector) entries that is
    /// true exactly for the stenosis coefficients.
    pub fn stenosis_parameter_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.parameter_count()];
        for i in 0..self.vessels.len() {
            mask[self.vessel_param_base(i) + 3] = true;
        }
        for (j, junction) in self.junctions.iter().enumerate() {
            let base = self.junction_param_base(j);
            let n = junction.outlets.len();
            for k in 0..n {
                mask[base + 2 * n + k] = true;
            }
        }
        mask
    }

    /// Copy of the model with all element parameters replaced by `alpha`,
    /// laid out as [`parameter_vector`](Self::parameter_vector) returns them.
    pub fn with_parameters(&self, alpha: &[f64]) -> Result<Self> {
        if alpha.len() != self.parameter_count() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                alpha.len()
            )));
        }
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidParameter(
                "element parameters must be finite".into(),
            ));
        }
        let mut out = self.clone();
        let mut cursor = 0;
        for v in &mut out.vessels {
            v.params = VesselParams {
                resistance: alpha[cursor],
                inductance: alpha[cursor + 1],
                capacitance: alpha[cursor + 2],
                stenosis: alpha[cursor + 3],
            };
            v.geometry = None;
            cursor += 4;
        }
        for j in &mut out.junctions {
            let n = j.outlets.len();
            for (k, o) in j.outlets.iter_mut().enumerate() {
                o.resistance = alpha[cursor + k];
                o.inductance = alpha[cursor + n + k];
                o.stenosis = alpha[cursor + 2 * n + k];
            }
            cursor += 3 * n;
        }
        Ok(out)
    }

    /// Windkessel boundary conditions in file order, with their node names.
    pub fn windkessel_bcs(&self) -> Vec<(String, WindkesselBc)> {
        self.bcs
            .iter()
            .filter_map(|b| match b {
                BoundaryCondition::Windkessel { node, bc } => {
                    Some((self.node_names[*node].clone(), *bc))
                }
                _ => None,
            })
            .collect()
    }

    /// Copy of the model with the Windkessel boundary conditions replaced, in
    /// the same order [`windkessel_bcs`](Self::windkessel_bcs) reports them.
    pub fn with_windkessel_bcs(&self, new: &[WindkesselBc]) -> Result<Self> {
        let mut out = self.clone();
        let mut iter = new.iter();
        let mut replaced = 0;
        for bc in &mut out.bcs {
            if let BoundaryCondition::Windkessel { bc: wk, .. } = bc {
                match iter.next() {
                    Some(n) => {
                        *wk = *n;
                        replaced += 1;
                    }
                    None => break,
                }
            }
        }
        if replaced != new.len() || iter.next().is_some() {
            return Err(Error::DimensionMismatch(format!(
                "model has {replaced} Windkessel outlets, got {} replacements",
                new.len()
            )));
        }
        Ok(out)
    }

    pub fn inflow_node(&self) -> &str {
        self.bcs
            .iter()
            .find_map(|b| match b {
                BoundaryCondition::Flow { node, .. } => Some(self.node_names[*node].as_str()),
                _ => None,
            })
            .expect("validated model has an inflow")
    }

    /// Knots of the prescribed inflow waveform.
    pub fn inflow_waveform(&self) -> (&[f64], &[f64]) {
        self.bcs
            .iter()
            .find_map(|b| match b {
                BoundaryCondition::Flow { times, values, .. } => {
                    Some((times.as_slice(), values.as_slice()))
                }
                _ => None,
            })
            .expect("validated model has an inflow")
    }

    /// Builds the global system matrices for the current parameters.
    pub fn assemble(&self) -> Result<GlobalSystem> {
        let dim = self.unknown_count();
        let mut e = DMatrix::zeros(dim, dim);
        let mut f = DMatrix::zeros(dim, dim);
        let mut c_const = DVector::zeros(dim);
        let mut nonlinear = Vec::new();
        let mut row = 0;
        let mut inflow = None;

        let scatter = |e: &mut DMatrix<f64>,
                           f: &mut DMatrix<f64>,
                           c: &mut DVector<f64>,
                           row: usize,
                           map: &[usize],
                           k: &ElementContribution| {
            for i in 0..k.equation_count() {
                c[row + i] += k.c[i];
                for (jl, jg) in map.iter().enumerate() {
                    e[(row + i, *jg)] += k.e[(i, jl)];
                    f[(row + i, *jg)] += k.f[(i, jl)];
                }
            }
        };

        for v in &self.vessels {
            let map = [2 * v.from, 2 * v.from + 1, 2 * v.to, 2 * v.to + 1];
            let p = &v.params;
            let k = blood_vessel_contribution(
                p.resistance,
                p.inductance,
                p.capacitance,
                p.stenosis,
                &[0.0; 4],
                &[0.0; 4],
            );
            scatter(&mut e, &mut f, &mut c_const, row, &map, &k);
            if p.stenosis != 0.0 {
                nonlinear.push(NonlinearTerm::QuadraticDrop {
                    row,
                    q_col: map[1],
                    s: p.stenosis,
                });
                if p.capacitance != 0.0 {
                    nonlinear.push(NonlinearTerm::FlowAccel {
                        row: row + 1,
                        q_col: map[1],
                        coeff: 2.0 * p.capacitance * p.stenosis,
                    });
                }
            }
            row += 2;
        }

        for j in &self.junctions {
            let mut map = vec![2 * j.from, 2 * j.from + 1];
            for t in &j.to {
                map.extend([2 * t, 2 * t + 1]);
            }
            let zeros = vec![0.0; map.len()];
            let k = junction_contribution(&j.outlets, &zeros, &zeros);
            scatter(&mut e, &mut f, &mut c_const, row, &map, &k);
            for (i, o) in j.outlets.iter().enumerate() {
                if o.stenosis != 0.0 {
                    nonlinear.push(NonlinearTerm::QuadraticDrop {
                        row: row + 1 + i,
                        q_col: map[3 + 2 * i],
                        s: o.stenosis,
                    });
                }
            }
            row += 1 + j.to.len();
        }

        for b in &self.bcs {
            match b {
                BoundaryCondition::Flow {
                    node,
                    times,
                    values,
                } => {
                    let q_col = 2 * node + 1;
                    f[(row, q_col)] = 1.0;
                    let spline =
                        PeriodicSpline::fit(times, values, self.period).map_err(|err| {
                            Error::ModelDefinition(format!("inflow waveform: {err}"))
                        })?;
                    inflow = Some((row, q_col, spline));
                    row += 1;
                }
                BoundaryCondition::Windkessel { node, bc } => {
                    let map = [2 * node, 2 * node + 1];
                    let k = windkessel_contribution(
                        bc.proximal_resistance,
                        bc.distal_resistance,
                        bc.capacitance,
                        bc.reference_pressure,
                        &[0.0; 2],
                        &[0.0; 2],
                    );
                    scatter(&mut e, &mut f, &mut c_const, row, &map, &k);
                    row += 1;
                }
            }
        }
        debug_assert_eq!(row, dim);

        let (inflow_row, inflow_q_col, inflow) = inflow.expect("validated model has an inflow");
        Ok(GlobalSystem {
            e,
            f,
            c_const,
            nonlinear,
            inflow_row,
            inflow_q_col,
            inflow,
        })
    }
}

/// Which of a node's two unknowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    Pressure,
    Flow,
}

/// State-dependent parts of the residual beyond E ydot + F y.
#[derive(Debug, Clone)]
enum NonlinearTerm {
    /// c[row] += -s |y[q]| y[q]
    QuadraticDrop { row: usize, q_col: usize, s: f64 },
    /// c[row] += coeff |y[q]| ydot[q]
    FlowAccel { row: usize, q_col: usize, coeff: f64 },
}

/// Assembled network equations r(t, y, ydot) = E ydot + F y + c(t, y, ydot).
#[derive(Debug, Clone)]
pub struct GlobalSystem {
    e: DMatrix<f64>,
    f: DMatrix<f64>,
    c_const: DVector<f64>,
    nonlinear: Vec<NonlinearTerm>,
    inflow_row: usize,
    inflow_q_col: usize,
    inflow: PeriodicSpline,
}

impl GlobalSystem {
    pub fn dim(&self) -> usize {
        self.e.nrows()
    }

    pub fn inflow_value(&self, t: f64) -> f64 {
        self.inflow.value(t)
    }

    /// Row index of the prescribed-flow equation and the column of the flow
    /// unknown it pins.
    pub fn inflow_position(&self) -> (usize, usize) {
        (self.inflow_row, self.inflow_q_col)
    }

    pub fn residual(&self, t: f64, y: &DVector<f64>, ydot: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.residual_into(t, y, ydot, &mut out);
        out
    }

    pub fn residual_into(
        &self,
        t: f64,
        y: &DVector<f64>,
        ydot: &DVector<f64>,
        out: &mut DVector<f64>,
    ) {
        out.copy_from(&self.c_const);
        out.gemv(1.0, &self.e, ydot, 1.0);
        out.gemv(1.0, &self.f, y, 1.0);
        for term in &self.nonlinear {
            match term {
                NonlinearTerm::QuadraticDrop { row, q_col, s } => {
                    let q = y[*q_col];
                    out[*row] -= s * q.abs() * q;
                }
                NonlinearTerm::FlowAccel { row, q_col, coeff } => {
                    out[*row] += coeff * y[*q_col].abs() * ydot[*q_col];
                }
            }
        }
        out[self.inflow_row] -= self.inflow.value(t);
    }

    /// Newton iteration matrix
    /// K = am (E + dc/dydot) + afgdt (F + dc/dy), written into `out`.
    pub fn iteration_matrix_into(
        &self,
        y: &DVector<f64>,
        ydot: &DVector<f64>,
        am: f64,
        afgdt: f64,
        out: &mut DMatrix<f64>,
    ) {
        out.copy_from(&self.e);
        out.scale_mut(am);
        out.zip_apply(&self.f, |o, fv| *o += afgdt * fv);
        for term in &self.nonlinear {
            match term {
                NonlinearTerm::QuadraticDrop { row, q_col, s } => {
                    out[(*row, *q_col)] += afgdt * (-2.0 * s * y[*q_col].abs());
                }
                NonlinearTerm::FlowAccel { row, q_col, coeff } => {
                    out[(*row, *q_col)] += am * coeff * y[*q_col].abs()
                        + afgdt * coeff * sgn0(y[*q_col]) * ydot[*q_col];
                }
            }
        }
    }
}

/// Time series of the full network state, one row per sample.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub node_names: Vec<String>,
    pub times: Vec<f64>,
    /// `(i, j)` holds unknown `j` at time `i`, in the node-major (P, Q) layout.
    pub values: DMatrix<f64>,
    pub derivatives: Option<DMatrix<f64>>,
}

impl Trajectory {
    pub fn new(
        node_names: Vec<String>,
        times: Vec<f64>,
        values: DMatrix<f64>,
        derivatives: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let cols = 2 * node_names.len();
        if values.nrows() != times.len() || values.ncols() != cols {
            return Err(Error::DimensionMismatch(format!(
                "trajectory needs {} x {cols} values, got {} x {}",
                times.len(),
                values.nrows(),
                values.ncols()
            )));
        }
        if let Some(d) = &derivatives {
            if d.shape() != values.shape() {
                return Err(Error::DimensionMismatch(format!(
                    "derivative block is {:?}, values are {:?}",
                    d.shape(),
                    values.shape()
                )));
            }
        }
        Ok(Self {
            node_names,
            times,
            values,
            derivatives,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn column_index(&self, node: &str, quantity: Quantity) -> Option<usize> {
        let i = self.node_names.iter().position(|n| n == node)?;
        Some(match quantity {
            Quantity::Pressure => 2 * i,
            Quantity::Flow => 2 * i + 1,
        })
    }

    pub fn column_vec(&self, j: usize) -> Vec<f64> {
        self.values.column(j).iter().copied().collect()
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["time".to_string()];
        for n in &self.node_names {
            h.push(format!("{n}:P"));
            h.push(format!("{n}:Q"));
        }
        h
    }

    fn write_block(&self, path: &Path, block: &DMatrix<f64>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.header())?;
        for (i, t) in self.times.iter().enumerate() {
            let mut rec = Vec::with_capacity(1 + block.ncols());
            rec.push(format!("{t}"));
            for j in 0..block.ncols() {
                rec.push(format!("{}", block[(i, j)]));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.write_block(path, &self.values)
    }

    /// Writes the sibling file of state time derivatives, same layout as the
    /// value file.
    pub fn write_derivatives_csv(&self, path: &Path) -> Result<()> {
        match &self.derivatives {
            Some(d) => self.write_block(path, d),
            None => Err(Error::Observation(
                "trajectory has no derivatives to write".into(),
            )),
        }
    }

    pub fn read_csv(path: &Path, derivatives_path: Option<&Path>) -> Result<Self> {
        let (node_names, times, values) = read_block(path)?;
        let derivatives = match derivatives_path {
            None => None,
            Some(dp) => {
                let (dn, dt, dv) = read_block(dp)?;
                if dn != node_names {
                    return Err(Error::Observation(format!(
                        "derivative file {} covers different nodes than {}",
                        dp.display(),
                        path.display()
                    )));
                }
                if dt.len() != times.len() || dt.iter().zip(&times).any(|(a, b)| a != b) {
                    return Err(Error::Observation(format!(
                        "derivative file {} has mismatched sample times",
                        dp.display()
                    )));
                }
                Some(dv)
            }
        };
        Self::new(node_names, times, values, derivatives)
    }
}

fn read_block(path: &Path) -> Result<(Vec<String>, Vec<f64>, DMatrix<f64>)> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = r.headers()?.clone();
    let mut fields = headers.iter();
    if fields.next() != Some("time") {
        return Err(Error::Observation(format!(
            "{}: first column must be 'time'",
            path.display()
        )));
    }
    let mut node_names = Vec::new();
    let cols: Vec<&str> = fields.collect();
    if cols.is_empty() || cols.len() % 2 != 0 {
        return Err(Error::Observation(format!(
            "{}: expected paired <node>:P,<node>:Q columns",
            path.display()
        )));
    }
    for pair in cols.chunks(2) {
        let p = pair[0].strip_suffix(":P");
        let q = pair[1].strip_suffix(":Q");
        match (p, q) {
            (Some(pn), Some(qn)) if pn == qn => node_names.push(pn.to_string()),
            _ => {
                return Err(Error::Observation(format!(
                    "{}: malformed column pair {:?}, {:?}",
                    path.display(),
                    pair[0],
                    pair[1]
                )))
            }
        }
    }

    let ncols = 2 * node_names.len();
    let mut times = Vec::new();
    let mut flat = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != ncols + 1 {
            return Err(Error::Observation(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                times.len() + 2,
                rec.len(),
                ncols + 1
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| {
                Error::Observation(format!("{}: bad number {s:?}", path.display()))
            })
        };
        times.push(parse(&rec[0])?);
        for j in 0..ncols {
            flat.push(parse(&rec[j + 1])?);
        }
    }
    if times.is_empty() {
        return Err(Error::Observation(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    let values = DMatrix::from_row_iterator(times.len(), ncols, flat);
    Ok((node_names, times, values))
}
