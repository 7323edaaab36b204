//! Synthetic scenarios with known causal graphs: random DAGs, structural
//! field simulation, aggregated incidence, an exact d-separation oracle, and
//! graph-recovery metrics.

mod dag;
mod fields;
mod scenario;

pub use dag::{random_dag, shd, Dag, DsepOracle};
pub use fields::{
    correlated_noise, simulate_fields, simulate_incidence, IncidenceData, Link, NodeSpec,
    NoiseParams, ResponseParent,
};
pub use scenario::{
    feature_name, generate_scenario, GroundTruth, Scenario, ScenarioConfig, ScenarioError,
    Variable,
};
