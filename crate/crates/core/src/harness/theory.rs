//! Exact checks of the bottleneck and information claims, run as commands.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mkdir, write_csv, write_json, RunConfig};
use crate::error::{Error, Result};
use crate::info::{verify_dpi, verify_prop2_discrete, Channel, LesionWorld, MarkovChain, Prop2Report};
use crate::prop1::{verification_grid, GridRow};

pub const PROP1_GRID: &str = "prop1_grid.csv";

/// Writes `prop1_grid.csv` over `D ∈ cfg.prop1.dims`, `d ∈ 1..=D+extra`.
pub fn cmd_prop1(cfg: &RunConfig, out: &Path) -> Result<Vec<GridRow>> {
    if cfg.prop1.dims.is_empty() || cfg.prop1.dims.contains(&0) {
        return Err(Error::Config(format!("prop1 dims {:?} must be positive", cfg.prop1.dims)));
    }
    let extra = cfg.prop1.extra;
    let rows = verification_grid(&cfg.prop1.dims, |big_d| big_d + extra, cfg.seed)?;
    mkdir(out)?;
    write_csv(&out.join(PROP1_GRID), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpiRow {
    pub chain: usize,
    pub nx: usize,
    pub nz: usize,
    pub nxhat: usize,
    pub i_xz: f64,
    pub i_xxhat: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prop2Case {
    pub name: String,
    pub m_n: usize,
    pub lesion_prob: f64,
    pub report: Prop2Report,
    /// Whether the case is built to break `I(X_a;Z) = H(X_n)`.
    pub expect_violation: bool,
    pub as_expected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiReport {
    pub seed: u64,
    pub n_chains: usize,
    pub dpi_failures: Vec<usize>,
    pub prop2: Vec<Prop2Case>,
    pub passed: bool,
}

/// Random distribution over `m` symbols with mass exactly 1.
fn random_dist(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 1e-3).collect();
    let s: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|v| v / s).collect();
    let rest: f64 = p[1..].iter().sum();
    p[0] = 1.0 - rest;
    p
}

fn random_chain(rng: &mut ChaCha8Rng) -> Result<MarkovChain> {
    let (a, b, c) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
    let px = random_dist(rng, a);
    let encoder = Channel::new((0..a).map(|_| random_dist(rng, b)).collect())?;
    let decoder = Channel::new((0..b).map(|_| random_dist(rng, c)).collect())?;
    Ok(MarkovChain { px, encoder, decoder })
}

fn prop2_cases() -> Result<Vec<Prop2Case>> {
    let mut cases = Vec::new();
    for (m_n, p) in [(4, 0.5), (3, 0.1)] {
        let world = LesionWorld::with_lesion_bit(m_n, p)?;
        for (name, enc, expect_violation) in [
            ("copy", world.copy_encoder()?, true),
            ("lesion_discarding", world.lesion_discarding_encoder()?, false),
        ] {
            let report = verify_prop2_discrete(&world, &enc)?;
            let as_expected = report.normal_preserved && (report.abnormal_bounded != expect_violation);
            cases.push(Prop2Case {
                name: format!("{name}_m{m_n}_p{p}"),
                m_n,
                lesion_prob: p,
                report,
                expect_violation,
                as_expected,
            });
        }
    }
    Ok(cases)
}

/// Checks the processing inequality on `n_chains` random chains and both
/// optimality conditions on the lesion-bit worlds. Writes `mi_chains.csv` and
/// `mi_report.json`, then fails if any check did.
pub fn cmd_mi_oracle(seed: u64, n_chains: usize, out: &Path) -> Result<MiReport> {
    if n_chains == 0 {
        return Err(Error::Config("mi_chains must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n_chains);
    for i in 0..n_chains {
        let chain = random_chain(&mut rng)?;
        let r = verify_dpi(&chain)?;
        rows.push(DpiRow {
            chain: i,
            nx: chain.px.len(),
            nz: chain.encoder.outputs(),
            nxhat: chain.decoder.outputs(),
            i_xz: r.i_xz,
            i_xxhat: r.i_xxhat,
            holds: r.holds,
        });
    }
    let prop2 = prop2_cases()?;
    let dpi_failures: Vec<usize> = rows.iter().filter(|r| !r.holds).map(|r| r.chain).collect();
    let report = MiReport {
        seed,
        n_chains,
        passed: dpi_failures.is_empty() && prop2.iter().all(|c| c.as_expected),
        dpi_failures,
        prop2,
    };
    mkdir(out)?;
    write_csv(&out.join("mi_chains.csv"), &rows)?;
    write_json(&out.join("mi_report.json"), &report)?;
    if !report.passed {
        let mut failing: Vec<String> = report.dpi_failures.iter().map(|c| format!("chain {c}")).collect();
        failing.extend(report.prop2.iter().filter(|c| !c.as_expected).map(|c| c.name.clone()));
        return Err(Error::TheoryCheck(format!("failing instances: {}", failing.join(", "))));
    }
    Ok(report)
}
