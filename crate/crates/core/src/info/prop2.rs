use serde::Serialize;

use super::{conditional_mi, h_bits, mutual_information, Channel, Joint2, Joint3};
use crate::error::{Error, Result};

/// A finite world of normal patterns `X_n` and abnormal images `X_a`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LesionWorld {
    /// `P(X_n, X_a)`.
    pub joint: Joint2,
    /// The `X_a` symbol that shows normal pattern `n` without any lesion.
    pub normal_symbol: Vec<usize>,
}

impl LesionWorld {
    /// `X_n` uniform over `m_n` patterns and an independent lesion bit with
    /// `P(lesion) = p`; `X_a = 2·X_n + bit`.
    pub fn with_lesion_bit(m_n: usize, p: f64) -> Result<Self> {
        if m_n == 0 || !(0.0..=1.0).contains(&p) {
            return Err(Error::Contract(format!("bad lesion world m_n={m_n} p={p}")));
        }
        let mut joint = vec![0.0; m_n * 2 * m_n];
        for n in 0..m_n {
            joint[n * 2 * m_n + 2 * n] = (1.0 - p) / m_n as f64;
            joint[n * 2 * m_n + 2 * n + 1] = p / m_n as f64;
        }
        Ok(LesionWorld {
            joint: Joint2::new(m_n, 2 * m_n, joint)?,
            normal_symbol: (0..m_n).map(|n| 2 * n).collect(),
        })
    }

    pub fn m_n(&self) -> usize {
        self.joint.nx
    }

    pub fn m_a(&self) -> usize {
        self.joint.ny
    }

    /// Encoder that keeps the whole abnormal symbol.
    pub fn copy_encoder(&self) -> Result<Channel> {
        Channel::deterministic(&(0..self.m_a()).collect::<Vec<_>>(), self.m_a())
    }

    /// Encoder that keeps only the normal pattern, for the lesion-bit world.
    pub fn lesion_discarding_encoder(&self) -> Result<Channel> {
        Channel::deterministic(&(0..self.m_a()).map(|a| a / 2).collect::<Vec<_>>(), self.m_n())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prop2Report {
    pub h_xn: f64,
    pub h_xa: f64,
    pub h_z: f64,
    pub i_xn_z: f64,
    pub i_xa_z: f64,
    pub i_z_xa_given_xn: f64,
    /// `I(X_n;Z) = H(X_n)`.
    pub normal_preserved: bool,
    /// `I(X_a;Z) = H(X_n)`.
    pub abnormal_bounded: bool,
    /// `I(X_a;Z) − H(X_n)`: positive when Z carries lesion information.
    pub excess_bits: f64,
}

const PROP2_TOL: f64 = 1e-9;

/// Exact evaluation of both optimality conditions for one encoder.
pub fn verify_prop2_discrete(world: &LesionWorld, encoder: &Channel) -> Result<Prop2Report> {
    if encoder.inputs() != world.m_a() {
        return Err(Error::dim("prop2 encoder", &[encoder.inputs()], &[world.m_a()]));
    }
    if world.normal_symbol.len() != world.m_n() || world.normal_symbol.iter().any(|&a| a >= world.m_a()) {
        return Err(Error::Contract("normal_symbol must map every pattern to an abnormal-space symbol".into()));
    }
    let pn = world.joint.marginal_x();
    let pa = world.joint.marginal_y();
    let h_xn = h_bits(pn.iter().copied());
    let shared = mutual_information(&world.joint);
    if (shared - h_xn).abs() > PROP2_TOL {
        return Err(Error::Contract(format!(
            "world violates I(X_n;X_a) = H(X_n): {shared} vs {h_xn} bits"
        )));
    }
    let normal_enc = Channel {
        rows: world.normal_symbol.iter().map(|&a| encoder.rows[a].clone()).collect(),
    };
    let i_xn_z = mutual_information(&normal_enc.joint(&pn)?);
    let za = encoder.joint(&pa)?;
    let i_xa_z = mutual_information(&za);
    let h_z = h_bits(za.marginal_y());
    let nz = encoder.outputs();
    let mut triple = Vec::with_capacity(world.m_n() * world.m_a() * nz);
    for n in 0..world.m_n() {
        for a in 0..world.m_a() {
            let pna = world.joint.p[n * world.m_a() + a];
            triple.extend(encoder.rows[a].iter().map(|e| pna * e));
        }
    }
    // axes (X_n, X_a, Z) reordered to (Z, X_a, X_n)
    let t = Joint3 {
        nx: world.m_n(),
        ny: world.m_a(),
        nz,
        p: triple,
    }
    .permute([2, 1, 0]);
    Ok(Prop2Report {
        h_xn,
        h_xa: h_bits(pa.iter().copied()),
        h_z,
        i_xn_z,
        i_xa_z,
        i_z_xa_given_xn: conditional_mi(&t),
        normal_preserved: (i_xn_z - h_xn).abs() <= PROP2_TOL,
        abnormal_bounded: (i_xa_z - h_xn).abs() <= PROP2_TOL,
        excess_bits: i_xa_z - h_xn,
    })
}
