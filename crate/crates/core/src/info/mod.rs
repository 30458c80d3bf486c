//! Exact information measures on finite alphabets and a k-nearest-neighbour
//! differential entropy estimator.
//!
//! Discrete quantities are in bits, differential entropy in nats.

mod knn;
mod prop2;

pub use knn::{digamma_int, knn_entropy, latent_entropy_report, latent_entropy_report_from_codes, ln_unit_ball_volume, LatentEntropy, KNN_K};
pub use prop2::{verify_prop2_discrete, LesionWorld, Prop2Report};

use serde::Serialize;

use crate::error::{Error, Result};

/// Tolerance on the total mass of a distribution.
pub const MASS_TOL: f64 = 1e-12;

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Contract(format!("{what}: empty alphabet")));
    }
    if let Some(v) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Contract(format!("{what}: invalid probability {v}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > MASS_TOL {
        return Err(Error::Contract(format!("{what}: mass {total} differs from 1")));
    }
    Ok(())
}

fn h_bits(p: impl IntoIterator<Item = f64>) -> f64 {
    -p.into_iter().filter(|&v| v > 0.0).map(|v| v * v.log2()).sum::<f64>()
}

/// Shannon entropy in bits, with `0 · log 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p, "entropy")?;
    Ok(h_bits(p.iter().copied()))
}

/// Row-major joint table `P(X = i, Y = j)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Joint2 {
    pub nx: usize,
    pub ny: usize,
    pub p: Vec<f64>,
}

impl Joint2 {
    pub fn new(nx: usize, ny: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != nx * ny {
            return Err(Error::dim("Joint2", &[nx, ny], &[p.len()]));
        }
        check_distribution(&p, "joint")?;
        Ok(Joint2 { nx, ny, p })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let ny = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ny) {
            return Err(Error::Contract("ragged joint table".into()));
        }
        Joint2::new(rows.len(), ny, rows.concat())
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        self.p.chunks(self.ny).map(|r| r.iter().sum()).collect()
    }

    pub fn marginal_y(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.ny];
        for row in self.p.chunks(self.ny) {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b;
            }
        }
        m
    }
}

/// `I(X;Y) = H(X) + H(Y) − H(X,Y)` in bits.
pub fn mutual_information(joint: &Joint2) -> f64 {
    let v = h_bits(joint.marginal_x()) + h_bits(joint.marginal_y()) - h_bits(joint.p.iter().copied());
    v.max(0.0)
}

/// Joint table `P(X = i, Y = j, Z = k)` stored at `(i·ny + j)·nz + k`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Joint3 {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub p: Vec<f64>,
}

impl Joint3 {
    pub fn new(nx: usize, ny: usize, nz: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != nx * ny * nz {
            return Err(Error::dim("Joint3", &[nx, ny, nz], &[p.len()]));
        }
        check_distribution(&p, "joint")?;
        Ok(Joint3 { nx, ny, nz, p })
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.p[(x * self.ny + y) * self.nz + z]
    }

    /// Marginal over the axes flagged in `keep` (x, y, z), flattened in axis order.
    fn marginal(&self, keep: [bool; 3]) -> Vec<f64> {
        let dims = [self.nx, self.ny, self.nz];
        let size: usize = (0..3).filter(|&a| keep[a]).map(|a| dims[a]).product();
        let mut out = vec![0.0; size];
        for x in 0..self.nx {
            for y in 0..self.ny {
                for z in 0..self.nz {
                    let mut idx = 0;
                    for (a, v) in [x, y, z].into_iter().enumerate() {
                        if keep[a] {
                            idx = idx * dims[a] + v;
                        }
                    }
                    out[idx] += self.at(x, y, z);
                }
            }
        }
        out
    }

    /// Swap the roles of the named axes; `order` lists the old axis for each new slot.
    pub fn permute(&self, order: [usize; 3]) -> Joint3 {
        let dims = [self.nx, self.ny, self.nz];
        let nd = [dims[order[0]], dims[order[1]], dims[order[2]]];
        let mut p = vec![0.0; self.p.len()];
        for x in 0..self.nx {
            for y in 0..self.ny {
                for z in 0..self.nz {
                    let old = [x, y, z];
                    let (a, b, c) = (old[order[0]], old[order[1]], old[order[2]]);
                    p[(a * nd[1] + b) * nd[2] + c] = self.at(x, y, z);
                }
            }
        }
        Joint3 {
            nx: nd[0],
            ny: nd[1],
            nz: nd[2],
            p,
        }
    }

    /// Joint of (X, Y) with Z summed out.
    pub fn xy(&self) -> Joint2 {
        Joint2 {
            nx: self.nx,
            ny: self.ny,
            p: self.marginal([true, true, false]),
        }
    }
}

/// `I(X;Y|Z) = H(X|Z) − H(X|Y,Z)` in bits.
pub fn conditional_mi(joint: &Joint3) -> f64 {
    let h = |keep| h_bits(joint.marginal(keep));
    let h_x_given_z = h([true, false, true]) - h([false, false, true]);
    let h_x_given_yz = h_bits(joint.p.iter().copied()) - h([false, true, true]);
    (h_x_given_z - h_x_given_yz).max(0.0)
}

/// Conditional probability matrix `P(out | in)`, one row per input symbol.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Channel {
    pub rows: Vec<Vec<f64>>,
}

impl Channel {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != width {
                return Err(Error::Contract(format!("channel row {i} has {} outputs, expected {width}", r.len())));
            }
            check_distribution(r, "channel row")?;
        }
        if rows.is_empty() {
            return Err(Error::Contract("channel with no inputs".into()));
        }
        Ok(Channel { rows })
    }

    /// Deterministic channel sending input `i` to `map[i]`.
    pub fn deterministic(map: &[usize], outputs: usize) -> Result<Self> {
        Channel::new(
            map.iter()
                .map(|&o| (0..outputs).map(|j| f64::from(u8::from(j == o))).collect())
                .collect(),
        )
    }

    pub fn inputs(&self) -> usize {
        self.rows.len()
    }

    pub fn outputs(&self) -> usize {
        self.rows[0].len()
    }

    pub fn then(&self, next: &Channel) -> Result<Channel> {
        if self.outputs() != next.inputs() {
            return Err(Error::dim("channel composition", &[self.outputs()], &[next.inputs()]));
        }
        let rows = self
            .rows
            .iter()
            .map(|r| {
                (0..next.outputs())
                    .map(|k| r.iter().zip(&next.rows).map(|(a, row)| a * row[k]).sum())
                    .collect()
            })
            .collect();
        Ok(Channel { rows })
    }

    /// Joint of input and output when the input follows `px`.
    pub fn joint(&self, px: &[f64]) -> Result<Joint2> {
        check_distribution(px, "input")?;
        if px.len() != self.inputs() {
            return Err(Error::dim("channel input", &[px.len()], &[self.inputs()]));
        }
        let p = px
            .iter()
            .zip(&self.rows)
            .flat_map(|(a, r)| r.iter().map(move |b| a * b))
            .collect();
        Ok(Joint2 {
            nx: px.len(),
            ny: self.outputs(),
            p,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarkovChain {
    pub px: Vec<f64>,
    pub encoder: Channel,
    pub decoder: Channel,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DpiReport {
    pub i_xz: f64,
    pub i_xxhat: f64,
    pub holds: bool,
}

/// Exact `I(X;Z)` and `I(X;X̂)` for `X → Z → X̂`.
pub fn verify_dpi(chain: &MarkovChain) -> Result<DpiReport> {
    let i_xz = mutual_information(&chain.encoder.joint(&chain.px)?);
    let i_xxhat = mutual_information(&chain.encoder.then(&chain.decoder)?.joint(&chain.px)?);
    Ok(DpiReport {
        i_xz,
        i_xxhat,
        holds: i_xz >= i_xxhat - 1e-12,
    })
}
