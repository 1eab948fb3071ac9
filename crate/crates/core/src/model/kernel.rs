//! Per-player transition kernel `T_t(y | x, u, d)`.
//!
//! The population enters only through the state distribution `d`. Three
//! forms are supported: a plain table (no coupling), a table with an affine
//! dependence on `d`, and a named callable plug-in. Tabular forms are the
//! canonical serializable representation; they index stages explicitly when
//! the kernel is time-varying and hold a single slice otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::registry::{lookup_kernel, KernelFn};
use crate::model::Stage;

/// `probs[x][u][y]`.
pub type Tensor3 = Vec<Vec<Vec<f64>>>;
/// `slope[x][u][y][z]`, coefficient of `d(z)`.
pub type Tensor4 = Vec<Vec<Vec<Vec<f64>>>>;

/// Functional form of a transition kernel.
#[derive(Clone)]
pub enum KernelForm {
    /// `P(y|x,u)` independent of `d`: decoupled dynamics.
    Tabular { probs: Vec<Tensor3> },
    /// `P(y|x,u,d) = base[x][u][y] + sum_z slope[x][u][y][z] * d(z)`.
    ///
    /// Row normalization for every `d` requires each slope slice to sum to
    /// zero over `y`; this is checked by validation, not construction.
    AffineInD { base: Vec<Tensor3>, slope: Vec<Tensor4> },
    /// Registered plug-in, referenced by name in model files.
    Callable { name: String, f: KernelFn },
}

impl std::fmt::Debug for KernelForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelForm::Tabular { probs } => f.debug_struct("Tabular").field("stages", &probs.len()).finish(),
            KernelForm::AffineInD { base, .. } => {
                f.debug_struct("AffineInD").field("stages", &base.len()).finish()
            }
            KernelForm::Callable { name, .. } => f.debug_struct("Callable").field("name", name).finish(),
        }
    }
}

impl PartialEq for KernelForm {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (KernelForm::Tabular { probs: a }, KernelForm::Tabular { probs: b }) => a == b,
            (
                KernelForm::AffineInD { base: a, slope: sa },
                KernelForm::AffineInD { base: b, slope: sb },
            ) => a == b && sa == sb,
            (KernelForm::Callable { name: a, .. }, KernelForm::Callable { name: b, .. }) => a == b,
            _ => false,
        }
    }
}

/// Transition kernel with an explicit time-homogeneity flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelRepr", into = "KernelRepr")]
pub struct TransitionKernel {
    pub form: KernelForm,
    pub time_homogeneous: bool,
}

impl TransitionKernel {
    /// Time-homogeneous table `probs[x][u][y]`.
    pub fn tabular(probs: Tensor3) -> Self {
        Self {
            form: KernelForm::Tabular { probs: vec![probs] },
            time_homogeneous: true,
        }
    }

    /// Time-varying table `probs[t][x][u][y]`.
    pub fn tabular_staged(probs: Vec<Tensor3>) -> Self {
        Self {
            form: KernelForm::Tabular { probs },
            time_homogeneous: false,
        }
    }

    /// Time-homogeneous affine coupling in `d`.
    pub fn affine(base: Tensor3, slope: Tensor4) -> Self {
        Self {
            form: KernelForm::AffineInD {
                base: vec![base],
                slope: vec![slope],
            },
            time_homogeneous: true,
        }
    }

    /// Time-homogeneous named plug-in.
    pub fn callable(name: &str, f: KernelFn) -> Self {
        Self {
            form: KernelForm::Callable {
                name: name.to_string(),
                f,
            },
            time_homogeneous: true,
        }
    }

    fn stage_index(&self, t: Stage) -> usize {
        if self.time_homogeneous {
            0
        } else {
            t - 1
        }
    }

    /// Number of tabulated stage slices, if the form is tabulated.
    pub fn tabulated_stages(&self) -> Option<usize> {
        match &self.form {
            KernelForm::Tabular { probs } => Some(probs.len()),
            KernelForm::AffineInD { base, .. } => Some(base.len()),
            KernelForm::Callable { .. } => None,
        }
    }

    /// Structurally independent of `d` (decoupled dynamics).
    pub fn is_decoupled(&self) -> bool {
        match &self.form {
            KernelForm::Tabular { .. } => true,
            KernelForm::AffineInD { slope, .. } => slope
                .iter()
                .flatten()
                .flatten()
                .flatten()
                .flatten()
                .all(|&c| c == 0.0),
            KernelForm::Callable { .. } => false,
        }
    }

    /// `P(y | x, u, d)` at stage `t` (1-based).
    pub fn eval(&self, t: Stage, y: usize, x: usize, u: usize, d: &[f64]) -> f64 {
        match &self.form {
            KernelForm::Tabular { probs } => probs[self.stage_index(t)][x][u][y],
            KernelForm::AffineInD { base, slope } => {
                let ts = self.stage_index(t);
                let mut p = base[ts][x][u][y];
                for (z, &dz) in d.iter().enumerate() {
                    p += slope[ts][x][u][y][z] * dz;
                }
                p
            }
            KernelForm::Callable { f, .. } => f(t, y, x, u, d),
        }
    }

    /// Full row `P(. | x, u, d)`.
    pub fn row(&self, t: Stage, x: usize, u: usize, d: &[f64]) -> Vec<f64> {
        (0..d.len()).map(|y| self.eval(t, y, x, u, d)).collect()
    }

    /// Row under a mixed action: `sum_u own_row(u) * P(. | x, u, d)`.
    pub fn mixed_row(&self, t: Stage, x: usize, own_row: &[f64], d: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; d.len()];
        for (u, &w) in own_row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (y, o) in out.iter_mut().enumerate() {
                *o += w * self.eval(t, y, x, u, d);
            }
        }
        out
    }
}

/// Wire representation: `probs` is `[t][x][u][y]`, with an optional
/// `d_dependence` tag carrying the affine slope.
#[derive(Serialize, Deserialize, Clone)]
struct KernelRepr {
    #[serde(skip_serializing_if = "Option::is_none")]
    probs: Option<Vec<Tensor3>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    d_dependence: Option<DDependence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    callable: Option<String>,
    time_homogeneous: bool,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(rename_all = "snake_case")]
enum DDependence {
    Affine { slope: Vec<Tensor4> },
}

impl From<TransitionKernel> for KernelRepr {
    fn from(k: TransitionKernel) -> Self {
        match k.form {
            KernelForm::Tabular { probs } => KernelRepr {
                probs: Some(probs),
                d_dependence: None,
                callable: None,
                time_homogeneous: k.time_homogeneous,
            },
            KernelForm::AffineInD { base, slope } => KernelRepr {
                probs: Some(base),
                d_dependence: Some(DDependence::Affine { slope }),
                callable: None,
                time_homogeneous: k.time_homogeneous,
            },
            KernelForm::Callable { name, .. } => KernelRepr {
                probs: None,
                d_dependence: None,
                callable: Some(name),
                time_homogeneous: k.time_homogeneous,
            },
        }
    }
}

impl TryFrom<KernelRepr> for TransitionKernel {
    type Error = Error;

    fn try_from(r: KernelRepr) -> Result<Self> {
        let form = match (r.probs, r.callable) {
            (Some(base), None) => match r.d_dependence {
                None => KernelForm::Tabular { probs: base },
                Some(DDependence::Affine { slope }) => KernelForm::AffineInD { base, slope },
            },
            (None, Some(name)) => {
                let f = lookup_kernel(&name).ok_or(Error::UnknownCallable { name: name.clone() })?;
                KernelForm::Callable { name, f }
            }
            _ => {
                return Err(Error::ModelFormat {
                    path: "kernel".to_string(),
                    message: "exactly one of `probs` or `callable` must be present".to_string(),
                })
            }
        };
        Ok(TransitionKernel {
            form,
            time_homogeneous: r.time_homogeneous,
        })
    }
}
