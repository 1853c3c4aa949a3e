use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcnet::SurrogateMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AcquisitionKind {
    #[serde(rename = "EI")]
    Ei,
    #[serde(rename = "KG")]
    Kg,
    #[serde(rename = "KG-CF")]
    KgCf,
    #[serde(rename = "KG-FN")]
    KgFn,
    #[serde(rename = "DG-CF")]
    DgCf,
}

impl AcquisitionKind {
    pub const ALL: [AcquisitionKind; 5] = [Self::Ei, Self::Kg, Self::KgCf, Self::KgFn, Self::DgCf];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ei => "EI",
            Self::Kg => "KG",
            Self::KgCf => "KG-CF",
            Self::KgFn => "KG-FN",
            Self::DgCf => "DG-CF",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s) || k.name().replace('-', "_").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown acquisition {s:?}")))
    }

    /// Surrogate structure for graybox kinds; `None` for blackbox kinds.
    pub fn surrogate_mode(self) -> Option<SurrogateMode> {
        match self {
            Self::Ei | Self::Kg => None,
            Self::KgCf | Self::DgCf => Some(SurrogateMode::CompositeOnly),
            Self::KgFn => Some(SurrogateMode::FullNetwork),
        }
    }

    pub fn is_graybox(self) -> bool {
        self.surrogate_mode().is_some()
    }
}

impl std::fmt::Display for AcquisitionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionSpec {
    pub kind: AcquisitionKind,
    /// Outer fantasy samples.
    pub k: usize,
    /// Inner expectation samples.
    pub l: usize,
    /// Local ascents launched from the best raw candidates.
    pub restarts: usize,
    /// Low-discrepancy candidates scored before the local ascents.
    pub raw_samples: usize,
    pub outer_max_iters: usize,
    /// Low-discrepancy starts of each inner maximization (the incumbent and,
    /// for fantasies, the candidate itself are added).
    pub inner_restarts: usize,
    pub inner_max_iters: usize,
    /// Decoupling subsets for DG-CF; empty means singletons plus all-ones.
    pub z_subsets: Vec<Vec<bool>>,
    /// Enumerate every non-empty subset instead of the default set.
    pub full_z_enumeration: bool,
    pub seed: u64,
}

impl Default for AcquisitionSpec {
    fn default() -> Self {
        Self {
            kind: AcquisitionKind::KgCf,
            k: 8,
            l: 128,
            restarts: 2,
            raw_samples: 32,
            outer_max_iters: 20,
            inner_restarts: 4,
            inner_max_iters: 50,
            z_subsets: Vec::new(),
            full_z_enumeration: false,
            seed: 0,
        }
    }
}

impl AcquisitionSpec {
    pub fn with_kind(kind: AcquisitionKind) -> Self {
        Self { kind, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::Config { field: field.into(), reason: reason.into() });
        if self.k == 0 {
            return bad("k", "must be at least 1");
        }
        if self.l == 0 {
            return bad("l", "must be at least 1");
        }
        if self.restarts == 0 {
            return bad("restarts", "must be at least 1");
        }
        if self.z_subsets.iter().any(|z| !z.iter().any(|v| *v)) {
            return bad("z_subsets", "every subset must select a compartment");
        }
        Ok(())
    }

    /// The decoupling subsets for `m` compartments.
    pub fn subsets(&self, m: usize) -> Vec<Vec<bool>> {
        if self.kind != AcquisitionKind::DgCf {
            return vec![vec![true; m]];
        }
        if !self.z_subsets.is_empty() {
            return self.z_subsets.clone();
        }
        if self.full_z_enumeration {
            all_z_subsets(m)
        } else {
            default_z_subsets(m)
        }
    }
}

/// Singletons `e_1 .. e_m` followed by the all-ones vector.
pub fn default_z_subsets(m: usize) -> Vec<Vec<bool>> {
    let mut out: Vec<Vec<bool>> = (0..m).map(|i| (0..m).map(|j| i == j).collect()).collect();
    out.push(vec![true; m]);
    out
}

/// Every non-empty subset, in increasing bitmask order.
pub fn all_z_subsets(m: usize) -> Vec<Vec<bool>> {
    (1u32..(1 << m)).map(|mask| (0..m).map(|j| mask & (1 << j) != 0).collect()).collect()
}
