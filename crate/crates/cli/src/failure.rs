//! Command failures and their exit codes.

use std::fmt;

use zrp_core::ensembles::EnsembleError;
use zrp_core::lattice::LatticeError;
use zrp_core::pde::PdeError;
use zrp_core::rates::RateError;
use zrp_core::simulate::SimError;
use zrp_core::thermo::ThermoError;
use zrp_core::verify::VerifyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Criticality, a frozen lattice, lost mass, I/O trouble.
    Numerical,
    /// Bad flags, bad config, missing files.
    Usage,
}

impl Kind {
    pub fn exit_code(self) -> u8 {
        match self {
            Kind::Numerical => 1,
            Kind::Usage => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Usage,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Numerical,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn lattice_kind(_: &LatticeError) -> Kind {
    Kind::Usage
}

fn rate_kind(_: &RateError) -> Kind {
    Kind::Usage
}

fn thermo_kind(e: &ThermoError) -> Kind {
    match e {
        ThermoError::Rate(r) => rate_kind(r),
        ThermoError::InvalidInput(_) => Kind::Usage,
        _ => Kind::Numerical,
    }
}

fn ensemble_kind(e: &EnsembleError) -> Kind {
    match e {
        EnsembleError::Thermo(t) => thermo_kind(t),
        EnsembleError::Rate(r) => rate_kind(r),
        _ => Kind::Usage,
    }
}

fn sim_kind(e: &SimError) -> Kind {
    match e {
        SimError::InvalidInput(_) | SimError::Format(_) | SimError::Lattice(_) => Kind::Usage,
        SimError::Rate(r) => rate_kind(r),
        _ => Kind::Numerical,
    }
}

fn pde_kind(e: &PdeError) -> Kind {
    match e {
        PdeError::InvalidInput(_) => Kind::Usage,
        PdeError::Thermo(t) => thermo_kind(t),
        _ => Kind::Numerical,
    }
}

fn verify_kind(e: &VerifyError) -> Kind {
    match e {
        VerifyError::Rate(r) => rate_kind(r),
        VerifyError::Thermo(t) => thermo_kind(t),
        VerifyError::Ensemble(x) => ensemble_kind(x),
        VerifyError::Sim(x) => sim_kind(x),
        VerifyError::Pde(x) => pde_kind(x),
        VerifyError::Io(_) | VerifyError::Csv(_) | VerifyError::Json(_) => Kind::Numerical,
        _ => Kind::Usage,
    }
}

macro_rules! classify {
    ($($ty:ty => $f:ident),* $(,)?) => {
        $(impl From<$ty> for Failure {
            fn from(e: $ty) -> Self {
                Self { kind: $f(&e), message: e.to_string() }
            }
        })*
    };
}

classify! {
    LatticeError => lattice_kind,
    RateError => rate_kind,
    ThermoError => thermo_kind,
    EnsembleError => ensemble_kind,
    SimError => sim_kind,
    PdeError => pde_kind,
    VerifyError => verify_kind,
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::numerical(format!("io: {e}"))
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Self::numerical(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::numerical(format!("json: {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    #[test]
    fn exit_codes_follow_the_error_class() {
        let missing: Failure = RateError::TableNotFound(PathBuf::from("nope.csv")).into();
        assert_eq!(missing.kind.exit_code(), 2);
        assert!(missing.message.contains("rate table not found"));
        let critical: Failure = PdeError::Criticality {
            t: 0.1,
            site: 3,
            value: [0.4, 0.2],
        }
        .into();
        assert_eq!(critical.kind.exit_code(), 1);
        let frozen: Failure = VerifyError::Sim(SimError::Frozen { intensity: 0.0 }).into();
        assert_eq!(frozen.kind, Kind::Numerical);
        let nested: Failure = PdeError::Thermo(ThermoError::Rate(RateError::InvalidParameter("b".into()))).into();
        assert_eq!(nested.kind, Kind::Usage);
    }
}
