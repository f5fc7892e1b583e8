//! Cost functions `c(ω, t)` that depend on the stopped path only through
//! the driver value, its running maximum and the time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{LatticeSpec, PathState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// `f(W_t)`
    Terminal,
    /// `f(max_{s≤t} W_s)`
    RunningMax,
    /// `f(t)`
    Time,
    /// `f(W_t) + p(t)` with `p` a polynomial.
    Markov,
}

/// Built-in one-dimensional functions.
#[derive(Clone, Debug, PartialEq)]
pub enum ScalarFn {
    Identity,
    Square,
    Abs,
    /// `(x − strike)⁺`
    PositivePart { strike: f64 },
    /// `1{x ≥ threshold}`
    IndicatorGe { threshold: f64 },
    /// `Σ cᵢ xⁱ`
    Polynomial(Vec<f64>),
}

impl ScalarFn {
    pub fn from_name(name: &str, params: &[f64]) -> Result<Self> {
        let arity = |n: usize| {
            if params.len() == n {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "function {name:?} takes {n} parameter(s), got {}",
                    params.len()
                )))
            }
        };
        let f = match name {
            "identity" => arity(0).map(|_| Self::Identity)?,
            "square" => arity(0).map(|_| Self::Square)?,
            "abs" => arity(0).map(|_| Self::Abs)?,
            "positive_part" => {
                if params.len() > 1 {
                    arity(1)?;
                }
                Self::PositivePart { strike: params.first().copied().unwrap_or(0.0) }
            }
            "indicator_ge" => arity(1).map(|_| Self::IndicatorGe { threshold: params[0] })?,
            "polynomial" => {
                if params.is_empty() {
                    return Err(Error::Config("polynomial needs coefficients".into()));
                }
                Self::Polynomial(params.to_vec())
            }
            other => return Err(Error::Config(format!("unknown function {other:?}"))),
        };
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Config(format!("non-finite parameter for {name:?}")));
        }
        Ok(f)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Square => "square",
            Self::Abs => "abs",
            Self::PositivePart { .. } => "positive_part",
            Self::IndicatorGe { .. } => "indicator_ge",
            Self::Polynomial(_) => "polynomial",
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Self::PositivePart { strike } => vec![*strike],
            Self::IndicatorGe { threshold } => vec![*threshold],
            Self::Polynomial(c) => c.clone(),
            _ => Vec::new(),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Self::Identity => x,
            Self::Square => x * x,
            Self::Abs => x.abs(),
            Self::PositivePart { strike } => (x - strike).max(0.0),
            Self::IndicatorGe { threshold } => {
                if x >= *threshold {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Polynomial(c) => horner(c, x),
        }
    }
}

fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Source of the constant in the stability modulus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HolderConstant {
    Given(f64),
    /// Derive the smallest constant valid over the lattice's reachable range.
    Lattice,
}

impl Serialize for HolderConstant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Given(c) => s.serialize_f64(*c),
            Self::Lattice => s.serialize_str("lattice"),
        }
    }
}

impl<'de> Deserialize<'de> for HolderConstant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(c) if c >= 0.0 && c.is_finite() => Ok(Self::Given(c)),
            Raw::Num(c) => Err(serde::de::Error::custom(format!(
                "holder2_constant must be nonnegative, got {c}"
            ))),
            Raw::Str(s) if s == "lattice" => Ok(Self::Lattice),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "holder2_constant must be a number or \"lattice\", got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CostJson {
    kind: CostKind,
    name: String,
    #[serde(default)]
    params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    time_params: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    holder2_constant: Option<HolderConstant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CostJson", into = "CostJson")]
pub struct CostSpec {
    pub kind: CostKind,
    pub func: ScalarFn,
    /// Polynomial in `t` added for the markov kind.
    pub time_poly: Vec<f64>,
    pub holder2: Option<HolderConstant>,
}

impl TryFrom<CostJson> for CostSpec {
    type Error = Error;

    fn try_from(raw: CostJson) -> Result<Self> {
        let func = ScalarFn::from_name(&raw.name, &raw.params)?;
        let time_poly = match (raw.kind, raw.time_params) {
            (CostKind::Markov, p) => p.unwrap_or_default(),
            (_, None) => Vec::new(),
            (kind, Some(_)) => {
                return Err(Error::Config(format!("time_params only apply to markov costs, not {kind:?}")))
            }
        };
        if raw.kind == CostKind::Markov && raw.holder2_constant.is_some() {
            return Err(Error::Config("markov costs carry no holder2_constant".into()));
        }
        Ok(Self {
            kind: raw.kind,
            func,
            time_poly,
            holder2: raw.holder2_constant,
        })
    }
}

impl From<CostSpec> for CostJson {
    fn from(c: CostSpec) -> Self {
        CostJson {
            kind: c.kind,
            name: c.func.name().to_string(),
            params: c.func.params(),
            time_params: (c.kind == CostKind::Markov && !c.time_poly.is_empty()).then_some(c.time_poly),
            holder2_constant: c.holder2,
        }
    }
}

/// Linear modulus `φ(x) = slope·x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Modulus {
    pub slope: f64,
    /// The underlying Hölder/Lipschitz constant before kind-specific scaling.
    pub constant: f64,
}

impl Modulus {
    pub fn eval(&self, x: f64) -> f64 {
        self.slope * x
    }
}

impl CostSpec {
    pub fn new(kind: CostKind, func: ScalarFn) -> Self {
        Self {
            kind,
            func,
            time_poly: Vec::new(),
            holder2: None,
        }
    }

    pub fn terminal(func: ScalarFn) -> Self {
        Self::new(CostKind::Terminal, func)
    }

    pub fn running_max(func: ScalarFn) -> Self {
        Self::new(CostKind::RunningMax, func)
    }

    pub fn with_holder2(mut self, c: HolderConstant) -> Self {
        self.holder2 = Some(c);
        self
    }

    pub fn requires_max(&self) -> bool {
        self.kind == CostKind::RunningMax
    }

    pub fn evaluate(&self, state: &PathState) -> Result<f64> {
        Ok(match self.kind {
            CostKind::Terminal => self.func.eval(state.w),
            CostKind::RunningMax => {
                let m = state.m.ok_or_else(|| {
                    Error::Config("running_max cost needs a max-augmented lattice".into())
                })?;
                self.func.eval(m)
            }
            CostKind::Time => self.func.eval(state.t),
            CostKind::Markov => self.func.eval(state.w) + horner(&self.time_poly, state.t),
        })
    }

    /// Checks that the lattice carries the state this cost reads.
    pub fn check_lattice(&self, spec: &LatticeSpec) -> Result<()> {
        if self.requires_max() && !spec.augment_max {
            return Err(Error::Config(
                "running_max cost needs a lattice with augment_max = true".into(),
            ));
        }
        Ok(())
    }

    /// Stability modulus, absent when the cost carries no constant or the
    /// kind admits none.
    ///
    /// Terminal and running-max kinds read the constant as a 2-Hölder bound
    /// `|f(x) − f(y)| ≤ C|x − y|²`, giving `φ(x) = C·x` and `φ(x) = 4C·x`
    /// respectively; the time kind reads it as a Lipschitz constant in `t`.
    /// [`HolderConstant::Lattice`] derives the smallest such constant over
    /// the values reachable on `lattice`.
    pub fn modulus(&self, lattice: Option<&LatticeSpec>) -> Option<Modulus> {
        let holder = self.holder2?;
        let constant = match holder {
            HolderConstant::Given(c) => c,
            HolderConstant::Lattice => self.lattice_constant(lattice?)?,
        };
        let slope = match self.kind {
            CostKind::Terminal | CostKind::Time => constant,
            CostKind::RunningMax => 4.0 * constant,
            CostKind::Markov => return None,
        };
        Some(Modulus { slope, constant })
    }

    /// Smallest constant valid for the modulus over the reachable range.
    pub fn lattice_constant(&self, spec: &LatticeSpec) -> Option<f64> {
        let sq = spec.dt.sqrt();
        let d = spec.depth as i32;
        let (values, power): (Vec<f64>, i32) = match self.kind {
            CostKind::Terminal => ((-d..=d).map(|l| l as f64 * sq).collect(), 2),
            CostKind::RunningMax => ((0..=d).map(|l| l as f64 * sq).collect(), 2),
            CostKind::Time => ((0..=spec.depth).map(|s| spec.time_of(s)).collect(), 1),
            CostKind::Markov => return None,
        };
        let mut best: f64 = 0.0;
        for (i, x) in values.iter().enumerate() {
            for y in &values[i + 1..] {
                let ratio = (self.func.eval(*x) - self.func.eval(*y)).abs() / (x - y).abs().powi(power);
                best = best.max(ratio);
            }
        }
        Some(best)
    }

    /// Assumptions recorded per cost but never verified numerically.
    pub fn untested_assumptions(&self) -> Vec<&'static str> {
        vec!["value continuity uniform over epsilon-constrained stopping times"]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(w: f64, m: Option<f64>, t: f64) -> PathState {
        PathState { w, m, t }
    }

    #[test]
    fn evaluate_examples() {
        let id = CostSpec::terminal(ScalarFn::Identity);
        assert_eq!(id.evaluate(&state(1.5, None, 1.0)).unwrap(), 1.5);
        let rm = CostSpec::running_max(ScalarFn::Identity);
        assert_eq!(rm.evaluate(&state(0.0, Some(2.0), 3.0)).unwrap(), 2.0);
        let ind = CostSpec::terminal(ScalarFn::IndicatorGe { threshold: 1.0 });
        assert_eq!(ind.evaluate(&state(0.0, None, 1.0)).unwrap(), 0.0);
        assert_eq!(ind.evaluate(&state(1.0, None, 1.0)).unwrap(), 1.0);
        assert!(matches!(rm.evaluate(&state(0.0, None, 1.0)), Err(Error::Config(_))));
    }

    #[test]
    fn other_kinds() {
        let time = CostSpec::new(CostKind::Time, ScalarFn::Polynomial(vec![1.0, -0.5]));
        assert_eq!(time.evaluate(&state(9.0, None, 2.0)).unwrap(), 0.0);
        let mut markov = CostSpec::new(CostKind::Markov, ScalarFn::PositivePart { strike: 0.5 });
        markov.time_poly = vec![0.0, -0.1];
        assert!((markov.evaluate(&state(1.5, None, 2.0)).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn modulus_examples() {
        let sq = CostSpec::terminal(ScalarFn::Square).with_holder2(HolderConstant::Given(3.0));
        assert_eq!(sq.modulus(None).unwrap().eval(2.0), 6.0);
        let rm = CostSpec::running_max(ScalarFn::Identity).with_holder2(HolderConstant::Given(1.0));
        assert_eq!(rm.modulus(None).unwrap().eval(1.0), 4.0);
        assert_eq!(CostSpec::terminal(ScalarFn::Square).modulus(None), None);
        let lat = CostSpec::terminal(ScalarFn::Square).with_holder2(HolderConstant::Lattice);
        assert_eq!(lat.modulus(None), None);
    }

    #[test]
    fn lattice_constant_square() {
        // |x² − y²| / |x − y|² = |x + y| / |x − y|, worst at adjacent levels at the edge
        let spec = LatticeSpec::recombining(4, 1.0);
        let c = CostSpec::terminal(ScalarFn::Square).lattice_constant(&spec).unwrap();
        assert_eq!(c, 7.0);
        let abs = CostSpec::terminal(ScalarFn::Abs).lattice_constant(&LatticeSpec::recombining(4, 0.25)).unwrap();
        assert_eq!(abs, 2.0);
        // every 2-Hölder constant bounds each sampled pair
        let ind = CostSpec::terminal(ScalarFn::IndicatorGe { threshold: 0.3 });
        assert_eq!(ind.lattice_constant(&LatticeSpec::recombining(3, 0.25)).unwrap(), 4.0);
    }

    #[test]
    fn json_schema() {
        let c: CostSpec =
            serde_json::from_str(r#"{"kind":"terminal","name":"indicator_ge","params":[1.0]}"#).unwrap();
        assert_eq!(c.func, ScalarFn::IndicatorGe { threshold: 1.0 });
        let c: CostSpec = serde_json::from_str(
            r#"{"kind":"running_max","name":"identity","holder2_constant":"lattice"}"#,
        )
        .unwrap();
        assert_eq!(c.holder2, Some(HolderConstant::Lattice));
        let back = serde_json::to_string(&c).unwrap();
        assert_eq!(back, r#"{"kind":"running_max","name":"identity","params":[],"holder2_constant":"lattice"}"#);
        assert!(serde_json::from_str::<CostSpec>(r#"{"kind":"terminal","name":"cube"}"#).is_err());
        assert!(serde_json::from_str::<CostSpec>(r#"{"kind":"terminal","name":"square","params":[1]}"#).is_err());
        assert!(serde_json::from_str::<CostSpec>(
            r#"{"kind":"terminal","name":"square","holder2_constant":-1}"#
        )
        .is_err());
    }
}
