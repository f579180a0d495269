//! JSON helpers: a 17-significant-digit float formatter, a float wrapper
//! that carries infinities as strings, and group-constraint specs.

use std::io;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::constrained::{AffineConstraint, Coef, Sense};
use crate::error::{invalid, Error, Result};
use crate::pandora::PandoraInstance;
use crate::simlab::{build_constraint, ConstraintKind, Stage, GROUP_X, GROUP_Y};

pub const SCHEMA: &str = "cs-1";

/// `%.17g`: enough digits to round-trip any f64.
pub fn fmt_g17(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.16e}", x);
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if !(-4..17).contains(&exp) {
        let m = trim_zeros(mant);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let prec = (16 - exp).max(0) as usize;
    trim_zeros(&format!("{:.*}", prec, x)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Pretty JSON with floats written by [`fmt_g17`].
pub struct Formatter17<'a>(PrettyFormatter<'a>);

impl Default for Formatter17<'_> {
    fn default() -> Self {
        Self(PrettyFormatter::with_indent(b"  "))
    }
}

impl Formatter for Formatter17<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        w.write_all(fmt_g17(v).as_bytes())
    }
    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, v: f32) -> io::Result<()> {
        w.write_all(fmt_g17(v as f64).as_bytes())
    }
    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Formatter17::default());
    value
        .serialize(&mut ser)
        .map_err(|e| Error::InvalidInput(format!("json: {e}")))?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("utf-8 json"))
}

/// An f64 whose infinities and NaN travel as "inf", "-inf", "nan".
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Default)]
pub struct F(pub f64);

impl Serialize for F {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let x = self.0;
        if x.is_finite() {
            s.serialize_f64(x)
        } else if x.is_nan() {
            s.serialize_str("nan")
        } else if x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }
}

impl<'de> Deserialize<'de> for F {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = F;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a number or one of \"inf\", \"-inf\", \"nan\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<F, E> {
                Ok(F(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<F, E> {
                Ok(F(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<F, E> {
                Ok(F(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<F, E> {
                match v {
                    "inf" | "+inf" => Ok(F(f64::INFINITY)),
                    "-inf" => Ok(F(f64::NEG_INFINITY)),
                    "nan" => Ok(F(f64::NAN)),
                    _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
                }
            }
        }
        d.deserialize_any(V)
    }
}

pub fn fv(xs: &[f64]) -> Vec<F> {
    xs.iter().map(|&x| F(x)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Groups {
    #[serde(default = "gx")]
    pub x: String,
    #[serde(default = "gy")]
    pub y: String,
}

fn gx() -> String {
    GROUP_X.into()
}
fn gy() -> String {
    GROUP_Y.into()
}

impl Default for Groups {
    fn default() -> Self {
        Self { x: gx(), y: gy() }
    }
}

/// Constraint as written in input files: a named group constraint or an
/// explicit coefficient list (`"kind": "custom"`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub kind: String,
    #[serde(rename = "theta_S", default, skip_serializing_if = "Option::is_none")]
    pub theta_s: Option<Vec<Coef>>,
    #[serde(rename = "theta_I", default, skip_serializing_if = "Option::is_none")]
    pub theta_i: Option<Vec<Coef>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sense: Option<Sense>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Groups>,
}

impl ConstraintSpec {
    pub fn named(kind: &str) -> Self {
        Self { kind: kind.into(), theta_s: None, theta_i: None, b: None, sense: None, theta: None, groups: None }
    }

    pub fn resolve(&self, instance: &PandoraInstance) -> Result<AffineConstraint> {
        if self.kind == "custom" {
            let n = instance.len();
            let zeros = || vec![Coef::Scalar(0.0); n];
            return Ok(AffineConstraint {
                theta_s: self.theta_s.clone().unwrap_or_else(zeros),
                theta_i: self.theta_i.clone().unwrap_or_else(zeros),
                b: self.b.unwrap_or(0.0),
                sense: self.sense.unwrap_or(Sense::Eq),
            });
        }
        let (family, stage) = self
            .kind
            .split_once('-')
            .ok_or_else(|| Error::InvalidInput(format!("unknown constraint kind '{}'", self.kind)))?;
        let stage = match stage {
            "selection" => Stage::Selection,
            "inspection" => Stage::Inspection,
            s => return invalid(format!("unknown constraint stage '{s}'")),
        };
        let kind = match family {
            "parity" => ConstraintKind::Parity,
            "quota" => ConstraintKind::Quota {
                theta: self.theta.ok_or_else(|| Error::InvalidInput("quota needs \"theta\"".into()))?,
            },
            "budget" => ConstraintKind::Budget {
                b: self.b.ok_or_else(|| Error::InvalidInput("budget needs \"b\"".into()))?,
            },
            f => return invalid(format!("unknown constraint family '{f}'")),
        };
        let g = self.groups.clone().unwrap_or_default();
        build_constraint(instance, kind, stage, (&g.x, &g.y))
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ConstraintFile {
    Wrapped { constraints: Vec<ConstraintSpec> },
    List(Vec<ConstraintSpec>),
    One(ConstraintSpec),
}

/// Accepts a single spec, a list, or `{"constraints": [...]}`.
pub fn parse_constraints(text: &str) -> Result<Vec<ConstraintSpec>> {
    let f: ConstraintFile = serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("constraint JSON: {e}")))?;
    Ok(match f {
        ConstraintFile::Wrapped { constraints } => constraints,
        ConstraintFile::List(v) => v,
        ConstraintFile::One(c) => vec![c],
    })
}
