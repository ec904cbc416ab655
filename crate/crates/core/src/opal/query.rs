use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::PatientRecord;
use crate::codec::Encoder;

/// A queryable record field. Text form: `age`, `gender_code`,
/// `assessment_score.<i>`, `condition_tags`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Field {
    Age,
    GenderCode,
    AssessmentScore(usize),
    ConditionTags,
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Field::Age => f.write_str("age"),
            Field::GenderCode => f.write_str("gender_code"),
            Field::AssessmentScore(i) => write!(f, "assessment_score.{i}"),
            Field::ConditionTags => f.write_str("condition_tags"),
        }
    }
}

impl FromStr for Field {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "age" => Ok(Field::Age),
            "gender_code" => Ok(Field::GenderCode),
            "condition_tags" => Ok(Field::ConditionTags),
            other => other
                .strip_prefix("assessment_score.")
                .and_then(|i| i.parse().ok())
                .map(Field::AssessmentScore)
                .ok_or_else(|| format!("unknown field {other:?}")),
        }
    }
}

impl Serialize for Field {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Field {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmpOp {
    Eq(f64),
    Lt(f64),
    Le(f64),
    Gt(f64),
    Ge(f64),
    In(Vec<f64>),
    HasTag(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub field: Field,
    pub op: CmpOp,
}

impl Condition {
    pub fn new(field: Field, op: CmpOp) -> Self {
        Self { field, op }
    }

    pub(super) fn check(&self) -> Result<(), String> {
        let tags = self.field == Field::ConditionTags;
        match &self.op {
            CmpOp::HasTag(_) if tags => Ok(()),
            CmpOp::HasTag(_) => Err(format!("has_tag cannot apply to {}", self.field)),
            _ if tags => Err("condition_tags only supports has_tag".into()),
            CmpOp::In(set) if set.iter().any(|v| !v.is_finite()) => Err("non-finite constant".into()),
            CmpOp::Eq(v) | CmpOp::Lt(v) | CmpOp::Le(v) | CmpOp::Gt(v) | CmpOp::Ge(v) if !v.is_finite() => {
                Err("non-finite constant".into())
            }
            _ => Ok(()),
        }
    }

    pub fn matches(&self, r: &PatientRecord) -> bool {
        if let CmpOp::HasTag(tag) = &self.op {
            return self.field == Field::ConditionTags && r.condition_tags.contains(tag);
        }
        let Some(x) = r.numeric(self.field) else {
            return false;
        };
        match &self.op {
            CmpOp::Eq(v) => x == *v,
            CmpOp::Lt(v) => x < *v,
            CmpOp::Le(v) => x <= *v,
            CmpOp::Gt(v) => x > *v,
            CmpOp::Ge(v) => x >= *v,
            CmpOp::In(set) => set.contains(&x),
            CmpOp::HasTag(_) => unreachable!(),
        }
    }

    fn encode(&self, enc: &mut Encoder) {
        enc.str(&self.field.to_string());
        match &self.op {
            CmpOp::Eq(v) => enc.bytes(&[1]).f64(*v),
            CmpOp::Lt(v) => enc.bytes(&[2]).f64(*v),
            CmpOp::Le(v) => enc.bytes(&[3]).f64(*v),
            CmpOp::Gt(v) => enc.bytes(&[4]).f64(*v),
            CmpOp::Ge(v) => enc.bytes(&[5]).f64(*v),
            CmpOp::In(set) => enc.bytes(&[6]).f64_slice(set),
            CmpOp::HasTag(t) => enc.bytes(&[7]).str(t),
        };
    }
}

/// Conjunction of conditions; the empty filter matches everything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Filter(Vec<Condition>);

impl Filter {
    pub fn new(conditions: Vec<Condition>) -> Self {
        Self(conditions)
    }

    pub fn conditions(&self) -> &[Condition] {
        &self.0
    }

    pub fn matches(&self, r: &PatientRecord) -> bool {
        self.0.iter().all(|c| c.matches(r))
    }

    pub fn canonical(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.u64(self.0.len() as u64);
        for c in &self.0 {
            c.encode(&mut enc);
        }
        enc.finish()
    }
}
