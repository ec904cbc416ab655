//! Background data service: vetted aggregate algorithms run inside each
//! data holder's boundary and only thresholded aggregates leave it.

mod query;

pub use query::{CmpOp, Condition, Field, Filter};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Encoder;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpalError {
    #[error("algorithm {0} is not expert-verified")]
    NotVerified(String),
    #[error("algorithm {0} is already registered")]
    DuplicateId(String),
    #[error("algorithm {algo_id}: minimum group size must be at least 2, got {k}")]
    InvalidThreshold { algo_id: String, k: u32 },
    #[error("unknown algorithm {0}")]
    UnknownAlgorithm(String),
    #[error("field {field} is not allowed by algorithm {algo_id}")]
    DisallowedField { algo_id: String, field: Field },
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("party {party_id}: {reason}")]
    InvalidRecord { party_id: String, reason: String },
    #[error("federation requires at least one party")]
    NoParties,
    #[error("answer is suppressed")]
    SuppressedInput,
    #[error("baseline statistic is zero")]
    ZeroBaseline,
    #[error("io: {0}")]
    Io(String),
    #[error("parse: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub record_id: String,
    pub age: u32,
    pub gender_code: u8,
    pub assessment_scores: Vec<f64>,
    pub condition_tags: BTreeSet<String>,
    pub party_id: String,
}

impl PatientRecord {
    pub fn numeric(&self, field: Field) -> Option<f64> {
        match field {
            Field::Age => Some(self.age as f64),
            Field::GenderCode => Some(self.gender_code as f64),
            Field::AssessmentScore(i) => self.assessment_scores.get(i).copied(),
            Field::ConditionTags => None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.assessment_scores.iter().any(|s| !s.is_finite()) {
            return Err("non-finite assessment score".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Aggregation {
    Count,
    Mean,
    /// Population variance (divides by the group size).
    Variance,
    /// Fraction of the group whose target value is strictly above `threshold`.
    ProportionAbove { threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VettedAlgorithm {
    pub algo_id: String,
    pub aggregation: Aggregation,
    pub allowed_fields: BTreeSet<Field>,
    pub min_group_size: u32,
    pub expert_verified: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AlgoRef(pub String);

#[derive(Debug, Default, Clone)]
pub struct AlgorithmRegistry {
    algorithms: BTreeMap<String, VettedAlgorithm>,
}

#[derive(Deserialize)]
struct RegistryFile {
    #[serde(default, rename = "algorithm")]
    algorithms: Vec<VettedAlgorithm>,
}

impl AlgorithmRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, algo: VettedAlgorithm) -> Result<AlgoRef, OpalError> {
        if !algo.expert_verified {
            return Err(OpalError::NotVerified(algo.algo_id));
        }
        if algo.min_group_size < 2 {
            return Err(OpalError::InvalidThreshold {
                k: algo.min_group_size,
                algo_id: algo.algo_id,
            });
        }
        if self.algorithms.contains_key(&algo.algo_id) {
            return Err(OpalError::DuplicateId(algo.algo_id));
        }
        let id = algo.algo_id.clone();
        self.algorithms.insert(id.clone(), algo);
        Ok(AlgoRef(id))
    }

    pub fn get(&self, algo_id: &str) -> Option<&VettedAlgorithm> {
        self.algorithms.get(algo_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &VettedAlgorithm> {
        self.algorithms.values()
    }

    /// Parses `[[algorithm]]` tables; every entry goes through [`Self::register`].
    pub fn from_toml(text: &str) -> Result<Self, OpalError> {
        let file: RegistryFile = toml::from_str(text).map_err(|e| OpalError::Parse(e.to_string()))?;
        let mut reg = Self::new();
        for algo in file.algorithms {
            reg.register(algo)?;
        }
        Ok(reg)
    }

    pub fn load(path: &Path) -> Result<Self, OpalError> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| OpalError::Io(e.to_string()))?)
    }

    /// Resolves the algorithm and checks the query only touches allowed fields.
    pub fn check(&self, q: &Query) -> Result<&VettedAlgorithm, OpalError> {
        let algo = self
            .get(&q.algo_id)
            .ok_or_else(|| OpalError::UnknownAlgorithm(q.algo_id.clone()))?;
        let disallowed = |field: Field| OpalError::DisallowedField {
            algo_id: algo.algo_id.clone(),
            field,
        };
        if !algo.allowed_fields.contains(&q.target_field) {
            return Err(disallowed(q.target_field));
        }
        if algo.aggregation != Aggregation::Count && q.target_field == Field::ConditionTags {
            return Err(OpalError::InvalidQuery(
                "condition_tags is not numeric; only count may target it".into(),
            ));
        }
        for filter in std::iter::once(&q.filter).chain(q.baseline_filter.as_ref()) {
            for cond in filter.conditions() {
                if !algo.allowed_fields.contains(&cond.field) {
                    return Err(disallowed(cond.field));
                }
                cond.check().map_err(OpalError::InvalidQuery)?;
            }
        }
        Ok(algo)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub algo_id: String,
    pub filter: Filter,
    pub target_field: Field,
    pub requester_id: String,
    pub timestamp: u64,
    /// Comparison group for the relative-difference figure, if requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_filter: Option<Filter>,
}

impl Query {
    pub fn canonical(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str(&self.query_id)
            .str(&self.algo_id)
            .bytes(&self.filter.canonical())
            .str(&self.target_field.to_string())
            .str(&self.requester_id)
            .u64(self.timestamp);
        match &self.baseline_filter {
            Some(f) => enc.bytes(&[1]).bytes(&f.canonical()),
            None => enc.bytes(&[0]),
        };
        enc.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupSize {
    Exact(u64),
    /// Fewer than the algorithm's k matched; the true size is withheld.
    BelowThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Value(f64),
    Suppressed,
}

impl Statistic {
    pub fn value(&self) -> Option<f64> {
        match self {
            Statistic::Value(v) => Some(*v),
            Statistic::Suppressed => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedAnswer {
    pub query_id: String,
    pub group_size: GroupSize,
    pub statistic: Statistic,
    pub relative_comparison_pct: Option<f64>,
    pub contributing_parties: u32,
}

impl AggregatedAnswer {
    pub fn is_suppressed(&self) -> bool {
        self.statistic == Statistic::Suppressed
    }

    pub fn canonical(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str(&self.query_id);
        match self.group_size {
            GroupSize::Exact(n) => enc.bytes(&[0]).u64(n),
            GroupSize::BelowThreshold => enc.bytes(&[1]),
        };
        match self.statistic {
            Statistic::Value(v) => enc.bytes(&[0]).f64(v),
            Statistic::Suppressed => enc.bytes(&[1]),
        };
        match self.relative_comparison_pct {
            Some(p) => enc.bytes(&[1]).f64(p),
            None => enc.bytes(&[0]),
        };
        enc.u64(self.contributing_parties as u64);
        enc.finish()
    }
}

/// Sufficient statistics exchanged between trusted parties during
/// federation. Never released to a requester.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PartialAggregate {
    pub n: u64,
    pub sum: f64,
    /// Sum of squared deviations from the group mean.
    pub m2: f64,
    pub above: u64,
}

impl PartialAggregate {
    fn from_values(values: &[f64], threshold: Option<f64>) -> Self {
        let n = values.len() as u64;
        if n == 0 {
            return Self::default();
        }
        let sum: f64 = values.iter().sum();
        let mean = sum / n as f64;
        let m2 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        let above = threshold.map_or(0, |t| values.iter().filter(|&&v| v > t).count() as u64);
        Self { n, sum, m2, above }
    }

    /// Exact for counts and sums of grid-aligned values; `m2` combines by the
    /// pairwise update of Chan et al.
    pub fn merge(self, other: Self) -> Self {
        if self.n == 0 {
            return other;
        }
        if other.n == 0 {
            return self;
        }
        let n = self.n + other.n;
        let delta = other.sum / other.n as f64 - self.sum / self.n as f64;
        let m2 = self.m2 + other.m2 + delta * delta * (self.n as f64 * other.n as f64) / n as f64;
        Self {
            n,
            sum: self.sum + other.sum,
            m2,
            above: self.above + other.above,
        }
    }

    pub fn finalize(&self, aggregation: Aggregation, k: u32) -> (GroupSize, Statistic) {
        if self.n < k as u64 {
            return (GroupSize::BelowThreshold, Statistic::Suppressed);
        }
        let n = self.n as f64;
        let value = match aggregation {
            Aggregation::Count => n,
            Aggregation::Mean => self.sum / n,
            Aggregation::Variance => self.m2 / n,
            Aggregation::ProportionAbove { .. } => self.above as f64 / n,
        };
        (GroupSize::Exact(self.n), Statistic::Value(value))
    }
}

/// A data holder's records. Queries run here; records never leave.
#[derive(Debug, Clone)]
pub struct ProtectedDatabase {
    party_id: String,
    records: Vec<PatientRecord>,
}

impl ProtectedDatabase {
    pub fn new(party_id: impl Into<String>, records: Vec<PatientRecord>) -> Result<Self, OpalError> {
        let party_id = party_id.into();
        for r in &records {
            r.validate().map_err(|reason| OpalError::InvalidRecord {
                party_id: party_id.clone(),
                reason,
            })?;
        }
        Ok(Self { party_id, records })
    }

    /// One JSON record per line; blank lines are skipped.
    pub fn load_jsonl(party_id: impl Into<String>, path: &Path) -> Result<Self, OpalError> {
        let text = fs::read_to_string(path).map_err(|e| OpalError::Io(e.to_string()))?;
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| OpalError::Parse(format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<PatientRecord>, _>>()?;
        Self::new(party_id, records)
    }

    pub fn party_id(&self) -> &str {
        &self.party_id
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn target_values(&self, filter: &Filter, target: Field) -> Result<Vec<f64>, OpalError> {
        let mut out = Vec::new();
        for r in self.records.iter().filter(|r| filter.matches(r)) {
            let v = if target == Field::ConditionTags {
                // Count over tags: the value itself is irrelevant.
                0.0
            } else {
                r.numeric(target).ok_or_else(|| OpalError::InvalidRecord {
                    party_id: self.party_id.clone(),
                    reason: format!("a matching record lacks {target}"),
                })?
            };
            out.push(v);
        }
        Ok(out)
    }

    fn partial_for(&self, algo: &VettedAlgorithm, filter: &Filter, target: Field) -> Result<PartialAggregate, OpalError> {
        let threshold = match algo.aggregation {
            Aggregation::ProportionAbove { threshold } => Some(threshold),
            _ => None,
        };
        Ok(PartialAggregate::from_values(&self.target_values(filter, target)?, threshold))
    }

    /// Sufficient statistics for the query's main group and, when requested,
    /// its baseline group.
    pub fn partial(
        &self,
        registry: &AlgorithmRegistry,
        q: &Query,
    ) -> Result<(PartialAggregate, Option<PartialAggregate>), OpalError> {
        let algo = registry.check(q)?;
        let main = self.partial_for(algo, &q.filter, q.target_field)?;
        let baseline = q
            .baseline_filter
            .as_ref()
            .map(|f| self.partial_for(algo, f, q.target_field))
            .transpose()?;
        Ok((main, baseline))
    }

    pub fn execute_query(&self, registry: &AlgorithmRegistry, q: &Query) -> Result<AggregatedAnswer, OpalError> {
        let algo = registry.check(q)?;
        let (main, baseline) = self.partial(registry, q)?;
        Ok(assemble_answer(q, algo, main, baseline, u32::from(main.n > 0)))
    }
}

fn assemble_answer(
    q: &Query,
    algo: &VettedAlgorithm,
    main: PartialAggregate,
    baseline: Option<PartialAggregate>,
    contributing_parties: u32,
) -> AggregatedAnswer {
    let (group_size, statistic) = main.finalize(algo.aggregation, algo.min_group_size);
    let relative_comparison_pct = baseline.and_then(|b| {
        let (_, base_stat) = b.finalize(algo.aggregation, algo.min_group_size);
        match (statistic, base_stat) {
            (Statistic::Value(v), Statistic::Value(base)) if base != 0.0 => Some(100.0 * (v - base) / base),
            _ => None,
        }
    });
    AggregatedAnswer {
        query_id: q.query_id.clone(),
        group_size,
        statistic,
        relative_comparison_pct,
        contributing_parties: if statistic == Statistic::Suppressed {
            0
        } else {
            contributing_parties
        },
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FederationOptions {
    /// When set, a party whose own matching group is below k contributes nothing.
    pub enforce_party_threshold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartyFailure {
    pub party_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedAnswer {
    pub answer: AggregatedAnswer,
    pub failures: Vec<PartyFailure>,
}

/// Merges per-party sufficient statistics and thresholds the merged group.
/// Parties that fail are reported and skipped.
pub fn federate_query(
    parties: &[ProtectedDatabase],
    registry: &AlgorithmRegistry,
    q: &Query,
    options: FederationOptions,
) -> Result<FederatedAnswer, OpalError> {
    if parties.is_empty() {
        return Err(OpalError::NoParties);
    }
    let algo = registry.check(q)?;
    let k = algo.min_group_size as u64;
    let mut main = PartialAggregate::default();
    let mut baseline = q.baseline_filter.as_ref().map(|_| PartialAggregate::default());
    let mut contributing = 0u32;
    let mut failures = Vec::new();
    for party in parties {
        match party.partial(registry, q) {
            Ok((m, b)) => {
                if !(options.enforce_party_threshold && m.n < k) && m.n > 0 {
                    main = main.merge(m);
                    contributing += 1;
                }
                if let (Some(acc), Some(b)) = (baseline.as_mut(), b) {
                    if !(options.enforce_party_threshold && b.n < k) {
                        *acc = acc.merge(b);
                    }
                }
            }
            Err(e) => failures.push(PartyFailure {
                party_id: party.party_id().to_owned(),
                error: e.to_string(),
            }),
        }
    }
    Ok(FederatedAnswer {
        answer: assemble_answer(q, algo, main, baseline, contributing),
        failures,
    })
}

/// Percentage difference of `ans` over `baseline`.
pub fn relative_difference_pct(ans: &AggregatedAnswer, baseline: &AggregatedAnswer) -> Result<f64, OpalError> {
    let (Some(v), Some(base)) = (ans.statistic.value(), baseline.statistic.value()) else {
        return Err(OpalError::SuppressedInput);
    };
    if base == 0.0 {
        return Err(OpalError::ZeroBaseline);
    }
    Ok(100.0 * (v - base) / base)
}

/// Human-readable comparison sentence, one decimal place.
pub fn render_answer_template(ans: &AggregatedAnswer, baseline: &AggregatedAnswer) -> Result<String, OpalError> {
    let pct = relative_difference_pct(ans, baseline)?;
    let rounded = format!("{:.1}", pct.abs());
    let direction = if pct < 0.0 && rounded != "0.0" { "lower" } else { "higher" };
    Ok(format!(
        "For this type of patients, the measured propensity is {rounded}% {direction} than in other groups."
    ))
}
