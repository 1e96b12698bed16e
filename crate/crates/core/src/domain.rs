//! Core vocabulary shared by every module: tasks, domains, paradigms,
//! preferences and backend profiles.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical domain names seeded into every registry.
pub const CANONICAL_DOMAINS: [&str; 8] = [
    "math",
    "code-frontend",
    "code-backend",
    "knowledge",
    "creative",
    "document",
    "media",
    "tool-use",
];

/// A task domain tag. Lowercase and non-empty.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Domain(String);

impl Domain {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::Parameter("domain name must be non-empty".into()));
        }
        if name.chars().any(|c| c.is_uppercase() || c.is_whitespace()) {
            return Err(Error::Parameter(format!(
                "domain name `{name}` must be lowercase without whitespace"
            )));
        }
        Ok(Domain(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn math() -> Self {
        Domain("math".into())
    }

    pub fn knowledge() -> Self {
        Domain("knowledge".into())
    }
}

impl TryFrom<String> for Domain {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        Domain::new(value)
    }
}

impl From<Domain> for String {
    fn from(d: Domain) -> String {
        d.0
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Open-ended set of known domains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainRegistry {
    names: BTreeSet<Domain>,
}

impl Default for DomainRegistry {
    fn default() -> Self {
        Self::canonical()
    }
}

impl DomainRegistry {
    pub fn canonical() -> Self {
        let names = CANONICAL_DOMAINS
            .iter()
            .map(|n| Domain((*n).to_string()))
            .collect();
        DomainRegistry { names }
    }

    pub fn register(&mut self, domain: Domain) -> Result<()> {
        if !self.names.insert(domain.clone()) {
            return Err(Error::Config(format!("domain `{domain}` already registered")));
        }
        Ok(())
    }

    pub fn contains(&self, domain: &Domain) -> bool {
        self.names.contains(domain)
    }

    pub fn get(&self, name: &str) -> Result<Domain> {
        self.names
            .iter()
            .find(|d| d.as_str() == name)
            .cloned()
            .ok_or_else(|| Error::lookup("domain", name))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Domain> {
        self.names.iter()
    }
}

/// Task difficulty on a 1–5 scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Difficulty(u8);

impl Difficulty {
    pub const MIN: u8 = 1;
    pub const MAX: u8 = 5;

    pub fn new(level: u8) -> Result<Self> {
        if (Self::MIN..=Self::MAX).contains(&level) {
            Ok(Difficulty(level))
        } else {
            Err(Error::Parameter(format!(
                "difficulty {level} outside [{}, {}]",
                Self::MIN,
                Self::MAX
            )))
        }
    }

    /// Shift by `delta`, clamping to the valid range.
    pub fn shifted(self, delta: i32) -> Self {
        let v = (self.0 as i32 + delta).clamp(Self::MIN as i32, Self::MAX as i32);
        Difficulty(v as u8)
    }

    pub fn level(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = Difficulty> {
        (Self::MIN..=Self::MAX).map(Difficulty)
    }
}

impl TryFrom<u8> for Difficulty {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Difficulty::new(v)
    }
}

impl From<Difficulty> for u8 {
    fn from(d: Difficulty) -> u8 {
        d.0
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The three execution modes. Ordering SM < SA < MA is used for
/// tie-breaking and serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Paradigm {
    SingleModel,
    SingleAgent,
    MultiAgent,
}

impl Paradigm {
    pub const ALL: [Paradigm; 3] = [
        Paradigm::SingleModel,
        Paradigm::SingleAgent,
        Paradigm::MultiAgent,
    ];

    pub fn index(self) -> usize {
        match self {
            Paradigm::SingleModel => 0,
            Paradigm::SingleAgent => 1,
            Paradigm::MultiAgent => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Paradigm> {
        Self::ALL.get(i).copied()
    }

    pub fn short(self) -> &'static str {
        match self {
            Paradigm::SingleModel => "SM",
            Paradigm::SingleAgent => "SA",
            Paradigm::MultiAgent => "MA",
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// One-hot execution indicator `(z_sm, z_sa, z_ma)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionIndicator {
    pub z_sm: u8,
    pub z_sa: u8,
    pub z_ma: u8,
}

impl ExecutionIndicator {
    pub fn as_array(&self) -> [u8; 3] {
        [self.z_sm, self.z_sa, self.z_ma]
    }

    /// Checks that exactly one component is 1 and the rest are 0.
    pub fn validate(&self) -> Result<()> {
        let parts = self.as_array();
        if parts.iter().any(|&z| z > 1) || parts.iter().map(|&z| z as u32).sum::<u32>() != 1 {
            return Err(Error::Contract(format!(
                "execution indicator {parts:?} must have exactly one active paradigm"
            )));
        }
        Ok(())
    }

    pub fn paradigm(&self) -> Result<Paradigm> {
        self.validate()?;
        let idx = self.as_array().iter().position(|&z| z == 1).unwrap_or(0);
        Ok(Paradigm::ALL[idx])
    }
}

pub fn make_indicator(paradigm: Paradigm) -> ExecutionIndicator {
    let mut z = [0u8; 3];
    z[paradigm.index()] = 1;
    ExecutionIndicator {
        z_sm: z[0],
        z_sa: z[1],
        z_ma: z[2],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceMode {
    CostPriority,
    Auto,
    PerformancePriority,
}

impl PreferenceMode {
    pub const ALL: [PreferenceMode; 3] = [
        PreferenceMode::CostPriority,
        PreferenceMode::Auto,
        PreferenceMode::PerformancePriority,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PreferenceMode::CostPriority => "cost_priority",
            PreferenceMode::Auto => "auto",
            PreferenceMode::PerformancePriority => "performance_priority",
        }
    }
}

impl std::str::FromStr for PreferenceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cost_priority" => Ok(PreferenceMode::CostPriority),
            "auto" => Ok(PreferenceMode::Auto),
            "performance_priority" => Ok(PreferenceMode::PerformancePriority),
            other => Err(Error::Config(format!("unknown preference mode `{other}`"))),
        }
    }
}

impl fmt::Display for PreferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A preference preset: reward units per dollar and per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preference {
    pub mode: PreferenceMode,
    pub lambda_c: f64,
    pub lambda_l: f64,
}

/// Coefficient pair for one mode, as it appears in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lambdas {
    pub lambda_c: f64,
    pub lambda_l: f64,
}

/// The three presets. Defaults are calibration targets, overridable by
/// configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceTable {
    pub cost_priority: Lambdas,
    pub auto: Lambdas,
    pub performance_priority: Lambdas,
}

impl Default for PreferenceTable {
    fn default() -> Self {
        PreferenceTable {
            cost_priority: Lambdas {
                lambda_c: 0.05,
                lambda_l: 0.005,
            },
            auto: Lambdas {
                lambda_c: 0.01,
                lambda_l: 0.002,
            },
            performance_priority: Lambdas {
                lambda_c: 0.001,
                lambda_l: 0.0005,
            },
        }
    }
}

/// Partial override of a preset; unset fields keep the default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaOverride {
    pub lambda_c: Option<f64>,
    pub lambda_l: Option<f64>,
}

impl PreferenceTable {
    pub fn get(&self, mode: PreferenceMode) -> Lambdas {
        match mode {
            PreferenceMode::CostPriority => self.cost_priority,
            PreferenceMode::Auto => self.auto,
            PreferenceMode::PerformancePriority => self.performance_priority,
        }
    }

    fn get_mut(&mut self, mode: PreferenceMode) -> &mut Lambdas {
        match mode {
            PreferenceMode::CostPriority => &mut self.cost_priority,
            PreferenceMode::Auto => &mut self.auto,
            PreferenceMode::PerformancePriority => &mut self.performance_priority,
        }
    }

    /// Applies an override without re-validating; call [`validate`](Self::validate)
    /// once all overrides are in.
    pub fn apply_override(&mut self, mode: PreferenceMode, o: LambdaOverride) {
        let slot = self.get_mut(mode);
        if let Some(c) = o.lambda_c {
            slot.lambda_c = c;
        }
        if let Some(l) = o.lambda_l {
            slot.lambda_l = l;
        }
    }

    pub fn preference(&self, mode: PreferenceMode) -> Preference {
        let l = self.get(mode);
        Preference {
            mode,
            lambda_c: l.lambda_c,
            lambda_l: l.lambda_l,
        }
    }

    /// Non-negativity and strict cost-coefficient ordering
    /// cost_priority > auto > performance_priority.
    pub fn validate(&self) -> Result<()> {
        for mode in PreferenceMode::ALL {
            let l = self.get(mode);
            if !(l.lambda_c >= 0.0 && l.lambda_c.is_finite()) {
                return Err(Error::Config(format!("{mode}.lambda_c must be finite and >= 0")));
            }
            if !(l.lambda_l >= 0.0 && l.lambda_l.is_finite()) {
                return Err(Error::Config(format!("{mode}.lambda_l must be finite and >= 0")));
            }
        }
        if !(self.cost_priority.lambda_c > self.auto.lambda_c
            && self.auto.lambda_c > self.performance_priority.lambda_c)
        {
            return Err(Error::Config(format!(
                "preference invariant violated: require cost_priority.lambda_c ({}) > auto.lambda_c ({}) > performance_priority.lambda_c ({})",
                self.cost_priority.lambda_c, self.auto.lambda_c, self.performance_priority.lambda_c
            )));
        }
        Ok(())
    }
}

/// Looks up the coefficient pair for a mode given by name.
pub fn preference_lambdas(mode: &str, table: &PreferenceTable) -> Result<(f64, f64)> {
    let mode: PreferenceMode = mode.parse()?;
    let l = table.get(mode);
    Ok((l.lambda_c, l.lambda_l))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Model,
    Agent,
    Tool,
}

/// Pricing, latency and preference metadata for one backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub id: String,
    pub kind: ProfileKind,
    /// Dollars per million prompt tokens.
    pub price_prompt: f64,
    /// Dollars per million completion tokens.
    pub price_completion: f64,
    pub ttft_ms: f64,
    pub tokens_per_second: f64,
    pub max_context: u64,
    #[serde(default)]
    pub preferred_domains: Vec<Domain>,
}

impl ModelProfile {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Config("profile id must be non-empty".into()));
        }
        if !(self.price_prompt >= 0.0 && self.price_completion >= 0.0) {
            return Err(Error::Config(format!("profile `{}`: prices must be >= 0", self.id)));
        }
        if !(self.tokens_per_second > 0.0 && self.tokens_per_second.is_finite()) {
            return Err(Error::Config(format!(
                "profile `{}`: tokens_per_second must be > 0",
                self.id
            )));
        }
        if !(self.ttft_ms >= 0.0) {
            return Err(Error::Config(format!("profile `{}`: ttft_ms must be >= 0", self.id)));
        }
        Ok(())
    }
}

/// Orders the fleet so that profiles preferring `domain` come first; the
/// rest keep fleet order. Always a permutation of the input.
pub fn table1_prior<'a>(domain: &Domain, fleet: &'a [ModelProfile]) -> Vec<&'a ModelProfile> {
    let (mut preferred, rest): (Vec<_>, Vec<_>) = fleet
        .iter()
        .partition(|p| p.preferred_domains.contains(domain));
    preferred.extend(rest);
    preferred
}

/// How a task's answer is judged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ValidatorSpec {
    Exact { expected: String },
    Numeric { expected: String },
    Contains { expected: String },
}

impl ValidatorSpec {
    pub fn expected(&self) -> &str {
        match self {
            ValidatorSpec::Exact { expected }
            | ValidatorSpec::Numeric { expected }
            | ValidatorSpec::Contains { expected } => expected,
        }
    }
}

/// A decomposed piece of a multi-agent task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubtaskSpec {
    pub index: usize,
    pub description: String,
    #[serde(default)]
    pub depends_on: Vec<usize>,
    #[serde(default)]
    pub validator: Option<ValidatorSpec>,
    /// Labels for routing the subtask; the parent's labels apply when unset.
    #[serde(default)]
    pub domain: Option<Domain>,
    #[serde(default)]
    pub difficulty: Option<Difficulty>,
}

/// A routable task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    pub text: String,
    pub domain: Domain,
    pub difficulty: Difficulty,
    #[serde(default)]
    pub validator: Option<ValidatorSpec>,
    #[serde(default)]
    pub tool_dependency: bool,
    #[serde(default)]
    pub reasoning_depth: u32,
    /// Provenance and tool hints, e.g. `boundary.seed`, `tool`, `tool_args`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
    /// Fixture decomposition used in simulation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtasks: Option<Vec<SubtaskSpec>>,
}

impl TaskSpec {
    pub fn new(id: impl Into<String>, text: impl Into<String>, domain: Domain, difficulty: Difficulty) -> Self {
        TaskSpec {
            id: id.into(),
            text: text.into(),
            domain,
            difficulty,
            validator: None,
            tool_dependency: false,
            reasoning_depth: 0,
            metadata: BTreeMap::new(),
            subtasks: None,
        }
    }

    pub fn with_validator(mut self, v: ValidatorSpec) -> Self {
        self.validator = Some(v);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Parameter("task id must be non-empty".into()));
        }
        Ok(())
    }
}

/// Rejects empty or duplicate ids and domains missing from the registry.
pub fn validate_dataset(tasks: &[TaskSpec], registry: &DomainRegistry) -> Result<()> {
    let mut seen = BTreeSet::new();
    for t in tasks {
        t.validate()?;
        if !seen.insert(t.id.as_str()) {
            return Err(Error::Parameter(format!("duplicate task id `{}`", t.id)));
        }
        if !registry.contains(&t.domain) {
            return Err(Error::lookup("domain", t.domain.as_str()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(id: &str, prefs: &[&str]) -> ModelProfile {
        ModelProfile {
            id: id.into(),
            kind: ProfileKind::Model,
            price_prompt: 1.0,
            price_completion: 2.0,
            ttft_ms: 100.0,
            tokens_per_second: 50.0,
            max_context: 32_000,
            preferred_domains: prefs.iter().map(|d| Domain::new(*d).unwrap()).collect(),
        }
    }

    #[test]
    fn indicator_examples() {
        assert_eq!(make_indicator(Paradigm::SingleModel).as_array(), [1, 0, 0]);
        assert_eq!(make_indicator(Paradigm::SingleAgent).as_array(), [0, 1, 0]);
        assert_eq!(make_indicator(Paradigm::MultiAgent).as_array(), [0, 0, 1]);
    }

    #[test]
    fn indicator_round_trip_and_exclusivity() {
        for p in Paradigm::ALL {
            let z = make_indicator(p);
            assert_eq!(z.as_array().iter().map(|&v| v as u32).sum::<u32>(), 1);
            assert_eq!(z.paradigm().unwrap(), p);
            assert_eq!(make_indicator(z.paradigm().unwrap()), z);
        }
        let bad = ExecutionIndicator { z_sm: 1, z_sa: 1, z_ma: 0 };
        assert!(bad.validate().is_err());
        let none = ExecutionIndicator { z_sm: 0, z_sa: 0, z_ma: 0 };
        assert!(none.paradigm().is_err());
    }

    #[test]
    fn paradigm_order() {
        assert!(Paradigm::SingleModel < Paradigm::SingleAgent);
        assert!(Paradigm::SingleAgent < Paradigm::MultiAgent);
    }

    #[test]
    fn lambda_defaults_and_overrides() {
        let table = PreferenceTable::default();
        assert_eq!(preference_lambdas("cost_priority", &table).unwrap(), (0.05, 0.005));
        assert_eq!(preference_lambdas("auto", &table).unwrap(), (0.01, 0.002));
        assert_eq!(
            preference_lambdas("performance_priority", &table).unwrap(),
            (0.001, 0.0005)
        );
        table.validate().unwrap();

        let mut t = table;
        t.apply_override(
            PreferenceMode::PerformancePriority,
            LambdaOverride { lambda_c: Some(0.0), lambda_l: None },
        );
        assert_eq!(preference_lambdas("performance_priority", &t).unwrap(), (0.0, 0.0005));
        t.validate().unwrap();

        assert!(matches!(preference_lambdas("cheapest", &table), Err(Error::Config(_))));
    }

    #[test]
    fn monotonicity_violation_rejected() {
        let mut t = PreferenceTable::default();
        t.apply_override(PreferenceMode::Auto, LambdaOverride { lambda_c: Some(0.1), lambda_l: None });
        let err = t.validate().unwrap_err().to_string();
        assert!(err.contains("preference invariant"), "{err}");
    }

    #[test]
    fn table1_prior_orders_preferred_first() {
        let fleet = vec![
            profile("generalist", &[]),
            profile("kimi-frontend", &["code-frontend"]),
            profile("glm-backend", &["code-backend"]),
        ];
        let order: Vec<_> = table1_prior(&Domain::new("code-frontend").unwrap(), &fleet)
            .iter()
            .map(|p| p.id.as_str())
            .collect();
        assert_eq!(order, ["kimi-frontend", "generalist", "glm-backend"]);

        let unchanged: Vec<_> = table1_prior(&Domain::new("media").unwrap(), &fleet)
            .iter()
            .map(|p| p.id.as_str())
            .collect();
        assert_eq!(unchanged, ["generalist", "kimi-frontend", "glm-backend"]);
    }

    #[test]
    fn domain_registry_rejects_duplicates_and_bad_names() {
        let mut reg = DomainRegistry::canonical();
        assert!(reg.register(Domain::math()).is_err());
        reg.register(Domain::new("legal").unwrap()).unwrap();
        assert!(reg.contains(&Domain::new("legal").unwrap()));
        assert!(Domain::new("").is_err());
        assert!(Domain::new("Math").is_err());
    }

    #[test]
    fn difficulty_bounds_and_clamp() {
        assert!(Difficulty::new(0).is_err());
        assert!(Difficulty::new(6).is_err());
        let d = Difficulty::new(5).unwrap();
        assert_eq!(d.shifted(2).level(), 5);
        assert_eq!(Difficulty::new(3).unwrap().shifted(2).level(), 5);
        assert_eq!(Difficulty::new(1).unwrap().shifted(-2).level(), 1);
    }

    #[test]
    fn task_serialization_uses_listed_field_names() {
        let t = TaskSpec::new("t1", "2+2?", Domain::math(), Difficulty::new(1).unwrap())
            .with_validator(ValidatorSpec::Numeric { expected: "4".into() });
        let v = serde_json::to_value(&t).unwrap();
        for key in ["id", "text", "domain", "difficulty", "validator", "tool_dependency", "reasoning_depth"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["validator"]["kind"], "numeric");
        let back: TaskSpec = serde_json::from_value(v).unwrap();
        assert_eq!(back, t);
        let bad = serde_json::json!({"id":"x","text":"y","domain":"math","difficulty":9});
        assert!(serde_json::from_value::<TaskSpec>(bad).is_err());
    }

    #[test]
    fn dataset_validation() {
        let reg = DomainRegistry::canonical();
        let t = TaskSpec::new("a", "x", Domain::math(), Difficulty::new(2).unwrap());
        assert!(validate_dataset(&[t.clone(), t.clone()], &reg).is_err());
        let mut odd = t.clone();
        odd.id = "b".into();
        odd.domain = Domain::new("astrology").unwrap();
        assert!(validate_dataset(&[t, odd], &reg).is_err());
    }
}
