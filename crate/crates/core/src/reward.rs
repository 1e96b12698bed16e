//! Task rewards per paradigm, the unified reward and answer validators.

use serde::{Deserialize, Serialize};

use crate::domain::{make_indicator, ExecutionIndicator, Paradigm, TaskSpec, ValidatorSpec};
use crate::error::{Error, Result};

/// Default subtask weight in the multi-agent task reward.
pub const DEFAULT_BETA: f64 = 0.1;

const NUMERIC_REL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Incorrect,
    Partial,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub r_final: f64,
    pub answer_text: String,
    pub validator_verdict: Verdict,
}

impl TaskOutcome {
    pub fn correct(answer: impl Into<String>) -> Self {
        TaskOutcome {
            r_final: 1.0,
            answer_text: answer.into(),
            validator_verdict: Verdict::Correct,
        }
    }

    pub fn incorrect(answer: impl Into<String>) -> Self {
        TaskOutcome {
            r_final: 0.0,
            answer_text: answer.into(),
            validator_verdict: Verdict::Incorrect,
        }
    }

    pub fn invalid(answer: impl Into<String>) -> Self {
        TaskOutcome {
            r_final: 0.0,
            answer_text: answer.into(),
            validator_verdict: Verdict::Invalid,
        }
    }

    pub fn partial(answer: impl Into<String>, score: f64) -> Result<Self> {
        if !(score > 0.0 && score < 1.0) {
            return Err(Error::Contract(format!("partial score {score} must lie in (0,1)")));
        }
        Ok(TaskOutcome {
            r_final: score,
            answer_text: answer.into(),
            validator_verdict: Verdict::Partial,
        })
    }

    pub fn check(&self) -> Result<()> {
        let ok = match self.validator_verdict {
            Verdict::Correct => self.r_final == 1.0,
            Verdict::Incorrect => self.r_final == 0.0,
            Verdict::Partial => self.r_final > 0.0 && self.r_final < 1.0,
            Verdict::Invalid => self.r_final == 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "verdict {:?} inconsistent with r_final {}",
                self.validator_verdict, self.r_final
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskOutcome {
    pub index: usize,
    pub r_subtask: f64,
    pub model_id: String,
    #[serde(default)]
    pub tools_used: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub indicator: ExecutionIndicator,
    pub r_task: f64,
    pub cost: f64,
    pub latency: f64,
    pub lambda_c: f64,
    pub lambda_l: f64,
    pub beta: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn paradigm(&self) -> Result<Paradigm> {
        self.indicator.paradigm()
    }

    /// `total == r_task - lambda_c*cost - lambda_l*latency` within 1e-12.
    pub fn is_consistent(&self) -> bool {
        let expect = self.r_task - self.lambda_c * self.cost - self.lambda_l * self.latency;
        self.indicator.validate().is_ok()
            && (self.total - expect).abs() <= 1e-12 * expect.abs().max(1.0)
    }
}

/// Paradigm-specific task reward. SM and SA pay the final reward; MA adds
/// `beta` times the sum of subtask rewards, unnormalized.
pub fn task_reward(
    paradigm: Paradigm,
    outcome: &TaskOutcome,
    subtasks: &[SubtaskOutcome],
    beta: f64,
) -> Result<f64> {
    match paradigm {
        Paradigm::SingleModel | Paradigm::SingleAgent => {
            if !subtasks.is_empty() {
                return Err(Error::Contract(format!(
                    "{paradigm} episodes carry no subtask outcomes"
                )));
            }
            Ok(outcome.r_final)
        }
        Paradigm::MultiAgent => {
            let sum: f64 = subtasks.iter().map(|s| s.r_subtask).sum();
            Ok(outcome.r_final + beta * sum)
        }
    }
}

/// Sum over paradigms of `z_m * (r_task_m - lambda_c*cost - lambda_l*latency)`.
/// Only the active paradigm contributes.
pub fn unified_reward(
    indicator: ExecutionIndicator,
    r_task_by_paradigm: [f64; 3],
    cost: f64,
    latency: f64,
    lambda_c: f64,
    lambda_l: f64,
) -> Result<RewardBreakdown> {
    indicator.validate()?;
    let z = indicator.as_array();
    let mut total = 0.0;
    let mut r_task = 0.0;
    for (m, r) in r_task_by_paradigm.iter().enumerate() {
        if z[m] == 1 {
            r_task = *r;
            total += r - lambda_c * cost - lambda_l * latency;
        }
    }
    Ok(RewardBreakdown {
        indicator,
        r_task,
        cost,
        latency,
        lambda_c,
        lambda_l,
        beta: DEFAULT_BETA,
        total,
    })
}

/// Convenience for the common case of one realised paradigm.
pub fn unified_reward_for(
    paradigm: Paradigm,
    r_task: f64,
    cost: f64,
    latency: f64,
    lambda_c: f64,
    lambda_l: f64,
    beta: f64,
) -> RewardBreakdown {
    let mut r = [0.0; 3];
    r[paradigm.index()] = r_task;
    unified_reward(make_indicator(paradigm), r, cost, latency, lambda_c, lambda_l)
        .expect("make_indicator yields a valid indicator")
        .with_beta(beta)
}

fn normalize_text(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Parses a decimal, integer or `p/q` fraction.
pub fn parse_number(s: &str) -> Option<f64> {
    let s = s.trim().trim_end_matches('.');
    if let Some((p, q)) = s.split_once('/') {
        let p: f64 = p.trim().parse().ok()?;
        let q: f64 = q.trim().parse().ok()?;
        if q == 0.0 {
            return None;
        }
        return Some(p / q);
    }
    let v: f64 = s.replace(',', "").parse().ok()?;
    v.is_finite().then_some(v)
}

/// Last token in `text` that parses as a number.
fn last_number(text: &str) -> Option<f64> {
    if let Some(v) = parse_number(text) {
        return Some(v);
    }
    text.split(|c: char| c.is_whitespace() || c == '=' || c == ':')
        .rev()
        .find_map(parse_number)
}

/// Applies a validator directly.
pub fn validate_with(validator: &ValidatorSpec, answer: &str) -> TaskOutcome {
    match validator {
        ValidatorSpec::Exact { expected } => {
            if normalize_text(expected) == normalize_text(answer) {
                TaskOutcome::correct(answer)
            } else {
                TaskOutcome::incorrect(answer)
            }
        }
        ValidatorSpec::Numeric { expected } => {
            let Some(e) = parse_number(expected) else {
                log::warn!("numeric validator has unparseable expected value `{expected}`");
                return TaskOutcome::invalid(answer);
            };
            match last_number(answer) {
                Some(a) if (a - e).abs() <= NUMERIC_REL_TOL * e.abs().max(f64::MIN_POSITIVE) || a == e => {
                    TaskOutcome::correct(answer)
                }
                _ => TaskOutcome::incorrect(answer),
            }
        }
        ValidatorSpec::Contains { expected } => {
            if normalize_text(answer).contains(&normalize_text(expected)) {
                TaskOutcome::correct(answer)
            } else {
                TaskOutcome::incorrect(answer)
            }
        }
    }
}

/// Judges an answer with the task's own validator.
pub fn validate_answer(task: &TaskSpec, answer: &str) -> Result<TaskOutcome> {
    let v = task
        .validator
        .as_ref()
        .ok_or_else(|| Error::Precondition(format!("task `{}` has no validator", task.id)))?;
    Ok(validate_with(v, answer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Difficulty, Domain};

    fn sub(r: f64) -> SubtaskOutcome {
        SubtaskOutcome {
            index: 0,
            r_subtask: r,
            model_id: "m".into(),
            tools_used: vec![],
        }
    }

    #[test]
    fn task_reward_examples() {
        let ok = TaskOutcome::correct("x");
        assert_eq!(task_reward(Paradigm::SingleModel, &ok, &[], 0.1).unwrap(), 1.0);
        let r = task_reward(Paradigm::MultiAgent, &ok, &[sub(1.0), sub(0.5), sub(1.0)], 0.1).unwrap();
        assert!((r - 1.25).abs() < 1e-15);
        let zero = TaskOutcome::incorrect("x");
        assert_eq!(
            task_reward(Paradigm::MultiAgent, &zero, &[sub(0.0), sub(0.0)], 7.0).unwrap(),
            0.0
        );
        assert!(task_reward(Paradigm::SingleAgent, &ok, &[sub(1.0)], 0.1).is_err());
    }

    #[test]
    fn unified_reward_examples() {
        let z = make_indicator(Paradigm::SingleModel);
        let r = unified_reward(z, [1.0, 0.0, 0.0], 10.0, 100.0, 0.01, 0.001).unwrap();
        assert!((r.total - 0.8).abs() < 1e-12);
        assert!(r.is_consistent());
        let free = unified_reward(z, [0.7, 0.0, 0.0], 10.0, 100.0, 0.0, 0.0).unwrap();
        assert_eq!(free.total, 0.7);
        let bad = ExecutionIndicator { z_sm: 1, z_sa: 0, z_ma: 1 };
        assert!(matches!(
            unified_reward(bad, [1.0; 3], 0.0, 0.0, 0.0, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn inactive_paradigms_are_masked() {
        let z = make_indicator(Paradigm::SingleAgent);
        let r = unified_reward(z, [100.0, 0.5, -100.0], 1.0, 1.0, 0.1, 0.1).unwrap();
        assert!((r.total - 0.3).abs() < 1e-12);
        assert_eq!(r.r_task, 0.5);
    }

    fn task(v: ValidatorSpec) -> TaskSpec {
        TaskSpec::new("t", "q", Domain::math(), Difficulty::new(1).unwrap()).with_validator(v)
    }

    #[test]
    fn validator_examples() {
        let exact = task(ValidatorSpec::Exact { expected: "42".into() });
        let o = validate_answer(&exact, "42").unwrap();
        assert_eq!((o.validator_verdict, o.r_final), (Verdict::Correct, 1.0));

        let num = task(ValidatorSpec::Numeric { expected: "3.14159".into() });
        assert_eq!(validate_answer(&num, "3.1415900001").unwrap().validator_verdict, Verdict::Correct);
        assert_eq!(validate_answer(&num, "3.15").unwrap().validator_verdict, Verdict::Incorrect);

        let city = task(ValidatorSpec::Exact { expected: "paris".into() });
        let o = validate_answer(&city, "London").unwrap();
        assert_eq!((o.validator_verdict, o.r_final), (Verdict::Incorrect, 0.0));
        assert_eq!(validate_answer(&city, "  PARIS ").unwrap().r_final, 1.0);
    }

    #[test]
    fn numeric_validator_edge_cases() {
        let bad = task(ValidatorSpec::Numeric { expected: "forty".into() });
        let o = validate_answer(&bad, "40").unwrap();
        assert_eq!((o.validator_verdict, o.r_final), (Verdict::Invalid, 0.0));

        let frac = task(ValidatorSpec::Numeric { expected: "1/3".into() });
        assert_eq!(validate_answer(&frac, "The answer is 0.3333333333").unwrap().r_final, 1.0);
        let zero = task(ValidatorSpec::Numeric { expected: "0".into() });
        assert_eq!(validate_answer(&zero, "0").unwrap().r_final, 1.0);
        assert_eq!(validate_answer(&zero, "0.001").unwrap().r_final, 0.0);
        assert_eq!(validate_answer(&frac, "no idea").unwrap().r_final, 0.0);
    }

    #[test]
    fn contains_validator() {
        let t = task(ValidatorSpec::Contains { expected: "fn main".into() });
        assert_eq!(validate_answer(&t, "here:\nFn   MAIN() {}").unwrap().r_final, 1.0);
        assert_eq!(validate_answer(&t, "nothing").unwrap().r_final, 0.0);
    }

    #[test]
    fn missing_validator_is_precondition_error() {
        let t = TaskSpec::new("t", "q", Domain::math(), Difficulty::new(1).unwrap());
        assert!(matches!(validate_answer(&t, "x"), Err(Error::Precondition(_))));
    }

    #[test]
    fn outcome_invariant() {
        assert!(TaskOutcome::partial("x", 0.4).unwrap().check().is_ok());
        assert!(TaskOutcome::partial("x", 1.0).is_err());
        let mut o = TaskOutcome::correct("x");
        o.r_final = 0.5;
        assert!(o.check().is_err());
    }
}
