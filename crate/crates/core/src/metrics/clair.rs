//! LLM-judged caption similarity.

use log::warn;

use crate::client::{CompletionClient, CompletionRequest};

pub const MAX_ATTEMPTS: usize = 3;

pub fn judge_prompt(candidate: &str, reference: &str) -> String {
    format!(
        "You are judging whether two descriptions of the same video agree.\n\
         Candidate: {candidate}\n\
         Reference: {reference}\n\
         On a scale of 0 to 100, how likely is it that the candidate and the \
         reference describe the same content? Answer with `Score: <integer>`."
    )
}

/// First integer in `reply` that lies in `0..=100`, as a fraction.
pub fn parse_score(reply: &str) -> Option<f64> {
    let mut digits = String::new();
    let mut found = Vec::new();
    for c in reply.chars().chain(std::iter::once(' ')) {
        if c.is_ascii_digit() {
            digits.push(c);
        } else if !digits.is_empty() {
            found.push(std::mem::take(&mut digits));
        }
    }
    found
        .into_iter()
        .filter_map(|d| d.parse::<u32>().ok())
        .find(|&v| v <= 100)
        .map(|v| v as f64 / 100.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClairOutcome {
    pub score: Option<f64>,
    pub attempts: usize,
    /// Set when no score could be obtained.
    pub flagged: bool,
}

/// Asks `judge` up to three times; a reply without a usable integer or a
/// client failure counts as one attempt.
pub fn clair_judge(
    key: &str,
    candidate: &str,
    reference: &str,
    judge: &dyn CompletionClient,
) -> ClairOutcome {
    let mut req = CompletionRequest::new(key, judge_prompt(candidate, reference));
    for attempt in 0..MAX_ATTEMPTS {
        req.attempt = attempt;
        match judge.complete(&req) {
            Ok(reply) => {
                if let Some(score) = parse_score(&reply) {
                    return ClairOutcome {
                        score: Some(score),
                        attempts: attempt + 1,
                        flagged: false,
                    };
                }
            }
            Err(e) => warn!("judge request `{key}` failed: {e}"),
        }
    }
    ClairOutcome {
        score: None,
        attempts: MAX_ATTEMPTS,
        flagged: true,
    }
}

/// Mean over non-null scores.
pub fn aggregate(outcomes: &[ClairOutcome]) -> Option<f64> {
    let scores: Vec<f64> = outcomes.iter().filter_map(|o| o.score).collect();
    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::FixtureClient;

    #[test]
    fn parses_scores() {
        assert_eq!(parse_score("Score: 85"), Some(0.85));
        assert_eq!(parse_score("I'd say 250, no, 40."), Some(0.4));
        assert_eq!(parse_score("no idea"), None);
    }

    #[test]
    fn unparseable_replies_are_flagged_after_three_attempts() {
        let mut c = FixtureClient::default();
        c.insert("s1", vec!["hmm".into(), "not sure".into(), "pass".into(), "Score: 9".into()]);
        let out = clair_judge("s1", "a", "b", &c);
        assert_eq!(out, ClairOutcome { score: None, attempts: 3, flagged: true });
    }

    #[test]
    fn retry_recovers() {
        let mut c = FixtureClient::default();
        c.insert("s1", vec!["hmm".into(), "Score: 70".into()]);
        let out = clair_judge("s1", "a", "b", &c);
        assert_eq!(out.score, Some(0.7));
        assert_eq!(out.attempts, 2);
    }

    #[test]
    fn aggregate_skips_nulls() {
        let o = |s: Option<f64>| ClairOutcome { score: s, attempts: 1, flagged: s.is_none() };
        assert_eq!(aggregate(&[o(Some(0.5)), o(None), o(Some(1.0))]), Some(0.75));
        assert_eq!(aggregate(&[o(None)]), None);
    }
}
