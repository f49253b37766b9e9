use serde::{Deserialize, Serialize};

use crate::data::{EncodedExample, Vocab};
use crate::model::CausalLm;

use super::{
    evaluate_split, general_proxy_eval, robustness_eval, EfficiencyProbe, EvalError, Perplexity,
    RobustnessResult, SplitEval,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Inputs to [`MetricsReport::evaluate`].
#[derive(Debug, Clone, Copy)]
pub struct EvalSplits<'a> {
    pub unlearn: &'a [EncodedExample],
    pub retention: &'a [EncodedExample],
    pub general: Option<&'a [EncodedExample]>,
    /// Prefix for the robustness probe; skipped when `None`.
    pub prefix: Option<&'a [usize]>,
    pub vocab: Option<&'a Vocab>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRobustness {
    pub unlearn: RobustnessResult,
    pub retention: RobustnessResult,
}

/// Everything measured after one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub method: String,
    pub config: serde_json::Value,
    pub unlearn_success: f64,
    pub retention_success: f64,
    pub avg_success: f64,
    pub unlearn_ppl: Perplexity,
    pub retention_ppl: Perplexity,
    pub unlearn_token_accuracy: f64,
    pub retention_token_accuracy: f64,
    pub general_proxy_acc: Option<f64>,
    /// How perplexity pools log-probabilities over a split.
    pub ppl_pooling: String,
    pub timing: Option<EfficiencyProbe>,
    pub robustness: Option<SplitRobustness>,
    pub unlearn: SplitEval,
    pub retention: SplitEval,
}

impl MetricsReport {
    pub fn evaluate<M: CausalLm + ?Sized>(
        model: &M,
        splits: EvalSplits<'_>,
        method: impl Into<String>,
        config: serde_json::Value,
    ) -> Result<Self, EvalError> {
        let unlearn = evaluate_split(model, splits.unlearn, splits.vocab, "unlearn")?;
        let retention = evaluate_split(model, splits.retention, splits.vocab, "retention")?;
        let general_proxy_acc = splits
            .general
            .map(|g| general_proxy_eval(model, g))
            .transpose()?;
        let robustness = match splits.prefix {
            Some(p) => Some(SplitRobustness {
                unlearn: robustness_eval(model, splits.unlearn, p)?,
                retention: robustness_eval(model, splits.retention, p)?,
            }),
            None => None,
        };
        let mut report = Self {
            schema_version: REPORT_SCHEMA_VERSION,
            method: method.into(),
            config,
            unlearn_success: 0.0,
            retention_success: 0.0,
            avg_success: 0.0,
            unlearn_ppl: unlearn.perplexity,
            retention_ppl: retention.perplexity,
            unlearn_token_accuracy: unlearn.token_accuracy,
            retention_token_accuracy: retention.token_accuracy,
            general_proxy_acc,
            ppl_pooling: "token".into(),
            timing: None,
            robustness,
            unlearn,
            retention,
        };
        report.refresh_headline();
        Ok(report)
    }

    fn refresh_headline(&mut self) {
        self.unlearn_success = self.unlearn.mismatch_rate;
        self.retention_success = self.retention.match_rate;
        self.avg_success = (self.unlearn_success + self.retention_success) / 2.0;
    }

    pub fn with_timing(mut self, probe: Option<EfficiencyProbe>) -> Self {
        self.timing = probe;
        self
    }

    /// Whether recomputing every aggregate from the stored per-example
    /// records reproduces the headline numbers bit for bit.
    pub fn is_consistent(&self) -> bool {
        let mut again = self.clone();
        again.unlearn = SplitEval::from_records(self.unlearn.records.clone());
        again.retention = SplitEval::from_records(self.retention.records.clone());
        again.unlearn_ppl = again.unlearn.perplexity;
        again.retention_ppl = again.retention.perplexity;
        again.unlearn_token_accuracy = again.unlearn.token_accuracy;
        again.retention_token_accuracy = again.retention.token_accuracy;
        again.refresh_headline();
        bits_eq(&again, self)
    }
}

fn bits_eq(a: &MetricsReport, b: &MetricsReport) -> bool {
    let f = |x: f64, y: f64| x.to_bits() == y.to_bits();
    let p = |x: &Perplexity, y: &Perplexity| {
        f(x.mean_bits, y.mean_bits) && x.tokens == y.tokens && x.value.map(f64::to_bits) == y.value.map(f64::to_bits)
    };
    f(a.unlearn_success, b.unlearn_success)
        && f(a.retention_success, b.retention_success)
        && f(a.avg_success, b.avg_success)
        && p(&a.unlearn_ppl, &b.unlearn_ppl)
        && p(&a.retention_ppl, &b.retention_ppl)
        && f(a.unlearn_token_accuracy, b.unlearn_token_accuracy)
        && f(a.retention_token_accuracy, b.retention_token_accuracy)
        && a.unlearn.mismatches == b.unlearn.mismatches
        && a.retention.mismatches == b.retention.mismatches
}
