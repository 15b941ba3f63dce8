//! CSV and JSON renderings of histories, metrics and ablation tables. All
//! numbers carry 6 significant digits.

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::train::{AblationTable, History};

/// `%g`-style formatting with 6 significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let exp = format!("{x:.5e}");
    let (mantissa, e) = exp.split_once('e').expect("exponent present");
    let e: i32 = e.parse().expect("integer exponent");
    if (-4..6).contains(&e) {
        let s = format!("{x:.*}", (5 - e).max(0) as usize);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let m = if mantissa.contains('.') { mantissa.trim_end_matches('0').trim_end_matches('.') } else { mantissa };
        format!("{m}e{}{:02}", if e < 0 { '-' } else { '+' }, e.abs())
    }
}

/// Rounds to 6 significant digits (non-finite values pass through).
pub fn round6(x: f64) -> f64 {
    if x.is_finite() {
        sig6(x).parse().unwrap_or(x)
    } else {
        x
    }
}

fn json_num(x: f64) -> Value {
    serde_json::Number::from_f64(round6(x)).map(Value::Number).unwrap_or(Value::Null)
}

/// Recursively rounds every float in a JSON tree.
fn rounded(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => json_num(n.as_f64().unwrap_or(f64::NAN)),
        Value::Array(a) => Value::Array(a.into_iter().map(rounded).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, rounded(v))).collect()),
        other => other,
    }
}

pub fn to_json<S: Serialize>(value: &S) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Format(format!("cannot encode JSON: {e}")))?;
    let mut s = serde_json::to_string_pretty(&rounded(v)).map_err(|e| Error::Format(format!("cannot encode JSON: {e}")))?;
    s.push('\n');
    Ok(s)
}

/// `epoch,lr,train_loss,test_acc`
pub fn history_csv(h: &History) -> String {
    let mut out = String::from("epoch,lr,train_loss,test_acc\n");
    for r in &h.epochs {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, sig6(r.lr), sig6(r.train_loss), sig6(r.test_acc)));
    }
    out
}

/// `name,acc,precision,recall,f1`
pub fn ablation_csv(t: &AblationTable) -> String {
    let mut out = String::from("name,acc,precision,recall,f1\n");
    for r in &t.rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.name, sig6(r.accuracy), sig6(r.precision), sig6(r.recall), sig6(r.f1)));
    }
    out
}

/// Metrics document with the confusion matrix as a nested array.
pub fn metrics_json(m: &MetricsReport, class_names: &[String]) -> Result<String> {
    let per_class: Vec<Value> = m
        .per_class
        .iter()
        .zip(class_names)
        .map(|(c, name)| {
            json!({
                "class": name,
                "precision": c.prf.precision,
                "recall": c.prf.recall,
                "f1": c.prf.f1,
                "support": c.support,
            })
        })
        .collect();
    to_json(&json!({
        "class_names": class_names,
        "total": m.total,
        "accuracy": m.accuracy,
        "confusion": m.confusion,
        "per_class": per_class,
        "macro": m.macro_avg,
        "micro": m.micro_avg,
    }))
}

/// Per-class metrics as `class,precision,recall,f1,support`.
pub fn metrics_csv(m: &MetricsReport, class_names: &[String]) -> String {
    let mut out = String::from("class,precision,recall,f1,support\n");
    for (c, name) in m.per_class.iter().zip(class_names) {
        out.push_str(&format!("{name},{},{},{},{}\n", sig6(c.prf.precision), sig6(c.prf.recall), sig6(c.prf.f1), c.support));
    }
    out
}
