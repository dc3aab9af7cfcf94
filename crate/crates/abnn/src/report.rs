//! Report structures, the CSV table, and validation of emitted reports
//! against the published JSON schema.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// One row of the results table. Column order is fixed:
/// `method, clean_acc, pgd_acc, roa_acc, passes_per_step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    pub clean_acc: f64,
    pub pgd_acc: f64,
    pub roa_acc: f64,
    pub passes_per_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostVerdict {
    pub method: String,
    pub steps: u64,
    pub measured_passes: u64,
    pub predicted_per_step: u64,
    pub exact: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub methods: Vec<MethodMetrics>,
    pub cost_verdicts: Vec<CostVerdict>,
    pub substitute_digest_before: String,
    pub substitute_digest_after: String,
    /// Defended model's PGD accuracy when the adversary holds the
    /// substitute statistics constant instead of differentiating through
    /// them.
    pub abnn_pgd_acc_target_only: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostTable {
    pub t_max: usize,
    pub abnn: u64,
    pub pgd_at: u64,
    pub oudefend: u64,
    pub no_defense: u64,
    pub ratio_pgd_at_over_abnn: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub config: Value,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedReport>,
    /// Per-method medians over seeds.
    pub median: Vec<MethodMetrics>,
    pub cost_model: CostTable,
    pub all_cost_checks_passed: bool,
}

pub const CSV_HEADER: &str = "method,clean_acc,pgd_acc,roa_acc,passes_per_step";

/// Render rows in the fixed column order with deterministic formatting.
pub fn results_csv(rows: &[MethodMetrics]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{}\n",
            r.method, r.clean_acc, r.pgd_acc, r.roa_acc, r.passes_per_step
        ));
    }
    out
}

pub fn median_f64(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite metrics"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median metrics per method, seeds merged in sorted order.
pub fn median_metrics(per_seed: &[SeedReport]) -> Vec<MethodMetrics> {
    let Some(first) = per_seed.first() else { return Vec::new() };
    first
        .methods
        .iter()
        .enumerate()
        .map(|(mi, proto)| {
            let collect = |f: &dyn Fn(&MethodMetrics) -> f64| {
                let mut v: Vec<f64> = per_seed.iter().map(|s| f(&s.methods[mi])).collect();
                median_f64(&mut v)
            };
            MethodMetrics {
                method: proto.method.clone(),
                clean_acc: collect(&|m| m.clean_acc),
                pgd_acc: collect(&|m| m.pgd_acc),
                roa_acc: collect(&|m| m.roa_acc),
                passes_per_step: proto.passes_per_step,
            }
        })
        .collect()
}

/// The schema file shipped with the crate (also on disk under `schemas/`).
pub fn report_schema() -> Value {
    serde_json::from_str(include_str!("../schemas/report.schema.json"))
        .expect("bundled schema is valid JSON")
}

/// Validate a value against the subset of JSON Schema the report schema
/// uses: `type`, `properties`, `required`, `additionalProperties`, `items`,
/// `enum`, and local `$ref`.
pub fn validate_schema(value: &Value, schema: &Value, root: &Value, path: &str) -> Result<(), String> {
    if let Some(r) = schema.get("$ref").and_then(Value::as_str) {
        let target = resolve_ref(root, r).ok_or_else(|| format!("{path}: bad $ref {r}"))?;
        return validate_schema(value, target, root, path);
    }
    if let Some(allowed) = schema.get("enum").and_then(Value::as_array) {
        if !allowed.contains(value) {
            return Err(format!("{path}: {value} not in enum {allowed:?}"));
        }
    }
    if let Some(ty) = schema.get("type").and_then(Value::as_str) {
        let ok = match ty {
            "object" => value.is_object(),
            "array" => value.is_array(),
            "string" => value.is_string(),
            "integer" => value.is_i64() || value.is_u64(),
            "number" => value.is_number(),
            "boolean" => value.is_boolean(),
            "null" => value.is_null(),
            other => return Err(format!("{path}: unsupported schema type {other}")),
        };
        if !ok {
            return Err(format!("{path}: expected {ty}, got {value}"));
        }
    }
    if let Some(obj) = value.as_object() {
        if let Some(required) = schema.get("required").and_then(Value::as_array) {
            for key in required.iter().filter_map(Value::as_str) {
                if !obj.contains_key(key) {
                    return Err(format!("{path}: missing required key {key}"));
                }
            }
        }
        let props = schema.get("properties").and_then(Value::as_object);
        let closed = schema.get("additionalProperties") == Some(&Value::Bool(false));
        for (k, v) in obj {
            match props.and_then(|p| p.get(k)) {
                Some(sub) => validate_schema(v, sub, root, &format!("{path}/{k}"))?,
                None if closed => return Err(format!("{path}: unexpected key {k}")),
                None => {}
            }
        }
    }
    if let (Some(arr), Some(items)) = (value.as_array(), schema.get("items")) {
        for (i, v) in arr.iter().enumerate() {
            validate_schema(v, items, root, &format!("{path}[{i}]"))?;
        }
    }
    Ok(())
}

fn resolve_ref<'a>(root: &'a Value, reference: &str) -> Option<&'a Value> {
    let path = reference.strip_prefix("#/")?;
    let mut cur = root;
    for part in path.split('/') {
        cur = cur.get(part)?;
    }
    Some(cur)
}

/// Validate a report (as JSON) against the published schema.
pub fn validate_report_json(report: &Value) -> Result<(), String> {
    let schema = report_schema();
    validate_schema(report, &schema, &schema, "report")
}

pub fn write_json(path: &Path, value: &impl Serialize) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(method: &str, clean: f64, pgd: f64, roa: f64, passes: u64) -> MethodMetrics {
        MethodMetrics {
            method: method.into(),
            clean_acc: clean,
            pgd_acc: pgd,
            roa_acc: roa,
            passes_per_step: passes,
        }
    }

    fn seed_report(seed: u64, clean: f64) -> SeedReport {
        SeedReport {
            seed,
            methods: vec![
                metrics("no-defense", clean, 0.0, 0.1, 2),
                metrics("pgd-at", clean - 0.1, 0.5, 0.2, 12),
                metrics("abnn", clean - 0.05, 0.3, 0.4, 3),
            ],
            cost_verdicts: vec![CostVerdict {
                method: "abnn".into(),
                steps: 10,
                measured_passes: 30,
                predicted_per_step: 3,
                exact: true,
            }],
            substitute_digest_before: "aa".into(),
            substitute_digest_after: "aa".into(),
            abnn_pgd_acc_target_only: 0.35,
        }
    }

    fn full_report() -> Report {
        let per_seed = vec![seed_report(1, 0.9), seed_report(2, 1.0), seed_report(3, 0.8)];
        let median = median_metrics(&per_seed);
        Report {
            schema_version: 1,
            config: serde_json::json!({"task": "image-toy"}),
            seeds: vec![1, 2, 3],
            per_seed,
            median,
            cost_model: CostTable {
                t_max: 5,
                abnn: 3,
                pgd_at: 12,
                oudefend: 24,
                no_defense: 2,
                ratio_pgd_at_over_abnn: 4.0,
            },
            all_cost_checks_passed: true,
        }
    }

    #[test]
    fn csv_has_fixed_column_order() {
        let rows = vec![metrics("abnn", 0.875, 0.315, 0.244, 3)];
        let csv = results_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "method,clean_acc,pgd_acc,roa_acc,passes_per_step");
        assert_eq!(lines.next().unwrap(), "abnn,0.875000,0.315000,0.244000,3");
    }

    #[test]
    fn median_is_the_middle_seed() {
        let per_seed = vec![seed_report(1, 0.9), seed_report(2, 1.0), seed_report(3, 0.8)];
        let med = median_metrics(&per_seed);
        assert!((med[0].clean_acc - 0.9).abs() < 1e-12);
    }

    #[test]
    fn generated_report_validates_against_schema() {
        let report = full_report();
        let json = serde_json::to_value(&report).unwrap();
        validate_report_json(&json).unwrap();
    }

    #[test]
    fn schema_rejects_missing_and_unknown_fields() {
        let report = full_report();
        let mut json = serde_json::to_value(&report).unwrap();
        json.as_object_mut().unwrap().remove("median");
        assert!(validate_report_json(&json).is_err());

        let mut json = serde_json::to_value(&report).unwrap();
        json["surprise"] = serde_json::json!(1);
        assert!(validate_report_json(&json).is_err());

        let mut json = serde_json::to_value(&report).unwrap();
        json["median"][0]["method"] = serde_json::json!("unheard-of");
        assert!(validate_report_json(&json).is_err(), "enum violation must fail");
    }
}
