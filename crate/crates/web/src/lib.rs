//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export returns a JSON string. The `*_json` functions hold the logic
//! so they can be tested natively.

use pmfs_core::cost::{check_flops, check_params, count_flops, count_params, flop_anchor, param_anchor};
use pmfs_core::cost::{pmfs_attention_macs, quadratic_attention_macs};
use pmfs_core::metrics::{evaluate, LabelVolume};
use pmfs_core::model::{PmfsNet, ScalingConfig};
use pmfs_core::synthetic::{generate, SyntheticSpec};
use pmfs_core::{Error, Result};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|t| t.trim().parse::<usize>().ok().filter(|&v| v > 0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Invalid(format!("malformed shape `{s}`")))
}

/// Parameter and MAC totals of a preset (`tiny-3d`, ...) or an inline model
/// TOML. An empty `input` means the published input size when there is one.
pub fn cost_json(config: &str, input: &str) -> Result<Value> {
    let cfg = if config.contains('=') { ScalingConfig::from_toml(config)? } else { ScalingConfig::resolve(config)? };
    let net = PmfsNet::build(&cfg, 0)?;
    let params = count_params(&net)?.total_params();
    let anchor = cfg.preset_kind().and_then(|p| flop_anchor(p, cfg.dims));
    let input = match (input.trim(), &anchor) {
        ("", Some((_, shape))) => shape.clone(),
        ("", None) => cfg.input_shape.clone(),
        (s, _) => parse_shape(s)?,
    };
    let report = count_flops(&net, &input)?;
    let stages: Vec<Value> = ["enc", "skip", "pmfs", "dec", "head"]
        .iter()
        .map(|prefix| {
            let (p, m) = report
                .entries
                .iter()
                .filter(|e| e.name.starts_with(prefix))
                .fold((0, 0), |(p, m), e| (p + e.params, m + e.macs));
            json!({ "part": prefix, "params": p, "macs": m })
        })
        .collect();
    let param_target = cfg.preset_kind().and_then(|p| param_anchor(p, cfg.dims)).map(|t| {
        let c = check_params(params as f64 / 1e6, t);
        json!({ "target_m": t, "ratio": c.ratio, "pass": c.pass })
    });
    let flop_target = anchor.filter(|(_, s)| *s == input).map(|(t, _)| {
        let c = check_flops(report.total_macs() as f64 / 1e9, t);
        json!({ "target_g": t, "ratio": c.ratio, "doubled": c.doubled, "pass": c.pass })
    });
    Ok(json!({
        "name": cfg.name,
        "dims": cfg.dims,
        "input": input,
        "params": params,
        "macs": report.total_macs(),
        "attention_macs": report.attention_macs(),
        "parts": stages,
        "param_target": param_target,
        "flop_target": flop_target,
    }))
}

/// Attention-product MACs of the block and of full self-attention for
/// bottlenecks of `positions`, with `channels` fused channels.
pub fn scaling_json(channels: usize, positions: &[usize]) -> Result<Value> {
    if channels == 0 || positions.is_empty() || positions.contains(&0) {
        return Err(Error::Invalid("channels and positions must be positive".into()));
    }
    let rows: Vec<Value> = positions
        .iter()
        .map(|&n| json!({ "positions": n, "pmfs": pmfs_attention_macs(channels, n), "full": quadratic_attention_macs(channels, n) }))
        .collect();
    Ok(Value::Array(rows))
}

/// Metrics of a painted prediction against a painted reference, both
/// `width × height` labels with 0 as background.
pub fn metrics_json(width: usize, height: usize, pred: &[u8], gt: &[u8], theta: f64) -> Result<Value> {
    let p = LabelVolume::unit(vec![height, width], pred.to_vec())?;
    let g = LabelVolume::unit(vec![height, width], gt.to_vec())?;
    let classes = (p.max_label().max(g.max_label()) as usize + 1).max(2);
    let m = evaluate(&p, &g, classes, theta)?;
    Ok(json!({
        "classes": classes,
        "dsc": m.dsc, "iou": m.iou, "miou": m.miou, "acc": m.acc,
        "hd": m.hd, "assd": m.assd, "so": m.so, "theta": m.theta,
    }))
}

/// One synthetic blob mask, row-major `width × height`.
pub fn blob_mask(width: usize, height: usize, seed: u64) -> Result<Vec<u8>> {
    let spec = SyntheticSpec { extent: vec![height, width], ..SyntheticSpec::blobs_2d(1, width, seed) };
    Ok(generate(&spec)?.remove(0).mask)
}

fn js<T: ToString>(r: Result<T>) -> std::result::Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn cost(config: &str, input: &str) -> std::result::Result<String, JsError> {
    js(cost_json(config, input))
}

/// `positions` is a comma-separated list.
#[wasm_bindgen]
pub fn scaling(channels: usize, positions: &str) -> std::result::Result<String, JsError> {
    let parsed = positions
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| JsError::new(&format!("positions: {e}")));
    js(scaling_json(channels, &parsed?))
}

#[wasm_bindgen]
pub fn metrics(width: usize, height: usize, pred: &[u8], gt: &[u8], theta: f64) -> std::result::Result<String, JsError> {
    js(metrics_json(width, height, pred, gt, theta))
}

#[wasm_bindgen]
pub fn blob(width: usize, height: usize, seed: u32) -> std::result::Result<Vec<u8>, JsError> {
    blob_mask(width, height, seed as u64).map_err(|e| JsError::new(&e.to_string()))
}
