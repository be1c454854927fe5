//! WebAssembly bindings for the demo page. Every export takes a JSON
//! [`ops::DemoRequest`] and returns JSON; the logic lives in [`ops`].

pub mod ops;

use wasm_bindgen::prelude::*;

/// Parse a request, run `op` and serialize its answer; errors become messages.
pub fn call_json<T: serde::Serialize>(
    request: &str,
    op: impl FnOnce(&ops::DemoRequest) -> Result<T, ops::DemoError>,
) -> Result<String, String> {
    let request: ops::DemoRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    let out = op(&request).map_err(|e| e.to_string())?;
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

fn run<T: serde::Serialize>(
    request: &str,
    op: impl FnOnce(&ops::DemoRequest) -> Result<T, ops::DemoError>,
) -> Result<String, JsValue> {
    call_json(request, op).map_err(|e| JsValue::from_str(&e))
}

/// Review probabilities and selections for one simulated instance.
#[wasm_bindgen]
pub fn sampling_transform(request: &str) -> Result<String, JsValue> {
    run(request, ops::sampling_transform)
}

/// Quality gain against budget, with its area.
#[wasm_bindgen]
pub fn budget_curve(request: &str) -> Result<String, JsValue> {
    run(request, ops::budget_curve)
}

/// Distribution of the importance-weighted loss over review draws.
#[wasm_bindgen]
pub fn loss_distribution(request: &str) -> Result<String, JsValue> {
    run(request, ops::loss_distribution)
}
