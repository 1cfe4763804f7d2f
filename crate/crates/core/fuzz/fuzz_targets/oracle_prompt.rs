#![no_main]

use std::sync::{Arc, OnceLock};

use gcot_core::gateway::ChatRequest;
use gcot_core::synth::{generate_world, OraclePolicy, ScriptedOracle, SynthWorld};
use libfuzzer_sys::fuzz_target;

fn world() -> &'static Arc<SynthWorld> {
    static WORLD: OnceLock<Arc<SynthWorld>> = OnceLock::new();
    WORLD.get_or_init(|| Arc::new(generate_world(7, 1, 4).unwrap()))
}

fn oracle() -> &'static ScriptedOracle {
    static ORACLE: OnceLock<ScriptedOracle> = OnceLock::new();
    ORACLE.get_or_init(|| ScriptedOracle::new(world().clone(), OraclePolicy::default()).unwrap())
}

// Prompts arrive with either the world's image or arbitrary bytes.
fuzz_target!(|input: (&str, Option<&[u8]>)| {
    let (prompt, bytes) = input;
    let image = bytes
        .map(<[u8]>::to_vec)
        .unwrap_or_else(|| world().images[0].png.clone());
    let request = ChatRequest::user("base", prompt, Some(("image/png".to_string(), image)));
    let first = oracle().answer(&request).map_err(|e| e.to_string());
    assert_eq!(first, oracle().answer(&request).map_err(|e| e.to_string()));
});
