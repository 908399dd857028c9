//! Runs the engine over real HTTP against stand-in servers that wrap the sim
//! world, and checks the result matches the in-process sim run.

mod support;

use std::sync::Arc;
use std::thread::JoinHandle;

use raise_core::agents::ChatRequest;
use raise_core::backend::{chat_reply_envelope, EditRequest, EditWire, GenerateRequest, ScoreWire};
use raise_core::ops::trace::{MemoryTrace, TraceEvent};
use raise_core::sim::sim_backends;
use raise_core::{Backends, Endpoints, Engine, RunConfig, TerminationKind, WorldSpec};
use support::runs::{fixed_clock, PROMPT};
use tiny_http::{Header, Response, Server};

struct StandIn {
    server: Arc<Server>,
    handle: Option<JoinHandle<()>>,
    base: String,
}

impl Drop for StandIn {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            h.join().ok();
        }
    }
}

fn json_response(body: Vec<u8>, content_type: &str) -> Response<std::io::Cursor<Vec<u8>>> {
    Response::from_data(body).with_header(Header::from_bytes("Content-Type", content_type).unwrap())
}

fn serve(sim: Backends) -> StandIn {
    let server = Arc::new(Server::http("127.0.0.1:0").expect("bind"));
    let base = format!("http://{}", server.server_addr().to_ip().unwrap());
    let worker = Arc::clone(&server);
    let handle = std::thread::spawn(move || {
        for mut req in worker.incoming_requests() {
            let mut body = Vec::new();
            req.as_reader().read_to_end(&mut body).unwrap();
            let reply: Result<(Vec<u8>, &str), String> = match req.url() {
                "/generate" => {
                    let r: GenerateRequest = serde_json::from_slice(&body).unwrap();
                    sim.generator.generate(&r).map(|png| (png, "image/png")).map_err(|e| e.to_string())
                }
                "/edit" => {
                    let w: EditWire = serde_json::from_slice(&body).unwrap();
                    let reference = w.reference_bytes().unwrap();
                    let r = EditRequest { instruction: &w.instruction, seed: w.seed, steps: w.steps, reference: &reference };
                    sim.editor.edit(&r).map(|png| (png, "image/png")).map_err(|e| e.to_string())
                }
                "/score" => {
                    use base64::Engine as _;
                    let w: ScoreWire = serde_json::from_slice(&body).unwrap();
                    let image = base64::engine::general_purpose::STANDARD.decode(&w.image).unwrap();
                    sim.scorer
                        .score(&image, &w.prompt)
                        .map(|s| (serde_json::to_vec(&serde_json::json!({"score": s})).unwrap(), "application/json"))
                        .map_err(|e| e.to_string())
                }
                "/ground" => sim
                    .grounding
                    .ground(&body)
                    .map(|g| (serde_json::to_vec(&g).unwrap(), "application/json"))
                    .map_err(|e| e.to_string()),
                "/chat" => {
                    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
                    let chat = ChatRequest::from_wire(&v).unwrap();
                    sim.chat
                        .complete(&chat)
                        .map(|text| (serde_json::to_vec(&chat_reply_envelope(&text)).unwrap(), "application/json"))
                        .map_err(|e| e.to_string())
                }
                other => Err(format!("no route {other}")),
            };
            let _ = match reply {
                Ok((bytes, ct)) => req.respond(json_response(bytes, ct)),
                Err(e) => req.respond(Response::from_string(e).with_status_code(500)),
            };
        }
    });
    StandIn { server, handle: Some(handle), base }
}

fn endpoints(base: &str) -> Endpoints {
    Endpoints {
        generator: Some(format!("{base}/generate")),
        editor: Some(format!("{base}/edit")),
        agent: Some(format!("{base}/chat")),
        scorer: Some(format!("{base}/score")),
        grounding: Some(format!("{base}/ground")),
    }
}

fn masked_tail(events: &[TraceEvent]) -> Vec<String> {
    // run_start names the backend profile, which differs by construction
    events.iter().skip(1).map(TraceEvent::masked).collect()
}

#[test]
fn http_run_matches_in_process_sim() {
    let world = WorldSpec { m: 5, world_seed: 11, ..WorldSpec::default() };
    let config = RunConfig { run_seed: 21, sim_world: Some(world), force_rounds: Some(4), ..RunConfig::default() };
    let stand_in = serve(sim_backends(&config, PROMPT));

    let http_config = RunConfig { endpoints: endpoints(&stand_in.base), ..config.clone() };
    let mut http_trace = MemoryTrace::memory().with_clock(fixed_clock);
    let http_state = Engine::new(http_config.clone(), Backends::http(&http_config)).run(PROMPT, &mut http_trace);

    let mut sim_trace = MemoryTrace::memory().with_clock(fixed_clock);
    let sim_state = Engine::sim(config, PROMPT).run(PROMPT, &mut sim_trace);

    assert_eq!(http_state.error, None);
    assert_eq!(http_state.termination, sim_state.termination);
    // durations are wall-clock, so compare the serialized records
    let json = |s: &raise_core::RunState| serde_json::to_value(&s.rounds).unwrap();
    assert_eq!(json(&http_state), json(&sim_state));
    assert_eq!(http_state.global_best, sim_state.global_best);
    assert_eq!((http_state.total_samples, http_state.total_agent_calls), (32, 14));
    assert_eq!(masked_tail(http_trace.events()), masked_tail(sim_trace.events()));
    assert_eq!(http_trace.events()[0].payload["backend_profile"], "real");
}

#[test]
fn unreachable_backend_terminates_with_error() {
    // Bind then drop a listener so the port is very likely closed.
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let base = format!("http://127.0.0.1:{port}");
    let config = RunConfig { endpoints: endpoints(&base), timeout_secs: 2, agent_retries: 0, ..RunConfig::default() };
    let mut trace = MemoryTrace::memory();
    let state = Engine::new(config.clone(), Backends::http(&config)).run(PROMPT, &mut trace);
    let t = state.termination.expect("terminated");
    assert_eq!(t.kind, TerminationKind::Error);
    assert_eq!(t.round, 1);
    assert!(state.error.is_some());
    let last = trace.events().last().unwrap();
    assert_eq!(last.payload["termination"]["kind"], "error");
}
