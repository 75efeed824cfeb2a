//! Websocket session service: one session per connection.
//!
//! Clients connect to `/ws`, send `session.start`, then stream signal samples
//! and user input. Every engine action goes back as a wire message, and the
//! transcript is written to `<dir>/<session_id>.jsonl` when the connection
//! ends.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use serde_json::json;
use tokio::net::TcpListener;
use tokio::time::Instant;

use crate::config::SessionConfig;
use crate::detect::{FuseOutcome, MultiSourceDetector, ReactionFuser};
use crate::dialog::DialogClient;
use crate::phase::{Action, DeadlineKind, EventKind, SessionEvent};
use crate::session::{resolve_dialog, Engine};
use crate::signal::Ingestor;
use crate::transcript::transcript_path;
use crate::wire::{outbound, parse_inbound, reaction_message, Inbound, WireMessage};

pub struct ServiceState {
    pub config: SessionConfig,
    pub transcript_dir: PathBuf,
    pub client: Option<Arc<dyn DialogClient>>,
    next_id: AtomicU64,
}

impl ServiceState {
    pub fn new(
        config: SessionConfig,
        transcript_dir: PathBuf,
        client: Option<Arc<dyn DialogClient>>,
    ) -> Arc<Self> {
        Arc::new(Self {
            config,
            transcript_dir,
            client,
            next_id: AtomicU64::new(1),
        })
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/ws", get(upgrade))
        .route("/health", get(|| async { "ok" }))
        .with_state(state)
}

pub async fn serve(listener: TcpListener, state: Arc<ServiceState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

async fn upgrade(ws: WebSocketUpgrade, State(state): State<Arc<ServiceState>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| run_connection(socket, state))
}

struct Live {
    session_id: String,
    engine: Engine,
    ingestor: Ingestor,
    detector: MultiSourceDetector,
    fuser: ReactionFuser,
    /// wall clock instant matching client time `t0`
    origin: (Instant, u64),
    ended: bool,
}

impl Live {
    /// Session time for a message the client did not stamp.
    fn now_ms(&self) -> u64 {
        let (wall0, t0) = self.origin;
        let elapsed = u64::try_from(wall0.elapsed().as_millis()).unwrap_or(u64::MAX);
        t0.saturating_add(elapsed).max(self.engine.state().last_event_ms)
    }

    fn wall_deadline(&self) -> Option<(Instant, SessionEvent)> {
        let d = self.engine.state().deadline.as_ref()?;
        // live presentations end when the client says so
        if matches!(d.kind, DeadlineKind::PresentationEnd(_)) {
            return None;
        }
        let (wall0, t0) = self.origin;
        let at = wall0 + Duration::from_millis(d.at_ms.saturating_sub(t0));
        Some((at, d.event()))
    }
}

async fn send(socket: &mut WebSocket, msg: &WireMessage) -> bool {
    let text = serde_json::to_string(msg).expect("wire messages serialize");
    socket.send(Message::Text(text.into())).await.is_ok()
}

async fn run_connection(mut socket: WebSocket, state: Arc<ServiceState>) {
    let mut live: Option<Live> = None;
    loop {
        let deadline = live.as_ref().and_then(Live::wall_deadline);
        let incoming = match deadline {
            Some((at, event)) => {
                tokio::select! {
                    m = socket.recv() => m,
                    _ = tokio::time::sleep_until(at) => {
                        if let Some(l) = live.as_mut() {
                            let event = SessionEvent::new(
                                event.timestamp_ms.max(l.engine.state().last_event_ms),
                                event.kind,
                            );
                            if !apply(&mut socket, l, &state, event).await {
                                break;
                            }
                            if l.ended {
                                break;
                            }
                        }
                        continue;
                    }
                }
            }
            None => socket.recv().await,
        };
        let text = match incoming {
            Some(Ok(Message::Text(t))) => t.to_string(),
            Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
            Some(Ok(_)) => continue,
        };
        let sid = live.as_ref().map_or("", |l| l.session_id.as_str()).to_owned();
        let parsed = serde_json::from_str::<serde_json::Value>(&text).and_then(|v| {
            let stamped = v.get("timestamp_ms").is_some();
            serde_json::from_value::<WireMessage>(v).map(|m| (m, stamped))
        });
        let msg = match parsed {
            Ok((mut m, stamped)) => {
                if !stamped {
                    if let Some(l) = &live {
                        m.timestamp_ms = l.now_ms();
                    }
                }
                m
            }
            Err(e) => {
                if !send(&mut socket, &WireMessage::error(&sid, 0, "bad_json", e)).await {
                    break;
                }
                continue;
            }
        };
        let inbound = match parse_inbound(&msg.kind, &msg.payload) {
            Ok(i) => i,
            Err(e) => {
                if !send(&mut socket, &WireMessage::error(&sid, msg.timestamp_ms, e.code(), &e)).await {
                    break;
                }
                continue;
            }
        };
        let ok = match (inbound, live.as_mut()) {
            (Inbound::SessionStart, None) => {
                let session_id = if msg.session_id.is_empty() {
                    format!("session-{}", state.next_id.fetch_add(1, Ordering::Relaxed))
                } else {
                    msg.session_id.clone()
                };
                let settings = match state.config.phase_settings(state.client.is_some()) {
                    Ok(s) => s,
                    Err(e) => {
                        send(&mut socket, &WireMessage::error(&session_id, msg.timestamp_ms, "config", e)).await;
                        break;
                    }
                };
                let l = live.insert(Live {
                    engine: Engine::new(settings),
                    ingestor: Ingestor::new(&state.config.sources),
                    detector: MultiSourceDetector::new(state.config.detector.clone()),
                    fuser: ReactionFuser::new(&state.config.detector),
                    origin: (Instant::now(), msg.timestamp_ms),
                    ended: false,
                    session_id: session_id.clone(),
                });
                let ack = WireMessage::new("ack", &session_id, msg.timestamp_ms, json!({"for": "session.start"}));
                send(&mut socket, &ack).await
                    && apply(
                        &mut socket,
                        l,
                        &state,
                        SessionEvent::new(msg.timestamp_ms, EventKind::SessionStarted),
                    )
                    .await
            }
            (Inbound::SessionStart, Some(l)) => {
                let err = WireMessage::error(&l.session_id, msg.timestamp_ms, "already_started", "session already started");
                send(&mut socket, &err).await
            }
            (_, None) => {
                let err = WireMessage::error("", msg.timestamp_ms, "no_session", "send session.start first");
                send(&mut socket, &err).await
            }
            (Inbound::Sample { source_id, value }, Some(l)) => {
                match l.ingestor.ingest(&source_id, msg.timestamp_ms, value) {
                    Err(e) => {
                        let err = WireMessage::error(&l.session_id, msg.timestamp_ms, "sample_rejected", e);
                        send(&mut socket, &err).await
                    }
                    Ok(sample) => match l.detector.observe(&sample) {
                        None => true,
                        Some(anomaly) => match l.fuser.push(anomaly, l.engine.state()) {
                            FuseOutcome::Opened(reaction) => {
                                send(&mut socket, &reaction_message(&l.session_id, &reaction)).await
                                    && apply(
                                        &mut socket,
                                        l,
                                        &state,
                                        SessionEvent::new(reaction.timestamp_ms, EventKind::Reaction { reaction }),
                                    )
                                    .await
                            }
                            FuseOutcome::Joined | FuseOutcome::Suppressed => true,
                        },
                    },
                }
            }
            (Inbound::Event(kind), Some(l)) => {
                apply(&mut socket, l, &state, SessionEvent::new(msg.timestamp_ms, kind)).await
            }
        };
        if !ok || live.as_ref().is_some_and(|l| l.ended) {
            break;
        }
    }
    if let Some(l) = live {
        let path = transcript_path(&state.transcript_dir, &l.session_id);
        if let Err(e) = l.engine.transcript().persist(&path) {
            tracing::warn!("could not write transcript: {e}");
        }
    }
    let _ = socket.send(Message::Close(None)).await;
}

/// Steps the engine and forwards its actions; dialog requests are answered
/// on a blocking thread.
async fn apply(socket: &mut WebSocket, live: &mut Live, state: &ServiceState, event: SessionEvent) -> bool {
    let mut pending = vec![event];
    while let Some(event) = pending.pop() {
        let actions = live.engine.apply(&event);
        for action in &actions {
            match action {
                Action::RequestDialog { request } => {
                    let client = state.client.clone();
                    let request = request.clone();
                    let outcome = tokio::task::spawn_blocking(move || resolve_dialog(client.as_deref(), &request))
                        .await
                        .unwrap_or_else(|e| crate::phase::DialogOutcome::Failure(e.to_string()));
                    pending.push(SessionEvent::new(
                        live.engine.state().last_event_ms,
                        EventKind::DialogServiceReply { outcome },
                    ));
                }
                Action::EndSession { .. } => live.ended = true,
                _ => {}
            }
            if let Some(msg) = outbound(&live.session_id, event.timestamp_ms, action) {
                if !send(socket, &msg).await {
                    return false;
                }
            }
        }
    }
    true
}
