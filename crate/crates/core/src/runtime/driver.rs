//! Distributed execution of the synchronous round loop.
//!
//! The server and clients here speak only through [`Connection`]s — the
//! server never touches shard indices and the clients never see each other.
//! Because all randomness is derived from `(seed, round, client)` streams,
//! a distributed run must produce the *same canonical metrics transcript and
//! final global parameters* as `fed::run_training` with the same config: the
//! working precision is `f32`, the wire stores `f32`, so encoding is loss:less
//! and bit-exactness survives the network.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, UnlabeledView};
use crate::error::{Error, Result};
use crate::eval::{eval_subsets, knn_indicator};
use crate::fed::{
    client_local_knn, knn_due, sample_clients, weighted_aggregate, ClientCtx, ClientSslOpt,
    ClientUpdate, PersonalState, RoundConfig, RoundMetrics, RoundObserver, TrainOutput,
};
use crate::model::ArchConfig;
use crate::params::ParameterSet;
use crate::partition::ClientShard;
use crate::ssl::AugmentationPolicy;
use crate::Scalar;

use super::message::{decode_message, encode_message, Message};
use super::transport::{accept_clients, loopback_pair, Connection, TcpConn};

/// How long each side waits for the next frame before declaring the peer
/// lost. Local rounds are seconds at most; anything beyond this is a wedged
/// peer, not a slow one.
pub const DEFAULT_RECV_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    /// In-process channels; frames still pass through the codec.
    Loopback,
    /// Real sockets on 127.0.0.1 with an ephemeral port.
    Tcp,
}

/// A registered client connection on the server side.
pub struct ClientHandle {
    pub client_id: u32,
    pub conn: Box<dyn Connection>,
}

/// Consume the `Hello` on each connection and return handles sorted by
/// client id. Ids must be unique and within `expected`.
pub fn register_clients(
    conns: Vec<Box<dyn Connection>>,
    expected: usize,
    timeout: Duration,
) -> Result<Vec<ClientHandle>> {
    let mut handles = Vec::with_capacity(conns.len());
    for mut conn in conns {
        let frame = conn.recv(timeout)?;
        match decode_message::<f32>(&frame)? {
            Message::Hello { client_id } => {
                if client_id as usize >= expected {
                    return Err(Error::Transport(format!(
                        "hello from client {client_id} but only {expected} clients exist"
                    )));
                }
                handles.push(ClientHandle { client_id, conn });
            }
            other => {
                return Err(Error::Transport(format!(
                    "expected hello, got {:?} frame",
                    kind_name(&other)
                )))
            }
        }
    }
    handles.sort_by_key(|h| h.client_id);
    for pair in handles.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(Error::Transport(format!(
                "duplicate hello from client {}",
                pair[0].client_id
            )));
        }
    }
    if handles.len() != expected {
        return Err(Error::Transport(format!(
            "registered {} clients, expected {expected}",
            handles.len()
        )));
    }
    Ok(handles)
}

fn kind_name<F>(msg: &Message<F>) -> &'static str {
    match msg {
        Message::Hello { .. } => "hello",
        Message::Broadcast { .. } => "broadcast",
        Message::Update { .. } => "update",
        Message::Shutdown => "shutdown",
    }
}

/// Server half of the round loop. `personalized_eval` mirrors the method's
/// flag: when set, round KNN is the mean of the accuracies clients report;
/// otherwise the server measures the aggregated model itself.
#[allow(clippy::too_many_arguments)]
pub fn serve_rounds<F: Scalar>(
    clients: &mut [ClientHandle],
    personalized_eval: bool,
    arch: &ArchConfig,
    init: ParameterSet<F>,
    dataset: &Dataset,
    cfg: &RoundConfig,
    observer: &mut dyn RoundObserver<F>,
    recv_timeout: Duration,
) -> Result<(ParameterSet<F>, Vec<RoundMetrics>)> {
    cfg.validate()?;
    if clients.len() != cfg.total_clients {
        return Err(Error::InvalidArgument(format!(
            "config declares {} clients but {} are connected",
            cfg.total_clients,
            clients.len()
        )));
    }
    let (encoder, _) = arch.build()?;
    let mut global = init;
    let mut history = Vec::with_capacity(cfg.rounds as usize);

    for round in 0..cfg.rounds {
        let start = Instant::now();
        let participants = sample_clients(cfg, round);

        for &client_id in &participants {
            let frame = encode_message(&Message::Broadcast {
                round,
                params: global.clone(),
            });
            clients[client_id].conn.send(&frame).map_err(|e| {
                Error::Transport(format!("round {round}: broadcast to client {client_id}: {e}"))
            })?;
        }

        let mut updates = Vec::with_capacity(participants.len());
        let mut loss_weighted = 0.0f64;
        let mut loss_samples = 0usize;
        let mut reported_knn = Vec::new();
        for &client_id in &participants {
            let frame = clients[client_id].conn.recv(recv_timeout).map_err(|e| match e {
                Error::Timeout(_) => Error::Timeout(format!(
                    "update from client {client_id} in round {round}"
                )),
                other => other,
            })?;
            match decode_message::<F>(&frame)? {
                Message::Update {
                    round: r,
                    client_id: sender,
                    num_samples,
                    mean_loss,
                    local_knn,
                    delta,
                } => {
                    if r != round || sender as usize != client_id {
                        return Err(Error::Transport(format!(
                            "round {round}: expected update from client {client_id}, \
                             got round {r} from {sender}"
                        )));
                    }
                    loss_weighted += mean_loss * num_samples as f64;
                    loss_samples += num_samples as usize;
                    if let Some(k) = local_knn {
                        reported_knn.push(k);
                    }
                    updates.push(ClientUpdate {
                        client_id,
                        delta,
                        num_samples: num_samples as usize,
                    });
                }
                other => {
                    return Err(Error::Transport(format!(
                        "round {round}: expected update, got {} frame",
                        kind_name(&other)
                    )))
                }
            }
        }
        global = weighted_aggregate(&global, &updates)?;

        let knn_accuracy = if knn_due(&cfg.eval, round, cfg.rounds) {
            if personalized_eval {
                if reported_knn.is_empty() {
                    return Err(Error::Empty(
                        "personalized knn: no participant has a local test set".into(),
                    ));
                }
                Some(reported_knn.iter().sum::<f64>() / reported_knn.len() as f64)
            } else {
                let (bank, queries) = eval_subsets(
                    dataset,
                    cfg.eval.bank_size,
                    cfg.eval.query_size,
                    cfg.seed,
                    round,
                );
                Some(knn_indicator(
                    &encoder,
                    &global,
                    dataset,
                    &bank,
                    &queries,
                    &cfg.eval.knn,
                )?)
            }
        } else {
            None
        };

        let metrics = RoundMetrics {
            round,
            participants,
            mean_train_loss: loss_weighted / loss_samples.max(1) as f64,
            knn_accuracy,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        observer.on_round(&global, &metrics)?;
        history.push(metrics);
    }
    Ok((global, history))
}

/// Client half: handshake, then serve broadcasts until shutdown. Returns the
/// client's final personal state, which never crosses the wire.
#[allow(clippy::too_many_arguments)]
pub fn client_loop<F: Scalar>(
    conn: &mut dyn Connection,
    client_id: u32,
    method: &dyn ClientSslOpt<F>,
    arch: &ArchConfig,
    dataset: &Dataset,
    shard: &ClientShard,
    policy: &AugmentationPolicy,
    cfg: &RoundConfig,
    recv_timeout: Duration,
) -> Result<Option<PersonalState<F>>> {
    let (encoder, predictor) = arch.build()?;
    conn.send(&encode_message::<f32>(&Message::Hello { client_id }))?;
    let mut personal: Option<PersonalState<F>> = None;
    loop {
        let frame = conn.recv(recv_timeout)?;
        match decode_message::<F>(&frame)? {
            Message::Broadcast { round, params } => {
                let ctx = ClientCtx {
                    client_id: client_id as usize,
                    round,
                    lr: cfg.schedule.lr_at(cfg.lr, round, cfg.rounds),
                    cfg,
                    encoder: &encoder,
                    predictor: &predictor,
                    data: UnlabeledView::new(dataset, &shard.train_indices),
                    policy,
                };
                let outcome = method
                    .local_update(&ctx, &params, personal.take())
                    .map_err(|e| e.in_client(round, client_id as usize))?;
                personal = outcome.personal;

                let local_knn = if method.personalized_eval()
                    && knn_due(&cfg.eval, round, cfg.rounds)
                {
                    let eval_params = personal.as_ref().map(|s| &s.params).unwrap_or(&params);
                    client_local_knn(&encoder, eval_params, dataset, shard, &cfg.eval)?
                } else {
                    None
                };

                conn.send(&encode_message(&Message::Update {
                    round,
                    client_id,
                    num_samples: outcome.update.num_samples as u64,
                    mean_loss: outcome.mean_loss,
                    local_knn,
                    delta: outcome.update.delta,
                }))?;
            }
            Message::Shutdown => return Ok(personal),
            other => {
                return Err(Error::Transport(format!(
                    "client {client_id}: unexpected {} frame",
                    kind_name(&other)
                )))
            }
        }
    }
}

/// Run federated training with a real server/client split inside one
/// process: one thread per client plus the server on the calling thread,
/// wired through the chosen transport. Produces the same output as
/// `fed::run_training` for `f32` working precision.
#[allow(clippy::too_many_arguments)]
pub fn run_training_distributed<F: Scalar>(
    method: &dyn ClientSslOpt<F>,
    arch: &ArchConfig,
    init: ParameterSet<F>,
    dataset: &Dataset,
    shards: &[ClientShard],
    policy: &AugmentationPolicy,
    cfg: &RoundConfig,
    transport: TransportKind,
    observer: &mut dyn RoundObserver<F>,
) -> Result<TrainOutput<F>> {
    cfg.validate()?;
    if shards.len() != cfg.total_clients {
        return Err(Error::InvalidArgument(format!(
            "config declares {} clients but {} shards were supplied",
            cfg.total_clients,
            shards.len()
        )));
    }

    // Build one (server-side, client-side) connection pair per client.
    let mut server_sides: Vec<Box<dyn Connection>> = Vec::with_capacity(shards.len());
    let mut client_sides: Vec<Box<dyn Connection>> = Vec::with_capacity(shards.len());
    match transport {
        TransportKind::Loopback => {
            for _ in 0..shards.len() {
                let (server, client) = loopback_pair();
                server_sides.push(Box::new(server));
                client_sides.push(Box::new(client));
            }
        }
        TransportKind::Tcp => {
            let listener = std::net::TcpListener::bind("127.0.0.1:0")
                .map_err(|e| Error::Transport(format!("bind: {e}")))?;
            let addr = listener
                .local_addr()
                .map_err(|e| Error::Transport(format!("local_addr: {e}")))?;
            // Connect sequentially so accept order matches connect order;
            // identities are established by the hello handshake anyway.
            for _ in 0..shards.len() {
                let conns = std::thread::scope(|s| -> Result<(TcpConn, TcpConn)> {
                    let dial = s.spawn(move || {
                        TcpConn::connect(addr, 50, Duration::from_millis(20))
                    });
                    let accepted = accept_clients(&listener, 1)?.pop().unwrap();
                    let dialed = dial
                        .join()
                        .map_err(|_| Error::Transport("dialer thread panicked".into()))??;
                    Ok((accepted, dialed))
                })?;
                server_sides.push(Box::new(conns.0));
                client_sides.push(Box::new(conns.1));
            }
        }
    }

    let result: Result<(ParameterSet<F>, Vec<RoundMetrics>, Vec<Option<PersonalState<F>>>)> =
        std::thread::scope(|s| {
            let mut joins = Vec::with_capacity(shards.len());
            for (client_id, (mut conn, shard)) in
                client_sides.into_iter().zip(shards).enumerate()
            {
                joins.push(s.spawn(move || {
                    client_loop(
                        conn.as_mut(),
                        client_id as u32,
                        method,
                        arch,
                        dataset,
                        shard,
                        policy,
                        cfg,
                        DEFAULT_RECV_TIMEOUT,
                    )
                }));
            }

            let mut handles =
                register_clients(server_sides, cfg.total_clients, DEFAULT_RECV_TIMEOUT)?;
            let served = serve_rounds(
                &mut handles,
                method.personalized_eval(),
                arch,
                init,
                dataset,
                cfg,
                observer,
                DEFAULT_RECV_TIMEOUT,
            );
            // Always release the clients, even on a failed run, or the scope
            // would deadlock joining threads that are still blocked on recv.
            let shutdown = encode_message::<f32>(&Message::Shutdown);
            for h in &mut handles {
                let _ = h.conn.send(&shutdown);
            }
            let mut states = vec![None; shards.len()];
            let mut client_err = None;
            for (client_id, join) in joins.into_iter().enumerate() {
                match join.join() {
                    Ok(Ok(state)) => states[client_id] = state,
                    Ok(Err(e)) => client_err = Some(e),
                    Err(_) => {
                        client_err =
                            Some(Error::Transport(format!("client {client_id} panicked")))
                    }
                }
            }
            let (global, history) = served?;
            if let Some(e) = client_err {
                return Err(e);
            }
            Ok((global, history, states))
        });

    let (global, history, states) = result?;
    let personal: BTreeMap<usize, PersonalState<F>> = states
        .into_iter()
        .enumerate()
        .filter_map(|(id, s)| s.map(|s| (id, s)))
        .collect();
    Ok(TrainOutput {
        global,
        personal,
        history,
    })
}
