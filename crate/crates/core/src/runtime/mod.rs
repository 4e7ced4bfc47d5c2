//! Server/client execution over real message passing.
//!
//! [`message`] defines the wire frames, [`transport`] the byte channels
//! (in-process loopback and TCP), and [`driver`] the round loop spoken over
//! them. The transcript of a distributed run is bit-identical to the
//! single-process loop in [`crate::fed`] for `f32` working precision, which
//! is what the equivalence tests pin down.

pub mod driver;
pub mod message;
pub mod transport;

pub use driver::{
    client_loop, register_clients, run_training_distributed, serve_rounds, ClientHandle,
    TransportKind, DEFAULT_RECV_TIMEOUT,
};
pub use message::{decode_message, encode_message, parse_header, Message, HEADER_LEN, SERVER_ID, WIRE_VERSION};
pub use transport::{accept_clients, loopback_pair, Connection, LoopbackConn, TcpConn};
