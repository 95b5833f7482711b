//! Client, wire schema and deterministic mocks for the annotator services.

pub mod client;
pub mod mock;
pub mod server;
pub mod wire;

pub use client::{
    AnnotatorDescriptor, Gateway, GatewayError, Limiter, Quarantine, QuarantineEntry, RetryPolicy,
    RoutingTransport, Transport, TransportError,
};
pub use server::{mock_router, serve_mocks, BackgroundServer, MockServer};
pub use mock::{region_key, MatcherTables, MockAnnotator, MockRegistry, MockWorld, Scene};
pub use wire::{AnnotatorRequest, AnnotatorResponse, Role};
