//! Node roles and the round protocol.
//!
//! A calibration session pairs one center with K school nodes. Schools
//! enroll with HELLO, receive a SETUP, then answer PARAMS broadcasts in
//! lock-step — GRADS or LOGLIK replies in plain mode, MASKED_SHARE replies
//! in DP mode — until the center sends DONE. The same school and center
//! code runs over the in-process loopback pipe and over TCP.

pub mod center;
pub mod messages;
pub mod school;
pub mod transport;

pub use center::{
    center_fit_dp, center_fit_plain, DpFit, DpOptions, LocalSchool, ParamLayout, PlainFit,
    PlainOptions, RemoteSchool, SchoolHandle, SchoolReply,
};
pub use messages::{
    bank_from_vectors, bank_to_vectors, DpSetup, GradientMessage, ModelKind, Payload,
    RoundMessage, SessionSetup, PROTOCOL_VERSION,
};
pub use school::{school_round_dp, school_round_plain, school_session, SchoolCompute, SessionEnd};
pub use transport::{
    loopback_pair, recv_message, send_message, FrameIo, LoopbackPipe, TcpTransport,
    DEFAULT_TIMEOUT,
};
