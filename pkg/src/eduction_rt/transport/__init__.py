"""Message transport: envelope framing, queue brokers, and agents."""
from .agent import (
    KEY_HEARTBEAT,
    KEY_IMPLEMENTATION,
    KEY_MAX_FRAME,
    KEY_PRIMARY,
    KEY_SECONDARY,
    KEY_SECRET,
    AllBrokersDown,
    MissingProperty,
    Timeout,
    TransportAgent,
    UnknownImplementation,
    create_agent,
)
from .core import BrokerClosed, BrokerCore, ExclusiveConflict, NotSubscribed
from .envelope import (
    DEFAULT_MAX_FRAME,
    EnvelopeKind,
    FrameTooLarge,
    MacMismatch,
    MalformedFrame,
    TransportEnvelope,
    TransportError,
    compute_mac,
    control_envelope,
    decode_frame,
    decode_tlv,
    encode_frame,
    encode_tlv,
    frame_with_length,
    unwrap_rpc,
    wrap_rpc,
)
from .inproc import InprocAgent, InprocBroker, lookup_broker, reset_brokers
from .netbroker import BrokerProcess, BrokerServer
from .tcp import TcpBrokerAgent

__all__ = [
    "AllBrokersDown",
    "BrokerClosed",
    "BrokerCore",
    "BrokerProcess",
    "BrokerServer",
    "DEFAULT_MAX_FRAME",
    "EnvelopeKind",
    "ExclusiveConflict",
    "FrameTooLarge",
    "InprocAgent",
    "InprocBroker",
    "KEY_HEARTBEAT",
    "KEY_IMPLEMENTATION",
    "KEY_MAX_FRAME",
    "KEY_PRIMARY",
    "KEY_SECONDARY",
    "KEY_SECRET",
    "MacMismatch",
    "MalformedFrame",
    "MissingProperty",
    "NotSubscribed",
    "TcpBrokerAgent",
    "Timeout",
    "TransportAgent",
    "TransportEnvelope",
    "TransportError",
    "UnknownImplementation",
    "compute_mac",
    "control_envelope",
    "create_agent",
    "decode_frame",
    "decode_tlv",
    "encode_frame",
    "encode_tlv",
    "frame_with_length",
    "lookup_broker",
    "reset_brokers",
    "unwrap_rpc",
    "wrap_rpc",
]
