"""OpenFlow 1.3 subset: wire codec, session state machine, capture records."""

from flowledger.ofwire.messages import (  # noqa: F401
    OFP_VERSION,
    OFPT_HELLO,
    OFPT_ERROR,
    OFPT_ECHO_REQUEST,
    OFPT_ECHO_REPLY,
    OFPT_FEATURES_REQUEST,
    OFPT_FEATURES_REPLY,
    OFPT_PACKET_IN,
    OFPT_PACKET_OUT,
    OFPT_FLOW_MOD,
    HEADER_LEN,
    OFP_NO_BUFFER,
    IncompleteMessage,
    MalformedMessage,
    InvariantViolation,
    OfHeader,
    OfMessage,
    Hello,
    Error,
    EchoRequest,
    EchoReply,
    FeaturesRequest,
    FeaturesReply,
    PacketIn,
    PacketOut,
    FlowMod,
    Passthrough,
    Match,
    Output,
    Flood,
    Drop,
    encode,
    decode,
    FrameBuffer,
)
from flowledger.ofwire.session import (  # noqa: F401
    SessionState,
    PeerRole,
    SessionFsm,
    Received,
    TimerTick,
    Send,
    Deliver,
    Disconnect,
    step,
)
