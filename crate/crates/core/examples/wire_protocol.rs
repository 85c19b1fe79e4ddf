//! Encodes each message kind, prints the frame, and shows how corrupted
//! frames are rejected.

use fedpda::federation::{
    decode_message, encode_message, AvgGradient, FedMessage, NodeId, RoundCommand, HEADER_LEN,
};
use fedpda::numerics::{GradientVector, ParamVector};

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(" ")
}

fn main() {
    let messages = [
        FedMessage::ModelBroadcast {
            round: 7,
            params: ParamVector::new(vec![0.5, -1.0, 2.0]),
        },
        FedMessage::AvgGradient(AvgGradient {
            round: 3,
            node: NodeId(2),
            grad: GradientVector::new(vec![1.5, -2.0]),
        }),
        FedMessage::RoundControl {
            round: 4,
            command: RoundCommand::Start,
        },
        FedMessage::ModelUpload {
            round: 1,
            node: NodeId(5),
            params: ParamVector::new(vec![0.25]),
        },
    ];
    for msg in &messages {
        let frame = encode_message(msg);
        assert_eq!(decode_message(&frame).as_ref(), Ok(msg));
        println!("{} ({} bytes)\n  {}", msg.kind(), frame.len(), hex(&frame));
    }

    let good = encode_message(&messages[1]);
    let mut flipped = good.clone();
    flipped[HEADER_LEN] ^= 0x01;
    let mut wrong_tag = good.clone();
    wrong_tag[5] = 9;
    println!();
    for (what, bytes) in [
        ("bit flip in payload", flipped),
        ("unknown tag", wrong_tag),
        ("truncated", good[..good.len() - 3].to_vec()),
        ("trailing byte", [good.clone(), vec![0]].concat()),
    ] {
        println!("{what:<20} -> {}", decode_message(&bytes).unwrap_err());
    }
}
