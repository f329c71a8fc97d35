//! Encoding packets, fixed-header overhead, and incremental decoding of a
//! byte stream that arrives in arbitrary chunks.

use fedmq::codec::{encode_packet, publish_overhead, Packet, Publish, QoS, StreamDecoder, MAX_REMAINING_LENGTH};

fn main() {
    let smallest = Publish::new("t", Vec::new());
    let bytes = encode_packet(&Packet::Publish(smallest.clone())).unwrap();
    println!("qos0 publish to a 1-byte topic, empty payload: {:02x?}", &bytes[..]);
    println!("non-payload overhead: {} bytes", publish_overhead(&smallest).unwrap());

    let mut big = Publish::new("trustroke/outcome/job_replies/clinic_a", vec![0u8; 100_000]);
    big.qos = QoS::AtLeastOnce;
    big.packet_id = Some(7);
    println!("qos1 100 kB update overhead: {} bytes", publish_overhead(&big).unwrap());
    println!("largest remaining length: {MAX_REMAINING_LENGTH}");

    // feed a stream of three packets one byte at a time
    let mut stream = Vec::new();
    for p in [Packet::PingReq, Packet::Publish(big), Packet::Disconnect] {
        stream.extend_from_slice(&encode_packet(&p).unwrap());
    }
    let mut decoder = StreamDecoder::new(MAX_REMAINING_LENGTH + 5);
    for byte in stream {
        decoder.push(&[byte]);
        while let Some(p) = decoder.next_packet().unwrap() {
            match p {
                Packet::Publish(p) => println!("decoded PUBLISH {} ({} payload bytes)", p.topic, p.payload.len()),
                other => println!("decoded {other:?}"),
            }
        }
    }
}
