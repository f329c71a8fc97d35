//! Model parameters inside an application envelope, with and without
//! compression.

use fedmq::fl::logistic;
use fedmq::payload::{Envelope, EnvelopeKind};
use fedmq::topic::Identifier;

fn main() {
    let fed = Identifier::new("trustroke").unwrap();
    let cep = Identifier::new("outcome").unwrap();
    let client = Identifier::new("clinic_a").unwrap();

    let params = logistic::initial_parameters(64).with_num_samples(200);
    for compress in [false, true] {
        let env = Envelope::new(EnvelopeKind::LocalUpdate, &fed, &cep, params.encode())
            .with_client(&client)
            .with_round(3)
            .with_version(2)
            .compressed(compress);
        let wire = env.encode();
        let back = Envelope::decode(&wire).unwrap();
        assert_eq!(back.parameters().unwrap(), params);
        println!(
            "compressed={compress:<5} body {:>5} bytes, envelope {:>5} bytes, header overhead {} bytes",
            params.encode().len(),
            wire.len(),
            env.overhead()
        );
    }

    let mut wire = Envelope::new(EnvelopeKind::GlobalModel, &fed, &cep, params.encode()).encode();
    wire[0] ^= 0xff;
    println!("corrupted magic: {}", Envelope::decode(&wire).unwrap_err());
}
