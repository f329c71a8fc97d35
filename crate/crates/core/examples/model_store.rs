//! Versioned model persistence and the integrity check on read.

use fedmq::fl::logistic;
use fedmq::store::{ModelStore, StoreError};
use fedmq::topic::Identifier;

fn main() -> Result<(), StoreError> {
    let dir = std::env::temp_dir().join(format!("fedmq-store-example-{}", std::process::id()));
    let store = ModelStore::open(&dir)?;
    let fed = Identifier::new("trustroke").unwrap();
    let cep = Identifier::new("outcome").unwrap();
    let contributors: Vec<Identifier> = ["clinic_a", "clinic_b"]
        .iter()
        .map(|c| Identifier::new(*c).unwrap())
        .collect();

    for round in 1..=3 {
        let body = logistic::initial_parameters(4).with_num_samples(round).encode();
        let rec = store.store_model(&fed, &cep, round as u32, &contributors, &body)?;
        println!("stored version {} for round {}", rec.model_version, rec.round);
    }
    print!("{}", store.describe(&fed, &cep)?);

    // flip one bit of the newest body on disk
    let latest = store.latest_version(&fed, &cep)?;
    let path = dir.join("trustroke/outcome").join(format!("{latest:010}.model"));
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    match store.fetch_model(&fed, &cep, latest) {
        Err(e) => println!("after corruption: {e}"),
        Ok(_) => println!("corruption went unnoticed"),
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
