//! Federated averaging without any networking: three clients train locally
//! and the parameter server averages their models each round.

use std::collections::BTreeMap;

use fedmq::fl::{logistic, synth_dataset, Aggregator, FedAvg};
use fedmq::topic::Identifier;

fn main() {
    let dim = 4;
    let clients: Vec<(Identifier, _)> = ["clinic_a", "clinic_b", "clinic_c"]
        .iter()
        .enumerate()
        .map(|(i, name)| {
            (
                Identifier::new(*name).unwrap(),
                synth_dataset(100 + i as u64, 150 + 50 * i, dim, 4.0),
            )
        })
        .collect();
    let test = synth_dataset(999, 2000, dim, 4.0);

    let mut global = logistic::initial_parameters(dim);
    println!("round 0: accuracy {:.4}", logistic::accuracy(&global, &test).unwrap());
    for round in 1..=5 {
        let updates: BTreeMap<_, _> = clients
            .iter()
            .map(|(id, data)| (id.clone(), logistic::local_train(&global, data, 1, 0.05).unwrap()))
            .collect();
        global = FedAvg.aggregate(&updates).unwrap();
        println!(
            "round {round}: accuracy {:.4}, loss {:.4}, samples {}",
            logistic::accuracy(&global, &test).unwrap(),
            logistic::loss(&global, &test).unwrap(),
            global.num_samples()
        );
    }
    println!("weights {:?}", global.slice("weights").unwrap());
}
