//! Topic layout of a federation and what the canonical ACLs allow.

use fedmq::topic::{
    authorize, authorize_filter, canonical_client_acl, canonical_ps_acl, Action, Identifier, TopicFilter, TopicPath,
};

fn main() {
    let fed = Identifier::new("trustroke").unwrap();
    let cep = Identifier::new("outcome").unwrap();
    let a = Identifier::new("clinic_a").unwrap();
    let b = Identifier::new("clinic_b").unwrap();
    let pairs = [(fed.clone(), cep.clone())];

    let topics = [
        TopicPath::job_request(&fed, &cep),
        TopicPath::job_reply(&fed, &cep, &a),
        TopicPath::model_request(&fed, &cep, &a),
        TopicPath::model_reply(&fed, &cep, &a),
        TopicPath::job_reply(&fed, &cep, &b),
        TopicPath::model_reply(&fed, &cep, &b),
    ];

    let client = canonical_client_acl(&a, &pairs);
    let ps = canonical_ps_acl(&pairs);
    println!(
        "{:<40} {:>8} {:>8} {:>8} {:>8}",
        "topic", "a pub", "a sub", "ps pub", "ps sub"
    );
    for t in &topics {
        let s = t.render();
        let filter = TopicFilter::exact(t);
        println!(
            "{:<40} {:>8} {:>8} {:>8} {:>8}",
            s,
            authorize(&client, Action::Publish, &s),
            authorize_filter(&client, Action::Subscribe, &filter),
            authorize(&ps, Action::Publish, &s),
            authorize_filter(&ps, Action::Subscribe, &filter),
        );
    }

    // one wildcard subscription collects every client's update
    let all = TopicFilter::parse("trustroke/outcome/job_replies/#").unwrap();
    println!(
        "\nps may subscribe {all}: {}",
        authorize_filter(&ps, Action::Subscribe, &all)
    );
    println!(
        "clinic_a may subscribe {all}: {}",
        authorize_filter(&client, Action::Subscribe, &all)
    );
    for t in &topics[1..] {
        println!("{all} matches {}: {}", t.render(), all.matches(&t.render()));
    }
}
