use tracing::warn;

use super::{ModelStore, StoreError};
use crate::codec::MAX_REMAINING_LENGTH;
use crate::payload::{
    decode_download_request, Envelope, EnvelopeKind, ModelDownloadReply, ModelListReply, ReplyStatus,
};
use crate::topic::{Channel, TopicPath};

/// Answers one request that arrived on `{fed}/{cep}/model_request/{client}`.
///
/// The reply always goes to `{fed}/{cep}/model_reply/{client}`, and every
/// failure is reported in-band with a status code. Queries are scoped by
/// the request topic's `(fed, cep)`, not by the envelope header.
/// Returns `None` only if `topic` is not a model-request topic.
pub fn handle_model_channel(store: &ModelStore, topic: &TopicPath, payload: &[u8]) -> Option<(TopicPath, Envelope)> {
    if topic.channel() != Channel::ModelRequest {
        return None;
    }
    let (fed, cep) = (topic.fed(), topic.cep());
    let client = topic.client()?;
    let reply_topic = TopicPath::model_reply(fed, cep, client);

    let list_reply = |status, entries| {
        Envelope::new(
            EnvelopeKind::ModelListReply,
            fed,
            cep,
            ModelListReply { status, entries }.encode(),
        )
        .with_client(client)
    };
    let download_reply = |status, version, model: Vec<u8>| {
        Envelope::new(
            EnvelopeKind::ModelDownloadReply,
            fed,
            cep,
            ModelDownloadReply {
                status,
                model_version: version,
                model,
            }
            .encode(),
        )
        .with_client(client)
        .with_version(version)
    };

    let request = match Envelope::decode(payload) {
        Ok(e) => e,
        Err(e) => {
            warn!(%topic, error = %e, "undecodable model request");
            return Some((reply_topic, list_reply(ReplyStatus::MalformedRequest, Vec::new())));
        }
    };

    let reply = match request.kind {
        EnvelopeKind::ModelListRequest if request.body.is_empty() => match store.list_models(fed, cep) {
            Ok(entries) => list_reply(ReplyStatus::Ok, entries),
            Err(e) => {
                warn!(%topic, error = %e, "model listing failed");
                list_reply(ReplyStatus::StorageFailure, Vec::new())
            }
        },
        EnvelopeKind::ModelDownloadRequest => match decode_download_request(&request.body) {
            Err(_) => download_reply(ReplyStatus::MalformedRequest, 0, Vec::new()),
            Ok(version) => match store.fetch_model(fed, cep, version) {
                Ok(model) => {
                    // publish framing: topic + length prefix + packet id
                    let framed = reply_topic.render().len() + 4 + 5 + request_overhead(&reply_topic) + model.len();
                    if framed > MAX_REMAINING_LENGTH {
                        download_reply(ReplyStatus::TooLarge, version, Vec::new())
                    } else {
                        download_reply(ReplyStatus::Ok, version, model)
                    }
                }
                Err(StoreError::UnknownVersion { .. }) => {
                    download_reply(ReplyStatus::UnknownVersion, version, Vec::new())
                }
                Err(StoreError::IntegrityFailure { .. }) => {
                    warn!(%topic, version, "refusing to serve corrupted model");
                    download_reply(ReplyStatus::IntegrityFailure, version, Vec::new())
                }
                Err(e) => {
                    warn!(%topic, version, error = %e, "model fetch failed");
                    download_reply(ReplyStatus::StorageFailure, version, Vec::new())
                }
            },
        },
        _ => list_reply(ReplyStatus::MalformedRequest, Vec::new()),
    };
    Some((reply_topic, reply))
}

fn request_overhead(reply_topic: &TopicPath) -> usize {
    let client_len = reply_topic.client().map_or(0, |c| c.as_str().len());
    crate::payload::FIXED_OVERHEAD + reply_topic.fed().as_str().len() + reply_topic.cep().as_str().len() + client_len
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl::logistic::initial_parameters;
    use crate::payload::encode_download_request;
    use crate::topic::Identifier;

    fn id(s: &str) -> Identifier {
        Identifier::new(s).unwrap()
    }

    fn setup() -> (tempfile::TempDir, ModelStore) {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelStore::open(dir.path()).unwrap();
        for r in 1..=3u32 {
            let body = initial_parameters(1).with_values(vec![r as f64, 0.0]).unwrap().encode();
            store
                .store_model(&id("f"), &id("c"), r, &[id("clientA")], &body)
                .unwrap();
        }
        (dir, store)
    }

    fn request_topic() -> TopicPath {
        TopicPath::model_request(&id("f"), &id("c"), &id("clientA"))
    }

    #[test]
    fn list_request_answers_on_own_reply_topic() {
        let (_d, store) = setup();
        let req = Envelope::new(EnvelopeKind::ModelListRequest, &id("f"), &id("c"), vec![]).with_client(&id("clientA"));
        let (topic, reply) = handle_model_channel(&store, &request_topic(), &req.encode()).unwrap();
        assert_eq!(topic.render(), "f/c/model_reply/clientA");
        assert_eq!(reply.kind, EnvelopeKind::ModelListReply);
        let body = ModelListReply::decode(&reply.body).unwrap();
        assert_eq!(body.status, ReplyStatus::Ok);
        assert_eq!(body.entries.len(), 3);
        assert_eq!(body.entries[2].contributors, vec![id("clientA")]);
    }

    #[test]
    fn download_passthrough_and_unknown_version() {
        let (_d, store) = setup();
        let req = Envelope::new(
            EnvelopeKind::ModelDownloadRequest,
            &id("f"),
            &id("c"),
            encode_download_request(2),
        );
        let (_, reply) = handle_model_channel(&store, &request_topic(), &req.encode()).unwrap();
        let body = ModelDownloadReply::decode(&reply.body).unwrap();
        assert_eq!(body.status, ReplyStatus::Ok);
        assert_eq!(body.model, store.fetch_model(&id("f"), &id("c"), 2).unwrap());

        let req = Envelope::new(
            EnvelopeKind::ModelDownloadRequest,
            &id("f"),
            &id("c"),
            encode_download_request(99),
        );
        let (_, reply) = handle_model_channel(&store, &request_topic(), &req.encode()).unwrap();
        assert_eq!(
            ModelDownloadReply::decode(&reply.body).unwrap().status,
            ReplyStatus::UnknownVersion
        );
    }

    #[test]
    fn malformed_requests_get_error_replies() {
        let (_d, store) = setup();
        for payload in [
            b"not an envelope".to_vec(),
            Envelope::new(EnvelopeKind::ModelDownloadRequest, &id("f"), &id("c"), vec![1]).encode(),
            Envelope::new(EnvelopeKind::LocalUpdate, &id("f"), &id("c"), vec![]).encode(),
        ] {
            let (topic, reply) = handle_model_channel(&store, &request_topic(), &payload).unwrap();
            assert_eq!(topic.render(), "f/c/model_reply/clientA");
            let status = match reply.kind {
                EnvelopeKind::ModelListReply => ModelListReply::decode(&reply.body).unwrap().status,
                EnvelopeKind::ModelDownloadReply => ModelDownloadReply::decode(&reply.body).unwrap().status,
                other => panic!("{other:?}"),
            };
            assert_eq!(status, ReplyStatus::MalformedRequest);
        }
    }

    #[test]
    fn queries_scoped_by_request_topic() {
        let (_d, store) = setup();
        // header names another federation; the topic's pair wins
        let req = Envelope::new(EnvelopeKind::ModelListRequest, &id("other"), &id("c"), vec![]);
        let topic = TopicPath::model_request(&id("g"), &id("c"), &id("clientA"));
        let (_, reply) = handle_model_channel(&store, &topic, &req.encode()).unwrap();
        assert!(ModelListReply::decode(&reply.body).unwrap().entries.is_empty());
        assert!(handle_model_channel(&store, &TopicPath::job_request(&id("f"), &id("c")), &[]).is_none());
    }
}
