//! Shared request/response corpus for the `/v1/logits` protocol. Any server
//! implementation can be checked against the same files.

use std::path::{Path, PathBuf};

use qdebias::image::decode_png_bytes;
use qdebias::oracle::stub::{StubResponse, StubServer};
use qdebias::oracle::wire::{error_message, parse_request, parse_response};
use qdebias::oracle::{BackendError, PromptKind};
use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/wire")
}

fn index() -> Value {
    serde_json::from_str(&std::fs::read_to_string(root().join("index.json")).unwrap()).unwrap()
}

fn read(entry: &Value) -> String {
    std::fs::read_to_string(root().join(entry["file"].as_str().unwrap())).unwrap()
}

#[test]
fn corpus_is_complete() {
    let idx = index();
    let listed: Vec<&str> = idx["requests"]
        .as_array()
        .unwrap()
        .iter()
        .chain(idx["responses"].as_array().unwrap())
        .map(|e| e["file"].as_str().unwrap())
        .collect();
    for sub in ["requests/valid", "requests/malformed", "responses/valid", "responses/invalid"] {
        for f in std::fs::read_dir(root().join(sub)).unwrap() {
            let name = format!("{sub}/{}", f.unwrap().file_name().to_string_lossy());
            assert!(listed.contains(&name.as_str()), "{name} missing from index.json");
        }
    }
    let valid_kinds: Vec<&str> = idx["requests"]
        .as_array()
        .unwrap()
        .iter()
        .filter_map(|e| e["kind"].as_str())
        .collect();
    for k in PromptKind::ALL {
        assert!(valid_kinds.contains(&k.as_str()), "no valid request for {k}");
    }
}

#[test]
fn requests_validate_or_reject_with_expected_status() {
    for entry in index()["requests"].as_array().unwrap() {
        let file = entry["file"].as_str().unwrap();
        let result = parse_request(&read(entry));
        match entry["kind"].as_str() {
            Some(kind) => {
                let (k, req) = result.unwrap_or_else(|r| panic!("{file}: {}", r.message));
                assert_eq!(k.as_str(), kind, "{file}");
                for png in req.decode_images().unwrap() {
                    decode_png_bytes(&png).unwrap_or_else(|e| panic!("{file}: {e}"));
                }
            }
            None => {
                let want = entry["status"].as_u64().unwrap() as u16;
                let r = result.err().unwrap_or_else(|| panic!("{file} was accepted"));
                assert_eq!(r.status, want, "{file}: {}", r.message);
            }
        }
    }
}

#[test]
fn responses_parse_under_the_client() {
    for entry in index()["responses"].as_array().unwrap() {
        let file = entry["file"].as_str().unwrap();
        let body = read(entry);
        match entry["logits"].as_array() {
            Some(want) => {
                let l = parse_response(&body).unwrap_or_else(|e| panic!("{file}: {e}"));
                assert_eq!(l.first, want[0].as_f64().unwrap(), "{file}");
                assert_eq!(l.second, want[1].as_f64().unwrap(), "{file}");
            }
            None => {
                assert!(matches!(parse_response(&body), Err(BackendError::Protocol(_))), "{file}");
                if let Some(msg) = entry["message"].as_str() {
                    assert_eq!(error_message(&body), msg, "{file}");
                }
            }
        }
    }
}

/// A conformance server built from the validator answers each fixture the
/// way the index expects when reached over HTTP.
#[test]
fn conformance_server_round_trip() {
    let server = StubServer::start(|_, req| match parse_request(&req.body) {
        Ok(_) => StubResponse::json(200, r#"{"logits":[0.5,-0.5],"model_id":"conformance"}"#),
        Err(r) => StubResponse::json(r.status, serde_json::json!({ "error": r.message }).to_string()),
    })
    .unwrap();
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into();
    let url = format!("{}/v1/logits", server.url());
    for entry in index()["requests"].as_array().unwrap() {
        let file = entry["file"].as_str().unwrap();
        let mut resp = agent
            .post(&url)
            .header("Content-Type", "application/json")
            .send(read(entry))
            .unwrap();
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().unwrap();
        if entry["kind"].is_string() {
            assert_eq!(status, 200, "{file}");
            parse_response(&body).unwrap();
        } else {
            assert_eq!(status as u64, entry["status"].as_u64().unwrap(), "{file}");
            assert!(!error_message(&body).is_empty());
        }
    }
}
