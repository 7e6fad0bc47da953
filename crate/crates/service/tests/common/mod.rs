#![allow(dead_code)]

use std::sync::Arc;

use nvs_core::{Model, TaeConfig};
use nvs_service::SessionStore;

pub struct Server {
    pub base: String,
    pub ws_base: String,
}

pub async fn spawn(default_model: Option<Model>) -> Server {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let store = Arc::new(SessionStore::new(default_model));
    tokio::spawn(nvs_service::serve(listener, store));
    Server {
        base: format!("http://{addr}"),
        ws_base: format!("ws://{addr}"),
    }
}

pub fn tiny_model() -> Model {
    let cfg = TaeConfig {
        n: 8,
        image_size: 16,
        enc_channels: vec![4, 4],
        dec_channels: vec![4, 4],
        ..TaeConfig::default()
    };
    Model::init(cfg, 11).unwrap()
}

pub async fn create(client: &reqwest::Client, base: &str, body: serde_json::Value) -> reqwest::Response {
    client.post(format!("{base}/session")).json(&body).send().await.unwrap()
}

pub async fn create_id(client: &reqwest::Client, base: &str, body: serde_json::Value) -> String {
    let resp = create(client, base, body).await;
    assert_eq!(resp.status(), 201);
    let v: serde_json::Value = resp.json().await.unwrap();
    v["id"].as_str().unwrap().to_string()
}
