mod common;

use std::time::{Duration, Instant};

use common::{create_id, spawn};
use futures::{SinkExt, StreamExt};
use nvs_core::geometry::Vector3;
use nvs_core::{Image, RigidTransform};
use nvs_service::protocol::{decode_frame, encode_pose_message, FrameKind, PoseMessage};
use serde_json::json;
use tokio_tungstenite::tungstenite::Message;

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

fn turn(deg: f64) -> RigidTransform {
    let pivot = Vector3::new(0.0, 0.0, 3.0);
    let r = RigidTransform::rot_y(deg.to_radians()).r;
    RigidTransform {
        r,
        t: pivot - r * pivot,
    }
}

async fn open(seed: u64) -> (Ws, String, String) {
    let srv = spawn(None).await;
    let c = reqwest::Client::new();
    let id = create_id(&c, &srv.base, json!({"seed": seed})).await;
    let (ws, _) = tokio_tungstenite::connect_async(format!("{}/session/{id}/stream", srv.ws_base))
        .await
        .unwrap();
    (ws, srv.base, id)
}

async fn send_pose(ws: &mut Ws, seq: u32, pose: RigidTransform, kind: FrameKind) {
    let bytes = encode_pose_message(&PoseMessage { seq, pose, kind });
    ws.send(Message::Binary(bytes.into())).await.unwrap();
}

async fn next_frame(ws: &mut Ws) -> (u32, FrameKind, Vec<u8>) {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(30), ws.next())
            .await
            .expect("frame timeout")
            .unwrap()
            .unwrap();
        if let Message::Binary(b) = msg {
            let (seq, kind, payload) = decode_frame(&b).unwrap();
            return (seq, kind, payload.to_vec());
        }
    }
}

#[tokio::test]
async fn stream_frames_match_http_frames() {
    let (mut ws, base, id) = open(9).await;
    let pose = turn(7.0);
    send_pose(&mut ws, 5, pose, FrameKind::Color).await;
    let (seq, kind, png) = next_frame(&mut ws).await;
    assert_eq!((seq, kind), (5, FrameKind::Color));
    let http = reqwest::get(format!(
        "{base}/session/{id}/frame?pose={}",
        nvs_service::protocol::format_pose_param(&pose)
    ))
    .await
    .unwrap()
    .bytes()
    .await
    .unwrap();
    assert_eq!(png, http.to_vec());
    send_pose(&mut ws, 6, pose, FrameKind::Depth).await;
    let (seq, kind, png) = next_frame(&mut ws).await;
    assert_eq!((seq, kind), (6, FrameKind::Depth));
    assert_eq!(Image::decode_png(&png).unwrap().width, 64);
}

#[tokio::test]
async fn malformed_message_yields_error_frame_and_channel_stays_open() {
    let (mut ws, _, _) = open(2).await;
    ws.send(Message::Binary(vec![1, 0, 0, 0, 9].into())).await.unwrap();
    let (seq, kind, payload) = next_frame(&mut ws).await;
    assert_eq!((seq, kind), (1, FrameKind::Error));
    assert!(String::from_utf8(payload).unwrap().contains("pose message"));
    ws.send(Message::Text("hello".into())).await.unwrap();
    assert_eq!(next_frame(&mut ws).await.1, FrameKind::Error);
    send_pose(&mut ws, 2, RigidTransform::identity(), FrameKind::Color).await;
    assert_eq!(next_frame(&mut ws).await.1, FrameKind::Color);
}

#[tokio::test]
async fn flood_is_latest_wins_with_monotone_sequence() {
    let (mut ws, _, _) = open(4).await;
    for seq in 0..100u32 {
        send_pose(&mut ws, seq, turn(seq as f64 * 0.4), FrameKind::Color).await;
    }
    let mut seqs = Vec::new();
    loop {
        let (seq, kind, _) = next_frame(&mut ws).await;
        assert_eq!(kind, FrameKind::Color);
        seqs.push(seq);
        if seq == 99 {
            break;
        }
    }
    assert!(seqs.windows(2).all(|w| w[0] < w[1]), "{seqs:?}");
    assert!(seqs.len() <= 100);
    // nothing stale arrives after the newest pose
    assert!(tokio::time::timeout(Duration::from_millis(300), ws.next())
        .await
        .is_err());
}

#[tokio::test]
async fn oracle_stream_throughput_at_64px() {
    let (mut ws, _, _) = open(1).await;
    send_pose(&mut ws, 0, turn(0.0), FrameKind::Color).await;
    next_frame(&mut ws).await;
    let frames = 30u32;
    let started = Instant::now();
    for seq in 1..=frames {
        send_pose(&mut ws, seq, turn(seq as f64), FrameKind::Color).await;
        assert_eq!(next_frame(&mut ws).await.0, seq);
    }
    let fps = frames as f64 / started.elapsed().as_secs_f64();
    assert!(fps >= 10.0, "{fps:.1} fps");
}
