#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio::sync::oneshot;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use brrace_core::config::Config;
use brrace_gateway::protocol::{Envelope, MessageType};
use brrace_gateway::{Gateway, GatewayOptions};

pub fn schema() -> jsonschema::JSONSchema {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../schema/session-protocol.schema.json");
    let text = std::fs::read_to_string(&path).expect("schema file");
    let value: Value = serde_json::from_str(&text).expect("schema parses");
    jsonschema::JSONSchema::options()
        .with_draft(jsonschema::Draft::Draft7)
        .compile(&value)
        .expect("schema compiles")
}

pub fn assert_valid(schema: &jsonschema::JSONSchema, msg: &Value) {
    if let Err(errors) = schema.validate(msg) {
        let list: Vec<String> = errors.map(|e| format!("{} at {}", e, e.instance_path)).collect();
        panic!("message violates schema: {list:?}\n{msg}");
    }
}

/// Small planner so sessions keep up with wall-clock time on one core.
pub fn light_config() -> Config {
    let mut cfg = Config::default();
    cfg.mppi.samples = 24;
    cfg.mppi.horizon = 16;
    cfg.race.threads = Some(1);
    cfg
}

pub struct Server {
    pub addr: SocketAddr,
    pub gateway: Gateway,
    stop: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl Server {
    pub async fn start(options: GatewayOptions) -> Self {
        let gateway = Gateway::new(options).expect("gateway");
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = oneshot::channel::<()>();
        let task = tokio::spawn(gateway.clone().serve(listener, async move {
            let _ = rx.await;
        }));
        Self {
            addr,
            gateway,
            stop: Some(tx),
            task,
        }
    }

    pub async fn light() -> Self {
        Self::start(GatewayOptions::new(light_config())).await
    }

    pub async fn client(&self) -> Client {
        let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{}/session", self.addr))
            .await
            .expect("connect");
        Client {
            ws,
            seq: 0,
            schema: schema(),
        }
    }

    pub async fn health(&self) -> Value {
        let mut stream = TcpStream::connect(self.addr).await.unwrap();
        use tokio::io::{AsyncReadExt, AsyncWriteExt};
        stream
            .write_all(b"GET /health HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n")
            .await
            .unwrap();
        let mut buf = Vec::new();
        stream.read_to_end(&mut buf).await.unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("HTTP/1.1 200"), "{text}");
        let body = text.split("\r\n\r\n").nth(1).unwrap();
        serde_json::from_str(body).unwrap()
    }

    pub async fn stop(mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        self.task.await.unwrap().unwrap();
    }
}

pub struct Client {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
    pub seq: u64,
    schema: jsonschema::JSONSchema,
}

impl Client {
    pub async fn send(&mut self, kind: &str, payload: Value) -> u64 {
        self.seq += 1;
        let msg = json!({"type": kind, "seq": self.seq, "payload": payload});
        assert_valid(&self.schema, &msg);
        self.ws.send(Message::Text(msg.to_string())).await.unwrap();
        self.seq
    }

    pub async fn send_raw(&mut self, text: &str) {
        self.ws.send(Message::Text(text.to_string())).await.unwrap();
    }

    /// Next server message, validated against the shared schema. `None` once
    /// the server has closed the socket.
    pub async fn recv(&mut self) -> Option<Envelope> {
        loop {
            let msg = tokio::time::timeout(Duration::from_secs(10), self.ws.next())
                .await
                .expect("server went quiet")?;
            match msg {
                Ok(Message::Text(t)) => {
                    let value: Value = serde_json::from_str(&t).unwrap();
                    assert_valid(&self.schema, &value);
                    return Some(serde_json::from_value(value).unwrap());
                }
                Ok(Message::Close(_)) | Err(_) => return None,
                Ok(_) => continue,
            }
        }
    }

    /// Skips messages until one of type `kind` arrives.
    pub async fn expect(&mut self, kind: MessageType) -> Envelope {
        loop {
            let env = self.recv().await.expect("connection closed");
            if env.kind == kind {
                return env;
            }
        }
    }

    pub async fn create(&mut self, config: Option<&str>) -> Envelope {
        let payload = match config {
            Some(c) => json!({ "config": c }),
            None => json!({}),
        };
        self.send("create", payload).await;
        loop {
            let env = self.recv().await.expect("closed");
            if matches!(env.kind, MessageType::Create | MessageType::Fault) {
                return env;
            }
        }
    }

    pub async fn close(mut self) {
        let _ = self.ws.close(None).await;
    }
}
