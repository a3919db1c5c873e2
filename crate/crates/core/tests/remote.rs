use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use attrmem::backend::{BackendError, BackendProfile, ChatBackend, ChatRequest, RemoteChatBackend};
use attrmem::prompts::ResponseFormat;
use attrmem::retrieval::{Embedder, RemoteEmbedder};

/// Serves one canned response per connection and reports each request body.
fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/endpoint", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            tx.send(String::from_utf8(buf).unwrap()).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn request<'a>(prompt: &'a str) -> ChatRequest<'a> {
    ChatRequest {
        template_id: "t",
        format: ResponseFormat::PairList,
        payload: prompt,
        prompt,
    }
}

#[test]
fn chat_round_trip_and_errors() {
    let (url, rx) = serve(vec![
        (
            200,
            r#"{"choices":[{"message":{"role":"assistant","content":"[genre]<crime>"},"finish_reason":"stop"}]}"#.into(),
        ),
        (500, r#"{"error":"boom"}"#.into()),
        (
            200,
            r#"{"choices":[{"message":{"content":null,"refusal":"cannot help"}}]}"#.into(),
        ),
    ]);
    let mut profile = BackendProfile::remote("test-model", url);
    profile.temperature = Some(0.0);
    let backend = RemoteChatBackend::new(&profile).unwrap();

    assert_eq!(
        backend.complete(&request("Movie is: Heat")).unwrap(),
        "[genre]<crime>"
    );
    let sent: serde_json::Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
    assert_eq!(sent["model"], "test-model");
    assert_eq!(sent["messages"][0]["role"], "user");
    assert_eq!(sent["messages"][0]["content"], "Movie is: Heat");
    assert_eq!(sent["temperature"], 0.0);

    assert!(matches!(
        backend.complete(&request("x")),
        Err(BackendError::Transport(m)) if m.contains("500")
    ));
    assert!(matches!(
        backend.complete(&request("x")),
        Err(BackendError::Refusal(m)) if m == "cannot help"
    ));
}

#[test]
fn unreachable_endpoint_is_transport_failure() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let backend = RemoteChatBackend::new(&BackendProfile::remote(
        "m",
        format!("http://127.0.0.1:{port}/"),
    ))
    .unwrap();
    assert!(matches!(
        backend.complete(&request("x")),
        Err(BackendError::Transport(_))
    ));
}

#[test]
fn embeddings_round_trip() {
    let (url, rx) = serve(vec![
        (200, r#"{"data":[{"embedding":[3.0,4.0]}]}"#.into()),
        (200, r#"{"data":[{"embedding":[1.0,0.0,0.0]}]}"#.into()),
    ]);
    let emb = RemoteEmbedder::new(&BackendProfile::remote("e", url), Some(2)).unwrap();
    let v = emb.embed("hello").unwrap();
    assert_eq!(v.values(), &[0.6, 0.8]);
    let sent: serde_json::Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
    assert_eq!(sent["input"], "hello");
    assert!(emb.embed("again").is_err());
}
