//! Round-trip test: a real relay served over a loopback socket, exercised
//! through the blocking client.

use std::net::TcpListener;

use callmesh_client::{ClientError, RelayClient};
use callmesh_core::id::{AuthToken, Target, UserId};
use callmesh_relay::http::{router, shared_state, HttpClock};
use callmesh_relay::{RecordingTransport, RelayService};

const ALICE_AUTH: &str = "123e4567-e89b-12d3-a456-426614174000";
const BOB_AUTH_1: &str = "0f8fad5b-d9cb-469f-a165-70867728950e";
const BOB_AUTH_2: &str = "7c9e6679-7425-40de-944b-e07fc1f90ae7";

/// Serve a provisioned relay on an ephemeral loopback port; returns its
/// base URL. The server thread exits with the test process.
fn spawn_relay() -> String {
    let mut svc = RelayService::new();
    for (user, auth) in [
        ("alice@office.com", ALICE_AUTH),
        ("bob@home.com", BOB_AUTH_1),
        ("bob@home.com", BOB_AUTH_2),
    ] {
        svc.provision(UserId::new(user).unwrap(), AuthToken::new(auth).unwrap())
            .unwrap();
    }
    let state = shared_state(
        svc,
        Box::new(RecordingTransport::default()),
        HttpClock::Fixed(1_000),
    );

    let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
    let addr = listener.local_addr().unwrap();
    listener.set_nonblocking(true).unwrap();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).unwrap();
            axum::serve(listener, router(state)).await.unwrap();
        });
    });
    format!("http://{addr}")
}

#[test]
fn full_exchange_over_a_real_socket() {
    let base = spawn_relay();

    let alice = RelayClient::new(&base, AuthToken::new(ALICE_AUTH).unwrap());
    let bob1 = RelayClient::new(&base, AuthToken::new(BOB_AUTH_1).unwrap());
    let bob2 = RelayClient::new(&base, AuthToken::new(BOB_AUTH_2).unwrap());

    // Login identifies the account.
    assert_eq!(alice.login().unwrap().as_str(), "alice@office.com");
    assert_eq!(bob1.login().unwrap().as_str(), "bob@home.com");

    // Registration returns the pinned golden instance and a real expiry.
    let reg = alice.register("tokA").unwrap();
    assert_eq!(reg.instance.as_str(), "czb8ff");
    assert_eq!(reg.expires, 1_000 + 30 * 24 * 3_600 * 1_000);

    // Fan-out: both of Bob's devices hold live contacts.
    bob1.register("tokB").unwrap();
    bob2.register("tokC").unwrap();
    let to: Target = "bob@home.com".parse().unwrap();
    let mut data = serde_json::Map::new();
    data.insert("kind".into(), "invite".into());
    data.insert("invite".into(), "inv0000000001".into());
    assert_eq!(alice.send(&to, data.clone()).unwrap(), 2);

    // Pinned send reaches exactly the named instance.
    let pinned: Target = format!("bob@home.com/{}", bob1.register("tokB").unwrap().instance)
        .parse()
        .unwrap();
    assert_eq!(alice.send(&pinned, data.clone()).unwrap(), 1);

    // Typed errors carry the relay's status and message.
    let stranger = RelayClient::new(
        &base,
        AuthToken::new("99999999-9999-4999-8999-999999999999").unwrap(),
    );
    match stranger.login() {
        Err(ClientError::Api {
            status: 401,
            message,
        }) => assert_eq!(message, "unauthorized"),
        other => panic!("expected 401, got {other:?}"),
    }
    let unknown: Target = "nobody@nowhere.example".parse().unwrap();
    match alice.send(&unknown, data) {
        Err(ClientError::Api { status: 404, .. }) => {}
        other => panic!("expected 404, got {other:?}"),
    }
}
