mod common;

use std::collections::BTreeSet;
use std::time::Duration;

use inot::actuation::{ActuationError, BackendClient, BindingTable, Credentials, ErrorKind, RetryPolicy, Status};
use inot::command::{Action, ControlCommand};
use inot::sim::{spawn_fleet, FaultPlan, FleetConfig, SimHandle};

use common::{read, room_dir};

const FAST: RetryPolicy = RetryPolicy {
    max_attempts: 3,
    base_backoff_ms: 1,
    multiplier: 2.0,
};

async fn fleet() -> (SimHandle, BackendClient) {
    let cfg = FleetConfig::from_json(&read(room_dir().join("fleet.json"))).unwrap();
    let sim = spawn_fleet(&cfg, 0).await.unwrap();
    let (client_id, secret) = sim.credentials();
    let client = BackendClient::new(&sim.base_url(), Credentials { client_id, secret });
    (sim, client)
}

/// `u-<device_id>` bound to each device.
fn bindings(ids: &[&str]) -> BindingTable {
    let mut t = BindingTable::new();
    for id in ids {
        t.bind(&format!("u-{id}"), id).unwrap();
    }
    t
}

fn cmd(device_id: &str, action: Action) -> ControlCommand {
    ControlCommand {
        uuid: format!("u-{device_id}"),
        action,
    }
}

const ALL: [&str; 5] = ["bf-light-a1", "bf-light-b2", "bf-light-c3", "bf-fan-d4", "bf-fan-e5"];

#[tokio::test]
async fn lists_fleet_and_state() {
    let (sim, client) = fleet().await;
    let devices = client.list_devices().await.unwrap();
    let ids: Vec<&str> = devices.iter().map(|d| d.device_id.as_str()).collect();
    let mut sorted = ALL.to_vec();
    sorted.sort();
    assert_eq!(ids, sorted, "listed in device_id order");
    assert!(devices.iter().all(|d| d.online && !d.state.on));

    client.send_command("bf-light-a1", Action::AdjustBrightness(30)).await.unwrap();
    let s = client.query_state("bf-light-a1").await.unwrap();
    assert_eq!((s.on, s.brightness), (true, Some(30)));
    let fan = client.query_state("bf-fan-d4").await.unwrap();
    assert_eq!((fan.brightness, fan.speed), (None, Some(1)));
    assert_eq!(sim.stats().await.auth_requests, 1, "token is cached across calls");
}

#[tokio::test]
async fn reauthenticates_after_token_loss() {
    let (sim, client) = fleet().await;
    client.send_command("bf-light-a1", Action::SwitchOn).await.unwrap();
    sim.expire_tokens().await;
    client.send_command("bf-light-a1", Action::SwitchOff).await.unwrap();
    assert_eq!(sim.stats().await.auth_requests, 2);

    // The server clock passes expiry while the client still trusts its token.
    sim.advance_clock(Duration::from_secs(7200)).await;
    let results = client
        .execute_all(&[cmd("bf-light-b2", Action::SwitchOn)], &bindings(&ALL), &FAST)
        .await;
    assert_eq!(results[0].status, Status::Success);
    assert_eq!(results[0].attempts, 1, "a 401 re-auth is not a retry");
    assert_eq!(sim.stats().await.auth_requests, 3);
    assert!(sim.device("bf-light-b2").await.unwrap().on);
}

#[tokio::test]
async fn bad_credentials() {
    let (sim, _) = fleet().await;
    let client = BackendClient::new(
        &sim.base_url(),
        Credentials {
            client_id: "inot".into(),
            secret: "wrong".into(),
        },
    );
    assert_eq!(client.authenticate().await, Err(ActuationError::AuthFailure));
    let r = client
        .execute_all(&[cmd("bf-fan-d4", Action::SwitchOn)], &bindings(&ALL), &FAST)
        .await;
    assert_eq!((r[0].status, r[0].error_kind, r[0].attempts), (Status::Failed, Some(ErrorKind::AuthFailure), 1));

    let (sim, client) = fleet().await;
    sim.inject_faults(FaultPlan {
        auth_reject: true,
        ..Default::default()
    })
    .await;
    assert_eq!(client.list_devices().await, Err(ActuationError::AuthFailure));
}

#[tokio::test]
async fn retries_are_exhausted_on_persistent_503() {
    let (sim, client) = fleet().await;
    sim.inject_faults(FaultPlan::transient(1.0, 0)).await;
    let r = client
        .execute_all(&[cmd("bf-fan-e5", Action::SwitchOn)], &bindings(&ALL), &FAST)
        .await;
    assert_eq!(r[0].status, Status::Failed);
    assert_eq!(r[0].error_kind, Some(ErrorKind::Timeout));
    assert_eq!(r[0].attempts, 3);
    let stats = sim.stats().await;
    assert_eq!((stats.command_requests, stats.transient_failures, stats.applied_commands), (3, 3, 0));
    assert!(!sim.device("bf-fan-e5").await.unwrap().on, "a 503 never applies the command");

    let single = RetryPolicy { max_attempts: 1, ..FAST };
    let r = client
        .execute_all(&[cmd("bf-fan-e5", Action::SwitchOn)], &bindings(&ALL), &single)
        .await;
    assert_eq!((r[0].error_kind, r[0].attempts), (Some(ErrorKind::Timeout), 1));
}

#[tokio::test]
async fn transient_faults_are_retried_and_accounted() {
    let (sim, client) = fleet().await;
    sim.inject_faults(FaultPlan::transient(0.5, 11)).await;
    let commands: Vec<ControlCommand> = (0..40).map(|i| cmd(ALL[i % 5], Action::Toggle)).collect();
    let results = client.execute_all(&commands, &bindings(&ALL), &FAST).await;
    let stats = sim.stats().await;

    let sent: u64 = results.iter().map(|r| u64::from(r.attempts)).sum();
    assert_eq!(sent, stats.command_requests);
    let failed_attempts: u64 = results
        .iter()
        .map(|r| match r.status {
            Status::Success => u64::from(r.attempts - 1),
            Status::Failed => u64::from(r.attempts),
        })
        .sum();
    assert_eq!(failed_attempts, stats.transient_failures);
    assert!(results.iter().any(|r| r.status == Status::Success && r.attempts == 2));
    assert!(results.iter().all(|r| r.status == Status::Success || r.attempts == 3));
    assert!(results
        .iter()
        .all(|r| r.status == Status::Success || r.error_kind == Some(ErrorKind::Timeout)));

    // Each device's final state is the parity of its successful toggles.
    for id in ALL {
        let toggles = results
            .iter()
            .filter(|r| r.command.uuid == format!("u-{id}") && r.status == Status::Success)
            .count();
        assert_eq!(sim.device(id).await.unwrap().on, toggles % 2 == 1, "{id}");
    }
}

#[tokio::test]
async fn fault_sequence_is_reproducible() {
    let mut runs = Vec::new();
    for _ in 0..2 {
        let (sim, client) = fleet().await;
        sim.inject_faults(FaultPlan::transient(0.3, 42)).await;
        let commands: Vec<ControlCommand> = (0..30).map(|i| cmd(ALL[i % 5], Action::SwitchOn)).collect();
        let results = client.execute_all(&commands, &bindings(&ALL), &FAST).await;
        let stats = sim.stats().await;
        runs.push((results, stats.transient_failures, stats.command_requests));
    }
    assert_eq!(runs[0], runs[1]);
}

#[tokio::test]
async fn failures_are_classified_and_never_rolled_back() {
    let (sim, client) = fleet().await;
    sim.inject_faults(FaultPlan {
        offline_ids: BTreeSet::from(["bf-fan-d4".to_string()]),
        ..Default::default()
    })
    .await;
    let mut table = bindings(&ALL);
    table.bind("u-ghost", "bf-missing").unwrap();
    let commands = [
        cmd("bf-light-a1", Action::SwitchOn),
        cmd("bf-fan-d4", Action::SwitchOn),
        cmd("ghost", Action::SwitchOn),
        ControlCommand {
            uuid: "u-unbound".into(),
            action: Action::SwitchOn,
        },
        cmd("bf-fan-e5", Action::AdjustBrightness(50)),
        cmd("bf-light-c3", Action::SwitchOn),
    ];
    let r = client.execute_all(&commands, &table, &FAST).await;
    let summary: Vec<(Status, Option<ErrorKind>, u32)> = r.iter().map(|r| (r.status, r.error_kind, r.attempts)).collect();
    assert_eq!(
        summary,
        [
            (Status::Success, None, 1),
            (Status::Failed, Some(ErrorKind::DeviceOffline), 1),
            (Status::Failed, Some(ErrorKind::ProtocolError), 1),
            (Status::Failed, Some(ErrorKind::UnboundDevice), 0),
            (Status::Failed, Some(ErrorKind::ProtocolError), 1),
            (Status::Success, None, 1),
        ]
    );
    assert!(sim.device("bf-light-a1").await.unwrap().on);
    assert!(sim.device("bf-light-c3").await.unwrap().on);
    let fan = sim.device("bf-fan-d4").await.unwrap();
    assert!(!fan.online && !fan.on);
    assert!(!sim.device("bf-fan-e5").await.unwrap().on);
    assert_eq!(sim.stats().await.applied_commands, 2);
}
