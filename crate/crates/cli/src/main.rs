//! `callmesh` — one binary covering the operational surface of the
//! workspace: run the relay, talk to a relay, execute scenario files
//! against the deterministic simulator, and plan media topologies.
//!
//! Exit codes: 0 success, 1 runtime failure (API error, scenario step or
//! assertion failure), 2 usage/load/parse errors (clap uses 2 as well).

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use callmesh_client::RelayClient;
use callmesh_core::id::{AuthToken, ContactToken, NodeId, Target, UserId};
use callmesh_harness::scenario::Scenario;
use callmesh_harness::sim::Sim;
use callmesh_mesh::topology::{self, TopologyKind};
use callmesh_relay::http::{router, HttpClock, HttpState};
use callmesh_relay::persist::{FileStore, StoreOp};
use callmesh_relay::{DeliverOutcome, PushEnvelope, PushTransport, RelayService};

#[derive(Parser)]
#[command(
    name = "callmesh",
    version,
    about = "Serverless conference control-plane toolbox"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the push-relay HTTP server.
    Serve(ServeArgs),
    /// Append a `provision` record to a registry file (offline).
    Provision(ProvisionArgs),
    /// Ask a relay who a token belongs to.
    Login(ApiArgs),
    /// Register a push contact with a relay.
    Register(RegisterArgs),
    /// Send a push notification through a relay.
    Send(SendArgs),
    /// Execute a scenario file on the deterministic simulator.
    Simulate(SimulateArgs),
    /// Print the media-flow plan for a topology.
    PlanTopology(PlanArgs),
}

#[derive(Args)]
struct ServeArgs {
    /// TCP port to listen on.
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Address to bind.
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    /// Registry op-log; replayed on startup, appended to while serving.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Provision an account at startup: `email=auth-token` (repeatable).
    #[arg(long = "provision", value_name = "EMAIL=AUTH")]
    provision: Vec<String>,
}

#[derive(Args)]
struct ProvisionArgs {
    /// Registry op-log to append to (created if missing).
    #[arg(long)]
    store: PathBuf,
    /// Account address, e.g. `alice@example.com`.
    email: String,
    /// Auth token (UUID) the account will authenticate with.
    auth: String,
}

#[derive(Args)]
struct ApiArgs {
    /// Relay base URL, e.g. `http://127.0.0.1:8080`.
    #[arg(long)]
    relay: String,
    /// Bearer token identifying the account.
    #[arg(long)]
    auth: String,
}

#[derive(Args)]
struct RegisterArgs {
    #[command(flatten)]
    api: ApiArgs,
    /// Opaque push contact minted by the platform for this install.
    #[arg(long)]
    contact: String,
}

#[derive(Args)]
struct SendArgs {
    #[command(flatten)]
    api: ApiArgs,
    /// Recipient: `user@host` fans out, `user@host/instance` pins a device.
    #[arg(long)]
    to: String,
    /// Payload as a JSON object, e.g. `{"kind":"poke"}`.
    #[arg(long, default_value = "{}")]
    data: String,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario file (line-oriented DSL).
    #[arg(long)]
    scenario: PathBuf,
    /// Override the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the event log after the run.
    #[arg(long)]
    log: bool,
    /// Print the final overlay as Graphviz DOT.
    #[arg(long)]
    dot: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Mesh,
    Mcu,
    Sfu,
    Hybrid,
}

#[derive(Args)]
struct PlanArgs {
    /// Participant count; nodes are named p00, p01, ...
    #[arg(long)]
    n: usize,
    #[arg(long, value_enum)]
    kind: KindArg,
    /// Hub/forwarder count for sfu and hybrid (first nodes by name).
    #[arg(long, default_value_t = 2)]
    roles: usize,
    /// Direct pair for hybrid as `a,b` node names (default: last two).
    #[arg(long)]
    direct: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Serve(a) => serve(a),
        Cmd::Provision(a) => provision(a),
        Cmd::Login(a) => login(a),
        Cmd::Register(a) => register(a),
        Cmd::Send(a) => send(a),
        Cmd::Simulate(a) => return simulate(a),
        Cmd::PlanTopology(a) => plan_topology(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Print to stdout, exiting quietly if the reader closed the pipe (so
/// `callmesh ... | head` behaves like any other Unix tool).
fn emit(text: impl std::fmt::Display) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if let Err(e) = write!(out, "{text}") {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: writing stdout: {e}");
        std::process::exit(1);
    }
}

/// Push transport for a live server: print each delivery to stdout.
struct LogTransport;

impl PushTransport for LogTransport {
    fn deliver(&mut self, contact: &ContactToken, env: &PushEnvelope) -> DeliverOutcome {
        let data = serde_json::to_string(&env.data).unwrap_or_default();
        emit(format!(
            "push to={} from={} contact={} data={}\n",
            env.to,
            env.from,
            contact.as_str(),
            data
        ));
        DeliverOutcome::Delivered
    }
}

fn parse_pair(s: &str) -> Result<(UserId, AuthToken)> {
    let (email, auth) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("expected EMAIL=AUTH, got {s:?}"))?;
    Ok((UserId::new(email)?, AuthToken::new(auth)?))
}

fn serve(a: ServeArgs) -> Result<()> {
    let mut service = RelayService::new();
    let persist = match &a.store {
        Some(path) => {
            let store = FileStore::open(path)
                .with_context(|| format!("opening store {}", path.display()))?;
            let applied = store.replay(&mut service)?;
            eprintln!("replayed {applied} ops from {}", path.display());
            Some(store)
        }
        None => None,
    };
    for pair in &a.provision {
        let (user, auth) = parse_pair(pair)?;
        service.provision(user.clone(), auth.clone())?;
        if let Some(store) = &persist {
            store.append(&StoreOp::Provision { user, auth })?;
        }
    }

    let state = Arc::new(Mutex::new(HttpState {
        service,
        transport: Box::new(LogTransport),
        persist,
        clock: HttpClock::Wall,
    }));
    let app = router(state);

    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.bind.as_str(), a.port))
            .await
            .with_context(|| format!("binding {}:{}", a.bind, a.port))?;
        eprintln!("relay listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn provision(a: ProvisionArgs) -> Result<()> {
    let user = UserId::new(&a.email)?;
    let auth = AuthToken::new(&a.auth)?;
    let store = FileStore::open(&a.store)
        .with_context(|| format!("opening store {}", a.store.display()))?;
    // Replay first so a conflicting token is refused instead of poisoning
    // the log (replay treats invalid states as corruption).
    let mut svc = RelayService::new();
    store.replay(&mut svc)?;
    svc.provision(user.clone(), auth.clone())?;
    store.append(&StoreOp::Provision {
        user: user.clone(),
        auth,
    })?;
    emit(format!("provisioned {user}\n"));
    Ok(())
}

fn client(api: &ApiArgs) -> Result<RelayClient> {
    Ok(RelayClient::new(&api.relay, AuthToken::new(&api.auth)?))
}

fn login(a: ApiArgs) -> Result<()> {
    let user = client(&a)?.login()?;
    emit(format!("{user}\n"));
    Ok(())
}

fn register(a: RegisterArgs) -> Result<()> {
    let contact = ContactToken::new(&a.contact)?;
    let reg = client(&a.api)?.register(contact.as_str())?;
    emit(format!(
        "instance={} expires={}\n",
        reg.instance, reg.expires
    ));
    Ok(())
}

fn send(a: SendArgs) -> Result<()> {
    let to = Target::from_str(&a.to)?;
    let data: serde_json::Value =
        serde_json::from_str(&a.data).context("--data must be a JSON object")?;
    let serde_json::Value::Object(map) = data else {
        bail!("--data must be a JSON object")
    };
    let count = client(&a.api)?.send(&to, map)?;
    emit(format!("count={count}\n"));
    Ok(())
}

fn simulate(a: SimulateArgs) -> ExitCode {
    let text = match std::fs::read_to_string(&a.scenario) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: reading {}: {e}", a.scenario.display());
            return ExitCode::from(2);
        }
    };
    let sc = match Scenario::parse(&text) {
        Ok(sc) => sc,
        Err(e) => {
            eprintln!("error: {}: {e}", a.scenario.display());
            return ExitCode::from(2);
        }
    };
    let mut sim = match a.seed {
        Some(seed) => {
            let mut with_seed = sc.clone();
            with_seed.seed = seed;
            Sim::for_scenario(&with_seed)
        }
        None => Sim::for_scenario(&sc),
    };
    let outcome = sim.run(&sc);
    if a.log {
        emit(sim.render_log());
    }
    if a.dot {
        emit(sim.export_dot());
    }
    match outcome {
        Ok(()) => {
            eprintln!("scenario ok: {} steps, t={}ms", sc.steps.len(), sim.now());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("scenario failed: {e}");
            ExitCode::FAILURE
        }
    }
}

fn plan_topology(a: PlanArgs) -> Result<()> {
    if a.n == 0 {
        bail!("--n must be at least 1");
    }
    let names: Vec<NodeId> = (0..a.n)
        .map(|i| NodeId::new(format!("p{i:02}")).expect("generated names are valid"))
        .collect();
    let participants: BTreeSet<NodeId> = names.iter().cloned().collect();
    let roles: BTreeSet<NodeId> = names.iter().take(a.roles.max(1)).cloned().collect();

    let kind = match a.kind {
        KindArg::Mesh => TopologyKind::FullMesh,
        KindArg::Mcu => TopologyKind::Mcu(names[0].clone()),
        KindArg::Sfu => TopologyKind::Sfu(roles),
        KindArg::Hybrid => {
            let (x, y) = match &a.direct {
                Some(pair) => {
                    let (x, y) = pair
                        .split_once(',')
                        .ok_or_else(|| anyhow!("--direct expects two names like p01,p03"))?;
                    (NodeId::new(x)?, NodeId::new(y)?)
                }
                None if a.n >= 2 => (names[a.n - 2].clone(), names[a.n - 1].clone()),
                None => bail!("hybrid needs at least 2 participants"),
            };
            TopologyKind::Hybrid {
                sfu: roles,
                direct_pairs: BTreeSet::from([(x, y)]),
            }
        }
    };

    let plan = topology::plan(&participants, &kind)?;
    emit(format!(
        "participants={} edges={}\n",
        plan.n,
        plan.edges.len()
    ));
    for e in &plan.edges {
        emit(format!("  {} -> {}  [{}]\n", e.from, e.to, e.stream));
    }
    emit("accounting:\n");
    for (node, sr) in topology::account(&plan) {
        emit(format!(
            "  {node}: sends={} receives={}\n",
            sr.sends, sr.receives
        ));
    }
    let mut worst = 0;
    for x in &names {
        for y in &names {
            if x != y {
                worst = worst.max(topology::latency_hops(&plan, x, y)?);
            }
        }
    }
    emit(format!("max-latency-hops={worst}\n"));
    Ok(())
}
