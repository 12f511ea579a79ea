//! `nets-server [ADDR]` serves the triple-store API. ADDR defaults to
//! `$NETS_BIND`, then `127.0.0.1:7878`.

use std::sync::Arc;

use nets_server::{serve, AppState};
use tracing_subscriber::EnvFilter;

const DEFAULT_BIND: &str = "127.0.0.1:7878";

#[tokio::main]
async fn main() -> std::io::Result<()> {
    tracing_subscriber::fmt().with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into())).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "-h" || a == "--help") {
        println!("usage: nets-server [ADDR]\n\nServes the triple-store HTTP API on ADDR (default $NETS_BIND or {DEFAULT_BIND}).");
        return Ok(());
    }
    if args.len() > 1 {
        eprintln!("usage: nets-server [ADDR]");
        std::process::exit(1);
    }
    let addr = args.first().cloned().or_else(|| std::env::var("NETS_BIND").ok()).unwrap_or_else(|| DEFAULT_BIND.into());
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    serve(listener, Arc::new(AppState::default())).await
}
