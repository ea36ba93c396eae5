use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

/// Serve retrieval queries against one gallery.
#[derive(Debug, Parser)]
#[command(name = "effo-server", version)]
struct Args {
    /// Gallery .efvp file, loaded once at startup.
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
    host: IpAddr,
}

#[tokio::main]
async fn main() -> ExitCode {
    let args = Args::parse();
    match effo_server::serve(SocketAddr::new(args.host, args.port), args.gallery).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("effo-server: {e}");
            ExitCode::from(2)
        }
    }
}
