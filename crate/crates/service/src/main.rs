use std::net::SocketAddr;

use clap::Parser;

#[derive(Parser)]
#[command(name = "iguide-service", version, about = "Serve the iguide estimator over HTTP")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:7878")]
    bind: SocketAddr,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let listener = tokio::net::TcpListener::bind(args.bind).await?;
    println!("listening on http://{}", listener.local_addr()?);
    iguide_service::serve(listener).await?;
    Ok(())
}
