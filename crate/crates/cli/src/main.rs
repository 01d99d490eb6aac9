use clap::Parser;
use loadgp_cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        let report = serde_json::json!({ "error": { "code": e.code(), "message": e.to_string() } });
        eprintln!("{report}");
        std::process::exit(e.exit_code());
    }
}
