use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = pmfs_cli::Cli::parse();
    let result = pmfs_cli::run(&cli);
    match &result {
        Ok(o) => print!("{}", o.report),
        Err(e) => eprintln!("error: {e}"),
    }
    std::process::exit(pmfs_cli::exit_code(&result));
}
