use clap::Parser;
use segdebias_cli::Cli;

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    if let Err(e) = segdebias_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
