use clap::Parser;

fn main() {
    // die quietly when stdout closes early (e.g. piped into `head`)
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = gitreid_cli::Cli::parse();
    if let Err(err) = gitreid_cli::run(cli) {
        eprintln!("error: {:#}", err);
        std::process::exit(1);
    }
}
