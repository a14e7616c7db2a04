use clap::Parser;

fn main() {
    let cli = calib2stage_cli::Cli::parse();
    match calib2stage_cli::run(cli) {
        Ok(lines) => lines.iter().for_each(|l| println!("{l}")),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
