use clap::Parser;

fn main() {
    let cli = cfsim_cli::Cli::parse();
    match cfsim_cli::run(cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e.report()).expect("serializable error"));
            std::process::exit(e.exit_code());
        }
    }
}
