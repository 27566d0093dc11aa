fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(clinevent_cli::dispatch(&argv));
}
