fn main() {
    let code = netfound_cli::run(std::env::args_os());
    std::process::exit(code);
}
