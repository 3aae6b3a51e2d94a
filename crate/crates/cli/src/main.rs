fn main() {
    let default_config = std::env::var_os(unirewrite_cli::CONFIG_ENV).map(Into::into);
    std::process::exit(unirewrite_cli::run(std::env::args().collect(), default_config));
}
