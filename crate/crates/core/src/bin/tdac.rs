fn main() {
    std::process::exit(tdac::cli::cli_dispatch(std::env::args_os()));
}
